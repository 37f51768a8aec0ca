"""Command-line entry point: train, convert, eval, sweep-L, verify, energy.

Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import analysis
from .converter import convert, max_activation_threshold
from .data import load_checkpoint, load_mnist, save_checkpoint, synth_blobs
from .errors import QcfsError, UsageError
from .network import build_conv_small, build_mlp, transform_to_qcfs
from .simulator import accuracy_over_time
from .trainer import TrainConfig, accuracy, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_T_LIST = "1,2,4,8,16,32,64"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("list must contain positive integers")
    return sorted(set(vals))


def _shift(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"shift must lie in [0, 1), got {v}")
    return v


# ---------------------------------------------------------------------------
# datasets


def _add_data_args(p):
    p.add_argument("--dataset", choices=("mnist", "blobs"), default="mnist")
    p.add_argument("--data-dir", default=None, help="MNIST directory (default: $QCFS_DATA_DIR or ~/data/mnist)")
    p.add_argument("--blob-classes", type=_positive_int, default=4)
    p.add_argument("--blob-dim", type=_positive_int, default=8)
    p.add_argument("--blob-per-class", type=_positive_int, default=100)
    p.add_argument("--blob-spread", type=float, default=0.3)
    p.add_argument("--blob-seed", type=int, default=0)
    p.add_argument("--limit", type=_positive_int, default=None, help="use only the first N samples")


def _load(args, split: str):
    if args.dataset == "mnist":
        ds = load_mnist(args.data_dir, split)
    else:
        n = args.blob_per_class if split == "train" else max(1, args.blob_per_class // 2)
        ds = synth_blobs(n, args.blob_classes, args.blob_dim, args.blob_spread, args.blob_seed, split)
    return ds.subset(args.limit)


def _build(args, train_set):
    shape = train_set.inputs.shape[1:]
    if args.arch == "mlp":
        hidden = tuple(int(h) for h in args.hidden.split(","))
        base = build_mlp(shape, hidden, train_set.n_classes, seed=args.seed)
    else:
        if len(shape) != 3:
            raise UsageError("conv-small needs image input; use --dataset mnist")
        base = build_conv_small(shape, train_set.n_classes, seed=args.seed)
    return transform_to_qcfs(base, args.L, shift=args.shift)


def _train_one(args, L: int, tr, te, log="stdout"):
    args.L = L
    model = _build(args, tr)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr0,
                      seed=args.seed, L=L, shift=args.shift)
    best, _ = train(model, tr, cfg, te, out=log)
    return best


def _add_train_args(p):
    p.add_argument("--arch", choices=("mlp", "conv-small"), default="mlp")
    p.add_argument("--hidden", default="100", help="comma-separated hidden widths for mlp")
    p.add_argument("--shift", type=_shift, default=0.5)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--lr0", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    tr, te = _load(args, "train"), _load(args, "test")
    best = _train_one(args, args.L, tr, te)
    save_checkpoint(best, args.out)
    print(f"train_accuracy={accuracy(best, tr):.6f} test_accuracy={accuracy(best, te):.6f} "
          f"checkpoint={args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    ann = load_checkpoint(args.inp, expect="ann")
    thresholds = None
    if args.threshold_mode == "max-act":
        thresholds = max_activation_threshold(ann, _load(args, "train"))
    shift_override = 0.0 if args.v0_mode == "zero" else None
    snn = convert(ann, shift_override=shift_override, thresholds=thresholds)
    save_checkpoint(snn, args.out)
    for i in snn.spiking_layers:
        print(f"layer {i}: theta={snn.theta[i]:.6g} v0={snn.v0[i]:.6g}")
    return EXIT_OK


def _write_rows(header, rows, path):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_eval(args) -> int:
    te = _load(args, "test")
    if args.ann:
        model = load_checkpoint(args.model, expect="ann")
        _write_rows(["T", "accuracy"], [["ann", f"{accuracy(model, te):.6f}"]], args.out)
        return EXIT_OK
    snn = load_checkpoint(args.model, expect="snn")
    accs = accuracy_over_time(snn, te, args.T_list)
    _write_rows(["T", "accuracy"], [[t, f"{a:.6f}"] for t, a in accs.items()], args.out)
    return EXIT_OK


def cmd_sweep_L(args) -> int:
    tr, te = _load(args, "train"), _load(args, "test")
    rows = []
    for L in args.L_list:
        best = _train_one(args, L, tr, te, log=sys.stderr)
        accs = accuracy_over_time(convert(best), te, args.T_list)
        rows += [[L, t, f"{a:.6f}"] for t, a in accs.items()]
    _write_rows(["L", "T", "accuracy"], rows, args.out)
    return EXIT_OK


def _verify_quant_error(args):
    mean, se = analysis.quant_error_montecarlo(args.T, 1.0, args.samples, args.seed)
    ok = analysis.passes_zero_test(mean, se)
    lines = [f"lemma1 uniform T={args.T}: mean={mean:.3e} stderr={se:.3e} -> {'PASS' if ok else 'FAIL'}"]
    dens = np.ones(args.T + 1)
    dens[0] = 3.0
    mean, se = analysis.quant_error_montecarlo(args.T, 1.0, args.samples, args.seed + 1, dens)
    expect = analysis.quant_error_expected_mean(args.T, 1.0, dens)
    ok2 = abs(mean - expect) <= analysis.ZERO_TEST_SIGMAS * se
    lines.append(f"lemma1 skewed T={args.T}: mean={mean:.3e} expected={expect:.3e} stderr={se:.3e} "
                 f"-> {'PASS' if ok2 else 'FAIL'}")
    return ok and ok2, lines


def _verify_conversion_error(args):
    mean, se = analysis.conversion_error_montecarlo(args.T, args.L, 1.0, 1.0, args.shift, args.samples, args.seed)
    ok = analysis.passes_zero_test(mean, se)
    return ok, [f"theorem2 T={args.T} L={args.L} shift={args.shift}: mean={mean:.3e} stderr={se:.3e} "
                f"-> {'PASS' if ok else 'FAIL'}"]


def _verify_membrane_bound(args):
    r = analysis.membrane_bound_check(n_nets=50, T=64, seed=args.seed)
    return r["passed"], [f"theorem3 nets={r['nets']} T={r['T']}: max v/theta={r['max_v_over_theta']:.9f} "
                         f"violations={r['violations']} -> {'PASS' if r['passed'] else 'FAIL'}"]


def _verify_unevenness(args):
    rows = analysis.unevenness_demo()
    lines = [f"{r['scenario']}: spikes at {list(r['output_spikes'])} phi={r['phi']:.1f} "
             f"(ann {r['ann']:.1f})" for r in rows]
    return all(r["ok"] for r in rows), lines


def _verify_closed_form(args):
    mism = analysis.closed_form_grid_check()
    lines = [f"eq12 T={T} v0={frac}*theta: mismatches={n}" for (T, frac), n in mism.items()]
    return all(n == 0 for n in mism.values()), lines


def _verify_exact_conversion(args):
    res = analysis.exact_conversion_check(seed=args.seed)
    lines = [f"theorem1 T=L={L} {variant}: max|err|={e:.3e}" for (L, variant), e in res.items()]
    return all(e == 0 for e in res.values()), lines


VERIFIERS = {"lemma1": _verify_quant_error, "theorem2": _verify_conversion_error, "theorem3": _verify_membrane_bound,
             "unevenness": _verify_unevenness, "eq12": _verify_closed_form, "theorem1": _verify_exact_conversion}


def cmd_verify(args) -> int:
    ok, lines = VERIFIERS[args.check](args)
    for line in lines:
        print(line)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_energy(args) -> int:
    ann = load_checkpoint(args.ann, expect="ann")
    snn = load_checkpoint(args.snn, expect="snn")
    r = analysis.energy_report(ann, snn, _load(args, "test"), args.T)
    _write_rows(["kind", "ops", "energy_joules"],
                [["ann_flops", r["flops"], repr(r["ann_energy_J"])],
                 ["snn_sops", repr(r["sops"]), repr(r["snn_energy_J"])]], args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qcfs", description="QCFS ANN training and ANN-to-SNN conversion")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a QCFS ANN and write a checkpoint")
    _add_train_args(p)
    p.add_argument("--L", type=_positive_int, default=4, help="quantization steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert an ANN checkpoint into an SNN checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--v0-mode", choices=("shift", "zero"), default="shift")
    p.add_argument("--threshold-mode", choices=("lambda", "max-act"), default="lambda")
    _add_data_args(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="accuracy versus simulation length")
    p.add_argument("--model", required=True)
    p.add_argument("--T-list", dest="T_list", type=_int_list, default=_int_list(DEFAULT_T_LIST))
    p.add_argument("--ann", action="store_true", help="evaluate an ANN checkpoint instead")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-L", help="train/convert/evaluate one model per L")
    _add_train_args(p)
    p.add_argument("--L-list", dest="L_list", type=_int_list, default=[2, 4, 8])
    p.add_argument("--T-list", dest="T_list", type=_int_list, default=_int_list(DEFAULT_T_LIST))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_L)

    p = sub.add_parser("verify", help="run a theory check; exit 3 on failure")
    p.add_argument("check", choices=sorted(VERIFIERS))
    p.add_argument("--samples", type=_positive_int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=_positive_int, default=8)
    p.add_argument("--L", type=_positive_int, default=4)
    p.add_argument("--shift", type=_shift, default=0.5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("energy", help="FLOP/SOP energy estimate")
    p.add_argument("--ann", required=True)
    p.add_argument("--snn", required=True)
    p.add_argument("--T", type=_positive_int, default=32)
    p.add_argument("--out", default=None)
    _add_data_args(p)
    p.set_defaults(func=cmd_energy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except QcfsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
