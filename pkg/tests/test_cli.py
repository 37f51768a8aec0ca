import csv
import io
import subprocess
import sys

import pytest

from qcfs.cli import main
from qcfs.data import load_checkpoint

BLOBS = ["--dataset", "blobs", "--blob-classes", "3", "--blob-dim", "4", "--blob-per-class", "60"]


def run_cli(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def ann_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "ann.ckpt"
    assert main(["train", "--arch", "mlp", "--hidden", "32", "--L", "4", "--epochs", "15",
                 "--seed", "1", "--out", str(path)] + BLOBS) == 0
    return path


@pytest.fixture(scope="module")
def snn_path(ann_path):
    path = ann_path.parent / "snn.ckpt"
    assert main(["convert", "--in", str(ann_path), "--out", str(path)]) == 0
    return path


def test_train_smoke(tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    code, text, _ = run_cli(capsys, "train", "--arch", "mlp", "--dataset", "blobs", "--L", "4",
                            "--epochs", "20", "--seed", "1", "--out", str(out))
    assert code == 0 and out.exists()
    assert "test_accuracy=" in text
    assert text.splitlines()[0] == "epoch,train_loss,train_acc,test_acc,lr"


@pytest.mark.parametrize("argv", [["--L", "0"], ["--L", "x"], ["--shift", "1.5"], ["--arch", "vgg"]])
def test_train_argument_errors(tmp_path, capsys, argv):
    code, _, err = run_cli(capsys, "train", "--out", str(tmp_path / "x"), *BLOBS, *argv)
    assert code == 1
    assert "error" in err


def test_no_command_is_usage_error(capsys):
    assert run_cli(capsys)[0] == 1


def test_train_noshift_variant(tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    code, _, _ = run_cli(capsys, "train", "--shift", "0", "--epochs", "1", "--out", str(out), *BLOBS)
    assert code == 0
    m = load_checkpoint(out)
    assert {l.activation for l in m.layers if l.kind == "activation"} == {"qcf_noshift"}
    assert all(p.shift == 0.0 for p in m.qcfs.values())


def test_conv_small_needs_images(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train", "--arch", "conv-small", "--epochs", "1",
                           "--out", str(tmp_path / "x"), *BLOBS)
    assert code == 1 and "conv-small" in err


def test_missing_mnist(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "x"))
    assert code == 2
    assert "download" in err


def test_train_deterministic(tmp_path, capsys):
    paths = [tmp_path / f"{i}.ckpt" for i in range(2)]
    for p in paths:
        run_cli(capsys, "train", "--epochs", "2", "--seed", "3", "--out", str(p), *BLOBS)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_convert_defaults(ann_path, snn_path):
    ann, snn = load_checkpoint(ann_path), load_checkpoint(snn_path)
    for i, p in ann.qcfs.items():
        assert snn.theta[i] == p.lam
        assert snn.v0[i] == p.lam / 2


def test_convert_zero_v0(ann_path, tmp_path, capsys):
    out = tmp_path / "z.ckpt"
    assert run_cli(capsys, "convert", "--in", str(ann_path), "--out", str(out), "--v0-mode", "zero")[0] == 0
    assert all(v == 0 for v in load_checkpoint(out).v0.values())


def test_convert_max_act(ann_path, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    code, _, _ = run_cli(capsys, "convert", "--in", str(ann_path), "--out", str(out),
                         "--threshold-mode", "max-act", *BLOBS)
    assert code == 0
    snn = load_checkpoint(out)
    assert snn.meta["threshold_mode"] == "max-act"


def test_convert_wrong_kind(snn_path, tmp_path, capsys):
    code, _, err = run_cli(capsys, "convert", "--in", str(snn_path), "--out", str(tmp_path / "x"))
    assert code == 2
    assert "ANN" in err and "snn" in err


def test_eval_dedupes_t_list(snn_path, capsys):
    code, out, _ = run_cli(capsys, "eval", "--model", str(snn_path), "--T-list", "8,1,8,2,64", *BLOBS)
    assert code == 0
    table = rows(out)
    assert [r["T"] for r in table] == ["1", "2", "8", "64"]
    acc = {int(r["T"]): float(r["accuracy"]) for r in table}
    assert acc[64] >= acc[1]


def test_eval_ann_single_row(ann_path, capsys):
    code, out, _ = run_cli(capsys, "eval", "--ann", "--model", str(ann_path), *BLOBS)
    table = rows(out)
    assert code == 0 and len(table) == 1 and table[0]["T"] == "ann"


def test_eval_to_file(snn_path, tmp_path, capsys):
    out = tmp_path / "acc.csv"
    run_cli(capsys, "eval", "--model", str(snn_path), "--T-list", "1,4", "--out", str(out), *BLOBS)
    assert rows(out.read_text())[1]["T"] == "4"


def test_sweep_l_grid(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "sweep-L", "--L-list", "2,4", "--T-list", "1,4,16", "--epochs", "2",
                           "--hidden", "8", *BLOBS)
    assert code == 0
    table = rows(out)
    assert len(table) == 6
    assert {(r["L"], r["T"]) for r in table} == {(l, t) for l in "24" for t in ("1", "4", "16")}


def test_verify_unevenness(capsys):
    code, out, _ = run_cli(capsys, "verify", "unevenness")
    assert code == 0
    assert "phi=0.4" in out and "phi=0.8" in out and "phi=0.2" in out


def test_verify_conversion_error(capsys):
    assert run_cli(capsys, "verify", "theorem2", "--T", "8", "--L", "4", "--samples", "200000")[0] == 0


def test_verify_failure_exit_code(capsys):
    code, out, _ = run_cli(capsys, "verify", "theorem2", "--T", "8", "--L", "4", "--shift", "0")
    assert code == 3 and "FAIL" in out


@pytest.mark.parametrize("check", ["eq12", "lemma1", "theorem1"])
def test_verify_other_checks(capsys, check):
    assert run_cli(capsys, "verify", check, "--samples", "100000")[0] == 0


def test_energy_csv(ann_path, snn_path, capsys):
    code, out, _ = run_cli(capsys, "energy", "--ann", str(ann_path), "--snn", str(snn_path), "--T", "8", *BLOBS)
    assert code == 0
    table = {r["kind"]: r for r in rows(out)}
    assert int(table["ann_flops"]["ops"]) == 2 * (4 * 32 + 32 * 3)
    assert float(table["ann_flops"]["energy_joules"]) == pytest.approx(2 * (4 * 32 + 32 * 3) * 12.5e-12)


def test_energy_grows_with_t(ann_path, snn_path, capsys):
    energies = []
    for T in ("2", "8", "32"):
        _, out, _ = run_cli(capsys, "energy", "--ann", str(ann_path), "--snn", str(snn_path), "--T", T, *BLOBS)
        energies.append(float({r["kind"]: r for r in rows(out)}["snn_sops"]["energy_joules"]))
    assert energies == sorted(energies)


def test_console_script_module_entry():
    proc = subprocess.run([sys.executable, "-m", "qcfs.cli", "verify", "unevenness"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
