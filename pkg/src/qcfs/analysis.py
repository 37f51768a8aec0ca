"""Conversion-error measurements, Monte Carlo checks and energy accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .activation import QcfsParams
from .converter import convert, positive_weight_sum_thresholds
from .errors import UsageError
from .network import (AnnModel, SnnModel, act, dense, forward_graph, init_params)
from .simulator import if_neuron_constant, linear_forward, run, spike_timing_run

SOP_ENERGY_J = 77e-15
FLOP_ENERGY_J = 12.5e-12
ZERO_TEST_SIGMAS = 4.0


def estimated_phi(z, T: int, theta: float, v0) -> np.ndarray:
    """Closed-form average PSP of an IF neuron under constant charge ``z``."""
    if T < 1 or not theta > 0:
        raise UsageError("estimated_phi needs T >= 1 and theta > 0")
    z = np.asarray(z, dtype=np.float64)
    return theta * np.clip(np.floor((z * T + v0) / theta) / T, 0.0, 1.0)


def clip_floor_map(a, T: int, theta: float, lam: float) -> np.ndarray:
    """Map ANN activations onto the SNN's ``theta/T`` grid, clipped to [0, theta]."""
    if T < 1:
        raise UsageError("T must be >= 1")
    a = np.asarray(a, dtype=np.float64)
    return np.clip(theta / T * np.floor(a * T / lam), 0.0, theta)


@dataclass
class LayerErrorReport:
    layer: int
    err: np.ndarray
    est_err: np.ndarray
    mean_abs: float
    max_abs: float
    est_mean_abs: float
    est_max_abs: float
    residual_potential: dict

    def summary(self) -> str:
        r = self.residual_potential
        return (f"layer {self.layer}: mean|err|={self.mean_abs:.6g} max|err|={self.max_abs:.6g} "
                f"mean|est|={self.est_mean_abs:.6g} max|est|={self.est_max_abs:.6g} "
                f"v(T) in [{r['min']:.4g}, {r['max']:.4g}] mean {r['mean']:.4g}")


def layer_conversion_error(ann: AnnModel, snn: SnnModel, x, T: int, l: int) -> LayerErrorReport:
    """Error of spiking layer ``l`` (1-based) when both nets see the same input.

    The ANN activation of the previous layer is fed to the SNN layer as a
    constant current for ``T`` steps, so only layer ``l`` contributes error.
    """
    acts = ann.activation_layers
    if not 1 <= l <= len(acts):
        raise UsageError(f"layer index l={l} outside 1..{len(acts)}")
    if [k.kind for k in ann.layers] != [k.kind for k in snn.layers]:
        raise UsageError("ANN and SNN topologies differ")
    k = acts[l - 1]
    outs = forward_graph(ann, x)
    z = outs[k - 1].data
    a = outs[k].data
    theta, v0 = snn.theta[k], snn.v0[k]
    count, v_final = if_neuron_constant(z, T, theta, v0)
    phi = count * theta / T
    err = phi - a
    est = estimated_phi(z, T, theta, v0) - a
    res = {"mean": float(v_final.mean()), "min": float(v_final.min()), "max": float(v_final.max())}
    return LayerErrorReport(l, err, est, float(np.abs(err).mean()), float(np.abs(err).max()),
                            float(np.abs(est).mean()), float(np.abs(est).max()), res)


# ---------------------------------------------------------------------------
# Monte Carlo


def _mean_stderr(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))


def passes_zero_test(mean: float, stderr: float, sigmas: float = ZERO_TEST_SIGMAS) -> bool:
    return abs(mean) <= sigmas * stderr


def quant_error_edges(T: int, theta: float) -> np.ndarray:
    """Interval edges 0, theta/2T, 3theta/2T, ..., (2T-1)theta/2T, theta."""
    mids = (np.arange(1, T + 1) - 0.5) * theta / T
    return np.concatenate([[0.0], mids, [theta]])


def _normalised_densities(T, theta, densities):
    p = np.asarray(densities, dtype=np.float64)
    if p.shape != (T + 1,) or np.any(p < 0):
        raise UsageError(f"need {T + 1} non-negative interval densities")
    widths = np.diff(quant_error_edges(T, theta))
    return p / float(p @ widths), widths


def quant_error_expected_mean(T: int, theta: float, densities) -> float:
    """Closed-form mean ``(p0 - pT) theta^2 / (8 T^2)`` for normalised densities."""
    p, _ = _normalised_densities(T, theta, densities)
    return float((p[0] - p[-1]) * theta**2 / (8 * T**2))


def quant_error_montecarlo(T: int, theta: float, n_samples: int, seed, densities=None):
    """Sample mean and standard error of ``x - theta/T * floor(T x / theta + 1/2)``.

    With ``densities=None`` x is uniform on [0, theta]. Otherwise x is
    piecewise uniform over the T+1 intervals of :func:`quant_error_edges` with the
    given (unnormalised) per-interval densities.
    """
    if n_samples < 10_000:
        raise UsageError("quant_error_montecarlo needs at least 10^4 samples")
    rng = np.random.default_rng(seed)
    if densities is None:
        x = rng.uniform(0.0, theta, n_samples)
    else:
        p, widths = _normalised_densities(T, theta, densities)
        edges = quant_error_edges(T, theta)
        idx = rng.choice(T + 1, size=n_samples, p=p * widths)
        x = edges[idx] + widths[idx] * rng.uniform(0.0, 1.0, n_samples)
    err = x - theta / T * np.floor(T * x / theta + 0.5)
    return _mean_stderr(err)


def conversion_error_montecarlo(T: int, L: int, theta: float, lam: float, shift: float,
                        n_samples: int, seed):
    """Mean and standard error of the estimated layer error for z ~ U[0, lam].

    The SNN side starts at ``v0 = theta * shift`` and the ANN side uses the
    same shift inside its floor.
    """
    if theta != lam:
        raise UsageError("conversion_error_montecarlo requires theta == lam")
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, lam, n_samples)
    snn = theta / T * np.floor((z * T + theta * shift) / theta)
    ann = lam / L * np.floor(z * L / lam + shift)
    return _mean_stderr(snn - ann)


# ---------------------------------------------------------------------------
# spike-timing scenarios

UNEVENNESS_SCENARIOS = (
    # (name, presynaptic neuron 1 spike times, neuron 2 spike times, expected phi)
    ("even", (1, 3, 5), (2, 4), 0.4),
    ("more", (1, 2, 3), (4, 5), 0.8),
    ("fewer", (3, 4, 5), (1, 2), 0.2),
)


def _trains(t1, t2, T=5) -> np.ndarray:
    trains = np.zeros((T, 2), dtype=np.int64)
    trains[np.asarray(t1) - 1, 0] = 1
    trains[np.asarray(t2) - 1, 1] = 1
    return trains


def unevenness_demo() -> list[dict]:
    """Two presynaptic neurons with rates 0.6/0.4, weights (2, -2), theta = 1.

    The analog output is 0.4 in every case; only the spike order changes.
    """
    rows = []
    for name, t1, t2, expected in UNEVENNESS_SCENARIOS:
        out, phi = spike_timing_run([2.0, -2.0], _trains(t1, t2), 1.0, 1.0, 0.0)
        rows.append({"scenario": name, "output_spikes": tuple(int(t) + 1 for t in np.flatnonzero(out)),
                     "phi": float(phi), "expected": expected, "ann": 0.4,
                     "ok": float(phi) == expected})
    return rows


def max_threshold_demo() -> list[dict]:
    """The 'more spikes' ordering under the max-input threshold (2) and under theta = 1.

    With theta = 2 the neuron fires at t = 1, 2, 3 (rate 0.6 against an analog
    value of 0.4); theta = 1 reproduces the four-spike case.
    """
    rows = []
    for theta in (2.0, 1.0):
        out, phi = spike_timing_run([2.0, -2.0], _trains((1, 2, 3), (4, 5)), 1.0, theta, 0.0)
        rows.append({"theta": theta, "output_spikes": tuple(int(t) + 1 for t in np.flatnonzero(out)),
                     "rate": float(out.mean()), "phi": float(phi)})
    return rows


# ---------------------------------------------------------------------------
# grid / random-network checks


def closed_form_grid_check(T_list=(1, 2, 4, 8, 32), theta: float = 1.0, n_points: int = 10_000,
                    v0_fracs=(0.0, 0.5)) -> dict:
    """Compare simulated spike counts with ``clip(floor((zT + v0)/theta), 0, T)``.

    z runs over ``n_points`` values evenly spaced in [-2 theta, 3 theta].
    Returns the number of mismatching points per (T, v0) pair.
    """
    z = np.linspace(-2 * theta, 3 * theta, n_points)
    out = {}
    for T in T_list:
        for frac in v0_fracs:
            v0 = frac * theta
            count, _ = if_neuron_constant(z, T, theta, v0)
            closed = np.clip(np.floor((z * T + v0) / theta), 0, T).astype(np.int64)
            out[(T, frac)] = int(np.sum(count != closed))
    return out


def random_qcfs_mlp(n_in: int, hidden: int, n_out: int, L: int, shift: float, seed) -> AnnModel:
    """Two weighted layers with one QCFS layer between them and a random lambda."""
    rng = np.random.default_rng(seed)
    layers = [dense(n_in, hidden), act("qcfs" if shift > 0 else "qcf_noshift"), dense(hidden, n_out)]
    params = init_params(layers, int(rng.integers(2**32)))
    params["0.bias"] = rng.normal(0.0, 0.1, hidden)
    lam = float(rng.uniform(0.5, 2.0))
    return AnnModel((n_in,), layers, params, {1: QcfsParams(L, lam, shift)})


def exact_conversion_check(L_list=(2, 4, 8), n_inputs: int = 100, seed: int = 0) -> dict:
    """Max |first-layer error| at T = L for the shifted and unshifted variants."""
    rng = np.random.default_rng(seed)
    out = {}
    for L in L_list:
        for variant, shift in (("shift", 0.5), ("noshift", 0.0)):
            ann = random_qcfs_mlp(16, 32, 4, L, shift, rng.integers(2**32))
            snn = convert(ann)
            x = rng.uniform(-1.0, 1.0, (n_inputs, 16))
            rep = layer_conversion_error(ann, snn, x, T=L, l=1)
            out[(L, variant)] = rep.max_abs
    return out


def random_spiking_net(widths, n_in: int, n_out: int, seed) -> SnnModel:
    """Dense IF network with positive-weight-sum thresholds and v0 < theta."""
    rng = np.random.default_rng(seed)
    layers, params, fan_in = [], {}, n_in
    for w in widths:
        idx = len(layers)
        params[f"{idx}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (w, fan_in))
        params[f"{idx}.bias"] = rng.normal(0.0, 0.1, w)
        layers += [dense(fan_in, w), act("if_neuron")]
        fan_in = w
    idx = len(layers)
    params[f"{idx}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (n_out, fan_in))
    params[f"{idx}.bias"] = np.zeros(n_out)
    layers.append(dense(fan_in, n_out))
    spiking = [i for i, l in enumerate(layers) if l.kind == "activation"]
    stub = SnnModel((n_in,), layers, params, {i: 1.0 for i in spiking}, {i: 0.0 for i in spiking})
    theta = positive_weight_sum_thresholds(stub, input_bound=1.0)
    v0 = {i: float(rng.uniform(0.0, 1.0)) * theta[i] for i in spiking}
    return SnnModel((n_in,), layers, params, theta, v0)


def membrane_bound_check(n_nets: int = 50, T: int = 64, seed: int = 0, batch: int = 16) -> dict:
    """Largest recorded ``v / theta`` over random 3-layer nets with bounded thresholds."""
    rng = np.random.default_rng(seed)
    worst, violations = -np.inf, 0
    for _ in range(n_nets):
        snn = random_spiking_net((24, 16, 12), n_in=10, n_out=4, seed=rng.integers(2**32))
        x = rng.uniform(0.0, 1.0, (batch, 10))
        _, trace = run(snn, x, T, record_trace=True)
        for row in trace.steps:
            for i, rec in row.items():
                ratio = rec["v"] / snn.theta[i]
                worst = max(worst, float(ratio.max()))
                violations += int(np.sum(rec["v"] >= snn.theta[i]))
    return {"nets": n_nets, "T": T, "max_v_over_theta": worst, "violations": violations,
            "passed": violations == 0}


# ---------------------------------------------------------------------------
# energy


def flop_count(model) -> int:
    """FLOPs per sample: two per multiply-accumulate in dense and conv layers."""
    macs = 0
    for i, layer in enumerate(model.layers):
        if layer.kind == "dense":
            macs += layer.in_features * layer.out_features
        elif layer.kind == "conv2d":
            _, ho, wo = model.shapes[i]
            macs += layer.in_channels * layer.kernel**2 * layer.out_channels * ho * wo
    return 2 * macs


def synapse_fanout(model, i: int) -> np.ndarray:
    """Outgoing synapse count of every neuron in the output of layer ``i``.

    Follows the pooling/flatten layers after ``i`` up to the next weighted
    layer; a neuron that only feeds a pooled cell inherits that cell's fan-out.
    """
    shape = model.shapes[i]
    path = []
    for j in range(i + 1, len(model.layers)):
        layer = model.layers[j]
        if layer.kind == "dense":
            fan = np.full(model.shapes[j - 1], float(layer.out_features))
            break
        if layer.kind == "conv2d":
            c, h, w = model.shapes[j - 1]
            ones_out = np.ones((1,) + model.shapes[j])
            kernel = np.ones((layer.out_channels, c, layer.kernel, layer.kernel))
            fan, _ = tn.conv2d_backward(np.zeros((1, c, h, w)), kernel, ones_out,
                                        layer.stride, layer.pad)
            fan = fan[0]
            break
        if layer.kind == "activation":
            return np.zeros(shape)
        path.append(j)
    else:
        return np.zeros(shape)
    for j in reversed(path):
        layer = model.layers[j]
        if layer.kind == "flatten":
            fan = fan.reshape(model.shapes[j - 1])
        elif layer.kind == "avgpool2d":
            fan = np.repeat(np.repeat(fan, layer.pool, axis=1), layer.pool, axis=2)
    return np.rint(fan).astype(np.int64)


def sop_count(snn: SnnModel, spike_counts: dict[int, np.ndarray]) -> np.ndarray:
    """Synaptic operations per sample given per-neuron spike counts."""
    total = None
    for i, counts in spike_counts.items():
        fan = synapse_fanout(snn, i)
        per = (counts * fan).reshape(counts.shape[0], -1).sum(axis=1)
        total = per if total is None else total + per
    return total


def energy_report(ann: AnnModel, snn: SnnModel, data, T: int, batch_size: int = 500) -> dict:
    """Per-image FLOPs/SOPs averaged over ``data`` at horizon ``T`` and their energies.

    The analog input layer is not counted as SOPs: only spikes of IF layers
    generate synaptic events.
    """
    x = getattr(data, "inputs", data)
    flops = flop_count(ann)
    sops = []
    for s in range(0, len(x), batch_size):
        _, trace = run(snn, x[s:s + batch_size], T)
        sops.append(sop_count(snn, trace.spike_counts))
    sops = np.concatenate(sops)
    mean_sops = float(sops.mean())
    return {"T": T, "flops": flops, "sops": mean_sops,
            "ann_energy_J": flops * FLOP_ENERGY_J, "snn_energy_J": mean_sops * SOP_ENERGY_J,
            "sops_per_image": sops}


def recount_sops_from_trace(snn: SnnModel, trace) -> np.ndarray:
    """Per-sample SOPs recounted step by step from a recorded trace.

    Independent of :func:`synapse_fanout`: each neuron's fan-out is measured
    by pushing a one-hot input through the downstream weighted block (biases
    zeroed) and counting the outputs it reaches.
    """
    if not trace.steps:
        raise UsageError("trace must be recorded (record_trace=True)")
    fanouts = {}
    zero_bias = {k: (np.zeros_like(v) if k.endswith(".bias") else v) for k, v in snn.params.items()}
    for i in snn.spiking_layers:
        n = int(np.prod(snn.shapes[i]))
        fan = np.zeros(n, dtype=np.int64)
        for j in range(n):
            h = np.zeros((1, n))
            h[0, j] = 1.0
            h = h.reshape((1,) + snn.shapes[i])
            reached = 0
            for k in range(i + 1, len(snn.layers)):
                layer = snn.layers[k]
                if layer.kind == "activation":
                    break
                h = linear_forward(layer, h, zero_bias, k)
                if layer.kind in ("dense", "conv2d"):
                    reached = int(np.count_nonzero(h))
                    break
            fan[j] = reached
        fanouts[i] = fan
    total = None
    for row in trace.steps:
        for i, rec in row.items():
            s = rec["s"].reshape(rec["s"].shape[0], -1).astype(np.int64)
            per = s @ fanouts[i]
            total = per if total is None else total + per
    return total
