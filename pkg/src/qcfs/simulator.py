"""Discrete-time integrate-and-fire simulation with reset-by-subtraction.

Per spiking layer and time-step::

    m = v + I          # I: weighted input current (bias included)
    s = m >= theta     # H(0) = 1
    v = m - s * theta
    x = s * theta      # unweighted PSP handed to the next layer

Layers cascade synchronously: spikes emitted at step t reach the next layer at
the same step t. The analog input is presented unchanged at every step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DataError, DimensionError, UsageError
from .network import LayerSpec, SnnModel


def linear_forward(layer: LayerSpec, h: np.ndarray, params: dict, index: int) -> np.ndarray:
    """numpy forward of one non-spiking layer."""
    if layer.kind == "dense":
        # one product per sample so results do not depend on the batch size
        return (h[:, None, :] @ params[f"{index}.weight"].T)[:, 0] + params[f"{index}.bias"]
    if layer.kind == "conv2d":
        out = tn.conv2d_forward(h, params[f"{index}.weight"], layer.stride, layer.pad)
        return out + params[f"{index}.bias"].reshape(1, -1, 1, 1)
    if layer.kind == "avgpool2d":
        return tn.avgpool2d_forward(h, layer.pool)
    if layer.kind == "flatten":
        return h.reshape(h.shape[0], -1)
    raise UsageError(f"layer {index} ({layer.kind}) cannot run inside the simulator")


@dataclass
class SimState:
    t: int
    T: int
    v: dict[int, np.ndarray]
    spike_counts: dict[int, np.ndarray]
    out_sum: np.ndarray | None = None
    # (first layer to evaluate, its input) for the part of the net fed only by x0
    static: tuple[int, np.ndarray] | None = None


@dataclass
class SimTrace:
    T: int
    theta: dict[int, float]
    v_init: dict[int, np.ndarray]
    v_final: dict[int, np.ndarray]
    spike_counts: dict[int, np.ndarray]
    steps: list[dict[int, dict[str, np.ndarray]]] = field(default_factory=list)

    @property
    def phi(self) -> dict[int, np.ndarray]:
        """Average unweighted PSP per spiking layer: count * theta / T."""
        return {i: c * self.theta[i] / self.T for i, c in self.spike_counts.items()}


def init_state(model: SnnModel, batch: int, T: int) -> SimState:
    if T < 1:
        raise UsageError(f"simulation horizon T must be >= 1, got {T}")
    v, counts = {}, {}
    for i in model.spiking_layers:
        shape = (batch,) + model.shapes[i]
        v[i] = np.full(shape, float(model.v0[i]))
        counts[i] = np.zeros(shape, dtype=np.int64)
    return SimState(0, T, v, counts)


def step(model: SnnModel, state: SimState, x0: np.ndarray, record: bool = False):
    """Advance every layer by one time-step; returns the trace row when ``record``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[1:] != model.input_shape:
        raise DimensionError(f"input batch {x0.shape} does not match model input {model.input_shape}")
    start, h = state.static if state.static is not None else (0, x0)
    row = {} if record else None
    spiking = False
    for i in range(start, len(model.layers)):
        layer = model.layers[i]
        if layer.kind == "activation":
            spiking = True
            theta = model.theta[i]
            m = state.v[i] + h
            s = m >= theta
            x = s * theta
            state.v[i] = m - x
            state.spike_counts[i] += s
            if record:
                row[i] = {"m": m, "s": s.astype(np.int8), "v": state.v[i].copy()}
            h = x
        else:
            h = linear_forward(layer, h, model.params, i)
            if not spiking:
                state.static = (i + 1, h)
    state.out_sum = h.copy() if state.out_sum is None else state.out_sum + h
    state.t += 1
    return row


def run(model: SnnModel, x0, T: int, record_trace: bool = False):
    """Simulate ``T`` steps of constant input ``x0``.

    Returns ``(readouts, trace)`` where ``readouts[t-1]`` is the output-layer
    input accumulated over the first ``t`` steps divided by ``t``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    state = init_state(model, x0.shape[0], T)
    v_init = {i: v.copy() for i, v in state.v.items()}
    readouts = None
    steps = []
    for t in range(1, T + 1):
        row = step(model, state, x0, record=record_trace)
        if readouts is None:
            readouts = np.empty((T,) + state.out_sum.shape)
        readouts[t - 1] = state.out_sum / t
        if record_trace:
            steps.append(row)
    trace = SimTrace(T, dict(model.theta), v_init, {i: v.copy() for i, v in state.v.items()},
                     {i: c.copy() for i, c in state.spike_counts.items()}, steps)
    return readouts, trace


def if_neuron_constant(z, T: int, theta: float, v0, record: bool = False):
    """Drive independent IF neurons with constant per-step charge ``z``.

    Returns ``(spike_count, v_final)``, plus the list of per-step
    ``(m, s, v)`` when ``record`` is set.
    """
    if T < 1:
        raise UsageError("T must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v0, dtype=np.float64), z.shape).copy()
    count = np.zeros(z.shape, dtype=np.int64)
    rows = []
    for _ in range(T):
        m = v + z
        s = m >= theta
        v = m - s * theta
        count += s
        if record:
            rows.append((m, s, v.copy()))
    return (count, v, rows) if record else (count, v)


def spike_timing_run(weights, spike_trains, theta_prev: float, theta: float, v0: float = 0.0):
    """One IF neuron fed by explicit presynaptic spike trains.

    ``spike_trains`` is a (T, N) 0/1 array, ``weights`` has length N. Returns
    the (T,) output spike train and the average PSP ``count * theta / T``.
    """
    trains = np.asarray(spike_trains)
    if trains.ndim != 2:
        raise DataError(f"spike trains must be (T, N), got shape {trains.shape}")
    if not np.all((trains == 0) | (trains == 1)):
        raise DataError("spike trains must be binary")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != trains.shape[1]:
        raise DimensionError(f"{w.size} weights for {trains.shape[1]} presynaptic neurons")
    T = trains.shape[0]
    v = float(v0)
    out = np.zeros(T, dtype=np.int64)
    for t in range(T):
        m = v + float(w @ (trains[t] * theta_prev))
        if m >= theta:
            out[t] = 1
            v = m - theta
        else:
            v = m
    return out, out.sum() * theta / T


def accuracy_over_time(model: SnnModel, data, T_list, batch_size: int = 500) -> dict[int, float]:
    """Accuracy at every horizon in ``T_list`` from a single pass to max(T_list)."""
    T_list = sorted(set(int(t) for t in T_list))
    if not T_list or T_list[0] < 1:
        raise UsageError("T list must contain positive integers")
    T_max = T_list[-1]
    correct = {t: 0 for t in T_list}
    for s in range(0, len(data.labels), batch_size):
        xb, yb = data.inputs[s:s + batch_size], data.labels[s:s + batch_size]
        readouts, _ = run(model, xb, T_max)
        for t in T_list:
            correct[t] += int(np.sum(readouts[t - 1].argmax(axis=1) == yb))
    n = len(data.labels)
    return {t: correct[t] / n for t in T_list}


def write_trace_csv(trace: SimTrace, fh, sample: int = 0) -> None:
    """Dump ``layer,t,neuron,m,s,v`` rows for one sample of a recorded trace."""
    if not trace.steps:
        raise UsageError("trace has no recorded steps; run with record_trace=True")
    w = csv.writer(fh)
    w.writerow(["layer", "t", "neuron", "m", "s", "v"])
    for t, row in enumerate(trace.steps, start=1):
        for layer in sorted(row):
            m = row[layer]["m"][sample].reshape(-1)
            s = row[layer]["s"][sample].reshape(-1)
            v = row[layer]["v"][sample].reshape(-1)
            for j in range(m.size):
                w.writerow([layer, t, j, repr(float(m[j])), int(s[j]), repr(float(v[j]))])
