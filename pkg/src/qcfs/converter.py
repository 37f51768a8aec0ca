"""QCFS ANN -> IF-neuron SNN conversion and alternative threshold rules."""
from __future__ import annotations

import copy

import numpy as np

from .errors import ConversionError, UsageError
from .network import AnnModel, SnnModel, act, ann_preactivations

THETA_FLOOR = 1e-6


def _check_convertible(ann: AnnModel) -> None:
    for i, layer in enumerate(ann.layers):
        if layer.kind == "activation" and layer.activation not in ("qcfs", "qcf_noshift"):
            raise ConversionError(f"layer {i}: activation {layer.activation!r} is not QCFS; "
                                  "train with transform_to_qcfs before converting")
        if layer.kind == "maxpool2d":
            raise ConversionError(f"layer {i}: maxpool must be replaced by avgpool before conversion")


def convert(ann: AnnModel, shift_override: float | None = None,
            thresholds: dict[int, float] | None = None) -> SnnModel:
    """Copy weights, set ``theta = lambda`` and ``v0 = theta * shift`` per layer.

    ``shift_override`` replaces every layer's trained shift when computing v0
    (0 gives the zero-initialised baseline). ``thresholds`` replaces the
    lambda-derived thresholds, e.g. with :func:`max_activation_threshold`.
    """
    _check_convertible(ann)
    layers, theta, v0 = [], {}, {}
    for i, layer in enumerate(ann.layers):
        if layer.kind != "activation":
            layers.append(copy.copy(layer))
            continue
        layers.append(act("if_neuron"))
        p = ann.qcfs[i]
        theta[i] = float(thresholds[i]) if thresholds is not None else p.lam
        shift = p.shift if layer.activation == "qcfs" else 0.0
        if shift_override is not None:
            shift = float(shift_override)
        v0[i] = theta[i] * shift
    params = {k: v.copy() for k, v in ann.params.items()}
    meta = {"source": dict(ann.meta),
            "threshold_mode": "lambda" if thresholds is None else "max-act",
            "shift_override": shift_override}
    return SnnModel(ann.input_shape, layers, params, theta, v0, meta)


def max_activation_threshold(ann: AnnModel, calibration, batch_size: int = 1000) -> dict[int, float]:
    """Per activation layer, the largest pre-activation over ``calibration``.

    ``calibration`` is a Dataset or an input array. Values are clamped below
    at ``THETA_FLOOR`` so the resulting thresholds stay positive.
    """
    x = getattr(calibration, "inputs", calibration)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise UsageError("calibration set is empty")
    best = {i: -np.inf for i in ann.activation_layers}
    for s in range(0, x.shape[0], batch_size):
        for i, pre in ann_preactivations(ann, x[s:s + batch_size]).items():
            best[i] = max(best[i], float(pre.max()))
    return {i: max(v, THETA_FLOOR) for i, v in best.items()}


def positive_weight_sum_thresholds(model: SnnModel, input_bound: float) -> dict[int, float]:
    """Upper bound on the per-step input current of every spiking layer.

    For a neuron with incoming weights ``w`` and bias ``b`` fed by PSPs in
    ``[0, bound]``, the charge added per step is at most
    ``sum(max(w, 0)) * bound + max(b, 0)``; the layer threshold is the max of
    that over its neurons. The first layer's bound is ``input_bound`` (the
    largest analog input value); deeper layers use the previous threshold.
    Average pooling cannot raise the bound, so it passes through.
    """
    bound = float(input_bound)
    theta = {}
    block_max = None
    for i, layer in enumerate(model.layers):
        if layer.kind == "dense":
            w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
            block_max = float(np.max(np.maximum(w, 0).sum(axis=1) * bound + np.maximum(b, 0)))
        elif layer.kind == "conv2d":
            w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
            per_filter = np.maximum(w, 0).reshape(w.shape[0], -1).sum(axis=1)
            block_max = float(np.max(per_filter * bound + np.maximum(b, 0)))
        elif layer.kind == "activation":
            if block_max is None:
                raise UsageError(f"spiking layer {i} has no preceding weighted layer")
            theta[i] = max(block_max, THETA_FLOOR)
            bound = theta[i]
            block_max = None
    return theta
