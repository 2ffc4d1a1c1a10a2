"""Equivariance-error measurement.

For a batch of images, every layer's activations are computed once on the
canonical grid and once per random rotation theta (coordinates rotated
exactly). Rotated activations are turned back with rotate(., -theta) and
compared point by point with the unrotated ones.

Aggregation: mean and max of |delta| over all coefficients, points, channels,
images and rotations, each divided by the mean |coefficient| of that layer's
unrotated activations (the batch-mean L1 norm per entry).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fourier import rotate
from .model import GridPlan, grid_coords
from .train import exact_bn_pass
from .data import ImageSet

CSV_HEADER = ["layer", "pad", "activation", "mean_rel_err", "max_rel_err", "n"]
CSV_COMMENT = (
    "# mean/max of |rotate(f(Rx), -theta) - f(x)| over coefficients, points, channels, images and rotations,"
    " divided by the batch-mean |coefficient| of f(x) for that layer"
)


@dataclass
class ErrorRecord:
    layer: int
    pad: int
    activation: str
    mean_rel_err: float
    max_rel_err: float
    norm_l1: float
    n: int


@dataclass
class ErrorReport:
    records: list = field(default_factory=list)

    def layer(self, layer, pad):
        for r in self.records:
            if r.layer == layer and r.pad == pad:
                return r
        raise KeyError((layer, pad))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(CSV_COMMENT + "\n")
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow([r.layer, r.pad, r.activation, f"{r.mean_rel_err:.6e}", f"{r.max_rel_err:.6e}", r.n])


class IdentityModel:
    """A model without layers: its only activation is the input itself."""

    def __init__(self, image_size=28):
        self.plan = GridPlan.build(grid_coords(image_size), [])
        self.activation_name = "identity"

    def layer_activations(self, images, plan=None):
        B = len(images)
        return [np.asarray(images).reshape(B, -1, 1, 1).astype(complex)]


def _activation_name(model):
    return getattr(model, "activation_name", None) or model.config.activation


def _set_pad(model, pad):
    cfg = getattr(model, "config", None)
    if cfg is not None:
        cfg.pad = int(pad)


def layer_activations(model, images, plan=None):
    if hasattr(model, "layer_activations"):
        return model.layer_activations(images, plan)
    tape = ad.Tape(retain=False)
    logits, acts = model.forward(tape, model.input_features(images), plan=plan, capture=True)
    return acts + [logits.value]


def equivariance_sweep(model, images, rotations=36, pads=(None,), seed=0, calibrate=True):
    """Per-layer equivariance errors for every pad in `pads` (None keeps the model's pad)."""
    images = np.asarray(images)
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0, 2 * np.pi, rotations)
    original_pad = getattr(getattr(model, "config", None), "pad", None)
    pads = [original_pad if p is None else p for p in pads]
    base = {}
    try:
        for p in pads:
            _set_pad(model, p)
            if calibrate and hasattr(model, "batch_norms"):
                exact_bn_pass(model, ImageSet(images, np.zeros(len(images), int)), batch_size=len(images))
            ref = layer_activations(model, images)
            base[p] = dict(
                ref=ref,
                bn=[(bn.running_mean.copy(), bn.running_var.copy()) for bn in getattr(model, "batch_norms", lambda: [])()],
                sums=[0.0] * len(ref),
                maxs=[0.0] * len(ref),
                counts=[0] * len(ref),
            )
        for theta in angles:
            plan = model.plan.rotated(theta)
            for p in pads:
                _set_pad(model, p)
                st = base[p]
                for bn, (m, v) in zip(getattr(model, "batch_norms", lambda: [])(), st["bn"]):
                    bn.running_mean, bn.running_var = m, v
                acts = layer_activations(model, images, plan)
                for i, (a, r) in enumerate(zip(acts, st["ref"])):
                    back = rotate(a, -theta) if np.iscomplexobj(a) else a
                    d = np.abs(back.astype(np.complex128) - r.astype(np.complex128))
                    st["sums"][i] += float(d.sum())
                    st["maxs"][i] = max(st["maxs"][i], float(d.max(initial=0.0)))
                    st["counts"][i] += d.size
    finally:
        if original_pad is not None:
            _set_pad(model, original_pad)
    report = ErrorReport()
    name = _activation_name(model)
    for p in pads:
        st = base[p]
        for i, r in enumerate(st["ref"]):
            norm = float(np.mean(np.abs(r)))
            norm = norm if norm > 0 else 1.0
            n = st["counts"][i]
            mean = st["sums"][i] / n / norm if n else 0.0
            report.records.append(ErrorRecord(i, int(p) if p is not None else -1, name, mean, st["maxs"][i] / norm, norm, n))
    return report
