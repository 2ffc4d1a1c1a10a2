"""Network assembly for 2D point-cloud classification.

A config is plain data (JSON-friendly). Layer geometry (which points each conv
evaluates, which blocks get pooled) is resolved once on the canonical input
grid into a GridPlan; a rotated plan simply rotates every coordinate array and
keeps the index bookkeeping, so rotated inputs are processed exactly.
"""

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .activations import get_activation
from .conv2d import (
    BatchNormFourier,
    LayerParams,
    RingFilterSpec,
    build_basis,
    crop_indices,
    layout_for,
    pool_assignment,
    pool_matrix,
    rotate_coords,
)

TABLE1_RINGS = {
    "first": [(0, 0.005, 0), (1, 0.6, 2), (2, 0.6, 3), (3, 0.6, 6), (4, 0.4, 2)],
    "middle": [(0, 0.005, 0), (1, 0.6, 2), (2, 0.6, 3), (3, 0.4, 2)],
    "last": [(0, 0.005, 0), (1, 0.6, 2), (2, 0.4, 2)],
}
TABLE1_CHANNELS = (24, 32, 36, 36, 64, 96)
TABLE1_SPATIAL = ("crop4", "pool", "none", "pool", "none", "crop2")
TABLE1_LINEAR = (96, 96, 40)


@dataclass
class ModelConfig:
    conv_channels: tuple = TABLE1_CHANNELS
    conv_rings: tuple = ()
    spatial: tuple = TABLE1_SPATIAL
    linear: tuple = TABLE1_LINEAR
    coeffs: int = 9
    activation: str = "relu"
    pad: int = 7
    invariant: str = "norm"
    dropout: float = 0.3
    normalize_rings: bool = True
    image_size: int = 28
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.spatial = tuple(self.spatial)
        self.linear = tuple(int(c) for c in self.linear)
        if not self.conv_rings:
            n = len(self.conv_channels)
            self.conv_rings = tuple(
                TABLE1_RINGS["first"] if i == 0 else TABLE1_RINGS["last"] if i == n - 1 else TABLE1_RINGS["middle"] for i in range(n)
            )
        self.conv_rings = tuple(tuple(tuple(r) for r in rows) for rows in self.conv_rings)
        self.validate()

    def validate(self):
        if self.coeffs < 1 or self.coeffs % 2 == 0:
            raise ValueError(f"coefficient count must be odd, got {self.coeffs}")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.invariant not in ("norm", "conv2triv"):
            raise ValueError(f"unknown invariant map {self.invariant!r}")
        if not (len(self.conv_channels) == len(self.conv_rings) == len(self.spatial)):
            raise ValueError("conv channels, rings and spatial ops must have equal length")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        for op in self.spatial:
            parse_spatial(op)
        get_activation(self.activation)
        if not self.linear:
            raise ValueError("need at least the output linear layer")

    @property
    def K(self):
        return (self.coeffs - 1) // 2

    @property
    def num_classes(self):
        return self.linear[-1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def table1_config(**kw):
    """The full architecture, including the printed 40-wide output layer."""
    return ModelConfig(**kw)


def desk_config(**kw):
    """Halved widths and a 10-class output; used for CPU-scale runs."""
    base = dict(
        conv_channels=tuple(c // 2 for c in TABLE1_CHANNELS),
        linear=(48, 48, 10),
        activation="relu",
        pad=7,
    )
    base.update(kw)
    return ModelConfig(**base)


def load_config(path):
    """JSON config with optional "model" and "train" sections (or a flat model dict)."""
    with open(path) as fh:
        d = json.load(fh)
    preset = d.get("preset", "desk")
    model_d = d.get("model", {k: v for k, v in d.items() if k not in ("train", "preset")})
    make = desk_config if preset == "desk" else table1_config
    return make(**{k: v for k, v in model_d.items() if k in ModelConfig.__dataclass_fields__}), d.get("train", {})


def parse_spatial(op):
    op = str(op).lower()
    if op in ("none", "-", "--", ""):
        return ("none", 0)
    if op.startswith("pool"):
        return ("pool", int(op[4:].strip("()") or 2))
    if op.startswith("crop"):
        return ("crop", int(op[4:].strip("()")))
    raise ValueError(f"unknown spatial op {op!r}")


def grid_coords(size=28):
    """Pixel centres of a size x size image, centred on the image centre."""
    c = np.arange(size) - (size - 1) / 2
    xx, yy = np.meshgrid(c, c[::-1], indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class StagePlan:
    conv_in: np.ndarray
    conv_out: np.ndarray
    pool: object = None  # sparse averaging matrix or None
    pooled: np.ndarray = None

    @property
    def output_coords(self):
        return self.conv_out if self.pool is None else self.pooled


class GridPlan:
    """Resolved point sets per conv stage, with a cache of convolution bases."""

    def __init__(self, stages, theta=0.0):
        self.stages = stages
        self.theta = theta
        self._bases = {}

    @classmethod
    def build(cls, input_coords, spatial):
        stages = []
        coords = np.asarray(input_coords, dtype=float)
        for op in spatial:
            kind, arg = parse_spatial(op)
            if kind == "crop":
                out = coords[crop_indices(coords, arg)]
                stages.append(StagePlan(coords, out))
            elif kind == "pool":
                assign, nb = pool_assignment(coords, arg)
                P = pool_matrix(assign, nb)
                stages.append(StagePlan(coords, coords, P, np.asarray(P @ coords) / arg))
            else:
                stages.append(StagePlan(coords, coords))
            coords = stages[-1].output_coords
        return cls(stages)

    def rotated(self, theta):
        st = [
            StagePlan(
                rotate_coords(s.conv_in, theta),
                rotate_coords(s.conv_out, theta),
                s.pool,
                None if s.pooled is None else rotate_coords(s.pooled, theta),
            )
            for s in self.stages
        ]
        return GridPlan(st, self.theta + theta)

    def basis(self, i, spec, layout, dtype):
        key = (i, np.dtype(dtype).str)
        if key not in self._bases:
            s = self.stages[i]
            # average pooling is linear, so it is folded into the basis rows
            self._bases[key] = build_basis(s.conv_in, s.conv_out, spec, layout, dtype, pool=s.pool)
        return self._bases[key]


class SteerableNet:
    """conv (+ fused pool) -> BN -> nonlinearity per stage, invariant map, MLP head."""

    def __init__(self, config, precision="single"):
        self.config = config
        self.precision = precision
        self.real_dtype = np.float32 if precision == "single" else np.float64
        self.complex_dtype = np.complex64 if precision == "single" else np.complex128
        self.act = get_activation(config.activation)
        rng = np.random.default_rng(config.seed)
        self.convs = []
        self.params = []
        C_in, K_in = 1, 0
        n = len(config.conv_channels)
        for i, (C_out, rows) in enumerate(zip(config.conv_channels, config.conv_rings)):
            K_out = 0 if (i == n - 1 and config.invariant == "conv2triv") else config.K
            spec = RingFilterSpec.from_table(rows, normalize=config.normalize_rings)
            layout = layout_for(spec, K_in, K_out)
            lp = LayerParams.init(layout, C_in, C_out, rng, self.real_dtype)
            mask = np.ones_like(lp.q)
            mask[layout.real_only, ..., 1] = 0
            layer = dict(
                spec=spec,
                layout=layout,
                q=ad.Parameter(lp.q, f"conv{i + 1}.q", mask),
                bn=BatchNormFourier(C_out),
                gamma=ad.Parameter(np.ones(C_out, self.real_dtype), f"conv{i + 1}.bn.gamma"),
                beta=ad.Parameter(np.zeros(C_out, self.real_dtype), f"conv{i + 1}.bn.beta"),
                bias=None,
                K_out=K_out,
            )
            if self.act.norm_only:
                layer["bias"] = ad.Parameter(np.zeros((C_out, K_out + 1), self.real_dtype), f"conv{i + 1}.act.bias")
            self.convs.append(layer)
            C_in, K_in = C_out, K_out
        width = C_in * (K_in + 1) if config.invariant == "norm" else C_in
        self.linears = []
        for j, F in enumerate(config.linear):
            idx = n + j + 1
            W = rng.standard_normal((width, F)) * np.sqrt(2.0 / width)
            layer = dict(
                W=ad.Parameter(W.astype(self.real_dtype), f"linear{idx}.W"),
                b=ad.Parameter(np.zeros(F, self.real_dtype), f"linear{idx}.b"),
                bn=None,
                bias=None,
            )
            if j < len(config.linear) - 1:
                layer["bn"] = BatchNormFourier(F)
                layer["gamma"] = ad.Parameter(np.ones(F, self.real_dtype), f"linear{idx}.bn.gamma")
                layer["beta"] = ad.Parameter(np.zeros(F, self.real_dtype), f"linear{idx}.bn.beta")
                if self.act.norm_only:
                    layer["bias"] = ad.Parameter(np.zeros((F, 1), self.real_dtype), f"linear{idx}.act.bias")
            self.linears.append(layer)
            width = F
        self.input_coords = grid_coords(config.image_size)
        self.plan = GridPlan.build(self.input_coords, config.spatial)

    # -- bookkeeping --

    def parameters(self):
        out = []
        for layer in self.convs + self.linears:
            for key in ("q", "W", "b", "gamma", "beta", "bias"):
                if layer.get(key) is not None:
                    out.append(layer[key])
        return out

    def batch_norms(self):
        return [layer["bn"] for layer in self.convs + self.linears if layer.get("bn") is not None]

    def num_parameters(self):
        """Real degrees of freedom (the fixed-zero imaginary parts are not counted)."""
        total = 0
        for p in self.parameters():
            total += int(p.mask.sum()) if p.mask is not None else p.value.size
        return total

    def state(self):
        """Ordered name -> array map of everything a checkpoint must restore."""
        st = {p.name: p.value for p in self.parameters()}
        for i, bn in enumerate(self.batch_norms()):
            st[f"bn{i}.running_mean"] = bn.running_mean
            st[f"bn{i}.running_var"] = bn.running_var
        return st

    def load_state(self, st):
        for p in self.parameters():
            if p.name not in st:
                raise KeyError(f"missing tensor {p.name}")
            if st[p.name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value = np.array(st[p.name], dtype=p.value.dtype)
        for i, bn in enumerate(self.batch_norms()):
            bn.running_mean = np.array(st[f"bn{i}.running_mean"], dtype=float)
            bn.running_var = np.array(st[f"bn{i}.running_var"], dtype=float)

    # -- forward --

    def input_features(self, images):
        """(B, 28, 28) images -> (B, 784, 1, 1) K=0 signals on the canonical grid."""
        images = np.asarray(images)
        B = images.shape[0]
        return images.reshape(B, -1, 1, 1).astype(self.complex_dtype)

    def forward(self, tape, x, plan=None, training=False, rng=None, capture=False, stop_at_bn=None):
        """Logits tensor; with `capture`, also per-stage activations (layer 0 = input).

        `stop_at_bn=j` returns the raw input of the j-th batch norm instead.
        """
        plan = self.plan if plan is None else plan
        cfg = self.config
        if not isinstance(x, ad.Tensor):
            x = tape.constant(x)
        acts = [x.value] if capture else None
        bn_i = 0
        for i, layer in enumerate(self.convs):
            basis = plan.basis(i, layer["spec"], layer["layout"], self.complex_dtype)
            x = ad.conv2d(x, layer["q"], basis, layer["layout"])
            if stop_at_bn == bn_i:
                return x
            x = ad.batch_norm(x, layer["gamma"], layer["beta"], layer["bn"], training)
            bn_i += 1
            x = ad.activation(x, self.act, cfg.pad, layer["bias"])
            if capture:
                acts.append(x.value)
        x = ad.norm_map(x) if cfg.invariant == "norm" else ad.conv2triv(x)
        # single remaining point: (B, 1, F) -> (B, F)
        x = ad.reshape(x, (x.shape[0], -1))
        for layer in self.linears:
            x = ad.dropout(x, cfg.dropout, rng, training)
            x = ad.linear(x, layer["W"], layer["b"])
            if layer["bn"] is not None:
                s = ad.as_signal(x)
                if stop_at_bn == bn_i:
                    return s
                s = ad.batch_norm(s, layer["gamma"], layer["beta"], layer["bn"], training)
                bn_i += 1
                s = ad.activation(s, self.act, cfg.pad, layer["bias"])
                x = ad.conv2triv(s)
                x = ad.reshape(x, (x.shape[0], -1))
        if capture:
            return x, acts
        return x

    def predict(self, images, batch_size=256, plan=None):
        preds = []
        for lo in range(0, len(images), batch_size):
            tape = ad.Tape(retain=False)
            logits = self.forward(tape, self.input_features(images[lo : lo + batch_size]), plan=plan)
            preds.append(np.argmax(logits.value, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, int)

    def copy(self):
        return copy.deepcopy(self)
