"""Small reverse-mode tape over the operations the networks use.

Gradients of complex arrays follow one convention everywhere:
grad = dL/dRe + i dL/dIm, which treats real and imaginary parts as independent
reals. Complex trainable weights are stored as real arrays with a trailing
(Re, Im) axis so the optimizer only ever sees real numbers.
"""

from dataclasses import dataclass, field

import numpy as np

from . import activations as act_mod
from . import conv2d as c2
from . import surfel as sf
from .fourier import clip_l1 as _clip_l1, l1_norm


class TapeError(RuntimeError):
    pass


class Tensor:
    """A value on a tape (or a leaf parameter)."""

    def __init__(self, value, tape=None, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor({self.name or ''} shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Trainable leaf. `mask` zeroes gradient entries that must stay fixed."""

    def __init__(self, value, name=None, mask=None):
        super().__init__(np.asarray(value), requires_grad=True, name=name)
        self.mask = mask

    def zero_grad(self):
        self.grad = None


class Tape:
    """Records operations in execution order; one tape per step.

    With `retain=False` nothing is kept for a backward pass (inference mode),
    so saved intermediates are freed as soon as the forward moves on.
    """

    def __init__(self, retain=True):
        self.nodes = []
        self.closed = False
        self.retain = retain

    def record(self, value, parents, vjp, name=None):
        if self.closed:
            raise TapeError("tape already consumed by backward()")
        if not self.retain:
            return Tensor(value, self, (), None, name=name)
        t = Tensor(value, self, tuple(parents), vjp, name=name)
        self.nodes.append(t)
        return t

    def constant(self, value, name=None):
        return Tensor(np.asarray(value), self, (), None, name=name)

    def backward(self, loss, seed=None):
        """Accumulate gradients into every Parameter reachable from `loss`."""
        if self.closed:
            raise TapeError("tape already consumed by backward()")
        if not self.retain:
            raise TapeError("inference tape (retain=False) cannot run backward()")
        if not isinstance(loss, Tensor) or loss.tape is not self or id(loss) not in {id(n) for n in self.nodes}:
            raise TapeError("loss was not recorded on this tape")
        if seed is None:
            if loss.value.size != 1:
                raise TapeError("backward() needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.value)
        grads = {id(loss): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            pgs = node.vjp(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                if isinstance(p, Parameter):
                    if p.mask is not None:
                        pg = pg * p.mask
                    p.grad = pg if p.grad is None else p.grad + pg
                else:
                    k = id(p)
                    grads[k] = pg if k not in grads else grads[k] + pg
        self.closed = True
        # drop saved activations
        for node in self.nodes:
            node.vjp = None
        self.nodes = []


def _tape_of(*tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    raise TapeError("operation has no recorded input; wrap inputs with tape.constant()")


def _val(t):
    return t.value if isinstance(t, Tensor) else t


# -- kink monitor used by gradcheck ----------------------------------------------

_monitor = []


def _watch(pattern):
    if _monitor:
        _monitor[-1].append(np.packbits(np.asarray(pattern, dtype=bool).ravel()).tobytes())


class KinkMonitor:
    """Collects on/off patterns of nonsmooth points touched during a forward pass."""

    def __enter__(self):
        self.patterns = []
        _monitor.append(self.patterns)
        return self

    def __exit__(self, *exc):
        _monitor.pop()
        return False


# -- operations --------------------------------------------------------------------


def complex_weights(q, dtype):
    return (q[..., 0] + 1j * q[..., 1]).astype(dtype)


def _real_pair(gq):
    return np.stack([gq.real, gq.imag], axis=-1)


def conv2d(x, q, basis, layout):
    """Steerable point conv; q is the real (T, C_out, C_in, 2) weight tensor."""
    tape = _tape_of(x, q)
    dtype = basis.matrix.dtype
    qc = complex_weights(_val(q), dtype)
    y, A = c2.conv_apply(_val(x), basis, layout, qc)

    def vjp(g):
        gq, gx = c2.conv_vjp(g, A, basis, layout, qc, need_input=x.requires_grad)
        return gx, _real_pair(gq).astype(_val(q).dtype)

    return tape.record(y, (x, q), vjp, "conv2d")


def surfel_conv(x, q, positions, frames, out_positions, out_frames, spec, layout):
    tape = _tape_of(x, q)
    xv = _val(x)
    inp = sf.SurfelCloud(positions, frames, xv)
    qc = complex_weights(_val(q), np.result_type(xv.dtype, np.complex64))
    y, A = sf.surfel_apply(inp, out_positions, out_frames, spec, layout, qc)

    def vjp(g):
        gq, gx = sf.surfel_vjp(g, A, inp, out_positions, out_frames, spec, layout, qc, need_input=x.requires_grad)
        return gx, _real_pair(gq).astype(_val(q).dtype)

    return tape.record(y, (x, q), vjp, "surfel_conv")


def batch_norm(x, gamma, beta, bn, training):
    tape = _tape_of(x, gamma, beta)
    xv = _val(x)
    y, cache = c2.batch_norm(xv, _val(gamma), _val(beta), bn, training)

    def vjp(g):
        gx, gg, gb = c2.batch_norm_vjp(g, xv, _val(gamma), cache)
        return gx, gg.astype(_val(gamma).dtype), gb.astype(_val(beta).dtype)

    return tape.record(y, (x, gamma, beta), vjp, "batch_norm")


def clip_l1(x, c):
    tape = _tape_of(x)
    xv = _val(x)
    _watch(l1_norm(xv) > c)
    y = _clip_l1(xv, c)
    return tape.record(y, (x,), lambda g: (act_mod.clip_l1_vjp(g, xv, c).astype(xv.dtype),), "clip_l1")


def fft_activation(x, act, pad):
    """Nonlinearity through the oversampled angular domain (l1 clip first if the activation has one)."""
    if act.clip is not None:
        x = clip_l1(x, act.clip)
    tape = _tape_of(x)
    xv = _val(x)
    if act.kinked:
        N = act_mod.sample_count(xv.shape[-1] - 1, pad)
        _watch(act_mod.to_angular(xv, N) > 0)
    y = act_mod.apply_fft(xv, act, pad).astype(xv.dtype)
    return tape.record(y, (x,), lambda g: (act_mod.apply_fft_vjp(g, xv, act, pad).astype(xv.dtype),), "fft_activation")


def norm_activation(x, bias, act):
    """C-ReLU style nonlinearity; bias has shape (C, K+1)."""
    tape = _tape_of(x, bias)
    xv = _val(x)
    b = _val(bias)
    if act.kinked:
        r = np.abs(xv)
        r[..., 0] = xv[..., 0].real
        _watch(r + b > 0)
    y = act_mod.apply_norm(xv, act, b)

    def vjp(g):
        gx, gb = act_mod.apply_norm_vjp(g, xv, act, b)
        axes = tuple(range(gb.ndim - b.ndim))
        return gx, gb.sum(axis=axes).astype(b.dtype)

    return tape.record(y, (x, bias), vjp, "norm_activation")


def activation(x, act, pad, bias=None):
    if act.norm_only:
        return norm_activation(x, bias, act)
    return fft_activation(x, act, pad)


def pool(x, P):
    """Average over point blocks with a sparse (n_out, n_in) matrix."""
    tape = _tape_of(x)
    return tape.record(c2.pool_points(_val(x), P), (x,), lambda g: (c2.pool_points_vjp(g, P),), "pool")


def take_points(x, idx):
    tape = _tape_of(x)
    xv = _val(x)
    n = xv.shape[1]

    def vjp(g):
        out = np.zeros((g.shape[0], n) + g.shape[2:], dtype=g.dtype)
        out[:, idx] = g
        return (out,)

    return tape.record(xv[:, idx], (x,), vjp, "take_points")


def conv2triv(x):
    tape = _tape_of(x)
    xv = _val(x)

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., 0] = g
        return (out,)

    return tape.record(c2.conv2triv(xv), (x,), vjp, "conv2triv")


def norm_map(x):
    tape = _tape_of(x)
    xv = _val(x)
    return tape.record(c2.norm_map(xv), (x,), lambda g: (c2.norm_map_vjp(g, xv),), "norm_map")


def as_signal(x):
    """Real features (B, F) -> K=0 signals (B, 1, F, 1) so Fourier ops apply."""
    tape = _tape_of(x)
    xv = _val(x)
    ctype = np.result_type(xv.dtype, np.complex64)
    y = xv.astype(ctype)[:, None, :, None]
    return tape.record(y, (x,), lambda g: (g[:, 0, :, 0].real.astype(xv.dtype),), "as_signal")


def reshape(x, shape):
    tape = _tape_of(x)
    xv = _val(x)
    return tape.record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),), "reshape")


def mean_points(x):
    """Average over the point axis (axis 1)."""
    tape = _tape_of(x)
    xv = _val(x)
    n = xv.shape[1]

    def vjp(g):
        return (np.repeat(g[:, None] / n, n, axis=1).astype(xv.dtype),)

    return tape.record(xv.mean(axis=1), (x,), vjp, "mean_points")


def linear(x, W, b):
    """x (B, F_in) @ W (F_in, F_out) + b."""
    tape = _tape_of(x, W, b)
    xv, Wv = _val(x), _val(W)

    def vjp(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return tape.record(xv @ Wv + _val(b), (x, W, b), vjp, "linear")


def dropout(x, p, rng, training):
    if not training or p == 0:
        return x
    tape = _tape_of(x)
    xv = _val(x)
    keep = (rng.random(xv.shape) >= p).astype(xv.dtype) / (1 - p)
    return tape.record(xv * keep, (x,), lambda g: (g * keep,), "dropout")


def log_softmax_nll(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    tape = _tape_of(logits)
    z = _val(logits)
    labels = np.asarray(labels)
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1
        return ((g / B) * p,)

    return tape.record(np.asarray(loss, dtype=z.dtype), (logits,), vjp, "nll")


def sum_real_square(x):
    """sum Re(x)^2 over all entries; handy for tests."""
    tape = _tape_of(x)
    xv = _val(x)
    return tape.record(np.asarray(np.sum(xv.real**2)), (x,), lambda g: ((2 * g * xv.real).astype(xv.dtype),), "sum_re_sq")


def inner(x, w):
    """Re sum conj(w) * x with a fixed array w: a generic scalar probe."""
    tape = _tape_of(x)
    xv = _val(x)
    return tape.record(np.asarray(np.sum(np.real(np.conj(w) * xv))), (x,), lambda g: ((g * w).astype(xv.dtype),), "inner")


# -- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param, grad, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update; returns the new parameter value and updates `state` in place."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1**state.t)
    vhat = state.v / (1 - b2**state.t)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = [AdamState(np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params]

    def step(self):
        for p, s in zip(self.params, self.state):
            if p.grad is None:
                continue
            p.value = adam_step(p.value, p.grad, s, self.lr, self.betas, self.eps).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- finite-difference checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    step: float
    max_rel: dict = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def worst(self):
        return max(self.max_rel.values(), default=0.0)

    def ok(self, tol=1e-4):
        return self.checked > 0 and self.worst < tol


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(loss_fn, params, samples=50, h=1e-5, rng=None, floor=1e-8):
    """Compare analytic gradients with central differences on random entries.

    `loss_fn()` must build a fresh tape, return the scalar loss tensor and be
    deterministic. Entries where the perturbation flips a kink pattern (ReLU
    sign, clipping on/off) are skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    with KinkMonitor() as mon:
        loss = loss_fn()
    base = mon.patterns
    loss.tape.backward(loss)
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.value.size) if p.mask is None or p.mask.ravel()[j]]
    pick = rng.choice(len(entries), size=min(samples, len(entries)), replace=False)
    report = GradCheckReport(step=h)

    def evaluate():
        with KinkMonitor() as m:
            v = float(loss_fn().value)
        return v, m.patterns

    for e in pick:
        i, j = entries[e]
        p = params[i]
        flat = p.value.reshape(-1)
        old = flat[j]
        flat[j] = old + h
        lp, pp = evaluate()
        flat[j] = old - h
        lm, pm = evaluate()
        flat[j] = old
        if pp != base or pm != base:
            report.skipped += 1
            continue
        fd = (lp - lm) / (2 * h)
        an = float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0
        rel = relative_error(an, fd, floor)
        key = p.name or f"param{i}"
        report.max_rel[key] = max(report.max_rel.get(key, 0.0), rel)
        report.checked += 1
    return report
