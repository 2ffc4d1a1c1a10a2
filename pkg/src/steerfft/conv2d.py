"""SE(2)-equivariant convolution on 2D point clouds.

Each output point i collects every input point j through a stack of Gaussian
rings. With displacement d = p_j - q_i at polar coordinates (r, theta), ring m
contributes

    z'_{k'}(i) += q[m, k', k] * w_m(r) * exp(-i (k' - k) theta) * z_k(j)

for every admissible pair with |k' - k| in the ring's frequency set. The phase
sign matches ``fourier.rotate``: rotating all coordinates and all input signals
by theta rotates every output signal by theta.

Implementation: per (ring, f >= 0) a basis matrix G[i, j] = w_m(r) exp(-i f theta)
is multiplied against the full -K..K input band (one GEMM over the whole batch),
negative offsets come from conjugate symmetry, then a per-output-frequency
complex channel mix applies q.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.special import erf

from .fourier import full_band, rotate, realify

CUTOFF = 1e-4
# above this many dense basis entries we switch to a sparse matrix
DENSE_LIMIT = 60_000_000


class DimensionError(ValueError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Ring:
    radius: float
    sigma: float
    freqs: tuple = (0,)

    def __post_init__(self):
        f = tuple(sorted(set(abs(int(v)) for v in self.freqs)))
        if self.radius < 0 or self.sigma <= 0:
            raise ValueError("ring needs radius >= 0 and sigma > 0")
        if self.radius == 0 and f != (0,):
            raise ValueError("a ring at radius 0 only supports frequency 0")
        object.__setattr__(self, "freqs", f)

    def reach(self, cutoff=CUTOFF):
        return self.radius + self.sigma * np.sqrt(2 * np.log(1 / cutoff))

    def mass(self):
        """Integral of the profile over the plane, floored at one point's worth."""
        r, s = self.radius, self.sigma
        m = 2 * np.pi * (s * s * np.exp(-r * r / (2 * s * s)) + r * s * np.sqrt(np.pi / 2) * (1 + erf(r / (s * np.sqrt(2)))))
        return max(1.0, m)


def ring(radius, sigma, max_freq):
    """Ring with the symmetric frequency range -max_freq..max_freq."""
    return Ring(radius, sigma, tuple(range(max_freq + 1)))


@dataclass(frozen=True)
class RingFilterSpec:
    rings: tuple
    normalize: bool = True
    cutoff: float = CUTOFF

    def __post_init__(self):
        object.__setattr__(self, "rings", tuple(self.rings))

    @classmethod
    def from_table(cls, rows, **kw):
        """Rows of (radius, sigma, max_freq) as printed in architecture tables."""
        return cls(tuple(ring(r, s, f) for r, s, f in rows), **kw)

    def reach(self):
        return max(rg.reach(self.cutoff) for rg in self.rings)

    def profiles(self, r):
        """(num_rings,) + r.shape ring weights, zeroed below the cutoff."""
        out = []
        for rg in self.rings:
            w = np.exp(-((r - rg.radius) ** 2) / (2 * rg.sigma**2))
            if self.cutoff > 0:
                w = np.where(w < self.cutoff, 0.0, w)
            if self.normalize:
                w = w / rg.mass()
            out.append(w)
        return np.stack(out)


class TermLayout:
    """Index tables for the admissible (ring, k', k) coefficient triples.

    Only k' >= 0 is stored. For k' = 0 only k >= 0 is kept; the partner
    q[m, 0, -k] = conj(q[m, 0, k]) is implied and q[m, 0, 0] is real.
    """

    def __init__(self, ring_freqs, K_in, K_out):
        self.ring_freqs = [tuple(f) for f in ring_freqs]
        self.K_in, self.K_out = K_in, K_out
        self.mf = [(m, f) for m, fs in enumerate(self.ring_freqs) for f in fs]
        mf_index = {mf: i for i, mf in enumerate(self.mf)}
        terms = []
        for kp in range(K_out + 1):
            for m, fs in enumerate(self.ring_freqs):
                for k in range(-K_in, K_in + 1):
                    if kp == 0 and k < 0:
                        continue
                    if abs(kp - k) in fs:
                        terms.append((m, kp, k))
        if not terms:
            raise DimensionError("filter admits no coefficient pairs")
        self.terms = terms
        t = np.array(terms)
        f = t[:, 1] - t[:, 2]
        self.kprime = t[:, 1]
        self.mf_idx = np.array([mf_index[(m, abs(ff))] for (m, _, _), ff in zip(terms, f)])
        self.conj = f < 0
        # A_{m,-f,k} = conj(A_{m,f,-k})
        self.k_idx = np.where(self.conj, K_in - t[:, 2], K_in + t[:, 2])
        self.weight = np.where((t[:, 1] == 0) & (t[:, 2] > 0), 2.0, 1.0)
        self.real_only = (t[:, 1] == 0) & (t[:, 2] == 0)
        self.groups = []
        for kp in range(K_out + 1):
            idx = np.nonzero(self.kprime == kp)[0]
            if idx.size:
                self.groups.append((kp, idx[0], idx[-1] + 1))

    @property
    def num_terms(self):
        return len(self.terms)

    @property
    def num_mf(self):
        return len(self.mf)

    def fan_in(self, C_in):
        """Admissible input (ring, k) pairs per output frequency, times channels."""
        fan = np.zeros(self.K_out + 1)
        for (m, kp, k) in self.terms:
            fan[kp] += 2 if (kp == 0 and k > 0) else 1
        return fan * C_in

    def real_dof(self):
        return int(np.sum(np.where(self.real_only, 1, 2)))


def layout_for(spec, K_in, K_out):
    return TermLayout([rg.freqs for rg in spec.rings], K_in, K_out)


@dataclass
class LayerParams:
    """Trainable coefficients q, stored as real pairs of shape (T, C_out, C_in, 2)."""

    layout: TermLayout
    q: np.ndarray

    @classmethod
    def init(cls, layout, C_in, C_out, rng, dtype=np.float64):
        """He-style init: Re and Im each with variance 1 / fan_in."""
        fan = layout.fan_in(C_in)
        std = np.sqrt(1.0 / fan[layout.kprime])
        q = rng.standard_normal((layout.num_terms, C_out, C_in, 2)) * std[:, None, None, None]
        q[layout.real_only, ..., 1] = 0.0
        return cls(layout, q.astype(dtype))

    @property
    def shape(self):
        return self.q.shape[1], self.q.shape[2]

    def complex(self):
        return self.q[..., 0] + 1j * self.q[..., 1]

    def coefficient(self, m, kp, k):
        """q[m, k', k] as a (C_out, C_in) complex matrix, zero where inadmissible."""
        c = self.complex()
        conj = False
        if kp == 0 and k < 0:
            k, conj = -k, True
        for t, term in enumerate(self.layout.terms):
            if term == (m, kp, k):
                return np.conj(c[t]) if conj else c[t]
        return np.zeros(self.shape, dtype=c.dtype)

    def num_real_params(self):
        C_out, C_in = self.shape
        return self.layout.real_dof() * C_out * C_in


def rotation_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_coords(coords, theta):
    return np.asarray(coords, dtype=float) @ rotation_matrix(theta).T


class ConvBasis:
    """Stacked basis matrix G of shape (n_mf * n_out, n_in), slot-major."""

    def __init__(self, matrix, n_out, n_mf, n_in):
        self.matrix = matrix
        self.n_out, self.n_mf, self.n_in = n_out, n_mf, n_in
        self.sparse = scipy.sparse.issparse(matrix)
        self._adjoint = None

    def apply(self, x2):
        return self.matrix @ x2

    def apply_adjoint(self, y2):
        if self._adjoint is None:
            self._adjoint = self.matrix.conj().T
            if self.sparse:
                self._adjoint = self._adjoint.tocsr()
        return self._adjoint @ y2


def build_basis(in_coords, out_coords, spec, layout, dtype=np.complex128, pool=None):
    """Evaluate w_m(r) exp(-i f theta) for all output/input pairs and (ring, f>=0) slots.

    With `pool` (sparse (n_blocks, n_out) averaging matrix) the rows are averaged
    over output blocks, which fuses conv and average pooling into one operator.
    """
    pin = np.asarray(in_coords, dtype=float)
    pout = np.asarray(out_coords, dtype=float)
    n_in, n_out, n_mf = len(pin), len(pout), layout.num_mf
    if n_in * n_out * n_mf <= DENSE_LIMIT:
        G = _dense_basis(pin, pout, spec, layout)
        if pool is not None:
            G = np.stack([np.asarray(pool @ g) for g in G])
        n_rows = G.shape[1]
        return ConvBasis(G.reshape(n_mf * n_rows, n_in).astype(dtype), n_rows, n_mf, n_in)
    G = _sparse_basis(pin, pout, spec, layout)
    if pool is not None:
        G = [pool @ g for g in G]
    n_rows = G[0].shape[0]
    return ConvBasis(scipy.sparse.vstack(G).tocsr().astype(dtype), n_rows, n_mf, n_in)


def _pair_terms(d, spec, layout):
    r = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(d[..., 1], d[..., 0])
    w = spec.profiles(r)
    coincident = r < 1e-9
    cols = []
    for m, f in layout.mf:
        if f == 0:
            cols.append(w[m].astype(complex))
        else:
            cols.append(np.where(coincident, 0.0, w[m] * np.exp(-1j * f * theta)))
    return cols


def _dense_basis(pin, pout, spec, layout):
    d = pin[None, :, :] - pout[:, None, :]
    return np.stack(_pair_terms(d, spec, layout))  # (n_mf, n_out, n_in)


def _sparse_basis(pin, pout, spec, layout):
    from scipy.spatial import cKDTree

    tree = cKDTree(pin)
    pairs = tree.query_ball_point(pout, spec.reach())
    rows = np.repeat(np.arange(len(pout)), [len(p) for p in pairs])
    cols = np.concatenate([np.asarray(p, dtype=int) for p in pairs]) if len(rows) else np.zeros(0, int)
    vals = _pair_terms(pin[cols] - pout[rows], spec, layout)
    shape = (len(pout), len(pin))
    return [scipy.sparse.csr_matrix((v, (rows, cols)), shape=shape) for v in vals]


# The basis response A has layout (n_mf, n_out, 2K+1, B, C_in): one block per
# (ring, f) slot, so the term gathers below read contiguous (B, C_in) tiles.


def _gather(A, layout, lo, hi):
    """Stack the basis responses needed by terms lo..hi as (n_out * B, T * C_in)."""
    S = A[layout.mf_idx[lo:hi], :, layout.k_idx[lo:hi]]  # (T, n_out, B, C_in)
    flip = layout.conj[lo:hi]
    if flip.any():
        S[flip] = np.conj(S[flip])
    T, n_out, B, C_in = S.shape
    return S.transpose(1, 2, 0, 3).reshape(n_out * B, T * C_in)


def _mix_matrix(qc, layout, lo, hi):
    Q = qc[lo:hi] * layout.weight[lo:hi, None, None]  # (T, C_out, C_in)
    T, C_out, C_in = Q.shape
    return Q.transpose(0, 2, 1).reshape(T * C_in, C_out)


def conv_apply(x, basis, layout, qc):
    """Array-level forward. x: (B, n_in, C_in, K_in+1), qc: (T, C_out, C_in) complex.

    Returns the output (B, n_out, C_out, K_out+1) and the basis response A used by
    the backward pass.
    """
    B, n_in, C_in, Kp1 = x.shape
    if n_in != basis.n_in:
        raise DimensionError(f"input has {n_in} points, basis expects {basis.n_in}")
    if Kp1 - 1 != layout.K_in:
        raise DimensionError(f"input band K={Kp1 - 1}, layer expects K={layout.K_in}")
    if qc.shape[2] != C_in:
        raise DimensionError(f"input has {C_in} channels, weights expect {qc.shape[2]}")
    K2 = 2 * layout.K_in + 1
    xf = full_band(x)
    X2 = xf.transpose(1, 3, 0, 2).reshape(n_in, K2 * B * C_in)
    A = np.asarray(basis.apply(X2)).reshape(basis.n_mf, basis.n_out, K2, B, C_in)
    return mix_apply(A, layout, qc), A


def mix_apply(A, layout, qc):
    """Channel/frequency mixing of a basis response A (n_mf, n_out, 2K+1, B, C_in)."""
    _, n_out, _, B, _ = A.shape
    C_out = qc.shape[1]
    y = np.zeros((B, n_out, C_out, layout.K_out + 1), dtype=np.result_type(A.dtype, qc.dtype))
    for kp, lo, hi in layout.groups:
        Yk = _gather(A, layout, lo, hi) @ _mix_matrix(qc, layout, lo, hi)
        if kp == 0:
            Yk = Yk.real
        y[..., kp] = Yk.reshape(n_out, B, C_out).transpose(1, 0, 2)
    return y


def mix_vjp(gy, A, layout, qc, need_input=True):
    """Gradients of `mix_apply` wrt the complex weights and (optionally) A."""
    n_mf, n_out, K2, B, C_in = A.shape
    C_out = qc.shape[1]
    gq = np.zeros_like(qc)
    gA = np.zeros_like(A) if need_input else None
    for kp, lo, hi in layout.groups:
        S2 = _gather(A, layout, lo, hi)
        g = gy[..., kp].transpose(1, 0, 2).reshape(n_out * B, C_out)
        if kp == 0:
            g = g.real.astype(A.dtype)
        T = hi - lo
        # S^H g computed as conj(S^T conj(g)) so the big operand is never copied
        gQ = np.conj(S2.T @ np.conj(g)).reshape(T, C_in, C_out).transpose(0, 2, 1)
        gq[lo:hi] = gQ * layout.weight[lo:hi, None, None]
        del S2
        if need_input:
            gS = g @ _mix_matrix(qc, layout, lo, hi).conj().T
            gS = gS.reshape(n_out, B, T, C_in).transpose(2, 0, 1, 3)
            for t in range(T):
                s = gS[t]
                if layout.conj[lo + t]:
                    s = np.conj(s)
                gA[layout.mf_idx[lo + t], :, layout.k_idx[lo + t]] += s
    return gq, gA


def conv_vjp(gy, A, basis, layout, qc, need_input=True):
    """Gradients wrt the complex weights (T, C_out, C_in) and the input."""
    n_mf, n_out, K2, B, C_in = A.shape
    gq, gA = mix_vjp(gy, A, layout, qc, need_input)
    if not need_input:
        return gq, None
    gX2 = np.asarray(basis.apply_adjoint(gA.reshape(n_mf * n_out, K2 * B * C_in)))
    gxf = gX2.reshape(basis.n_in, K2, B, C_in).transpose(2, 0, 3, 1)
    return gq, full_band_vjp(gxf)


def full_band_vjp(gf):
    K = (gf.shape[-1] - 1) // 2
    g = np.array(gf[..., K:], copy=True)
    g[..., 1:] += np.conj(gf[..., :K][..., ::-1])
    return g


@dataclass
class PointCloud2D:
    """Points with a batch of feature maps: coords (n, 2), features (B, n, C, K+1)."""

    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        f = np.asarray(self.features)
        if f.ndim == 3:
            f = f[None]
        self.features = f
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DimensionError("coords must be (n, 2)")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if f.shape[1] != len(self.coords):
            raise DimensionError(f"{len(self.coords)} points but features for {f.shape[1]}")

    @property
    def K(self):
        return self.features.shape[-1] - 1

    def rotated(self, theta):
        return PointCloud2D(rotate_coords(self.coords, theta), realify(rotate(self.features, theta)))


def conv_forward(cloud, spec, params, output_coords):
    """Convolve a point cloud onto `output_coords`."""
    layout = params.layout
    if params.shape[1] != cloud.features.shape[2]:
        raise DimensionError("channel count does not match the weights")
    basis = build_basis(cloud.coords, output_coords, spec, layout, np.result_type(cloud.features.dtype, np.complex64))
    y, _ = conv_apply(cloud.features, basis, layout, params.complex())
    return PointCloud2D(output_coords, y)


# -- Fourier batch normalisation -------------------------------------------------


@dataclass
class BatchNormFourier:
    """Per-channel normalisation of angular functions from z_0 and the power spectrum."""

    num_channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    gamma: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        C = self.num_channels
        if self.running_mean is None:
            self.running_mean = np.zeros(C)
        if self.running_var is None:
            self.running_var = np.ones(C)
        if self.gamma is None:
            self.gamma = np.ones(C)
        if self.beta is None:
            self.beta = np.zeros(C)

    def __call__(self, x, training=False):
        y, _ = batch_norm(x, self.gamma, self.beta, self, training)
        return y


def fourier_moments(x):
    """Per-channel mean of z_0 and mean power over every axis but the channel axis (-2)."""
    axes = tuple(range(x.ndim - 2))
    z0 = x[..., 0].real
    power = z0**2 + 2 * np.sum(np.abs(x[..., 1:]) ** 2, axis=-1)
    return z0.mean(axis=axes), power.mean(axis=axes)


def batch_norm(x, gamma, beta, bn, training):
    """Returns the output and a cache for the backward pass.

    mean = E[z_0], var = E[sum_k |z_k|^2] - mean^2, i.e. the variance of the
    angular function over batch, points and angles.
    """
    if training:
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        mu, power = fourier_moments(x)
        var = np.maximum(power - mu**2, 0.0)
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var
    else:
        mu, var = bn.running_mean, bn.running_var
    rdt = x.real.dtype
    s = (1.0 / np.sqrt(var + bn.eps)).astype(rdt)
    g = np.asarray(gamma, dtype=rdt)
    y = x * (g * s)[:, None]
    y[..., 0] = (g * s) * (x[..., 0].real - mu.astype(rdt)) + np.asarray(beta, dtype=rdt)
    return y, (mu.astype(rdt), s, training)


def batch_norm_vjp(gy, x, gamma, cache):
    """Gradients wrt input, gamma, beta."""
    mu, s, training = cache
    axes = tuple(range(x.ndim - 2))
    g0 = gy[..., 0].real
    xc0 = x[..., 0].real - mu
    gbeta = g0.sum(axis=axes)
    dot = g0 * xc0 + np.sum(np.real(np.conj(gy[..., 1:]) * x[..., 1:]), axis=-1)
    ggamma = (dot * s).sum(axis=axes)
    gamma = np.asarray(gamma, dtype=s.dtype)
    gx = gy * (gamma * s)[:, None]
    gx[..., 0] = g0 * (gamma * s)
    if training:
        M = np.prod([x.shape[a] for a in axes])
        gs = (gamma * dot).sum(axis=axes)
        gv = -0.5 * s**3 * gs
        gmu = -(gamma * s) * gbeta
        gx[..., 0] += gmu / M + gv * (2.0 / M) * xc0
        gx[..., 1:] += (gv * (4.0 / M))[:, None] * x[..., 1:]
    return gx, ggamma, gbeta


# -- pooling, cropping, invariant maps -------------------------------------------


def grid_indices(coords, tol=1e-6):
    """Integer grid positions relative to the bounding-box corner; refuses off-grid points."""
    c = np.asarray(coords, dtype=float)
    rel = c - c.min(axis=0)
    idx = np.rint(rel)
    if np.abs(rel - idx).max(initial=0.0) > tol:
        raise GridError("coordinates are not on a unit-spaced grid")
    return idx.astype(int)


def pool_assignment(coords, factor=2):
    """Block id per point for factor x factor average pooling, plus block count."""
    idx = grid_indices(coords) // factor
    keys, inverse = np.unique(idx, axis=0, return_inverse=True)
    return inverse.reshape(-1), len(keys)


def pool_matrix(assign, n_blocks):
    n = len(assign)
    counts = np.bincount(assign, minlength=n_blocks).astype(float)
    return scipy.sparse.csr_matrix((1.0 / counts[assign], (assign, np.arange(n))), shape=(n_blocks, n))


def pool_points(x, P):
    """Average features over point blocks: x (B, n, ...) -> (B, n_blocks, ...)."""
    B, n = x.shape[:2]
    rest = x.shape[2:]
    flat = x.transpose(1, 0, *range(2, x.ndim)).reshape(n, -1)
    out = np.asarray(P @ flat).reshape((P.shape[0], B) + rest)
    return out.transpose(1, 0, *range(2, x.ndim)).astype(x.dtype, copy=False)


def pool_points_vjp(g, P):
    return pool_points(g, P.T.tocsr())


def avg_pool(cloud, factor=2, assign=None):
    """2x2 average pooling; coordinates are block-averaged then divided by the factor."""
    if assign is None:
        assign, n_blocks = pool_assignment(cloud.coords, factor)
    else:
        n_blocks = int(assign.max()) + 1
    P = pool_matrix(assign, n_blocks)
    coords = np.asarray(P @ cloud.coords) / factor
    return PointCloud2D(coords, pool_points(cloud.features, P))


def crop_indices(coords, margin):
    """Points at least `margin` grid steps inside the bounding box on every side."""
    c = np.asarray(coords, dtype=float)
    lo, hi = c.min(axis=0), c.max(axis=0)
    tol = 1e-6
    keep = np.all((c - lo >= margin - tol) & (hi - c >= margin - tol), axis=1)
    return np.nonzero(keep)[0]


def crop(cloud, margin):
    keep = crop_indices(cloud.coords, margin)
    return PointCloud2D(cloud.coords[keep], cloud.features[:, keep])


def conv2triv(x):
    """Rotation-invariant z_0 per channel: (..., C, K+1) -> (..., C)."""
    return np.asarray(x)[..., 0].real


def norm_map(x):
    """z_0 and |z_k| for k >= 1, flattened per point: (..., C, K+1) -> (..., C*(K+1))."""
    x = np.asarray(x)
    out = np.abs(x)
    out[..., 0] = x[..., 0].real
    return out.reshape(x.shape[:-2] + (-1,))


def norm_map_vjp(g, x):
    g = g.reshape(x.shape)
    a = np.abs(x)
    safe = np.where(a > 0, a, 1)
    gx = np.where(a > 0, g * x / safe, 0).astype(x.dtype)
    gx[..., 0] = g[..., 0]
    return gx
