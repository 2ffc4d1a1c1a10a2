"""SE(3)-equivariant convolution on oriented point clouds (surfels).

Every surfel carries a right-handed tangent frame (x, y, n). Angles inside a
frame are read the same way everywhere: direction v = x cos(a) - y sin(a), so
a tangent vector t sits at a = atan2(-<t, y>, <t, x>).

Before two surfels exchange coefficients, the input signal is moved into the
output surfel's frame. Both tangent planes contain the common tangent
u = n1 x n2 / |n1 x n2|. The signal is turned so its angular origin lies on u,
the tilt between the planes is applied by scaling imaginary parts with
<n1, n2>, and the result is turned onto frame 2's origin.
"""

from dataclasses import dataclass

import numpy as np

from .conv2d import DimensionError, TermLayout, full_band_vjp, mix_apply, mix_vjp
from .fourier import BandLimitedSignal, full_band, realify

DEGENERATE = 1e-8
_AXES = np.eye(3)


def make_frame(normal):
    """Deterministic tangent frame (x, y, n) as rows of a 3x3 array."""
    n = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("normal must be a nonzero finite vector")
    if abs(norm - 1) > 1e-6:
        raise ValueError(f"normal must have unit length, got {norm}")
    n = n / norm
    a = _AXES[np.argmin(np.abs(n))]
    x = a - np.dot(a, n) * n
    x /= np.linalg.norm(x)
    y = np.cross(n, x)
    return np.stack([x, y, n])


def make_frames(normals):
    return np.stack([make_frame(n) for n in np.asarray(normals, dtype=float)])


def check_frame(frame, tol=1e-10):
    f = np.asarray(frame, dtype=float)
    if f.shape != (3, 3):
        raise ValueError("frame must be 3x3 with rows x, y, n")
    if np.abs(f @ f.T - np.eye(3)).max() > tol:
        raise ValueError("frame is not orthonormal")
    if abs(np.linalg.det(f) - 1) > tol:
        raise ValueError("frame is not right-handed")
    return f


def frame_angle(t, frame):
    """Angle of tangent vector(s) t in a frame (rows x, y, n)."""
    t = np.asarray(t, dtype=float)
    frame = np.asarray(frame, dtype=float)
    tx = np.sum(t * frame[..., 0, :], axis=-1)
    ty = np.sum(t * frame[..., 1, :], axis=-1)
    return np.arctan2(-ty, tx)


def alignment_geometry(frame_from, frame_to):
    """(angle of u in the source frame, angle of u in the target frame, <n1, n2>).

    Broadcasts over leading axes of the two frame arrays.
    """
    f1 = np.asarray(frame_from, dtype=float)
    f2 = np.asarray(frame_to, dtype=float)
    f1, f2 = np.broadcast_arrays(f1, f2)
    n1, n2 = f1[..., 2, :], f2[..., 2, :]
    cross = np.cross(n1, n2)
    length = np.linalg.norm(cross, axis=-1, keepdims=True)
    degenerate = length < DEGENERATE
    u = np.where(degenerate, f1[..., 0, :], cross / np.where(degenerate, 1, length))
    c = np.sum(n1 * n2, axis=-1)
    return frame_angle(u, f1), frame_angle(u, f2), c


def align_full(zf, a1, a2, c):
    """Align a full -K..K band given the geometry; all arguments broadcast.

    Equivalent to: z_k e^{ik a1}, Im scaled by c, then e^{-ik a2}, written so
    that it acts linearly on the full band.
    """
    K = (zf.shape[-1] - 1) // 2
    k = np.arange(-K, K + 1)
    a1, a2, c = (np.asarray(v)[..., None] for v in (a1, a2, c))
    same = 0.5 * (1 + c) * np.exp(1j * k * (a1 - a2))
    flip = 0.5 * (1 - c) * np.exp(-1j * k * (a1 + a2))
    return same * zf + flip * zf[..., ::-1]


def align_full_vjp(g, a1, a2, c):
    K = (g.shape[-1] - 1) // 2
    k = np.arange(-K, K + 1)
    a1, a2, c = (np.asarray(v)[..., None] for v in (a1, a2, c))
    same = 0.5 * (1 + c) * np.exp(1j * k * (a1 - a2))
    flip = 0.5 * (1 - c) * np.exp(-1j * k * (a1 + a2))
    return np.conj(same) * g + (np.conj(flip) * g)[..., ::-1]


def align_coefficients(signal, frame_from, frame_to):
    """Move a band-limited signal from one tangent frame into another."""
    z = signal.coeffs if isinstance(signal, BandLimitedSignal) else np.asarray(signal)
    check_frame(frame_from, 1e-8)
    check_frame(frame_to, 1e-8)
    a1, a2, c = alignment_geometry(frame_from, frame_to)
    K = z.shape[-1] - 1
    out = realify(align_full(full_band(z), a1, a2, c)[..., K:])
    return BandLimitedSignal(out) if isinstance(signal, BandLimitedSignal) else out


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "frame", check_frame(self.frame))

    @classmethod
    def from_normal(cls, position, normal):
        return cls(position, make_frame(normal))

    @property
    def normal(self):
        return self.frame[2]


@dataclass
class SurfelCloud:
    """positions (n, 3), frames (n, 3, 3) with rows x, y, n, features (B, n, C, K+1)."""

    positions: np.ndarray
    frames: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DimensionError("positions must be (n, 3)")
        if self.frames.shape != (len(self.positions), 3, 3):
            raise DimensionError("need one 3x3 frame per surfel")
        if self.features is not None:
            f = np.asarray(self.features)
            if f.ndim == 3:
                f = f[None]
            if f.shape[1] != len(self.positions):
                raise DimensionError("feature count does not match surfel count")
            self.features = f

    @classmethod
    def from_normals(cls, positions, normals, features=None):
        return cls(positions, make_frames(normals), features)

    @property
    def surfels(self):
        return [Surfel(p, f) for p, f in zip(self.positions, self.frames)]

    def __len__(self):
        return len(self.positions)

    def moved(self, R, t=(0.0, 0.0, 0.0)):
        """Apply the rigid motion p -> R p + t to positions and frames."""
        R = np.asarray(R, dtype=float)
        return SurfelCloud(self.positions @ R.T + np.asarray(t), self.frames @ R.T, self.features)


@dataclass(frozen=True)
class StackFilterSpec:
    """Rings stacked along the normal: one ring per level height.

    sigma is shared by the radial and the vertical Gaussian.
    """

    levels: tuple
    radii: tuple
    sigma: float

    def __post_init__(self):
        levels = tuple(float(h) for h in np.atleast_1d(self.levels))
        radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if radii.size == 1:
            radii = np.repeat(radii, len(levels))
        if radii.size != len(levels):
            raise ValueError("need one radius per level")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(levels) > 2 and not np.allclose(np.diff(levels), levels[1] - levels[0]):
            raise ValueError("levels must be equidistant")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "radii", tuple(radii))

    @classmethod
    def from_range(cls, start, end, step, radius, fwhm):
        n = int(round((end - start) / step)) + 1
        return cls(tuple(start + step * i for i in range(n)), radius, fwhm_to_sigma(fwhm))

    def weights(self, r, h):
        s2 = 2 * self.sigma**2
        return np.stack([np.exp(-((r - R) ** 2) / s2) * np.exp(-((h - L) ** 2) / s2) for L, R in zip(self.levels, self.radii)])

    def layout(self, K_in, K_out):
        """All frequency offsets are admissible."""
        fs = tuple(range(K_in + K_out + 1))
        return TermLayout([fs] * len(self.levels), K_in, K_out)


def fwhm_to_sigma(fwhm):
    return fwhm / np.sqrt(8 * np.log(2))


def _pair_geometry(inp, out_positions, out_frames, spec, layout):
    """Basis (n_out, n_mf, n_in) and alignment angles for all pairs."""
    d = inp.positions[None, :, :] - out_positions[:, None, :]
    nrm = out_frames[:, None, 2, :]
    h = np.sum(d * nrm, axis=-1)
    tang = d - h[..., None] * nrm
    r = np.linalg.norm(tang, axis=-1)
    theta = frame_angle(tang, out_frames[:, None])
    w = spec.weights(r, h)
    coincident = r < 1e-9
    cols = []
    for m, f in layout.mf:
        if f == 0:
            cols.append(w[m].astype(complex))
        else:
            cols.append(np.where(coincident, 0.0, w[m] * np.exp(-1j * f * theta)))
    G = np.stack(cols, axis=1)
    a1, a2, c = alignment_geometry(inp.frames[None, :], out_frames[:, None])
    return G, (a1, a2, c)


def _chunks(n, size):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def surfel_response(inp, out_positions, out_frames, spec, layout, chunk=64):
    """Basis response A (n_mf, n_out, 2K+1, B, C_in) after aligning into each output frame."""
    x = inp.features
    B, n_in, C_in, Kp1 = x.shape
    if Kp1 - 1 != layout.K_in:
        raise DimensionError(f"input band K={Kp1 - 1}, layer expects K={layout.K_in}")
    xf = full_band(x)  # (B, n_in, C, K2)
    n_out = len(out_positions)
    A = np.zeros((layout.num_mf, n_out, xf.shape[-1], B, C_in), dtype=np.result_type(xf.dtype, np.complex64))
    for sl in _chunks(n_out, chunk):
        G, (a1, a2, c) = _pair_geometry(inp, out_positions[sl], out_frames[sl], spec, layout)
        # aligned input per pair: (b, i, j, c, k)
        Z = align_full(xf[:, None], a1[None, :, :, None], a2[None, :, :, None], c[None, :, :, None])
        A[:, sl] = np.einsum("imj,bijck->mikbc", G, Z, optimize=True)
    return A


def surfel_response_vjp(gA, inp, out_positions, out_frames, spec, layout, chunk=64):
    B, n_in, C_in, _ = inp.features.shape
    gxf = np.zeros((B, n_in, C_in, gA.shape[2]), dtype=gA.dtype)
    for sl in _chunks(len(out_positions), chunk):
        G, (a1, a2, c) = _pair_geometry(inp, out_positions[sl], out_frames[sl], spec, layout)
        gZ = np.einsum("imj,mikbc->bijck", np.conj(G), gA[:, sl], optimize=True)
        gxf += align_full_vjp(gZ, a1[None, :, :, None], a2[None, :, :, None], c[None, :, :, None]).sum(axis=1)
    return full_band_vjp(gxf)


def surfel_apply(inp, out_positions, out_frames, spec, layout, qc):
    if qc.shape[2] != inp.features.shape[2]:
        raise DimensionError("channel count does not match the weights")
    A = surfel_response(inp, out_positions, out_frames, spec, layout)
    return mix_apply(A, layout, qc), A


def surfel_vjp(gy, A, inp, out_positions, out_frames, spec, layout, qc, need_input=True):
    gq, gA = mix_vjp(gy, A, layout, qc, need_input)
    if not need_input:
        return gq, None
    return gq, surfel_response_vjp(gA, inp, out_positions, out_frames, spec, layout)


def surfel_conv(inp, spec, params, output):
    """Convolve a feature-carrying SurfelCloud onto the surfels of `output`."""
    if params.layout.K_in != inp.features.shape[-1] - 1:
        raise DimensionError("input band does not match the layer")
    y, _ = surfel_apply(inp, output.positions, output.frames, spec, params.layout, params.complex())
    return SurfelCloud(output.positions, output.frames, y)


def random_rotation(rng):
    """Uniform random rotation matrix."""
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=rng).as_matrix()


def fibonacci_sphere(n, radius=1.0):
    """Near-uniform points on a sphere with outward normals."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    normals = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return radius * normals, normals
