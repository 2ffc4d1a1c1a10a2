"""Pointwise nonlinearities on band-limited signals.

Three routes:

* ``apply_fft``: sample the angular function on N = 2K+1+pad points, apply the
  scalar function, transform back and keep z_0..z_K. Exact for a degree-D
  polynomial once N >= 2DK+1, approximate (aliased) otherwise.
* ``apply_poly_direct``: expand the polynomial as repeated discrete convolutions
  of the coefficient band. Slow reference, no sampling involved.
* ``apply_norm``: act on coefficient magnitudes only, keeping phases. Exactly
  equivariant, no transform needed.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from numpy.polynomial import polynomial as P
from scipy.special import expit

from .fourier import full_band, l1_norm, max_frequency, to_angular, from_angular

CLIP_VALUE = 5.0


@dataclass(frozen=True)
class Polynomial:
    """phi(x) = sum_j t_j x^j, coefficients in ascending order."""

    coeffs: tuple

    def __post_init__(self):
        c = tuple(float(t) for t in self.coeffs)
        if not c:
            raise ValueError("polynomial needs at least t_0")
        if len(c) > 1 and c[-1] == 0.0:
            raise ValueError("leading coefficient t_D must be nonzero")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self):
        return len(self.coeffs) - 1

    def __call__(self, x):
        return _keep_dtype(P.polyval(x, self.coeffs), x)

    def derivative(self, x):
        if self.degree == 0:
            return np.zeros_like(x)
        return _keep_dtype(P.polyval(x, P.polyder(self.coeffs)), x)


def _keep_dtype(y, x):
    if isinstance(x, np.ndarray) and x.dtype == np.float32:
        return y.astype(np.float32)
    return y


def _relu(x, _):
    return np.maximum(x, 0)


def _relu_d(x, _):
    return (x > 0).astype(x.dtype)


def _leaky(x, a):
    return np.where(x > 0, x, a.slope * x)


def _leaky_d(x, a):
    return np.where(x > 0, 1.0, a.slope).astype(x.dtype)


def _silu(x, _):
    return x * expit(x)


def _silu_d(x, _):
    s = expit(x)
    return s * (1 + x * (1 - s))


def _elu(x, a):
    return np.where(x > 0, x, a.alpha * np.expm1(np.minimum(x, 0)))


def _elu_d(x, a):
    return np.where(x > 0, 1.0, a.alpha * np.exp(np.minimum(x, 0))).astype(x.dtype)


def _tanh(x, _):
    return np.tanh(x)


def _tanh_d(x, _):
    return 1 - np.tanh(x) ** 2


def _sigmoid(x, _):
    return expit(x)


def _sigmoid_d(x, _):
    s = expit(x)
    return s * (1 - s)


def _poly(x, a):
    return a.poly(x)


def _poly_d(x, a):
    return a.poly.derivative(x)


_SCALAR = {
    "relu": (_relu, _relu_d),
    "leaky_relu": (_leaky, _leaky_d),
    "silu": (_silu, _silu_d),
    "elu": (_elu, _elu_d),
    "tanh": (_tanh, _tanh_d),
    "sigmoid": (_sigmoid, _sigmoid_d),
    "poly": (_poly, _poly_d),
}

# scalar functions whose kinks matter for finite-difference checks
KINKED = {"relu", "leaky_relu"}

# norm-only nonlinearities need an output that stays non-negative
NORM_INNER = {"relu", "sigmoid"}


@dataclass(frozen=True)
class Activation:
    """A scalar nonlinearity plus how it is applied to Fourier coefficients.

    ``kind`` is one of the keys of ``_SCALAR``. With ``norm_only`` the scalar
    function acts on coefficient magnitudes (C-ReLU, C-sigmoid).
    """

    kind: str
    slope: float = 0.01
    alpha: float = 1.0
    poly: Polynomial = None
    norm_only: bool = False
    clip: float = field(default=None)

    def __post_init__(self):
        if self.kind not in _SCALAR:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "poly" and self.poly is None:
            raise ValueError("poly activation needs a Polynomial")
        if self.norm_only and self.kind not in NORM_INNER:
            raise ValueError(f"norm-only activation needs a non-negative inner function, got {self.kind}")

    @property
    def name(self):
        if self.norm_only:
            return f"c_{self.kind}"
        if self.kind == "poly":
            return f"poly{self.poly.degree}"
        return self.kind

    def __call__(self, x):
        return _SCALAR[self.kind][0](x, self)

    def derivative(self, x):
        return _SCALAR[self.kind][1](x, self)

    @property
    def kinked(self):
        return self.kind in KINKED


def get_activation(name, **kw):
    """Build an activation from a short name.

    Names: relu, leaky_relu, silu, elu, tanh, sigmoid, poly2, poly4, c_relu, c_sigmoid.
    Polynomials are least-squares ReLU fits on [-5, 5] and get l1 clipping at 5.
    """
    name = name.lower().replace("-", "_")
    if name in ("c_relu", "crelu"):
        return Activation("relu", norm_only=True)
    if name in ("c_sigmoid", "csigmoid"):
        return Activation("sigmoid", norm_only=True)
    if name.startswith("poly"):
        degree = int(name[4:].strip("()") or 2)
        return Activation("poly", poly=fit_poly_relu(degree), clip=kw.pop("clip", CLIP_VALUE))
    return Activation(name, **kw)


def sample_count(K, pad):
    if pad < 0:
        raise ValueError("pad must be non-negative")
    return 2 * K + 1 + pad


def minimal_exact_pad(K, D):
    """Pad at which the FFT length reaches 2DK+1."""
    if D < 1:
        raise ValueError("degree must be >= 1")
    return max(0, 2 * K * (D - 1))


def aliasing_free_pad(K, D):
    """Smallest pad that is exact for coefficients up to K.

    Aliases land on k +/- N, so keeping only |k| <= K needs N > DK + K,
    which is below 2DK+1 for D >= 2.
    """
    if D < 1:
        raise ValueError("degree must be >= 1")
    return max(0, (D - 1) * K)


def apply_fft(z, act, pad):
    """Apply `act` in the angular domain sampled at 2K+1+pad points."""
    if act.norm_only:
        raise ValueError("norm-only activations do not go through the FFT")
    K = max_frequency(z)
    N = sample_count(K, pad)
    s = to_angular(z, N)
    return from_angular(act(s), K)


def apply_fft_vjp(g, z, act, pad):
    K = max_frequency(z)
    N = sample_count(K, pad)
    s = to_angular(z, N)
    c = np.array(g, copy=True)
    c[..., 1:] *= 0.5
    gu = scipy.fft.irfft(c, n=N, axis=-1, norm="forward") / N
    gs = gu * act.derivative(s)
    gz = scipy.fft.rfft(gs, axis=-1)[..., : K + 1]
    gz[..., 1:] *= 2
    return gz


def _convolve_band(a, b):
    """Full discrete convolution of two centred bands along the last axis."""
    la, lb = a.shape[-1], b.shape[-1]
    out = np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (la + lb - 1,), dtype=np.result_type(a, b))
    for i in range(la):
        out[..., i : i + lb] += a[..., i : i + 1] * b
    return out


def apply_poly_direct(z, poly):
    """Polynomial of a band-limited signal by iterated spectral convolution.

    The power band grows to jK at power j; the sum is truncated to K at the end.
    """
    z = np.asarray(z)
    K = max_frequency(z)
    zf = full_band(z)
    t = poly.coeffs
    D = poly.degree
    width = D * K
    acc = np.zeros(z.shape[:-1] + (2 * width + 1,), dtype=np.result_type(z, complex))
    acc[..., width] = t[0]
    power = np.ones(z.shape[:-1] + (1,), dtype=acc.dtype)
    for j in range(1, D + 1):
        power = _convolve_band(power, zf)
        half = j * K
        acc[..., width - half : width + half + 1] += t[j] * power
    return acc[..., width : width + K + 1]


def apply_norm(z, act, bias=0.0):
    """Norm-only nonlinearity: z_k -> z_k * phi(|z_k| + b) / |z_k|, z_0 -> phi(z_0 + b).

    `bias` broadcasts against the (..., K+1) coefficient axis.
    """
    z = np.asarray(z)
    bias = np.broadcast_to(np.asarray(bias, dtype=z.real.dtype), z.shape)
    out = np.empty_like(z)
    out[..., 0] = act(z[..., 0].real + bias[..., 0])
    r = np.abs(z[..., 1:])
    safe = np.where(r > 0, r, 1)
    out[..., 1:] = np.where(r > 0, z[..., 1:] * (act(r + bias[..., 1:]) / safe), 0)
    return out


def apply_norm_vjp(g, z, act, bias=0.0):
    """Returns (grad wrt z, grad wrt bias broadcast to z's shape)."""
    z = np.asarray(z)
    bias = np.broadcast_to(np.asarray(bias, dtype=z.real.dtype), z.shape)
    gz = np.zeros_like(z)
    gb = np.zeros(z.shape, dtype=z.real.dtype)
    x0 = z[..., 0].real + bias[..., 0]
    d0 = act.derivative(x0) * g[..., 0].real
    gz[..., 0] = d0
    gb[..., 0] = d0
    zk = z[..., 1:]
    r = np.abs(zk)
    pos = r > 0
    safe = np.where(pos, r, 1)
    u = zk / safe
    x = r + bias[..., 1:]
    phi = act(x)
    dphi = act.derivative(x)
    h = phi / safe
    dh = dphi / safe - phi / safe**2
    proj = np.real(np.conj(g[..., 1:]) * zk)
    gz[..., 1:] = np.where(pos, h * g[..., 1:] + proj * dh * u, 0)
    gb[..., 1:] = np.where(pos, np.real(np.conj(g[..., 1:]) * u) * dphi, 0)
    return gz, gb


def clip_l1_vjp(g, z, c):
    n = l1_norm(z)
    over = n > c
    if not np.any(over):
        return g
    safe = np.where(over, n, 1)[..., None]
    a = np.abs(z)
    unit = np.where(a > 0, z / np.where(a > 0, a, 1), 0)
    w = np.ones(z.shape[-1])
    w[1:] = 2
    # d(c z / n): direct part plus the shrinkage through n
    inner = np.sum(np.real(np.conj(g) * z), axis=-1, keepdims=True)
    gz = c / safe * g - c / safe**2 * inner * w * unit
    return np.where(over[..., None], gz, g)


def fit_poly_relu(degree, c=5.0, num=10001):
    """Least-squares polynomial fit of ReLU on a uniform grid over [-c, c]."""
    if degree not in (2, 4):
        raise ValueError("ReLU fits are provided for degrees 2 and 4")
    x = np.linspace(-c, c, num)
    t = P.polyfit(x, np.maximum(x, 0), degree)
    # odd terms beyond x vanish by symmetry; drop the fp residue
    t[3::2] = 0.0
    return Polynomial(tuple(t))


def relu_fit_rms(poly, c=5.0, num=10001):
    x = np.linspace(-c, c, num)
    return float(np.sqrt(np.mean((poly(x) - np.maximum(x, 0)) ** 2)))
