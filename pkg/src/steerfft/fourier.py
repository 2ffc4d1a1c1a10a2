"""Band-limited periodic functions stored as half-spectrum Fourier coefficients.

A real function x(alpha) = sum_{k=-K..K} z_k exp(i k alpha) with z_{-k} = conj(z_k)
is stored as the K+1 coefficients z_0..z_K along the last array axis. All array
functions here broadcast over leading axes, so a whole feature tensor of shape
(batch, points, channels, K+1) can be transformed at once.

Conventions:
    forward transform carries 1/N, inverse carries none
    rotate(z, theta) multiplies z_k by exp(-i k theta), i.e. x(alpha) -> x(alpha - theta)
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft


class UnderSamplingError(ValueError):
    """Raised when fewer than 2K+1 angular samples are requested."""


def num_coeffs(K):
    """Paper-style coefficient count C = 2K+1."""
    return 2 * K + 1


def max_frequency(coeffs):
    return coeffs.shape[-1] - 1


def _check_samples(N, K):
    if N < 2 * K + 1:
        raise UnderSamplingError(f"{N} samples cannot represent frequency {K} (need >= {2 * K + 1})")


def full_band(z):
    """Materialise the -K..K band; index K + k holds z_k."""
    z = np.asarray(z)
    neg = np.conj(z[..., :0:-1])
    return np.concatenate([neg, z], axis=-1)


def half_band(zf):
    K = (zf.shape[-1] - 1) // 2
    return zf[..., K:]


def evaluate(z, angle):
    """Value of the real function at `angle` (scalar or array, broadcast against leading axes)."""
    z = np.asarray(z)
    angle = np.asarray(angle, dtype=float)
    k = np.arange(z.shape[-1])
    phase = np.exp(1j * angle[..., None] * k)
    s = z[..., 0].real + 2.0 * np.real(np.sum(z[..., 1:] * phase[..., 1:], axis=-1))
    return s


def to_angular(z, N):
    """Samples x(2 pi j / N), j = 0..N-1, via a zero-padded inverse real FFT."""
    z = np.asarray(z)
    K = max_frequency(z)
    _check_samples(N, K)
    return scipy.fft.irfft(z, n=N, axis=-1, norm="forward")


def from_angular(samples, K):
    """First K+1 Fourier coefficients of N real samples; higher frequencies are dropped."""
    samples = np.asarray(samples)
    N = samples.shape[-1]
    _check_samples(N, K)
    return scipy.fft.rfft(samples, axis=-1, norm="forward")[..., : K + 1]


def rotate(z, theta):
    """Rotate the angular pattern by +theta; theta broadcasts against leading axes."""
    z = np.asarray(z)
    k = np.arange(z.shape[-1])
    theta = np.asarray(theta, dtype=float)
    phase = np.exp(-1j * theta[..., None] * k).astype(z.dtype if np.iscomplexobj(z) else complex)
    return z * phase


def l1_norm(z):
    """|z_0| + 2 sum_{k>=1} |z_k|, an upper bound on max_alpha |x(alpha)|."""
    a = np.abs(np.asarray(z))
    return a[..., 0] + 2.0 * a[..., 1:].sum(axis=-1)


def l2_norm(z):
    a = np.abs(np.asarray(z)) ** 2
    return np.sqrt(a[..., 0] + 2.0 * a[..., 1:].sum(axis=-1))


def clip_l1(z, c):
    """Scale each signal down so its l1 norm is at most c."""
    if c <= 0:
        raise ValueError("clip value must be positive")
    z = np.asarray(z)
    n = l1_norm(z)
    scale = np.where(n > c, c / np.maximum(n, np.finfo(float).tiny), 1.0)
    return z * scale[..., None].astype(z.real.dtype)


def realify(z):
    """Force Im(z_0) = 0."""
    z = np.array(z, copy=True)
    z[..., 0] = z[..., 0].real
    return z


@dataclass(frozen=True)
class BandLimitedSignal:
    """A single real band-limited function; `coeffs` holds z_0..z_K."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex).reshape(-1)
        if c.size == 0:
            raise ValueError("need at least z_0")
        if c[0].imag != 0.0:
            raise ValueError("z_0 must be real")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, K):
        return cls(np.zeros(K + 1, dtype=complex))

    @classmethod
    def from_samples(cls, samples, K):
        return cls(realify(from_angular(np.asarray(samples, dtype=float), K)))

    @property
    def K(self):
        return self.coeffs.size - 1

    def __call__(self, angle):
        return evaluate(self.coeffs, angle)

    def samples(self, N):
        return to_angular(self.coeffs, N)

    def rotated(self, theta):
        return BandLimitedSignal(realify(rotate(self.coeffs, theta)))

    def l1_norm(self):
        return float(l1_norm(self.coeffs))

    def clipped(self, c):
        return BandLimitedSignal(clip_l1(self.coeffs, c))

    def full(self):
        return full_band(self.coeffs)


@dataclass
class FourierFeatureMap:
    """Per-point, per-channel coefficient stacks, shape (n, d, K+1)."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.ndim != 3:
            raise ValueError(f"expected (points, channels, K+1), got {self.coeffs.shape}")
        if not np.iscomplexobj(self.coeffs):
            self.coeffs = self.coeffs.astype(complex)

    @property
    def num_points(self):
        return self.coeffs.shape[0]

    @property
    def num_channels(self):
        return self.coeffs.shape[1]

    @property
    def K(self):
        return self.coeffs.shape[2] - 1

    def signal(self, point, channel):
        return BandLimitedSignal(self.coeffs[point, channel])

    def rotated(self, theta):
        return FourierFeatureMap(realify(rotate(self.coeffs, theta)))
