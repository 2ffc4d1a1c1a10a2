# A feature in this library is a real function on the circle, kept as its
# first few Fourier coefficients z_0..z_K. This walk-through shows what that
# buys: rotations become phase shifts, and the L1 norm of the coefficients
# bounds the function everywhere.

import numpy as np

from steerfft.fourier import clip_l1, evaluate, from_angular, l1_norm, rotate, to_angular

rng = np.random.default_rng(0)

# %% a random band-limited signal with K = 4
K = 4
z = rng.standard_normal(K + 1) + 1j * rng.standard_normal(K + 1)
z[0] = z[0].real  # the mean of a real function is real
print("coefficients:", np.round(z, 3))

# 2K+1 samples are enough to recover it, more samples change nothing
for N in (2 * K + 1, 16, 101):
    back = from_angular(to_angular(z, N), K)
    print(f"N = {N:3d}  roundtrip error {np.abs(back - z).max():.1e}")

# %% rotating the pattern by theta multiplies z_k by exp(-i k theta)
theta = 0.9
alpha = np.linspace(0, 2 * np.pi, 7)
print("x(alpha - theta):  ", np.round(evaluate(z, alpha - theta), 6))
print("rotate(z, theta):  ", np.round(evaluate(rotate(z, theta), alpha), 6))

# %% the L1 norm bounds |x| and clipping it keeps polynomials in a safe range
dense = to_angular(z, 4096)
print(f"max |x| = {np.abs(dense).max():.3f}  <=  ||z||_1 = {l1_norm(z):.3f}")
zc = clip_l1(z, 2.0)
print(f"after clip_l1(., 2): max |x| = {np.abs(to_angular(zc, 4096)).max():.3f}")
