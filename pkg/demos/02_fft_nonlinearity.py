# Applying a pointwise nonlinearity to a band-limited signal creates higher
# harmonics. We sample the signal on N = 2K+1+pad angles, apply the function
# there, and keep only z_0..z_K of the result. For a polynomial of degree D
# the created harmonics stop at D*K, so a large enough pad makes the result
# exact; for ReLU the error only shrinks as pad grows.

import numpy as np

from steerfft.activations import Activation, apply_fft, apply_poly_direct, fit_poly_relu, get_activation, minimal_exact_pad
from steerfft.fourier import rotate

rng = np.random.default_rng(1)
K = 4
z = rng.standard_normal((500, K + 1)) + 1j * rng.standard_normal((500, K + 1))
z[:, 0] = z[:, 0].real
z /= np.abs(z).sum(axis=1, keepdims=True)

# %% polynomial: compare with the exact coefficient convolution
poly = fit_poly_relu(2)
print("least-squares quadratic fit of ReLU on [-5, 5]:", np.round(poly.coeffs, 5))
ref = apply_poly_direct(z, poly)
print(f"pad that avoids all wrap-around for D=2, K=4: {minimal_exact_pad(K, 2)}")
for pad in range(0, 9):
    dev = np.abs(apply_fft(z, Activation("poly", poly=poly), pad) - ref).max()
    print(f"  pad {pad}: max deviation {dev:.1e}")
# only wrap-around that lands on |k| <= K matters, so exactness starts at pad (D-1)K = 4

# %% ReLU: equivariance error decreases with pad
relu = get_activation("relu")
for pad in (0, 7, 31, 127, 511):
    errs = []
    for theta in rng.uniform(0, 2 * np.pi, 8):
        a = apply_fft(rotate(z, theta), relu, pad)
        b = rotate(apply_fft(z, relu, pad), theta)
        errs.append(np.abs(a - b).mean())
    print(f"  ReLU pad {pad:3d}: mean |f(Rz) - R f(z)| = {np.mean(errs):.2e}")
