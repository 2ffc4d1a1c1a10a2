# Oriented points (surfels) carry a tangent frame. Before two surfels talk,
# the sender's coefficients are moved into the receiver's frame through the
# common tangent of both planes. For the first harmonic this is the same as
# projecting a tangent vector onto the other plane.

import numpy as np

from steerfft.cli import surfel_invariance
from steerfft.surfel import align_coefficients, make_frame

rng = np.random.default_rng(2)
n1 = rng.standard_normal(3)
n2 = rng.standard_normal(3)
f1 = make_frame(n1 / np.linalg.norm(n1))
f2 = make_frame(n2 / np.linalg.norm(n2))

z = np.array([0.3, 0.8 - 0.5j])
v = z[1].real * f1[0] + z[1].imag * f1[1]  # the tangent vector z_1 encodes
aligned = align_coefficients(z, f1, f2)
print("aligned z_1:        ", np.round(aligned[1], 12))
print("projected vector:   ", np.round(v @ f2[0] + 1j * v @ f2[1], 12))

# %% a one-layer surfel network on a sphere, read out by averaging z_0
dev = surfel_invariance(points=200, rotations=20, seed=0)
print(f"largest relative change of the readout over 20 random rotations: {dev:.1e}")
