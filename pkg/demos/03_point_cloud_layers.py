# An image becomes a point cloud on the unit grid; each pixel is a K=0
# signal. A steerable conv layer turns it into angular signals, and the whole
# network can be evaluated on an exactly rotated copy of the grid. With the
# norm nonlinearity (C-ReLU) everything commutes with rotation up to rounding.

import numpy as np

from steerfft import autodiff as ad
from steerfft.data import load_dataset
from steerfft.harness import equivariance_sweep
from steerfft.model import SteerableNet, desk_config, table1_config

_, test = load_dataset(n_train=0, n_test=4)

net = SteerableNet(table1_config(), "single")
print(f"full architecture: {net.num_parameters():,} trainable reals")

# %% activations per layer and after an exact rotation of the input grid
net = SteerableNet(desk_config(activation="c_relu"), "double")
x = net.input_features(test.images)
_, acts = net.forward(ad.Tape(retain=False), x, capture=True)
for i, a in enumerate(acts):
    print(f"layer {i}: {a.shape[1]:3d} points, {a.shape[2]:2d} channels, K = {a.shape[3] - 1}")

theta = 1.234
logits = net.forward(ad.Tape(retain=False), x).value
rotated = net.forward(ad.Tape(retain=False), x, plan=net.plan.rotated(theta)).value
print(f"logit change under rotation by {theta}: {np.abs(logits - rotated).max():.1e}")

# %% the same question layer by layer, for ReLU at two pads
net = SteerableNet(desk_config(activation="relu"), "single")
rep = equivariance_sweep(net, test.images, rotations=4, pads=(0, 31))
for r in rep.records:
    if 1 <= r.layer <= 6:
        print(f"ReLU pad {r.pad:2d} layer {r.layer}: mean relative error {r.mean_rel_err:.2e}")
