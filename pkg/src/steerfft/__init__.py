"""Rotation-equivariant point-cloud networks with band-limited angular features.

Every feature is a real periodic function of an angle, stored as Fourier
coefficients z_0..z_K. Convolutions on 2D point clouds and on oriented 3D
surfels act on these coefficients equivariantly; pointwise nonlinearities are
evaluated on an oversampled angular grid through the FFT.
"""

from .activations import Activation, Polynomial, apply_fft, apply_norm, apply_poly_direct, get_activation, minimal_exact_pad
from .conv2d import BatchNormFourier, LayerParams, PointCloud2D, Ring, RingFilterSpec, avg_pool, batch_norm, conv2triv, conv_forward, crop, norm_map
from .fourier import BandLimitedSignal, FourierFeatureMap, clip_l1, from_angular, l1_norm, rotate, to_angular
from .model import ModelConfig, SteerableNet, desk_config, table1_config
from .surfel import StackFilterSpec, SurfelCloud, align_coefficients, make_frame, surfel_conv

__version__ = "0.1.0"
