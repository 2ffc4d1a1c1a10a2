import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings, strategies as st

import steerfft.conv2d as c2
from steerfft.conv2d import (
    BatchNormFourier,
    DimensionError,
    GridError,
    LayerParams,
    PointCloud2D,
    Ring,
    RingFilterSpec,
    avg_pool,
    batch_norm,
    batch_norm_vjp,
    build_basis,
    conv2triv,
    conv_apply,
    conv_forward,
    conv_vjp,
    crop,
    fourier_moments,
    layout_for,
    norm_map,
    norm_map_vjp,
    ring,
    rotate_coords,
)
from steerfft.fourier import evaluate, from_angular, realify, rotate
from steerfft.model import grid_coords


def random_features(rng, shape, K):
    z = rng.standard_normal(shape + (K + 1,)) + 1j * rng.standard_normal(shape + (K + 1,))
    return realify(z)


def setup(rng, K_in=2, K_out=3, C_in=3, C_out=4, n=30, n_out=10, dtype=np.float64):
    spec = RingFilterSpec.from_table([(0, 0.005, 0), (1, 0.6, 2), (2, 0.6, 3)])
    layout = layout_for(spec, K_in, K_out)
    params = LayerParams.init(layout, C_in, C_out, rng, dtype)
    pts = rng.uniform(-3, 3, (n, 2))
    out = rng.uniform(-2, 2, (n_out, 2))
    x = random_features(rng, (2, n, C_in), K_in)
    return spec, layout, params, pts, out, x


def test_ring_validation():
    with pytest.raises(ValueError):
        Ring(0.0, 0.5, (0, 1))
    with pytest.raises(ValueError):
        Ring(1.0, 0.0)
    assert ring(2, 0.6, 3).freqs == (0, 1, 2, 3)


def test_layout_invariants():
    spec = RingFilterSpec.from_table([(0, 0.005, 0), (1, 0.6, 2)])
    lay = layout_for(spec, 2, 2)
    for m, kp, k in lay.terms:
        assert kp >= 0 and abs(kp - k) in spec.rings[m].freqs
        assert not (kp == 0 and k < 0)
    assert [lay.terms[i] for i in np.nonzero(lay.real_only)[0]] == [(0, 0, 0), (1, 0, 0)]


def test_single_point_channel_mix():
    spec = RingFilterSpec((Ring(0.0, 0.5),), normalize=False)
    lay = layout_for(spec, 2, 2)
    rng = np.random.default_rng(0)
    p = LayerParams.init(lay, 3, 2, rng)
    x = random_features(rng, (1, 1, 3), 2)
    y = conv_forward(PointCloud2D(np.zeros((1, 2)), x), spec, p, np.zeros((1, 2))).features
    expect = np.zeros((1, 1, 2, 3), complex)
    for k in range(3):
        expect[..., k] = x[0, 0, :, k] @ p.coefficient(0, k, k).T
    np.testing.assert_allclose(y, expect, atol=1e-14)


def _kernel_quadrature(points, spec, K_in, K_out, inputs, n=720):
    """Output coefficients at the origin by integrating the angular kernel numerically.

    All admissible full-band coefficients are 1, so
    kappa(beta, alpha; d) = sum_m w_m(r) sum_{k', k : |k'-k| in F_m} e^{-i(k'-k) theta} e^{i k' beta} e^{-i k alpha}
    and x'(beta) = sum_j mean_alpha kappa(beta, alpha; d_j) x_j(alpha).
    """
    a = 2 * np.pi * np.arange(n) / n
    out = np.zeros(n)
    for p, z in zip(points, inputs):
        r = np.hypot(*p)
        th = np.arctan2(p[1], p[0])
        xa = evaluate(z, a)
        for rg in spec.rings:
            w = np.exp(-((r - rg.radius) ** 2) / (2 * rg.sigma**2))
            for kp in range(-K_out, K_out + 1):
                for k in range(-K_in, K_in + 1):
                    if abs(kp - k) not in rg.freqs:
                        continue
                    inner = np.mean(np.exp(-1j * k * a) * xa)
                    out += np.real(w * np.exp(-1j * (kp - k) * th) * np.exp(1j * kp * a) * inner)
    return from_angular(out, K_out)


def test_quadrature_oracle_constant_input():
    spec = RingFilterSpec((ring(1.0, 0.6, 1),), normalize=False)
    pts = np.array([[0.9, 0.3], [-0.4, 1.1]])
    lay = layout_for(spec, 0, 1)
    p = LayerParams(lay, np.zeros((lay.num_terms, 1, 1, 2)))
    p.q[..., 0] = 1.0
    x = np.ones((1, 2, 1, 1), complex)
    y = conv_forward(PointCloud2D(pts, x), spec, p, np.zeros((1, 2))).features[0, 0, 0]
    # closed form of the angular output: sum_j w(r_j) (1 + 2 cos(beta - theta_j))
    b = 2 * np.pi * np.arange(2000) / 2000
    dense = np.zeros_like(b)
    for q in pts:
        w = np.exp(-((np.hypot(*q) - 1) ** 2) / (2 * 0.36))
        dense += w * (1 + 2 * np.cos(b - np.arctan2(q[1], q[0])))
    np.testing.assert_allclose(y, from_angular(dense, 1), atol=1e-6)
    np.testing.assert_allclose(y, _kernel_quadrature(pts, spec, 0, 1, [np.ones(1, complex)] * 2), atol=1e-6)


def test_quadrature_oracle_general_input():
    rng = np.random.default_rng(1)
    spec = RingFilterSpec((ring(0, 0.5, 0), ring(1.0, 0.6, 1), ring(2.0, 0.6, 2)), normalize=False, cutoff=0.0)
    pts = rng.uniform(-2, 2, (4, 2))
    lay = layout_for(spec, 1, 2)
    p = LayerParams(lay, np.zeros((lay.num_terms, 1, 1, 2)))
    p.q[..., 0] = 1.0
    z = random_features(rng, (4,), 1)
    y = conv_forward(PointCloud2D(pts, z[None, :, None]), spec, p, np.zeros((1, 2))).features[0, 0, 0]
    np.testing.assert_allclose(y, _kernel_quadrature(pts, spec, 1, 2, z), atol=1e-6)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-9), (np.float32, 1e-4)])
def test_layer_equivariance(dtype, tol):
    rng = np.random.default_rng(2)
    spec, lay, p, pts, out, x = setup(rng, dtype=dtype)
    cdt = np.complex128 if dtype == np.float64 else np.complex64
    x = x.astype(cdt)
    y = conv_forward(PointCloud2D(pts, x), spec, p, out).features
    scale = np.abs(y).max()
    for th in rng.uniform(0, 2 * np.pi, 36):
        yr = conv_forward(PointCloud2D(pts, x).rotated(th), spec, p, rotate_coords(out, th)).features
        assert np.abs(yr - rotate(y, th)).max() / scale <= tol


def test_realness_and_linearity():
    rng = np.random.default_rng(3)
    spec, lay, p, pts, out, x = setup(rng)
    x2 = random_features(rng, x.shape[:-1], 2)
    f = lambda v: conv_forward(PointCloud2D(pts, v), spec, p, out).features
    y = f(x)
    assert np.abs(y[..., 0].imag).max() == 0 or np.abs(y[..., 0].imag).max() < 1e-15
    np.testing.assert_allclose(f(2.5 * x - 0.7 * x2), 2.5 * y - 0.7 * f(x2), atol=1e-12)


def test_dimension_errors():
    rng = np.random.default_rng(4)
    spec, lay, p, pts, out, x = setup(rng)
    with pytest.raises(DimensionError):
        conv_forward(PointCloud2D(pts, x[:, :, :2]), spec, p, out)
    with pytest.raises(DimensionError):
        PointCloud2D(pts[:5], x)
    with pytest.raises(ValueError):
        PointCloud2D(np.array([[np.nan, 0.0]]), x[:, :1])


def test_cutoff_limits_reach():
    spec = RingFilterSpec((ring(1.0, 0.6, 1),))
    lay = layout_for(spec, 0, 1)
    p = LayerParams(lay, np.ones((lay.num_terms, 1, 1, 2)))
    far = np.array([[spec.reach() + 0.01, 0.0]])
    y = conv_forward(PointCloud2D(far, np.ones((1, 1, 1, 1), complex)), spec, p, np.zeros((1, 2))).features
    assert np.all(y == 0)


def test_sparse_basis_matches_dense(monkeypatch):
    rng = np.random.default_rng(5)
    spec, lay, p, pts, out, x = setup(rng)
    qc = p.complex()
    b1 = build_basis(pts, out, spec, lay)
    y1, A1 = conv_apply(x, b1, lay, qc)
    monkeypatch.setattr(c2, "DENSE_LIMIT", 0)
    b2 = build_basis(pts, out, spec, lay)
    assert scipy.sparse.issparse(b2.matrix)
    y2, _ = conv_apply(x, b2, lay, qc)
    np.testing.assert_allclose(y2, y1, atol=1e-13)


def test_fused_pool_matches_pool_after_conv():
    rng = np.random.default_rng(6)
    coords = grid_coords(6)
    spec = RingFilterSpec.from_table([(0, 0.005, 0), (1, 0.6, 2)])
    lay = layout_for(spec, 1, 1)
    qc = LayerParams.init(lay, 2, 3, rng).complex()
    x = random_features(rng, (2, 36, 2), 1)
    assign, nb = c2.pool_assignment(coords)
    P = c2.pool_matrix(assign, nb)
    y, _ = conv_apply(x, build_basis(coords, coords, spec, lay), lay, qc)
    yf, _ = conv_apply(x, build_basis(coords, coords, spec, lay, pool=P), lay, qc)
    np.testing.assert_allclose(yf, c2.pool_points(y, P), atol=1e-13)


def test_conv_vjp_finite_differences():
    rng = np.random.default_rng(7)
    spec, lay, p, pts, out, x = setup(rng, n=12, n_out=4)
    b = build_basis(pts, out, spec, lay)
    qc = p.complex()
    G = random_features(rng, (2, 4, 4), 3)
    L = lambda xx, qq: np.sum(np.real(np.conj(G) * conv_apply(xx, b, lay, qq)[0]))
    _, A = conv_apply(x, b, lay, qc)
    gq, gx = conv_vjp(G, A, b, lay, qc)
    h = 1e-6
    for idx in [(0, 1, 2, 1), (1, 5, 0, 2), (0, 3, 1, 0)]:
        for d in (1, 1j):
            if idx[-1] == 0 and d == 1j:
                continue
            xp, xm = x.copy(), x.copy()
            xp[idx] += h * d
            xm[idx] -= h * d
            fd = (L(xp, qc) - L(xm, qc)) / (2 * h)
            an = gx[idx].real if d == 1 else gx[idx].imag
            assert an == pytest.approx(fd, abs=1e-6)
    for t in range(lay.num_terms):
        for d in (1, 1j):
            qp, qm = qc.copy(), qc.copy()
            qp[t, 1, 2] += h * d
            qm[t, 1, 2] -= h * d
            fd = (L(x, qp) - L(x, qm)) / (2 * h)
            an = gq[t, 1, 2].real if d == 1 else gq[t, 1, 2].imag
            assert an == pytest.approx(fd, abs=1e-6)


# -- batch norm --


def test_bn_constant_channel():
    x = np.zeros((3, 5, 2, 3), complex)
    x[..., 0] = 4.0
    bn = BatchNormFourier(2)
    y, _ = batch_norm(x, np.ones(2), np.array([0.5, -1.0]), bn, True)
    np.testing.assert_allclose(y[..., 0].real, np.broadcast_to([0.5, -1.0], (3, 5, 2)))
    assert np.all(y[..., 1:] == 0)


def test_bn_normalizes_moments():
    rng = np.random.default_rng(8)
    x = random_features(rng, (6, 20, 3), 4) * 3 + 2
    x = realify(x)
    y, _ = batch_norm(x, np.ones(3), np.zeros(3), BatchNormFourier(3), True)
    mu, power = fourier_moments(y)
    np.testing.assert_allclose(mu, 0, atol=1e-6)
    np.testing.assert_allclose(power, 1, atol=1e-4)


def test_bn_commutes_with_rotation():
    rng = np.random.default_rng(9)
    x = random_features(rng, (4, 10, 3), 4)
    g, b = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    y, _ = batch_norm(x, g, b, BatchNormFourier(3), True)
    yr, _ = batch_norm(rotate(x, 1.3), g, b, BatchNormFourier(3), True)
    np.testing.assert_allclose(yr, rotate(y, 1.3), atol=1e-13)


def test_bn_eval_uses_running_stats():
    bn = BatchNormFourier(1, running_mean=np.array([1.0]), running_var=np.array([4.0]), eps=0.0)
    x = np.array([[[[3.0 + 0j, 2j]]]])
    y = bn(x, training=False)
    np.testing.assert_allclose(y, [[[[1.0, 1j]]]])
    with pytest.raises(ValueError):
        batch_norm(np.zeros((0, 2, 1, 2), complex), np.ones(1), np.zeros(1), bn, True)


@pytest.mark.parametrize("training", [True, False])
def test_bn_vjp(training):
    rng = np.random.default_rng(10)
    x = random_features(rng, (3, 4, 2), 2)
    G = random_features(rng, (3, 4, 2), 2)
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
    bn0 = BatchNormFourier(2, running_mean=np.array([0.2, -0.1]), running_var=np.array([1.5, 0.7]))

    def L(xx, gg, bb):
        bn = BatchNormFourier(2, running_mean=bn0.running_mean.copy(), running_var=bn0.running_var.copy())
        return np.sum(np.real(np.conj(G) * batch_norm(xx, gg, bb, bn, training)[0]))

    _, cache = batch_norm(x, gamma, beta, BatchNormFourier(2, running_mean=bn0.running_mean.copy(), running_var=bn0.running_var.copy()), training)
    gx, gg, gb = batch_norm_vjp(G, x, gamma, cache)
    h = 1e-6
    for idx in [(0, 1, 0, 0), (2, 3, 1, 1), (1, 0, 1, 2)]:
        for d in (1, 1j):
            if idx[-1] == 0 and d == 1j:
                continue
            xp, xm = x.copy(), x.copy()
            xp[idx] += h * d
            xm[idx] -= h * d
            fd = (L(xp, gamma, beta) - L(xm, gamma, beta)) / (2 * h)
            assert (gx[idx].real if d == 1 else gx[idx].imag) == pytest.approx(fd, abs=1e-6)
    for c in range(2):
        e = np.eye(2)[c] * h
        assert gg[c] == pytest.approx((L(x, gamma + e, beta) - L(x, gamma - e, beta)) / (2 * h), abs=1e-6)
        assert gb[c] == pytest.approx((L(x, gamma, beta + e) - L(x, gamma, beta - e)) / (2 * h), abs=1e-6)


# -- pooling, crop, invariant maps --


def test_crop_and_pool_sizes():
    coords = grid_coords(28)
    x = np.ones((1, 784, 1, 1), complex)
    c = crop(PointCloud2D(coords, x), 4)
    assert len(c.coords) == 400
    p = avg_pool(c)
    assert len(p.coords) == 100
    np.testing.assert_allclose(p.features, 1.0)
    np.testing.assert_allclose(np.sort(np.unique(p.coords[:, 0])), (np.arange(10) * 2 - 9) / 2)


def test_pool_commutes_with_quarter_turns():
    rng = np.random.default_rng(11)
    coords = grid_coords(8)
    x = random_features(rng, (1, 64, 2), 3)
    pooled = avg_pool(PointCloud2D(coords, x))
    for q in range(1, 4):
        th = q * np.pi / 2
        pr = avg_pool(PointCloud2D(coords, x).rotated(th))
        ref = {tuple(np.round(rotate_coords(pooled.coords[i : i + 1], th)[0], 6)): rotate(pooled.features[:, i], th) for i in range(16)}
        for i, c in enumerate(np.round(pr.coords, 6)):
            np.testing.assert_allclose(pr.features[:, i], ref[tuple(c)], atol=1e-13)


def test_pool_refuses_off_grid():
    with pytest.raises(GridError):
        avg_pool(PointCloud2D(np.array([[0.0, 0.0], [0.5, 0.0]]), np.ones((1, 2, 1, 1), complex)))


def test_invariant_maps():
    x = np.zeros((1, 1, 2), complex)
    x[..., 1] = 3 + 4j
    assert norm_map(x)[0, 1] == 5.0
    rng = np.random.default_rng(12)
    z = random_features(rng, (5, 96), 4)
    assert norm_map(z).shape == (5, 480)
    for th in (0.3, 2.0):
        np.testing.assert_allclose(norm_map(rotate(z, th)), norm_map(z), atol=1e-13)
        np.testing.assert_allclose(conv2triv(rotate(z, th)), conv2triv(z), atol=1e-15)


def test_norm_map_vjp():
    rng = np.random.default_rng(13)
    z = random_features(rng, (2, 3), 2)
    G = rng.standard_normal((2, 9))
    gz = norm_map_vjp(G, z)
    h = 1e-6
    for idx in [(0, 1, 1), (1, 2, 2), (0, 0, 0)]:
        for d in (1, 1j):
            if idx[-1] == 0 and d == 1j:
                continue
            zp, zm = z.copy(), z.copy()
            zp[idx] += h * d
            zm[idx] -= h * d
            fd = np.sum(G * (norm_map(zp) - norm_map(zm))) / (2 * h)
            assert (gz[idx].real if d == 1 else gz[idx].imag) == pytest.approx(fd, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), theta=st.floats(0, 2 * np.pi))
def test_equivariance_property(seed, theta):
    rng = np.random.default_rng(seed)
    spec, lay, p, pts, out, x = setup(rng, K_in=1, K_out=2, C_in=2, C_out=2, n=15, n_out=5)
    y = conv_forward(PointCloud2D(pts, x), spec, p, out).features
    yr = conv_forward(PointCloud2D(pts, x).rotated(theta), spec, p, rotate_coords(out, theta)).features
    assert np.abs(yr - rotate(y, theta)).max() <= 1e-9 * max(1.0, np.abs(y).max())
