import numpy as np
import pytest

from echofield import autodiff as ad
from echofield.encodings import (
    FourierConfig, ReflectionFrame, RheConfig, fourier_encode, full_basis,
    normalize, perturb_normal, real_sph_harm, reflect, rhe_encode,
    rhe_weights, specular_direction,
)


def _random_units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# Fourier encoding

def test_fourier_zero_input():
    out = fourier_encode(np.zeros(3), FourierConfig(n_freq=2, include_identity=False))
    assert out.shape == (12,)
    np.testing.assert_allclose(out.reshape(2, 2, 3)[:, 0], 0.0)   # sin blocks
    np.testing.assert_allclose(out.reshape(2, 2, 3)[:, 1], 1.0)   # cos blocks


def test_fourier_identity_only():
    x = np.array([0.3, -0.2, 0.9])
    out = fourier_encode(x, FourierConfig(n_freq=0, include_identity=True))
    np.testing.assert_array_equal(out, x)


def test_fourier_first_sin_term():
    out = fourier_encode(np.array([0.25, 0.0, 0.0]),
                         FourierConfig(n_freq=1, include_identity=False))
    assert out[0] == pytest.approx(np.sqrt(2) / 2, abs=1e-12)


def test_fourier_entries_bounded():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(50, 3))
    out = fourier_encode(x, FourierConfig(n_freq=6, include_identity=True))
    assert out.shape == (50, FourierConfig(n_freq=6).output_dim())
    assert np.all(out >= -1.0) and np.all(out <= 1.0)


def test_fourier_config_validation():
    with pytest.raises(ValueError):
        FourierConfig(n_freq=17)
    with pytest.raises(ValueError):
        FourierConfig(n_freq=-1)


# ---------------------------------------------------------------------------
# reflection parameterization

def test_reflect_normal_incidence():
    np.testing.assert_allclose(reflect(np.array([0, 0, 1.0]), np.array([0, 0, 1.0])),
                               [0, 0, 1.0], atol=1e-15)


def test_reflect_mirror_law_45deg():
    v = np.array([np.sqrt(2) / 2, 0, np.sqrt(2) / 2])
    out = reflect(v, np.array([0, 0, 1.0]))
    np.testing.assert_allclose(out, [-np.sqrt(2) / 2, 0, np.sqrt(2) / 2], atol=1e-15)


def test_reflect_grazing():
    out = reflect(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
    np.testing.assert_allclose(out, [-1.0, 0, 0], atol=1e-15)


def test_reflect_involution_and_angle_preservation():
    rng = np.random.default_rng(1)
    v, n = _random_units(rng, 500), _random_units(rng, 500)
    r = reflect(v, n)
    np.testing.assert_allclose(reflect(r, n), v, atol=1e-12)
    np.testing.assert_allclose(np.sum(r * n, axis=1), np.sum(v * n, axis=1),
                               atol=1e-12)


def test_perturb_normal_zero_roughness():
    rng = np.random.default_rng(2)
    n, v = _random_units(rng, 20), _random_units(rng, 20)
    np.testing.assert_allclose(perturb_normal(n, v, np.zeros((20, 1))), n, atol=1e-12)


def test_perturb_normal_hand_case():
    # n=(0,0,1), v=(1,0,0), delta=1: offset (1,0,0), renormalized diagonal
    out = perturb_normal(np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), 1.0)
    np.testing.assert_allclose(out, [np.sqrt(2) / 2, 0, np.sqrt(2) / 2], atol=1e-12)


def test_perturb_normal_aligned_case():
    n = np.array([0.0, 0.6, 0.8])
    for delta in (0.0, 0.5, 3.0):
        np.testing.assert_allclose(perturb_normal(n, n, delta), n, atol=1e-12)


def test_specular_direction_reduces_at_zero_roughness():
    rng = np.random.default_rng(3)
    v, n = _random_units(rng, 30), _random_units(rng, 30)
    np.testing.assert_allclose(specular_direction(v, n, np.zeros((30, 1))),
                               reflect(v, n), atol=1e-12)


def test_specular_direction_aligned():
    z = np.array([0, 0, 1.0])
    for delta in (0.0, 0.7, 2.0):
        np.testing.assert_allclose(specular_direction(z, z, delta), z, atol=1e-12)


def test_specular_direction_composed_hand_case():
    out = specular_direction(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 1.0)
    np.testing.assert_allclose(out, [0, 0, 1.0], atol=1e-12)


def test_specular_direction_derivative_in_roughness():
    # tape gradient, hand-derived directional derivative, and central
    # differences must all agree at delta=0
    rng = np.random.default_rng(4)
    for _ in range(10):
        v, n = _random_units(rng, 1)[0], _random_units(rng, 1)[0]
        ndotv = float(n @ v)
        tangent = v - n * ndotv
        hand = 2 * (1 - ndotv ** 2) * n + 2 * ndotv * tangent

        h = 1e-6
        fd = (specular_direction(v, n, h) - specular_direction(v, n, -h)) / (2 * h)
        np.testing.assert_allclose(fd, hand, atol=1e-4)

        taped = np.zeros(3)
        for i in range(3):
            with ad.Tape() as t:
                delta = ad.Value(0.0, requires_grad=True)
                r = specular_direction(v, n, delta)
                (g,) = t.grad(r[i], [delta])
            taped[i] = g
        np.testing.assert_allclose(taped, hand, atol=1e-9)


def test_reflection_frame_validation():
    with pytest.raises(ValueError, match="unit"):
        ReflectionFrame(np.array([0, 0, 2.0]), np.array([0, 0, 1.0]), 0.1, 10.0)
    with pytest.raises(ValueError, match="kappa"):
        ReflectionFrame(np.array([0, 0, 1.0]), np.array([0, 0, 1.0]), 0.1, 0.0)
    frame = ReflectionFrame(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 1.0, 1.0)
    np.testing.assert_allclose(frame.specular(), [0, 0, 1.0], atol=1e-12)


# ---------------------------------------------------------------------------
# real spherical harmonics

def test_sph_harm_constant_term():
    rng = np.random.default_rng(5)
    vals = real_sph_harm(0, 0, _random_units(rng, 10))
    np.testing.assert_allclose(vals, 0.5 / np.sqrt(np.pi), atol=1e-12)


def test_sph_harm_degree1_z_aligned():
    val = real_sph_harm(1, 0, np.array([0.0, 0.0, 1.0]))
    assert val == pytest.approx(np.sqrt(3 / (4 * np.pi)), abs=1e-12)


def test_sph_harm_degree1_and_2_table():
    # closed forms: Y_1^1 ∝ x, Y_1^-1 ∝ y, Y_2^0 ∝ 3z²-1, Y_2^2 ∝ x²-y², ...
    rng = np.random.default_rng(6)
    d = _random_units(rng, 40)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    c1 = np.sqrt(3 / (4 * np.pi))
    np.testing.assert_allclose(real_sph_harm(1, 1, d), c1 * x, atol=1e-12)
    np.testing.assert_allclose(real_sph_harm(1, -1, d), c1 * y, atol=1e-12)
    np.testing.assert_allclose(real_sph_harm(2, 0, d),
                               np.sqrt(5 / (16 * np.pi)) * (3 * z ** 2 - 1), atol=1e-12)
    np.testing.assert_allclose(real_sph_harm(2, 1, d),
                               np.sqrt(15 / (4 * np.pi)) * x * z, atol=1e-12)
    np.testing.assert_allclose(real_sph_harm(2, -2, d),
                               np.sqrt(15 / (4 * np.pi)) * x * y, atol=1e-12)
    np.testing.assert_allclose(real_sph_harm(2, 2, d),
                               np.sqrt(15 / (16 * np.pi)) * (x ** 2 - y ** 2), atol=1e-12)


def _sphere_quadrature(n_theta=64, n_phi=128):
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp),
                     np.cos(tt)], axis=-1).reshape(-1, 3)
    weights = (np.sin(tt) * (np.pi / n_theta) * (2 * np.pi / n_phi)).reshape(-1)
    return dirs, weights


def test_sph_harm_orthonormality_quadrature():
    dirs, w = _sphere_quadrature()
    pairs = [(2, 1), (3, -2), (4, 0), (4, 4), (1, -1)]
    for l, m in pairs:
        y = real_sph_harm(l, m, dirs)
        assert np.sum(w * y * y) == pytest.approx(1.0, abs=1e-3)
    # a few cross terms vanish
    ya = real_sph_harm(2, 1, dirs)
    for l, m in [(2, -1), (3, 1), (0, 0), (4, 2)]:
        yb = real_sph_harm(l, m, dirs)
        assert abs(np.sum(w * ya * yb)) < 1e-3


def test_sph_harm_invalid_indices():
    with pytest.raises(ValueError):
        real_sph_harm(2, 3, np.array([0, 0, 1.0]))
    with pytest.raises(ValueError):
        real_sph_harm(-1, 0, np.array([0, 0, 1.0]))


# ---------------------------------------------------------------------------
# reflective harmonic encoding

def test_rhe_weights_closed_forms():
    cfg = RheConfig(max_degree=2)
    w = rhe_weights(1.0, cfg)
    basis = cfg.basis
    assert w[basis.index((0, 0))] == pytest.approx(1.0, abs=0)
    assert w[basis.index((1, 0))] == pytest.approx(np.exp(-1.0), abs=1e-12)
    w2 = rhe_weights(2.0, cfg)
    assert w2[basis.index((2, 2))] == pytest.approx(np.exp(-1.5), abs=1e-12)


def test_rhe_weights_monotone():
    cfg = RheConfig(max_degree=4)
    for kappa in (0.1, 1.0, 7.5):
        per_l = [rhe_weights(kappa, cfg)[cfg.basis.index((l, 0))] for l in range(5)]
        assert np.all(np.diff(per_l) < 0)
    for l in range(1, 5):
        idx = RheConfig(max_degree=4).basis.index((l, 0))
        vals = [rhe_weights(k, RheConfig(max_degree=4))[idx] for k in (0.5, 1.0, 2.0, 8.0)]
        assert np.all(np.diff(vals) > 0)


def test_rhe_weights_rejects_nonpositive_kappa():
    with pytest.raises(ValueError):
        rhe_weights(0.0, RheConfig(max_degree=2))
    with pytest.raises(ValueError):
        rhe_weights(-1.0, RheConfig(max_degree=2))


def test_rhe_encode_limits():
    rng = np.random.default_rng(7)
    cfg = RheConfig(max_degree=3)
    d = _random_units(rng, 5)
    raw = np.stack([real_sph_harm(l, m, d) for l, m in cfg.basis], axis=-1)
    np.testing.assert_allclose(rhe_encode(d, 1e12, cfg), raw, atol=1e-9)

    tiny = rhe_encode(d, 1e-6, cfg)
    for i, (l, _) in enumerate(cfg.basis):
        if l >= 1:
            assert np.all(np.abs(tiny[:, i]) < 1e-8)


def test_rhe_encode_product_of_closed_forms():
    cfg = RheConfig(max_degree=2)
    out = rhe_encode(np.array([0.0, 0.0, 1.0]), 1.0, cfg)
    idx = cfg.basis.index((1, 0))
    assert out[idx] == pytest.approx(np.exp(-1.0) * np.sqrt(3 / (4 * np.pi)), abs=1e-6)


def test_rhe_degree_block_norm_rotation_invariant():
    rng = np.random.default_rng(8)
    cfg = RheConfig(max_degree=4)
    d = _random_units(rng, 1)[0]
    kappa = 2.5
    base = rhe_encode(d, kappa, cfg)

    def block_norms(enc):
        return np.array([
            sum(enc[i] ** 2 for i, (l, _) in enumerate(cfg.basis) if l == deg)
            for deg in range(5)
        ])

    ref = block_norms(base)
    for _ in range(50):
        rot = _random_rotation(rng)
        np.testing.assert_allclose(block_norms(rhe_encode(rot @ d, kappa, cfg)),
                                   ref, atol=1e-9)


def test_rhe_config_validation():
    with pytest.raises(ValueError):
        RheConfig(max_degree=0)
    with pytest.raises(ValueError):
        RheConfig(max_degree=2, basis=((0, 0), (0, 0)))
    with pytest.raises(ValueError):
        RheConfig(max_degree=2, basis=((3, 0),))
    assert RheConfig(max_degree=4).output_dim == 25
    assert full_basis(2) == ((0, 0), (1, -1), (1, 0), (1, 1),
                             (2, -2), (2, -1), (2, 0), (2, 1), (2, 2))


def test_rhe_encode_traced_gradients():
    # gradients flow through the harmonics into the direction and kappa
    rng = np.random.default_rng(9)
    d0 = _random_units(rng, 4)
    cfg = RheConfig(max_degree=3)
    params = [ad.Value(d0.copy(), requires_grad=True),
              ad.Value(np.full(4, 1.7), requires_grad=True)]

    def f(ps):
        direction = normalize(ps[0])
        enc = rhe_encode(direction, ps[1], cfg)
        return ad.reduce_sum(enc * enc)

    assert ad.check_gradient(f, params, step=1e-6) < 1e-7
