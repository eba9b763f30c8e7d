import numpy as np
import pytest

from echofield import autodiff as ad
from echofield.geometry import ScanGeometry
from echofield.renderer import (
    PropertyGrid, PsfConfig, backscatter, compose_final, frozen_uniforms,
    interface_coefficients, kumaraswamy_eta, psf_kernel, read_float_raw,
    read_pgm, reflected_energy, render_bmode, residual_energy, scatter_field,
    validate_bmode, write_float_raw, write_pgm,
)


def _geom(w=8, h=12, f=0.2, dt=1.0):
    return ScanGeometry(n_scanlines=w, n_samples=h, lateral_spacing=1.0,
                        axial_spacing=dt, frequency=f)


def _grid(h=12, w=8, alpha=0.0, beta=0.0, rho=0.0, phi=0.0):
    full = lambda v: np.full((h, w), float(v))
    return PropertyGrid(alpha=full(alpha), beta=full(beta), rho=full(rho), phi=full(phi))


# ---------------------------------------------------------------------------
# residual energy

def test_residual_energy_lossless_medium():
    out = residual_energy(_grid(), frequency=0.2, axial_spacing=1.0)
    np.testing.assert_allclose(out, 1.0, atol=0)


def test_residual_energy_exponential_closed_form():
    # alpha*f*dt = 0.1 per sample -> I(10) = e^-1
    g = _grid(h=16, alpha=0.5)
    out = residual_energy(g, frequency=0.2, axial_spacing=1.0, source_intensity=2.0)
    assert out[10, 3] == pytest.approx(2.0 * np.exp(-1.0), abs=1e-9)
    assert out[0, 0] == pytest.approx(2.0, abs=0)


def test_residual_energy_total_reflector_blocks():
    g = _grid(h=10)
    beta = np.asarray(g.beta).copy()
    beta[5, :] = 1.0
    g = PropertyGrid(alpha=g.alpha, beta=beta, rho=g.rho, phi=g.phi)
    out = residual_energy(g, frequency=0.2, axial_spacing=1.0)
    np.testing.assert_array_equal(out[6:], 0.0)
    np.testing.assert_array_equal(out[:6], 1.0)


def test_residual_energy_monotone_depletion():
    rng = np.random.default_rng(0)
    alpha = rng.uniform(0.0, 1.0, size=(20, 5))
    g = PropertyGrid(alpha=alpha, beta=np.zeros((20, 5)),
                     rho=np.zeros((20, 5)), phi=np.zeros((20, 5)))
    out = residual_energy(g, frequency=0.3, axial_spacing=0.5)
    diffs = np.diff(out, axis=0)
    assert np.all(diffs <= 0)
    assert np.all(diffs[alpha[:-1] > 0] < 0)


def test_residual_energy_rejects_bad_source():
    with pytest.raises(ValueError):
        residual_energy(_grid(), 0.2, 1.0, source_intensity=0.0)


# ---------------------------------------------------------------------------
# PSF

def test_psf_kernel_center_is_one():
    k = psf_kernel(PsfConfig(sigma_axial=1.5, sigma_lateral=1.0, frequency=0.3))
    assert k[k.shape[0] // 2, k.shape[1] // 2] == pytest.approx(1.0, abs=0)


def test_psf_kernel_zero_frequency_pure_gaussian():
    k = psf_kernel(PsfConfig(sigma_axial=2.0, sigma_lateral=1.0, frequency=1e-12))
    assert np.all(k > 0)


def test_psf_kernel_even_symmetry():
    k = psf_kernel(PsfConfig(sigma_axial=1.5, sigma_lateral=1.2, frequency=0.37))
    np.testing.assert_allclose(k, k[::-1, :], atol=0)
    np.testing.assert_allclose(k, k[:, ::-1], atol=0)


def test_psf_kernel_shape_from_truncation():
    k = psf_kernel(PsfConfig(sigma_axial=1.5, sigma_lateral=1.0, truncation=3.0))
    assert k.shape == (2 * 5 + 1, 2 * 3 + 1)


def test_psf_config_validation():
    with pytest.raises(ValueError):
        PsfConfig(sigma_axial=0.0)
    with pytest.raises(ValueError):
        PsfConfig(truncation=0.5)


# ---------------------------------------------------------------------------
# reflection / backscatter convolutions

def test_reflected_energy_no_reflectors():
    k = psf_kernel(PsfConfig())
    out = reflected_energy(np.ones((10, 8)), np.zeros((10, 8)), k)
    np.testing.assert_array_equal(out, 0.0)


def test_reflected_energy_delta_reproduces_kernel():
    k = psf_kernel(PsfConfig(sigma_axial=1.0, sigma_lateral=1.0, frequency=0.25))
    beta = np.zeros((15, 15))
    beta[7, 7] = 1.0
    out = reflected_energy(np.full((15, 15), 1.0), beta, k)
    kh, kw = k.shape
    sub = out[7 - kh // 2:7 + kh // 2 + 1, 7 - kw // 2:7 + kw // 2 + 1]
    assert np.max(np.abs(sub - k)) < 1e-12
    mask = np.ones_like(out, dtype=bool)
    mask[7 - kh // 2:7 + kh // 2 + 1, 7 - kw // 2:7 + kw // 2 + 1] = False
    np.testing.assert_array_equal(out[mask], 0.0)


def test_reflected_energy_superposition():
    k = psf_kernel(PsfConfig(frequency=0.15))
    intensity = np.full((20, 12), 0.8)
    b1 = np.zeros((20, 12)); b1[4, 3] = 0.9
    b2 = np.zeros((20, 12)); b2[14, 9] = 0.4
    both = reflected_energy(intensity, b1 + b2, k)
    np.testing.assert_allclose(
        both, reflected_energy(intensity, b1, k) + reflected_energy(intensity, b2, k),
        atol=1e-12)


def test_convolution_adjoint_identity():
    rng = np.random.default_rng(1)
    k = psf_kernel(PsfConfig(frequency=0.3))
    a = rng.normal(size=(16, 10))
    b = rng.normal(size=(16, 10))
    lhs = np.sum(ad.conv2d(a, k) * b)
    rhs = np.sum(a * ad.conv2d(b, k[::-1, ::-1]))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_backscatter_linear_and_delta():
    k = psf_kernel(PsfConfig(frequency=1e-12))
    s = np.zeros((12, 12)); s[6, 6] = 0.5
    out = backscatter(np.full((12, 12), 2.0), s, k)
    kh, kw = k.shape
    sub = out[6 - kh // 2:6 + kh // 2 + 1, 6 - kw // 2:6 + kw // 2 + 1]
    np.testing.assert_allclose(sub, k, atol=1e-12)  # 2.0 * 0.5 = 1 scale
    rng = np.random.default_rng(2)
    s1, s2 = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    i = np.full((12, 12), 0.7)
    np.testing.assert_allclose(backscatter(i, s1 + s2, k),
                               backscatter(i, s1, k) + backscatter(i, s2, k),
                               atol=1e-12)


# ---------------------------------------------------------------------------
# scatter field

def test_kumaraswamy_uniform_case():
    # a = b = 1 is the uniform distribution: eta = u
    assert float(kumaraswamy_eta(np.float64(0.5), np.float64(0.5), 2.0)) == \
        pytest.approx(0.5, abs=1e-12)


def test_kumaraswamy_no_scatterer_limit():
    u = np.linspace(0.01, 0.99, 50)
    eta = kumaraswamy_eta(u, np.zeros(50), 4.0)
    assert np.all(eta < 1e-8)


def test_kumaraswamy_saturated_limit():
    u = np.linspace(0.01, 0.99, 50)
    eta = kumaraswamy_eta(u, np.ones(50), 4.0)
    np.testing.assert_allclose(eta, 1.0, atol=1e-3)
    phi = np.full(50, 0.65)
    s = kumaraswamy_eta(u, np.ones(50), 4.0) * phi
    np.testing.assert_allclose(s, phi, atol=1e-3)


def test_scatter_field_frozen_determinism():
    rng = np.random.default_rng(3)
    rho = rng.uniform(0.2, 0.8, size=(9, 7))
    phi = rng.uniform(size=(9, 7))
    a = scatter_field(rho, phi, seed=99, concentration=4.0)
    b = scatter_field(rho, phi, seed=99, concentration=4.0)
    assert np.array_equal(a, b)
    c = scatter_field(rho, phi, seed=100, concentration=4.0)
    assert not np.array_equal(a, c)


def test_scatter_field_gradient_in_rho_and_phi():
    rng = np.random.default_rng(4)
    rho0 = rng.uniform(0.2, 0.8, size=(4, 3))
    phi0 = rng.uniform(0.2, 0.8, size=(4, 3))
    params = [ad.Value(rho0.copy(), requires_grad=True),
              ad.Value(phi0.copy(), requires_grad=True)]

    def f(ps):
        return ad.reduce_sum(scatter_field(ps[0], ps[1], seed=5, concentration=4.0))

    assert ad.check_gradient(f, params, step=1e-6) < 1e-5


# ---------------------------------------------------------------------------
# full render and composition

def test_render_bmode_empty_medium_is_zero():
    img = render_bmode(_grid(), PsfConfig(), _geom(), seed=0)
    np.testing.assert_array_equal(img, 0.0)


def test_render_bmode_pure_reflector_equals_reflected_energy():
    rng = np.random.default_rng(5)
    beta = rng.uniform(0.0, 0.3, size=(12, 8))
    g = PropertyGrid(alpha=np.zeros((12, 8)), beta=beta,
                     rho=np.zeros((12, 8)), phi=rng.uniform(size=(12, 8)))
    geom = _geom()
    psf = PsfConfig()
    img = render_bmode(g, psf, geom, seed=1)
    intensity = residual_energy(g, geom.frequency, geom.axial_spacing)
    expected = reflected_energy(intensity, beta, psf_kernel(psf))
    np.testing.assert_allclose(img, expected, atol=1e-15)


def test_render_bmode_is_reflection_plus_backscatter():
    rng = np.random.default_rng(6)
    shape = (10, 6)
    g = PropertyGrid(alpha=rng.uniform(0, 0.5, shape), beta=rng.uniform(0, 0.5, shape),
                     rho=rng.uniform(0, 1, shape), phi=rng.uniform(0, 1, shape))
    geom = _geom(w=6, h=10)
    psf = PsfConfig(frequency=0.25)
    k = psf_kernel(psf)
    intensity = residual_energy(g, geom.frequency, geom.axial_spacing)
    scat = scatter_field(g.rho, g.phi, seed=7)
    expected = reflected_energy(intensity, g.beta, k) + backscatter(intensity, scat, k)
    np.testing.assert_allclose(render_bmode(g, psf, geom, seed=7), expected, atol=0)


def test_compose_final_examples():
    z = np.zeros((3, 3))
    np.testing.assert_array_equal(compose_final(z, z), 0.0)
    assert compose_final(np.full((1, 1), 0.8), np.full((1, 1), 0.5))[0, 0] == 1.0
    assert compose_final(np.full((1, 1), 0.3), np.full((1, 1), 0.2))[0, 0] == \
        pytest.approx(0.5, abs=1e-15)


def test_compose_final_always_in_unit_interval():
    rng = np.random.default_rng(7)
    out = compose_final(rng.normal(scale=3, size=(20, 20)),
                        rng.uniform(size=(20, 20)))
    validate_bmode(out)


def test_full_pipeline_gradient_wrt_property_grid():
    # differentiability of loss(render) w.r.t. all four property fields
    rng = np.random.default_rng(8)
    shape = (4, 4)
    target = rng.uniform(size=shape)
    fields = [np.asarray(a) for a in (
        rng.uniform(0.05, 0.5, shape), rng.uniform(0.05, 0.4, shape),
        rng.uniform(0.2, 0.8, shape), rng.uniform(0.2, 0.8, shape))]
    params = [ad.Value(f.copy(), requires_grad=True) for f in fields]
    geom = ScanGeometry(n_scanlines=4, n_samples=4, lateral_spacing=1.0,
                        axial_spacing=1.0, frequency=0.2)
    psf = PsfConfig(sigma_axial=1.0, sigma_lateral=1.0, frequency=0.2, truncation=2.0)

    def f(ps):
        g = PropertyGrid(alpha=ps[0], beta=ps[1], rho=ps[2], phi=ps[3])
        img = compose_final(render_bmode(g, psf, geom, seed=11), 0.3)
        diff = img - target
        return ad.reduce_mean(diff * diff)

    assert ad.check_gradient(f, params, step=1e-6) < 1e-5


# ---------------------------------------------------------------------------
# interface physics

def test_interface_matched_impedance():
    r, t = interface_coefficients(1.0, 1.0)
    assert r == 0.0 and t == 1.0


def test_interface_energy_conserving_hand_case():
    r, t = interface_coefficients(1.0, 3.0)
    assert r == pytest.approx(0.25, abs=1e-15)
    assert t == pytest.approx(0.75, abs=1e-15)
    assert r + t == pytest.approx(1.0, abs=1e-12)


def test_interface_paper_exact_hand_case():
    r, t = interface_coefficients(1.0, 3.0, mode="paper_exact")
    assert r == pytest.approx(0.25, abs=1e-15)
    assert t == pytest.approx(9.0, abs=1e-12)  # (12/4)^2, non-conservative


def test_interface_conservation_random():
    rng = np.random.default_rng(9)
    z1 = rng.uniform(0.2, 10, size=200)
    z2 = rng.uniform(0.2, 10, size=200)
    r, t = interface_coefficients(z1, z2)
    np.testing.assert_allclose(r + t, 1.0, atol=1e-12)


def test_interface_rejects_nonpositive():
    with pytest.raises(ValueError):
        interface_coefficients(0.0, 1.0)
    with pytest.raises(ValueError):
        interface_coefficients(1.0, -2.0)


# ---------------------------------------------------------------------------
# frame I/O

def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    img = np.round(rng.uniform(size=(9, 7)) * 255) / 255.0
    p = tmp_path / "frame.pgm"
    write_pgm(img, p)
    back = read_pgm(p)
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_pgm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValueError, match="P5"):
        read_pgm(p)
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(p)


def test_float_raw_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    img = rng.uniform(size=(5, 6)).astype(np.float32)
    p = tmp_path / "frame.raw"
    write_float_raw(img, p)
    np.testing.assert_array_equal(read_float_raw(p), img)


def test_frozen_uniforms_open_interval():
    u = frozen_uniforms(0, (64, 64))
    assert u.min() > 0.0 and u.max() < 1.0


def test_property_grid_validation():
    with pytest.raises(ValueError):
        PropertyGrid(alpha=np.zeros((3, 3)), beta=np.zeros((3, 4)),
                     rho=np.zeros((3, 3)), phi=np.zeros((3, 3)))
    g = _grid(beta=1.5)
    with pytest.raises(ValueError):
        g.validate()
