import numpy as np
import pytest

import ipslearn as ips
from ipslearn.models import FAMILIES, PotentialSpec, radial_profile, spec_from_name

ALL_SPECS = [spec_from_name(f) for f in FAMILIES]


def test_reference_value_examples():
    spec = ips.reference_spec()
    # V(x) = 0.5*(-1)*|x| + 2*|x|^2 at x=(1,0)
    assert ips.potential_value(spec, "V", np.array([1.0, 0.0])) == pytest.approx(1.5)
    # first Gaussian bump peaks at its center
    expected = -3.0 + 2.0 * np.exp(-((0.75 - 1.5) ** 2) / (2 * 0.25**2))
    assert ips.potential_value(spec, "Phi", r=0.75) == pytest.approx(expected, rel=1e-12)
    d1 = radial_profile(spec, "Phi", 0.75, 1)
    # the first bump's own radial derivative vanishes at its center
    bump1_only = PotentialSpec("reference", dict(alpha=(0.0, 0.0), beta=(-3.0, 0.0),
                                                 centers=(0.75, 1.5), widths=(0.125, 0.25)))
    assert radial_profile(bump1_only, "Phi", 0.75, 1) == pytest.approx(0.0, abs=1e-14)
    assert np.isfinite(d1)


def test_reference_grad_and_laplacian_examples():
    spec = ips.reference_spec()
    g = ips.potential_grad(spec, "V", np.array([1.0, 0.0]))
    assert np.allclose(g, [3.5, 0.0])
    # radial formula at r=1, d=2: g''=4, g'=3.5 -> 4 + 3.5 = 7.5
    assert ips.potential_laplacian(spec, "V", np.array([0.0, 1.0])) == pytest.approx(7.5)


def test_quadratic_laplacian_identity():
    spec = ips.singularity_spec()  # V = (k/2)|x|^2 with k=2 -> |x|^2
    x = np.array([0.3, -1.2])
    assert ips.potential_laplacian(spec, "V", x) == pytest.approx(2 * 2.0 / 2 * 2)


def test_anisotropic_examples():
    spec = ips.anisotropic_spec()
    assert np.allclose(ips.potential_grad(spec, "V", np.array([1.0, 1.0])), [2.0, 8.0])
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert np.allclose(ips.potential_laplacian(spec, "V", x), 10.0)


def test_singularity_clamp():
    spec = ips.singularity_spec()
    v_safe = ips.potential_value(spec, "Phi", r=spec.r_safe)
    for r in (0.0, 0.1, 0.2, 0.349):
        assert ips.potential_value(spec, "Phi", r=r) == v_safe
        assert radial_profile(spec, "Phi", r, 1) == radial_profile(spec, "Phi", spec.r_safe, 1)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=[s.family for s in ALL_SPECS])
def test_interaction_evenness(spec, rng):
    z = rng.normal(size=(50, 2))
    v1 = ips.potential_value(spec, "Phi", z)
    v2 = ips.potential_value(spec, "Phi", -z)
    assert np.abs(v1 - v2).max() <= 1e-14 * (1 + np.abs(v1).max())


@pytest.mark.parametrize("spec", ALL_SPECS, ids=[s.family for s in ALL_SPECS])
@pytest.mark.parametrize("kind", ["V", "Phi"])
def test_derivative_consistency(spec, kind, rng):
    """Central differences of the value match gradient and Laplacian."""
    checked = 0
    while checked < 25:
        x = rng.normal(size=2)
        r = np.linalg.norm(x)
        if r < 0.05:
            continue
        if spec.family == "singularity" and kind == "Phi" and r < spec.r_safe + 0.02:
            x *= (spec.r_safe + 0.1) / r
        checked += 1
        h = 1e-5 * (1 + np.abs(x))
        eye = np.eye(2)
        grad_fd = np.array([
            (ips.potential_value(spec, kind, x + h[i] * eye[i])
             - ips.potential_value(spec, kind, x - h[i] * eye[i])) / (2 * h[i])
            for i in range(2)])
        grad = ips.potential_grad(spec, kind, x)
        scale = max(1.0, np.abs(grad_fd).max())
        assert np.abs(grad - grad_fd).max() <= 1e-5 * scale
        h2 = 1e-5 * (1 + np.linalg.norm(x))
        lap_fd = sum((ips.potential_value(spec, kind, x + h2 * eye[i])
                      - 2 * ips.potential_value(spec, kind, x)
                      + ips.potential_value(spec, kind, x - h2 * eye[i])) / h2**2
                     for i in range(2))
        lap = ips.potential_laplacian(spec, kind, x)
        assert abs(lap - lap_fd) <= 2e-5 * max(1.0, abs(lap_fd))


def test_reference_grad_at_origin_is_subgradient_zero():
    spec = ips.reference_spec()
    assert np.allclose(ips.potential_grad(spec, "V", np.zeros(2)), 0.0)


def test_laplacian_errors_at_true_singularity():
    spec = ips.reference_spec()  # V contains |x|: Laplacian singular at 0
    with pytest.raises(ValueError):
        ips.potential_laplacian(spec, "V", np.zeros(2))


def test_nonfinite_input_rejected():
    spec = ips.reference_spec()
    with pytest.raises(ValueError):
        ips.potential_value(spec, "V", np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        PotentialSpec("reference", dict(alpha=(np.inf, 1.0)))
    with pytest.raises(ValueError):
        PotentialSpec("no_such_family")


def test_spec_roundtrip():
    for fam in FAMILIES:
        spec = spec_from_name(fam)
        again = PotentialSpec.from_dict(spec.to_dict())
        assert again == spec
