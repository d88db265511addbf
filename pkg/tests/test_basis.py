import numpy as np
import pytest

import ipslearn as ips
from ipslearn.basis import rbf_basis_for_dataset
from ipslearn.models import FAMILIES, radial_profile, spec_from_name

ORACLE_FAMILIES = [f for f in FAMILIES if f != "anisotropic"]


@pytest.mark.parametrize("family", ORACLE_FAMILIES)
def test_oracle_reconstruction_identity(family, rng):
    """theta_star combined with the oracle basis reproduces the closed form."""
    spec = spec_from_name(family)
    basis = ips.oracle_basis(spec)
    lo = spec.r_safe + 0.01 if family == "singularity" else 0.05
    r = rng.uniform(lo, 2.5, 200)
    for kind in ("V", "Phi"):
        for order in (0, 1, 2):
            rec = basis.combine_profile(basis.theta_star, kind, r, order)
            true = radial_profile(spec, kind, r, order)
            assert np.abs(rec - true).max() <= 1e-12 * max(1.0, np.abs(true).max())


def test_reference_oracle_theta():
    basis = ips.oracle_basis(ips.reference_spec())
    assert basis.K_V == 2 and basis.K_Phi == 2 and basis.K == 4
    assert np.allclose(basis.theta_star, [-1.0, 2.0, -3.0, 2.0])


def test_anisotropic_has_no_oracle():
    with pytest.raises(ValueError):
        ips.oracle_basis(ips.anisotropic_spec())


def test_rbf_construction():
    basis = ips.rbf_basis(20, 3.0)
    assert basis.K_V == basis.K_Phi == 20
    centers = np.linspace(0.01, 3.0, 20)
    for e, c in zip(basis.phi_elements, centers):
        assert e(c, 0) == pytest.approx(1.0)     # unit peak at its center
        assert e(c, 1) == pytest.approx(0.0, abs=1e-14)
    # width 1.5 * r_max / K = 0.225
    e, c = basis.phi_elements[3], centers[3]
    assert e(c + 0.225, 0) / e(c, 0) == pytest.approx(np.exp(-0.5), rel=1e-12)


def test_rbf_validation():
    with pytest.raises(ValueError):
        ips.rbf_basis(1, 3.0)
    with pytest.raises(ValueError):
        ips.rbf_basis(10, 0.005)


@pytest.mark.parametrize("family", ORACLE_FAMILIES)
def test_basis_finite_difference_consistency(family, rng):
    spec = spec_from_name(family)
    for basis in (ips.oracle_basis(spec), ips.rbf_basis(8, 2.5)):
        lo = spec.r_safe + 0.05 if family == "singularity" else 0.1
        r = rng.uniform(lo, 2.4, 50)
        h = 1e-6 * (1 + r)
        for block in ("v_profile", "phi_profile"):
            prof = getattr(basis, block)
            d_fd = (prof(r + h, 0) - prof(r - h, 0)) / (2 * h[:, None])
            d_an = prof(r, 1)
            assert np.abs(d_an - d_fd).max() <= 1e-6 * max(1.0, np.abs(d_fd).max())
            dd_fd = (prof(r + h, 1) - prof(r - h, 1)) / (2 * h[:, None])
            dd_an = prof(r, 2)
            assert np.abs(dd_an - dd_fd).max() <= 1e-6 * max(1.0, np.abs(dd_fd).max())


def test_interaction_elements_even_by_construction(rng):
    """All interaction bases act on |z|, so evenness is automatic; verify the
    induced spatial values agree at z and -z."""
    basis = ips.rbf_basis(5, 2.0)
    z = rng.normal(size=(20, 2))
    r = np.linalg.norm(z, axis=1)
    assert np.array_equal(basis.phi_profile(r, 0), basis.phi_profile(np.linalg.norm(-z, axis=1), 0))


class TestPercentileRmax:
    def _make_ds(self, points):
        # wrap an explicit [M, L+1, N, d] array in a dataset shell
        L = points.shape[1] - 1
        cfg = ips.SimConfig(spec=ips.reference_spec(), N=points.shape[2],
                            M=points.shape[0], T=0.1 * L, sigma=1.0, dt_fine=1e-1,
                            dt_obs=1e-1, protocol="zerogap", seed=0)
        return ips.SnapshotDataset(points, cfg, labeled=True)

    def test_degenerate_origin(self):
        pts = np.zeros((2, 2, 3, 2))
        ds = self._make_ds(pts)
        rv, rp = ips.percentile_rmax(ds, 99.0)
        assert rv == 0.0 and rp == 0.0

    def test_constant_distance(self):
        pts = np.zeros((3, 2, 2, 2))
        pts[:, :, 1, 0] = 1.0
        ds = self._make_ds(pts)
        for q in (10.0, 50.0, 99.0):
            _, rp = ips.percentile_rmax(ds, q)
            assert rp == pytest.approx(1.0)

    def test_matches_bruteforce(self, rng):
        pts = rng.normal(size=(4, 3, 5, 2))
        ds = self._make_ds(pts)
        rv, rp = ips.percentile_rmax(ds, 90.0)
        norms = np.linalg.norm(pts, axis=-1).ravel()
        dists = []
        for m in range(4):
            for l in range(3):
                for i in range(5):
                    for j in range(i + 1, 5):
                        dists.append(np.linalg.norm(pts[m, l, i] - pts[m, l, j]))
        assert rv == pytest.approx(np.percentile(norms, 90.0))
        assert rp == pytest.approx(np.percentile(dists, 90.0))

    def test_rbf_for_dataset(self, small_reference_ds):
        basis = rbf_basis_for_dataset(small_reference_ds, k_per_block=6)
        assert basis.K == 12
        assert basis.description["type"] == "rbf"
