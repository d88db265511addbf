"""Basis families for the parametric estimators.

Every basis element here is radial: the confining block acts on the particle
norm |x| and the interaction block on the pairwise distance |x_i - x_j|, which
makes every interaction element even by construction.  Each element carries
analytic profile derivatives up to second order, from which spatial gradients
and Laplacians follow by the radial chain rule.

Two constructions are provided: the oracle basis of a benchmark family (the
exact finite basis in which the true potentials are linear, used to isolate
estimation error from approximation error) and a Gaussian RBF dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import PotentialSpec


@dataclass(frozen=True)
class RadialElement:
    """A scalar C^2 profile g(r) with derivatives, used as a basis function."""

    label: str
    fn: callable  # fn(r, order) -> g^(order)(r)

    def __call__(self, r, order: int = 0):
        return self.fn(np.asarray(r, dtype=float), order)


@dataclass
class BasisSet:
    """K_V confining + K_Phi interaction profiles, with optional true coefficients."""

    v_elements: list
    phi_elements: list
    theta_star: np.ndarray | None = None
    description: dict = field(default_factory=dict)

    @property
    def K_V(self) -> int:
        return len(self.v_elements)

    @property
    def K_Phi(self) -> int:
        return len(self.phi_elements)

    @property
    def K(self) -> int:
        return self.K_V + self.K_Phi

    @property
    def labels(self) -> list:
        return [e.label for e in self.v_elements] + [e.label for e in self.phi_elements]

    def _stack(self, elements, r, order):
        r = np.asarray(r, dtype=float)
        return np.stack([e(r, order) for e in elements], axis=-1)

    def v_profile(self, r, order: int = 0):
        """[..., K_V] array of g^(order)(r) for the confining block."""
        return self._stack(self.v_elements, r, order)

    def phi_profile(self, r, order: int = 0):
        """[..., K_Phi] array for the interaction block."""
        return self._stack(self.phi_elements, r, order)

    def combine_profile(self, theta, kind: str, r, order: int = 0):
        """Fitted scalar profile sum_k theta_k g_k^(order)(r) for one block."""
        theta = np.asarray(theta, dtype=float)
        if kind == "V":
            return self.v_profile(r, order) @ theta[: self.K_V]
        if kind == "Phi":
            return self.phi_profile(r, order) @ theta[self.K_V:]
        raise ValueError("kind must be 'V' or 'Phi'")


# ---------------------------------------------------------------------------
# element constructors
# ---------------------------------------------------------------------------

def _poly(power: float, scale: float = 1.0) -> RadialElement:
    def fn(r, order):
        if order == 0:
            return scale * r ** power
        if order == 1:
            return scale * power * r ** (power - 1) if power != 0 else np.zeros_like(r)
        return (scale * power * (power - 1) * r ** (power - 2)
                if power not in (0, 1) else np.zeros_like(r))
    label = f"{scale:g}*r^{power:g}" if scale != 1.0 else f"r^{power:g}"
    return RadialElement(label, fn)


def gaussian_element(center: float, width: float) -> RadialElement:
    def fn(r, order):
        return models._gauss_bump(r, center, width, order)
    return RadialElement(f"gauss(c={center:g},w={width:g})", fn)


def _tanh_element(a: float, b: float, eps: float) -> RadialElement:
    def fn(r, order):
        return models._tanh_indicator(r, a, b, eps, order)
    return RadialElement(f"ind[{a:g},{b:g}]~{eps:g}", fn)


def _spec_profile_element(spec: PotentialSpec, kind: str, scale: float, label: str) -> RadialElement:
    def fn(r, order):
        return scale * models.radial_profile(spec, kind, r, order)
    return RadialElement(label, fn)


def _lj_power_element(sigma_lj: float, power: int, r_safe: float,
                      r_cut: float | None) -> RadialElement:
    # (sigma/r)^power with the same distance clamp as the singular model
    def fn(r, order):
        rc = np.maximum(r, r_safe)
        s = (sigma_lj / rc) ** power
        if order == 0:
            out = s
        elif order == 1:
            out = -power * s / rc
        else:
            out = power * (power + 1) * s / (rc * rc)
        if r_cut is not None:
            out = np.where(r > r_cut, 0.0, out)
        return out
    return RadialElement(f"(s/r)^{power}~clamp{r_safe:g}", fn)


# ---------------------------------------------------------------------------
# oracle bases
# ---------------------------------------------------------------------------

def oracle_basis(spec: PotentialSpec) -> BasisSet:
    """The exact basis in which the given family's potentials are linear.

    Also returns the true coefficient vector theta_star in that basis.  The
    reference confining block uses psi_1 = 0.5*|x| so that theta_star matches
    the published parameter convention (-1, 2, -3, 2).
    """
    fam = spec.family
    if fam in ("reference", "smoothness"):
        v = [_poly(1.0, scale=0.5), _poly(2.0)]
        if fam == "reference":
            c = spec.params["centers"]
            w = spec.params["widths"]
            phi = [gaussian_element(c[0], w[0]), gaussian_element(c[1], w[1])]
        else:
            a0, b0, a1, b1 = spec.params["edges"]
            eps = spec.smoothing_eps
            phi = [_tanh_element(a0, b0, eps), _tanh_element(a1, b1, eps)]
        theta = np.array([*spec.params["alpha"], *spec.params["beta"]])
    elif fam in ("conditioning", "smooth_control"):
        # V = 0.25(r^2-1)^2 - 0.25 = 0.25 r^4 - 0.5 r^2
        v = [_poly(2.0), _poly(4.0)]
        if fam == "conditioning":
            def ratio(r, order):
                rp = r + 1.0
                if order == 0:
                    return r / rp
                if order == 1:
                    return 1.0 / (rp * rp)
                return -2.0 / (rp * rp * rp)
            phi = [RadialElement("r/(r+1)", ratio)]
            theta = np.array([-0.5, 0.25, -spec.params["gamma"]])
        else:
            phi = [_spec_profile_element(spec, "Phi", 1.0 / spec.params["depth"],
                                         "morse(a=2,r0=0.8)")]
            theta = np.array([-0.5, 0.25, spec.params["depth"]])
    elif fam == "singularity":
        v = [_poly(2.0)]
        s = spec.params["sigma_lj"]
        eps_lj = spec.params["eps_lj"]
        r_cut = spec.params.get("r_cut")
        phi = [_lj_power_element(s, 12, spec.r_safe, r_cut),
               _lj_power_element(s, 6, spec.r_safe, r_cut)]
        theta = np.array([0.5 * spec.params["k"], 4.0 * eps_lj, -4.0 * eps_lj])
    else:
        raise ValueError(f"no oracle basis for family {spec.family!r}")
    return BasisSet(v, phi, theta_star=theta,
                    description={"type": "oracle", "model": fam, "dim": spec.dim})


# ---------------------------------------------------------------------------
# RBF dictionary
# ---------------------------------------------------------------------------

def rbf_basis(k_per_block: int = 20, r_max: float = 3.0,
              r_max_phi: float | None = None) -> BasisSet:
    """Gaussian RBF dictionary, shared construction for both blocks.

    Centers are equidistant on [0.01, r_max] and the width is
    w = 1.5 * r_max / K, giving overlapping bumps.  The confining block acts
    on |x| with its own r_max; the interaction block uses r_max_phi when
    given, else the same r_max.
    """
    if k_per_block < 2:
        raise ValueError("need at least 2 RBF centers per block")
    if r_max <= 0.01:
        raise ValueError("r_max must exceed the first center 0.01")

    def block(rmax):
        centers = np.linspace(0.01, rmax, k_per_block)
        w = 1.5 * rmax / k_per_block
        return [gaussian_element(c, w) for c in centers]

    r_max_phi = r_max if r_max_phi is None else r_max_phi
    return BasisSet(block(r_max), block(r_max_phi),
                    description={"type": "rbf", "k_per_block": k_per_block,
                                 "r_max": r_max, "r_max_phi": r_max_phi})


def percentile_rmax(ds, q: float = 99.0, cap: int = 10_000_000,
                    seed: int = 0) -> tuple:
    """(r_max_V, r_max_Phi): q-th percentile of particle norms and of pairwise
    distances over the dataset.

    When the pair count exceeds `cap`, a uniform snapshot subsample (fixed
    seed) is used; the target densities are smooth, so the subsampling error
    is far below any tolerance used downstream.
    """
    X = ds.data
    M, Lp1, N, d = X.shape
    if X.size == 0:
        raise ValueError("empty dataset")
    norms = np.linalg.norm(X, axis=-1).ravel()
    if norms.size > cap:
        rng = np.random.default_rng(seed)
        norms = norms[rng.choice(norms.size, size=cap, replace=False)]
    iu, ju = np.triu_indices(N, k=1)
    n_pairs_total = M * Lp1 * iu.size
    if n_pairs_total > cap and iu.size > 0:
        rng = np.random.default_rng(seed + 1)
        n_snap = max(1, cap // iu.size)
        flat = X.reshape(M * Lp1, N, d)
        pick = rng.choice(M * Lp1, size=min(n_snap, M * Lp1), replace=False)
        flat = flat[pick]
    else:
        flat = X.reshape(M * Lp1, N, d)
    if iu.size == 0:
        return float(np.percentile(norms, q)), 0.0
    dists = np.linalg.norm(flat[:, iu] - flat[:, ju], axis=-1).ravel()
    return float(np.percentile(norms, q)), float(np.percentile(dists, q))


def rbf_basis_for_dataset(ds, k_per_block: int = 20, q: float = 99.0) -> BasisSet:
    """RBF dictionary sized from the dataset's q-th distance percentiles."""
    r_v, r_phi = percentile_rmax(ds, q)
    return rbf_basis(k_per_block, max(r_v, 0.02), max(r_phi, 0.02))
