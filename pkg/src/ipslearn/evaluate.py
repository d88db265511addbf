"""Evaluation metrics, conditioning diagnostics, and scripted experiments.

Accuracy is the relative L2(rho) error of the fitted gradient against the
ground truth, weighted by a kernel density estimate of where the data live:
for radial models rho_V is the density of particle radii and rho_Phi the
density of pairwise distances, with errors taken on the scalar radial
derivative.  Non-radial models are scored by Monte Carlo over data-drawn
points (V) and displacements (Phi) on the full vector gradient.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import models, nn as nnmod
from .basis import BasisSet
from .models import PotentialSpec
from .selftest import FitResult, NormalSystem
from .simulate import SnapshotDataset

KDE_SAMPLE_CAP = 10_000_000
GRID_N = 2000


@dataclass
class DensityGrid:
    """1-d density on a fixed equispaced grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_samples: int

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass
class ErrorReport:
    err_gradV: np.ndarray
    err_gradPhi: np.ndarray
    block_size: int
    n_blocks: int
    extra: dict = field(default_factory=dict)

    @property
    def mean_V(self) -> float:
        return float(np.mean(self.err_gradV))

    @property
    def std_V(self) -> float:
        return float(np.std(self.err_gradV, ddof=1)) if len(self.err_gradV) > 1 else 0.0

    @property
    def mean_Phi(self) -> float:
        return float(np.mean(self.err_gradPhi))

    @property
    def std_Phi(self) -> float:
        return float(np.std(self.err_gradPhi, ddof=1)) if len(self.err_gradPhi) > 1 else 0.0


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------

def kde(samples, bandwidth_factor: float = 0.15, grid_range=None,
        grid_n: int = GRID_N, bandwidth: float | None = None,
        cap: int = KDE_SAMPLE_CAP, seed: int = 0) -> DensityGrid:
    """Gaussian KDE with bandwidth h = bandwidth_factor * sample std.

    Samples beyond `cap` are uniformly subsampled with a fixed seed (the
    densities involved are smooth, so the subsampling error is negligible
    against the metric tolerances).  Evaluation bins the samples linearly
    onto the grid and convolves with the Gaussian kernel, which is accurate
    as long as the grid spacing is well below h.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    n = samples.size
    if n == 0:
        raise ValueError("no samples")
    if n > cap:
        rng = np.random.default_rng(seed)
        samples = samples[rng.choice(n, size=cap, replace=False)]
        n = cap
    if bandwidth is None:
        sd = samples.std()
        bandwidth = bandwidth_factor * sd
    if grid_range is None:
        lo, hi = np.percentile(samples, [0.5, 99.5])
        pad = max(3.0 * bandwidth, 1e-6 * max(abs(lo), abs(hi), 1.0))
        grid_range = (lo - pad, hi + pad)
    grid = np.linspace(grid_range[0], grid_range[1], grid_n)
    dx = grid[1] - grid[0]
    if bandwidth <= 0:
        bandwidth = 3.0 * dx  # degenerate sample set: resolve at grid scale

    # linear binning
    pos = (samples - grid[0]) / dx
    pos = np.clip(pos, 0, grid_n - 1 - 1e-9)
    left = pos.astype(int)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=grid_n)
    counts += np.bincount(np.minimum(left + 1, grid_n - 1), weights=frac,
                          minlength=grid_n)
    half = int(np.ceil(6.0 * bandwidth / dx))
    offs = np.arange(-half, half + 1) * dx
    kernel = np.exp(-0.5 * (offs / bandwidth) ** 2) / (bandwidth * np.sqrt(2 * np.pi))
    density = np.convolve(counts, kernel, mode="same") / n
    return DensityGrid(grid, density, float(bandwidth), n)


def radial_densities(ds: SnapshotDataset, grid_range_v=None, grid_range_phi=None,
                     cap: int = KDE_SAMPLE_CAP, seed: int = 0):
    """(rho_V, rho_Phi): KDEs of particle radii and pairwise distances."""
    X = ds.data
    M, Lp1, N, d = X.shape
    radii = np.linalg.norm(X, axis=-1).ravel()
    iu, ju = np.triu_indices(N, k=1)
    flat = X.reshape(M * Lp1, N, d)
    n_snap_cap = max(1, cap // max(iu.size, 1))
    if M * Lp1 > n_snap_cap:
        rng = np.random.default_rng(seed)
        flat = flat[rng.choice(M * Lp1, size=n_snap_cap, replace=False)]
    dists = np.linalg.norm(flat[:, iu] - flat[:, ju], axis=-1).ravel()
    rho_v = kde(radii, grid_range=grid_range_v, cap=cap, seed=seed)
    rho_phi = kde(dists, grid_range=grid_range_phi, cap=cap, seed=seed)
    return rho_v, rho_phi


# ---------------------------------------------------------------------------
# gradient error metrics
# ---------------------------------------------------------------------------

def _estimate_deriv_fn(estimate, kind: str):
    """Scalar radial-derivative callable from a fit, a net, or a callable."""
    if callable(estimate):
        return estimate
    if isinstance(estimate, nnmod.MlpPotential):
        def from_net(r):
            _, g1, _ = estimate.profile(np.asarray(r, dtype=float))
            return g1
        return from_net
    if isinstance(estimate, tuple) and len(estimate) == 2:
        fit, basis = estimate
        theta = fit.theta_hat if isinstance(fit, FitResult) else np.asarray(fit)
        return lambda r: basis.combine_profile(theta, kind, r, order=1)
    raise TypeError("estimate must be callable, MlpPotential, or (FitResult, BasisSet)")


def relative_gradient_error(estimate, truth: PotentialSpec, rho: DensityGrid,
                            kind: str) -> float:
    """Relative L2(rho) error of the radial derivative against the truth.

    estimate: (FitResult, BasisSet) pair, an MlpPotential in a radial mode,
    or a callable r -> d/dr estimate.  Integrals use trapezoidal quadrature
    on the density grid.
    """
    est = _estimate_deriv_fn(estimate, kind)
    r = rho.grid
    true_d = models.radial_profile(truth, kind, r, 1)
    num = np.trapezoid((est(r) - true_d) ** 2 * rho.density, r)
    den = np.trapezoid(true_d**2 * rho.density, r)
    if den <= 0:
        raise ValueError("trivial truth gradient: zero denominator")
    return float(np.sqrt(num / den))


def draw_eval_points(ds: SnapshotDataset, kind: str, n: int = 100_000,
                     seed: int = 0) -> np.ndarray:
    """Data-drawn evaluation points: particle positions (V) or pairwise
    displacements (Phi)."""
    X = ds.data
    M, Lp1, N, d = X.shape
    rng = np.random.default_rng(seed)
    if kind == "V":
        flat = X.reshape(-1, d)
        pick = rng.choice(flat.shape[0], size=min(n, flat.shape[0]), replace=False)
        return flat[pick]
    iu, ju = np.triu_indices(N, k=1)
    flat = X.reshape(-1, N, d)
    snaps = rng.integers(0, flat.shape[0], size=n)
    pair = rng.integers(0, iu.size, size=n)
    return flat[snaps, iu[pair]] - flat[snaps, ju[pair]]


def vector_gradient_error(est_grad, truth: PotentialSpec, kind: str,
                          points: np.ndarray) -> float:
    """Monte-Carlo relative L2 error of the full vector gradient.

    est_grad is a callable points -> gradients or an MlpPotential.
    """
    if isinstance(est_grad, nnmod.MlpPotential):
        net = est_grad
        def est(p):
            _, g, _ = nnmod.mlp_value_grad_laplacian(net, p)
            return g
    else:
        est = est_grad
    true_g = models.potential_grad(truth, kind, points)
    diff = est(points) - true_g
    num = np.einsum("nd,nd->", diff, diff)
    den = np.einsum("nd,nd->", true_g, true_g)
    if den <= 0:
        raise ValueError("trivial truth gradient: zero denominator")
    return float(np.sqrt(num / den))


# ---------------------------------------------------------------------------
# block evaluation
# ---------------------------------------------------------------------------

def block_evaluation(pool: SnapshotDataset, block_size: int, n_blocks: int,
                     fit_fn, spec: PotentialSpec, rho_v: DensityGrid,
                     rho_phi: DensityGrid) -> ErrorReport:
    """Fit non-overlapping ensemble blocks independently and evaluate each
    against the shared densities; reports mean and std across blocks."""
    if block_size * n_blocks > pool.M:
        raise ValueError("pool has too few ensembles for the requested blocks")
    errs_v, errs_phi, lams = [], [], []
    for k in range(n_blocks):
        block = SnapshotDataset(pool.data[k * block_size:(k + 1) * block_size],
                                _with_m(pool.config, block_size),
                                labeled=pool.labeled, perm_seed=pool.perm_seed)
        fit, basis = fit_fn(block)
        errs_v.append(relative_gradient_error((fit, basis), spec, rho_v, "V"))
        errs_phi.append(relative_gradient_error((fit, basis), spec, rho_phi, "Phi"))
        lams.append(fit.lam if isinstance(fit, FitResult) else np.nan)
    return ErrorReport(np.array(errs_v), np.array(errs_phi), block_size, n_blocks,
                       extra={"lambdas": lams})


def _with_m(config, m):
    from dataclasses import replace
    return replace(config, M=m)


# ---------------------------------------------------------------------------
# conditioning and coercivity diagnostics
# ---------------------------------------------------------------------------

def condition_diagnostics(ns: NormalSystem, K_V: int):
    """(kappa_full, kappa_VV, kappa_PhiPhi, lambda_min, lambda_max) of the
    normal matrix and its diagonal blocks."""
    def kappa(mat):
        e = scipy.linalg.eigvalsh(mat)
        return float(e[-1] / max(e[0], 1e-300))
    eigs = scipy.linalg.eigvalsh(ns.A)
    return (kappa(ns.A), kappa(ns.A[:K_V, :K_V]), kappa(ns.A[K_V:, K_V:]),
            float(eigs[0]), float(eigs[-1]))


def empirical_gram(ds: SnapshotDataset, basis: BasisSet, cap_snapshots: int = 2000,
                   seed: int = 0):
    """Monte-Carlo Gram matrices of the basis gradients.

    G_V averages grad psi(X)^T grad psi(X) over single particles; G_Phi
    averages over ordered pair displacements.  Positive minimum eigenvalues
    support identifiability of the joint estimation.
    """
    X = ds.data
    M, Lp1, N, d = X.shape
    flat = X.reshape(M * Lp1, N, d)
    if flat.shape[0] > cap_snapshots:
        rng = np.random.default_rng(seed)
        flat = flat[rng.choice(flat.shape[0], size=cap_snapshots, replace=False)]
    rn = np.linalg.norm(flat, axis=-1)
    safe = np.maximum(rn, 1e-12)
    dv = basis.v_profile(rn, 1)                           # [S, N, K_V]
    gv = dv[..., None, :] * (flat / safe[..., None])[..., :, None]  # [S,N,d,K_V]
    G_V = np.einsum("sndk,sndj->kj", gv, gv) / (flat.shape[0] * N)

    iu, ju = np.triu_indices(N, k=1)
    Z = flat[:, iu] - flat[:, ju]
    rz = np.linalg.norm(Z, axis=-1)
    safez = np.maximum(rz, 1e-12)
    dphi = basis.phi_profile(rz, 1)
    gphi = dphi[..., None, :] * (Z / safez[..., None])[..., :, None]
    G_Phi = np.einsum("spdk,spdj->kj", gphi, gphi) / (flat.shape[0] * iu.size)
    lmin_v = float(scipy.linalg.eigvalsh(G_V)[0])
    lmin_phi = float(scipy.linalg.eigvalsh(G_Phi)[0])
    return G_V, G_Phi, lmin_v, lmin_phi


# ---------------------------------------------------------------------------
# experiment drivers (CSV rows shared by the CLI presets)
# ---------------------------------------------------------------------------

CSV_FIELDS = ["model", "method", "quadrature", "dt_obs", "M", "block",
              "err_gradV", "err_gradPhi", "lambda", "wall_time_s"]


def rows_to_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in CSV_FIELDS})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def _loglog_slope(m_values, errors):
    return float(np.polyfit(np.log(np.asarray(m_values, float)),
                            np.log(np.asarray(errors, float)), 1)[0])


def experiment_mscaling(pool: SnapshotDataset, spec: PotentialSpec,
                        basis_fn, quadrature: str, dt_list, M_list, trials: int,
                        rho_v: DensityGrid, rho_phi: DensityGrid,
                        method: str = "selftest-lse") -> list:
    """Sample-size scaling table: block fits across (dt, M) with log-log slopes.

    The pool must be recorded at the finest dt in dt_list; coarser dt values
    reuse the same underlying trajectories by striding.
    """
    from .selftest import fit_selftest_lse

    rows = []
    for dt in dt_list:
        stride = int(round(dt / pool.dt_obs))
        view = pool.substride(stride) if stride > 1 else pool
        for M in M_list:
            per_v, per_phi = [], []
            for k in range(trials):
                block = view.data[k * M:(k + 1) * M]
                bds = SnapshotDataset(block, _with_m(view.config, M),
                                      labeled=view.labeled)
                basis = basis_fn(bds)
                t0 = time.perf_counter()
                fit = fit_selftest_lse(bds, basis, quadrature)
                wall = time.perf_counter() - t0
                ev = relative_gradient_error((fit, basis), spec, rho_v, "V")
                ep = relative_gradient_error((fit, basis), spec, rho_phi, "Phi")
                per_v.append(ev)
                per_phi.append(ep)
                rows.append(dict(model=spec.family, method=method,
                                 quadrature=quadrature, dt_obs=dt, M=M, block=k,
                                 err_gradV=ev, err_gradPhi=ep,
                                 **{"lambda": fit.lam}, wall_time_s=round(wall, 4)))
            rows.append(dict(model=spec.family, method=method, quadrature=quadrature,
                             dt_obs=dt, M=M, block="mean",
                             err_gradV=float(np.mean(per_v)),
                             err_gradPhi=float(np.mean(per_phi)),
                             **{"lambda": ""}, wall_time_s=""))
            rows.append(dict(model=spec.family, method=method, quadrature=quadrature,
                             dt_obs=dt, M=M, block="std",
                             err_gradV=float(np.std(per_v, ddof=1)) if trials > 1 else 0.0,
                             err_gradPhi=float(np.std(per_phi, ddof=1)) if trials > 1 else 0.0,
                             **{"lambda": ""}, wall_time_s=""))
        means_v = [r["err_gradV"] for r in rows
                   if r["block"] == "mean" and r["dt_obs"] == dt
                   and r["quadrature"] == quadrature]
        means_phi = [r["err_gradPhi"] for r in rows
                     if r["block"] == "mean" and r["dt_obs"] == dt
                     and r["quadrature"] == quadrature]
        rows.append(dict(model=spec.family, method=method, quadrature=quadrature,
                         dt_obs=dt, M="", block="slope",
                         err_gradV=_loglog_slope(M_list, means_v),
                         err_gradPhi=_loglog_slope(M_list, means_phi),
                         **{"lambda": ""}, wall_time_s=""))
    return rows


def experiment_method_comparison(pool, spec, basis_fn, dt_list, methods,
                                 M: int, n_blocks: int, rho_v, rho_phi) -> list:
    """Method-by-dt error table over non-overlapping blocks."""
    from .baselines import labeled_mle, sinkhorn_mle
    from .selftest import fit_selftest_lse

    rows = []
    for dt in dt_list:
        stride = int(round(dt / pool.dt_obs))
        view = pool.substride(stride) if stride > 1 else pool
        for method in methods:
            per_v, per_phi = [], []
            for k in range(n_blocks):
                block = SnapshotDataset(view.data[k * M:(k + 1) * M],
                                        _with_m(view.config, M), labeled=view.labeled)
                basis = basis_fn(block)
                t0 = time.perf_counter()
                if method == "selftest-lse":
                    fit = fit_selftest_lse(block, basis, "trapezoid")
                elif method == "labeled-mle":
                    fit = labeled_mle(block, basis)
                elif method == "sinkhorn-mle":
                    fit = sinkhorn_mle(block, basis)
                else:
                    raise ValueError(f"unknown method {method!r}")
                wall = time.perf_counter() - t0
                ev = relative_gradient_error((fit, basis), spec, rho_v, "V")
                ep = relative_gradient_error((fit, basis), spec, rho_phi, "Phi")
                per_v.append(ev)
                per_phi.append(ep)
                rows.append(dict(model=spec.family, method=method, quadrature="",
                                 dt_obs=dt, M=M, block=k, err_gradV=ev,
                                 err_gradPhi=ep, **{"lambda": fit.lam},
                                 wall_time_s=round(wall, 4)))
            rows.append(dict(model=spec.family, method=method, quadrature="",
                             dt_obs=dt, M=M, block="mean",
                             err_gradV=float(np.mean(per_v)),
                             err_gradPhi=float(np.mean(per_phi)),
                             **{"lambda": ""}, wall_time_s=""))
    return rows
