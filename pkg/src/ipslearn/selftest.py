"""Trajectory-free self-test loss: normal-system assembly and regularized solve.

Under a linear parameterization V = sum_k alpha_k psi_k(|x|),
Phi = sum_l beta_l phi_l(|z|), the loss

    (1/(MT)) sum_{m,l} [ 0.5*J_diss*dt - (sigma^2/2)*J_diff*dt + dE_f ]

is the quadratic 0.5*theta^T A theta - b^T theta.  A is a sum of per-particle
force Gram blocks and is therefore symmetric PSD; b collects the diffusion
correction and the telescoped potential-energy change.  Everything depends on
the snapshots only through symmetric functions of the particles, so assembly
is exactly invariant under relabeling.

`loss_direct` re-evaluates the loss by brute-force summation of the defining
terms and exists purely as an independent oracle for `loss_quadratic`; it
deliberately shares no code with `assemble`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisSet
from .simulate import SnapshotDataset

_CHUNK_BYTES = 150_000_000  # working-memory budget for assembly chunks

DEFAULT_LAMBDA_GRID = np.logspace(-10.0, 1.0, 60)
FLAT_CURVE_LAMBDA = 1e-6
CURVATURE_THRESHOLD = 0.01


@dataclass
class RegressionVectors:
    """Per-configuration design blocks: forces F [N,d,K], diffusion correction
    delta [K], potential energy h [K]."""

    F: np.ndarray
    delta: np.ndarray
    h: np.ndarray


@dataclass
class NormalSystem:
    """Quadratic-loss data: symmetric K x K matrix A and vector b."""

    A: np.ndarray
    b: np.ndarray
    quadrature: str
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    def validate(self, sym_tol: float = 1e-12, psd_tol: float = 1e-10) -> None:
        a_norm = np.linalg.norm(self.A, 2)
        asym = np.abs(self.A - self.A.T).max()
        if asym > sym_tol * max(a_norm, 1.0):
            raise ValueError(f"normal matrix asymmetric: {asym:.2e}")
        lam_min = scipy.linalg.eigvalsh(self.A)[0]
        if lam_min < -psd_tol * max(a_norm, 1.0):
            raise ValueError(f"normal matrix not PSD: lambda_min={lam_min:.2e}")

    def to_json(self) -> str:
        return json.dumps({
            "A": self.A.tolist(), "b": self.b.tolist(),
            "quadrature": self.quadrature, "meta": self.meta,
        })

    @staticmethod
    def from_json(s: str) -> "NormalSystem":
        d = json.loads(s)
        return NormalSystem(np.array(d["A"]), np.array(d["b"]),
                            d["quadrature"], d.get("meta", {}))


@dataclass
class FitResult:
    """Fitted coefficients with the chosen regularization and diagnostics."""

    theta_hat: np.ndarray
    lam: float
    lcurve_curvature: float
    diagnostics: dict = field(default_factory=dict)
    basis_description: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "theta_hat": self.theta_hat.tolist(), "lambda": self.lam,
            "lcurve_curvature": self.lcurve_curvature,
            "diagnostics": self.diagnostics,
            "basis_description": self.basis_description,
        })

    @staticmethod
    def from_json(s: str) -> "FitResult":
        d = json.loads(s)
        return FitResult(np.array(d["theta_hat"]), d["lambda"],
                         d["lcurve_curvature"], d.get("diagnostics", {}),
                         d.get("basis_description", {}))


# ---------------------------------------------------------------------------
# regression vectors and assembly
# ---------------------------------------------------------------------------

def _snapshot_design(X: np.ndarray, basis: BasisSet):
    """Design blocks for a batch of configurations X [..., N, d].

    Returns F [..., N, d, K], delta [..., K], h [..., K] with the
    1/N, 1/N^2, 1/(2N^2) interaction weights and j != i pair sums.
    """
    N, d = X.shape[-2], X.shape[-1]
    K_V, K_Phi = basis.K_V, basis.K_Phi
    lead = X.shape[:-2]
    rn = np.linalg.norm(X, axis=-1)                       # [..., N]
    safe_rn = np.maximum(rn, 1e-12)

    pv = basis.v_profile(rn, 0)                           # [..., N, K_V]
    dv = basis.v_profile(rn, 1)
    ddv = basis.v_profile(rn, 2)
    F_v = (dv / safe_rn[..., None])[..., None, :] * X[..., :, None]  # [...,N,d,K_V]
    lap_v = ddv + (d - 1) / safe_rn[..., None] * dv
    delta_v = lap_v.mean(axis=-2)                         # [..., K_V]
    h_v = pv.mean(axis=-2)

    diffs = X[..., :, None, :] - X[..., None, :, :]       # [..., N, N, d]
    r = np.sqrt(np.einsum("...ijd,...ijd->...ij", diffs, diffs))
    off = ~np.eye(N, dtype=bool)
    safe_r = np.maximum(r, 1e-12)

    p_phi = basis.phi_profile(r, 0)                       # [..., N, N, K_Phi]
    d_phi = basis.phi_profile(r, 1)
    dd_phi = basis.phi_profile(r, 2)
    mask = off.astype(float)
    if lead:
        mask = np.broadcast_to(mask, r.shape)
    fac = d_phi / safe_r[..., None] * mask[..., None]     # grad factor, diag zeroed
    F_phi = np.einsum("...ijk,...ijd->...idk", fac, diffs) / N
    lap_phi = (dd_phi + (d - 1) / safe_r[..., None] * d_phi) * mask[..., None]
    delta_phi = lap_phi.sum(axis=(-3, -2)) / N**2
    h_phi = (p_phi * mask[..., None]).sum(axis=(-3, -2)) / (2 * N**2)

    F = np.concatenate([F_v, F_phi], axis=-1)
    delta = np.concatenate([delta_v, delta_phi], axis=-1)
    h = np.concatenate([h_v, h_phi], axis=-1)
    return F, delta, h


def regression_vectors(X: np.ndarray, basis: BasisSet) -> RegressionVectors:
    """Force/diffusion/energy design blocks for one configuration [N, d]."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a single [N, d] configuration")
    if basis.K_Phi > 0 and X.shape[0] < 2:
        raise ValueError("interaction basis needs at least 2 particles")
    F, delta, h = _snapshot_design(X, basis)
    return RegressionVectors(F, delta, h)


def _chunk_size(Lp1: int, N: int, K: int, d: int) -> int:
    per_m = Lp1 * N * N * max(K, d) * 8 * 3
    return max(1, int(_CHUNK_BYTES // per_m))


def _canonical_order(X: np.ndarray) -> np.ndarray:
    """Sort particles lexicographically by coordinates within each snapshot.

    Summing per-particle contributions in this canonical order makes the
    assembled system bitwise invariant under any relabeling of the input:
    the multiset of particle rows determines the entire computation.
    """
    d = X.shape[-1]
    order = np.argsort(X[..., d - 1], axis=-1, kind="stable")
    for k in range(d - 2, -1, -1):
        xk = np.take_along_axis(X[..., k], order, axis=-1)
        order = np.take_along_axis(order, np.argsort(xk, axis=-1, kind="stable"),
                                   axis=-1)
    return np.take_along_axis(X, order[..., None], axis=-2)


def assemble(ds: SnapshotDataset, basis: BasisSet,
             quadrature: str = "riemann") -> NormalSystem:
    """Normal system (A, b) of the self-test loss over the whole dataset.

    Riemann uses left endpoints; trapezoid averages endpoint Gram/diffusion
    terms, which removes the leading O(dt) quadrature bias.  Labels are
    ignored, so labeled and stripped copies of the same data assemble to
    exactly the same system.
    """
    if quadrature not in ("riemann", "trapezoid"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    X = ds.data
    M, Lp1, N, d = X.shape
    L = Lp1 - 1
    if L < 1:
        raise ValueError("need at least two snapshots per ensemble")
    K = basis.K
    dt = ds.dt_obs
    sigma = ds.sigma
    T = ds.config.T

    if quadrature == "riemann":
        w = np.ones(Lp1)
        w[-1] = 0.0
    else:
        w = np.ones(Lp1)
        w[0] = 0.5
        w[-1] = 0.5

    A_parts, db_parts, hT_parts, h0_parts = [], [], [], []
    chunk = _chunk_size(Lp1, N, K, d)
    for start in range(0, M, chunk):
        Xc = _canonical_order(X[start:start + chunk])
        F, delta, h = _snapshot_design(Xc, basis)         # [c,L+1,N,d,K], [c,L+1,K]
        G = np.einsum("clndk,clndj->clkj", F, F)
        A_parts.append(np.einsum("l,clkj->kj", w, G))
        db_parts.append(np.einsum("l,clk->k", w, delta))
        hT_parts.append(h[:, -1].sum(axis=0))
        h0_parts.append(h[:, 0].sum(axis=0))

    A = np.sum(A_parts, axis=0) / (M * L * N)
    delta_sum = np.sum(db_parts, axis=0)
    h_change = np.sum(hT_parts, axis=0) - np.sum(h0_parts, axis=0)
    b = (sigma**2 / 2.0) * delta_sum * dt / (M * T) - h_change / (M * T)

    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise FloatingPointError("non-finite accumulation in normal system")
    return NormalSystem(A, b, quadrature,
                        meta={"M": M, "L": L, "N": N, "dt": dt, "sigma": sigma,
                              "K_V": basis.K_V, "K_Phi": basis.K_Phi,
                              "labels": basis.labels})


# ---------------------------------------------------------------------------
# loss evaluation
# ---------------------------------------------------------------------------

def loss_quadratic(theta: np.ndarray, ns: NormalSystem) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(0.5 * theta @ ns.A @ theta - ns.b @ theta)


def loss_direct(theta: np.ndarray, ds: SnapshotDataset, basis: BasisSet,
                quadrature: str = "riemann") -> float:
    """Direct summation of the loss terms; independent oracle for the
    quadratic form.  Dissipation/diffusion integrals use the configured
    quadrature; the energy change is computed exactly from the data."""
    theta = np.asarray(theta, dtype=float)
    alpha, beta = theta[:basis.K_V], theta[basis.K_V:]
    X = ds.data
    M, Lp1, N, d = X.shape
    L = Lp1 - 1
    dt = ds.dt_obs
    sigma = ds.sigma
    T = ds.config.T

    def dissipation(cfg):
        total = 0.0
        for i in range(N):
            rn = float(np.linalg.norm(cfg[i]))
            gv = float(basis.v_profile(rn, 1) @ alpha)
            force = gv * cfg[i] / max(rn, 1e-12)
            for j in range(N):
                if j == i:
                    continue
                z = cfg[i] - cfg[j]
                rz = float(np.linalg.norm(z))
                gp = float(basis.phi_profile(rz, 1) @ beta)
                force = force + gp * z / max(rz, 1e-12) / N
            total += float(force @ force)
        return total / N

    def diffusion(cfg):
        tot = 0.0
        for i in range(N):
            rn = float(np.linalg.norm(cfg[i]))
            g1 = float(basis.v_profile(rn, 1) @ alpha)
            g2 = float(basis.v_profile(rn, 2) @ alpha)
            tot += (g2 + (d - 1) / max(rn, 1e-12) * g1) / N
            for j in range(N):
                if j == i:
                    continue
                rz = float(np.linalg.norm(cfg[i] - cfg[j]))
                p1 = float(basis.phi_profile(rz, 1) @ beta)
                p2 = float(basis.phi_profile(rz, 2) @ beta)
                tot += (p2 + (d - 1) / max(rz, 1e-12) * p1) / N**2
        return tot

    def energy(cfg):
        tot = 0.0
        for i in range(N):
            tot += float(basis.v_profile(float(np.linalg.norm(cfg[i])), 0) @ alpha) / N
            for j in range(N):
                if j == i:
                    continue
                rz = float(np.linalg.norm(cfg[i] - cfg[j]))
                tot += float(basis.phi_profile(rz, 0) @ beta) / (2 * N**2)
        return tot

    total = 0.0
    for m in range(M):
        for l in range(L):
            if quadrature == "riemann":
                jdiss = dissipation(X[m, l])
                jdiff = diffusion(X[m, l])
            else:
                jdiss = 0.5 * (dissipation(X[m, l]) + dissipation(X[m, l + 1]))
                jdiff = 0.5 * (diffusion(X[m, l]) + diffusion(X[m, l + 1]))
            de = energy(X[m, l + 1]) - energy(X[m, l])
            total += 0.5 * jdiss * dt - (sigma**2 / 2.0) * jdiff * dt + de
    return total / (M * T)


# ---------------------------------------------------------------------------
# regularized solve and L-curve selection
# ---------------------------------------------------------------------------

def tikhonov_solve(ns: NormalSystem, lam: float) -> np.ndarray:
    """Solve (A + lam*I) theta = b via Cholesky."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    K = ns.K
    c, low = scipy.linalg.cho_factor(ns.A + lam * np.eye(K))
    return scipy.linalg.cho_solve((c, low), ns.b)


def _lcurve_quantities(s, beta2, lam):
    """rho = |A theta_lam - b|^2, xi = |theta_lam|^2 and their lambda
    derivatives, from the spectral filter theta_lam = sum beta_i/(s_i+lam) u_i."""
    sl = s + lam
    rho = np.sum(beta2 * lam**2 / sl**2)
    xi = np.sum(beta2 / sl**2)
    drho = np.sum(2 * beta2 * lam * s / sl**3)
    dxi = np.sum(-2 * beta2 / sl**3)
    ddrho = np.sum(2 * beta2 * s * (s - 2 * lam) / sl**4)
    ddxi = np.sum(6 * beta2 / sl**4)
    return rho, xi, drho, dxi, ddrho, ddxi


def lcurve_curvature(s, beta2, lam):
    """Signed curvature of (log|residual|, log|theta|) at lam.

    Positive curvature corresponds to the corner orientation of an L-shaped
    curve traversed with increasing lambda; curves bending the other way
    (identity-like or noise-free systems) have negative curvature everywhere
    and trigger the flat-curve fallback.
    """
    rho, xi, drho, dxi, ddrho, ddxi = _lcurve_quantities(s, beta2, lam)
    if rho <= 0 or xi <= 0:
        return 0.0
    xp = drho / (2 * rho)
    yp = dxi / (2 * xi)
    xpp = ddrho / (2 * rho) - drho**2 / (2 * rho**2)
    ypp = ddxi / (2 * xi) - dxi**2 / (2 * xi**2)
    denom = (xp**2 + yp**2) ** 1.5
    if denom == 0:
        return 0.0
    return float((xp * ypp - yp * xpp) / denom)


def lcurve_select(ns: NormalSystem, lambda_grid=None):
    """Tikhonov solution at the lambda of maximum L-curve curvature.

    Returns (theta_hat, lambda_star, curvature_at_star).  The SVD of A is
    computed once and the curve evaluated analytically on the grid.  When the
    maximum curvature is below 0.01 (no corner) the minimal regularization
    1e-6 is used.  Systems whose unregularized residual is at machine zero
    (noise-free, consistent) return the unregularized solution directly: the
    curve has no corner and any fixed fallback would only bias the answer.
    """
    if lambda_grid is None:
        lambda_grid = DEFAULT_LAMBDA_GRID
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(lambda_grid <= 0):
        raise ValueError("lambda grid must be positive")

    s, U = np.linalg.eigh(ns.A)
    s = np.clip(s, 0.0, None)[::-1]
    U = U[:, ::-1]
    beta = U.T @ ns.b
    beta2 = beta**2

    b_norm = np.linalg.norm(ns.b)
    if b_norm == 0:
        return np.zeros(ns.K), float(lambda_grid[0]), 0.0

    # Exact-fit shortcut for least-squares systems that carry their target
    # norm: a machine-zero LS residual means the data are noise-free and any
    # fixed regularization would only bias the answer.  (The L-curve of such
    # a system has no corner.)
    rhs_norm2 = ns.meta.get("rhs_norm2")
    if rhs_norm2 is not None and rhs_norm2 > 0:
        s_max = s[0] if s[0] > 0 else 1.0
        inv = np.where(s > 1e-14 * s_max, 1.0 / np.maximum(s, 1e-300), 0.0)
        theta0 = U @ (inv * beta)
        ls_resid2 = rhs_norm2 - 2 * ns.b @ theta0 + theta0 @ ns.A @ theta0
        if ls_resid2 <= 1e-10 * rhs_norm2:
            return theta0, float(lambda_grid[0]), 0.0

    curv = np.array([lcurve_curvature(s, beta2, lam) for lam in lambda_grid])
    best = int(np.argmax(curv))  # ties resolved toward smaller lambda
    if curv[best] < CURVATURE_THRESHOLD:
        lam = FLAT_CURVE_LAMBDA
        kappa = lcurve_curvature(s, beta2, lam)
    else:
        lam = float(lambda_grid[best])
        kappa = float(curv[best])
    theta = U @ (beta / (s + lam))
    return theta, lam, kappa


def fit_selftest_lse(ds: SnapshotDataset, basis: BasisSet,
                     quadrature: str = "riemann", lambda_grid=None) -> FitResult:
    """Assemble the normal system and solve it with L-curve regularization."""
    ns = assemble(ds, basis, quadrature)
    theta, lam, kappa = lcurve_select(ns, lambda_grid)
    eigs = scipy.linalg.eigvalsh(ns.A)
    diag = {
        "loss": loss_quadratic(theta, ns),
        "residual_norm": float(np.linalg.norm(ns.A @ theta - ns.b)),
        "cond_full": float(eigs[-1] / max(eigs[0], 1e-300)),
        "lambda_min": float(eigs[0]),
        "lambda_max": float(eigs[-1]),
        "quadrature": quadrature,
        "method": "selftest-lse",
    }
    return FitResult(theta, lam, kappa, diag, dict(basis.description))


# ---------------------------------------------------------------------------
# martingale diagnostic
# ---------------------------------------------------------------------------

def martingale_mean_check(ds: SnapshotDataset, spec) -> dict:
    """z-scores of the weak-form residual at the true potentials.

    For test functions f in {coordinates, |x|^2} the per-ensemble residual

        S_m = sum_l [ <mu_{l+1} - mu_l, f> + dt * mean_i grad f . drift_i
                      - dt * (sigma^2/2) * mean_i lap f ]

    has zero mean up to O(dt) quadrature bias; its ensemble z-score should be
    within normal range when the model matches the data.
    """
    from .simulate import drift as model_drift

    X = ds.data
    M, Lp1, N, d = X.shape
    dt = ds.dt_obs
    sigma = ds.sigma
    Xl = X[:, :-1]
    drifts = np.empty_like(Xl)
    for l in range(Lp1 - 1):
        drifts[:, l] = model_drift(spec, X[:, l])

    z_scores = {}
    for c in range(d):
        mu_f = X[..., c].mean(axis=-1)                    # [M, L+1]
        term = drifts[..., c].mean(axis=-1) * dt          # grad f . drift = drift_c
        S = (np.diff(mu_f, axis=1) - term).sum(axis=1)
        z_scores[f"x{c + 1}"] = float(S.mean() / (S.std(ddof=1) / np.sqrt(M)))
    sq = (X**2).sum(axis=-1)                              # |x|^2 per particle
    mu_f = sq.mean(axis=-1)
    grad_dot = 2.0 * np.einsum("mlnd,mlnd->ml", Xl, drifts) / N
    lap_term = sigma**2 / 2.0 * 2 * d
    S = (np.diff(mu_f, axis=1) - grad_dot * dt - lap_term * dt).sum(axis=1)
    z_scores["|x|^2"] = float(S.mean() / (S.std(ddof=1) / np.sqrt(M)))
    return z_scores
