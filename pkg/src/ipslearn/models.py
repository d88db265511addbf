"""Closed-form ground-truth potential families with analytic derivatives.

Six benchmark families, each defining a confining potential V(x) and an even
interaction potential Phi(z).  All families except ``anisotropic`` are radial:
V(x) = g(|x|) and Phi(z) = g(|z|) for scalar profiles g with hand-derived
first and second derivatives.  Spatial gradients and Laplacians are recovered
through the chain rule and the radial identity

    lap f(x) = g''(r) + (d - 1) / r * g'(r),   r = |x|.

Potentials are identifiable only up to additive constants, so comparisons
should use gradients; values are reported as-is.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

FAMILIES = (
    "reference",
    "smoothness",
    "conditioning",
    "singularity",
    "smooth_control",
    "anisotropic",
)

_EPS_R = 1e-12  # below this radius a radial direction is treated as undefined


@dataclass(frozen=True)
class PotentialSpec:
    """One ground-truth model: family name, its parameters and the dimension.

    r_safe is the clamp radius for the singular (Lennard-Jones) family and is
    ignored by the others.  smoothing_eps is the tanh transition width of the
    smoothed indicators in the smoothness family.
    """

    family: str
    params: dict = field(default_factory=dict)
    dim: int = 2
    r_safe: float = 0.35
    smoothing_eps: float = 0.05

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown potential family: {self.family!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.family == "anisotropic" and self.dim != 2:
            raise ValueError("anisotropic model is defined for d=2")
        for v in self.params.values():
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite model parameter")

    @property
    def radial(self) -> bool:
        return self.family != "anisotropic"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = {k: (list(v) if isinstance(v, (tuple, list)) else v)
                       for k, v in self.params.items()}
        return d

    @staticmethod
    def from_dict(d: dict) -> "PotentialSpec":
        params = {k: (tuple(v) if isinstance(v, list) else v)
                  for k, v in d["params"].items()}
        return PotentialSpec(family=d["family"], params=params, dim=int(d["dim"]),
                             r_safe=float(d.get("r_safe", 0.35)),
                             smoothing_eps=float(d.get("smoothing_eps", 0.05)))


# ---------------------------------------------------------------------------
# factories with the published benchmark parameters
# ---------------------------------------------------------------------------

def reference_spec(dim: int = 2) -> PotentialSpec:
    """Radial reference model: V = 0.5*a1*|x| + a2*|x|^2, Phi = two Gaussian bumps."""
    return PotentialSpec("reference", dict(alpha=(-1.0, 2.0), beta=(-3.0, 2.0),
                                           centers=(0.75, 1.5), widths=(0.125, 0.25)),
                         dim=dim)


def smoothness_spec(dim: int = 2, smoothing_eps: float = 0.05) -> PotentialSpec:
    """Same V as reference; Phi = weighted smoothed indicators of [0.5,1] and [1,2]."""
    return PotentialSpec("smoothness", dict(alpha=(-1.0, 2.0), beta=(-3.0, 2.0),
                                            edges=(0.5, 1.0, 1.0, 2.0)),
                         dim=dim, smoothing_eps=smoothing_eps)


def conditioning_spec(dim: int = 2) -> PotentialSpec:
    """Double-well V = 0.25(|x|^2-1)^2 - 0.25; slowly decaying Phi = -gamma*r/(r+1)."""
    return PotentialSpec("conditioning", dict(gamma=0.5), dim=dim)


def singularity_spec(dim: int = 2, r_safe: float = 0.35,
                     r_cut: float | None = None) -> PotentialSpec:
    """Quadratic V = (k/2)|x|^2 with a Lennard-Jones interaction clamped at r_safe.

    r_cut records the conventional LJ truncation radius but is off by default;
    when set, Phi and its derivatives vanish beyond r_cut.
    """
    params = dict(k=2.0, eps_lj=0.5, sigma_lj=0.5)
    if r_cut is not None:
        params["r_cut"] = float(r_cut)
    return PotentialSpec("singularity", params, dim=dim, r_safe=r_safe)


def smooth_control_spec(dim: int = 2) -> PotentialSpec:
    """Double-well V with a smooth Morse interaction; well-behaved baseline."""
    return PotentialSpec("smooth_control", dict(depth=0.5, a=2.0, r0=0.8), dim=dim)


def anisotropic_spec() -> PotentialSpec:
    """Non-radial d=2 model: V = a1*x1^2 + a2*x2^2, Phi = axis-scaled Gaussian."""
    return PotentialSpec("anisotropic", dict(a=(1.0, 4.0), amp=2.0, s=(0.5, 1.5)), dim=2)


_FACTORIES = {
    "reference": reference_spec,
    "smoothness": smoothness_spec,
    "conditioning": conditioning_spec,
    "singularity": singularity_spec,
    "smooth_control": smooth_control_spec,
}


def spec_from_name(name: str, dim: int = 2) -> PotentialSpec:
    if name == "anisotropic":
        return anisotropic_spec()
    try:
        return _FACTORIES[name](dim=dim)
    except KeyError:
        raise ValueError(f"unknown model name: {name!r}") from None


# ---------------------------------------------------------------------------
# radial profiles g(r) and derivatives, vectorized over numpy arrays
# ---------------------------------------------------------------------------

def _tanh_indicator(r, a, b, eps, order):
    # smoothed indicator of [a, b]: 0.5*[tanh((r-a)/eps) - tanh((r-b)/eps)]
    ta = np.tanh((r - a) / eps)
    tb = np.tanh((r - b) / eps)
    if order == 0:
        return 0.5 * (ta - tb)
    sa = 1.0 - ta * ta  # sech^2
    sb = 1.0 - tb * tb
    if order == 1:
        return 0.5 * (sa - sb) / eps
    if order == 2:
        return (tb * sb - ta * sa) / (eps * eps)
    raise ValueError("order must be 0, 1 or 2")


def _gauss_bump(r, c, w, order):
    g = np.exp(-((r - c) ** 2) / (2.0 * w * w))
    if order == 0:
        return g
    u = (r - c) / (w * w)
    if order == 1:
        return -u * g
    if order == 2:
        return (u * u - 1.0 / (w * w)) * g
    raise ValueError("order must be 0, 1 or 2")


def _profile_reference_v(spec, r, order):
    a1, a2 = spec.params["alpha"]
    if order == 0:
        return 0.5 * a1 * r + a2 * r * r
    if order == 1:
        return 0.5 * a1 + 2.0 * a2 * r
    return np.full_like(np.asarray(r, dtype=float), 2.0 * a2)


def _profile_reference_phi(spec, r, order):
    b = spec.params["beta"]
    c = spec.params["centers"]
    w = spec.params["widths"]
    return b[0] * _gauss_bump(r, c[0], w[0], order) + b[1] * _gauss_bump(r, c[1], w[1], order)


def _profile_smoothness_phi(spec, r, order):
    b = spec.params["beta"]
    a0, b0, a1, b1 = spec.params["edges"]
    eps = spec.smoothing_eps
    return (b[0] * _tanh_indicator(r, a0, b0, eps, order)
            + b[1] * _tanh_indicator(r, a1, b1, eps, order))


def _profile_doublewell_v(spec, r, order):
    # 0.25*(r^2 - 1)^2 - 0.25
    r = np.asarray(r, dtype=float)
    if order == 0:
        return 0.25 * (r * r - 1.0) ** 2 - 0.25
    if order == 1:
        return r * r * r - r
    return 3.0 * r * r - 1.0


def _profile_conditioning_phi(spec, r, order):
    g = spec.params["gamma"]
    rp = np.asarray(r, dtype=float) + 1.0
    if order == 0:
        return -g * (r / rp)
    if order == 1:
        return -g / (rp * rp)
    return 2.0 * g / (rp * rp * rp)


def _profile_quadratic_v(spec, r, order):
    k = spec.params["k"]
    r = np.asarray(r, dtype=float)
    if order == 0:
        return 0.5 * k * r * r
    if order == 1:
        return k * r
    return np.full_like(r, k)


def _profile_lj_phi(spec, r, order):
    # clamped Lennard-Jones: derivatives are taken of the profile and then
    # evaluated at the clamped distance, so they are constant on [0, r_safe]
    eps_lj = spec.params["eps_lj"]
    s = spec.params["sigma_lj"]
    rc = np.maximum(np.asarray(r, dtype=float), spec.r_safe)
    s6 = (s / rc) ** 6
    s12 = s6 * s6
    if order == 0:
        out = 4.0 * eps_lj * (s12 - s6)
    elif order == 1:
        out = 4.0 * eps_lj * (-12.0 * s12 + 6.0 * s6) / rc
    elif order == 2:
        out = 4.0 * eps_lj * (156.0 * s12 - 42.0 * s6) / (rc * rc)
    else:
        raise ValueError("order must be 0, 1 or 2")
    r_cut = spec.params.get("r_cut")
    if r_cut is not None:
        out = np.where(np.asarray(r) > r_cut, 0.0, out)
    return out


def _profile_morse_phi(spec, r, order):
    d0 = spec.params["depth"]
    a = spec.params["a"]
    r0 = spec.params["r0"]
    u = np.exp(-a * (np.asarray(r, dtype=float) - r0))
    if order == 0:
        return d0 * ((1.0 - u) ** 2 - (1.0 - np.exp(a * r0)) ** 2)
    if order == 1:
        return 2.0 * a * d0 * u * (1.0 - u)
    return 2.0 * a * a * d0 * u * (2.0 * u - 1.0)


_PROFILES = {
    ("reference", "V"): _profile_reference_v,
    ("reference", "Phi"): _profile_reference_phi,
    ("smoothness", "V"): _profile_reference_v,
    ("smoothness", "Phi"): _profile_smoothness_phi,
    ("conditioning", "V"): _profile_doublewell_v,
    ("conditioning", "Phi"): _profile_conditioning_phi,
    ("singularity", "V"): _profile_quadratic_v,
    ("singularity", "Phi"): _profile_lj_phi,
    ("smooth_control", "V"): _profile_doublewell_v,
    ("smooth_control", "Phi"): _profile_morse_phi,
}


def radial_profile(spec: PotentialSpec, kind: str, r, order: int = 0):
    """Scalar profile g(r) (order=0) or its derivatives g'(r), g''(r).

    Only defined for the radial families; kind is "V" or "Phi".
    """
    if not spec.radial:
        raise ValueError(f"{spec.family} potentials are not radial")
    if kind not in ("V", "Phi"):
        raise ValueError("kind must be 'V' or 'Phi'")
    return _PROFILES[(spec.family, kind)](spec, np.asarray(r, dtype=float), order)


# ---------------------------------------------------------------------------
# pointwise value / gradient / Laplacian
# ---------------------------------------------------------------------------

def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")


def _aniso_value(spec, kind, x):
    if kind == "V":
        a = spec.params["a"]
        return a[0] * x[..., 0] ** 2 + a[1] * x[..., 1] ** 2
    amp = spec.params["amp"]
    s = spec.params["s"]
    return amp * np.exp(-0.5 * (x[..., 0] ** 2 / s[0] ** 2 + x[..., 1] ** 2 / s[1] ** 2))


def _aniso_grad(spec, kind, x):
    if kind == "V":
        a = spec.params["a"]
        return np.stack([2.0 * a[0] * x[..., 0], 2.0 * a[1] * x[..., 1]], axis=-1)
    s = spec.params["s"]
    val = _aniso_value(spec, "Phi", x)
    return val[..., None] * np.stack([-x[..., 0] / s[0] ** 2, -x[..., 1] / s[1] ** 2], axis=-1)


def _aniso_laplacian(spec, kind, x):
    if kind == "V":
        a = spec.params["a"]
        return np.full(x.shape[:-1], 2.0 * (a[0] + a[1]))
    s = spec.params["s"]
    val = _aniso_value(spec, "Phi", x)
    return val * ((x[..., 0] / s[0] ** 2) ** 2 - 1.0 / s[0] ** 2
                  + (x[..., 1] / s[1] ** 2) ** 2 - 1.0 / s[1] ** 2)


def potential_value(spec: PotentialSpec, kind: str, x=None, *, r=None):
    """Potential value at points x in R^d, or at radial argument r (radial families)."""
    if r is not None:
        _check_finite(r)
        return radial_profile(spec, kind, r, 0)
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    if not spec.radial:
        if kind not in ("V", "Phi"):
            raise ValueError("kind must be 'V' or 'Phi'")
        return _aniso_value(spec, kind, x)
    return radial_profile(spec, kind, np.linalg.norm(x, axis=-1), 0)


def potential_grad(spec: PotentialSpec, kind: str, x):
    """Analytic spatial gradient at points x (shape [..., d]).

    For radial families the chain rule grad f = g'(r) * x / r is used; exactly
    at r = 0 the subgradient choice 0 is returned (a probability-zero event for
    data drawn from a continuous law).
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    if not spec.radial:
        if kind not in ("V", "Phi"):
            raise ValueError("kind must be 'V' or 'Phi'")
        return _aniso_grad(spec, kind, x)
    rn = np.linalg.norm(x, axis=-1)
    g1 = radial_profile(spec, kind, rn, 1)
    safe = np.maximum(rn, _EPS_R)
    out = (g1 / safe)[..., None] * x
    return np.where(rn[..., None] < _EPS_R, 0.0, out)


def potential_laplacian(spec: PotentialSpec, kind: str, x=None, *, r=None):
    """Analytic Laplacian; radial families use g''(r) + (d-1)/r * g'(r).

    At r = 0 the limit d * g''(0) is returned when g'(0) = 0, otherwise the
    point is a true singularity of the Laplacian and an error is raised.
    """
    if r is not None:
        _check_finite(r)
        rn = np.asarray(r, dtype=float)
    else:
        x = np.asarray(x, dtype=float)
        _check_finite(x)
        if not spec.radial:
            if kind not in ("V", "Phi"):
                raise ValueError("kind must be 'V' or 'Phi'")
            return _aniso_laplacian(spec, kind, x)
        rn = np.linalg.norm(x, axis=-1)
    if not spec.radial:
        raise ValueError(f"{spec.family} potentials are not radial")
    g1 = radial_profile(spec, kind, rn, 1)
    g2 = radial_profile(spec, kind, rn, 2)
    at_origin = rn < _EPS_R
    if np.any(at_origin):
        g1_origin = radial_profile(spec, kind, 0.0, 1)
        if abs(float(g1_origin)) > 1e-10:
            raise ValueError(f"{spec.family} {kind}: Laplacian is singular at r=0")
        return np.where(at_origin, spec.dim * g2, g2 + (spec.dim - 1) / np.maximum(rn, _EPS_R) * g1)
    return g2 + (spec.dim - 1) / rn * g1
