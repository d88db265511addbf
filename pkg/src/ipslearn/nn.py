"""MLP potentials trained by minimizing the trajectory-free loss.

Small [in, 64, 64, 64, 1] perceptrons represent V and Phi.  Values, input
gradients and Laplacians are computed EXACTLY by propagating
(value, first, second) directional-derivative jets through each layer; the
training gradient w.r.t. the weights back-propagates through that same jet
pipeline.  Activations must be C^2 (softplus or tanh); ReLU-family functions
are excluded because their second derivatives vanish almost everywhere and
the loss contains Laplacian terms.

Modes:
  radial_v / radial_phi    scalar-input net g(r) evaluated at |x| (Phi's
                           evenness is implicit since it sees only |z|)
  vector_v                 d-dimensional input
  vector_phi_even          Phi(z) = 0.5*(Psi(z) + Psi(-z)) by construction

Training follows stochastic minimization with Adam, per-network cosine
annealed learning rates and independent gradient clipping.  Internally the
hot path runs in float32 (weights are kept in float64 master copies); the
public evaluation API is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .simulate import SnapshotDataset

CHECKPOINT_MAGIC = b"IPSMLP01"

_MODES = ("radial_v", "radial_phi", "vector_v", "vector_phi_even")
_R_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# activations: value and first three derivatives
# ---------------------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _act_derivs(name, z, order: int = 2):
    """(f(z)[, f'(z)[, f''(z)]]) elementwise, up to the requested order."""
    if name == "softplus":
        # one exp serves value and sigmoid: u = exp(-|z|) never overflows
        u = np.exp(-np.abs(z))
        f = np.log1p(u)
        f += np.maximum(z, 0.0)                 # softplus(z) = max(z,0)+log1p(u)
        if order == 0:
            return (f,)
        t = u / (1.0 + u)                       # expit(-|z|)
        s = np.where(z > 0, 1.0 - t, t)         # expit(z)
        if order == 1:
            return f, s
        return f, s, s - s * s
    if name == "tanh":
        t = np.tanh(z)
        if order == 0:
            return (t,)
        f1 = 1.0 - t * t
        if order == 1:
            return t, f1
        return t, f1, -2.0 * t * f1
    raise ValueError(f"unknown activation {name!r} (needs C^2 smoothness)")


def _act_third(name, f1, f2):
    """f'''(z) recovered from cached f'(z), f''(z) without transcendentals."""
    if name == "softplus":
        return f2 * (1.0 - 2.0 * f1)        # f1 is the sigmoid
    # tanh: t^2 = 1 - f1, so f''' = -2 f1 (1 - 3 t^2) = -2 f1 (3 f1 - 2)
    return -2.0 * f1 * (3.0 * f1 - 2.0)


@dataclass
class MlpPotential:
    """Feed-forward scalar potential with exact derivative propagation."""

    weights: list
    biases: list
    activation: str = "softplus"
    mode: str = "radial_v"
    spatial_dim: int = 2

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.activation not in ("softplus", "tanh"):
            raise ValueError("activation must be 'softplus' or 'tanh' (the loss "
                             "takes Laplacians, so C^2 smoothness is required)")

    @property
    def in_dim(self) -> int:
        return 1 if self.mode.startswith("radial") else self.spatial_dim

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self, dtype=None):
        if dtype is None:
            return list(self.weights), list(self.biases)
        return ([w.astype(dtype) for w in self.weights],
                [b.astype(dtype) for b in self.biases])

    def set_params(self, ws, bs):
        self.weights = [np.asarray(w, dtype=np.float64) for w in ws]
        self.biases = [np.asarray(b, dtype=np.float64) for b in bs]

    def copy(self) -> "MlpPotential":
        return MlpPotential([w.copy() for w in self.weights],
                            [b.copy() for b in self.biases],
                            self.activation, self.mode, self.spatial_dim)

    # raw scalar profile (radial modes): g(r), g'(r), g''(r)
    def profile(self, r):
        if not self.mode.startswith("radial"):
            raise ValueError("profile() is only defined for radial modes")
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        A, D, S, _ = _forward_jets(self.weights, self.biases, self.activation,
                                   r[:, None])
        return A[:, 0], D[:, 0, 0], S[:, 0, 0]

    def value(self, x):
        v, _, _ = mlp_value_grad_laplacian(self, x)
        return v


def make_mlp(mode: str, spatial_dim: int = 2, hidden=(64, 64, 64),
             activation: str = "softplus", seed: int = 0) -> MlpPotential:
    """Uniform fan-in initialization, deterministic for a given seed."""
    in_dim = 1 if mode.startswith("radial") else spatial_dim
    sizes = [in_dim, *hidden, 1]
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA11CE)))
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        bs.append(rng.uniform(-bound, bound, size=n_out))
    return MlpPotential(ws, bs, activation, mode, spatial_dim)


# ---------------------------------------------------------------------------
# jet propagation: forward and backward
# ---------------------------------------------------------------------------

def _forward_jets(ws, bs, act, X, need_cache=False):
    """Propagate (value, per-direction first/second derivative) jets.

    X: [P, n_in].  Directions are the n_in coordinate axes.  Returns
    A [P, 1], D [P, n_in, 1], S [P, n_in, 1] at the (linear) output layer,
    plus a cache for the backward pass when requested.
    """
    P, n_in = X.shape
    dtype = X.dtype
    A = X
    D = np.broadcast_to(np.eye(n_in, dtype=dtype), (P, n_in, n_in)).copy()
    S = np.zeros((P, n_in, n_in), dtype=dtype)
    n_layers = len(ws)
    cache = []
    for k, (W, b) in enumerate(zip(ws, bs)):
        Wt = W.T
        h_out = W.shape[0]
        # flatten the direction axis so each product is one large GEMM
        ZA = A @ Wt + b
        ZD = (D.reshape(P * n_in, -1) @ Wt).reshape(P, n_in, h_out)
        ZS = (S.reshape(P * n_in, -1) @ Wt).reshape(P, n_in, h_out)
        last = k == n_layers - 1
        if last:
            if need_cache:
                cache.append((A, D, S, None, None, None, None))
            A, D, S = ZA, ZD, ZS
        else:
            f, f1, f2 = _act_derivs(act, ZA)
            if need_cache:
                cache.append((A, D, S, ZA, ZD, ZS, (f1, f2)))
            A = f
            f1b = f1[:, None, :]
            D = f1b * ZD
            S = ZD * ZD
            S *= f2[:, None, :]
            S += f1b * ZS
    return A, D, S, cache


def _backward_jets(ws, bs, act, cache, gA, gD, gS):
    """Parameter gradients for a jet forward pass.

    gA [P, 1], gD [P, n_in, 1], gS [P, n_in, 1] are the loss gradients w.r.t.
    the network's output value / directional first / second derivatives.
    Returns (gWs, gbs) matching the weight list.
    """
    n_layers = len(ws)
    gWs = [None] * n_layers
    gbs = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        A_in, D_in, S_in, ZA, ZD, ZS, fd = cache[k]
        if fd is None:  # output layer: purely linear
            gZA, gZD, gZS = gA, gD, gS
        else:
            f1, f2 = fd
            f3 = _act_third(act, f1, f2)
            gSZD = gS * ZD
            gZA = (gA * f1
                   + f2 * ((gD * ZD).sum(axis=1) + (gS * ZS).sum(axis=1))
                   + f3 * (gSZD * ZD).sum(axis=1))
            gZD = gD * f1[:, None, :]
            gZD += (2.0 * f2)[:, None, :] * gSZD
            gZS = gS * f1[:, None, :]
        W = ws[k]
        P, n, h_out = gZD.shape
        gZD2 = gZD.reshape(P * n, h_out)
        gZS2 = gZS.reshape(P * n, h_out)
        gW = gZA.T @ A_in
        gW += gZD2.T @ D_in.reshape(P * n, -1)
        gW += gZS2.T @ S_in.reshape(P * n, -1)
        gWs[k] = gW
        gbs[k] = gZA.sum(axis=0)
        if k > 0:
            gA = gZA @ W
            gD = (gZD2 @ W).reshape(P, n, -1)
            gS = (gZS2 @ W).reshape(P, n, -1)
    return gWs, gbs


def _forward_values(ws, bs, act, X, need_cache=False):
    """Plain forward pass (values only)."""
    A = X
    cache = []
    n_layers = len(ws)
    for k, (W, b) in enumerate(zip(ws, bs)):
        ZA = A @ W.T + b
        last = k == n_layers - 1
        if last:
            if need_cache:
                cache.append((A, None))
            A = ZA
        else:
            out = _act_derivs(act, ZA, order=1 if need_cache else 0)
            if need_cache:
                cache.append((A, out[1]))
            A = out[0]
    return A, cache


def _backward_values(ws, cache, gA):
    n_layers = len(ws)
    gWs = [None] * n_layers
    gbs = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        A_in, f1 = cache[k]
        gZA = gA if f1 is None else gA * f1
        gWs[k] = gZA.T @ A_in
        gbs[k] = gZA.sum(axis=0)
        if k > 0:
            gA = gZA @ ws[k]
    return gWs, gbs


# ---------------------------------------------------------------------------
# public evaluation
# ---------------------------------------------------------------------------

def mlp_value_grad_laplacian(net: MlpPotential, x):
    """Exact (value, spatial gradient, Laplacian) at points x [..., d].

    Radial modes evaluate the scalar net at r = |x| and recover the spatial
    quantities from the chain rule and lap f = g'' + (d-1)/r g'; r is floored
    at 1e-8 except that exactly at r = 0 the symmetric limit d*g''(0) is used
    when g'(0) = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar_in = x.ndim == 1
    pts = np.atleast_2d(x)
    d = pts.shape[-1]
    if d != net.spatial_dim:
        raise ValueError(f"points have dim {d}, net expects {net.spatial_dim}")
    ws, bs = net.weights, net.biases

    if net.mode.startswith("radial"):
        r = np.linalg.norm(pts, axis=-1)
        A, D, S, _ = _forward_jets(ws, bs, net.activation, r[:, None])
        g, g1, g2 = A[:, 0], D[:, 0, 0], S[:, 0, 0]
        safe = np.maximum(r, _R_FLOOR)
        grad = (g1 / safe)[:, None] * pts
        lap = g2 + (d - 1) / safe * g1
        at0 = r == 0.0
        if np.any(at0) and np.all(np.abs(g1[at0]) < 1e-6):
            lap = np.where(at0, d * g2, lap)
            grad[at0] = 0.0
        val = g
    elif net.mode == "vector_v":
        A, D, S, _ = _forward_jets(ws, bs, net.activation, pts)
        val = A[:, 0]
        grad = D[:, :, 0]
        lap = S[:, :, 0].sum(axis=1)
    else:  # vector_phi_even
        both = np.concatenate([pts, -pts], axis=0)
        A, D, S, _ = _forward_jets(ws, bs, net.activation, both)
        n = pts.shape[0]
        val = 0.5 * (A[:n, 0] + A[n:, 0])
        grad = 0.5 * (D[:n, :, 0] - D[n:, :, 0])
        lap = 0.5 * (S[:n, :, 0].sum(axis=1) + S[n:, :, 0].sum(axis=1))
    if scalar_in:
        return float(val[0]), grad[0], float(lap[0])
    shape = x.shape[:-1]
    return val.reshape(shape), grad.reshape(*shape, d), lap.reshape(shape)


# ---------------------------------------------------------------------------
# loss on snapshot pairs
# ---------------------------------------------------------------------------

class _PairIndex:
    """Cached index arrays for the particle-pair bookkeeping of one N."""

    def __init__(self, N):
        self.N = N
        self.iu, self.ju = np.triu_indices(N, k=1)
        ordered = [(i, j) for i in range(N) for j in range(N) if j != i]
        self.io = np.array([p[0] for p in ordered])
        self.jo = np.array([p[1] for p in ordered])
        lookup = {p: k for k, p in enumerate(ordered)}
        self.transpose = np.array([lookup[(j, i)] for (i, j) in ordered])


def _net_terms_l(net, X, idx, dtype, need_cache):
    """Forward pass of one network on the left snapshots of a batch.

    Returns a dict of the quantities entering the loss plus caches/context
    for the backward pass.
    """
    ws, bs = net.params(dtype)
    B, N, d = X.shape
    ctx = {"ws": ws, "bs": bs, "net": net, "X": X, "idx": idx}
    if net.mode in ("radial_v", "vector_v"):
        flat = X.reshape(B * N, d)
        if net.mode == "radial_v":
            r = np.sqrt((flat * flat).sum(axis=1))
            A, D, S, cache = _forward_jets(ws, bs, net.activation, r[:, None],
                                           need_cache)
            safe = np.maximum(r, _R_FLOOR)
            g1 = D[:, 0, 0]
            grad = ((g1 / safe)[:, None] * flat).reshape(B, N, d)
            lap = (S[:, 0, 0] + (d - 1) / safe * g1).reshape(B, N)
            ctx.update(cache=cache, r=r, safe=safe, flat=flat)
        else:
            A, D, S, cache = _forward_jets(ws, bs, net.activation, flat, need_cache)
            grad = D[:, :, 0].reshape(B, N, d)
            lap = S[:, :, 0].sum(axis=1).reshape(B, N)
            ctx.update(cache=cache)
        val = A[:, 0].reshape(B, N)
        return dict(val=val, grad=grad, lap=lap), ctx

    if net.mode == "radial_phi":
        Z = X[:, idx.iu] - X[:, idx.ju]                   # [B, P, d]
        r = np.sqrt((Z * Z).sum(axis=-1))
        rf = r.reshape(-1)
        A, D, S, cache = _forward_jets(ws, bs, net.activation, rf[:, None],
                                       need_cache)
        P = idx.iu.size
        g = A[:, 0].reshape(B, P)
        g1 = D[:, 0, 0].reshape(B, P)
        g2 = S[:, 0, 0].reshape(B, P)
        safe = np.maximum(r, _R_FLOOR)
        f = g1 / safe                                     # symmetric pair factor
        Fm = np.zeros((B, N, N), dtype=dtype)
        Fm[:, idx.iu, idx.ju] = f
        Fm[:, idx.ju, idx.iu] = f
        pairforce = (X * Fm.sum(axis=2)[..., None]
                     - np.einsum("bij,bjd->bid", Fm, X)) / N
        lap_pair = g2 + (d - 1) / safe * g1
        diff_term = 2.0 * lap_pair.sum(axis=1) / N**2     # [B]
        energy = g.sum(axis=1) / N**2                     # (1/(2N^2)) * 2 * sum
        ctx.update(cache=cache, r=r, safe=safe, Z=Z, g1=g1)
        return dict(pairforce=pairforce, diff=diff_term, energy=energy), ctx

    # vector_phi_even
    Z = X[:, idx.io] - X[:, idx.jo]                       # [B, Po, d]
    Po = idx.io.size
    flat = Z.reshape(B * Po, d)
    A, D, S, cache = _forward_jets(ws, bs, net.activation, flat, need_cache)
    psi = A[:, 0].reshape(B, Po)
    dpsi = D[:, :, 0].reshape(B, Po, d)
    lpsi = S[:, :, 0].sum(axis=1).reshape(B, Po)
    tp = idx.transpose
    grad_phi = 0.5 * (dpsi - dpsi[:, tp])                 # grad Phi at ordered pairs
    lap_phi = 0.5 * (lpsi + lpsi[:, tp])
    pairforce = grad_phi.reshape(B, N, N - 1, d).sum(axis=2) / N
    diff_term = lap_phi.sum(axis=1) / N**2
    energy = psi.sum(axis=1) / (2 * N**2)                 # sum Phi == sum Psi
    ctx.update(cache=cache)
    return dict(pairforce=pairforce, diff=diff_term, energy=energy), ctx


def _net_values_r(net, X, idx, dtype, need_cache):
    """Value-only forward on the right snapshots (enters only E_f)."""
    ws, bs = net.params(dtype)
    B, N, d = X.shape
    if net.mode in ("radial_v", "vector_v"):
        flat = X.reshape(B * N, d)
        inp = (np.sqrt((flat * flat).sum(axis=1))[:, None]
               if net.mode == "radial_v" else flat)
        A, cache = _forward_values(ws, bs, net.activation, inp, need_cache)
        return A[:, 0].reshape(B, N).sum(axis=1) / N, cache
    if net.mode == "radial_phi":
        Z = X[:, idx.iu] - X[:, idx.ju]
        r = np.sqrt((Z * Z).sum(axis=-1)).reshape(-1)
        A, cache = _forward_values(ws, bs, net.activation, r[:, None], need_cache)
        return A[:, 0].reshape(X.shape[0], -1).sum(axis=1) / N**2, cache
    Z = (X[:, idx.io] - X[:, idx.jo]).reshape(-1, d)
    A, cache = _forward_values(ws, bs, net.activation, Z, need_cache)
    return A[:, 0].reshape(X.shape[0], -1).sum(axis=1) / (2 * N**2), cache


def selftest_nn_loss(netV: MlpPotential, netPhi: MlpPotential, batch,
                     sigma: float, dt: float) -> float:
    """Trajectory-free loss of a batch of snapshot pairs.

    batch is (X_left, X_right), each [B, N, d].  Mean over the batch of
    0.5*J_diss*dt - (sigma^2/2)*J_diff*dt + (E_f(right) - E_f(left)).
    """
    Xl, Xr = (np.asarray(a, dtype=np.float64) for a in batch)
    idx = _PairIndex(Xl.shape[1])
    v_terms, _ = _net_terms_l(netV, Xl, idx, np.float64, False)
    p_terms, _ = _net_terms_l(netPhi, Xl, idx, np.float64, False)
    ev_r, _ = _net_values_r(netV, Xr, idx, np.float64, False)
    ep_r, _ = _net_values_r(netPhi, Xr, idx, np.float64, False)
    drift = v_terms["grad"] + p_terms["pairforce"]
    j_diss = (drift * drift).sum(axis=(1, 2)) / Xl.shape[1]
    j_diff = v_terms["lap"].mean(axis=1) + p_terms["diff"]
    e_l = v_terms["val"].mean(axis=1) + p_terms["energy"]
    e_r = ev_r + ep_r
    loss = 0.5 * j_diss * dt - 0.5 * sigma**2 * j_diff * dt + (e_r - e_l)
    out = float(loss.mean())
    if not np.isfinite(out):
        raise FloatingPointError("non-finite self-test loss on batch")
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_V: float = 1e-4
    lr_Phi: float = 5e-4
    epochs_max: int = 200
    eta_min_ratio: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 256
    eval_every: int = 5
    patience: int = 20
    seed: int = 42
    val_fraction: float = 0.1
    val_pair_cap: int = 20000
    max_steps_per_epoch: int | None = None  # None: full shuffle every epoch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.lr_V, self.lr_Phi) <= 0 or self.batch_size < 1:
            raise ValueError("learning rates must be positive and batch size >= 1")


class _Adam:
    def __init__(self, ws, bs, cfg: TrainConfig):
        self.m_w = [np.zeros_like(w) for w in ws]
        self.v_w = [np.zeros_like(w) for w in ws]
        self.m_b = [np.zeros_like(b) for b in bs]
        self.v_b = [np.zeros_like(b) for b in bs]
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.t = 0

    def step(self, ws, bs, gws, gbs, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(ws + bs, gws + gbs,
                              self.m_w + self.m_b, self.v_w + self.v_b):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_gradients(gws, gbs, clip_norm):
    total = 0.0
    for g in gws + gbs:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in gws + gbs:
            g *= scale
    return norm


def _cosine_lr(lr0, eta_min_ratio, epoch, horizon):
    eta_min = eta_min_ratio * lr0
    if epoch >= horizon:
        return eta_min
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + np.cos(np.pi * epoch / horizon))


def _loss_and_grads(netV, netPhi, Xl, Xr, sigma, dt, idx, dtype):
    """Batch loss and parameter gradients for both networks."""
    B, N, d = Xl.shape
    v_terms, v_ctx = _net_terms_l(netV, Xl, idx, dtype, True)
    p_terms, p_ctx = _net_terms_l(netPhi, Xl, idx, dtype, True)
    ev_r, v_rcache = _net_values_r(netV, Xr, idx, dtype, True)
    ep_r, p_rcache = _net_values_r(netPhi, Xr, idx, dtype, True)

    drift = v_terms["grad"] + p_terms["pairforce"]
    j_diss = (drift * drift).sum(axis=(1, 2)) / N
    j_diff = v_terms["lap"].mean(axis=1) + p_terms["diff"]
    e_l = v_terms["val"].mean(axis=1) + p_terms["energy"]
    e_r = ev_r + ep_r
    loss = float((0.5 * j_diss * dt - 0.5 * sigma**2 * j_diff * dt
                  + (e_r - e_l)).mean())

    # seeds on network outputs
    gdrift = (dt / (B * N)) * drift                       # [B, N, d]
    gval_l = -1.0 / (B * N)
    glap = -0.5 * sigma**2 * dt / (B * N)

    gV = _backward_v(v_ctx, gdrift, gval_l, glap, Xl, dtype)
    gP = _backward_phi(p_ctx, gdrift, B, N, d, sigma, dt, dtype)
    gVr = _backward_values_r(netV, v_rcache, Xr, idx, dtype)
    gPhir = _backward_values_r(netPhi, p_rcache, Xr, idx, dtype)
    gV = [a + b for a, b in zip(gV[0], gVr[0])], [a + b for a, b in zip(gV[1], gVr[1])]
    gP = [a + b for a, b in zip(gP[0], gPhir[0])], [a + b for a, b in zip(gP[1], gPhir[1])]
    return loss, gV, gP


def _backward_v(ctx, gdrift, gval_l, glap, Xl, dtype):
    net = ctx["net"]
    B, N, d = Xl.shape
    gv = np.full((B * N, 1), gval_l, dtype=dtype)
    if net.mode == "radial_v":
        safe = ctx["safe"]
        flat = ctx["flat"]
        gflat = gdrift.reshape(B * N, d)
        gg1 = (gflat * flat).sum(axis=1) / safe + glap * (d - 1) / safe
        gg2 = np.full(B * N, glap, dtype=dtype)
        gD = gg1[:, None, None]
        gS = gg2[:, None, None]
        return _backward_jets(ctx["ws"], ctx["bs"], net.activation, ctx["cache"],
                              gv, gD, gS)
    gD = gdrift.reshape(B * N, d, 1).astype(dtype, copy=False)
    gS = np.full((B * N, d, 1), glap, dtype=dtype)
    return _backward_jets(ctx["ws"], ctx["bs"], net.activation, ctx["cache"],
                          gv, gD, gS)


def _backward_phi(ctx, gdrift, B, N, d, sigma, dt, dtype):
    net = ctx["net"]
    idx = ctx["idx"]
    glap_pair = -0.5 * sigma**2 * dt / B
    gval_l = -1.0 / B
    if net.mode == "radial_phi":
        Z = ctx["Z"]
        safe = ctx["safe"]
        g1 = ctx["g1"]
        gdiff = (gdrift[:, idx.iu] - gdrift[:, idx.ju])   # [B, P, d]
        gf = (gdiff * Z).sum(axis=-1) / N                 # dloss/d f_u
        gg1 = gf / safe + glap_pair * (2.0 / N**2) * (d - 1) / safe
        gg2 = np.full_like(gg1, glap_pair * 2.0 / N**2)
        # energy term is (1/N^2) * sum over unordered pairs of g
        gval = np.full_like(gg1, gval_l / N**2)
        return _backward_jets(ctx["ws"], ctx["bs"], net.activation, ctx["cache"],
                              gval.reshape(-1, 1),
                              gg1.reshape(-1, 1, 1), gg2.reshape(-1, 1, 1))
    # vector_phi_even at ordered pairs
    tp = idx.transpose
    Po = idx.io.size
    g_gradphi = np.repeat(gdrift[:, :, None, :], N - 1, axis=2).reshape(B, Po, d) / N
    g_lapphi = np.full((B, Po), glap_pair / N**2, dtype=dtype)
    g_valphi = np.full((B, Po), gval_l / (2 * N**2), dtype=dtype)
    g_psi = 0.5 * (g_valphi + g_valphi[:, tp])
    g_dpsi = 0.5 * (g_gradphi - g_gradphi[:, tp])
    g_lpsi = 0.5 * (g_lapphi + g_lapphi[:, tp])
    gA = g_psi.reshape(-1, 1)
    gD = g_dpsi.reshape(B * Po, d, 1)
    gS = np.repeat(g_lpsi.reshape(-1, 1), d, axis=1)[:, :, None]
    return _backward_jets(ctx["ws"], ctx["bs"], net.activation, ctx["cache"],
                          gA, gD, gS)


def _backward_values_r(net, cache, Xr, idx, dtype):
    """Backward of the right-endpoint value pass (enters only +E_f(right))."""
    ws, _ = net.params(dtype)
    B, N, _ = Xr.shape
    if net.mode in ("radial_v", "vector_v"):
        gA = np.full((B * N, 1), 1.0 / (B * N), dtype=dtype)
    elif net.mode == "radial_phi":
        gA = np.full((B * idx.iu.size, 1), 1.0 / (B * N**2), dtype=dtype)
    else:
        gA = np.full((B * idx.io.size, 1), 1.0 / (2 * B * N**2), dtype=dtype)
    return _backward_values(ws, cache, gA)


def train(ds: SnapshotDataset, cfg: TrainConfig, sigma: float | None = None,
          dt: float | None = None, mode: str | None = None,
          netV: MlpPotential | None = None, netPhi: MlpPotential | None = None,
          activation: str = "softplus", verbose: bool = False):
    """Minimize the trajectory-free loss over MLP potentials.

    Each epoch shuffles all M*L consecutive snapshot pairs into mini-batches;
    the two networks get independent cosine-annealed Adam updates with
    independent gradient clipping.  A held-out fraction of ensembles provides
    the validation loss used for early stopping with best-model restoration.
    Returns (netV, netPhi, history) with one history row per epoch.
    """
    X = ds.data
    M, Lp1, N, d = X.shape
    L = Lp1 - 1
    sigma = ds.sigma if sigma is None else sigma
    dt = ds.dt_obs if dt is None else dt
    if mode is None:
        mode = "radial" if ds.config.spec.radial else "vector"
    act_v, act_phi = ((activation, activation) if isinstance(activation, str)
                      else activation)
    if netV is None:
        netV = make_mlp("radial_v" if mode == "radial" else "vector_v",
                        spatial_dim=d, activation=act_v, seed=cfg.seed)
    if netPhi is None:
        netPhi = make_mlp("radial_phi" if mode == "radial" else "vector_phi_even",
                          spatial_dim=d, activation=act_phi, seed=cfg.seed + 1)

    n_val = max(1, int(round(cfg.val_fraction * M))) if M > 1 else 0
    train_m = M - n_val
    idx = _PairIndex(N)
    dtype = np.float32

    rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 0xEF0C)))
    pairs = np.stack(np.meshgrid(np.arange(train_m), np.arange(L),
                                 indexing="ij"), axis=-1).reshape(-1, 2)
    val_pairs = np.stack(np.meshgrid(np.arange(train_m, M), np.arange(L),
                                     indexing="ij"), axis=-1).reshape(-1, 2)
    if val_pairs.shape[0] > cfg.val_pair_cap:
        sel = np.random.default_rng(cfg.seed + 7).choice(
            val_pairs.shape[0], size=cfg.val_pair_cap, replace=False)
        val_pairs = val_pairs[sel]

    wsV, bsV = netV.params()
    wsP, bsP = netPhi.params()
    adamV = _Adam(wsV, bsV, cfg)
    adamP = _Adam(wsP, bsP, cfg)
    workV = MlpPotential([w.astype(dtype) for w in wsV],
                         [b.astype(dtype) for b in bsV],
                         netV.activation, netV.mode, netV.spatial_dim)
    workP = MlpPotential([w.astype(dtype) for w in wsP],
                         [b.astype(dtype) for b in bsP],
                         netPhi.activation, netPhi.mode, netPhi.spatial_dim)

    def val_loss():
        if val_pairs.shape[0] == 0:
            return np.nan
        total = 0.0
        for s in range(0, val_pairs.shape[0], 4096):
            chunk = val_pairs[s:s + 4096]
            Xl = X[chunk[:, 0], chunk[:, 1]].astype(dtype)
            Xr = X[chunk[:, 0], chunk[:, 1] + 1].astype(dtype)
            total += selftest_nn_loss(workV, workP, (Xl, Xr), sigma, dt) * len(chunk)
        return total / val_pairs.shape[0]

    history = []
    best = (np.inf, None, None)
    stale = 0
    n_batches = max(1, pairs.shape[0] // cfg.batch_size)
    if cfg.max_steps_per_epoch is not None:
        n_batches = min(n_batches, cfg.max_steps_per_epoch)
    for epoch in range(cfg.epochs_max):
        lrV = _cosine_lr(cfg.lr_V, cfg.eta_min_ratio, epoch, cfg.epochs_max)
        lrP = _cosine_lr(cfg.lr_Phi, cfg.eta_min_ratio, epoch, cfg.epochs_max)
        order = rng.permutation(pairs.shape[0])
        epoch_loss = 0.0
        for bi in range(n_batches):
            sel = pairs[order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]]
            Xl = X[sel[:, 0], sel[:, 1]].astype(dtype)
            Xr = X[sel[:, 0], sel[:, 1] + 1].astype(dtype)
            loss, (gwV, gbV), (gwP, gbP) = _loss_and_grads(
                workV, workP, Xl, Xr, sigma, dt, idx, dtype)
            if not np.isfinite(loss) or abs(loss) > 1e6:
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, batch {bi} (loss={loss})")
            epoch_loss += loss
            _clip_gradients(gwV, gbV, cfg.clip_norm)
            _clip_gradients(gwP, gbP, cfg.clip_norm)
            adamV.step(wsV, bsV, [g.astype(np.float64) for g in gwV],
                       [g.astype(np.float64) for g in gbV], lrV)
            adamP.step(wsP, bsP, [g.astype(np.float64) for g in gwP],
                       [g.astype(np.float64) for g in gbP], lrP)
            for w64, w32 in zip(wsV + bsV, workV.weights + workV.biases):
                w32[...] = w64.astype(dtype)
            for w64, w32 in zip(wsP + bsP, workP.weights + workP.biases):
                w32[...] = w64.astype(dtype)
        epoch_loss /= n_batches

        vl = np.nan
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs_max - 1:
            vl = val_loss()
            if vl < best[0] - 1e-12:
                best = (vl, [w.copy() for w in wsV] + [b.copy() for b in bsV],
                        [w.copy() for w in wsP] + [b.copy() for b in bsP])
                stale = 0
            else:
                stale += 1
        history.append(dict(epoch=epoch, loss=epoch_loss, lr_V=lrV, lr_Phi=lrP,
                            val_loss=float(vl)))
        if verbose:
            print(f"epoch {epoch}: loss={epoch_loss:.6g} val={vl:.6g}")
        if stale >= cfg.patience:
            break

    if best[1] is not None:
        nl = len(wsV)
        netV.set_params(best[1][:nl], best[1][nl:])
        netPhi.set_params(best[2][:nl], best[2][nl:])
    else:
        netV.set_params(wsV, bsV)
        netPhi.set_params(wsP, bsP)
    return netV, netPhi, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: MlpPotential, path) -> None:
    header = json.dumps({
        "activation": net.activation, "mode": net.mode,
        "spatial_dim": net.spatial_dim,
        "shapes": [list(w.shape) for w in net.weights],
    }).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for pair in zip(net.weights, net.biases) for a in pair)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(blob)


def load_checkpoint(path) -> MlpPotential:
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an MLP checkpoint")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
        ws, bs = [], []
        for shape in header["shapes"]:
            n_out, n_in = shape
            w = np.fromfile(f, dtype="<f8", count=n_out * n_in)
            b = np.fromfile(f, dtype="<f8", count=n_out)
            if w.size < n_out * n_in or b.size < n_out:
                raise ValueError(f"{path}: truncated weight blob")
            ws.append(w.reshape(n_out, n_in))
            bs.append(b)
    return MlpPotential(ws, bs, header["activation"], header["mode"],
                        header["spatial_dim"])
