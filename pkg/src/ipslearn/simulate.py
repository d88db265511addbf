"""Ensemble simulation, label stripping, and the snapshot file format.

Trajectories are generated by Euler-Maruyama.  In the "gap" protocol one fine
trajectory per ensemble is advanced at step dt_fine and every
(dt_obs/dt_fine)-th state is recorded; in "zerogap" the chain is advanced
directly at dt_obs, so the recorded series IS the discrete-time model.

Randomness is drawn from one PCG64 substream per ensemble, seeded by
SeedSequence((seed, m)); normals use numpy's standard_normal (ziggurat).
Because each ensemble owns its stream, simulating M' < M ensembles reproduces
the first M' ensembles of a larger run bit-for-bit within this implementation.
Cross-implementation bit-exactness is not a contract; statistical acceptance
tests are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace

import numpy as np

from .models import PotentialSpec, radial_profile, potential_grad

FORMAT_VERSION = 1
_MAGIC = b"IPSNAP01"
_BLOWUP_LIMIT = 1e6
_STEP_CHUNK = 100  # fine steps per noise block; fixed so runs are reproducible


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines one simulated ensemble dataset."""

    spec: PotentialSpec
    N: int = 10
    M: int = 100
    T: float = 1.0
    sigma: float = 1.0
    dt_fine: float = 1e-3
    dt_obs: float = 1e-2
    protocol: str = "gap"  # "gap" or "zerogap"
    seed: int = 42
    init_std: float = 0.5

    def __post_init__(self):
        if self.protocol not in ("gap", "zerogap"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.protocol == "zerogap":
            if abs(self.dt_obs - self.dt_fine) > 1e-12 * self.dt_obs:
                raise ValueError("zerogap requires dt_obs == dt_fine")
        else:
            stride = self.dt_obs / self.dt_fine
            if abs(stride - round(stride)) > 1e-9:
                raise ValueError("dt_obs must be an integer multiple of dt_fine")
        L = self.T / self.dt_obs
        if L < 1 or abs(L - round(L)) > 1e-9:
            raise ValueError("T/dt_obs must be a positive integer")

    @property
    def stride(self) -> int:
        return int(round(self.dt_obs / self.dt_fine))

    @property
    def L(self) -> int:
        return int(round(self.T / self.dt_obs))

    @property
    def d(self) -> int:
        return self.spec.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        d = dict(d)
        spec = PotentialSpec.from_dict(d.pop("spec"))
        return SimConfig(spec=spec, **{k: d[k] for k in
                                       ("N", "M", "T", "sigma", "dt_fine", "dt_obs",
                                        "protocol", "seed", "init_std")})


@dataclass
class SnapshotDataset:
    """Snapshot array [M, L+1, N, d] plus the config that generated it.

    When labeled is False the particle axis carries no trajectory meaning:
    each (m, l) slice has been independently permuted.
    """

    data: np.ndarray
    config: SimConfig
    labeled: bool = True
    perm_seed: int | None = None
    provenance: dict | None = None

    def __post_init__(self):
        expected = (self.config.M, self.config.L + 1, self.config.N, self.config.d)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} != header shape {expected}")

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> int:
        return self.data.shape[1] - 1

    @property
    def N(self) -> int:
        return self.data.shape[2]

    @property
    def d(self) -> int:
        return self.data.shape[3]

    @property
    def dt_obs(self) -> float:
        return self.config.dt_obs

    @property
    def sigma(self) -> float:
        return self.config.sigma

    def subsample(self, m: int) -> "SnapshotDataset":
        """First m ensembles as a view (no copy)."""
        if m > self.M:
            raise ValueError("cannot subsample beyond M")
        return SnapshotDataset(self.data[:m], replace(self.config, M=m),
                               labeled=self.labeled, perm_seed=self.perm_seed)

    def substride(self, k: int) -> "SnapshotDataset":
        """Keep every k-th snapshot, multiplying dt_obs by k (gap-regime view)."""
        if self.L % k != 0:
            raise ValueError("L must be divisible by the substride")
        cfg = replace(self.config, dt_obs=self.config.dt_obs * k)
        return SnapshotDataset(self.data[:, ::k], cfg, labeled=self.labeled,
                               perm_seed=self.perm_seed)


def _rng_for(seed: int, m: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(m))))


def drift(spec: PotentialSpec, X: np.ndarray) -> np.ndarray:
    """Total drift -grad V(X_i) - (1/N) sum_{j!=i} grad Phi(X_i - X_j).

    X has shape [..., N, d].  For singular interactions the pair distance is
    clamped at r_safe inside the force law (magnitude from the clamped
    distance, direction from the actual displacement).
    """
    N = X.shape[-2]
    out = -potential_grad(spec, "V", X)
    if N == 1:
        return out
    if spec.radial:
        diffs = X[..., :, None, :] - X[..., None, :, :]
        r = np.sqrt(np.einsum("...ijd,...ijd->...ij", diffs, diffs))
        g1 = radial_profile(spec, "Phi", r, 1)  # clamping handled by the profile
        f = g1 / np.maximum(r, 1e-12)
        f[np.broadcast_to(r < 1e-12, f.shape)] = 0.0  # diagonal and exact overlaps
        rowsum = f.sum(axis=-1)
        pair = X * rowsum[..., None] - np.einsum("...ij,...jd->...id", f, X)
        out -= pair / N
    else:
        diffs = X[..., :, None, :] - X[..., None, :, :]
        g = potential_grad(spec, "Phi", diffs)
        idx = np.arange(N)
        g[..., idx, idx, :] = 0.0
        out -= g.sum(axis=-2) / N
    return out


def simulate(config: SimConfig) -> SnapshotDataset:
    """Euler-Maruyama ensembles, recorded under the configured protocol.

    Returns a labeled dataset (particle index i is the trajectory identity).
    Raises on blow-up (any coordinate beyond 1e6), naming ensemble and step.
    """
    M, N, d = config.M, config.N, config.d
    stride = 1 if config.protocol == "zerogap" else config.stride
    n_steps = config.L * stride
    dt = config.dt_fine if config.protocol == "gap" else config.dt_obs
    sqdt = np.sqrt(dt)
    spec = config.spec

    gens = [_rng_for(config.seed, m) for m in range(M)]
    X = np.empty((M, N, d))
    for m, g in enumerate(gens):
        X[m] = config.init_std * g.standard_normal((N, d))

    out = np.empty((M, config.L + 1, N, d))
    out[:, 0] = X

    noise = np.empty((M, _STEP_CHUNK, N, d))
    step = 0
    while step < n_steps:
        chunk = min(_STEP_CHUNK, n_steps - step)
        for m, g in enumerate(gens):
            noise[m, :chunk] = g.standard_normal((chunk, N, d))
        for k in range(chunk):
            X = X + drift(spec, X) * dt + config.sigma * sqdt * noise[:, k]
            step += 1
            if step % stride == 0:
                out[:, step // stride] = X
        bad = ~np.isfinite(X) | (np.abs(X) > _BLOWUP_LIMIT)
        if bad.any():
            m_bad = int(np.argwhere(bad.any(axis=(1, 2)))[0, 0])
            raise FloatingPointError(
                f"simulation blow-up in ensemble m={m_bad} at fine step {step}")
    return SnapshotDataset(out, config, labeled=True)


def strip_labels(ds: SnapshotDataset, seed: int) -> SnapshotDataset:
    """Destroy trajectory information: an independent uniform permutation of
    the particle axis at every (m, l), drawn from the given seed."""
    if not ds.labeled:
        raise ValueError("dataset is already unlabeled")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x9E3779B9)))
    out = np.empty_like(ds.data)
    M, Lp1, N, _ = ds.data.shape
    for m in range(M):
        for l in range(Lp1):
            out[m, l] = ds.data[m, l, rng.permutation(N)]
    return SnapshotDataset(out, ds.config, labeled=False, perm_seed=int(seed))


# ---------------------------------------------------------------------------
# file format: magic, 8-byte little-endian header length, JSON header, raw
# float64 little-endian C-order array
# ---------------------------------------------------------------------------

def _header_dict(ds: SnapshotDataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model": ds.config.spec.family,
        "config": ds.config.to_dict(),
        "labeled": ds.labeled,
        "perm_seed": ds.perm_seed,
        "shape": list(ds.data.shape),
        "provenance": ds.provenance or {},
    }


def write_dataset(ds: SnapshotDataset, path) -> None:
    header = json.dumps(_header_dict(ds)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(np.ascontiguousarray(ds.data, dtype="<f8").tobytes())


def read_header(path) -> dict:
    """Metadata only; does not load the array."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a snapshot dataset (bad magic)")
        raw_len = f.read(8)
        if len(raw_len) < 8:
            raise ValueError(f"{path}: truncated header length field")
        hlen = int.from_bytes(raw_len, "little")
        if hlen <= 0 or hlen > 10_000_000:
            raise ValueError(f"{path}: corrupt header length {hlen}")
        blob = f.read(hlen)
        if len(blob) < hlen:
            raise ValueError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: unparseable header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version "
                         f"{header.get('format_version')}")
    return header


def read_dataset(path) -> SnapshotDataset:
    header = read_header(path)
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    with open(path, "rb") as f:
        f.read(8)
        hlen = int.from_bytes(f.read(8), "little")
        f.read(hlen)
        data = np.fromfile(f, dtype="<f8", count=count)
    if data.size != count:
        raise ValueError(f"{path}: truncated data block "
                         f"(expected {count} values, got {data.size})")
    config = SimConfig.from_dict(header["config"])
    ds = SnapshotDataset(data.reshape(shape).astype(np.float64, copy=False), config,
                         labeled=bool(header["labeled"]),
                         perm_seed=header.get("perm_seed"),
                         provenance=header.get("provenance") or None)
    return ds
