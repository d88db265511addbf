import numpy as np
import pytest

import ipslearn as ips
from ipslearn.simulate import read_header


def test_zero_drift_zero_noise_is_constant():
    spec = ips.PotentialSpec("reference", dict(alpha=(0.0, 0.0), beta=(0.0, 0.0),
                                               centers=(0.75, 1.5), widths=(0.125, 0.25)))
    cfg = ips.SimConfig(spec=spec, N=4, M=3, T=0.1, sigma=0.0, dt_fine=1e-2,
                        dt_obs=1e-2, protocol="zerogap", seed=1)
    ds = ips.simulate(cfg)
    for l in range(ds.L + 1):
        assert np.array_equal(ds.data[:, l], ds.data[:, 0])


def test_ou_moments_match_closed_form():
    # N=1 quadratic confinement: an Ornstein-Uhlenbeck process with rate k=2
    spec = ips.singularity_spec()
    kappa = spec.params["k"]
    cfg = ips.SimConfig(spec=spec, N=1, M=10_000, T=1.0, sigma=1.0, dt_fine=1e-3,
                        dt_obs=1e-1, protocol="gap", seed=42, init_std=0.5)
    ds = ips.simulate(cfg)
    XT = ds.data[:, -1, 0, :]
    se = XT.std() / np.sqrt(len(XT))
    assert np.abs(XT.mean(axis=0)).max() < 3 * se
    var_exact = 0.25 * np.exp(-2 * kappa) + (1 - np.exp(-2 * kappa)) / (2 * kappa)
    assert np.abs(XT.var(axis=0) / var_exact - 1).max() < 0.05


def test_snapshot_count_gap_protocol():
    cfg = ips.SimConfig(spec=ips.reference_spec(), N=3, M=2, T=1.0, sigma=1.0,
                        dt_fine=1e-3, dt_obs=1e-2, protocol="gap", seed=0)
    ds = ips.simulate(cfg)
    assert ds.data.shape[1] == 101


def test_determinism_and_subsample_consistency():
    spec = ips.reference_spec()
    mk = lambda M: ips.SimConfig(spec=spec, N=4, M=M, T=0.05, sigma=1.0,
                                 dt_fine=1e-2, dt_obs=1e-2, protocol="zerogap", seed=7)
    a = ips.simulate(mk(30))
    b = ips.simulate(mk(30))
    assert np.array_equal(a.data, b.data)
    c = ips.simulate(mk(8))
    assert np.array_equal(c.data, a.data[:8])


def test_stride_consistency():
    """Gap recording equals striding the fine-step record."""
    spec = ips.reference_spec()
    fine = ips.SimConfig(spec=spec, N=4, M=5, T=0.1, sigma=1.0, dt_fine=1e-2,
                         dt_obs=1e-2, protocol="zerogap", seed=9)
    gap = ips.SimConfig(spec=spec, N=4, M=5, T=0.1, sigma=1.0, dt_fine=1e-2,
                        dt_obs=5e-2, protocol="gap", seed=9)
    ds_fine = ips.simulate(fine)
    ds_gap = ips.simulate(gap)
    assert np.array_equal(ds_gap.data, ds_fine.data[:, ::5])


def test_blowup_reports_ensemble_and_step():
    # inverted double-well with huge outward drift and no confinement blows up
    spec = ips.PotentialSpec("reference", dict(alpha=(0.0, -500.0), beta=(0.0, 0.0),
                                               centers=(0.75, 1.5), widths=(0.125, 0.25)))
    cfg = ips.SimConfig(spec=spec, N=2, M=2, T=1.0, sigma=0.0, dt_fine=1e-2,
                        dt_obs=1e-2, protocol="zerogap", seed=3, init_std=1.0)
    with pytest.raises(FloatingPointError, match=r"m=\d+ at fine step \d+"):
        ips.simulate(cfg)


def test_config_validation():
    spec = ips.reference_spec()
    with pytest.raises(ValueError):
        ips.SimConfig(spec=spec, dt_fine=3e-3, dt_obs=1e-2)  # not a multiple
    with pytest.raises(ValueError):
        ips.SimConfig(spec=spec, protocol="zerogap", dt_fine=1e-3, dt_obs=1e-2)
    with pytest.raises(ValueError):
        ips.SimConfig(spec=spec, T=1.0, dt_obs=0.3, dt_fine=0.3, protocol="zerogap")
    with pytest.raises(ValueError):
        ips.SimConfig(spec=spec, sigma=-1.0)


class TestStripLabels:
    def test_single_particle_identity(self, rng):
        cfg = ips.SimConfig(spec=ips.singularity_spec(), N=1, M=4, T=0.05, sigma=1.0,
                            dt_fine=1e-2, dt_obs=1e-2, protocol="zerogap", seed=2)
        ds = ips.simulate(cfg)
        stripped = ips.strip_labels(ds, seed=5)
        assert np.array_equal(stripped.data, ds.data)

    def test_row_multisets_preserved(self, small_reference_ds):
        stripped = ips.strip_labels(small_reference_ds, seed=5)
        a = np.sort(small_reference_ds.data, axis=2)
        b = np.sort(stripped.data, axis=2)
        assert np.array_equal(a, b)
        assert not stripped.labeled
        assert stripped.perm_seed == 5

    def test_snapshot_moments_unchanged(self, small_reference_ds):
        stripped = ips.strip_labels(small_reference_ds, seed=6)
        assert np.allclose(small_reference_ds.data.mean(axis=2), stripped.data.mean(axis=2))

    def test_permutation_frequencies_uniform(self):
        """Each rank lands in slot 0 with frequency 1/N over many (m, l)."""
        cfg = ips.SimConfig(spec=ips.reference_spec(), N=6, M=100, T=0.2, sigma=1.0,
                            dt_fine=2e-2, dt_obs=2e-2, protocol="zerogap", seed=8)
        ds = ips.simulate(cfg)
        stripped = ips.strip_labels(ds, seed=1)
        N = 6
        trials = ds.M * (ds.L + 1)
        occupancy = np.zeros(N)
        for m in range(ds.M):
            for l in range(ds.L + 1):
                ranks = np.argsort(np.argsort(stripped.data[m, l, :, 0]))
                occupancy[ranks[0]] += 1
        freq = occupancy / trials
        assert np.abs(freq - 1 / N).max() < 4 / np.sqrt(trials * N)

    def test_double_strip_rejected(self, small_reference_ds):
        stripped = ips.strip_labels(small_reference_ds, seed=5)
        with pytest.raises(ValueError):
            ips.strip_labels(stripped, seed=6)


class TestDatasetIO:
    def test_roundtrip(self, small_reference_ds, tmp_path):
        path = tmp_path / "ds.ips"
        ips.write_dataset(small_reference_ds, path)
        back = ips.read_dataset(path)
        assert np.array_equal(back.data, small_reference_ds.data)
        assert back.config == small_reference_ds.config
        assert back.labeled == small_reference_ds.labeled

    def test_header_only_read(self, small_reference_ds, tmp_path):
        path = tmp_path / "ds.ips"
        ips.write_dataset(small_reference_ds, path)
        header = read_header(path)
        assert header["shape"] == list(small_reference_ds.data.shape)
        assert header["model"] == "reference"

    def test_corrupted_length_field(self, small_reference_ds, tmp_path):
        path = tmp_path / "ds.ips"
        ips.write_dataset(small_reference_ds, path)
        raw = bytearray(path.read_bytes())
        raw[8:16] = (2**40).to_bytes(8, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="corrupt header length"):
            ips.read_dataset(path)

    def test_truncated_data(self, small_reference_ds, tmp_path):
        path = tmp_path / "ds.ips"
        ips.write_dataset(small_reference_ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(ValueError, match="truncated data"):
            ips.read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ips"
        path.write_bytes(b"NOTADATASET")
        with pytest.raises(ValueError, match="bad magic"):
            ips.read_dataset(path)

    def test_version_mismatch(self, small_reference_ds, tmp_path):
        import json
        path = tmp_path / "ds.ips"
        ips.write_dataset(small_reference_ds, path)
        raw = path.read_bytes()
        hlen = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + hlen])
        header["format_version"] = 999
        blob = json.dumps(header).encode()
        path.write_bytes(raw[:8] + len(blob).to_bytes(8, "little") + blob
                         + raw[16 + hlen:])
        with pytest.raises(ValueError, match="version"):
            ips.read_dataset(path)
