"""Dataset loading, synthetic generation, splits, and checkpoint files."""

import datetime as dt
import json

import numpy as np
import pytest

from strada import (
    CompatibilityError,
    DataError,
    DatasetBundle,
    InputError,
    ModelConfig,
    SynthParams,
    chronological_split,
    load_checkpoint,
    load_dataset_dir,
    save_checkpoint,
    synth_generate,
    write_dataset_dir,
)
from strada.data import (
    canonical_json,
    checkpoint_from_params,
    config_digest,
    params_from_checkpoint,
    parse_frequency,
    read_series_csv,
    write_series_csv,
)
from strada.features import FeaturizeConfig, LagSet
from strada.graph import RoadGraph, component_count
from strada.model import init_params
from strada.tensor import RngStream

FIVE_MIN = dt.timedelta(minutes=5)


def make_bundle(n_steps=100, n_nodes=3):
    rng = np.random.default_rng(0)
    graph = RoadGraph.from_edges(n_nodes, [(i, i + 1) for i in range(n_nodes - 1)])
    start = dt.datetime(2024, 6, 1)
    return DatasetBundle(
        name="toy",
        series=rng.uniform(1.0, 9.0, size=(n_steps, n_nodes)),
        timestamps=[start + i * FIVE_MIN for i in range(n_steps)],
        frequency=FIVE_MIN,
        graph=graph,
    )


def small_checkpoint(dtype="float32", adapters=None, train=None, adapter_meta=None):
    cfg = ModelConfig(token_dim=9, d_model=8, n_layers=1, n_heads=2, ffn_dim=16, dtype=dtype)
    params = init_params(cfg, RngStream(0, 0))
    feat = FeaturizeConfig(lags=LagSet((1, 2)), k_hops=1, max_neighbors=1, k_pe=0)
    return checkpoint_from_params(
        params, feat, train_section=train, adapters=adapters, adapter_meta=adapter_meta
    )


# ---------------------------------------------------------------------------
# Bundles and splits


def test_bundle_promotes_2d_series():
    b = make_bundle()
    assert b.series.shape == (100, 3, 1)
    assert b.n_steps == 100
    assert b.n_nodes == 3


def test_bundle_validation():
    b = make_bundle()
    with pytest.raises(InputError, match="nodes"):
        DatasetBundle("x", b.series[:, :2, :], b.timestamps, FIVE_MIN, b.graph)
    with pytest.raises(InputError, match="timestamps"):
        DatasetBundle("x", b.series, b.timestamps[:-1], FIVE_MIN, b.graph)
    with pytest.raises(InputError, match=r"\(T, N, F\)"):
        DatasetBundle("x", b.series[:, :, :, None], b.timestamps, FIVE_MIN, b.graph)


def test_chronological_split_arithmetic():
    splits = chronological_split(make_bundle(100))
    assert splits.train == range(0, 70)
    assert splits.val == range(70, 90)
    assert splits.test == range(90, 100)
    uneven = chronological_split(make_bundle(97), (0.5, 0.25, 0.25))
    assert uneven.train == range(0, 48)
    assert uneven.val == range(48, 72)
    assert uneven.test == range(72, 97)


def test_chronological_split_validation():
    with pytest.raises(InputError, match="sum to 1"):
        chronological_split(make_bundle(), (0.5, 0.4, 0.2))
    with pytest.raises(InputError, match="positive"):
        chronological_split(make_bundle(), (1.1, -0.05, -0.05))
    with pytest.raises(DataError, match="test split has 10 steps"):
        chronological_split(make_bundle(100), min_usable=11)


# ---------------------------------------------------------------------------
# Synthetic generator


def test_synth_deterministic_per_seed():
    a = synth_generate(3, 6, 50)
    b = synth_generate(3, 6, 50)
    c = synth_generate(4, 6, 50)
    assert np.array_equal(a.series, b.series)
    assert np.array_equal(a.graph.adjacency, b.graph.adjacency)
    assert not np.array_equal(a.series, c.series)


def test_synth_shape_and_positivity():
    b = synth_generate(0, 5, 40)
    assert b.series.shape == (40, 5, 1)
    assert b.series.min() == 1.0
    assert component_count(b.graph) == 1
    assert len(b.timestamps) == 40
    assert b.timestamps[1] - b.timestamps[0] == FIVE_MIN
    assert b.name == "synth-0"
    assert synth_generate(0, 5, 10, name="other").name == "other"


def test_synth_validation():
    with pytest.raises(InputError, match="at least 2 nodes"):
        synth_generate(0, 1, 10)
    with pytest.raises(InputError, match="at least 1 step"):
        synth_generate(0, 3, 0)
    with pytest.raises(InputError, match="period"):
        synth_generate(0, 3, 10, SynthParams(period=1))


def test_synth_degenerate_process_is_constant():
    # with no coupling, no drive, and no noise the state never leaves zero,
    # so the positivity shift pins the whole series at exactly 1.0
    params = SynthParams(alpha=1.0, beta=0.0, daily_amplitude=0.0, noise_scale=0.0)
    b = synth_generate(5, 4, 30, params)
    assert np.all(b.series == 1.0)


def test_synth_pure_cycle_is_periodic():
    params = SynthParams(alpha=0.0, beta=0.0, daily_amplitude=1.0, noise_scale=0.0, period=24)
    b = synth_generate(2, 4, 80, params)
    x = b.series[:, :, 0]
    assert np.allclose(x[: 80 - 24], x[24:], atol=1e-9)
    assert not np.allclose(x[: 80 - 12], x[12:], atol=1e-3)


def test_synth_unconnectable_radius():
    with pytest.raises(InputError, match="no connected geometric graph"):
        synth_generate(0, 8, 10, SynthParams(radius=1e-6, connect_retries=3))


# ---------------------------------------------------------------------------
# Frequency strings and series CSV


def test_parse_frequency():
    assert parse_frequency("5min") == dt.timedelta(minutes=5)
    assert parse_frequency("300s") == dt.timedelta(minutes=5)
    assert parse_frequency("1h") == dt.timedelta(hours=1)
    assert parse_frequency(" 10 MIN ") == dt.timedelta(minutes=10)
    for bad in ("fast", "5", "min", "-5min", "5weeks"):
        with pytest.raises(InputError, match="cannot parse frequency"):
            parse_frequency(bad)


def test_series_csv_roundtrip(tmp_path):
    b = make_bundle(20, 3)
    path = tmp_path / "series.csv"
    write_series_csv(path, b.series, b.timestamps)
    first = path.read_text().splitlines()[0]
    assert first == "timestamp,node_0,node_1,node_2"
    series, stamps = read_series_csv(path, FIVE_MIN)
    assert series.shape == (20, 3, 1)
    assert stamps == b.timestamps
    assert np.allclose(series, b.series, atol=5e-7)  # %.6f on disk


def test_series_csv_errors(tmp_path):
    path = tmp_path / "s.csv"

    def check(text, pattern):
        path.write_text(text)
        with pytest.raises(DataError, match=pattern):
            read_series_csv(path, FIVE_MIN)

    check("time,node_0\n", "must start with 'timestamp")
    check("timestamp,node_1\n", "in order")
    check("timestamp,node_0\n2024-01-01T00:00:00,1.0,2.0\n", r"s\.csv:2: expected 2 columns")
    check("timestamp,node_0\nnoon,1.0\n", "bad timestamp")
    check("timestamp,node_0\n2024-01-01T00:00:00,fast\n", r"s\.csv:2")
    check(
        "timestamp,node_0\n2024-01-01T00:05:00,1.0\n2024-01-01T00:05:00,2.0\n",
        "strictly increasing",
    )
    check(
        "timestamp,node_0\n2024-01-01T00:00:00,1.0\n2024-01-01T00:03:00,2.0\n",
        "declared frequency",
    )
    check("timestamp,node_0\n", "no data rows")


# ---------------------------------------------------------------------------
# Dataset directories


def test_dataset_dir_roundtrip(tmp_path):
    b = synth_generate(1, 5, 30)
    write_dataset_dir(tmp_path / "ds", b, manifest_extra={"note": "hello"})
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["note"] == "hello"
    assert manifest["n_nodes"] == 5
    again = load_dataset_dir(tmp_path / "ds")
    assert again.name == b.name
    assert again.frequency == b.frequency
    assert np.allclose(again.series, b.series, atol=5e-7)
    assert np.array_equal(again.graph.adjacency, b.graph.adjacency)
    assert again.timestamps == b.timestamps


def test_dataset_dir_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="missing manifest"):
        load_dataset_dir(tmp_path)
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(DataError, match="invalid JSON"):
        load_dataset_dir(tmp_path)
    (tmp_path / "manifest.json").write_text('{"series_file": "s.csv"}')
    with pytest.raises(DataError, match="missing key 'frequency_seconds'"):
        load_dataset_dir(tmp_path)


# ---------------------------------------------------------------------------
# Canonical JSON and digests


def test_canonical_json_is_stable():
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_digest_separates_layout_from_run_settings():
    a = small_checkpoint(train={"epochs": 1})
    b = small_checkpoint(train={"epochs": 99})
    assert a.layout_digest() == b.layout_digest()
    assert a.digest() != b.digest()
    assert config_digest(a.config) == a.digest()


# ---------------------------------------------------------------------------
# Checkpoint files


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = small_checkpoint(train={"epochs": 3}, adapter_meta=None)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    assert path.read_bytes()[:4] == b"STR1"
    loaded = load_checkpoint(path)
    assert loaded.config == ckpt.config
    assert set(loaded.tensors) == set(ckpt.tensors)
    for name in ckpt.tensors:
        assert np.array_equal(loaded.tensors[name], ckpt.tensors[name]), name
        assert loaded.tensors[name].dtype == ckpt.tensors[name].dtype
    assert loaded.adapters is None


def test_checkpoint_roundtrip_with_adapters(tmp_path):
    rng = np.random.default_rng(1)
    adapters = {
        "layers.0.attn.wq.lora_a": rng.normal(size=(2, 8)).astype(np.float32),
        "layers.0.attn.wq.lora_b": np.zeros((8, 2), dtype=np.float32),
    }
    ckpt = small_checkpoint(adapters=adapters, adapter_meta={"method": "lora", "rank": 2})
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.config["adapter"] == {"method": "lora", "rank": 2}
    for name in adapters:
        assert np.array_equal(loaded.adapters[name], adapters[name])


def test_checkpoint_float64_roundtrip(tmp_path):
    ckpt = small_checkpoint(dtype="float64")
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.tensors["head.w"].dtype == np.float64
    assert np.array_equal(loaded.tensors["head.w"], ckpt.tensors["head.w"])


def test_checkpoint_params_roundtrip(tmp_path):
    ckpt = small_checkpoint()
    params, feat = params_from_checkpoint(ckpt)
    assert params.cfg.d_model == 8
    assert feat.k_hops == 1
    for name, t in params.tensors.items():
        assert np.array_equal(t.data, ckpt.tensors[name])
        assert t.requires_grad


def test_checkpoint_missing_file():
    with pytest.raises(DataError, match="does not exist"):
        load_checkpoint("/nonexistent/model.ckpt")


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "weird.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError, match="not a checkpoint file"):
        load_checkpoint(path)


def test_checkpoint_rejects_future_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_checkpoint(), path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="version 99 is not supported"):
        load_checkpoint(path)


def test_checkpoint_detects_config_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_checkpoint(), path)
    blob = bytearray(path.read_bytes())
    blob[12] ^= 0xFF  # inside the config JSON block
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="config block at byte offset 10"):
        load_checkpoint(path)


def test_checkpoint_detects_tensor_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_checkpoint(), path)
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF  # inside the last tensor's payload
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="byte offset .* fails its integrity check"):
        load_checkpoint(path)


def test_checkpoint_detects_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_checkpoint(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError, match="unexpected end of file"):
        load_checkpoint(path)


def test_checkpoint_layout_guard(tmp_path):
    path = tmp_path / "m.ckpt"
    ckpt = small_checkpoint()
    save_checkpoint(ckpt, path)
    load_checkpoint(path, expected_layout=ckpt.config)  # same layout passes
    other = dict(ckpt.config)
    other["model"] = {**ckpt.config["model"], "d_model": 16}
    with pytest.raises(CompatibilityError, match="layout digest"):
        load_checkpoint(path, expected_layout=other)


def test_checkpoint_rejects_integer_tensors(tmp_path):
    ckpt = small_checkpoint()
    ckpt.tensors["head.b"] = np.arange(3)
    with pytest.raises(InputError, match="unsupported dtype"):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
