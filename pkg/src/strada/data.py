"""Datasets on disk and in memory, synthetic generation, and checkpoints.

File formats owned here:
  * series CSV: header "timestamp,node_0,...,node_{N-1}", ISO-8601 stamps at
    a fixed frequency, one float per node per row
  * edge list: "src,dst[,weight]" lines, 0-based (see graph.read_edge_list)
  * checkpoint: binary, magic "STR1", versioned, CRC-checked per section,
    written atomically (temp file + rename)
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
import json
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CompatibilityError, DataError, InputError
from .features import FeaturizeConfig
from .graph import RoadGraph, component_count, read_edge_list
from .model import ModelConfig, ModelParams
from .tensor import RngStream, Tensor

CHECKPOINT_MAGIC = b"STR1"
CHECKPOINT_VERSION = 1

# fixed stream ids for the synthetic generator
_STREAM_GEOMETRY = 101
_STREAM_PHASES = 102
_STREAM_NOISE = 103


# ---------------------------------------------------------------------------
# bundles and splits


@dataclass
class DatasetBundle:
    """One dataset: aligned series (T, N, F), timestamps, and its road graph."""

    name: str
    series: np.ndarray
    timestamps: list[_dt.datetime]
    frequency: _dt.timedelta
    graph: RoadGraph

    def __post_init__(self):
        series = np.asarray(self.series, dtype=np.float64)
        if series.ndim == 2:
            series = series[:, :, None]
        if series.ndim != 3:
            raise InputError(f"series must be (T, N, F), got shape {series.shape}")
        if series.shape[1] != self.graph.num_nodes:
            raise InputError(
                f"series has {series.shape[1]} nodes, graph has {self.graph.num_nodes}"
            )
        if series.shape[0] != len(self.timestamps):
            raise InputError(
                f"{series.shape[0]} rows vs {len(self.timestamps)} timestamps"
            )
        self.series = series

    @property
    def n_steps(self) -> int:
        return self.series.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.series.shape[1]


@dataclass(frozen=True)
class Splits:
    """Chronological index ranges: train, then validation, then test."""

    train: range
    val: range
    test: range


def chronological_split(
    bundle: DatasetBundle,
    ratios: tuple[float, float, float] = (0.70, 0.20, 0.10),
    min_usable: int = 0,
) -> Splits:
    """Split [0, T) at floor(r_train*T) and floor((r_train+r_val)*T).

    `min_usable` is the history a sample needs (max lag + context + 1);
    when positive, every split must be at least that long.
    """
    if any(r <= 0.0 for r in ratios):
        raise InputError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must sum to 1, got {ratios}")
    t = bundle.n_steps

    def cut(fraction: float) -> int:
        # floor of the exact product; rescue products that float drift pushed
        # just below an integer (0.7 + 0.2 is 0.8999...)
        x = fraction * t
        nearest = round(x)
        return nearest if abs(x - nearest) < 1e-6 else int(x)

    a = cut(ratios[0])
    b = cut(ratios[0] + ratios[1])
    splits = Splits(train=range(0, a), val=range(a, b), test=range(b, t))
    if min_usable > 0:
        for name, rng in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
            if len(rng) < min_usable:
                raise DataError(
                    f"{name} split has {len(rng)} steps; needs >= {min_usable} "
                    f"(max lag + context + 1)"
                )
    return splits


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic traffic process (see `synth_generate`)."""

    alpha: float = 0.75
    beta: float = 0.2
    daily_amplitude: float = 1.0
    period: int = 288
    nu: float = 5.0
    noise_scale: float = 0.1
    radius: float | None = None
    burn_in: int = 64
    connect_retries: int = 100
    start: _dt.datetime = field(default_factory=lambda: _dt.datetime(2024, 1, 1))
    frequency: _dt.timedelta = field(default_factory=lambda: _dt.timedelta(minutes=5))


def synth_generate(
    seed: int, n_nodes: int, n_steps: int, params: SynthParams = SynthParams(), name: str | None = None
) -> DatasetBundle:
    """Connected random geometric graph + coupled AR dynamics with a daily cycle.

    x_{t+1} = alpha*x_t + beta*(A_hat x_t) + amp*sin(2*pi*t/period + phase_v)
              + noise_scale * t_nu noise, with A_hat the row-normalized
    adjacency. A fixed burn-in from x_0 = 0 is discarded and the series is
    shifted so its minimum is 1.0 (positive, traffic-like).
    """
    if n_nodes < 2:
        raise InputError(f"need at least 2 nodes, got {n_nodes}")
    if n_steps < 1:
        raise InputError(f"need at least 1 step, got {n_steps}")
    if params.period < 2:
        raise InputError(f"period must be >= 2, got {params.period}")

    radius = params.radius
    if radius is None:
        radius = 1.5 * float(np.sqrt(np.log(max(n_nodes, 3)) / (np.pi * n_nodes)))

    geo = RngStream(seed, _STREAM_GEOMETRY)
    graph = None
    for _ in range(params.connect_retries):
        points = geo.uniform((n_nodes, 2), dtype=np.float64)
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        adj = ((dist < radius) & (dist > 0.0)).astype(np.float64)
        candidate = RoadGraph(n_nodes, adj)
        if component_count(candidate) == 1:
            graph = candidate
            break
    if graph is None:
        raise InputError(
            f"no connected geometric graph in {params.connect_retries} draws "
            f"(radius {radius:.3f}); raise the radius"
        )

    a_hat = graph.adjacency / graph.degrees[:, None]
    phases = RngStream(seed, _STREAM_PHASES).uniform(n_nodes, dtype=np.float64) * 2.0 * np.pi
    total = n_steps + params.burn_in
    noise = (
        RngStream(seed, _STREAM_NOISE).standard_t(params.nu, (total, n_nodes))
        * params.noise_scale
    )
    x = np.zeros(n_nodes, dtype=np.float64)
    out = np.empty((total, n_nodes), dtype=np.float64)
    for t in range(total):
        drive = params.daily_amplitude * np.sin(2.0 * np.pi * t / params.period + phases)
        x = params.alpha * x + params.beta * (a_hat @ x) + drive + noise[t]
        out[t] = x
    series = out[params.burn_in :]
    series = series - series.min() + 1.0
    timestamps = [params.start + i * params.frequency for i in range(n_steps)]
    return DatasetBundle(
        name=name or f"synth-{seed}",
        series=series[:, :, None],
        timestamps=timestamps,
        frequency=params.frequency,
        graph=graph,
    )


# ---------------------------------------------------------------------------
# series CSV + dataset directories

_FREQ_PATTERN = re.compile(r"^(\d+)\s*(s|sec|min|h|hour)$")


def parse_frequency(text: str) -> _dt.timedelta:
    """Parse '5min', '300s', '1h' style frequency strings."""
    m = _FREQ_PATTERN.match(text.strip().lower())
    if not m:
        raise InputError(f"cannot parse frequency {text!r} (use e.g. '5min', '300s', '1h')")
    value = int(m.group(1))
    unit = {"s": 1, "sec": 1, "min": 60, "h": 3600, "hour": 3600}[m.group(2)]
    return _dt.timedelta(seconds=value * unit)


def write_series_csv(path, series: np.ndarray, timestamps: Sequence[_dt.datetime]) -> None:
    series = np.asarray(series)
    if series.ndim == 3:
        series = series[:, :, 0]
    n = series.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timestamp," + ",".join(f"node_{i}" for i in range(n)) + "\n")
        for ts, row in zip(timestamps, series):
            fh.write(ts.isoformat() + "," + ",".join(f"{v:.6f}" for v in row) + "\n")


def read_series_csv(path, frequency: _dt.timedelta) -> tuple[np.ndarray, list[_dt.datetime]]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if len(cols) < 2 or cols[0] != "timestamp":
            raise DataError(f"{path}:1: header must start with 'timestamp,node_0,...'")
        expected = [f"node_{i}" for i in range(len(cols) - 1)]
        if cols[1:] != expected:
            raise DataError(
                f"{path}:1: node columns must be node_0..node_{len(cols) - 2} in order"
            )
        n = len(expected)
        rows: list[list[float]] = []
        stamps: list[_dt.datetime] = []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {n + 1} columns, got {len(parts)}"
                )
            try:
                ts = _dt.datetime.fromisoformat(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if stamps:
                delta = ts - stamps[-1]
                if delta <= _dt.timedelta(0):
                    raise DataError(
                        f"{path}:{lineno}: timestamps must be strictly increasing"
                    )
                if delta != frequency:
                    raise DataError(
                        f"{path}:{lineno}: spacing {delta} != declared frequency {frequency}"
                    )
            stamps.append(ts)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)[:, :, None], stamps


def load_dataset(
    series_path, edges_path, frequency: _dt.timedelta, name: str | None = None
) -> DatasetBundle:
    """Load a series CSV plus an edge list into a validated bundle."""
    series, stamps = read_series_csv(series_path, frequency)
    graph = read_edge_list(edges_path, num_nodes=series.shape[1])
    return DatasetBundle(
        name=name or os.path.basename(os.path.dirname(str(series_path)) or str(series_path)),
        series=series,
        timestamps=stamps,
        frequency=frequency,
        graph=graph,
    )


def write_dataset_dir(directory, bundle: DatasetBundle, manifest_extra: Mapping | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    write_series_csv(os.path.join(directory, "series.csv"), bundle.series, bundle.timestamps)
    with open(os.path.join(directory, "edges.csv"), "w", encoding="utf-8", newline="\n") as fh:
        adj = bundle.graph.adjacency
        for i in range(bundle.graph.num_nodes):
            for j in range(i + 1, bundle.graph.num_nodes):
                if adj[i, j] > 0.0:
                    fh.write(f"{i},{j},{adj[i, j]:g}\n")
    manifest = {
        "name": bundle.name,
        "n_nodes": bundle.n_nodes,
        "n_steps": bundle.n_steps,
        "frequency_seconds": int(bundle.frequency.total_seconds()),
        "start": bundle.timestamps[0].isoformat(),
        "series_file": "series.csv",
        "edges_file": "edges.csv",
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset_dir(directory) -> DatasetBundle:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{directory}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("frequency_seconds", "series_file", "edges_file"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing key {key!r}")
    frequency = _dt.timedelta(seconds=int(manifest["frequency_seconds"]))
    return load_dataset(
        os.path.join(directory, manifest["series_file"]),
        os.path.join(directory, manifest["edges_file"]),
        frequency,
        name=manifest.get("name", os.path.basename(str(directory))),
    )


# ---------------------------------------------------------------------------
# checkpoints


def canonical_json(obj) -> str:
    """Deterministic JSON used for config digests and checkpoint payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Config document plus named weight arrays (base and optional adapters)."""

    config: dict
    tensors: dict[str, np.ndarray]
    adapters: dict[str, np.ndarray] | None = None

    def digest(self) -> str:
        return config_digest(self.config)

    def layout_digest(self) -> str:
        """Digest of the sections that must match for weights to be usable."""
        return config_digest(
            {"model": self.config.get("model"), "featurize": self.config.get("featurize")}
        )


def checkpoint_from_params(
    params: ModelParams,
    featurize_cfg: FeaturizeConfig,
    train_section: Mapping | None = None,
    adapters: Mapping[str, np.ndarray] | None = None,
    adapter_meta: Mapping | None = None,
    seed: int | None = None,
) -> Checkpoint:
    config = {
        "format": CHECKPOINT_VERSION,
        "model": params.cfg.to_dict(),
        "featurize": featurize_cfg.to_dict(),
        "train": dict(train_section) if train_section else None,
        "adapter": dict(adapter_meta) if adapter_meta else None,
        "seed": seed,
    }
    tensors = {name: t.data.copy() for name, t in params.tensors.items()}
    adapter_arrays = {k: np.array(v, copy=True) for k, v in adapters.items()} if adapters else None
    return Checkpoint(config=config, tensors=tensors, adapters=adapter_arrays)


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelParams, FeaturizeConfig]:
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    feat_cfg = FeaturizeConfig.from_dict(ckpt.config["featurize"])
    tensors = {
        name: Tensor(arr.astype(model_cfg.np_dtype, copy=True), requires_grad=True)
        for name, arr in ckpt.tensors.items()
    }
    return ModelParams(model_cfg, tensors), feat_cfg


_DTYPE_TO_CODE = {"float32": 0, "float64": 1}
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8"}


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    if arr.dtype == np.float32:
        code, payload = 0, arr.astype("<f4", copy=False).tobytes(order="C")
    elif arr.dtype == np.float64:
        code, payload = 1, arr.astype("<f8", copy=False).tobytes(order="C")
    else:
        raise InputError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", code))
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize and atomically replace `path` (temp file + rename)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    config_bytes = canonical_json(ckpt.config).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", zlib.crc32(config_bytes)))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _pack_tensor(buf, name, arr)
    if ckpt.adapters is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<I", len(ckpt.adapters)))
        for name, arr in ckpt.adapters.items():
            _pack_tensor(buf, name, arr)

    path = str(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.offset = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise DataError(
                f"{self.label}: unexpected end of file at byte {len(self.blob)} "
                f"(needed {self.offset + n})"
            )
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def _read_tensor(reader: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = reader.unpack("<H")
    name = reader.take(name_len).decode("utf-8")
    (code,) = reader.unpack("<B")
    if code not in _CODE_TO_DTYPE:
        raise DataError(f"{reader.label}: tensor {name!r} has unknown dtype code {code}")
    (ndim,) = reader.unpack("<B")
    shape = tuple(reader.unpack("<I")[0] for _ in range(ndim))
    (payload_len,) = reader.unpack("<Q")
    payload_offset = reader.offset
    payload = reader.take(payload_len)
    (stored_crc,) = reader.unpack("<I")
    if zlib.crc32(payload) != stored_crc:
        raise DataError(
            f"{reader.label}: tensor {name!r} payload at byte offset {payload_offset} "
            f"fails its integrity check"
        )
    arr = np.frombuffer(payload, dtype=_CODE_TO_DTYPE[code]).reshape(shape).copy()
    return name, arr


def load_checkpoint(path, expected_layout: Mapping | None = None) -> Checkpoint:
    """Read and verify a checkpoint file.

    `expected_layout`, when given, is a {"model": ..., "featurize": ...}
    document that must digest-match the stored one (weights are meaningless
    under a different layout).
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} does not exist") from None
    reader = _Reader(blob, str(path))
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (magic {magic!r})")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint format version {version} is not supported; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    (config_len,) = reader.unpack("<I")
    config_offset = reader.offset
    config_bytes = reader.take(config_len)
    (config_crc,) = reader.unpack("<I")
    if zlib.crc32(config_bytes) != config_crc:
        raise DataError(
            f"{path}: config block at byte offset {config_offset} fails its integrity check"
        )
    config = json.loads(config_bytes.decode("utf-8"))
    (n_tensors,) = reader.unpack("<I")
    tensors = dict(_read_tensor(reader) for _ in range(n_tensors))
    (has_adapters,) = reader.unpack("<B")
    adapters = None
    if has_adapters:
        (n_adapters,) = reader.unpack("<I")
        adapters = dict(_read_tensor(reader) for _ in range(n_adapters))
    ckpt = Checkpoint(config=config, tensors=tensors, adapters=adapters)
    if expected_layout is not None:
        expected = config_digest(
            {"model": expected_layout.get("model"), "featurize": expected_layout.get("featurize")}
        )
        if expected != ckpt.layout_digest():
            raise CompatibilityError(
                f"{path}: checkpoint layout digest {ckpt.layout_digest()[:12]} does not "
                f"match the requested run's {expected[:12]}"
            )
    return ckpt
