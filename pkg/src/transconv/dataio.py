"""CSV ingestion, preparation recipes, scaling, the binary window store and toy data."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

STORE_MAGIC = b"TCWS"
STORE_VERSION = 1
_STORE_HEAD = struct.Struct("<4sIQQQ")

EEG_CHANNELS = ("FP1-F7", "F7-T7", "T7-P7", "P7-O1", "FP1-F3")
TOY_KINDS = ("sines", "arma", "switching")
AR2_COEFFS = (0.6, -0.3)
SINE_AMPLITUDES = (1.0, 0.5)


# ---------------------------------------------------------------- resampling / slicing

def downsample(series, from_hz: float, to_hz: float, zero_crossings: int = 16) -> np.ndarray:
    """Anti-aliased resampling along the last axis to ``floor(n * to_hz / from_hz)`` points.

    Each output sample is a Kaiser-windowed sinc interpolation (cutoff
    ``0.5 * to_hz``) at its fractional input position, with weights
    normalized to sum to one and edge values repeated beyond the ends.
    """
    if not from_hz > to_hz > 0:
        raise ConfigError(f"downsample needs from_hz > to_hz > 0, got {from_hz} -> {to_hz}")
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    m = int(np.floor(n * to_hz / from_hz))
    if m < 1:
        raise DataError(f"series of {n} samples is too short to resample {from_hz} -> {to_hz} Hz")
    ratio = from_hz / to_hz
    fc = 0.5 / ratio  # cycles per input sample
    half = int(np.ceil(zero_crossings / (2 * fc)))
    pos = np.arange(m) * ratio
    base = np.floor(pos).astype(np.int64)
    taps = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    tau = pos[:, None] - taps
    ramp = np.clip(1.0 - (tau / half) ** 2, 0.0, None)
    weights = np.sinc(2 * fc * tau) * np.i0(8.0 * np.sqrt(ramp)) * (ramp > 0)
    weights /= weights.sum(axis=1, keepdims=True)
    gathered = x[..., np.clip(taps, 0, n - 1)]
    return (gathered * weights).sum(axis=-1)


def take_middle(series, n: int) -> np.ndarray:
    """Centered slice of length ``n``; an odd surplus leaves the extra point on the right."""
    x = np.asarray(series)
    L = x.shape[-1]
    if n > L or n < 1:
        raise DataError(f"cannot take {n} middle points from a series of length {L}")
    start = (L - n) // 2
    return x[..., start:start + n]


def take_tail(series, n: int) -> np.ndarray:
    x = np.asarray(series)
    L = x.shape[-1]
    if n > L or n < 1:
        raise DataError(f"cannot take the last {n} points from a series of length {L}")
    return x[..., L - n:]


def window_starts(rows: int, length: int, step: Optional[int] = None) -> list:
    """Window start offsets; ``step=None`` means back-to-back windows."""
    step = length if step is None else step
    if rows < length:
        return []
    return list(range(0, rows - length + 1, step))


# ---------------------------------------------------------------- scaling

@dataclass
class Scaler:
    kind: str
    low: list
    high: list

    def __post_init__(self):
        if self.kind not in ("minmax", "zscore"):
            raise ConfigError(f"unknown scaler kind {self.kind!r}")
        if len(self.low) != len(self.high):
            raise ConfigError("scaler statistics must have one entry per channel")

    @property
    def channels(self) -> int:
        return len(self.low)

    @classmethod
    def fit(cls, windows: np.ndarray, kind: str = "minmax") -> "Scaler":
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] == 0:
            raise ShapeError("scaler fit needs non-empty [N, C, L] windows", w.shape)
        if kind == "minmax":
            lo, hi = w.min(axis=(0, 2)), w.max(axis=(0, 2))
        elif kind == "zscore":
            lo, hi = w.mean(axis=(0, 2)), w.std(axis=(0, 2))
        else:
            raise ConfigError(f"unknown scaler kind {kind!r}")
        return cls(kind, [float(v) for v in lo], [float(v) for v in hi])

    def _stats(self, x):
        if x.ndim < 2 or x.shape[-2] != self.channels:
            raise ShapeError(f"scaler has {self.channels} channels", x.shape)
        lo = np.asarray(self.low)[:, None]
        hi = np.asarray(self.high)[:, None]
        return lo, hi


def normalize(batch, scaler: Scaler) -> np.ndarray:
    """Map each channel to ``[-1, 1]`` (min-max) or to zero mean, unit std (z-score)."""
    x = np.asarray(batch)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    lo, hi = scaler._stats(x)
    x = x.astype(np.float64)
    if scaler.kind == "minmax":
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)
        if np.any(np.abs(out) > 1.0 + 1e-6):
            log.warning("values fall outside the fitted range; normalized data exceed [-1, 1]")
    else:
        safe = np.where(hi > 0, hi, 1.0)
        out = np.where(hi > 0, (x - lo) / safe, 0.0)
    return out.astype(dtype)


def denormalize(batch, scaler: Scaler) -> np.ndarray:
    x = np.asarray(batch)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    lo, hi = scaler._stats(x)
    x = x.astype(np.float64)
    if scaler.kind == "minmax":
        span = hi - lo
        out = np.where(span > 0, (x + 1.0) * 0.5 * span + lo, lo + 0.0 * x)
    else:
        out = np.where(hi > 0, x * hi + lo, lo + 0.0 * x)
    return out.astype(dtype)


# ---------------------------------------------------------------- window store

def encode_store(windows: np.ndarray) -> bytes:
    w = np.ascontiguousarray(windows, dtype="<f4")
    if w.ndim != 3:
        raise ShapeError("window store holds [B, C, L] arrays", w.shape)
    if not np.all(np.isfinite(w)):
        raise DataError("refusing to store non-finite window values")
    return _STORE_HEAD.pack(STORE_MAGIC, STORE_VERSION, *w.shape) + w.tobytes()


def write_store(path, windows: np.ndarray) -> str:
    """Write ``windows`` atomically; returns the file's sha256."""
    data = encode_store(windows)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_store(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read window store: {exc.strerror}", path=path) from exc
    if len(data) < _STORE_HEAD.size:
        raise DataError("window store truncated", path=path)
    magic, version, B, C, L = _STORE_HEAD.unpack_from(data)
    if magic != STORE_MAGIC:
        raise DataError("not a window store (bad magic)", path=path)
    if version != STORE_VERSION:
        raise DataError(f"unsupported window store version {version}", path=path)
    count = B * C * L
    if len(data) != _STORE_HEAD.size + 4 * count:
        raise DataError(f"window store size does not match header [{B}, {C}, {L}]", path=path)
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=_STORE_HEAD.size)
    return arr.reshape(B, C, L).astype(np.float32)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- manifest / dataset

@dataclass
class Recipe:
    """How raw per-file series become windows.

    Steps run in order: optional downsampling, optional ``take`` of
    ``take_length`` points ("middle" or "tail"), then windowing with
    ``window_step`` (``None`` = back-to-back windows).
    """

    window_length: int
    window_step: Optional[int] = None
    from_hz: Optional[float] = None
    to_hz: Optional[float] = None
    take: Optional[str] = None
    take_length: Optional[int] = None
    skip_short: bool = False
    delimiter: str = ","
    scaler: str = "minmax"
    eval_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        if self.window_length < 1:
            raise ConfigError("window_length must be positive")
        if self.window_step is not None and self.window_step < 1:
            raise ConfigError("window_step must be positive")
        if (self.from_hz is None) != (self.to_hz is None):
            raise ConfigError("from_hz and to_hz must be given together")
        if self.take not in (None, "middle", "tail"):
            raise ConfigError(f"take must be 'middle' or 'tail', got {self.take!r}")
        if self.take is not None and not self.take_length:
            raise ConfigError("take requires take_length")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in [0, 1)")

    @property
    def policy(self) -> dict:
        if self.window_step is None:
            return {"kind": "nonoverlap"}
        return {"kind": "overlap", "step": self.window_step}

    def prepare(self, series: np.ndarray) -> np.ndarray:
        """Apply resampling and the take step to a ``[C, rows]`` array."""
        if self.from_hz is not None:
            series = downsample(series, self.from_hz, self.to_hz)
        if self.take == "middle":
            series = take_middle(series, self.take_length)
        elif self.take == "tail":
            series = take_tail(series, self.take_length)
        return series


@dataclass
class DatasetManifest:
    name: str
    channel_names: list
    window_length: int
    window_policy: dict
    scaler: Scaler
    split: list
    source_files: list = field(default_factory=list)
    window_sources: list = field(default_factory=list)
    sampling_rate_hz: Optional[float] = None
    store: Optional[str] = None
    store_sha256: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scaler"] = asdict(self.scaler)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["scaler"] = Scaler(**d["scaler"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def content_hash(self) -> str:
        return sha256_bytes(json.dumps(self.to_dict(), sort_keys=True).encode())

    @property
    def n_windows(self) -> int:
        return len(self.split)


@dataclass
class Dataset:
    """A manifest plus its windows in original units."""

    manifest: DatasetManifest
    windows: np.ndarray

    def __post_init__(self):
        m = self.manifest
        if self.windows.ndim != 3 or self.windows.shape[1:] != (len(m.channel_names), m.window_length):
            raise ShapeError("windows disagree with the manifest", self.windows.shape,
                             (m.n_windows, len(m.channel_names), m.window_length))
        if self.windows.shape[0] != m.n_windows:
            raise DataError(f"manifest lists {m.n_windows} windows, store holds {self.windows.shape[0]}")

    def mask(self, tag: str) -> np.ndarray:
        return np.array([s == tag for s in self.manifest.split], dtype=bool)

    def part(self, tag: str) -> np.ndarray:
        return self.windows[self.mask(tag)]

    def normalized(self, tag: Optional[str] = None) -> np.ndarray:
        w = self.windows if tag is None else self.part(tag)
        return normalize(w, self.manifest.scaler).astype(np.float32)

    def file_field(self, key: str) -> np.ndarray:
        """Per-window value of a per-file field such as ``subject_id`` or ``label``."""
        files = self.manifest.source_files
        return np.array([files[i].get(key) for i in self.manifest.window_sources], dtype=object)

    def save(self, out_dir, stem: Optional[str] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.manifest.name
        store = out_dir / f"{stem}.windows"
        self.manifest.store = store.name
        self.manifest.store_sha256 = write_store(store, self.windows)
        path = out_dir / f"{stem}.manifest.json"
        path.write_text(self.manifest.to_json())
        return path


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc.strerror}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON ({exc.msg})", path=path) from exc
    try:
        manifest = DatasetManifest.from_dict(raw)
    except (TypeError, KeyError) as exc:
        raise DataError(f"manifest fields invalid: {exc}", path=path) from exc
    store = path.parent / manifest.store
    digest = file_sha256(store) if store.exists() else None
    if digest != manifest.store_sha256:
        raise DataError("window store hash does not match the manifest", path=store, field="store_sha256")
    return Dataset(manifest, read_store(store))


def assign_split(n: int, eval_fraction: float, seed: int) -> list:
    """Seeded train/eval tags; at least one window stays in train."""
    n_eval = min(int(round(n * eval_fraction)), max(n - 1, 0))
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    tags = ["train"] * n
    for i in order[:n_eval]:
        tags[int(i)] = "eval"
    return tags


def build_dataset(name: str, windows: np.ndarray, channel_names: Sequence[str], recipe: Recipe,
                  source_files: Optional[list] = None, window_sources: Optional[list] = None,
                  sampling_rate_hz: Optional[float] = None) -> Dataset:
    windows = np.asarray(windows, dtype=np.float32)
    if windows.shape[0] == 0:
        raise DataError(f"dataset {name!r} has no windows")
    if not np.all(np.isfinite(windows)):
        raise DataError(f"dataset {name!r} contains non-finite values")
    split = assign_split(windows.shape[0], recipe.eval_fraction, recipe.split_seed)
    train = windows[np.array([s == "train" for s in split])]
    scaler = Scaler.fit(train, recipe.scaler)
    store_hash = sha256_bytes(encode_store(windows))
    manifest = DatasetManifest(
        name=name, channel_names=list(channel_names), window_length=int(windows.shape[2]),
        window_policy=recipe.policy, scaler=scaler, split=split, source_files=source_files or [],
        window_sources=window_sources if window_sources is not None else [0] * windows.shape[0],
        sampling_rate_hz=sampling_rate_hz, store=None, store_sha256=store_hash)
    return Dataset(manifest, windows)


# ---------------------------------------------------------------- CSV ingestion

def read_csv_columns(path, columns: Sequence[str], delimiter: str = ",") -> np.ndarray:
    """Numeric ``[len(columns), rows]`` array from a headed CSV file."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open CSV: {exc.strerror}", path=path) from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError("CSV file is empty", path=path)
        header = [h.strip() for h in header]
        idx = []
        for col in columns:
            if col not in header:
                raise DataError("missing column", path=path, field=col)
            idx.append(header.index(col))
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for col, i in zip(columns, idx):
                try:
                    v = float(row[i])
                except (ValueError, IndexError):
                    cell = row[i] if i < len(row) else ""
                    raise DataError(f"non-numeric cell {cell!r} on line {lineno}", path=path, field=col) from None
                if not np.isfinite(v):
                    raise DataError(f"non-finite cell on line {lineno}", path=path, field=col)
                vals.append(v)
            rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(columns)).T


def ingest_csv(files: Sequence, channel_columns: Sequence[str], recipe: Recipe, name: str = "dataset",
               out_dir=None) -> Dataset:
    """Turn CSV recordings into a windowed dataset.

    ``files`` holds paths or dicts ``{"path", "subject_id", "label"}``; the
    extra keys are kept per file so windows can be traced to subjects.
    """
    if not files:
        raise DataError("no input files given")
    windows, sources, records = [], [], []
    for entry in files:
        entry = {"path": str(entry)} if not isinstance(entry, dict) else dict(entry)
        path = entry["path"]
        series = read_csv_columns(path, channel_columns, recipe.delimiter)
        rows = series.shape[1]
        need = max(recipe.window_length, recipe.take_length or 0)
        if recipe.from_hz is not None:
            need = int(np.ceil(need * recipe.from_hz / recipe.to_hz))
        if rows < need:
            if recipe.skip_short:
                log.warning("skipping %s: %d rows is shorter than one window (%d)", path, rows, need)
                continue
            raise DataError(f"file has {rows} rows, fewer than the {need} one window needs", path=path)
        prepared = recipe.prepare(series)
        starts = window_starts(prepared.shape[1], recipe.window_length, recipe.window_step)
        if not starts:
            if recipe.skip_short:
                log.warning("skipping %s: no complete window after preparation", path)
                continue
            raise DataError("no complete window after preparation", path=path)
        entry["sha256"] = file_sha256(path)
        entry["rows"] = rows
        entry["windows"] = len(starts)
        fidx = len(records)
        records.append(entry)
        for s in starts:
            windows.append(prepared[:, s:s + recipe.window_length])
            sources.append(fidx)
    if not windows:
        raise DataError("no windows produced from any input file")
    ds = build_dataset(name, np.stack(windows), channel_columns, recipe, records, sources,
                       recipe.to_hz if recipe.to_hz is not None else None)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def export_csv(windows: np.ndarray, channel_names: Sequence[str], out_dir, prefix: str = "sequence") -> list:
    """One CSV per sequence with a header row of channel names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, w in enumerate(np.asarray(windows)):
        path = out_dir / f"{prefix}_{i:05d}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(channel_names)
            writer.writerows([[f"{v:.9g}" for v in row] for row in w.T])
        paths.append(path)
    return paths


# ---------------------------------------------------------------- toy generators

def _sines(rng, n, length, channels):
    t = np.arange(length) / length
    out = np.zeros((n, channels, length))
    for amp, (lo, hi) in zip(SINE_AMPLITUDES, ((1.0, 3.0), (3.0, 8.0))):
        freq = rng.uniform(lo, hi, size=(n, channels, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n, channels, 1))
        out += amp * np.sin(2 * np.pi * freq * t + phase)
    return out


def _arma(rng, n, length, channels, burn_in=200):
    p1, p2 = AR2_COEFFS
    e = rng.standard_normal((n, channels, length + burn_in))
    x = np.zeros_like(e)
    for i in range(length + burn_in):
        x[..., i] = e[..., i]
        if i >= 1:
            x[..., i] += p1 * x[..., i - 1]
        if i >= 2:
            x[..., i] += p2 * x[..., i - 2]
    return x[..., burn_in:]


def _switching(rng, n, length, channels):
    """Small oscillation that switches to a growing excursion near the end."""
    t = np.arange(length)
    freq = rng.uniform(2.0, 5.0, size=(n, channels, 1)) / length
    phase = rng.uniform(0, 2 * np.pi, size=(n, channels, 1))
    calm = 0.3 * np.sin(2 * np.pi * freq * t + phase)
    calm += 0.05 * rng.standard_normal((n, channels, length))
    switch = rng.integers(int(0.55 * length), int(0.8 * length), size=(n, 1, 1))
    direction = rng.choice([-1.0, 1.0], size=(n, channels, 1))
    tail = np.clip(t - switch, 0, None) / (length - switch)
    amplitude = rng.uniform(2.0, 3.0, size=(n, 1, 1))
    growth = np.expm1(3.0 * tail) / np.expm1(3.0)
    return calm + direction * amplitude * growth


def toy_windows(kind: str, n: int, length: int, channels: int, seed: int) -> np.ndarray:
    if kind not in TOY_KINDS:
        raise ConfigError(f"toy kind must be one of {TOY_KINDS}, got {kind!r}")
    if min(n, length, channels) < 1:
        raise ConfigError("toy n, length and channels must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    gen = {"sines": _sines, "arma": _arma, "switching": _switching}[kind]
    return gen(rng, n, length, channels).astype(np.float32)


def toy_generate(kind: str, n: int, length: int, channels: int, seed: int, eval_fraction: float = 0.2,
                 out_dir=None) -> Dataset:
    windows = toy_windows(kind, n, length, channels, seed)
    recipe = Recipe(window_length=length, eval_fraction=eval_fraction, split_seed=seed)
    names = [f"ch{i}" for i in range(channels)]
    source = [{"path": f"toy:{kind}:seed={seed}", "kind": kind}]
    ds = build_dataset(f"toy-{kind}", windows, names, recipe, source, [0] * n)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def ar2_lag1_autocorrelation(coeffs=AR2_COEFFS) -> float:
    p1, p2 = coeffs
    return p1 / (1.0 - p2)
