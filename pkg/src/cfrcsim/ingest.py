"""Data ingestion: mesh-to-grid resampling, channel normalization,
mirror augmentation, and the on-disk case container.

The case container is one directory per case: a plain-text manifest plus one
binary file per frame (magic ``CFRC``, version, grid shape, channel name
table, row-major little-endian float32 planes). The final damage pattern and
the microstructure mask are stored as flagged extra frame entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .fields import (CH_DAMAGE, CH_DSVM, CH_DDMG, CH_FINAL_DAMAGE, CH_MICRO,
                     CH_S12, CH_STRAIN, CH_SVM, GRID_SIZE, STATE_CHANNELS,
                     DeformationSequence, FieldFrame, UnstructuredField)
from .validation import check_finite

MAGIC = b"CFRC"
FORMAT_VERSION = 1
SNAP_TOLERANCE = 1e-9


class CaseFormatError(ValueError):
    """Malformed case container; the message carries the byte offset."""


# --------------------------------------------------------------------------
# inverse-distance resampling


def resample_to_grid(mesh: UnstructuredField, grid_size: int = GRID_SIZE,
                     domain_size: float = 54.0, power: float = 2.0,
                     k: int = 8, snap_tol: float = SNAP_TOLERANCE
                     ) -> dict[str, np.ndarray]:
    """Inverse-distance-weighted resampling of nodal fields onto the grid.

    Each grid point takes the IDW mean of its k nearest mesh nodes
    (weights 1 / d**power); a grid point within ``snap_tol`` of a node
    returns that node's value exactly.
    """
    mesh.validate()
    if not mesh.point_data:
        raise ValueError("mesh carries no point data")
    k_eff = min(k, mesh.points.shape[0])
    tree = cKDTree(mesh.points)
    coords = (np.arange(grid_size) + 0.5) * (domain_size / grid_size)
    gx, gy = np.meshgrid(coords, coords)  # gy rows, gx columns
    query = np.column_stack([gx.ravel(), gy.ravel()])
    dist, idx = tree.query(query, k=k_eff)
    dist = np.atleast_2d(dist.reshape(query.shape[0], k_eff))
    idx = idx.reshape(query.shape[0], k_eff)

    snap = dist[:, 0] < snap_tol
    with np.errstate(divide="ignore"):
        w = 1.0 / np.maximum(dist, snap_tol / 2.0) ** power
    wsum = w.sum(axis=1)

    out: dict[str, np.ndarray] = {}
    for name, values in mesh.point_data.items():
        v = np.asarray(values, dtype=np.float64)
        blended = (w * v[idx]).sum(axis=1) / wsum
        blended[snap] = v[idx[snap, 0]]
        out[name] = blended.reshape(grid_size, grid_size)
    return out


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-channel mean / standard deviation for the affine normalization
    x -> (x - mean) / std. Stds below the floor are clamped (or rejected)."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    std_floor: float = 1e-8
    floor_policy: str = "clamp"

    def channels(self) -> list[str]:
        return sorted(self.mean)

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std),
                "std_floor": self.std_floor, "floor_policy": self.floor_policy}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=dict(d["mean"]), std=dict(d["std"]),
                   std_floor=float(d.get("std_floor", 1e-8)),
                   floor_policy=str(d.get("floor_policy", "clamp")))

    def matches(self, other: "NormStats", rtol: float = 1e-9) -> bool:
        if set(self.mean) != set(other.mean):
            return False
        return all(
            np.isclose(self.mean[c], other.mean[c], rtol=rtol, atol=1e-12)
            and np.isclose(self.std[c], other.std[c], rtol=rtol, atol=1e-12)
            for c in self.mean)


class _Accumulator:
    __slots__ = ("n", "total", "sq")

    def __init__(self):
        self.n = 0.0
        self.total = 0.0
        self.sq = 0.0

    def add(self, values) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        self.n += v.size
        self.total += v.sum()
        self.sq += (v * v).sum()

    def stats(self) -> tuple[float, float]:
        mean = float(self.total / self.n)
        var = max(self.sq / self.n - mean * mean, 0.0)
        return mean, float(np.sqrt(var))


def fit_norm_stats(sequences, std_floor: float = 1e-8,
                   floor_policy: str = "clamp") -> NormStats:
    """Population mean/std per channel over every pixel of every training
    frame, plus statistics for the strain value, the per-step increments of
    the macro stress/damage means, and the final damage pattern."""
    if floor_policy not in ("clamp", "reject"):
        raise ValueError(f"unknown floor policy {floor_policy!r}")
    acc: dict[str, _Accumulator] = {}

    def bucket(name: str) -> _Accumulator:
        if name not in acc:
            acc[name] = _Accumulator()
        return acc[name]

    count = 0
    for seq in sequences:
        count += 1
        bucket(CH_MICRO).add(seq.micro)
        if seq.final_damage is not None:
            bucket(CH_FINAL_DAMAGE).add(seq.final_damage)
        prev = None
        for frame in seq.frames:
            bucket(CH_STRAIN).add(frame.strain)
            for name, arr in frame.channels.items():
                bucket(name).add(arr)
            if prev is not None:
                # increment channels are macro quantities: per-step changes
                # of the mean von Mises stress and the mean damage
                bucket(CH_DSVM).add(frame.macro_von_mises()
                                    - prev.macro_von_mises())
                bucket(CH_DDMG).add(
                    frame.channels[CH_DAMAGE].astype(np.float64).mean()
                    - prev.channels[CH_DAMAGE].astype(np.float64).mean())
            prev = frame
    if count == 0:
        raise ValueError("cannot fit normalization stats on zero sequences")

    stats = NormStats(std_floor=std_floor, floor_policy=floor_policy)
    for name, a in acc.items():
        mean, std = a.stats()
        if std < std_floor:
            if floor_policy == "reject":
                raise ValueError(
                    f"channel {name} is degenerate (std {std:.3e} below "
                    f"floor {std_floor:.3e})")
            std = std_floor
        stats.mean[name] = mean
        stats.std[name] = std
    return stats


def normalize(channels: dict[str, np.ndarray], stats: NormStats
              ) -> dict[str, np.ndarray]:
    """Apply (x - mean) / std per channel; unknown channels are an error."""
    out = {}
    for name, arr in channels.items():
        if name not in stats.mean:
            raise KeyError(f"no normalization stats for channel {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        out[name] = (a - stats.mean[name]) / stats.std[name]
    return out


def denormalize(channels: dict[str, np.ndarray], stats: NormStats
                ) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in channels.items():
        if name not in stats.mean:
            raise KeyError(f"no normalization stats for channel {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        out[name] = a * stats.std[name] + stats.mean[name]
    return out


def normalize_value(value, name: str, stats: NormStats):
    if name not in stats.mean:
        raise KeyError(f"no normalization stats for channel {name!r}")
    return (np.asarray(value, dtype=np.float64) - stats.mean[name]) / stats.std[name]


def denormalize_value(value, name: str, stats: NormStats):
    if name not in stats.mean:
        raise KeyError(f"no normalization stats for channel {name!r}")
    return np.asarray(value, dtype=np.float64) * stats.std[name] + stats.mean[name]


def save_norm_stats(stats: NormStats, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"std_floor = {stats.std_floor!r}",
             f"floor_policy = {stats.floor_policy}"]
    for name in stats.channels():
        lines.append(f"{name} = {stats.mean[name]!r} {stats.std[name]!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def load_norm_stats(path) -> NormStats:
    path = Path(path)
    stats = NormStats()
    for lineno, line in enumerate(path.read_text(encoding="ascii")
                                  .splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in text.split("=", 1))
        if key == "std_floor":
            stats.std_floor = float(value)
        elif key == "floor_policy":
            stats.floor_policy = value
        else:
            parts = value.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 'mean std' for {key}")
            stats.mean[key] = float(parts[0])
            stats.std[key] = float(parts[1])
    if not stats.mean:
        raise ValueError(f"{path}: no channel statistics found")
    return stats


class ChannelNormalizer(BaseEstimator, TransformerMixin):
    """Sklearn-style wrapper around the channel normalization.

    ``fit`` consumes an iterable of deformation sequences; ``transform`` and
    ``inverse_transform`` operate on channel dicts.
    """

    def __init__(self, std_floor: float = 1e-8, floor_policy: str = "clamp"):
        self.std_floor = std_floor
        self.floor_policy = floor_policy

    def fit(self, X, y=None):
        self.stats_ = fit_norm_stats(X, std_floor=self.std_floor,
                                     floor_policy=self.floor_policy)
        return self

    def transform(self, X: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._check_fitted()
        return normalize(X, self.stats_)

    def inverse_transform(self, X: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._check_fitted()
        return denormalize(X, self.stats_)

    def _check_fitted(self):
        if not hasattr(self, "stats_"):
            raise RuntimeError("ChannelNormalizer is not fitted")


# --------------------------------------------------------------------------
# augmentation and desk-scale reduction


def mirror_augment(seq: DeformationSequence,
                   suffix: str = "-mir") -> DeformationSequence:
    """Horizontal mirror of a sequence; the shear channel flips sign,
    strains and frame count are preserved."""

    def flip(arr: np.ndarray, negate: bool = False) -> np.ndarray:
        out = arr[:, ::-1].copy()
        return -out if negate else out

    micro = flip(seq.micro)
    frames = []
    for f in seq.frames:
        channels = {name: flip(arr, negate=(name == CH_S12))
                    for name, arr in f.channels.items()}
        frames.append(FieldFrame(strain=f.strain, channels=channels,
                                 micro=micro))
    out = DeformationSequence(
        case_id=seq.case_id + suffix, micro=micro, frames=frames,
        uts_index=seq.uts_index,
        final_damage=None if seq.final_damage is None else flip(seq.final_damage),
        seed=seq.seed)
    return out.validate()


def downsample_sequence(seq: DeformationSequence,
                        factor: int) -> DeformationSequence:
    """Block-mean reduction of every channel by an integer factor."""
    size = seq.shape[0]
    if size % factor:
        raise ValueError(f"grid {size} not divisible by factor {factor}")

    def reduce(arr: np.ndarray) -> np.ndarray:
        a = arr.astype(np.float64)
        n = size // factor
        return (a.reshape(n, factor, n, factor).mean(axis=(1, 3))
                .astype(arr.dtype))

    micro = reduce(seq.micro.astype(np.float32))
    frames = [FieldFrame(strain=f.strain,
                         channels={c: reduce(a) for c, a in f.channels.items()},
                         micro=micro)
              for f in seq.frames]
    out = DeformationSequence(
        case_id=seq.case_id, micro=micro, frames=frames,
        final_damage=None if seq.final_damage is None
        else reduce(seq.final_damage),
        seed=seq.seed)
    return out.finalize()


# --------------------------------------------------------------------------
# case container I/O


def _write_frame_file(path: Path, channels: dict[str, np.ndarray]) -> None:
    names = list(channels)
    shape = channels[names[0]].shape
    h, w = shape
    header = bytearray()
    header += struct.pack("<4sHHHB", MAGIC, FORMAT_VERSION, h, w, len(names))
    for name in names:
        raw = name.encode("ascii")
        header += struct.pack("<B", len(raw)) + raw
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for name in names:
            arr = np.ascontiguousarray(channels[name], dtype="<f4")
            if arr.shape != shape:
                raise ValueError(f"channel {name} shape {arr.shape} != {shape}")
            fh.write(arr.tobytes())


def _read_frame_file(path: Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    off = 0

    def need(n: int, what: str):
        nonlocal off
        if off + n > len(data):
            raise CaseFormatError(
                f"{path}: truncated while reading {what} at byte {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    magic, version, h, w, nch = struct.unpack("<4sHHHB", need(11, "header"))
    if magic != MAGIC:
        raise CaseFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise CaseFormatError(f"{path}: unsupported version {version} at byte 4")
    names = []
    for i in range(nch):
        (ln,) = struct.unpack("<B", need(1, f"name length {i}"))
        names.append(need(ln, f"channel name {i}").decode("ascii"))
    out = {}
    plane = h * w * 4
    for name in names:
        raw = need(plane, f"channel {name}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    if off != len(data):
        raise CaseFormatError(
            f"{path}: {len(data) - off} trailing bytes at byte {off}")
    return out


def write_case(seq: DeformationSequence, case_dir) -> Path:
    """Serialize a validated sequence into a case directory."""
    seq.validate()
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    channel_names = list(seq.frames[0].channels)
    for i, frame in enumerate(seq.frames):
        if list(frame.channels) != channel_names:
            raise ValueError(f"frame {i} channel set differs")
        _write_frame_file(case_dir / f"frame_{i:04d}.bin", frame.channels)
    _write_frame_file(case_dir / "micro.bin",
                      {CH_MICRO: seq.micro.astype(np.float32)})
    if seq.final_damage is not None:
        _write_frame_file(case_dir / "final.bin",
                          {CH_FINAL_DAMAGE: seq.final_damage})
    strains = ",".join(repr(float(f.strain)) for f in seq.frames)
    lines = [
        f"case_id = {seq.case_id}",
        f"seed = {-1 if seq.seed is None else seq.seed}",
        f"channels = {','.join(channel_names)}",
        f"n_frames = {len(seq.frames)}",
        f"uts_index = {seq.uts_index}",
        f"strains = {strains}",
        "micro = micro.bin",
    ]
    if seq.final_damage is not None:
        lines.append("final_damage = final.bin")
    (case_dir / "manifest.txt").write_text("\n".join(lines) + "\n",
                                           encoding="ascii")
    return case_dir


def read_case(case_dir) -> DeformationSequence:
    case_dir = Path(case_dir)
    manifest = case_dir / "manifest.txt"
    if not manifest.exists():
        raise CaseFormatError(f"{case_dir}: missing manifest.txt")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(manifest.read_text(encoding="ascii")
                                  .splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise CaseFormatError(f"{manifest}:{lineno}: expected key = value")
        key, value = (p.strip() for p in text.split("=", 1))
        entries[key] = value
    for key in ("case_id", "channels", "n_frames", "uts_index", "strains",
                "micro"):
        if key not in entries:
            raise CaseFormatError(f"{manifest}: missing key {key!r}")

    channel_names = entries["channels"].split(",")
    n_frames = int(entries["n_frames"])
    strains = [float(s) for s in entries["strains"].split(",")]
    if len(strains) != n_frames:
        raise CaseFormatError(
            f"{manifest}: {n_frames} frames but {len(strains)} strain values")

    micro_channels = _read_frame_file(case_dir / entries["micro"])
    if CH_MICRO not in micro_channels:
        raise CaseFormatError(f"{case_dir}: micro file lacks channel "
                              f"{CH_MICRO!r}")
    micro = micro_channels[CH_MICRO]

    frames = []
    for i in range(n_frames):
        path = case_dir / f"frame_{i:04d}.bin"
        if not path.exists():
            raise CaseFormatError(f"{case_dir}: missing frame file {path.name}")
        channels = _read_frame_file(path)
        missing = [c for c in channel_names if c not in channels]
        if missing:
            raise CaseFormatError(
                f"{path}: missing channels {missing}")
        frames.append(FieldFrame(strain=strains[i],
                                 channels={c: channels[c]
                                           for c in channel_names},
                                 micro=micro))

    final = None
    if "final_damage" in entries:
        fin = _read_frame_file(case_dir / entries["final_damage"])
        if CH_FINAL_DAMAGE not in fin:
            raise CaseFormatError(
                f"{case_dir}: final damage file lacks channel "
                f"{CH_FINAL_DAMAGE!r}")
        final = fin[CH_FINAL_DAMAGE]

    seed = int(entries.get("seed", "-1"))
    seq = DeformationSequence(
        case_id=entries["case_id"], micro=micro, frames=frames,
        uts_index=int(entries["uts_index"]), final_damage=final,
        seed=None if seed < 0 else seed)
    return seq.validate()
