"""Shared encoder-decoder network used by every surrogate stage.

A stem convolution lifts the input to ``base_channels``, then each encoder
level halves the spatial size and doubles the channel count with a stride-2
convolution, reaching ``base_channels * 2**levels`` at the bottleneck. The
decoder mirrors the encoder with transposed convolutions and concatenates the
matching encoder feature at every level. The head is a 1x1 convolution with a
linear or sigmoid activation.

Checkpoints are a single binary file: magic ``CNET``, a version word, a JSON
header (architecture, optional normalization stats, metadata, tensor table)
and the raw tensor blobs in table order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .ingest import NormStats

CHECKPOINT_MAGIC = b"CNET"
CHECKPOINT_VERSION = 1

_DTYPES = {"f4": torch.float32, "f8": torch.float64, "i8": torch.int64}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}
_NUMPY_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; the message carries the byte offset."""


@dataclass
class UNetConfig:
    """Architecture hyperparameters.

    ``image_size`` must be divisible by ``2**levels``; the bottleneck then
    sits at ``image_size / 2**levels`` pixels and
    ``base_channels * 2**levels`` channels.
    """

    in_channels: int
    out_channels: int
    levels: int = 8
    base_channels: int = 8
    image_size: int = 256
    final_activation: str = "linear"

    def validate(self) -> "UNetConfig":
        for name in ("in_channels", "out_channels", "levels", "base_channels",
                     "image_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.final_activation not in ("linear", "sigmoid"):
            raise ValueError(
                f"final_activation must be linear or sigmoid, "
                f"got {self.final_activation!r}")
        if self.image_size % (2 ** self.levels):
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"2**levels = {2 ** self.levels}")
        return self

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.levels

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.levels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d).validate()


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    # stride-2, kernel 4, pad 1: exact halving for even sizes
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True))


def _upconv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True))


def _fuse_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True))


class FieldUNet(nn.Module):
    """Encoder-decoder with skip connections at every level.

    ``skip_gain`` scales the concatenated encoder features; 0.0 ablates the
    skips without changing any tensor shape.
    """

    def __init__(self, config: UNetConfig, skip_gain: float = 1.0):
        super().__init__()
        config.validate()
        self.config = config
        self.skip_gain = skip_gain
        b = config.base_channels

        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, b, kernel_size=3, stride=1,
                      padding=1),
            nn.BatchNorm2d(b),
            nn.ReLU(inplace=True))
        self.encoders = nn.ModuleList(
            [_conv_block(b * 2 ** i, b * 2 ** (i + 1))
             for i in range(config.levels)])
        self.upconvs = nn.ModuleList(
            [_upconv_block(b * 2 ** (i + 1), b * 2 ** i)
             for i in reversed(range(config.levels))])
        self.fusers = nn.ModuleList(
            [_fuse_block(2 * b * 2 ** i, b * 2 ** i)
             for i in reversed(range(config.levels))])
        self.head = nn.Conv2d(b, config.out_channels, kernel_size=1)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for enc in self.encoders:
            feats.append(enc(feats[-1]))
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.image_size or \
                x.shape[-2] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}px input, "
                f"got {tuple(x.shape[-2:])}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, "
                f"got {x.shape[1]}")
        feats = self.encode(x)
        y = feats[-1]
        for i, (up, fuse) in enumerate(zip(self.upconvs, self.fusers)):
            y = up(y)
            skip = feats[-(i + 2)]
            y = fuse(torch.cat([y, self.skip_gain * skip], dim=1))
        y = self.head(y)
        if self.config.final_activation == "sigmoid":
            y = torch.sigmoid(y)
        return y


def build(config: UNetConfig, seed: int = 0,
          skip_gain: float = 1.0) -> FieldUNet:
    """Construct a network with seeded, reproducible initialization."""
    torch.manual_seed(seed)
    return FieldUNet(config, skip_gain=skip_gain)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, model: FieldUNet, stats: NormStats | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    table = []
    blobs = []
    for name in sorted(state):
        t = state[name].detach().cpu()
        if t.dtype not in _DTYPE_NAMES:
            raise ValueError(f"tensor {name} has unsupported dtype {t.dtype}")
        dtype = _DTYPE_NAMES[t.dtype]
        arr = np.ascontiguousarray(t.numpy()).astype(_NUMPY_DTYPES[dtype])
        table.append({"name": name, "dtype": dtype,
                      "shape": list(t.shape)})
        blobs.append(arr.tobytes())
    header = {
        "config": model.config.to_dict(),
        "skip_gain": model.skip_gain,
        "stats": None if stats is None else stats.to_dict(),
        "meta": meta or {},
        "tensors": table,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[FieldUNet, NormStats | None, dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise CheckpointFormatError(f"{path}: truncated header at byte 0")
    magic, version, hlen = struct.unpack("<4sII", data[:12])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported version {version} at byte 4")
    off = 12
    if off + hlen > len(data):
        raise CheckpointFormatError(
            f"{path}: truncated JSON header at byte {off}")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen

    config = UNetConfig.from_dict(header["config"])
    model = FieldUNet(config, skip_gain=float(header.get("skip_gain", 1.0)))
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        np_dtype = _NUMPY_DTYPES[entry["dtype"]]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        if off + nbytes > len(data):
            raise CheckpointFormatError(
                f"{path}: truncated tensor {entry['name']} at byte {off}")
        arr = np.frombuffer(data[off:off + nbytes],
                            dtype=np_dtype).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(
            _DTYPES[entry["dtype"]])
        off += nbytes
    if off != len(data):
        raise CheckpointFormatError(
            f"{path}: {len(data) - off} trailing bytes at byte {off}")
    model.load_state_dict(state, strict=True)
    model.eval()

    stats = None if header["stats"] is None else NormStats.from_dict(
        header["stats"])
    return model, stats, header.get("meta", {})
