"""Shared field containers: per-frame channel grids and deformation sequences.

A case is a sequence of frames on a fixed pixel grid. Every frame carries the
applied macroscopic strain and a dict of named channel arrays; the sequence
adds the microstructure mask, the index of the frame with the highest macro
von Mises stress, and the final damage pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_finite, check_unit_interval

# Canonical channel names. These are also the on-disk names in case
# containers, so they stay short and ascii.
CH_S11 = "s11"
CH_S22 = "s22"
CH_S12 = "s12"
CH_SVM = "svm"
CH_DAMAGE = "dmg"
CH_MICRO = "micro"

# Normalization-statistic keys that are not frame channels.
CH_STRAIN = "eps"
CH_DSVM = "dsvm"
CH_DDMG = "ddmg"
CH_FINAL_DAMAGE = "final"

STRESS_CHANNELS = (CH_S11, CH_S22, CH_S12)
STATE_CHANNELS = (CH_S11, CH_S22, CH_S12, CH_SVM, CH_DAMAGE)

GRID_SIZE = 256


def von_mises_plane_stress(s11, s22, s12):
    """Von Mises stress for a plane-stress state, elementwise."""
    s11 = np.asarray(s11, dtype=np.float64)
    s22 = np.asarray(s22, dtype=np.float64)
    s12 = np.asarray(s12, dtype=np.float64)
    return np.sqrt(s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12)


@dataclass
class FieldFrame:
    """One strain step: applied strain plus named channel grids."""

    strain: float
    channels: dict[str, np.ndarray]
    micro: np.ndarray | None = None

    def validate(self) -> "FieldFrame":
        if not self.channels:
            raise ValueError("frame has no channels")
        shapes = {name: arr.shape for name, arr in self.channels.items()}
        first = next(iter(shapes.values()))
        for name, shape in shapes.items():
            if shape != first:
                raise ValueError(
                    f"channel {name} shape {shape} != {first}")
            if len(shape) != 2:
                raise ValueError(f"channel {name} must be 2-D, got {shape}")
            check_finite(self.channels[name], f"channel {name}")
        if CH_SVM in self.channels and self.channels[CH_SVM].size:
            if self.channels[CH_SVM].min() < 0:
                raise ValueError("von Mises channel must be non-negative")
        if CH_DAMAGE in self.channels:
            check_unit_interval(self.channels[CH_DAMAGE], "damage channel",
                                atol=1e-6)
        if self.micro is not None and self.micro.shape != first:
            raise ValueError(
                f"microstructure shape {self.micro.shape} != channel shape {first}")
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.channels.values())).shape

    def macro_von_mises(self) -> float:
        return float(np.mean(self.channels[CH_SVM]))


@dataclass
class DeformationSequence:
    """An ordered stack of frames for one case."""

    case_id: str
    micro: np.ndarray
    frames: list[FieldFrame] = field(default_factory=list)
    uts_index: int = 0
    final_damage: np.ndarray | None = None
    seed: int | None = None

    def macro_curve(self) -> np.ndarray:
        return np.array([f.macro_von_mises() for f in self.frames])

    def strains(self) -> np.ndarray:
        return np.array([f.strain for f in self.frames])

    def finalize(self) -> "DeformationSequence":
        """Recompute uts_index from the macro curve and validate."""
        if self.frames:
            self.uts_index = int(np.argmax(self.macro_curve()))
        return self.validate()

    def validate(self) -> "DeformationSequence":
        if not self.frames:
            raise ValueError("sequence has no frames")
        strains = self.strains()
        if strains[0] != 0.0:
            raise ValueError(f"first frame strain must be 0, got {strains[0]}")
        if np.any(np.diff(strains) <= 0):
            raise ValueError("frame strains must be strictly increasing")
        for f in self.frames:
            f.validate()
        shape = self.frames[0].shape
        if self.micro.shape != shape:
            raise ValueError(
                f"microstructure shape {self.micro.shape} != frame shape {shape}")
        curve = self.macro_curve()
        if self.uts_index != int(np.argmax(curve)):
            raise ValueError(
                f"uts_index {self.uts_index} does not maximize the macro curve "
                f"(argmax {int(np.argmax(curve))})")
        if self.final_damage is not None:
            if self.final_damage.shape != shape:
                raise ValueError("final damage shape mismatch")
            check_unit_interval(self.final_damage, "final damage", atol=1e-6)
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


@dataclass
class UnstructuredField:
    """A triangulated point cloud with nodal scalar fields."""

    points: np.ndarray
    cells: np.ndarray
    point_data: dict[str, np.ndarray]

    def validate(self) -> "UnstructuredField":
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("mesh has no points")
        check_finite(pts, "points")
        cells = np.asarray(self.cells)
        if cells.size:
            if cells.ndim != 2 or cells.shape[1] != 3:
                raise ValueError(f"cells must be (M, 3), got {cells.shape}")
            if cells.min() < 0 or cells.max() >= pts.shape[0]:
                raise ValueError("cell indices out of range")
        for name, values in self.point_data.items():
            v = np.asarray(values)
            if v.shape != (pts.shape[0],):
                raise ValueError(
                    f"point_data[{name}] must have shape ({pts.shape[0]},), "
                    f"got {v.shape}")
            check_finite(v, f"point_data[{name}]")
        self.points = pts
        return self
