"""Synthetic fiber microstructure generation.

Generates random non-overlapping fiber center layouts for a square cross
section, rasterizes them to a binary pixel mask, and round-trips layouts
through a small text format. Placement is deterministic per seed: sequential
rejection sampling first, then a seeded soft-repulsion relaxation pass for
packing densities where plain rejection jams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import GRID_SIZE
from .validation import check_binary, check_positive

DEFAULT_DOMAIN_UM = 54.0
DEFAULT_FIBER_DIAMETER_UM = 7.0
DEFAULT_MIN_GAP_UM = 0.35
DEFAULT_TARGET_VF = 0.5
VF_TOLERANCE = 0.02


class PlacementError(RuntimeError):
    """Raised when a layout cannot satisfy the packing constraints."""


@dataclass
class MicrostructureParams:
    domain_size: float = DEFAULT_DOMAIN_UM
    fiber_diameter: float = DEFAULT_FIBER_DIAMETER_UM
    min_gap: float = DEFAULT_MIN_GAP_UM
    target_vf: float = DEFAULT_TARGET_VF
    max_attempts: int = 2000
    relax_iterations: int = 20000

    def validate(self) -> "MicrostructureParams":
        check_positive(self.domain_size, "domain_size")
        check_positive(self.fiber_diameter, "fiber_diameter")
        check_positive(self.min_gap, "min_gap", strict=False)
        if not 0.0 <= self.target_vf < 1.0:
            raise ValueError(f"target_vf must be in [0, 1), got {self.target_vf}")
        if self.fiber_diameter >= self.domain_size:
            raise ValueError("fiber diameter must be smaller than the domain")
        # gap-inflated disks must stay clearly below the disk-packing limit
        inflated = self.target_vf * (
            (self.fiber_diameter + self.min_gap) / self.fiber_diameter) ** 2
        if inflated > 0.85:
            raise ValueError(
                f"target_vf {self.target_vf} with gap {self.min_gap} needs "
                f"an effective disk fraction of {inflated:.3f}; not packable")
        return self

    @property
    def radius(self) -> float:
        return 0.5 * self.fiber_diameter

    def fiber_count(self) -> int:
        """Number of fibers whose analytic area fraction best matches target_vf."""
        area = np.pi * self.radius ** 2
        return int(round(self.target_vf * self.domain_size ** 2 / area))


@dataclass
class FiberLayout:
    centers: np.ndarray  # (n, 2) in um
    radius: float
    domain_size: float
    min_gap: float = DEFAULT_MIN_GAP_UM
    seed: int | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)

    @property
    def n_fibers(self) -> int:
        return self.centers.shape[0]

    def analytic_vf(self) -> float:
        return self.n_fibers * np.pi * self.radius ** 2 / self.domain_size ** 2

    def validate(self, gap_tol: float = 1e-7) -> "FiberLayout":
        c = self.centers
        r = self.radius
        if c.size:
            if c.min() < r - gap_tol or c.max() > self.domain_size - r + gap_tol:
                raise ValueError("fibers must lie wholly inside the domain")
            d = _pairwise_distances(c)
            required = 2.0 * r + self.min_gap
            if d.size and d.min() < required - gap_tol:
                raise ValueError(
                    f"minimum center distance {d.min():.6f} violates "
                    f"required {required:.6f}")
        return self

    def mirrored(self) -> "FiberLayout":
        """Reflect about the vertical axis (x -> domain - x)."""
        c = self.centers.copy()
        if c.size:
            c[:, 0] = self.domain_size - c[:, 0]
        return FiberLayout(c, self.radius, self.domain_size, self.min_gap, self.seed)


@dataclass
class MicrostructureGrid:
    mask: np.ndarray  # (N, N) uint8, 1 = fiber
    domain_size: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask)

    def validate(self) -> "MicrostructureGrid":
        if self.mask.ndim != 2 or self.mask.shape[0] != self.mask.shape[1]:
            raise ValueError(f"grid must be square 2-D, got {self.mask.shape}")
        check_binary(self.mask, "microstructure mask")
        return self

    @property
    def grid_size(self) -> int:
        return self.mask.shape[0]

    @property
    def pixel_size(self) -> float:
        return self.domain_size / self.grid_size

    def achieved_vf(self) -> float:
        return float(self.mask.mean())


def _pairwise_distances(centers: np.ndarray) -> np.ndarray:
    n = centers.shape[0]
    if n < 2:
        return np.empty(0)
    diff = centers[:, None, :] - centers[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    return d[np.triu_indices(n, k=1)]


def generate_fiber_centers(params: MicrostructureParams,
                           seed: int) -> FiberLayout:
    """Place the fiber centers for one case.

    Sequential rejection sampling up to ``max_attempts`` draws per fiber;
    if that stalls (dense targets jam under plain rejection), restart from a
    seeded random cloud and relax overlaps with pairwise push-apart steps.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    n = params.fiber_count()
    r = params.radius
    lo, hi = r, params.domain_size - r
    if n == 0:
        return FiberLayout(np.empty((0, 2)), r, params.domain_size,
                           params.min_gap, seed)
    if hi <= lo:
        raise PlacementError("domain too small for a whole fiber")
    dmin = 2.0 * r + params.min_gap

    placed = _rejection_fill(rng, n, lo, hi, dmin, params.max_attempts)
    if placed is None:
        placed = _relax_fill(rng, n, lo, hi, dmin, params.relax_iterations)
    if placed is None:
        raise PlacementError(
            f"could not place {n} fibers at vf={params.target_vf} "
            f"with gap {params.min_gap}")
    layout = FiberLayout(placed, r, params.domain_size, params.min_gap, seed)
    return layout.validate()


def _rejection_fill(rng, n, lo, hi, dmin, max_attempts):
    centers = np.empty((n, 2))
    count = 0
    dmin2 = dmin * dmin
    for i in range(n):
        for _ in range(max_attempts):
            p = rng.uniform(lo, hi, size=2)
            if count == 0:
                break
            d2 = ((centers[:count] - p) ** 2).sum(1)
            if d2.min() >= dmin2:
                break
        else:
            return None
        centers[i] = p
        count += 1
    return centers


def _relax_fill(rng, n, lo, hi, dmin, iterations):
    # Soft-disk relaxation: push every overlapping pair apart by half the
    # deficit plus a small slack, clamp to bounds, repeat until clean.
    centers = rng.uniform(lo, hi, size=(n, 2))
    slack = 1e-3 * dmin
    for _ in range(iterations):
        diff = centers[:, None, :] - centers[None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        overlap = d < dmin
        if not overlap.any():
            return centers
        push = np.zeros_like(centers)
        ii, jj = np.nonzero(np.triu(overlap, k=1))
        for a, b in zip(ii, jj):
            v = centers[a] - centers[b]
            dist = d[a, b]
            if dist < 1e-12:
                ang = rng.uniform(0, 2 * np.pi)
                v = np.array([np.cos(ang), np.sin(ang)])
                dist = 1e-12
            step = 0.5 * (dmin - dist + slack) * v / dist
            push[a] += step
            push[b] -= step
        centers = np.clip(centers + push, lo, hi)
    # Final check after the last clamp.
    d = _pairwise_distances(centers)
    if d.size == 0 or d.min() >= dmin:
        return centers
    return None


def rasterize(layout: FiberLayout, grid_size: int = GRID_SIZE) -> MicrostructureGrid:
    """Binary mask: pixel is fiber iff its center lies inside some disk."""
    L = layout.domain_size
    coords = (np.arange(grid_size) + 0.5) * (L / grid_size)
    mask = np.zeros((grid_size, grid_size), dtype=np.uint8)
    r2 = layout.radius ** 2
    xs = coords[None, :]
    ys = coords[:, None]
    for cx, cy in layout.centers:
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r2
        mask |= inside.astype(np.uint8)
    return MicrostructureGrid(mask, L).validate()


def generate_microstructure(params: MicrostructureParams, seed: int,
                            grid_size: int = GRID_SIZE
                            ) -> tuple[FiberLayout, MicrostructureGrid]:
    """Layout plus rasterized mask, with the volume-fraction tolerance check."""
    layout = generate_fiber_centers(params, seed)
    grid = rasterize(layout, grid_size)
    if abs(grid.achieved_vf() - params.target_vf) > VF_TOLERANCE:
        raise PlacementError(
            f"achieved vf {grid.achieved_vf():.4f} outside +-{VF_TOLERANCE} "
            f"of target {params.target_vf}")
    return layout, grid


def nearest_neighbor_distances(layout: FiberLayout) -> np.ndarray:
    if layout.n_fibers < 2:
        raise ValueError("need at least 2 fibers for nearest-neighbor distances")
    c = layout.centers
    diff = c[:, None, :] - c[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return d.min(1)


def nnd_histogram(layout: FiberLayout, bins: int = 10,
                  value_range: tuple[float, float] | None = None):
    """Histogram of center-to-nearest-center distances."""
    nnd = nearest_neighbor_distances(layout)
    return np.histogram(nnd, bins=bins, range=value_range)


def save_layout(layout: FiberLayout, path) -> None:
    """Text format: one header line (domain, diameter, seed), then x y pairs."""
    seed = -1 if layout.seed is None else int(layout.seed)
    lines = [f"{layout.domain_size:.6f} {2.0 * layout.radius:.6f} {seed}"]
    for x, y in layout.centers:
        lines.append(f"{x:.6f} {y:.6f}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_layout(path, min_gap: float = DEFAULT_MIN_GAP_UM) -> FiberLayout:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"empty layout file: {path}")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError(f"bad layout header: {lines[0]!r}")
    domain, diameter = float(head[0]), float(head[1])
    seed = int(head[2])
    centers = np.array([[float(v) for v in ln.split()] for ln in lines[1:]],
                       dtype=np.float64).reshape(-1, 2)
    return FiberLayout(centers, 0.5 * diameter, domain, min_gap,
                       None if seed < 0 else seed)
