"""Pixelwise constitutive driver used to generate ground-truth sequences.

The driver replaces a full finite-element solve with a strain-partitioning
rule on the pixel grid: every pixel sees the applied macroscopic strain
scaled by a phase factor and a smooth fiber-proximity concentration field.
Pixels are then integrated independently:

* matrix pixels run an elasto-plastic update (pressure-sensitive quadratic
  yield surface, power-law hardening modulus) followed by a viscous damage
  update gated on a strain criterion,
* fiber pixels are transversely isotropic linear elastic, progressively
  unloaded as their surrounding interface degrades,
* interface-band pixels (matrix within a pixel of a fiber surface) follow a
  bilinear cohesive traction-separation law on an effective opening.

Stresses are in MPa throughout; config files carry the GPa / nm table values
and are converted on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .fields import (CH_DAMAGE, CH_S11, CH_S12, CH_S22, CH_SVM,
                     DeformationSequence, FieldFrame, von_mises_plane_stress)
from .microgen import MicrostructureGrid
from .validation import check_positive


class ConvergenceError(RuntimeError):
    """A pixel's local stress update did not settle within the iteration cap."""


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class MatrixParams:
    """Epoxy matrix constants, MPa / dimensionless."""

    E: float = 3900.0
    nu: float = 0.39
    sigma_c: float = 79.0
    sigma_t: float = 62.0
    eps_c: float = 0.35
    eps_t: float = 0.04
    hard_a: float = 20000.0
    hard_b: float = 12.0
    dmg_A: float = 0.95
    dmg_B: float = 2.0
    mu: float = 10.0
    tau0: float = 0.02
    sigma_y0: float = 62.0  # defaults to sigma_t

    def validate(self) -> "MatrixParams":
        check_positive(self.E, "matrix E")
        if not 0.0 < self.nu < 0.5:
            raise ValueError(f"matrix nu must be in (0, 0.5), got {self.nu}")
        if not self.sigma_c > self.sigma_t > 0:
            raise ValueError("need sigma_c > sigma_t > 0")
        if not self.eps_c > self.eps_t > 0:
            raise ValueError("need eps_c > eps_t > 0")
        if not 0.0 < self.dmg_A < 1.0:
            raise ValueError(f"damage A must be in (0, 1), got {self.dmg_A}")
        check_positive(self.dmg_B, "damage B")
        check_positive(self.mu, "mu", strict=False)
        check_positive(self.tau0, "tau0")
        check_positive(self.sigma_y0, "sigma_y0")
        return self


@dataclass
class FiberParams:
    """Carbon fiber constants, MPa. In-plane response of a transverse
    section is isotropic with E2 and nu23 = E2 / (2 G23) - 1."""

    E1: float = 233000.0
    E2: float = 23100.0
    G12: float = 8960.0
    G23: float = 8270.0
    nu12: float = 0.2

    def validate(self) -> "FiberParams":
        for name in ("E1", "E2", "G12", "G23"):
            check_positive(getattr(self, name), f"fiber {name}")
        nu23 = self.nu23
        if not 0.0 < nu23 < 0.5:
            raise ValueError(f"derived nu23 {nu23:.4f} out of (0, 0.5)")
        return self

    @property
    def nu23(self) -> float:
        return self.E2 / (2.0 * self.G23) - 1.0


@dataclass
class InterfaceParams:
    """Bilinear cohesive law: MPa tractions, nm openings, N/m energy."""

    Tc: float = 70.0
    delta_c: float = 1.0
    Gc: float = 8.75

    def validate(self) -> "InterfaceParams":
        check_positive(self.Tc, "Tc")
        check_positive(self.delta_c, "delta_c")
        check_positive(self.Gc, "Gc")
        if self.delta_f <= self.delta_c:
            raise ValueError(
                f"failure opening {self.delta_f:.3f} nm must exceed "
                f"delta_c {self.delta_c:.3f} nm")
        return self

    @property
    def delta_f(self) -> float:
        """Full-failure opening in nm, fixed by the fracture energy."""
        # Gc [N/m] over Tc [MPa]: Gc / (Tc * 1e6 Pa) is meters.
        return 2.0 * self.Gc / (self.Tc * 1e6) * 1e9


@dataclass
class DriverParams:
    """Strain schedule and partitioning settings for the pixel driver."""

    dt: float = 0.01            # pseudo-time step for the viscous damage update
    d_eps: float = 2e-4         # applied strain increment per frame
    eps_f: float = 0.012        # final applied strain
    substeps: int = 10          # pseudo-time substeps per strain increment
    max_iterations: int = 50    # plastic fixed-point cap per pixel per substep
    tolerance: float = 1e-8     # stress residual, MPa
    c_fiber: float = 0.2        # phase strain factor, fibers
    c_matrix: float = 2.0       # phase strain factor, matrix
    conc_amplitude: float = 5.0     # concentration field peak above baseline
    conc_length: float = 2.0        # concentration decay length, um
    conc_anisotropy: float = 2.0    # x-distance weight (>1 favors transverse bands)
    nu_lateral: float = 0.3         # prescribed lateral contraction ratio
    shear_coupling: float = 0.1     # prescribed shear amplitude factor
    band_width_px: float = 1.5      # interface band half-width, pixels
    czm_gauge_px: float = 20.0      # cohesive opening gauge length, pixels
    fiber_unload_exp: float = 3.0   # fiber unloading exponent on interface health

    def validate(self) -> "DriverParams":
        check_positive(self.dt, "dt")
        check_positive(self.d_eps, "d_eps")
        check_positive(self.eps_f, "eps_f")
        if self.eps_f < self.d_eps:
            raise ValueError("eps_f must be at least one strain increment")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        check_positive(self.tolerance, "tolerance")
        if not 0.0 < self.c_fiber < 1.0:
            raise ValueError(f"c_fiber must be in (0, 1), got {self.c_fiber}")
        if self.c_matrix <= 1.0:
            raise ValueError(f"c_matrix must be > 1, got {self.c_matrix}")
        check_positive(self.conc_length, "conc_length")
        check_positive(self.conc_anisotropy, "conc_anisotropy")
        return self

    def n_steps(self) -> int:
        return int(round(self.eps_f / self.d_eps))


@dataclass
class MaterialParams:
    matrix: MatrixParams = field(default_factory=MatrixParams)
    fiber: FiberParams = field(default_factory=FiberParams)
    interface: InterfaceParams = field(default_factory=InterfaceParams)
    driver: DriverParams = field(default_factory=DriverParams)

    def validate(self) -> "MaterialParams":
        self.matrix.validate()
        self.fiber.validate()
        self.interface.validate()
        self.driver.validate()
        return self


# Config keys carrying GPa values (converted to MPa on read, back on write).
_GPA_KEYS = {"matrix.E", "fiber.E1", "fiber.E2", "fiber.G12", "fiber.G23"}
_SECTIONS = ("matrix", "fiber", "interface", "driver")
_INT_KEYS = {"driver.substeps", "driver.max_iterations"}


def parse_material_params(text: str,
                          source: str = "<string>") -> MaterialParams:
    """Parse ``section.key = value`` lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in stripped.split("=", 1))
        raw[key] = value
    params = MaterialParams()
    parts = {name: getattr(params, name) for name in _SECTIONS}
    for key, value in raw.items():
        if "." not in key:
            raise ValueError(f"material key must be section.name: {key!r}")
        section, name = key.split(".", 1)
        if section not in parts or not hasattr(parts[section], name):
            raise ValueError(f"unknown material key: {key!r}")
        number = int(value) if key in _INT_KEYS else float(value)
        if key in _GPA_KEYS:
            number = number * 1000.0
        setattr(parts[section], name, number)
    return params.validate()


def load_material_params(path) -> MaterialParams:
    with open(path, "r", encoding="ascii") as fh:
        return parse_material_params(fh.read(), source=str(path))


def format_material_params(params: MaterialParams) -> str:
    lines = ["# material parameters (stresses MPa, moduli GPa, openings nm)"]
    for section in _SECTIONS:
        lines.append(f"# [{section}]")
        for name, value in asdict(getattr(params, section)).items():
            key = f"{section}.{name}"
            out = value / 1000.0 if key in _GPA_KEYS else value
            lines.append(f"{key} = {out!r}")
    return "\n".join(lines) + "\n"


def save_material_params(params: MaterialParams, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_material_params(params))


# --------------------------------------------------------------------------
# constitutive operations (elementwise over arrays or plain floats)


def stress_invariants(s11, s22, s12):
    """Plane-stress first invariant and second deviatoric invariant."""
    s11 = np.asarray(s11, dtype=np.float64)
    s22 = np.asarray(s22, dtype=np.float64)
    s12 = np.asarray(s12, dtype=np.float64)
    i1 = s11 + s22
    j2 = (s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12) / 3.0
    return i1, j2


def yield_phi(s11, s22, s12, sigma_c: float, sigma_t: float):
    """Pressure-sensitive quadratic yield function; yields where phi > 0."""
    i1, j2 = stress_invariants(s11, s22, s12)
    return 6.0 * j2 + 2.0 * i1 * (sigma_c - sigma_t) - 2.0 * sigma_c * sigma_t


def yield_f(s11, s22, s12, sigma_c: float, sigma_t: float):
    """Stress-dependent part of the yield function (phi without the constant)."""
    i1, j2 = stress_invariants(s11, s22, s12)
    return 6.0 * j2 + 2.0 * i1 * (sigma_c - sigma_t)


def yield_normal(s11, s22, s12, sigma_c: float, sigma_t: float):
    """Gradient of ``yield_f`` w.r.t. (s11, s22, s12)."""
    s11 = np.asarray(s11, dtype=np.float64)
    s22 = np.asarray(s22, dtype=np.float64)
    s12 = np.asarray(s12, dtype=np.float64)
    dk = sigma_c - sigma_t
    n1 = 2.0 * (2.0 * s11 - s22) + 2.0 * dk
    n2 = 2.0 * (2.0 * s22 - s11) + 2.0 * dk
    n3 = 12.0 * s12
    return n1, n2, n3


def hardening_modulus(sigma_v, params: MatrixParams):
    """Power-law modulus H = a (sigma_y0 / sigma_v) ** b, guarded near zero."""
    sv = np.maximum(np.asarray(sigma_v, dtype=np.float64), 1e-8)
    return params.hard_a * (params.sigma_y0 / sv) ** params.hard_b


def elastic_stiffness(E: float, nu: float) -> np.ndarray:
    """Plane-stress isotropic stiffness, engineering shear convention."""
    c = E / (1.0 - nu * nu)
    return np.array([
        [c, c * nu, 0.0],
        [c * nu, c, 0.0],
        [0.0, 0.0, c * (1.0 - nu) / 2.0],
    ])


def fiber_stiffness(params: FiberParams) -> np.ndarray:
    """In-plane stiffness of a transverse fiber section."""
    return elastic_stiffness(params.E2, params.nu23)


def elastoplastic_stiffness(s11: float, s22: float, s12: float,
                            De: np.ndarray, params: MatrixParams) -> np.ndarray:
    """Rank-one plastic reduction of the elastic stiffness at a stress state."""
    n = np.array(yield_normal(s11, s22, s12, params.sigma_c, params.sigma_t),
                 dtype=np.float64).reshape(3)
    sv = von_mises_plane_stress(s11, s22, s12)
    H = float(hardening_modulus(sv, params))
    Dn = De @ n
    denom = H + n @ Dn
    return De - np.outer(Dn, Dn) / denom


def damage_phi_prime(e11, e22, e12, eps_c: float, eps_t: float):
    """Strain analogue of the yield function; e12 is the tensor shear strain.

    Damage can evolve where phi' > 0.
    """
    e11 = np.asarray(e11, dtype=np.float64)
    e22 = np.asarray(e22, dtype=np.float64)
    e12 = np.asarray(e12, dtype=np.float64)
    i1 = e11 + e22
    j2 = (e11 * e11 - e11 * e22 + e22 * e22 + 3.0 * e12 * e12) / 3.0
    return 6.0 * j2 + 2.0 * i1 * (eps_c - eps_t) - 2.0 * eps_c * eps_t


def strain_energy_tau(s11, s22, s12, e11, e22, g12):
    """Equivalent measure tau = sqrt(2 N) from the strain energy density
    N = 0.5 sigma : eps (g12 is the engineering shear strain)."""
    n2 = np.asarray(s11) * e11 + np.asarray(s22) * e22 + np.asarray(s12) * g12
    return np.sqrt(np.maximum(n2, 0.0))


def damage_G(tau, params: MatrixParams):
    """Damage driving function; zero at tau0, asymptotes to 1."""
    tau = np.maximum(np.asarray(tau, dtype=np.float64), 1e-300)
    A, B, tau0 = params.dmg_A, params.dmg_B, params.tau0
    return 1.0 - tau0 * (1.0 - A) / tau - A * np.exp(B * (tau0 - tau))


def update_damage_and_threshold(d, Y, G, mu: float, dt: float):
    """Implicit viscous update of (d, Y); fires only where G > Y.

    Both variables move simultaneously from their previous values; d is
    clamped to [0, 1].
    """
    d = np.asarray(d, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    fire = G > Y
    denom = 1.0 + mu * dt
    d_new = np.where(fire, np.clip(d + dt * (G - Y) / denom, 0.0, 1.0), d)
    y_new = np.where(fire, (Y + mu * dt * G) / denom, Y)
    if d_new.ndim == 0:
        return float(d_new), float(y_new)
    return d_new, y_new


def cohesive_traction(delta, params: InterfaceParams):
    """Bilinear traction-separation law on the effective opening (nm -> MPa)."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("cohesive opening must be non-negative")
    dc, df, tc = params.delta_c, params.delta_f, params.Tc
    rising = tc * delta / dc
    falling = tc * (df - delta) / (df - dc)
    t = np.where(delta <= dc, rising, np.where(delta <= df, falling, 0.0))
    if t.ndim == 0:
        return float(t)
    return t


def cohesive_integrity(delta, params: InterfaceParams):
    """Residual stiffness fraction T(delta) / (k0 delta), 1 on the rising
    branch, 0 at full failure."""
    delta = np.asarray(delta, dtype=np.float64)
    dc = params.delta_c
    t = cohesive_traction(np.maximum(delta, 0.0), params)
    k0 = params.Tc / dc
    safe = np.maximum(delta, 1e-12)
    frac = np.where(delta <= dc, 1.0, t / (k0 * safe))
    if frac.ndim == 0:
        return float(frac)
    return frac


def cohesive_damage_progress(delta, params: InterfaceParams):
    """Softening-branch progress (delta - delta_c) / (delta_f - delta_c),
    clipped to [0, 1]: the damage variable exposed in the frames."""
    delta = np.asarray(delta, dtype=np.float64)
    prog = (delta - params.delta_c) / (params.delta_f - params.delta_c)
    prog = np.clip(prog, 0.0, 1.0)
    if prog.ndim == 0:
        return float(prog)
    return prog


# --------------------------------------------------------------------------
# concentration field and pixel partitioning


def fiber_surface_distances(grid: MicrostructureGrid, centers: np.ndarray,
                            radius: float, x_weight: float = 1.0):
    """Distances (um) from each pixel center to the nearest and second
    nearest fiber surface, with x displacements weighted by ``x_weight``."""
    n = grid.grid_size
    L = grid.domain_size
    coords = (np.arange(n) + 0.5) * (L / n)
    xs = coords[None, :]
    ys = coords[:, None]
    if centers.shape[0] == 0:
        big = np.full((n, n), np.inf)
        return big, big
    d = np.empty((centers.shape[0], n, n))
    for i, (cx, cy) in enumerate(centers):
        d[i] = np.sqrt((x_weight * (xs - cx)) ** 2 + (ys - cy) ** 2)
    d = np.maximum(d - radius, 0.0)
    if centers.shape[0] == 1:
        return d[0], np.full((n, n), np.inf)
    part = np.partition(d, 1, axis=0)
    return part[0], part[1]


def concentration_field(grid: MicrostructureGrid, centers: np.ndarray,
                        radius: float, driver: DriverParams):
    """Smooth strain-concentration field from two-fiber proximity.

    Hot where two fiber surfaces are both close (matrix ligaments); decays
    with the anisotropy-weighted distance sum. Returns the field used for
    normal-strain scaling (flat inside fibers) and the continuous field used
    for the shear shape.
    """
    d1, d2 = fiber_surface_distances(grid, centers, radius,
                                     x_weight=driver.conc_anisotropy)
    gap = np.where(np.isinf(d2), np.inf, d1 + d2)
    smooth = 1.0 + driver.conc_amplitude * np.exp(-gap / driver.conc_length)
    smooth = np.where(np.isfinite(smooth), smooth, 1.0)
    h = np.where(grid.mask.astype(bool), 1.0, smooth)
    return h, smooth


def shear_shape(smooth_field: np.ndarray) -> np.ndarray:
    """Antisymmetric shear pattern: x-gradient of the continuous
    concentration field (exactly sign-flips under a horizontal mirror)."""
    return np.gradient(smooth_field, axis=1)


# --------------------------------------------------------------------------
# case driver


def simulate_case(grid: MicrostructureGrid, params: MaterialParams,
                  centers: np.ndarray, radius: float,
                  case_id: str = "case", seed: int | None = None
                  ) -> DeformationSequence:
    """Integrate one microstructure through the full strain schedule.

    Returns a sequence with one frame per strain value from 0 to eps_f
    inclusive, the UTS frame index, and the final damage pattern.
    """
    params.validate()
    grid.validate()
    mat, fib, czm, drv = (params.matrix, params.fiber, params.interface,
                          params.driver)
    damage_on = mat.mu > 0.0

    mask = grid.mask.astype(bool)
    n = grid.grid_size
    px_um = grid.pixel_size
    gauge_nm = drv.czm_gauge_px * px_um * 1e3

    h, smooth = concentration_field(grid, centers, radius, drv)
    g12_shape = shear_shape(smooth)
    d1_iso, _ = fiber_surface_distances(grid, centers, radius, x_weight=1.0)
    band = (~mask) & (d1_iso <= drv.band_width_px * px_um)

    c_phase = np.where(mask, drv.c_fiber, drv.c_matrix)
    # Per-pixel strain directions: eps(t) = eps_macro(t) * (b11, b22, b12).
    b11 = c_phase * h
    b22 = -drv.nu_lateral * b11
    b12 = c_phase * drv.shear_coupling * g12_shape  # engineering shear

    De_m = elastic_stiffness(mat.E, mat.nu)
    De_f = fiber_stiffness(fib)

    mpx = ~mask
    m_b = np.stack([b11[mpx], b22[mpx], b12[mpx]])  # (3, Nm)
    f_b = np.stack([b11[mask], b22[mask], b12[mask]])

    stress_eff = np.zeros_like(m_b)  # undamaged (effective) matrix stress
    dmg = np.zeros(m_b.shape[1])
    thr = np.zeros(m_b.shape[1])

    band_flat = band[mpx]
    band_b11 = b11[mpx][band_flat]
    band_b12 = b12[mpx][band_flat]

    # Ring membership for fiber unloading: band pixel -> owning fiber.
    if centers.shape[0]:
        fiber_labels = _nearest_fiber_labels(grid, centers, band)
        fiber_pixel_labels = _nearest_fiber_labels(grid, centers, mask)
    else:
        fiber_labels = np.empty(0, dtype=np.intp)
        fiber_pixel_labels = np.empty(0, dtype=np.intp)

    steps = drv.n_steps()
    strains = np.arange(steps + 1) * drv.d_eps
    d_sub = drv.d_eps / drv.substeps

    frames: list[FieldFrame] = []
    frames.append(_assemble_frame(0.0, n, mask, mpx, np.zeros_like(m_b),
                                  np.zeros(m_b.shape[1]), np.zeros_like(f_b[0]),
                                  f_b, De_f, band_flat, grid))

    for k in range(1, steps + 1):
        for j in range(1, drv.substeps + 1):
            eps_now = strains[k - 1] + j * d_sub
            stress_eff = _advance_matrix(stress_eff, m_b, d_sub, De_m, mat, drv)
            if damage_on:
                dmg, thr = _advance_damage(stress_eff, m_b, eps_now, dmg, thr,
                                           mat, drv)
        eps_now = strains[k]
        # Nominal matrix stress with scalar damage.
        nominal = stress_eff * (1.0 - dmg)[None, :]
        pixel_damage = dmg.copy()

        if damage_on and band_flat.any():
            delta_n = np.maximum(band_b11 * eps_now, 0.0) * gauge_nm
            delta_t = band_b12 * eps_now * gauge_nm
            delta = np.hypot(delta_n, delta_t)
            traction = cohesive_traction(delta, czm)
            safe = np.maximum(delta, 1e-12)
            s11_band = traction * delta_n / safe
            s12_band = traction * delta_t / safe
            nominal[0, band_flat] = s11_band
            nominal[1, band_flat] = drv.nu_lateral * s11_band
            nominal[2, band_flat] = s12_band
            progress = cohesive_damage_progress(delta, czm)
            pixel_damage[band_flat] = np.maximum(dmg[band_flat], progress)
            unload = _fiber_unload_factors(
                1.0 - progress, fiber_labels,
                centers.shape[0], drv.fiber_unload_exp)
        else:
            unload = np.ones(max(centers.shape[0], 1))

        fiber_scale = (unload[fiber_pixel_labels]
                       if centers.shape[0] else np.empty(0))
        frames.append(_assemble_frame(strains[k], n, mask, mpx, nominal,
                                      pixel_damage, fiber_scale, f_b, De_f,
                                      band_flat, grid, eps_now))

    seq = DeformationSequence(case_id=case_id, micro=grid.mask.copy(),
                              frames=frames, seed=seed)
    seq.final_damage = frames[-1].channels[CH_DAMAGE].copy()
    return seq.finalize()


def _nearest_fiber_labels(grid, centers, where_mask):
    n = grid.grid_size
    coords = (np.arange(n) + 0.5) * (grid.domain_size / n)
    xs, ys = coords[None, :], coords[:, None]
    px = np.stack([np.broadcast_to(xs, (n, n))[where_mask],
                   np.broadcast_to(ys, (n, n))[where_mask]], axis=1)
    d2 = ((px[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def _fiber_unload_factors(integrity, labels, n_fibers, exponent):
    """Mean interface integrity per fiber, raised to the unloading exponent."""
    if n_fibers == 0:
        return np.ones(1)
    sums = np.bincount(labels, weights=integrity, minlength=n_fibers)
    counts = np.bincount(labels, minlength=n_fibers).astype(np.float64)
    mean = np.where(counts > 0, sums / np.maximum(counts, 1.0), 1.0)
    return mean ** exponent


def _advance_matrix(stress, b, d_sub, De, mat: MatrixParams,
                    drv: DriverParams):
    """One elastic-predictor / plastic-corrector substep for matrix pixels."""
    deps = b * d_sub  # (3, Nm)
    trial = stress + De @ deps
    phi = yield_phi(trial[0], trial[1], trial[2], mat.sigma_c, mat.sigma_t)
    plastic = phi > 0.0
    if not plastic.any():
        return trial
    out = trial.copy()
    s_old = stress[:, plastic]
    de = deps[:, plastic]
    current = trial[:, plastic]
    active = np.ones(current.shape[1], dtype=bool)
    for _ in range(drv.max_iterations):
        cur = current[:, active]
        n1, n2, n3 = yield_normal(cur[0], cur[1], cur[2],
                                  mat.sigma_c, mat.sigma_t)
        nvec = np.stack([n1, n2, n3])
        sv = von_mises_plane_stress(cur[0], cur[1], cur[2])
        H = hardening_modulus(sv, mat)
        Dn = De @ nvec
        denom = H + (nvec * Dn).sum(0)
        de_act = de[:, active]
        nde = (nvec * (De @ de_act)).sum(0)
        update = s_old[:, active] + De @ de_act - Dn * (nde / denom)[None, :]
        resid = np.abs(update - cur).max(0)
        current[:, active] = update
        still = resid >= drv.tolerance
        if not still.any():
            active[:] = False
            break
        idx = np.flatnonzero(active)
        active[idx[~still]] = False
    if active.any():
        raise ConvergenceError(
            f"{int(active.sum())} pixels failed to converge within "
            f"{drv.max_iterations} iterations")
    out[:, plastic] = current
    return out


def _advance_damage(stress_eff, b, eps_now, dmg, thr, mat: MatrixParams,
                    drv: DriverParams):
    e11 = b[0] * eps_now
    e22 = b[1] * eps_now
    g12 = b[2] * eps_now
    phi_p = damage_phi_prime(e11, e22, 0.5 * g12, mat.eps_c, mat.eps_t)
    gate = phi_p > 0.0
    if not gate.any():
        return dmg, thr
    tau = strain_energy_tau(stress_eff[0], stress_eff[1], stress_eff[2],
                            e11, e22, g12)
    G = damage_G(tau, mat)
    d_new, y_new = update_damage_and_threshold(dmg, thr, G, mat.mu, drv.dt)
    dmg = np.where(gate, d_new, dmg)
    thr = np.where(gate, y_new, thr)
    return dmg, thr


def _assemble_frame(strain, n, mask, mpx, matrix_nominal, matrix_damage,
                    fiber_scale, f_b, De_f, band_flat, grid, eps_now=None):
    s11 = np.zeros((n, n))
    s22 = np.zeros((n, n))
    s12 = np.zeros((n, n))
    dmg = np.zeros((n, n))
    if eps_now is not None and f_b.shape[1]:
        fs = De_f @ (f_b * eps_now)
        fs = fs * np.asarray(fiber_scale)[None, :]
        s11[mask], s22[mask], s12[mask] = fs[0], fs[1], fs[2]
    s11[mpx], s22[mpx], s12[mpx] = matrix_nominal
    dmg[mpx] = matrix_damage
    svm = von_mises_plane_stress(s11, s22, s12)
    channels = {
        CH_S11: s11.astype(np.float32),
        CH_S22: s22.astype(np.float32),
        CH_S12: s12.astype(np.float32),
        CH_SVM: svm.astype(np.float32),
        CH_DAMAGE: np.clip(dmg, 0.0, 1.0).astype(np.float32),
    }
    return FieldFrame(strain=float(strain), channels=channels,
                      micro=grid.mask)
