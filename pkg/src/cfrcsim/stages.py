"""Surrogate stages: channel contracts, dataset assembly, training.

Four networks share one architecture:

* ``damage1``: microstructure -> three stress components at the load peak
  (hybrid data + equilibrium loss).
* ``damage2``: stage-1 stress prediction + microstructure -> final damage
  pattern (sigmoid head, binary cross-entropy). It consumes predictions, not
  oracle stress, so it must be trained after ``damage1``.
* ``uts``: microstructure, strain plane, macro stress plane, macro damage
  plane -> per-step increments of macro stress and damage on the rising
  branch (spatially pooled two-channel output, MSE).
* ``necking``: the same plus the final damage pattern -> increments on the
  softening branch.

Scalar state enters the networks as constant planes; curve-stage outputs are
global averages of the two output channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses, unet
from .fields import (CH_DAMAGE, CH_DDMG, CH_DSVM, CH_FINAL_DAMAGE, CH_MICRO,
                     CH_S11, CH_S12, CH_S22, CH_STRAIN, CH_SVM,
                     DeformationSequence)
from .ingest import NormStats, normalize_value

STRESS_ORDER = (CH_S11, CH_S22, CH_S12)
FINAL_DAMAGE_BINARIZE = 0.5


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class StageSpec:
    name: str
    in_channels: int
    out_channels: int
    final_activation: str
    loss: str
    pooled: bool


STAGES: dict[str, StageSpec] = {
    "damage1": StageSpec("damage1", 1, 3, "linear", "hybrid", False),
    "damage2": StageSpec("damage2", 4, 1, "sigmoid", "bce", False),
    "uts": StageSpec("uts", 4, 2, "linear", "increments", True),
    "necking": StageSpec("necking", 5, 2, "linear", "increments", True),
}
STAGE_ORDER = ("damage1", "damage2", "uts", "necking")


def stage_spec(name: str) -> StageSpec:
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}; expected one of "
                         f"{sorted(STAGES)}")
    return STAGES[name]


def make_config(stage: str, image_size: int = 256, levels: int = 8,
                base_channels: int = 8) -> unet.UNetConfig:
    spec = stage_spec(stage)
    return unet.UNetConfig(
        in_channels=spec.in_channels, out_channels=spec.out_channels,
        levels=levels, base_channels=base_channels, image_size=image_size,
        final_activation=spec.final_activation).validate()


def pool_curve_output(out: torch.Tensor) -> torch.Tensor:
    """Collapse a (B, 2, H, W) field to the (B, 2) global averages."""
    return out.mean(dim=(-2, -1))


# --------------------------------------------------------------------------
# dataset assembly (teacher forcing on oracle sequences)


def _norm_micro(seq: DeformationSequence, stats: NormStats) -> np.ndarray:
    return np.asarray(
        normalize_value(seq.micro.astype(np.float64), CH_MICRO, stats),
        dtype=np.float32)


def _norm_stress_frame(seq: DeformationSequence, index: int,
                       stats: NormStats) -> np.ndarray:
    frame = seq.frames[index]
    planes = [normalize_value(frame.channels[c].astype(np.float64), c, stats)
              for c in STRESS_ORDER]
    return np.stack(planes).astype(np.float32)


def _norm_final_plane(seq: DeformationSequence, stats: NormStats) -> np.ndarray:
    if seq.final_damage is None:
        raise ValueError(f"case {seq.case_id} carries no final damage pattern")
    binary = (seq.final_damage >= FINAL_DAMAGE_BINARIZE).astype(np.float64)
    return np.asarray(normalize_value(binary, CH_FINAL_DAMAGE, stats),
                      dtype=np.float32)


def build_damage1_dataset(sequences, stats: NormStats
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """One sample per case: normalized microstructure -> normalized stress
    at the load-peak frame."""
    xs, ys = [], []
    for seq in sequences:
        xs.append(_norm_micro(seq, stats)[None])
        ys.append(_norm_stress_frame(seq, seq.uts_index, stats))
    return (torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)))


def predict_stress(model: unet.FieldUNet, micro: torch.Tensor) -> torch.Tensor:
    """Stage-1 inference: normalized micro batch -> normalized stress."""
    model.eval()
    with torch.no_grad():
        return model(micro)


def build_damage2_dataset(sequences, stats: NormStats,
                          stage1: unet.FieldUNet
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Inputs are stage-1 stress predictions plus the microstructure;
    targets are the binarized final damage patterns."""
    x1, _ = build_damage1_dataset(sequences, stats)
    pred = predict_stress(stage1, x1)
    xs = torch.cat([pred, x1], dim=1)
    ys = []
    for seq in sequences:
        if seq.final_damage is None:
            raise ValueError(
                f"case {seq.case_id} carries no final damage pattern")
        ys.append((seq.final_damage >= FINAL_DAMAGE_BINARIZE)
                  .astype(np.float32)[None])
    return xs, torch.from_numpy(np.stack(ys))


def macro_damage_curve(seq: DeformationSequence) -> np.ndarray:
    return np.array([f.channels[CH_DAMAGE].astype(np.float64).mean()
                     for f in seq.frames])


def curve_state_planes(micro_norm: np.ndarray, strain: float, svm: float,
                       dmg: float, stats: NormStats,
                       final_plane: np.ndarray | None = None) -> np.ndarray:
    """Stack the curve-stage input: microstructure plus constant planes for
    the scalar state, plus the final damage plane for the softening stage."""
    shape = micro_norm.shape
    planes = [
        micro_norm,
        np.full(shape, normalize_value(strain, CH_STRAIN, stats),
                dtype=np.float32),
        np.full(shape, normalize_value(svm, CH_SVM, stats), dtype=np.float32),
        np.full(shape, normalize_value(dmg, CH_DAMAGE, stats),
                dtype=np.float32),
    ]
    if final_plane is not None:
        planes.append(final_plane)
    return np.stack(planes)


def build_curve_dataset(sequences, stats: NormStats, regime: str
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-step samples for the curve stages.

    ``uts`` takes steps before the load peak, ``necking`` the rest; targets
    are the normalized increments of the macro stress and damage means.
    """
    if regime not in ("uts", "necking"):
        raise ValueError(f"regime must be uts or necking, got {regime!r}")
    xs, ys = [], []
    for seq in sequences:
        micro_n = _norm_micro(seq, stats)
        final_plane = (_norm_final_plane(seq, stats)
                       if regime == "necking" else None)
        svm = seq.macro_curve()
        dmg = macro_damage_curve(seq)
        strains = seq.strains()
        for k in range(len(seq.frames) - 1):
            in_regime = k < seq.uts_index if regime == "uts" \
                else k >= seq.uts_index
            if not in_regime:
                continue
            xs.append(curve_state_planes(micro_n, strains[k], svm[k], dmg[k],
                                         stats, final_plane))
            ys.append([normalize_value(svm[k + 1] - svm[k], CH_DSVM, stats),
                       normalize_value(dmg[k + 1] - dmg[k], CH_DDMG, stats)])
    if not xs:
        raise ValueError(f"no {regime} samples in the given sequences")
    return (torch.from_numpy(np.stack(xs)),
            torch.tensor(ys, dtype=torch.float32))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    stage: str
    image_size: int = 256
    levels: int = 8
    base_channels: int = 8
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-7
    physics_scale: float = 1e-3
    seed: int = 0
    stop_loss: float | None = None

    def validate(self) -> "TrainConfig":
        stage_spec(self.stage)
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "physics_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        return self


def _stress_norm_tensors(stats: NormStats
                         ) -> tuple[torch.Tensor, torch.Tensor]:
    std = torch.tensor([stats.std[c] for c in STRESS_ORDER],
                       dtype=torch.float64)
    mean = torch.tensor([stats.mean[c] for c in STRESS_ORDER],
                        dtype=torch.float64)
    return std, mean


def stage_loss(stage: str, output: torch.Tensor, target: torch.Tensor,
               stats: NormStats | None,
               physics_scale: float) -> losses.LossValue:
    spec = stage_spec(stage)
    if spec.loss == "hybrid":
        if stats is None:
            raise ValueError("hybrid loss needs normalization stats")
        std, mean = _stress_norm_tensors(stats)
        return losses.hybrid_stress_loss(output, target, std, mean,
                                         physics_scale)
    if spec.loss == "bce":
        bce = losses.bce_damage(output, target)
        return losses.LossValue(total=bce, parts={"bce": bce})
    mse = losses.mse_increments(pool_curve_output(output), target)
    return losses.LossValue(total=mse, parts={"mse": mse})


METRICS_HEADER = "step,loss_total,loss_mse,loss_physics,loss_bce"


def train_stage(X: torch.Tensor, Y: torch.Tensor, cfg: TrainConfig,
                stats: NormStats | None = None,
                model: unet.FieldUNet | None = None,
                log_path=None) -> tuple[unet.FieldUNet, list[dict]]:
    """Adam + plateau schedule over the given tensors.

    Returns the trained model (eval mode) and the per-epoch history. A
    non-finite loss aborts with ``TrainingDiverged``. ``stop_loss`` ends
    training early once the epoch mean falls below it.
    """
    cfg.validate()
    spec = stage_spec(cfg.stage)
    if X.shape[1] != spec.in_channels:
        raise ValueError(f"stage {cfg.stage} expects {spec.in_channels} "
                         f"input channels, got {X.shape[1]}")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y sample counts differ")
    if model is None:
        config = make_config(cfg.stage, image_size=X.shape[-1],
                             levels=cfg.levels,
                             base_channels=cfg.base_channels)
        model = unet.build(config, seed=cfg.seed)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=cfg.plateau_factor, patience=cfg.plateau_patience,
        min_lr=cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="ascii") if log_path else None
    if log_fh:
        log_fh.write(METRICS_HEADER + "\n")
    step = 0
    try:
        n = X.shape[0]
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(n)
            sums = {"total": 0.0, "mse": 0.0, "physics": 0.0, "bce": 0.0}
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start:start + cfg.batch_size])
                opt.zero_grad()
                out = model(X[idx])
                lv = stage_loss(cfg.stage, out, Y[idx], stats,
                                cfg.physics_scale)
                if not torch.isfinite(lv.total):
                    raise TrainingDiverged(
                        f"stage {cfg.stage}: non-finite loss at epoch "
                        f"{epoch} step {step}")
                lv.total.backward()
                opt.step()
                step += 1
                batches += 1
                sums["total"] += lv.item()
                for k in ("mse", "physics", "bce"):
                    sums[k] += lv.part(k)
            means = {k: v / batches for k, v in sums.items()}
            row = {"epoch": epoch, "step": step,
                   "lr": opt.param_groups[0]["lr"], **means}
            history.append(row)
            if log_fh:
                log_fh.write(f"{step},{means['total']:.8e},"
                             f"{means['mse']:.8e},{means['physics']:.8e},"
                             f"{means['bce']:.8e}\n")
                log_fh.flush()
            sched.step(means["total"])
            if cfg.stop_loss is not None and means["total"] < cfg.stop_loss:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, history


def save_stage(path, model: unet.FieldUNet, stats: NormStats,
               cfg: TrainConfig, history: list[dict]) -> Path:
    meta = {
        "stage": cfg.stage,
        "epochs_run": len(history),
        "final_loss": history[-1]["total"] if history else None,
        "seed": cfg.seed,
    }
    return unet.save_checkpoint(path, model, stats=stats, meta=meta)


def load_stage(path, expect_stage: str | None = None
               ) -> tuple[unet.FieldUNet, NormStats, dict]:
    model, stats, meta = unet.load_checkpoint(path)
    if stats is None:
        raise ValueError(f"{path}: checkpoint carries no normalization stats")
    if expect_stage is not None and meta.get("stage") != expect_stage:
        raise ValueError(f"{path}: checkpoint is for stage "
                         f"{meta.get('stage')!r}, expected {expect_stage!r}")
    return model, stats, meta
