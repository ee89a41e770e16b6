"""Autoregressive curve rollout over the trained stages.

The stress-strain curve is integrated step by step: the rising-branch
network supplies (d_sigma, d_damage) increments until the switch criterion
fires (stress increment below threshold while the stress sits above a guard
floor), after which the softening-branch network takes over until the final
strain. The final damage pattern comes from the two damage stages once per
case and feeds the softening network's extra input plane.

Providers abstract the increment source so the same state/switch logic runs
against trained networks or against recorded sequences (echo mode, used to
verify the wiring).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import stages, unet
from .fields import CH_FINAL_DAMAGE, CH_MICRO, DeformationSequence
from .ingest import NormStats, denormalize_value, normalize_value
from .stages import FINAL_DAMAGE_BINARIZE

SWITCH_THRESHOLD = 0.1
SWITCH_FLOOR = 60.0


@dataclass
class RolloutConfig:
    d_eps: float = 2e-4
    eps_f: float = 0.012
    switch_threshold: float = SWITCH_THRESHOLD
    switch_floor: float = SWITCH_FLOOR
    clamp_damage: bool = True

    def validate(self) -> "RolloutConfig":
        if self.d_eps <= 0 or self.eps_f <= 0:
            raise ValueError("d_eps and eps_f must be positive")
        if self.n_steps() < 1:
            raise ValueError("eps_f must cover at least one step")
        if abs(self.n_steps() * self.d_eps - self.eps_f) > 1e-9:
            raise ValueError(
                f"eps_f {self.eps_f} is not a whole number of d_eps "
                f"{self.d_eps} steps")
        return self

    def n_steps(self) -> int:
        return int(round(self.eps_f / self.d_eps))


def should_switch(d_sigma: float, sigma: float,
                  threshold: float = SWITCH_THRESHOLD,
                  floor: float = SWITCH_FLOOR) -> bool:
    """Hand over to the softening branch when the stress increment stalls
    while the stress itself is already high (the floor guards against
    switching during the initial ramp)."""
    return bool(d_sigma < threshold and sigma > floor)


@dataclass
class RolloutState:
    step: int
    strain: float
    svm: float
    dmg: float


class StageProvider:
    """Increment source for the rollout loop."""

    def uts_increment(self, state: RolloutState) -> tuple[float, float]:
        raise NotImplementedError

    def necking_increment(self, state: RolloutState) -> tuple[float, float]:
        raise NotImplementedError

    def final_damage(self) -> np.ndarray | None:
        return None


class EchoProvider(StageProvider):
    """Replays the macro increments of a recorded sequence; both regimes
    return the same recorded step, so a rollout must reproduce the curve."""

    def __init__(self, seq: DeformationSequence):
        self.svm = seq.macro_curve().astype(np.float64)
        self.dmg = stages.macro_damage_curve(seq)
        self._final = seq.final_damage

    def _step(self, state: RolloutState) -> tuple[float, float]:
        k = state.step
        if k + 1 >= len(self.svm):
            raise IndexError(f"echo provider exhausted at step {k}")
        return (float(self.svm[k + 1] - self.svm[k]),
                float(self.dmg[k + 1] - self.dmg[k]))

    uts_increment = _step
    necking_increment = _step

    def final_damage(self) -> np.ndarray | None:
        return self._final


class NetworkProvider(StageProvider):
    """Trained-network increment source.

    The two damage stages run once at construction: stage 1 maps the
    microstructure to the peak stress field, stage 2 maps that prediction to
    the final damage probabilities, which are binarized into the softening
    network's input plane.
    """

    def __init__(self, micro: np.ndarray, models: dict[str, unet.FieldUNet],
                 stats: NormStats):
        missing = [s for s in stages.STAGE_ORDER if s not in models]
        if missing:
            raise ValueError(f"missing stage models: {missing}")
        self.stats = stats
        self.micro_norm = np.asarray(
            normalize_value(np.asarray(micro, dtype=np.float64), CH_MICRO,
                            stats), dtype=np.float32)
        self.models = models

        x1 = torch.from_numpy(self.micro_norm[None, None])
        stress_pred = stages.predict_stress(models["damage1"], x1)
        x2 = torch.cat([stress_pred, x1], dim=1)
        models["damage2"].eval()
        with torch.no_grad():
            prob = models["damage2"](x2)[0, 0].numpy()
        self.final_prob = prob.astype(np.float32)
        binary = (self.final_prob >= FINAL_DAMAGE_BINARIZE).astype(np.float64)
        self.final_plane = np.asarray(
            normalize_value(binary, CH_FINAL_DAMAGE, stats), dtype=np.float32)
        self.stress_pred = stress_pred[0].numpy()

    def _increment(self, state: RolloutState, stage: str) -> tuple[float, float]:
        final = self.final_plane if stage == "necking" else None
        x = stages.curve_state_planes(self.micro_norm, state.strain,
                                      state.svm, state.dmg, self.stats,
                                      final_plane=final)
        model = self.models[stage]
        model.eval()
        with torch.no_grad():
            out = stages.pool_curve_output(
                model(torch.from_numpy(x[None])))[0]
        dsv = denormalize_value(float(out[0]), "dsvm", self.stats)
        ddm = denormalize_value(float(out[1]), "ddmg", self.stats)
        return float(dsv), float(ddm)

    def uts_increment(self, state: RolloutState) -> tuple[float, float]:
        return self._increment(state, "uts")

    def necking_increment(self, state: RolloutState) -> tuple[float, float]:
        return self._increment(state, "necking")

    def final_damage(self) -> np.ndarray | None:
        return self.final_prob


@dataclass
class RolloutResult:
    strains: np.ndarray
    svm: np.ndarray
    dmg: np.ndarray
    switch_step: int | None
    final_damage: np.ndarray | None = None
    config: RolloutConfig = field(default_factory=RolloutConfig)

    @property
    def switch_fired(self) -> bool:
        return self.switch_step is not None

    @property
    def uts_index(self) -> int:
        return int(np.argmax(self.svm))

    def n_frames(self) -> int:
        return len(self.strains)


def rollout_case(provider: StageProvider,
                 config: RolloutConfig | None = None) -> RolloutResult:
    """Integrate the macro curve from zero strain to the final strain.

    State accumulates in float64; the damage increment is clamped
    non-negative when ``clamp_damage`` is set, and damage saturates at 1.
    """
    cfg = (config or RolloutConfig()).validate()
    n = cfg.n_steps()
    strains = np.arange(n + 1, dtype=np.float64) * cfg.d_eps
    svm = np.zeros(n + 1)
    dmg = np.zeros(n + 1)
    switch_step: int | None = None
    for k in range(n):
        state = RolloutState(step=k, strain=float(strains[k]),
                             svm=float(svm[k]), dmg=float(dmg[k]))
        if switch_step is None:
            dsv, ddm = provider.uts_increment(state)
        else:
            dsv, ddm = provider.necking_increment(state)
        if cfg.clamp_damage:
            ddm = max(ddm, 0.0)
        svm[k + 1] = svm[k] + dsv
        dmg[k + 1] = min(dmg[k] + ddm, 1.0)
        if switch_step is None and should_switch(
                dsv, float(svm[k + 1]), cfg.switch_threshold,
                cfg.switch_floor):
            switch_step = k + 1
    return RolloutResult(strains=strains, svm=svm, dmg=dmg,
                         switch_step=switch_step,
                         final_damage=provider.final_damage(), config=cfg)


def predict_final_damage(micro: np.ndarray, models: dict[str, unet.FieldUNet],
                         stats: NormStats) -> np.ndarray:
    """Two-stage damage chain on one microstructure; returns probabilities."""
    return NetworkProvider(micro, models, stats).final_prob


# --------------------------------------------------------------------------
# bundle I/O (four stage checkpoints + rollout settings)


class BundleError(ValueError):
    pass


def save_bundle(bundle_dir, models: dict[str, unet.FieldUNet],
                stats: NormStats, config: RolloutConfig,
                histories: dict[str, list] | None = None) -> Path:
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    cfg = config.validate()
    lines = [
        f"d_eps = {cfg.d_eps!r}",
        f"eps_f = {cfg.eps_f!r}",
        f"switch_threshold = {cfg.switch_threshold!r}",
        f"switch_floor = {cfg.switch_floor!r}",
        f"clamp_damage = {int(cfg.clamp_damage)}",
    ]
    for stage in stages.STAGE_ORDER:
        if stage not in models:
            raise BundleError(f"missing stage model {stage!r}")
        name = f"{stage}.ckpt"
        hist = (histories or {}).get(stage, [])
        meta = {"stage": stage, "epochs_run": len(hist)}
        unet.save_checkpoint(bundle_dir / name, models[stage], stats=stats,
                             meta=meta)
        lines.append(f"{stage} = {name}")
    (bundle_dir / "bundle.txt").write_text("\n".join(lines) + "\n",
                                           encoding="ascii")
    return bundle_dir


def load_bundle(bundle_dir) -> tuple[dict[str, unet.FieldUNet], NormStats,
                                     RolloutConfig]:
    bundle_dir = Path(bundle_dir)
    manifest = bundle_dir / "bundle.txt"
    if not manifest.exists():
        raise BundleError(f"{bundle_dir}: missing bundle.txt")
    entries: dict[str, str] = {}
    for line in manifest.read_text(encoding="ascii").splitlines():
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        key, value = (p.strip() for p in text.split("=", 1))
        entries[key] = value
    config = RolloutConfig(
        d_eps=float(entries["d_eps"]), eps_f=float(entries["eps_f"]),
        switch_threshold=float(entries["switch_threshold"]),
        switch_floor=float(entries["switch_floor"]),
        clamp_damage=bool(int(entries["clamp_damage"]))).validate()
    models: dict[str, unet.FieldUNet] = {}
    stats: NormStats | None = None
    for stage in stages.STAGE_ORDER:
        if stage not in entries:
            raise BundleError(f"{manifest}: missing stage entry {stage!r}")
        model, st, _meta = stages.load_stage(bundle_dir / entries[stage],
                                             expect_stage=stage)
        if stats is None:
            stats = st
        elif not stats.matches(st):
            raise BundleError(
                f"{bundle_dir}: stage {stage} normalization stats disagree "
                f"with the other stages")
        models[stage] = model
    assert stats is not None
    return models, stats, config


# --------------------------------------------------------------------------
# one-object façade


class CompositeSurrogate:
    """End-to-end estimator: fit trains the four stages in order on oracle
    sequences; predict rolls out the curve and damage for a microstructure.

    Follows the common estimator conventions (constructor keyword
    hyperparameters, ``get_params`` / ``set_params``, trailing-underscore
    fitted attributes).
    """

    def __init__(self, image_size: int = 256, levels: int = 8,
                 base_channels: int = 8, epochs: int = 200,
                 batch_size: int = 4, lr: float = 1e-4,
                 physics_scale: float = 1e-3, seed: int = 0,
                 stop_loss: float | None = None, d_eps: float = 2e-4,
                 eps_f: float = 0.012,
                 switch_threshold: float = SWITCH_THRESHOLD,
                 switch_floor: float = SWITCH_FLOOR,
                 clamp_damage: bool = True):
        self.image_size = image_size
        self.levels = levels
        self.base_channels = base_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.physics_scale = physics_scale
        self.seed = seed
        self.stop_loss = stop_loss
        self.d_eps = d_eps
        self.eps_f = eps_f
        self.switch_threshold = switch_threshold
        self.switch_floor = switch_floor
        self.clamp_damage = clamp_damage

    _PARAM_NAMES = ("image_size", "levels", "base_channels", "epochs",
                    "batch_size", "lr", "physics_scale", "seed", "stop_loss",
                    "d_eps", "eps_f", "switch_threshold", "switch_floor",
                    "clamp_damage")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "CompositeSurrogate":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(
            d_eps=self.d_eps, eps_f=self.eps_f,
            switch_threshold=self.switch_threshold,
            switch_floor=self.switch_floor,
            clamp_damage=self.clamp_damage).validate()

    def _train_config(self, stage: str) -> stages.TrainConfig:
        return stages.TrainConfig(
            stage=stage, image_size=self.image_size, levels=self.levels,
            base_channels=self.base_channels, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr,
            physics_scale=self.physics_scale, seed=self.seed,
            stop_loss=self.stop_loss)

    def fit(self, sequences: list[DeformationSequence],
            log_dir=None) -> "CompositeSurrogate":
        from .ingest import fit_norm_stats
        self.stats_ = fit_norm_stats(sequences)
        self.models_ = {}
        self.histories_ = {}

        def log_path(stage):
            if log_dir is None:
                return None
            d = Path(log_dir)
            d.mkdir(parents=True, exist_ok=True)
            return d / f"train_{stage}.csv"

        X1, Y1 = stages.build_damage1_dataset(sequences, self.stats_)
        m, h = stages.train_stage(X1, Y1, self._train_config("damage1"),
                                  stats=self.stats_,
                                  log_path=log_path("damage1"))
        self.models_["damage1"] = m
        self.histories_["damage1"] = h

        X2, Y2 = stages.build_damage2_dataset(sequences, self.stats_, m)
        m, h = stages.train_stage(X2, Y2, self._train_config("damage2"),
                                  stats=self.stats_,
                                  log_path=log_path("damage2"))
        self.models_["damage2"] = m
        self.histories_["damage2"] = h

        for stage in ("uts", "necking"):
            Xc, Yc = stages.build_curve_dataset(sequences, self.stats_, stage)
            m, h = stages.train_stage(Xc, Yc, self._train_config(stage),
                                      stats=self.stats_,
                                      log_path=log_path(stage))
            self.models_[stage] = m
            self.histories_[stage] = h
        return self

    def _check_fitted(self):
        if not hasattr(self, "models_"):
            raise RuntimeError("CompositeSurrogate is not fitted")

    def predict(self, micro: np.ndarray) -> RolloutResult:
        self._check_fitted()
        provider = NetworkProvider(micro, self.models_, self.stats_)
        return rollout_case(provider, self.rollout_config())

    def predict_final_damage(self, micro: np.ndarray) -> np.ndarray:
        self._check_fitted()
        return predict_final_damage(micro, self.models_, self.stats_)

    def save(self, bundle_dir) -> Path:
        self._check_fitted()
        return save_bundle(bundle_dir, self.models_, self.stats_,
                           self.rollout_config(), self.histories_)

    @classmethod
    def load(cls, bundle_dir) -> "CompositeSurrogate":
        models, stats, config = load_bundle(bundle_dir)
        any_model = models["damage1"]
        est = cls(image_size=any_model.config.image_size,
                  levels=any_model.config.levels,
                  base_channels=any_model.config.base_channels,
                  d_eps=config.d_eps, eps_f=config.eps_f,
                  switch_threshold=config.switch_threshold,
                  switch_floor=config.switch_floor,
                  clamp_damage=config.clamp_damage)
        est.models_ = models
        est.stats_ = stats
        est.histories_ = {}
        return est
