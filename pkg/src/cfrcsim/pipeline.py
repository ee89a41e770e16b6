"""End-to-end orchestration: configuration file, case generation, dataset
assembly, stage training, rollout, and evaluation.

Configuration is a plain INI file. Every command writes a ``provenance.json``
next to its outputs recording the command, arguments, configuration hash and
library versions; no timestamps, so reruns with the same inputs produce the
same bytes.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crackpath, ingest, material, microgen, rollout, stages

DATASET_STATS_FILE = "stats.txt"
DATASET_SPLIT_FILE = "split.txt"


class ConfigError(ValueError):
    """Bad configuration file or values; maps to exit code 2."""


@dataclass
class PipelineConfig:
    micro: microgen.MicrostructureParams = field(
        default_factory=microgen.MicrostructureParams)
    material_file: str | None = None
    n_cases: int = 25
    base_seed: int = 100
    downsample: int = 1
    n_train: int = 20
    n_test: int = 5
    mirror: bool = False
    train_base: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    rollout_cfg: rollout.RolloutConfig = field(
        default_factory=rollout.RolloutConfig)

    def material_params(self, config_dir: Path | None = None
                        ) -> material.MaterialParams:
        if self.material_file is None:
            return material.MaterialParams()
        path = Path(self.material_file)
        if not path.is_absolute() and config_dir is not None:
            path = config_dir / path
        if not path.exists():
            raise ConfigError(f"material file not found: {path}")
        return material.load_material_params(path)

    def train_config(self, stage: str, image_size: int) -> stages.TrainConfig:
        kwargs = dict(self.train_base)
        kwargs.update(self.train_overrides.get(stage, {}))
        kwargs.pop("image_size", None)
        try:
            return stages.TrainConfig(stage=stage, image_size=image_size,
                                      **kwargs).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [train] settings for {stage}: {exc}")


_TRAIN_KEY_TYPES = {
    "levels": int, "base_channels": int, "epochs": int, "batch_size": int,
    "lr": float, "plateau_factor": float, "plateau_patience": int,
    "min_lr": float, "physics_scale": float, "seed": int, "stop_loss": float,
}


def _parse_train_section(section) -> dict:
    out = {}
    for key, raw in section.items():
        if key == "image_size":
            continue
        if key not in _TRAIN_KEY_TYPES:
            raise ConfigError(f"unknown [train] key {key!r}")
        if raw.strip() == "":
            continue
        try:
            out[key] = _TRAIN_KEY_TYPES[key](raw)
        except ValueError:
            raise ConfigError(f"bad value for train key {key}: {raw!r}")
    return out


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="ascii")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")

    cfg = PipelineConfig()

    def get(section, key, cast, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            if cast is bool:
                return bool(int(raw))
            return cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: bad value {raw!r}")

    m = cfg.micro
    cfg.micro = microgen.MicrostructureParams(
        domain_size=get("microgen", "domain_size", float, m.domain_size),
        fiber_diameter=get("microgen", "fiber_diameter", float,
                           m.fiber_diameter),
        min_gap=get("microgen", "min_gap", float, m.min_gap),
        target_vf=get("microgen", "target_vf", float, m.target_vf),
        max_attempts=get("microgen", "max_attempts", int, m.max_attempts),
        relax_iterations=get("microgen", "relax_iterations", int,
                             m.relax_iterations))
    try:
        cfg.micro.validate()
    except ValueError as exc:
        raise ConfigError(f"[microgen]: {exc}")

    if parser.has_option("material", "file"):
        cfg.material_file = parser.get("material", "file")

    cfg.n_cases = get("simulate", "n_cases", int, cfg.n_cases)
    cfg.base_seed = get("simulate", "base_seed", int, cfg.base_seed)
    cfg.downsample = get("dataset", "downsample", int, cfg.downsample)
    cfg.n_train = get("dataset", "n_train", int, cfg.n_train)
    cfg.n_test = get("dataset", "n_test", int, cfg.n_test)
    cfg.mirror = get("dataset", "mirror", bool, cfg.mirror)
    if cfg.n_cases <= 0:
        raise ConfigError("[simulate] n_cases must be positive")
    if cfg.downsample < 1:
        raise ConfigError("[dataset] downsample must be >= 1")

    if parser.has_section("train"):
        cfg.train_base = _parse_train_section(parser["train"])
    for stage in stages.STAGE_ORDER:
        name = f"train.{stage}"
        if parser.has_section(name):
            cfg.train_overrides[stage] = _parse_train_section(parser[name])

    r = cfg.rollout_cfg
    cfg.rollout_cfg = rollout.RolloutConfig(
        d_eps=get("rollout", "d_eps", float, r.d_eps),
        eps_f=get("rollout", "eps_f", float, r.eps_f),
        switch_threshold=get("rollout", "switch_threshold", float,
                             r.switch_threshold),
        switch_floor=get("rollout", "switch_floor", float, r.switch_floor),
        clamp_damage=get("rollout", "clamp_damage", bool, r.clamp_damage))
    try:
        cfg.rollout_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[rollout]: {exc}")
    return cfg


# --------------------------------------------------------------------------
# provenance


def config_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(command: str, config_path, extra: dict | None = None) -> dict:
    import scipy
    import torch

    from . import __version__
    info = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": config_sha256(config_path),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
            "cfrcsim": __version__,
        },
    }
    if extra:
        info.update(extra)
    return info


def write_provenance(out_dir, command: str, config_path,
                     extra: dict | None = None,
                     name: str = "provenance.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(provenance(command, config_path, extra),
                               indent=2, sort_keys=True) + "\n",
                    encoding="ascii")
    return path


# --------------------------------------------------------------------------
# case generation


def case_seed(cfg: PipelineConfig, index: int) -> int:
    return cfg.base_seed + index


def case_name(seed: int) -> str:
    return f"case_{seed:05d}"


def generate_layouts(cfg: PipelineConfig, out_dir, count: int | None = None,
                     seed: int | None = None) -> list[Path]:
    """Deterministic layout generation: same config and seed, same bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = count if count is not None else cfg.n_cases
    base = seed if seed is not None else cfg.base_seed
    written = []
    for i in range(n):
        s = base + i
        layout, grid = microgen.generate_microstructure(cfg.micro, seed=s)
        stem = out_dir / f"micro_{s:05d}"
        microgen.save_layout(layout, stem.with_suffix(".txt"))
        np.save(stem.with_suffix(".npy"), grid.mask)
        written.append(stem.with_suffix(".txt"))
    return written


def _simulate_one(args) -> str:
    micro_kwargs, material_text, seed, out_dir = args
    params_m = microgen.MicrostructureParams(**micro_kwargs)
    mat = material.parse_material_params(material_text)
    layout, grid = microgen.generate_microstructure(params_m, seed=seed)
    seq = material.simulate_case(grid, mat, layout.centers, layout.radius,
                                 case_id=case_name(seed), seed=seed)
    ingest.write_case(seq, Path(out_dir) / case_name(seed))
    return case_name(seed)


def simulate_cases(cfg: PipelineConfig, out_dir, jobs: int = 1,
                   config_dir: Path | None = None) -> list[str]:
    """Run the constitutive driver over the configured seed range."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mat = cfg.material_params(config_dir)
    # One loading protocol per pipeline: the [rollout] schedule also drives
    # the oracle, so references and rollouts share a strain grid.
    mat.driver.d_eps = cfg.rollout_cfg.d_eps
    mat.driver.eps_f = cfg.rollout_cfg.eps_f
    mat.validate()
    material_text = material.format_material_params(mat)
    micro_kwargs = {
        "domain_size": cfg.micro.domain_size,
        "fiber_diameter": cfg.micro.fiber_diameter,
        "min_gap": cfg.micro.min_gap,
        "target_vf": cfg.micro.target_vf,
        "max_attempts": cfg.micro.max_attempts,
        "relax_iterations": cfg.micro.relax_iterations,
    }
    tasks = [(micro_kwargs, material_text, case_seed(cfg, i), str(out_dir))
             for i in range(cfg.n_cases)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            names = list(pool.map(_simulate_one, tasks))
    else:
        names = [_simulate_one(t) for t in tasks]
    return names


def list_case_dirs(cases_dir) -> list[Path]:
    cases_dir = Path(cases_dir)
    if not cases_dir.exists():
        raise FileNotFoundError(f"case directory not found: {cases_dir}")
    dirs = sorted(p for p in cases_dir.iterdir()
                  if p.is_dir() and (p / "manifest.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no cases under {cases_dir}")
    return dirs


# --------------------------------------------------------------------------
# dataset assembly


def build_dataset(cfg: PipelineConfig, cases_dir, out_dir) -> dict:
    """Split cases, apply reduction/augmentation, fit normalization stats on
    the training split only, and write everything into the dataset dir."""
    case_dirs = list_case_dirs(cases_dir)
    need = cfg.n_train + cfg.n_test
    if len(case_dirs) < need:
        raise ConfigError(f"need {need} cases, found {len(case_dirs)}")
    train_dirs = case_dirs[:cfg.n_train]
    test_dirs = case_dirs[cfg.n_train:need]

    out_dir = Path(out_dir)
    (out_dir / "train").mkdir(parents=True, exist_ok=True)
    (out_dir / "test").mkdir(parents=True, exist_ok=True)

    def process(src: Path, split: str) -> list[str]:
        seq = ingest.read_case(src)
        if cfg.downsample > 1:
            seq = ingest.downsample_sequence(seq, cfg.downsample)
        written = [seq.case_id]
        ingest.write_case(seq, out_dir / split / seq.case_id)
        if split == "train" and cfg.mirror:
            mirrored = ingest.mirror_augment(seq)
            ingest.write_case(mirrored, out_dir / split / mirrored.case_id)
            written.append(mirrored.case_id)
        return written

    train_ids: list[str] = []
    test_ids: list[str] = []
    for d in train_dirs:
        train_ids.extend(process(d, "train"))
    for d in test_dirs:
        test_ids.extend(process(d, "test"))

    train_seqs = [ingest.read_case(out_dir / "train" / cid)
                  for cid in train_ids]
    stats = ingest.fit_norm_stats(train_seqs)
    ingest.save_norm_stats(stats, out_dir / DATASET_STATS_FILE)

    lines = [f"train = {','.join(train_ids)}",
             f"test = {','.join(test_ids)}"]
    (out_dir / DATASET_SPLIT_FILE).write_text("\n".join(lines) + "\n",
                                              encoding="ascii")
    return {"train": train_ids, "test": test_ids}


def load_dataset(dataset_dir) -> tuple[list, list, ingest.NormStats]:
    dataset_dir = Path(dataset_dir)
    split_path = dataset_dir / DATASET_SPLIT_FILE
    if not split_path.exists():
        raise FileNotFoundError(f"missing {split_path}")
    split: dict[str, list[str]] = {}
    for line in split_path.read_text(encoding="ascii").splitlines():
        if "=" not in line:
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        split[key] = [v for v in value.split(",") if v]
    stats = ingest.load_norm_stats(dataset_dir / DATASET_STATS_FILE)
    train = [ingest.read_case(dataset_dir / "train" / cid)
             for cid in split.get("train", [])]
    test = [ingest.read_case(dataset_dir / "test" / cid)
            for cid in split.get("test", [])]
    return train, test, stats


# --------------------------------------------------------------------------
# training


def stage_checkpoint(models_dir, stage: str) -> Path:
    return Path(models_dir) / f"{stage}.ckpt"


def require_previous_stages(models_dir, stage: str) -> None:
    order = stages.STAGE_ORDER
    for earlier in order[:order.index(stage)]:
        if not stage_checkpoint(models_dir, earlier).exists():
            raise ConfigError(
                f"stage {stage} requires a trained {earlier} checkpoint; "
                f"train {earlier} first")


def train_stage_command(cfg: PipelineConfig, dataset_dir, stage: str,
                        models_dir) -> dict:
    stages.stage_spec(stage)
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    require_previous_stages(models_dir, stage)
    train_seqs, _test, stats = load_dataset(dataset_dir)
    if not train_seqs:
        raise ConfigError("dataset has no training cases")
    image_size = train_seqs[0].shape[0]
    tcfg = cfg.train_config(stage, image_size)

    if stage == "damage1":
        X, Y = stages.build_damage1_dataset(train_seqs, stats)
    elif stage == "damage2":
        d1, d1_stats, _ = stages.load_stage(
            stage_checkpoint(models_dir, "damage1"), expect_stage="damage1")
        if not d1_stats.matches(stats):
            raise ConfigError("damage1 checkpoint stats disagree with the "
                              "dataset stats")
        X, Y = stages.build_damage2_dataset(train_seqs, stats, d1)
    else:
        X, Y = stages.build_curve_dataset(train_seqs, stats, stage)

    model, history = stages.train_stage(
        X, Y, tcfg, stats=stats,
        log_path=models_dir / f"train_{stage}.csv")
    stages.save_stage(stage_checkpoint(models_dir, stage), model, stats,
                      tcfg, history)
    return {"stage": stage, "epochs_run": len(history),
            "final_loss": history[-1]["total"] if history else None,
            "samples": int(X.shape[0])}


def export_bundle(cfg: PipelineConfig, models_dir, bundle_dir) -> Path:
    models = {}
    stats = None
    for stage in stages.STAGE_ORDER:
        model, st, _ = stages.load_stage(stage_checkpoint(models_dir, stage),
                                         expect_stage=stage)
        if stats is None:
            stats = st
        elif not stats.matches(st):
            raise ConfigError(f"stage {stage} stats disagree; retrain in "
                              f"order on one dataset")
        models[stage] = model
    return rollout.save_bundle(bundle_dir, models, stats, cfg.rollout_cfg)


# --------------------------------------------------------------------------
# rollout and evaluation


def rollout_cases(cfg: PipelineConfig, cases: list, out_dir,
                  models: dict | None = None,
                  stats: ingest.NormStats | None = None,
                  echo: bool = False) -> list[str]:
    """Roll out every case; echo mode replays the recorded increments
    through the same loop to verify the wiring."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for seq in cases:
        if echo:
            provider: rollout.StageProvider = rollout.EchoProvider(seq)
        else:
            if models is None or stats is None:
                raise ValueError("network rollout needs models and stats")
            provider = rollout.NetworkProvider(seq.micro, models, stats)
        result = rollout.rollout_case(provider, cfg.rollout_cfg)

        case_out = out_dir / seq.case_id
        case_out.mkdir(parents=True, exist_ok=True)
        rows = ["strain,svm,dmg"]
        rows += [f"{float(result.strains[i])!r},{float(result.svm[i])!r},"
                 f"{float(result.dmg[i])!r}"
                 for i in range(result.n_frames())]
        (case_out / "curve.csv").write_text("\n".join(rows) + "\n",
                                            encoding="ascii")
        if result.final_damage is not None:
            np.save(case_out / "final_damage.npy", result.final_damage)
        info = [
            f"case_id = {seq.case_id}",
            f"switch_step = {-1 if result.switch_step is None else result.switch_step}",
            f"uts_index = {result.uts_index}",
            f"mode = {'echo' if echo else 'network'}",
        ]
        (case_out / "rollout.txt").write_text("\n".join(info) + "\n",
                                              encoding="ascii")
        names.append(seq.case_id)
    return names


def read_rollout_curve(case_out: Path) -> tuple[np.ndarray, np.ndarray,
                                                np.ndarray]:
    rows = (case_out / "curve.csv").read_text(encoding="ascii").splitlines()
    data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    return data[:, 0], data[:, 1], data[:, 2]


def evaluate_cases(cases: list, pred_dir, out_dir) -> dict:
    """Compare rollout outputs with the recorded sequences: macro-curve
    error as percent of the reference peak, crack-path error as percent of
    the image width."""
    pred_dir = Path(pred_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    curves = {}
    for seq in cases:
        case_out = pred_dir / seq.case_id
        if not (case_out / "curve.csv").exists():
            raise FileNotFoundError(f"no rollout output for {seq.case_id}")
        strains, svm, _dmg = read_rollout_curve(case_out)
        true = seq.macro_curve()
        err = crackpath.percent_rmse_curve(svm, true, strains, seq.strains())
        path_err = None
        final_path = case_out / "final_damage.npy"
        if final_path.exists() and seq.final_damage is not None:
            pred_final = np.load(final_path)
            try:
                p_pred = crackpath.extract_crack_path(pred_final)
                p_true = crackpath.extract_crack_path(seq.final_damage)
                path_err = crackpath.percent_rmse_path(
                    p_pred.positions, p_true.positions,
                    width=seq.shape[1])
            except crackpath.CrackPathError:
                path_err = None
        records.append(crackpath.CaseRecord(seq.case_id, err, path_err))
        curves[seq.case_id] = (strains, svm, true)

    crackpath.write_records(records, out_dir / "case_metrics.csv")
    np.savez(out_dir / "curves.npz",
             **{cid: np.vstack(c) for cid, c in curves.items()})
    errors = [r.curve_rmse_pct for r in records]
    summary = {
        "n_cases": len(records),
        "mean_curve_rmse_pct": float(np.mean(errors)),
        "max_curve_rmse_pct": float(np.max(errors)),
        "fraction_below_20pct": crackpath.fraction_below(records, 20.0),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
        encoding="ascii")
    return summary


def report_cases(eval_dir, out_dir) -> dict:
    """Plots and cohort summary from a finished evaluation."""
    eval_dir = Path(eval_dir)
    records = []
    with open(eval_dir / "case_metrics.csv", encoding="ascii") as fh:
        import csv as csv_mod
        for row in csv_mod.DictReader(fh):
            records.append(crackpath.CaseRecord(
                row["case_id"], float(row["curve_rmse_pct"]),
                float(row["path_rmse_pct"]) if row["path_rmse_pct"] else None))
    curves = {}
    npz_path = eval_dir / "curves.npz"
    if npz_path.exists():
        with np.load(npz_path) as data:
            for cid in data.files:
                arr = data[cid]
                curves[cid] = (arr[0], arr[1], arr[2])
    return crackpath.summarize(records, out_dir, curves or None)
