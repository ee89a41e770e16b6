import json

import numpy as np
import pytest

from cfrcsim import ingest, pipeline, rollout, stages
from cfrcsim.pipeline import (ConfigError, PipelineConfig, case_name,
                              case_seed, config_sha256, load_dataset,
                              load_pipeline_config, require_previous_stages,
                              write_provenance)

MINI_INI = """\
[microgen]
target_vf = 0.4
min_gap = 0.25

[material]
file = mat.txt

[simulate]
n_cases = 7
base_seed = 42

[dataset]
downsample = 4
n_train = 5
n_test = 2
mirror = 1

[train]
levels = 4
epochs = 11
lr = 5e-4

[train.uts]
epochs = 3

[rollout]
switch_floor = 30.0
d_eps = 4e-4
eps_f = 0.012
"""


@pytest.fixture()
def mini_config(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(MINI_INI, encoding="ascii")
    (tmp_path / "mat.txt").write_text("matrix.E = 4.2\n", encoding="ascii")
    return ini


class TestConfigParsing:
    def test_sections_land_in_config(self, mini_config):
        cfg = load_pipeline_config(mini_config)
        assert cfg.micro.target_vf == 0.4
        assert cfg.micro.min_gap == 0.25
        assert cfg.n_cases == 7
        assert cfg.base_seed == 42
        assert cfg.downsample == 4
        assert (cfg.n_train, cfg.n_test) == (5, 2)
        assert cfg.mirror is True
        assert cfg.rollout_cfg.switch_floor == 30.0
        assert cfg.rollout_cfg.n_steps() == 30

    def test_train_overrides_per_stage(self, mini_config):
        cfg = load_pipeline_config(mini_config)
        base = cfg.train_config("damage1", image_size=32)
        uts = cfg.train_config("uts", image_size=32)
        assert base.epochs == 11
        assert uts.epochs == 3
        assert uts.levels == 4  # base still applies
        assert uts.lr == 5e-4

    def test_material_file_resolved_next_to_config(self, mini_config):
        cfg = load_pipeline_config(mini_config)
        mat = cfg.material_params(mini_config.parent)
        assert mat.matrix.E == pytest.approx(4200.0)

    def test_missing_material_file_rejected(self, mini_config):
        (mini_config.parent / "mat.txt").unlink()
        cfg = load_pipeline_config(mini_config)
        with pytest.raises(ConfigError, match="material file"):
            cfg.material_params(mini_config.parent)

    def test_missing_config_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_pipeline_config(tmp_path / "nope.ini")

    def test_unknown_train_key_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[train]\nmomentum = 0.9\n", encoding="ascii")
        with pytest.raises(ConfigError, match="momentum"):
            load_pipeline_config(ini)

    def test_bad_value_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[simulate]\nn_cases = many\n", encoding="ascii")
        with pytest.raises(ConfigError, match="bad value"):
            load_pipeline_config(ini)

    def test_invalid_rollout_schedule_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[rollout]\nd_eps = 7e-5\n", encoding="ascii")
        with pytest.raises(ConfigError, match="rollout"):
            load_pipeline_config(ini)

    def test_defaults_without_sections(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("", encoding="ascii")
        cfg = load_pipeline_config(ini)
        assert cfg.n_cases == 25
        assert cfg.downsample == 1
        assert cfg.mirror is False


class TestProvenance:
    def test_hash_tracks_content(self, tmp_path):
        a = tmp_path / "a.ini"
        b = tmp_path / "b.ini"
        a.write_text("[simulate]\nn_cases = 2\n")
        b.write_text("[simulate]\nn_cases = 2\n")
        assert config_sha256(a) == config_sha256(b)
        b.write_text("[simulate]\nn_cases = 3\n")
        assert config_sha256(a) != config_sha256(b)

    def test_write_is_deterministic(self, mini_config, tmp_path):
        p1 = write_provenance(tmp_path / "x", "simulate", mini_config,
                              {"n_cases": 2})
        p2 = write_provenance(tmp_path / "y", "simulate", mini_config,
                              {"n_cases": 2})
        assert p1.read_bytes() == p2.read_bytes()

    def test_contents(self, mini_config, tmp_path):
        path = write_provenance(tmp_path, "gen-micro", mini_config)
        info = json.loads(path.read_text())
        assert info["command"] == "gen-micro"
        assert info["config_sha256"] == config_sha256(mini_config)
        assert "numpy" in info["versions"]
        assert "cfrcsim" in info["versions"]
        assert not any("time" in k.lower() or "date" in k.lower()
                       for k in info)

    def test_case_naming(self):
        cfg = PipelineConfig(base_seed=300)
        assert case_seed(cfg, 0) == 300
        assert case_seed(cfg, 2) == 302
        assert case_name(302) == "case_00302"


class TestStageOrdering:
    def test_first_stage_needs_nothing(self, tmp_path):
        require_previous_stages(tmp_path, "damage1")

    def test_later_stage_needs_earlier_checkpoints(self, tmp_path):
        with pytest.raises(ConfigError, match="damage1"):
            require_previous_stages(tmp_path, "damage2")
        with pytest.raises(ConfigError, match="train"):
            require_previous_stages(tmp_path, "necking")


class TestDatasetRoundTrip:
    def test_split_reduce_augment(self, tiny_seqs, tmp_path):
        cases = tmp_path / "cases"
        for seq in tiny_seqs:
            ingest.write_case(seq, cases / seq.case_id)
        cfg = PipelineConfig(n_train=1, n_test=1, downsample=2, mirror=True)
        split = pipeline.build_dataset(cfg, cases, tmp_path / "data")
        assert len(split["train"]) == 2  # original + mirror
        assert len(split["test"]) == 1
        assert any(cid.endswith("-mir") for cid in split["train"])

        train, test, stats = load_dataset(tmp_path / "data")
        assert len(train) == 2 and len(test) == 1
        assert train[0].shape == (16, 16)  # 32 reduced by 2
        assert set(stats.mean) >= {"svm", "micro", "dsvm", "ddmg", "eps",
                                   "final"}

    def test_insufficient_cases_rejected(self, tiny_seqs, tmp_path):
        cases = tmp_path / "cases"
        ingest.write_case(tiny_seqs[0], cases / tiny_seqs[0].case_id)
        cfg = PipelineConfig(n_train=2, n_test=1)
        with pytest.raises(ConfigError, match="need 3 cases"):
            pipeline.build_dataset(cfg, cases, tmp_path / "data")

    def test_simulate_follows_rollout_schedule(self, tmp_path):
        # A custom [rollout] schedule must reach the oracle: references and
        # rollouts have to live on the same strain grid or evaluate rejects.
        cfg = PipelineConfig(n_cases=1, base_seed=7)
        cfg.micro.target_vf = 0.3
        cfg.rollout_cfg = rollout.RolloutConfig(d_eps=4e-4, eps_f=0.012)
        names = pipeline.simulate_cases(cfg, tmp_path / "cases")
        seq = ingest.read_case(tmp_path / "cases" / names[0])
        assert len(seq.frames) == cfg.rollout_cfg.n_steps() + 1 == 31
        assert seq.frames[-1].strain == pytest.approx(0.012)

    def test_empty_case_dir_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            pipeline.list_case_dirs(tmp_path / "missing")

    def test_missing_dataset_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


@pytest.mark.slow
class TestWorkspaceArtifacts:
    def test_dataset_layout(self, cli_workspace):
        train, test, stats = load_dataset(cli_workspace / "data")
        assert len(train) == 4  # 2 cases + mirrors
        assert len(test) == 1
        assert train[0].shape == (32, 32)
        split = (cli_workspace / "data" / "split.txt").read_text()
        assert "case_00300" in split
        assert "case_00300-mir" in split

    def test_models_and_logs(self, cli_workspace):
        for stage in stages.STAGE_ORDER:
            assert (cli_workspace / "models" / f"{stage}.ckpt").exists()
            log = cli_workspace / "models" / f"train_{stage}.csv"
            lines = log.read_text().splitlines()
            assert lines[0] == stages.METRICS_HEADER
            assert len(lines) >= 2
            prov = (cli_workspace / "models"
                    / f"provenance_{stage}.json")
            assert json.loads(prov.read_text())["stage"] == stage

    def test_bundle_reloads(self, cli_workspace):
        models, stats, cfg = rollout.load_bundle(cli_workspace / "bundle")
        assert set(models) == set(stages.STAGE_ORDER)
        assert cfg.switch_floor == 20.0
        _, _, dataset_stats = load_dataset(cli_workspace / "data")
        assert stats.matches(dataset_stats)

    def test_rollout_outputs(self, cli_workspace):
        case_out = cli_workspace / "pred" / "case_00302"
        strains, svm, dmg = pipeline.read_rollout_curve(case_out)
        assert strains.shape == (61,)
        assert np.isfinite(svm).all()
        assert (np.diff(dmg) >= 0).all()
        final = np.load(case_out / "final_damage.npy")
        assert final.shape == (32, 32)
        info = (case_out / "rollout.txt").read_text()
        assert "mode = network" in info

    def test_echo_rollout_reproduces_oracle(self, cli_workspace):
        train, _, _ = load_dataset(cli_workspace / "data")
        summary = pipeline.evaluate_cases(train, cli_workspace / "echo",
                                          cli_workspace / "eval_echo")
        assert summary["mean_curve_rmse_pct"] <= 1e-9
        assert summary["fraction_below_20pct"] == 1.0

    def test_evaluation_artifacts(self, cli_workspace):
        eval_dir = cli_workspace / "eval"
        summary = json.loads((eval_dir / "summary.json").read_text())
        assert summary["n_cases"] == 1
        assert (eval_dir / "case_metrics.csv").exists()
        assert (eval_dir / "curves.npz").exists()

    def test_report_artifacts(self, cli_workspace):
        report = cli_workspace / "report"
        assert (report / "case_metrics.csv").exists()
        assert (report / "error_histogram.png").exists()
        assert (report / "curve_overlays.png").exists()

    def test_provenance_at_every_step(self, cli_workspace):
        for sub in ("micro", "cases", "data", "bundle", "pred", "eval",
                    "report"):
            path = cli_workspace / sub / "provenance.json"
            assert path.exists(), sub
            info = json.loads(path.read_text())
            assert info["config_sha256"] == config_sha256(
                cli_workspace / "run.ini")
