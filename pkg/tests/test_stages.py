import numpy as np
import pytest
import torch

from cfrcsim import stages, unet
from cfrcsim.fields import CH_DSVM, CH_MICRO, CH_STRAIN
from cfrcsim.ingest import normalize_value
from cfrcsim.stages import (STAGE_ORDER, STAGES, TrainConfig,
                            TrainingDiverged, build_curve_dataset,
                            build_damage1_dataset, build_damage2_dataset,
                            make_config, pool_curve_output, stage_spec,
                            train_stage)


class TestRegistry:
    def test_channel_contracts(self):
        assert (STAGES["damage1"].in_channels,
                STAGES["damage1"].out_channels) == (1, 3)
        assert (STAGES["damage2"].in_channels,
                STAGES["damage2"].out_channels) == (4, 1)
        assert (STAGES["uts"].in_channels,
                STAGES["uts"].out_channels) == (4, 2)
        assert (STAGES["necking"].in_channels,
                STAGES["necking"].out_channels) == (5, 2)

    def test_heads_and_losses(self):
        assert STAGES["damage1"].loss == "hybrid"
        assert STAGES["damage2"].final_activation == "sigmoid"
        assert STAGES["damage2"].loss == "bce"
        for name in ("uts", "necking"):
            assert STAGES[name].loss == "increments"
            assert STAGES[name].pooled

    def test_order_starts_with_stress_then_damage(self):
        assert STAGE_ORDER[:2] == ("damage1", "damage2")
        assert set(STAGE_ORDER) == set(STAGES)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError, match="unknown stage"):
            stage_spec("damage3")

    def test_make_config_propagates_spec(self):
        cfg = make_config("necking", image_size=32, levels=3)
        assert cfg.in_channels == 5
        assert cfg.out_channels == 2
        assert cfg.image_size == 32

    def test_pool_is_global_average(self):
        x = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]],
                           [[2.0, 2.0], [2.0, 2.0]]]])
        pooled = pool_curve_output(x)
        assert pooled.shape == (1, 2)
        assert pooled[0, 0].item() == 4.0
        assert pooled[0, 1].item() == 2.0


def _tiny_model(stage: str):
    return unet.build(make_config(stage, image_size=32, levels=3,
                                  base_channels=8), seed=0)


class TestDatasets:
    def test_damage1_shapes_and_target(self, tiny_seqs, tiny_stats):
        X, Y = build_damage1_dataset(tiny_seqs, tiny_stats)
        n = len(tiny_seqs)
        assert X.shape == (n, 1, 32, 32)
        assert Y.shape == (n, 3, 32, 32)
        assert X.dtype == torch.float32
        seq = tiny_seqs[0]
        k = seq.uts_index
        expect = normalize_value(
            float(seq.frames[k].channels["s11"][3, 4]), "s11", tiny_stats)
        assert Y[0, 0, 3, 4].item() == pytest.approx(float(expect), rel=1e-6)
        expect_micro = normalize_value(float(seq.micro[3, 4]), CH_MICRO,
                                       tiny_stats)
        assert X[0, 0, 3, 4].item() == pytest.approx(float(expect_micro),
                                                     rel=1e-6)

    def test_damage2_consumes_stage1_predictions(self, tiny_seqs, tiny_stats):
        stage1 = _tiny_model("damage1")
        X, Y = build_damage2_dataset(tiny_seqs, tiny_stats, stage1)
        n = len(tiny_seqs)
        assert X.shape == (n, 4, 32, 32)
        assert Y.shape == (n, 1, 32, 32)
        micro, _ = build_damage1_dataset(tiny_seqs, tiny_stats)
        pred = stages.predict_stress(stage1, micro)
        assert torch.equal(X[:, :3], pred)
        assert torch.equal(X[:, 3:], micro)
        vals = torch.unique(Y)
        assert all(v in (0.0, 1.0) for v in vals.tolist())

    def test_curve_dataset_counts_split_at_peak(self, tiny_seqs, tiny_stats):
        Xu, Yu = build_curve_dataset(tiny_seqs, tiny_stats, "uts")
        Xn, Yn = build_curve_dataset(tiny_seqs, tiny_stats, "necking")
        expect_uts = sum(s.uts_index for s in tiny_seqs)
        expect_neck = sum(len(s.frames) - 1 - s.uts_index for s in tiny_seqs)
        assert Xu.shape == (expect_uts, 4, 32, 32)
        assert Xn.shape == (expect_neck, 5, 32, 32)
        assert Yu.shape == (expect_uts, 2)
        assert Yn.shape == (expect_neck, 2)

    def test_curve_state_planes_are_constant(self, tiny_seqs, tiny_stats):
        seq = tiny_seqs[0]
        X, Y = build_curve_dataset([seq], tiny_stats, "uts")
        strain_plane = X[0, 1]
        assert torch.all(strain_plane == strain_plane[0, 0])
        expect = normalize_value(float(seq.strains()[0]), CH_STRAIN,
                                 tiny_stats)
        assert strain_plane[0, 0].item() == pytest.approx(float(expect),
                                                          rel=1e-6)

    def test_curve_targets_are_normalized_increments(self, tiny_seqs,
                                                     tiny_stats):
        seq = tiny_seqs[0]
        _, Y = build_curve_dataset([seq], tiny_stats, "uts")
        svm = seq.macro_curve()
        expect = normalize_value(svm[1] - svm[0], CH_DSVM, tiny_stats)
        assert Y[0, 0].item() == pytest.approx(float(expect), rel=1e-5)

    def test_necking_carries_final_damage_plane(self, tiny_seqs, tiny_stats):
        X, _ = build_curve_dataset(tiny_seqs, tiny_stats, "necking")
        plane = X[0, 4].numpy()
        binary = (tiny_seqs[0].final_damage >= 0.5).astype(np.float64)
        expect = normalize_value(binary, "final", tiny_stats)
        assert np.allclose(plane, expect, atol=1e-6)

    def test_bad_regime_rejected(self, tiny_seqs, tiny_stats):
        with pytest.raises(ValueError, match="regime"):
            build_curve_dataset(tiny_seqs, tiny_stats, "rising")

    def test_empty_sample_set_rejected(self, tiny_stats):
        with pytest.raises(ValueError, match="no uts samples"):
            build_curve_dataset([], tiny_stats, "uts")

    def test_missing_final_damage_rejected(self, tiny_seqs, tiny_stats):
        import copy
        seq = copy.copy(tiny_seqs[0])
        seq.final_damage = None
        with pytest.raises(ValueError, match="final damage"):
            build_curve_dataset([seq], tiny_stats, "necking")


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig(stage="damage1").validate()

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(stage="damage1", epochs=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(stage="damage1", lr=-1.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(stage="damage1", plateau_factor=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(stage="nope").validate()


def _curve_training_set(tiny_seqs, tiny_stats, n: int = 16):
    X, Y = build_curve_dataset(tiny_seqs, tiny_stats, "uts")
    return X[:n], Y[:n]


class TestTraining:
    def test_loss_decreases(self, tiny_seqs, tiny_stats):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=20, batch_size=8, lr=1e-3,
                          seed=0)
        model, history = train_stage(X, Y, cfg, stats=tiny_stats)
        assert not model.training
        assert len(history) == 20
        assert history[-1]["total"] < history[0]["total"]

    def test_training_is_deterministic(self, tiny_seqs, tiny_stats):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=8)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=4, batch_size=4, lr=1e-3,
                          seed=7)
        m1, h1 = train_stage(X, Y, cfg, stats=tiny_stats)
        m2, h2 = train_stage(X, Y, cfg, stats=tiny_stats)
        assert h1 == h2
        for name, p in m1.state_dict().items():
            assert torch.equal(p, m2.state_dict()[name]), name

    def test_divergence_detected(self, tiny_seqs, tiny_stats):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=8)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=30, batch_size=4, lr=1e12,
                          seed=0)
        with pytest.raises(TrainingDiverged):
            train_stage(X, Y, cfg, stats=tiny_stats)

    def test_stop_loss_ends_early(self, tiny_seqs, tiny_stats):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=8)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=50, batch_size=4, lr=1e-3,
                          seed=0, stop_loss=1e9)
        _, history = train_stage(X, Y, cfg, stats=tiny_stats)
        assert len(history) == 1

    def test_channel_mismatch_rejected(self, tiny_seqs, tiny_stats):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=4)
        cfg = TrainConfig(stage="necking", image_size=32, levels=3,
                          base_channels=8, epochs=1)
        with pytest.raises(ValueError, match="input channels"):
            train_stage(X, Y, cfg, stats=tiny_stats)

    def test_hybrid_stage_logs_parts(self, tiny_seqs, tiny_stats, tmp_path):
        X, Y = build_damage1_dataset(tiny_seqs, tiny_stats)
        cfg = TrainConfig(stage="damage1", image_size=32, levels=3,
                          base_channels=8, epochs=2, batch_size=2, lr=1e-3)
        log = tmp_path / "metrics.csv"
        _, history = train_stage(X, Y, cfg, stats=tiny_stats, log_path=log)
        assert history[0]["mse"] > 0
        assert history[0]["physics"] > 0
        lines = log.read_text().splitlines()
        assert lines[0] == stages.METRICS_HEADER
        assert len(lines) == 1 + len(history)

    def test_bce_stage_needs_no_stats(self):
        torch.manual_seed(0)
        X = torch.randn(4, 4, 32, 32)
        Y = (torch.rand(4, 1, 32, 32) > 0.8).float()
        cfg = TrainConfig(stage="damage2", image_size=32, levels=3,
                          base_channels=8, epochs=2, batch_size=2, lr=1e-3)
        _, history = train_stage(X, Y, cfg)
        assert history[0]["bce"] > 0
        assert history[0]["physics"] == 0.0

    def test_hybrid_without_stats_rejected(self, tiny_seqs, tiny_stats):
        X, Y = build_damage1_dataset(tiny_seqs, tiny_stats)
        cfg = TrainConfig(stage="damage1", image_size=32, levels=3,
                          base_channels=8, epochs=1, batch_size=2)
        with pytest.raises(ValueError, match="stats"):
            train_stage(X, Y, cfg)


class TestSaveLoad:
    def test_round_trip_with_stage_check(self, tiny_seqs, tiny_stats,
                                         tmp_path):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=4)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=1, batch_size=4)
        model, history = train_stage(X, Y, cfg, stats=tiny_stats)
        path = stages.save_stage(tmp_path / "uts.ckpt", model, tiny_stats,
                                 cfg, history)
        back, stats, meta = stages.load_stage(path, expect_stage="uts")
        assert meta["stage"] == "uts"
        assert meta["epochs_run"] == 1
        assert stats.matches(tiny_stats)
        assert torch.equal(back.head.weight, model.head.weight)

    def test_wrong_stage_rejected(self, tiny_seqs, tiny_stats, tmp_path):
        X, Y = _curve_training_set(tiny_seqs, tiny_stats, n=4)
        cfg = TrainConfig(stage="uts", image_size=32, levels=3,
                          base_channels=8, epochs=1, batch_size=4)
        model, history = train_stage(X, Y, cfg, stats=tiny_stats)
        path = stages.save_stage(tmp_path / "uts.ckpt", model, tiny_stats,
                                 cfg, history)
        with pytest.raises(ValueError, match="stage"):
            stages.load_stage(path, expect_stage="necking")

    def test_stats_required(self, tmp_path):
        model = _tiny_model("uts")
        path = unet.save_checkpoint(tmp_path / "bare.ckpt", model)
        with pytest.raises(ValueError, match="stats"):
            stages.load_stage(path)
