"""Shared fixtures: memoized oracle cases so expensive simulations run once
per session regardless of which tests need them."""

from __future__ import annotations

import numpy as np
import pytest

from cfrcsim import ingest, material, microgen

_CASE_CACHE: dict = {}


def make_oracle_case(seed: int, target_vf: float = 0.5):
    """(layout, grid, sequence) for one full-resolution synthetic case."""
    key = (seed, target_vf)
    if key not in _CASE_CACHE:
        params = material.MaterialParams()
        mparams = microgen.MicrostructureParams(target_vf=target_vf)
        layout, grid = microgen.generate_microstructure(mparams, seed=seed)
        seq = material.simulate_case(grid, params, layout.centers,
                                     layout.radius,
                                     case_id=f"case_{seed:05d}", seed=seed)
        _CASE_CACHE[key] = (layout, grid, seq)
    return _CASE_CACHE[key]


@pytest.fixture(scope="session")
def oracle_case():
    return make_oracle_case(31)[2]


@pytest.fixture(scope="session")
def oracle_pair():
    return [make_oracle_case(s)[2] for s in (31, 32)]


@pytest.fixture(scope="session")
def tiny_seqs(oracle_pair):
    # 32x32 block-mean reductions: fast enough for network tests
    return [ingest.downsample_sequence(s, 8) for s in oracle_pair]


@pytest.fixture(scope="session")
def tiny_stats(tiny_seqs):
    return ingest.fit_norm_stats(tiny_seqs)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


WORKSPACE_INI = """\
[microgen]
target_vf = 0.5

[simulate]
n_cases = 3
base_seed = 300

[dataset]
downsample = 8
n_train = 2
n_test = 1
mirror = 1

[train]
levels = 3
base_channels = 8
epochs = 2
batch_size = 8
lr = 1e-3

[train.damage1]
epochs = 1

[rollout]
switch_floor = 20.0
"""


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """One full pipeline run at desk scale, shared by the CLI tests."""
    from cfrcsim.cli import main

    root = tmp_path_factory.mktemp("workspace")
    ini = root / "run.ini"
    ini.write_text(WORKSPACE_INI, encoding="ascii")
    steps = [
        ["gen-micro", "--config", str(ini), "--out", str(root / "micro")],
        ["simulate", "--config", str(ini), "--out", str(root / "cases"),
         "--jobs", "2"],
        ["build-dataset", "--config", str(ini), "--cases",
         str(root / "cases"), "--out", str(root / "data")],
        ["train", "--config", str(ini), "--dataset", str(root / "data"),
         "--stage", "damage1", "--out", str(root / "models")],
        ["train", "--config", str(ini), "--dataset", str(root / "data"),
         "--stage", "damage2", "--out", str(root / "models")],
        ["train", "--config", str(ini), "--dataset", str(root / "data"),
         "--stage", "uts", "--out", str(root / "models")],
        ["train", "--config", str(ini), "--dataset", str(root / "data"),
         "--stage", "necking", "--out", str(root / "models")],
        ["export-bundle", "--config", str(ini), "--models",
         str(root / "models"), "--out", str(root / "bundle")],
        ["rollout", "--config", str(ini), "--dataset", str(root / "data"),
         "--bundle", str(root / "bundle"), "--out", str(root / "pred")],
        ["rollout", "--config", str(ini), "--dataset", str(root / "data"),
         "--split", "train", "--echo-oracle", "--out", str(root / "echo")],
        ["evaluate", "--config", str(ini), "--dataset", str(root / "data"),
         "--pred", str(root / "pred"), "--out", str(root / "eval")],
        ["report", "--config", str(ini), "--eval", str(root / "eval"),
         "--out", str(root / "report")],
    ]
    for argv in steps:
        code = main(argv)
        assert code == 0, f"step {argv[0]} exited {code}"
    return root
