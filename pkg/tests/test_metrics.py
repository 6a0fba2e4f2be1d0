"""Accuracies, correlation, closed-loop harness, and the latency bench."""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_codebook, make_fake_tokenized, randomized_params, tiny_config
from f1lab import metrics as M
from f1lab.backbone import ExpertParams
from f1lab.errors import ConfigError, DataError, NumericError
from f1lab.rvq import TokenPyramid
from f1lab.world import WorldConfig


@pytest.fixture
def tiny_world_setup():
    cfg = tiny_config()
    cb = make_codebook(cfg)
    params = ExpertParams.init(cfg, 0)
    wc = WorldConfig(n_trajectories=1, horizon=40, resolution=16)
    return cfg, cb, params, wc


# ---- token accuracies ------------------------------------------------------


def test_image_token_accuracy_examples():
    gt = TokenPyramid((1, 2), (np.array([[3]]), np.array([[1, 2], [3, 4]])))
    same, per = M.image_token_accuracy(gt, gt)
    assert same == 1.0 and per == {1: 1.0, 2: 1.0}
    one_off = TokenPyramid((1, 2), (np.array([[3]]), np.array([[1, 2], [3, 0]])))
    acc, per = M.image_token_accuracy(one_off, gt)
    assert acc == pytest.approx(0.8)  # one mismatch among five tokens
    assert per == {1: 1.0, 2: 0.75}
    disjoint = TokenPyramid((1, 2), (np.array([[9]]), np.array([[5, 6], [7, 8]])))
    assert M.image_token_accuracy(disjoint, gt)[0] == 0.0
    with pytest.raises(DataError):
        M.image_token_accuracy(TokenPyramid((1,), (np.array([[3]]),)), gt)


def test_image_token_accuracy_flat_matches_pyramid():
    rng = np.random.default_rng(0)
    scales = (1, 2)
    pred = rng.integers(0, 8, size=(4, 5))
    gt = rng.integers(0, 8, size=(4, 5))
    acc_flat, per_flat = M.image_token_accuracy_flat(pred, gt, scales)
    accs = []
    for b in range(4):
        pyr_p = TokenPyramid(scales, (pred[b, :1].reshape(1, 1), pred[b, 1:].reshape(2, 2)))
        pyr_g = TokenPyramid(scales, (gt[b, :1].reshape(1, 1), gt[b, 1:].reshape(2, 2)))
        accs.append(M.image_token_accuracy(pyr_p, pyr_g)[0])
    assert acc_flat == pytest.approx(np.mean(accs))
    with pytest.raises(DataError):
        M.image_token_accuracy_flat(pred, gt[:2], scales)


def test_image_token_accuracy_permutation_equivariant():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 8, size=(3, 5))
    gt = rng.integers(0, 8, size=(3, 5))
    base = M.image_token_accuracy_flat(pred, gt, (1, 2))[0]
    perm = rng.permutation(5)
    assert M.image_token_accuracy_flat(pred[:, perm], gt[:, perm], (1, 2))[0] == base


def test_action_token_accuracy_examples():
    gt = np.zeros((1, 2, 1))
    assert M.action_token_accuracy(gt, gt, 0.01) == 1.0
    pred = np.array([[[0.005], [0.02]]])
    assert M.action_token_accuracy(pred, gt, 0.01) == 0.5
    exact = np.array([[[0.01], [0.0]]])
    assert M.action_token_accuracy(exact, gt, 0.01) == 0.5  # strict inequality
    with pytest.raises(ConfigError):
        M.action_token_accuracy(gt, gt, 0.0)
    with pytest.raises(DataError):
        M.action_token_accuracy(gt, np.zeros((1, 3, 1)), 0.01)


def test_action_token_accuracy_monotone_in_tau():
    rng = np.random.default_rng(2)
    pred = rng.normal(0, 0.05, size=(8, 4, 2))
    gt = np.zeros_like(pred)
    accs = [M.action_token_accuracy(pred, gt, t) for t in (0.01, 0.02, 0.05)]
    assert accs == sorted(accs)


# ---- correlation -----------------------------------------------------------


def test_correlation_examples():
    xs = np.array([0.1, 0.4, 0.5, 0.9])
    pe, sp = M.correlation(xs, 2 * xs + 1)
    assert pe == pytest.approx(1.0) and sp == pytest.approx(1.0)
    pe, sp = M.correlation(xs, -xs)
    assert pe == pytest.approx(-1.0) and sp == pytest.approx(-1.0)
    pe, sp = M.correlation([1, 2, 3], [1, 3, 2])
    assert sp == pytest.approx(0.5)
    assert pe == pytest.approx(0.5)


def test_correlation_affine_invariance_and_bounds():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=20)
    ys = rng.normal(size=20)
    pe, sp = M.correlation(xs, ys)
    assert -1.0 <= pe <= 1.0 and -1.0 <= sp <= 1.0
    pe2, _ = M.correlation(3.0 * xs + 5.0, ys)
    assert pe2 == pytest.approx(pe, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(NumericError):
        M.correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        M.correlation([1.0, 2.0], [1.0, 2.0])


# ---- open-loop eval --------------------------------------------------------


def test_open_loop_eval_shapes(tiny_world_setup):
    cfg, cb, params, _ = tiny_world_setup
    data = make_fake_tokenized(cfg, n_trajs=3, horizon=4, seed=5)
    out = M.open_loop_eval(cfg, params, cb, data, n_pairs=6, seed=0)
    assert 0.0 <= out.image_acc <= 1.0
    assert set(out.per_scale_acc) == set(cfg.scales)
    assert set(out.acc_tau) == set(M.TAUS)
    assert set(out.decoded_mse) == {1, 2}
    assert out.n_pairs == 6
    # deterministic given the same seed
    again = M.open_loop_eval(cfg, params, cb, data, n_pairs=6, seed=0)
    assert again.acc_tau == out.acc_tau and again.image_acc == out.image_acc


def test_open_loop_eval_no_gen(tiny_world_setup):
    cfg, cb, _, _ = tiny_world_setup
    cfg_ng = tiny_config(use_gen=False)
    params = ExpertParams.init(cfg_ng, 0)
    data = make_fake_tokenized(cfg_ng, n_trajs=3, horizon=4, seed=5)
    out = M.open_loop_eval(cfg_ng, params, cb, data, n_pairs=4, seed=0)
    assert np.isnan(out.image_acc) and out.decoded_mse == {}
    assert set(out.acc_tau) == set(M.TAUS)


# ---- closed-loop harness ---------------------------------------------------


def test_closed_loop_expert_and_floor(tiny_world_setup):
    cfg, cb, params, wc = tiny_world_setup
    expert = M.closed_loop_eval(cfg, params, cb, wc, seeds=list(range(20)), actor="expert")
    assert expert.success_rate >= 0.95
    assert all(r.steps <= wc.horizon for r in expert.records)
    floor = M.closed_loop_eval(cfg, params, cb, wc, seeds=list(range(20)))
    assert floor.success_rate < 0.10


def test_closed_loop_deterministic(tiny_world_setup):
    cfg, cb, _, wc = tiny_world_setup
    params = randomized_params(cfg, seed=2)
    a = M.closed_loop_eval(cfg, params, cb, wc, seeds=[5, 6, 7, 8])
    b = M.closed_loop_eval(cfg, params, cb, wc, seeds=[5, 6, 7, 8])
    assert [(r.seed, r.success, r.steps) for r in a.records] == [(r.seed, r.success, r.steps) for r in b.records]
    c = M.closed_loop_eval(cfg, params, cb, wc, seeds=[5, 6, 7, 8], replan_every=1)
    assert len(c.records) == 4


def test_closed_loop_config_errors(tiny_world_setup):
    cfg, cb, params, _ = tiny_world_setup
    with pytest.raises(ConfigError):
        M.closed_loop_eval(cfg, params, cb, WorldConfig(resolution=32), seeds=[0])
    with pytest.raises(ConfigError):
        M.closed_loop_eval(cfg, params, cb, WorldConfig(resolution=16), seeds=[0], actor="oracle")


# ---- latency bench ---------------------------------------------------------


def test_bench_latency_rows_and_band(tiny_world_setup):
    cfg, cb, params, wc = tiny_world_setup
    table = M.bench_latency(cfg, params, cb, wc, runs=20)
    assert tuple(table) == M.BENCH_ROWS
    assert all(v >= 0.0 for v in table.values())
    stages = [v for k, v in table.items() if k != "total inference"]
    assert sum(stages) <= 1.2 * table["total inference"]
    assert table["total inference"] >= max(stages)


def test_bench_flow_scales_with_denoise_steps(tiny_world_setup):
    cfg, cb, params, wc = tiny_world_setup
    # best-of timing so background load cannot skew the comparison
    t10 = M.bench_latency(cfg, params, cb, wc, runs=40, denoise_steps=10, stat="min")
    t20 = M.bench_latency(cfg, params, cb, wc, runs=40, denoise_steps=20, stat="min")
    ratio = t20["x10 action forward pass (flow)"] / t10["x10 action forward pass (flow)"]
    assert 1.4 <= ratio <= 2.6  # ~2x with a +-30% band


# ---- writers ---------------------------------------------------------------


def test_writers_round_trip(tmp_path):
    rows = [
        {"step": 62, "image_token_acc": 0.5, "acc_0.01": 0.1, "acc_0.02": 0.2, "acc_0.05": 0.3},
        {"step": 125, "image_token_acc": 0.75, "acc_0.01": 0.2, "acc_0.02": 0.4, "acc_0.05": 0.6},
    ]
    M.write_eval_csv(tmp_path / "eval.csv", rows)
    lines = (tmp_path / "eval.csv").read_text().strip().split("\n")
    assert lines[0] == "step,image_token_acc,acc_0.01,acc_0.02,acc_0.05"
    assert lines[1].startswith("62,0.5,")

    M.write_correlation_json(tmp_path / "corr.json", {0.01: (0.9, 0.8), 0.05: (0.7, 0.6)}, n=8)
    doc = json.loads((tmp_path / "corr.json").read_text())
    assert doc["n_checkpoints"] == 8
    assert doc["taus"]["0.01"]["pearson"] == 0.9

    M.write_foresight_csv(tmp_path / "fs.csv", [{"step": 1, "scale": 2, "token_acc": 0.5, "mse": 0.01}])
    assert (tmp_path / "fs.csv").read_text().startswith("step,scale,token_acc,mse\n1,2,0.5,0.01")

    res = M.ClosedLoopResult(success_rate=0.5, mean_steps=10.0, records=[M.EpisodeRecord(3, True, 7), M.EpisodeRecord(4, False, 40)])
    M.write_rollout_summary(tmp_path / "roll.json", res)
    doc = json.loads((tmp_path / "roll.json").read_text())
    assert doc["success_rate"] == 0.5 and doc["seeds"] == [3, 4] and doc["successes"] == [True, False]
