"""Shared builders for model-level tests."""

from __future__ import annotations

import numpy as np
import pytest

from f1lab.backbone import ExpertParams, InputBatch, ModelConfig
from f1lab.rvq import Codebook


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        layers=2,
        model_dim=16,
        heads=2,
        head_dim=8,
        v=8,
        scales=(1, 2),
        m=1,
        chunk=2,
        image_size=16,
        patch=4,
        code_dim=4,
        instr_vocab=32,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, b: int = 2, seed: int = 0, with_gen: bool = True, with_act: bool = True) -> InputBatch:
    rng = np.random.default_rng(seed)
    n = cfg.n_gen_tokens
    kw = dict(
        instr=rng.integers(0, cfg.instr_vocab, size=(b, cfg.instr_len)),
        image=rng.uniform(0, 1, size=(b, cfg.image_size, cfg.image_size, 3)).astype(np.float32),
    )
    if with_gen and cfg.use_gen:
        cond = rng.integers(0, cfg.v, size=(b, n)).astype(np.int32)
        cond[:, 0] = -1  # first scale uses the start embedding
        kw.update(
            hist_feats=rng.normal(0, 1, size=(b, n, (cfg.m + 1) * cfg.code_dim)).astype(np.float32),
            cond_ids=cond,
        )
    if with_act:
        kw.update(
            proprio=rng.uniform(0, 1, size=(b, 2)).astype(np.float32),
            a_tau=rng.normal(0, 1, size=(b, cfg.chunk, cfg.action_dim)).astype(np.float32),
            tau=rng.uniform(0, 1, size=b).astype(np.float32),
        )
    return InputBatch(**kw)


def randomized_params(cfg: ModelConfig, seed: int = 0, scale: float = 0.05) -> ExpertParams:
    """Init + noise on every tensor so no family sits at exactly zero."""
    params = ExpertParams.init(cfg, seed)
    rng = np.random.default_rng((seed, 77))
    for name in params.names():
        t = params[name]
        t.data = (t.data + rng.normal(0, scale, size=t.data.shape)).astype(np.float32)
    return params


def make_codebook(cfg: ModelConfig, seed: int = 3) -> Codebook:
    """Random (untrained) codebook matching the model's token geometry."""
    rng = np.random.default_rng((seed, 0xCB))
    pdim = cfg.patch * cfg.patch * 3
    return Codebook(
        vectors=rng.normal(0, 1, size=(cfg.v, cfg.code_dim)).astype(np.float32),
        embed_w=rng.normal(0, 0.2, size=(pdim, cfg.code_dim)).astype(np.float32),
        embed_b=np.zeros(cfg.code_dim, dtype=np.float32),
        unembed_w=rng.normal(0, 0.2, size=(cfg.code_dim, pdim)).astype(np.float32),
        unembed_b=np.zeros(pdim, dtype=np.float32),
        patch=cfg.patch,
        scales=tuple(cfg.scales),
    )


def make_fake_tokenized(cfg: ModelConfig, n_trajs: int = 2, horizon: int = 4, seed: int = 0):
    """Synthetic TokenizedDataset with random frames and tokens."""
    from f1lab.foresight import TokenizedDataset, TokenizedTraj

    rng = np.random.default_rng((seed, 0xDA))
    n = cfg.n_gen_tokens
    trajs = []
    for _ in range(n_trajs):
        trajs.append(
            TokenizedTraj(
                observations=rng.uniform(0, 1, size=(horizon + 1, cfg.image_size, cfg.image_size, 3)).astype(np.float32),
                tokens=rng.integers(0, cfg.v, size=(horizon + 1, n)).astype(np.int32),
                actions=rng.uniform(-0.1, 0.1, size=(horizon, cfg.action_dim)).astype(np.float32),
                proprio=rng.uniform(0, 1, size=(horizon + 1, 2)).astype(np.float32),
                instruction=rng.integers(0, cfg.instr_vocab, size=cfg.instr_len).astype(np.int64),
                success=True,
            )
        )
    return TokenizedDataset(trajs=trajs, scales=tuple(cfg.scales), n_tokens=n)


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    return cfg, randomized_params(cfg, seed=3)
