"""Backbone tests: embedders, joint masked attention, gradients,
freezing, rotary/property checks, and checkpoint round-trips."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_batch, randomized_params, tiny_config
from f1lab import backbone as B
from f1lab import tensor as T
from f1lab.errors import ConfigError, NumericError
from f1lab.layout import AttentionMask, build_uga_mask
from f1lab.tensor import Tensor


def run(cfg, params, batch, mask=None):
    seq = B.embed_inputs(cfg, params, batch)
    return seq, B.forward(cfg, params, seq, mask)


# ---- embed_inputs ----------------------------------------------------------


def test_zero_inputs_give_bias_embeddings(tiny_model):
    cfg, params = tiny_model
    b = 1
    batch = B.InputBatch(
        instr=np.zeros((b, cfg.instr_len), dtype=np.int64),
        image=np.zeros((b, cfg.image_size, cfg.image_size, 3), dtype=np.float32),
        proprio=np.zeros((b, 2), dtype=np.float32),
        a_tau=np.zeros((b, cfg.chunk, cfg.action_dim), dtype=np.float32),
        tau=np.zeros(b, dtype=np.float32),
    )
    seq = B.embed_inputs(cfg, params, batch)
    assert np.all(np.isfinite(seq.x.data))
    g = cfg.grid_side**2
    vis = seq.x.data[0, cfg.instr_len : cfg.instr_len + g]
    want = params["und.vision_b"].data + params["und.vision_pos"].data
    assert np.allclose(vis, want)
    # tau=0 still contributes the gain feature 1/(1 + delta) to every token
    gain0 = np.float32(1.0 / (1.0 + B.PRECOND_DELTA))
    tau_part = params["act.tau_b"].data + gain0 * params["act.tau_w"].data[1]
    prop = seq.x.data[0, cfg.instr_len + g]
    assert np.allclose(prop, params["act.proprio_b"].data + tau_part)
    act = seq.x.data[0, cfg.instr_len + g + 1 :]
    want_act = params["act.action_b"].data + tau_part
    assert np.allclose(act, want_act[None, :], atol=1e-6)


def test_instruction_permutation_changes_only_those_positions(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=1, seed=1)
    other = B.InputBatch(**{**batch.__dict__, "instr": batch.instr[:, [1, 0, 2]]})
    s1 = B.embed_inputs(cfg, params, batch)
    s2 = B.embed_inputs(cfg, params, other)
    diff = np.abs(s1.x.data - s2.x.data).sum(axis=-1)[0]
    assert diff[0] > 0 and diff[1] > 0
    assert np.all(diff[2:] == 0.0)


def test_pixel_change_is_patch_local(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=1, seed=2)
    img2 = batch.image.copy()
    img2[0, 5, 9, 1] *= 2.0  # patch row 1, col 2 on the 4x4 grid
    other = B.InputBatch(**{**batch.__dict__, "image": img2})
    s1 = B.embed_inputs(cfg, params, batch)
    s2 = B.embed_inputs(cfg, params, other)
    diff = np.abs(s1.x.data - s2.x.data).sum(axis=-1)[0]
    g = cfg.grid_side
    patch_idx = cfg.instr_len + 1 * g + 2
    changed = np.flatnonzero(diff)
    assert list(changed) == [patch_idx]


def test_embed_shape_errors(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=2)
    bad = B.InputBatch(**{**batch.__dict__, "instr": batch.instr[:, :2]})
    with pytest.raises(ConfigError):
        B.embed_inputs(cfg, params, bad)
    bad2 = B.InputBatch(**{**batch.__dict__, "a_tau": batch.a_tau[:, :1]})
    with pytest.raises(ConfigError):
        B.embed_inputs(cfg, params, bad2)


# ---- forward ---------------------------------------------------------------


def test_forward_shapes_and_heads(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=3)
    seq, out = run(cfg, params, batch)
    L = seq.layout.total_len
    assert out.hidden.shape == (3, L, cfg.model_dim)
    assert out.gen_logits.shape == (3, cfg.n_gen_tokens, cfg.v)
    assert out.act_field.shape == (3, cfg.chunk, cfg.action_dim)


def test_duplicate_batch_entries_identical(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=1, seed=5)
    dup = B.InputBatch(
        **{
            **batch.__dict__,
            "instr": np.repeat(batch.instr, 2, 0),
            "image": np.repeat(batch.image, 2, 0),
            "hist_feats": np.repeat(batch.hist_feats, 2, 0),
            "cond_ids": np.repeat(batch.cond_ids, 2, 0),
            "proprio": np.repeat(batch.proprio, 2, 0),
            "a_tau": np.repeat(batch.a_tau, 2, 0),
            "tau": np.repeat(batch.tau, 2, 0),
        }
    )
    _, out = run(cfg, params, dup)
    assert np.array_equal(out.hidden.data[0], out.hidden.data[1])


def test_diagonal_mask_tokenwise_independence(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=1, seed=6)
    seq = B.embed_inputs(cfg, params, batch)
    L = seq.layout.total_len
    eye = AttentionMask(np.eye(L, dtype=bool))
    out1 = B.forward(cfg, params, seq, eye)
    # perturb one token's input and check all others are exactly unchanged
    batch2 = B.InputBatch(**{**batch.__dict__, "proprio": batch.proprio + 1.0})
    seq2 = B.embed_inputs(cfg, params, batch2)
    out2 = B.forward(cfg, params, seq2, eye)
    prop_idx = cfg.instr_len + cfg.grid_side**2 + cfg.n_gen_tokens
    diff = np.abs(out1.hidden.data - out2.hidden.data).sum(axis=-1)[0]
    assert diff[prop_idx] > 0
    mask = np.ones(L, dtype=bool)
    mask[prop_idx] = False
    assert np.all(diff[mask] == 0.0)


def test_und_exactly_invariant_to_gen_act_inputs(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=2, seed=7)
    _, out1 = run(cfg, params, batch)
    rng = np.random.default_rng(8)
    wild = B.InputBatch(
        **{
            **batch.__dict__,
            "hist_feats": rng.normal(0, 10, size=batch.hist_feats.shape).astype(np.float32),
            "cond_ids": rng.integers(0, cfg.v, size=batch.cond_ids.shape).astype(np.int32),
            "proprio": rng.normal(0, 10, size=batch.proprio.shape).astype(np.float32),
            "a_tau": rng.normal(0, 10, size=batch.a_tau.shape).astype(np.float32),
            "tau": rng.uniform(0, 1, size=batch.tau.shape).astype(np.float32),
        }
    )
    _, out2 = run(cfg, params, wild)
    n_und = cfg.instr_len + cfg.grid_side**2
    assert np.array_equal(out1.hidden.data[:, :n_und], out2.hidden.data[:, :n_und])
    d = out1.hidden.data[:, :n_und] - out2.hidden.data[:, :n_und]
    assert np.all(d == 0.0)


def test_gen_invariant_to_act_inputs(tiny_model):
    cfg, params = tiny_model
    batch = random_batch(cfg, b=1, seed=9)
    _, out1 = run(cfg, params, batch)
    wild = B.InputBatch(
        **{
            **batch.__dict__,
            "a_tau": batch.a_tau + 3.0,
            "proprio": batch.proprio - 2.0,
            "tau": 1.0 - batch.tau,
        }
    )
    _, out2 = run(cfg, params, wild)
    assert np.array_equal(out1.gen_logits.data, out2.gen_logits.data)


def test_non_finite_raises_with_layer_index(tiny_model):
    cfg, params = tiny_model
    params["layers.1.und.w_down"].data[:] = np.nan
    batch = random_batch(cfg, b=1)
    with pytest.raises(NumericError, match="layer 1"):
        run(cfg, params, batch)


def test_rotary_logits_depend_on_relative_position():
    cfg = tiny_config()
    params = randomized_params(cfg, seed=11).astype(np.float64)
    rng = np.random.default_rng(12)
    content = rng.normal(size=(1, 2, cfg.model_dim))
    prefix = "layers.0.und."

    def logit_at(p0, p1):
        cos, sin = B.rope_tables(cfg, np.array([p0, p1]), np.float64)
        x = Tensor(content)
        xn = T.rms_norm(x, params[prefix + "attn_norm"])
        q = (xn @ params[prefix + "wq"]).reshape(1, 2, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        k = (xn @ params[prefix + "wk"]).reshape(1, 2, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        q, k = T.rotary(q, cos, sin), T.rotary(k, cos, sin)
        s = (q @ k.transpose(0, 1, 3, 2)).data
        return s[0, :, 0, 1]

    a = logit_at(0, 3)
    b = logit_at(5, 8)
    assert np.allclose(a, b, atol=1e-6)
    c = logit_at(0, 4)
    assert not np.allclose(a, c, atol=1e-6)


# ---- backward / freezing ---------------------------------------------------


def _scalar_loss(cfg, params, batch):
    seq = B.embed_inputs(cfg, params, batch)
    out = B.forward(cfg, params, seq)
    loss = (out.hidden * out.hidden).sum() * (1.0 / out.hidden.data.size)
    if out.gen_logits is not None:
        loss = loss + T.softmax_cross_entropy(out.gen_logits, np.zeros(out.gen_logits.shape[:2], dtype=np.int64)).mean()
    if out.act_field is not None:
        loss = loss + (out.act_field * out.act_field).sum()
    return loss


def test_fd_gradients_small_model():
    cfg = tiny_config()
    params = randomized_params(cfg, seed=21).astype(np.float64)
    batch = random_batch(cfg, b=2, seed=22)
    _scalar_loss(cfg, params, batch).backward()
    rng = np.random.default_rng(23)
    eps = 1e-5
    checked = 0
    for name in ["und.vision_w", "gen.tok_embed", "act.head_w", "layers.0.gen.wq", "layers.1.act.w_down", "layers.0.und.attn_norm", "gen.tconv_w", "act.tau_w"]:
        t = params[name]
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = float(_scalar_loss(cfg, params, batch).data)
            flat[idx] = keep - eps
            lo = float(_scalar_loss(cfg, params, batch).data)
            flat[idx] = keep
            num = (hi - lo) / (2 * eps)
            ana = t.grad.reshape(-1)[idx]
            denom = max(abs(num), abs(ana), 1e-8)
            assert abs(num - ana) / denom < 1e-4, (name, idx, num, ana)
            checked += 1
    assert checked >= 24


def test_freezing_blocks_gradients(tiny_model):
    cfg, params = tiny_model
    params.freeze({"und"})
    batch = random_batch(cfg, b=1, seed=31)
    seq = B.embed_inputs(cfg, params, batch)
    out = B.forward(cfg, params, seq)
    T.softmax_cross_entropy(out.gen_logits, np.zeros(out.gen_logits.shape[:2], dtype=np.int64)).mean().backward()
    assert params["und.vision_w"].grad is None
    assert params["layers.0.und.wq"].grad is None
    assert params["gen.head_w"].grad is not None
    assert np.abs(params["gen.head_w"].grad).sum() > 0
    with pytest.raises(ConfigError):
        params.grad_of("und.vision_w")
    params.freeze(set())
    assert params["und.vision_w"].requires_grad


def test_expert_parameter_sets_disjoint(tiny_model):
    cfg, params = tiny_model
    owners = {n: B.owner_of(n) for n in params.names()}
    assert set(owners.values()) == {"und", "gen", "act"}
    before = {n: params[n].data.copy() for n in params.names()}
    for n, o in owners.items():
        if o == "gen":
            params[n].data += 1.0
    for n, o in owners.items():
        if o != "gen":
            assert np.array_equal(params[n].data, before[n])


def test_no_gen_config_has_no_gen_params():
    cfg = tiny_config(use_gen=False)
    params = B.ExpertParams.init(cfg, 1)
    assert not any(B.owner_of(n) == "gen" for n in params.names())
    batch = random_batch(cfg, b=2, with_gen=False)
    seq = B.embed_inputs(cfg, params, batch)
    out = B.forward(cfg, params, seq)
    assert out.gen_logits is None
    assert out.act_field.shape == (2, cfg.chunk, cfg.action_dim)


# ---- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_exact(tiny_model, tmp_path):
    cfg, params = tiny_model
    moments = {
        "m": {n: np.full_like(params[n].data, 0.25) for n in params.names()},
        "v": {n: np.full_like(params[n].data, 0.5) for n in params.names()},
    }
    path = str(tmp_path / "ckpt")
    B.save_checkpoint(path, params, stage=2, step=123, extra={"seed": 9}, moments=moments)
    p2, cfg2, stage, step, extra, mo2 = B.load_checkpoint(path)
    assert stage == 2 and step == 123 and extra["seed"] == 9
    assert cfg2 == cfg
    for n in params.names():
        assert np.array_equal(p2[n].data, params[n].data)
        assert np.array_equal(mo2["m"][n], moments["m"][n])
    assert p2.n_params == params.n_params


def test_checkpoint_deterministic_bytes(tiny_model, tmp_path):
    cfg, params = tiny_model
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    B.save_checkpoint(a, params, 1, 5)
    B.save_checkpoint(b, params, 1, 5)
    assert open(a + ".bin", "rb").read() == open(b + ".bin", "rb").read()
    assert open(a + ".json", "rb").read() == open(b + ".json", "rb").read()
