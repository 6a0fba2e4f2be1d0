"""Generation-expert logic: temporal history aggregation, teacher-forced
and autoregressive next-scale losses, and foresight rollout.

Training samples are (trajectory, t) pairs. The history window is the
m+1 frames ending at t (padded by repeating the oldest frame), the
generation target is the token pyramid of frame t+1, and conditioning
for scale j is the scale j-1 tokens upsampled - ground truth under
teacher forcing, the model's own greedy decode otherwise. Gradients
never flow through the discrete conditioning choices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fastpath as F
from . import tensor as T
from .backbone import ExpertParams, InputBatch, ModelConfig, embed_inputs, forward
from .errors import ConfigError, DataError
from .rvq import Codebook, TokenPyramid, decode_tokens, encode
from .world import Dataset


# ---- tokenized dataset -----------------------------------------------------


@dataclass
class TokenizedTraj:
    observations: np.ndarray  # (T+1, H, W, 3) float32
    tokens: np.ndarray  # (T+1, N) int32 flattened pyramids
    actions: np.ndarray  # (T, action_dim) float32
    proprio: np.ndarray  # (T+1, 2) float32
    instruction: np.ndarray  # (instr_len,) int64
    success: bool


@dataclass
class TokenizedDataset:
    trajs: list
    scales: tuple
    n_tokens: int

    def sample_index(self):
        """All (traj, t) pairs with a successor frame."""
        pairs = []
        for i, tr in enumerate(self.trajs):
            for t in range(len(tr.actions)):
                pairs.append((i, t))
        return pairs


def tokenize_dataset(ds: Dataset, codebook: Codebook, include_failed: bool = False) -> TokenizedDataset:
    trajs = []
    for tr in ds.trajectories:
        if not tr.success and not include_failed:
            continue
        pyrs = encode(tr.observations, codebook)
        tokens = np.stack([p.flatten() for p in pyrs]).astype(np.int32)
        trajs.append(
            TokenizedTraj(
                observations=tr.observations,
                tokens=tokens,
                actions=tr.actions.astype(np.float32),
                proprio=tr.proprio.astype(np.float32),
                instruction=np.asarray(tr.instruction, dtype=np.int64),
                success=tr.success,
            )
        )
    if not trajs:
        raise DataError("no usable trajectories after filtering")
    n = int(sum(r * r for r in codebook.scales))
    return TokenizedDataset(trajs=trajs, scales=tuple(codebook.scales), n_tokens=n)


def scale_blocks(scales) -> list:
    out, at = [], 0
    for r in scales:
        out.append((r, at, at + r * r))
        at += r * r
    return out


def history_indices(t: int, m: int) -> list:
    """Frames t-m..t, clipped at 0 (episode start repeats the oldest)."""
    return [max(0, t - j) for j in range(m, -1, -1)]


# ---- temporal aggregation --------------------------------------------------


def stack_history_features(codebook: Codebook, hist_tokens: np.ndarray) -> np.ndarray:
    """(B, m+1, N) token window -> (B, N, (m+1)*d) stacked code embeddings.

    Time is ordered oldest to newest along the concatenation axis; the
    temporal convolution is then one matmul with kernel length m+1 and
    stride m+1 (a single output per spatial position).
    """
    b, w, n = hist_tokens.shape
    emb = codebook.vectors[hist_tokens]  # (B, m+1, N, d)
    return emb.transpose(0, 2, 1, 3).reshape(b, n, w * emb.shape[-1])


def temporal_aggregate(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, hist_tokens: np.ndarray) -> np.ndarray:
    """Aggregated GEN input tokens for a history window, (B, N, model_dim)."""
    b, w, n = hist_tokens.shape
    if w != cfg.m + 1:
        raise DataError(f"history window {w} != m+1 = {cfg.m + 1}")
    feats = stack_history_features(codebook, hist_tokens)
    p = params.np_view()
    return feats.astype(p["gen.tconv_w"].dtype) @ p["gen.tconv_w"] + p["gen.tconv_b"]


# ---- batch assembly --------------------------------------------------------


@dataclass
class GenBatch:
    """Arrays for one joint pass plus the generation targets."""

    instr: np.ndarray
    image: np.ndarray
    hist_tokens: np.ndarray  # (B, m+1, N)
    hist_feats: np.ndarray  # (B, N, (m+1)*d)
    target_flat: np.ndarray  # (B, N) ground-truth pyramid of frame t+1
    proprio: np.ndarray
    action_chunk: np.ndarray  # (B, K, action_dim) expert actions from t


def assemble_batch(cfg: ModelConfig, codebook: Codebook, data: TokenizedDataset, pairs) -> GenBatch:
    b = len(pairs)
    n = data.n_tokens
    instr = np.zeros((b, cfg.instr_len), dtype=np.int64)
    image = np.zeros((b, cfg.image_size, cfg.image_size, 3), dtype=np.float32)
    hist = np.zeros((b, cfg.m + 1, n), dtype=np.int32)
    target = np.zeros((b, n), dtype=np.int32)
    proprio = np.zeros((b, 2), dtype=np.float32)
    chunk = np.zeros((b, cfg.chunk, cfg.action_dim), dtype=np.float32)
    for row, (i, t) in enumerate(pairs):
        tr = data.trajs[i]
        instr[row] = tr.instruction
        image[row] = tr.observations[t]
        hist[row] = tr.tokens[history_indices(t, cfg.m)]
        target[row] = tr.tokens[t + 1]
        proprio[row] = tr.proprio[t]
        avail = min(cfg.chunk, len(tr.actions) - t)
        chunk[row, :avail] = tr.actions[t : t + avail]
        # beyond the episode end the expert holds still; zeros are the pad
    return GenBatch(
        instr=instr,
        image=image,
        hist_tokens=hist,
        hist_feats=stack_history_features(codebook, hist).astype(np.float32),
        target_flat=target,
        proprio=proprio,
        action_chunk=chunk,
    )


def conditioning_from_flat(cfg: ModelConfig, flat: np.ndarray, sides=None) -> np.ndarray:
    """Shifted conditioning ids: -1 on the first scale, else the previous
    scale's grid nearest-upsampled."""
    sides = tuple(sides or cfg.scales)
    b = flat.shape[0]
    out = np.full((b, int(sum(r * r for r in sides))), -1, dtype=np.int64)
    blocks = scale_blocks(sides)
    for j in range(1, len(blocks)):
        r_prev, s_prev, e_prev = blocks[j - 1]
        r, s, e = blocks[j]
        prev_grid = flat[:, s_prev:e_prev].reshape(b, r_prev, r_prev)
        out[:, s:e] = F.resample_grid(prev_grid, r).reshape(b, -1)
    return out


# ---- losses ----------------------------------------------------------------


def _gen_nll(cfg: ModelConfig, params: ExpertParams, batch: GenBatch, cond_ids: np.ndarray, with_act: bool = False, a_tau=None, tau=None):
    kw = {}
    if with_act:
        kw = dict(proprio=batch.proprio, a_tau=a_tau, tau=tau)
    seq = embed_inputs(
        cfg,
        params,
        InputBatch(
            instr=batch.instr,
            image=batch.image,
            hist_feats=batch.hist_feats,
            cond_ids=cond_ids,
            **kw,
        ),
    )
    out = forward(cfg, params, seq)
    nll = T.softmax_cross_entropy(out.gen_logits, batch.target_flat)
    return nll.sum(axis=1).mean(), out


def teacher_forced_loss(cfg: ModelConfig, params: ExpertParams, batch: GenBatch):
    """Mean over the batch of summed-token NLL, ground-truth conditioning."""
    if batch.target_flat.shape[1] != cfg.n_gen_tokens:
        raise DataError("target pyramid does not match configured scales")
    cond = conditioning_from_flat(cfg, batch.target_flat)
    loss, _ = _gen_nll(cfg, params, batch, cond)
    return loss


def greedy_conditioning(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, batch: GenBatch) -> np.ndarray:
    """Model's own scale-by-scale greedy predictions as flat tokens.

    Runs on the cached no-grad path; the result is a plain integer array,
    so no gradient can flow into the discrete choices.
    """
    p = params.np_view()
    cache = F.prefill_context(cfg, p, batch.instr, batch.image)
    hist_grids = history_grids_by_side(cfg, codebook, batch.hist_tokens, cfg.scales)
    grids, _ = F.generate_scales(cfg, p, cache, hist_grids, cfg.scales)
    return np.concatenate([g.reshape(g.shape[0], -1) for g in grids], axis=1).astype(np.int32)


def autoregressive_loss(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, batch: GenBatch, mix_mask: np.ndarray = None):
    """Scored against ground truth, conditioned on own greedy predictions.

    mix_mask (B,) True selects teacher-forced conditioning per sample, the
    stage-II coin; None means fully autoregressive.
    """
    if batch.target_flat.shape[1] != cfg.n_gen_tokens:
        raise DataError("target pyramid does not match configured scales")
    pred_flat = greedy_conditioning(cfg, params, codebook, batch)
    source = pred_flat
    if mix_mask is not None:
        source = np.where(mix_mask[:, None], batch.target_flat, pred_flat)
    cond = conditioning_from_flat(cfg, source)
    loss, _ = _gen_nll(cfg, params, batch, cond)
    return loss


# ---- rollout ---------------------------------------------------------------


@dataclass
class ForesightResult:
    grids: list  # per scale (B, r, r) int32
    flat: np.ndarray  # (B, N_sides)
    logits: list  # per scale (B, r*r, V)
    decoded: np.ndarray  # (B, H, W, 3)
    sides: tuple
    per_scale_acc: dict | None = None

    def pyramid(self, item: int) -> TokenPyramid:
        return TokenPyramid(self.sides, tuple(g[item] for g in self.grids))


def history_grids_by_side(cfg: ModelConfig, codebook: Codebook, hist_tokens: np.ndarray, sides) -> dict:
    """Temporal feature stacks per requested side.

    Sides present in the trained scale list slice directly from the flat
    pyramid; other sides nearest-resample the closest trained grid (the
    largest trained side not exceeding the request, else the smallest).
    """
    b, w, _ = hist_tokens.shape
    blocks = {r: (s, e) for r, s, e in scale_blocks(cfg.scales)}
    out = {}
    for side in sides:
        if side in blocks:
            s, e = blocks[side]
            grid = hist_tokens[:, :, s:e].reshape(b * w, side, side)
        else:
            under = [r for r in cfg.scales if r <= side]
            src = max(under) if under else min(cfg.scales)
            s, e = blocks[src]
            grid = F.resample_grid(hist_tokens[:, :, s:e].reshape(b * w, src, src), side)
        emb = codebook.vectors[grid]  # (B*w, side, side, d)
        d = emb.shape[-1]
        emb = emb.reshape(b, w, side, side, d).transpose(0, 2, 3, 1, 4)
        out[side] = emb.reshape(b, side, side, w * d).astype(np.float32)
    return out


def generate_foresight(
    cfg: ModelConfig,
    params: ExpertParams,
    codebook: Codebook,
    instr: np.ndarray,
    image: np.ndarray,
    hist_tokens: np.ndarray,
    sides=None,
    temperature: float = 0.0,
    rng: np.random.Generator = None,
    target_flat: np.ndarray = None,
    cache_out: list = None,
) -> ForesightResult:
    """Scale-by-scale greedy decode plus image reconstruction.

    With temperature > 0 a seeded rng must be supplied. target_flat (at
    trained scales) enables per-scale token accuracy. cache_out, if given,
    receives the filled KV cache so an action pass can reuse it.
    """
    sides = tuple(sides or cfg.scales)
    if len(sides) > len(set(sides)):
        raise ConfigError("duplicate sides")
    if temperature > 0.0 and rng is None:
        raise ConfigError("temperature sampling needs an explicit rng")
    p = params.np_view()
    cache = F.prefill_context(cfg, p, instr, image)
    hist_grids = history_grids_by_side(cfg, codebook, hist_tokens, sides)
    grids, logits = F.generate_scales(cfg, p, cache, hist_grids, sides, temperature=temperature, rng=rng)
    if cache_out is not None:
        cache_out.append(cache)
    flat = np.concatenate([g.reshape(g.shape[0], -1) for g in grids], axis=1).astype(np.int32)
    decoded = decode_tokens(grids, codebook, out_side=cfg.grid_side)
    acc = None
    if target_flat is not None:
        acc = {}
        tblocks = {r: (s, e) for r, s, e in scale_blocks(cfg.scales)}
        for side, grid in zip(sides, grids):
            if side in tblocks:
                s, e = tblocks[side]
                want = target_flat[:, s:e].reshape(grid.shape)
                acc[side] = float((grid == want).mean())
    return ForesightResult(grids=grids, flat=flat, logits=logits, decoded=decoded, sides=sides, per_scale_acc=acc)
