"""Gradient-free incremental forward with exact KV caching.

The progressive mask admits no attention from earlier segments to later
ones, so hidden states of a prefix never change as blocks are appended.
That makes blockwise decoding exact: prefill understanding tokens once,
extend one generation scale at a time, then run (and re-run) the action
block against the cached prefix during flow integration.

Everything here is raw numpy over the same parameter arrays the taped
path uses; a test pins the two paths together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import PRECOND_DELTA, ModelConfig, image_patches, rope_tables
from .errors import NumericError


@dataclass
class Cache:
    """Per-layer accumulated keys/values for the immutable prefix."""

    k: list = field(default_factory=list)  # per layer (B, H, L, dh)
    v: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.k[0].shape[2] if self.k else 0


def _rms(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / r * gain


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def extend(cfg: ModelConfig, p: dict, cache: Cache, x: np.ndarray, positions: np.ndarray, expert: str, causal: bool = False, persist: bool = True) -> np.ndarray:
    """Run a new block of tokens through all layers against the cache.

    The block attends to every cached token plus itself (bidirectionally,
    or lower-triangularly when causal). With persist=False the cache is
    left untouched, which is what repeated flow-integration passes need.
    """
    b, n, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    cos, sin = rope_tables(cfg, positions, x.dtype)
    inv_sqrt = 1.0 / np.sqrt(dh)
    tri = None
    if causal and n > 1:
        tri = np.tril(np.ones((n, n), dtype=bool))
    fresh = len(cache.k) == 0
    for i in range(cfg.layers):
        pre = f"layers.{i}.{expert}."
        xn = _rms(x, p[pre + "attn_norm"])
        q = (xn @ p[pre + "wq"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        k = (xn @ p[pre + "wk"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        v = (xn @ p[pre + "wv"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        if fresh:
            k_all, v_all = k, v
        else:
            k_all = np.concatenate([cache.k[i], k], axis=2)
            v_all = np.concatenate([cache.v[i], v], axis=2)
        scores = (q * inv_sqrt) @ k_all.swapaxes(-1, -2)
        if tri is not None:
            prefix_len = k_all.shape[2] - n
            block = scores[..., prefix_len:]
            scores[..., prefix_len:] = np.where(tri, block, -np.inf)
        probs = _softmax(scores)
        ctx = (probs @ v_all).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + ctx @ p[pre + "wo"]
        xn2 = _rms(x, p[pre + "ffn_norm"])
        gate = xn2 @ p[pre + "w_gate"]
        gate = gate / (1.0 + np.exp(-gate)) * (xn2 @ p[pre + "w_up"])
        x = x + gate @ p[pre + "w_down"]
        if persist:
            if fresh:
                cache.k.append(k)
                cache.v.append(v)
            else:
                cache.k[i] = k_all
                cache.v[i] = v_all
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activations in inference path")
    return x


# ---- embedders (numpy twins of backbone.embed_inputs pieces) ---------------


def embed_und(cfg: ModelConfig, p: dict, instr: np.ndarray, image: np.ndarray) -> tuple:
    d = cfg.model_dim
    g2 = cfg.grid_side**2
    text = p["und.instr_embed"][instr]
    vis = image_patches(image.astype(p["und.vision_b"].dtype), cfg.patch) @ p["und.vision_w"] + p["und.vision_b"] + p["und.vision_pos"].reshape(1, g2, d)
    x = np.concatenate([text, vis], axis=1)
    positions = np.concatenate([np.arange(cfg.instr_len), np.arange(g2)])
    return x, positions


def embed_gen_block(cfg: ModelConfig, p: dict, hist_block: np.ndarray, cond_block: np.ndarray, side: int) -> np.ndarray:
    hist_x = hist_block @ p["gen.tconv_w"] + p["gen.tconv_b"]
    cond_x = np.where(
        (cond_block < 0)[..., None],
        p["gen.start"][None, None, :],
        p["gen.tok_embed"][np.maximum(cond_block, 0)],
    )
    return hist_x + cond_x + p["gen.scale_embed"][side - 1][None, None, :]


def embed_act(cfg: ModelConfig, p: dict, proprio: np.ndarray, a_tau: np.ndarray, tau) -> np.ndarray:
    dtype = p["act.proprio_b"].dtype
    prop_x = proprio.astype(dtype)[:, None, :] @ p["act.proprio_w"] + p["act.proprio_b"]
    act_x = a_tau.astype(dtype) @ p["act.action_w"] + p["act.action_b"]
    tau_arr = np.asarray(tau, dtype=np.float64).reshape(-1, 1, 1)
    gain = 1.0 / (1.0 - tau_arr + PRECOND_DELTA)
    pre = (a_tau * gain).astype(dtype)
    act_x = act_x + pre @ p["act.denoise_w"]
    tau_feats = np.concatenate([tau_arr, gain], axis=2).astype(dtype)
    tau_x = tau_feats @ p["act.tau_w"] + p["act.tau_b"]
    return np.concatenate([prop_x, act_x], axis=1) + tau_x


# ---- scale-by-scale generation ---------------------------------------------


def resample_grid(grid: np.ndarray, side: int) -> np.ndarray:
    """Nearest-resample (B, r, r) token grids to (B, side, side)."""
    r = grid.shape[1]
    idx = (np.arange(side) * r) // side
    return grid[:, idx][:, :, idx]


def prefill_context(cfg: ModelConfig, p: dict, instr: np.ndarray, image: np.ndarray) -> Cache:
    cache = Cache()
    x, positions = embed_und(cfg, p, instr, image)
    extend(cfg, p, cache, x, positions, "und")
    return cache


def generate_scales(cfg: ModelConfig, p: dict, cache: Cache, hist_grids: dict, sides, temperature: float = 0.0, rng: np.random.Generator = None) -> tuple:
    """Greedy (or tempered) next-scale decoding against a prefilled cache.

    hist_grids maps side -> (B, side, side, (m+1)*code_dim) temporal
    feature stacks. Returns (token grids per side, per-scale logits).
    """
    b = cache.k[0].shape[0]
    grids, logits_all = [], []
    prev = None
    for side in sides:
        n = side * side
        if prev is None:
            cond = np.full((b, n), -1, dtype=np.int64)
        else:
            cond = resample_grid(prev, side).reshape(b, n)
        hist_block = hist_grids[side].reshape(b, n, -1)
        x = embed_gen_block(cfg, p, hist_block, cond, side)
        hid = extend(cfg, p, cache, x, np.arange(n), "gen", causal=cfg.gen_token_causal)
        logits = hid @ p["gen.head_w"] + p["gen.head_b"]
        if temperature > 0.0:
            z = logits / temperature
            z -= z.max(axis=-1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(axis=-1, keepdims=True)
            flat = prob.reshape(-1, cfg.v)
            u = rng.random((flat.shape[0], 1))
            ids = (flat.cumsum(axis=-1) > u).argmax(axis=-1)
        else:
            ids = logits.argmax(axis=-1)
        grid = ids.reshape(b, side, side).astype(np.int32)
        grids.append(grid)
        logits_all.append(logits)
        prev = grid
    return grids, logits_all


def act_field(cfg: ModelConfig, p: dict, cache: Cache, proprio: np.ndarray, a_tau: np.ndarray, tau) -> np.ndarray:
    """Vector field for the current noisy chunk; cache stays untouched."""
    x = embed_act(cfg, p, proprio, a_tau, tau)
    hid = extend(cfg, p, cache, x, np.arange(cfg.chunk + 1), "act", persist=False)
    return hid[:, 1:] @ p["act.head_w"] + p["act.head_b"]
