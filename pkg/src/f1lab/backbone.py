"""Mixture-of-transformer trunk.

Three expert parameter sets (understanding / generation / action) share
one joint masked-attention computation per layer: every token is
projected with its own expert's weights, then a single softmax runs over
all unmasked keys. Input embedders, checkpoint IO, and the parameter
registry live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .layout import ACT, GEN, UND, AttentionMask, Segment, SegmentLayout, build_uga_mask
from .serialization import read_blob_file, write_blob_file
from .tensor import Tensor

CKPT_VERSION = "f1lab-ck-1"
EXPERTS = ("und", "gen", "act")

# floor on the 1/(1-tau) input gain; keeps the preconditioned feature finite
PRECOND_DELTA = 0.05


@dataclass
class ModelConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    v: int = 64
    scales: tuple = (1, 2, 4, 8)
    m: int = 3
    action_dim: int = 2
    chunk: int = 4
    denoise_steps: int = 10
    w_gen: float = 0.1
    w_act: float = 1.0
    instr_vocab: int = 32
    instr_len: int = 3
    image_size: int = 32
    patch: int = 4
    code_dim: int = 16
    ffn_mult: int = 2
    rope_base: float = 10000.0
    gen_token_causal: bool = False
    use_gen: bool = True  # False drops the generation expert entirely (No-Gen)

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if self.model_dim != self.heads * self.head_dim:
            raise ConfigError("model_dim must equal heads * head_dim")
        if self.w_gen < 0 or self.w_act < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.chunk < 1 or self.denoise_steps < 1:
            raise ConfigError("chunk and denoise_steps must be >= 1")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")
        for r in self.scales:
            if self.grid_side % r:
                raise ConfigError(f"scale {r} does not divide feature grid {self.grid_side}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def n_gen_tokens(self) -> int:
        return int(sum(r * r for r in self.scales))

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.model_dim


def _param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes = {
        "und.instr_embed": (cfg.instr_vocab, d),
        "und.vision_w": (cfg.patch_dim, d),
        "und.vision_b": (d,),
        "und.vision_pos": (cfg.grid_side * cfg.grid_side, d),
        "act.proprio_w": (2, d),
        "act.proprio_b": (d,),
        "act.action_w": (cfg.action_dim, d),
        "act.action_b": (d,),
        "act.denoise_w": (cfg.action_dim, d),
        "act.tau_w": (2, d),
        "act.tau_b": (d,),
        "act.head_w": (d, cfg.action_dim),
        "act.head_b": (cfg.action_dim,),
    }
    if cfg.use_gen:
        shapes.update(
            {
                "gen.start": (d,),
                "gen.tok_embed": (cfg.v, d),
                "gen.scale_embed": (cfg.grid_side, d),
                "gen.tconv_w": ((cfg.m + 1) * cfg.code_dim, d),
                "gen.tconv_b": (d,),
                "gen.head_w": (d, cfg.v),
                "gen.head_b": (cfg.v,),
            }
        )
    experts = [e for e in EXPERTS if cfg.use_gen or e != "gen"]
    for i in range(cfg.layers):
        for e in experts:
            p = f"layers.{i}.{e}."
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "wq"] = (d, d)
            shapes[p + "wk"] = (d, d)
            shapes[p + "wv"] = (d, d)
            shapes[p + "wo"] = (d, d)
            shapes[p + "ffn_norm"] = (d,)
            shapes[p + "w_gate"] = (d, f)
            shapes[p + "w_up"] = (d, f)
            shapes[p + "w_down"] = (f, d)
    return shapes


def owner_of(name: str) -> str:
    parts = name.split(".")
    tag = parts[2] if parts[0] == "layers" else parts[0]
    if tag not in EXPERTS:
        raise ConfigError(f"parameter {name!r} has no expert owner")
    return tag


class ExpertParams:
    """Flat name -> Tensor registry with expert ownership and freezing."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors
        self.frozen: set = set()

    @staticmethod
    def init(cfg: ModelConfig, seed: int) -> "ExpertParams":
        rng = np.random.default_rng((seed, 0xBEEF))
        tensors = {}
        for name, shape in _param_shapes(cfg).items():
            if name.endswith("_norm"):
                data = np.ones(shape, dtype=np.float32)
            elif name.endswith("_b") or name.endswith(".start") or name.endswith("head_b"):
                data = np.zeros(shape, dtype=np.float32)
                if name.endswith(".start"):
                    data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
            elif name == "act.head_w":
                data = np.zeros(shape, dtype=np.float32)  # flow field starts at zero
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
        return ExpertParams(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    @property
    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def freeze(self, experts) -> None:
        """Freeze whole experts; their tensors stop requiring gradients."""
        self.frozen = set(experts)
        for name, t in self.tensors.items():
            t.requires_grad = owner_of(name) not in self.frozen
            if not t.requires_grad:
                t.grad = None

    def grad_of(self, name: str) -> np.ndarray:
        if owner_of(name) in self.frozen:
            raise ConfigError(f"{name} belongs to frozen expert {owner_of(name)!r}")
        return self.tensors[name].grad

    def trainable_names(self):
        return [n for n in self.tensors if owner_of(n) not in self.frozen]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ExpertParams":
        out = ExpertParams(self.cfg, {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.tensors.items()})
        out.frozen = set(self.frozen)
        return out

    def np_view(self) -> dict:
        return {n: t.data for n, t in self.tensors.items()}


# ---- input embedding -------------------------------------------------------


@dataclass
class InputBatch:
    """Numeric inputs for one joint forward pass.

    hist_feats carries the temporal stack of codebook embeddings per GEN
    position, shape (B, N, (m+1)*code_dim); cond_ids holds the shifted
    conditioning token per GEN position with -1 meaning the learned start
    embedding. The ACT group (proprio, a_tau, tau) is optional, as is the
    whole GEN group.
    """

    instr: np.ndarray
    image: np.ndarray
    hist_feats: np.ndarray | None = None
    cond_ids: np.ndarray | None = None
    gen_sides: tuple | None = None
    proprio: np.ndarray | None = None
    a_tau: np.ndarray | None = None
    tau: np.ndarray | None = None


@dataclass
class JointSequence:
    layout: SegmentLayout
    x: Tensor  # (B, L, model_dim)
    positions: np.ndarray  # (L,) segment-local rotary positions
    n_und: int
    n_gen: int
    n_act: int


def image_patches(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, c = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


def gen_position_metadata(cfg: ModelConfig, sides) -> tuple:
    """Per GEN token: side length and scale block id."""
    side_idx = np.concatenate([np.full(r * r, r - 1) for r in sides])
    scale_ids = np.concatenate([np.full(r * r, i) for i, r in enumerate(sides)])
    return side_idx.astype(np.int64), scale_ids.astype(np.int64)


def embed_inputs(cfg: ModelConfig, params: ExpertParams, batch: InputBatch) -> JointSequence:
    dtype = params["und.vision_b"].dtype
    b = batch.instr.shape[0]
    if batch.instr.shape != (b, cfg.instr_len):
        raise ConfigError(f"instruction shape {batch.instr.shape} != (B, {cfg.instr_len})")
    if batch.image.shape != (b, cfg.image_size, cfg.image_size, 3):
        raise ConfigError(f"image shape {batch.image.shape} unexpected")

    segments = [Segment(UND, cfg.instr_len), Segment(UND, cfg.grid_side**2)]
    parts = []

    instr_x = T.embedding(params["und.instr_embed"], batch.instr)
    patches = Tensor(image_patches(batch.image, cfg.patch).astype(dtype))
    vision_x = patches @ params["und.vision_w"] + params["und.vision_b"] + params["und.vision_pos"].reshape(1, cfg.grid_side**2, cfg.model_dim)
    parts += [instr_x, vision_x]

    if batch.hist_feats is not None:
        if not cfg.use_gen:
            raise ConfigError("GEN inputs supplied to a no-gen model")
        sides = tuple(batch.gen_sides or cfg.scales)
        n = int(sum(r * r for r in sides))
        if batch.hist_feats.shape != (b, n, (cfg.m + 1) * cfg.code_dim):
            raise ConfigError(f"hist_feats shape {batch.hist_feats.shape} unexpected")
        if batch.cond_ids.shape != (b, n):
            raise ConfigError(f"cond_ids shape {batch.cond_ids.shape} unexpected")
        side_idx, scale_ids = gen_position_metadata(cfg, sides)
        hist_x = Tensor(batch.hist_feats.astype(dtype)) @ params["gen.tconv_w"] + params["gen.tconv_b"]
        safe_ids = np.maximum(batch.cond_ids, 0)
        cond_x = T.embedding(params["gen.tok_embed"], safe_ids)
        start_mask = Tensor((batch.cond_ids < 0).astype(dtype)[..., None])
        start_x = params["gen.start"].reshape(1, 1, cfg.model_dim)
        cond_x = cond_x * (1.0 - start_mask) + start_x * start_mask
        scale_x = T.embedding(params["gen.scale_embed"], side_idx).reshape(1, n, cfg.model_dim)
        parts.append(hist_x + cond_x + scale_x)
        for i, r in enumerate(sides):
            segments.append(Segment(GEN, r * r, i))

    if batch.proprio is not None:
        k = cfg.chunk
        if batch.a_tau.shape != (b, k, cfg.action_dim):
            raise ConfigError(f"a_tau shape {batch.a_tau.shape} != (B, {k}, {cfg.action_dim})")
        prop_x = Tensor(batch.proprio.astype(dtype)[:, None, :]) @ params["act.proprio_w"] + params["act.proprio_b"]
        act_x = Tensor(batch.a_tau.astype(dtype)) @ params["act.action_w"] + params["act.action_b"]
        # gain-corrected copy of the noisy chunk: the ideal field's dominant
        # -a_tau/(1-tau) term becomes an O(1)-weight read instead of a
        # tau-modulated product the FFN would have to synthesize
        tau_arr = np.asarray(batch.tau, dtype=np.float64).reshape(b, 1, 1)
        gain = 1.0 / (1.0 - tau_arr + PRECOND_DELTA)
        pre = (batch.a_tau * gain).astype(dtype)
        act_x = act_x + Tensor(pre) @ params["act.denoise_w"]
        tau_in = Tensor(np.concatenate([tau_arr, gain], axis=2).astype(dtype))
        tau_x = tau_in @ params["act.tau_w"] + params["act.tau_b"]
        act_block = T.concat([prop_x, act_x], axis=1) + tau_x
        parts.append(act_block)
        segments.append(Segment(ACT, k + 1))

    layout = SegmentLayout(tuple(segments))
    x = T.concat(parts, axis=1)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite input embeddings")
    n_gen = 0 if batch.hist_feats is None else int(sum(r * r for r in (batch.gen_sides or cfg.scales)))
    n_act = 0 if batch.proprio is None else cfg.chunk + 1
    return JointSequence(
        layout=layout,
        x=x,
        positions=layout.token_positions(),
        n_und=cfg.instr_len + cfg.grid_side**2,
        n_gen=n_gen,
        n_act=n_act,
    )


# ---- forward ---------------------------------------------------------------


def rope_tables(cfg: ModelConfig, positions: np.ndarray, dtype) -> tuple:
    half = cfg.head_dim // 2
    inv = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


@dataclass
class ForwardResult:
    hidden: Tensor
    gen_logits: Tensor | None
    act_field: Tensor | None
    layout: SegmentLayout


def _expert_slices(seq: JointSequence):
    spans = []
    at = 0
    for tag, n in (("und", seq.n_und), ("gen", seq.n_gen), ("act", seq.n_act)):
        if n:
            spans.append((tag, at, at + n))
        at += n
    return spans


def forward(cfg: ModelConfig, params: ExpertParams, seq: JointSequence, mask: AttentionMask = None) -> ForwardResult:
    if mask is None:
        mask = build_uga_mask(seq.layout, gen_token_causal=cfg.gen_token_causal)
    b, L, d = seq.x.shape
    if mask.allow.shape != (L, L):
        raise ConfigError("mask does not match sequence length")
    h, dh = cfg.heads, cfg.head_dim
    cos, sin = rope_tables(cfg, seq.positions, seq.x.dtype)
    spans = _expert_slices(seq)
    inv_sqrt = 1.0 / np.sqrt(dh)

    def per_expert(x, stem: str, apply):
        outs = []
        for tag, s, e in spans:
            outs.append(apply(x[:, s:e], f"{stem}{tag}."))
        return T.concat(outs, axis=1) if len(outs) > 1 else outs[0]

    x = seq.x
    for i in range(cfg.layers):
        base = f"layers.{i}."

        def qkv_one(xs, prefix, which):
            xn = T.rms_norm(xs, params[prefix + "attn_norm"])
            return xn @ params[prefix + which]

        qs = per_expert(x, base, lambda xs, p: qkv_one(xs, p, "wq"))
        ks = per_expert(x, base, lambda xs, p: qkv_one(xs, p, "wk"))
        vs = per_expert(x, base, lambda xs, p: qkv_one(xs, p, "wv"))
        q = qs.reshape(b, L, h, dh).transpose(0, 2, 1, 3)
        k = ks.reshape(b, L, h, dh).transpose(0, 2, 1, 3)
        v = vs.reshape(b, L, h, dh).transpose(0, 2, 1, 3)
        q = T.rotary(q, cos, sin)
        k = T.rotary(k, cos, sin)
        scores = (q * inv_sqrt) @ k.transpose(0, 1, 3, 2)
        probs = T.masked_softmax(scores, mask.allow)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, L, d)
        attn_out = per_expert(ctx, base, lambda xs, p: xs @ params[p + "wo"])
        x = x + attn_out

        def ffn_one(xs, prefix):
            xn = T.rms_norm(xs, params[prefix + "ffn_norm"])
            gate = (xn @ params[prefix + "w_gate"]).swish()
            return (gate * (xn @ params[prefix + "w_up"])) @ params[prefix + "w_down"]

        x = x + per_expert(x, base, ffn_one)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after layer {i}")

    gen_logits = None
    act_field = None
    if seq.n_gen:
        gh = x[:, seq.n_und : seq.n_und + seq.n_gen]
        gen_logits = gh @ params["gen.head_w"] + params["gen.head_b"]
    if seq.n_act:
        ah = x[:, seq.n_und + seq.n_gen + 1 :]  # skip the proprio token
        act_field = ah @ params["act.head_w"] + params["act.head_b"]
    return ForwardResult(hidden=x, gen_logits=gen_logits, act_field=act_field, layout=seq.layout)


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str, params: ExpertParams, stage: int, step: int, extra: dict = None, moments: dict = None) -> None:
    manifest = {
        "version": CKPT_VERSION,
        "config": asdict(params.cfg),
        "stage": int(stage),
        "step": int(step),
        "extra": extra or {},
    }
    arrays = dict(params.np_view())
    for kind, table in (moments or {}).items():
        for name, arr in table.items():
            arrays[f"adam_{kind}.{name}"] = arr
    write_blob_file(path, manifest, arrays)


def load_checkpoint(path: str) -> tuple:
    manifest, arrays = read_blob_file(path, CKPT_VERSION)
    cfg_d = dict(manifest["config"])
    cfg_d["scales"] = tuple(cfg_d["scales"])
    cfg = ModelConfig(**cfg_d)
    tensors = {}
    moments: dict = {"m": {}, "v": {}}
    for name, arr in arrays.items():
        if name.startswith("adam_m."):
            moments["m"][name[len("adam_m.") :]] = arr
        elif name.startswith("adam_v."):
            moments["v"][name[len("adam_v.") :]] = arr
        else:
            tensors[name] = Tensor(arr, requires_grad=True)
    want = set(_param_shapes(cfg))
    if set(tensors) != want:
        raise DataError("checkpoint parameter table does not match its config")
    params = ExpertParams(cfg, tensors)
    if not moments["m"]:
        moments = None
    return params, cfg, int(manifest["stage"]), int(manifest["step"]), manifest.get("extra", {}), moments
