"""Multi-scale residual vector quantizer.

Images pass through a learned 4x4-patch linear embedder to an 8x8xd
feature map; each scale mean-pools the current residual to an r x r
grid, snaps every cell to its nearest code, upsamples that contribution
back, and hands the remainder to the next scale. A linear un-embedder
maps the accumulated contributions back to pixels.

Codebook training: k-means init on full-resolution feature cells, then
EMA code updates with straight-through gradients into the embedder,
minimizing pixel reconstruction MSE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .serialization import read_blob_file, write_blob_file

CODEBOOK_VERSION = "f1lab-cb-1"


@dataclass(frozen=True)
class TokenPyramid:
    scales: tuple  # grid side lengths, strictly increasing
    tokens: tuple  # per scale an (r, r) int32 array

    def __post_init__(self):
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError(f"scales must be strictly increasing, got {self.scales}")
        for r, t in zip(self.scales, self.tokens):
            if t.shape != (r, r):
                raise DataError(f"token grid {t.shape} does not match scale {r}")

    @property
    def n_tokens(self) -> int:
        return int(sum(r * r for r in self.scales))

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tokens])

    @staticmethod
    def from_flat(scales, flat) -> "TokenPyramid":
        flat = np.asarray(flat, dtype=np.int32)
        toks, at = [], 0
        for r in scales:
            toks.append(flat[at : at + r * r].reshape(r, r).copy())
            at += r * r
        if at != flat.size:
            raise DataError(f"flat length {flat.size} != sum of grid areas {at}")
        return TokenPyramid(tuple(scales), tuple(toks))

    def truncate(self, n_scales: int) -> "TokenPyramid":
        return TokenPyramid(self.scales[:n_scales], self.tokens[:n_scales])


@dataclass
class CodebookConfig:
    v: int = 64
    dim: int = 16
    patch: int = 4
    scales: tuple = (1, 2, 4, 8)
    steps: int = 400
    batch: int = 64
    lr: float = 3e-3
    ema_decay: float = 0.99
    dead_code_steps: int = 100
    kmeans_iters: int = 20

    def __post_init__(self):
        if self.v < 2:
            raise ConfigError("codebook needs at least 2 codes")
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError("scales must be strictly increasing")


@dataclass
class Codebook:
    vectors: np.ndarray  # (V, d) float32
    embed_w: np.ndarray  # (patch*patch*3, d)
    embed_b: np.ndarray  # (d,)
    unembed_w: np.ndarray  # (d, patch*patch*3)
    unembed_b: np.ndarray  # (patch*patch*3,)
    patch: int
    scales: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.vectors)):
            raise NumericError("codebook contains non-finite entries")
        if len(np.unique(self.vectors, axis=0)) != len(self.vectors):
            raise DataError("codebook contains duplicate code vectors")

    @property
    def v(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    # ---- feature map <-> pixels -------------------------------------------

    def to_patches(self, images: np.ndarray) -> np.ndarray:
        b, h, w, c = images.shape
        p = self.patch
        if h % p or w % p:
            raise ConfigError(f"image side {h}x{w} not divisible by patch {p}")
        g = h // p
        x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g, g, p * p * c)

    def from_patches(self, patches: np.ndarray) -> np.ndarray:
        b, g, _, f = patches.shape
        p = self.patch
        c = f // (p * p)
        x = patches.reshape(b, g, g, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * p, g * p, c)

    def embed(self, images: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(images)):
            raise NumericError("non-finite pixels")
        return self.to_patches(images.astype(np.float32)) @ self.embed_w + self.embed_b

    def unembed(self, features: np.ndarray) -> np.ndarray:
        return self.from_patches(features @ self.unembed_w + self.unembed_b)

    # ---- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        manifest = {
            "version": CODEBOOK_VERSION,
            "v": self.v,
            "d": self.dim,
            "patch": self.patch,
            "scales": list(self.scales),
        }
        arrays = {
            "vectors": self.vectors,
            "embed_w": self.embed_w,
            "embed_b": self.embed_b,
            "unembed_w": self.unembed_w,
            "unembed_b": self.unembed_b,
        }
        write_blob_file(path, manifest, arrays)

    @staticmethod
    def load(path: str) -> "Codebook":
        manifest, arrays = read_blob_file(path, CODEBOOK_VERSION)
        return Codebook(
            vectors=arrays["vectors"],
            embed_w=arrays["embed_w"],
            embed_b=arrays["embed_b"],
            unembed_w=arrays["unembed_w"],
            unembed_b=arrays["unembed_b"],
            patch=int(manifest["patch"]),
            scales=tuple(manifest["scales"]),
        )


# ---- scale resampling ------------------------------------------------------


def pool_mean(feat: np.ndarray, r: int) -> np.ndarray:
    """Mean-pool (B,S,S,d) to (B,r,r,d); requires r | S."""
    s = feat.shape[1]
    if s % r:
        raise ConfigError(f"scale {r} incompatible with grid side {s}")
    k = s // r
    b, _, _, d = feat.shape
    return feat.reshape(b, r, k, r, k, d).mean(axis=(2, 4))


def upsample_nearest(grid: np.ndarray, out_side: int) -> np.ndarray:
    """Nearest upsample (B,r,r,...) to (B,out,out,...); any side pair works."""
    r = grid.shape[1]
    idx = (np.arange(out_side) * r) // out_side
    return grid[:, idx][:, :, idx]


def nearest_code(vectors: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Index of the nearest code per point; ties break to the lowest index."""
    d2 = (points**2).sum(-1, keepdims=True) - 2.0 * points @ vectors.T + (vectors**2).sum(-1)
    return np.argmin(d2, axis=-1).astype(np.int32)


# ---- encode / decode -------------------------------------------------------


def quantize_features(feat: np.ndarray, vectors: np.ndarray, scales) -> tuple:
    """Residual pyramid over a feature map.

    Returns (token grids, recon, residual, pooled_per_scale). The residual
    is exactly feat - recon with recon accumulated low-to-high scale, which
    is the summation order the telescoping property is stated in.
    """
    s = feat.shape[1]
    tokens, pooled_all = [], []
    recon = np.zeros_like(feat)
    for r in scales:
        pooled = pool_mean(feat - recon, r)
        ids = nearest_code(vectors, pooled)
        tokens.append(ids)
        pooled_all.append(pooled)
        recon = recon + upsample_nearest(vectors[ids], s)
    return tokens, recon, feat - recon, pooled_all


def encode_features(feat: np.ndarray, codebook: Codebook, scales=None) -> list:
    scales = tuple(scales if scales is not None else codebook.scales)
    tokens, _, _, _ = quantize_features(feat, codebook.vectors, scales)
    return [TokenPyramid(scales, tuple(t[i] for t in tokens)) for i in range(feat.shape[0])]


def encode(images: np.ndarray, codebook: Codebook, scales=None) -> list:
    """Images (B,H,W,3) in [0,1] -> one TokenPyramid per image."""
    return encode_features(codebook.embed(images), codebook, scales)


def decode_tokens(token_grids, codebook: Codebook, out_side: int = None) -> np.ndarray:
    """Batched decode from a list of (B,r,r) grids to images."""
    s = out_side or max(g.shape[1] for g in token_grids)
    b = token_grids[0].shape[0]
    recon = np.zeros((b, s, s, codebook.dim), dtype=np.float32)
    for g in token_grids:  # low -> high accumulation order
        if g.min() < 0 or g.max() >= codebook.v:
            raise DataError("token index out of codebook range")
        recon = recon + upsample_nearest(codebook.vectors[g], s)
    return np.clip(codebook.unembed(recon), 0.0, 1.0)


def decode(pyramid: TokenPyramid, codebook: Codebook) -> np.ndarray:
    """Single pyramid -> (H,W,3) image in [0,1]."""
    grids = [t[None] for t in pyramid.tokens]
    side = max(pyramid.scales)
    # decode at the full feature grid the codebook was trained on when the
    # pyramid's own top scale is coarser
    full = codebook.scales[-1] if codebook.scales else side
    return decode_tokens(grids, codebook, out_side=max(side, full))[0]


# ---- training --------------------------------------------------------------


def _kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    uniq = np.unique(points, axis=0)
    if len(uniq) < k:
        warnings.warn(f"only {len(uniq)} distinct vectors for {k} codes; deduping with jitter")
        reps = uniq[np.arange(k) % len(uniq)]
        jitter = rng.normal(0.0, 1e-3, size=reps.shape).astype(points.dtype)
        jitter[: len(uniq)] = 0.0  # keep the real vectors exact
        return reps + jitter
    centers = points[rng.choice(len(points), size=k, replace=False)]
    for _ in range(iters):
        ids = nearest_code(centers, points)
        for j in range(k):
            sel = points[ids == j]
            if len(sel):
                centers[j] = sel.mean(axis=0)
            else:
                centers[j] = points[rng.integers(0, len(points))]
    return centers


def _dedup_jitter(vectors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for _ in range(100):
        _, first = np.unique(vectors, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(len(vectors)), first)
        if not len(dup):
            return vectors
        vectors[dup] += rng.normal(0.0, 1e-4, size=(len(dup), vectors.shape[1])).astype(vectors.dtype)
    raise NumericError("could not separate duplicate codes")


def frames_of(dataset) -> np.ndarray:
    """Stack every observation frame of a dataset into (N,H,W,3)."""
    if isinstance(dataset, np.ndarray):
        return dataset
    return np.concatenate([t.observations for t in dataset.trajectories], axis=0)


def train_codebook(dataset, cfg: CodebookConfig, seed: int) -> Codebook:
    frames = frames_of(dataset).astype(np.float32)
    if not len(frames):
        raise DataError("empty dataset")
    rng = np.random.default_rng((seed, 0xC0DE))
    pdim = cfg.patch * cfg.patch * 3

    embed_w = rng.normal(0.0, 0.2, size=(pdim, cfg.dim)).astype(np.float32)
    embed_b = np.zeros(cfg.dim, dtype=np.float32)
    unembed_w = rng.normal(0.0, 0.2, size=(cfg.dim, pdim)).astype(np.float32)
    unembed_b = np.zeros(pdim, dtype=np.float32)

    def embed_batch(imgs):
        b, h, w, c = imgs.shape
        g = h // cfg.patch
        x = imgs.reshape(b, g, cfg.patch, g, cfg.patch, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g, g, pdim)

    first = frames[rng.choice(len(frames), size=min(cfg.batch, len(frames)), replace=False)]
    feat0 = embed_batch(first) @ embed_w + embed_b
    vectors = _kmeans(feat0.reshape(-1, cfg.dim).copy(), cfg.v, cfg.kmeans_iters, rng)

    ids0 = nearest_code(vectors, feat0.reshape(-1, cfg.dim))
    ema_n = np.bincount(ids0, minlength=cfg.v).astype(np.float64) + 1e-3
    ema_m = np.zeros((cfg.v, cfg.dim), dtype=np.float64)
    np.add.at(ema_m, ids0, feat0.reshape(-1, cfg.dim))
    unused = np.zeros(cfg.v, dtype=np.int64)

    params = [embed_w, embed_b, unembed_w, unembed_b]
    adam_m = [np.zeros_like(p) for p in params]
    adam_v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8

    for t in range(1, cfg.steps + 1):
        batch = frames[rng.integers(0, len(frames), size=cfg.batch)]
        patches = embed_batch(batch)
        feat = patches @ embed_w + embed_b
        tokens, recon, _, pooled_all = quantize_features(feat, vectors.astype(np.float32), cfg.scales)

        # pixel MSE with straight-through gradients into the embedder
        pred = recon @ unembed_w + unembed_b
        diff = pred - patches
        g_pred = (2.0 / diff.size) * diff
        flat_recon = recon.reshape(-1, cfg.dim)
        flat_gp = g_pred.reshape(-1, pdim)
        g_unembed_w = flat_recon.T @ flat_gp
        g_unembed_b = flat_gp.sum(axis=0)
        g_feat = g_pred @ unembed_w.T  # straight-through past quantization
        flat_p = patches.reshape(-1, pdim)
        g_embed_w = flat_p.T @ g_feat.reshape(-1, cfg.dim)
        g_embed_b = g_feat.reshape(-1, cfg.dim).sum(axis=0)

        grads = [g_embed_w, g_embed_b, g_unembed_w, g_unembed_b]
        for p, g, m, v in zip(params, grads, adam_m, adam_v):
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            p -= cfg.lr * mh / (np.sqrt(vh) + eps)

        # EMA code update over every scale's assignments
        count = np.zeros(cfg.v, dtype=np.float64)
        total = np.zeros((cfg.v, cfg.dim), dtype=np.float64)
        for ids, pooled in zip(tokens, pooled_all):
            idf = ids.reshape(-1)
            count += np.bincount(idf, minlength=cfg.v)
            np.add.at(total, idf, pooled.reshape(-1, cfg.dim))
        ema_n = cfg.ema_decay * ema_n + (1 - cfg.ema_decay) * count
        ema_m = cfg.ema_decay * ema_m + (1 - cfg.ema_decay) * total
        vectors = (ema_m / np.maximum(ema_n, 1e-8)[:, None]).astype(np.float32)

        unused = np.where(count > 0, 0, unused + 1)
        dead = np.flatnonzero(unused >= cfg.dead_code_steps)
        if len(dead):
            pool = feat.reshape(-1, cfg.dim)
            picks = pool[rng.integers(0, len(pool), size=len(dead))]
            vectors[dead] = picks
            ema_n[dead] = 1.0
            ema_m[dead] = picks.astype(np.float64)
            unused[dead] = 0

    rng_fix = np.random.default_rng((seed, 0xF1F))
    vectors = _dedup_jitter(vectors.copy(), rng_fix)
    return Codebook(
        vectors=vectors.astype(np.float32),
        embed_w=embed_w,
        embed_b=embed_b,
        unembed_w=unembed_w,
        unembed_b=unembed_b,
        patch=cfg.patch,
        scales=tuple(cfg.scales),
    )


def reconstruction_mse(images: np.ndarray, codebook: Codebook, n_scales: int = None) -> float:
    """Mean pixel MSE of decode(encode(x)) truncated to n_scales."""
    scales = codebook.scales[: n_scales or len(codebook.scales)]
    feat = codebook.embed(images)
    tokens, _, _, _ = quantize_features(feat, codebook.vectors, scales)
    recon = decode_tokens(tokens, codebook, out_side=feat.shape[1])
    return float(np.mean((recon.astype(np.float64) - images.astype(np.float64)) ** 2))
