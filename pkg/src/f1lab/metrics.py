"""Quantitative evaluation: token accuracies, closed-loop success,
the image/action accuracy correlation study, and latency breakdowns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import fastpath as F
from .backbone import ExpertParams, ModelConfig
from .errors import ConfigError, DataError, NumericError
from .foresight import (
    TokenizedDataset,
    assemble_batch,
    generate_foresight,
    history_grids_by_side,
    history_indices,
    scale_blocks,
)
from .policy import build_context, sample_actions
from .rvq import Codebook, TokenPyramid, decode_tokens, encode
from .serialization import dumps_17g
from .world import ACTION_LIMIT, Trajectory, WorldConfig, is_success, render, sample_scene, scripted_expert, step

TAUS = (0.01, 0.02, 0.05)


# ---- accuracies ------------------------------------------------------------


def image_token_accuracy(pred: TokenPyramid, gt: TokenPyramid):
    """Exact-match fraction over all tokens plus the per-scale breakdown."""
    if pred.scales != gt.scales:
        raise DataError(f"scale mismatch {pred.scales} vs {gt.scales}")
    per_scale, hits, total = {}, 0, 0
    for r, p, g in zip(pred.scales, pred.tokens, gt.tokens):
        eq = np.asarray(p) == np.asarray(g)
        per_scale[r] = float(eq.mean())
        hits += int(eq.sum())
        total += eq.size
    return hits / total, per_scale


def image_token_accuracy_flat(pred_flat: np.ndarray, gt_flat: np.ndarray, scales):
    """Batched variant over (B, N) flat pyramids."""
    if pred_flat.shape != gt_flat.shape:
        raise DataError("flat pyramid shape mismatch")
    eq = pred_flat == gt_flat
    per_scale = {r: float(eq[:, s:e].mean()) for r, s, e in scale_blocks(scales)}
    return float(eq.mean()), per_scale


def action_token_accuracy(pred: np.ndarray, gt: np.ndarray, tau: float) -> float:
    """Fraction of scalar chunk components with |error| strictly below tau."""
    if tau <= 0:
        raise ConfigError("tolerance tau must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError("action chunk shape mismatch")
    return float((np.abs(pred - gt) < tau).mean())


def correlation(xs, ys):
    """(Pearson, Spearman); Spearman uses average ranks on ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 3:
        raise DataError("correlation needs two equal-length vectors, n >= 3")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise NumericError("correlation undefined for constant input")
    pearson = float(np.corrcoef(xs, ys)[0, 1])
    spearman = float(np.corrcoef(rankdata(xs), rankdata(ys))[0, 1])
    return pearson, spearman


# ---- open-loop evaluation --------------------------------------------------


@dataclass
class OpenLoopEval:
    image_acc: float
    per_scale_acc: dict
    acc_tau: dict  # tau -> Acc_tau over all components
    decoded_mse: dict  # scale count -> pixel MSE of the truncated decode
    n_pairs: int


def open_loop_eval(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, data: TokenizedDataset, n_pairs: int = 64, seed: int = 0, sides=None, denoise_steps: int = None) -> OpenLoopEval:
    """Foresight token accuracy and chunk accuracy on held-out pairs."""
    rng = np.random.default_rng((seed, 0x0E1))
    pairs = data.sample_index()
    if len(pairs) > n_pairs:
        pick = rng.choice(len(pairs), size=n_pairs, replace=False)
        pairs = [pairs[i] for i in pick]
    batch = assemble_batch(cfg, codebook, data, pairs)
    sides = tuple(sides or cfg.scales)
    image_acc, per_scale, mse = float("nan"), {}, {}
    if cfg.use_gen:
        cache_box = []
        fs = generate_foresight(cfg, params, codebook, batch.instr, batch.image, batch.hist_tokens, sides=sides, target_flat=batch.target_flat, cache_out=cache_box)
        cache = cache_box[0]
        if sides == tuple(cfg.scales):
            image_acc, per_scale = image_token_accuracy_flat(fs.flat, batch.target_flat, cfg.scales)
        else:
            per_scale = dict(fs.per_scale_acc or {})
            image_acc = float(np.mean(list(per_scale.values()))) if per_scale else float("nan")
        # truncated decodes scored against the ground-truth next render
        gt_next = np.stack([data.trajs[i].observations[t + 1] for i, t in pairs])
        for k in range(1, len(sides) + 1):
            dec = decode_tokens(fs.grids[:k], codebook, out_side=cfg.grid_side)
            mse[k] = float(np.mean((dec - gt_next) ** 2))
    else:
        cache, _ = build_context(cfg, params, None, batch.instr, batch.image, None)
    acts = sample_actions(cfg, params.np_view(), cache, batch.proprio, np.random.default_rng((seed, 0xAC7)), steps=denoise_steps)
    acc_tau = {t: action_token_accuracy(acts, batch.action_chunk, t) for t in TAUS}
    return OpenLoopEval(image_acc=image_acc, per_scale_acc=per_scale, acc_tau=acc_tau, decoded_mse=mse, n_pairs=len(pairs))


# ---- closed-loop evaluation ------------------------------------------------


@dataclass
class EpisodeRecord:
    seed: int
    success: bool
    steps: int


@dataclass
class ClosedLoopResult:
    success_rate: float
    mean_steps: float
    records: list
    trajectories: list = None

    def summary(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "mean_steps": self.mean_steps,
            "episodes": len(self.records),
            "seeds": [r.seed for r in self.records],
            "successes": [bool(r.success) for r in self.records],
        }


class _Episode:
    def __init__(self, seed: int, world_cfg: WorldConfig, codebook: Codebook, m: int, resolution: int, record: bool = False):
        self.seed = seed
        self.state, self.instr = sample_scene(world_cfg, np.random.default_rng((seed, 0xE9)))
        self.m = m
        self.codebook = codebook
        self.resolution = resolution
        self.done = False
        self.success = False
        self.steps = 0
        self.obs = render(self.state, resolution)
        first = self._tokens(self.obs)
        self.history = [first] * (m + 1)
        self.tape = None
        if record:
            self.tape = {"obs": [self.obs], "actions": [], "proprio": [np.asarray(self.state.agent_pos, dtype=np.float64)]}

    def _tokens(self, obs) -> np.ndarray:
        return encode(obs[None], self.codebook)[0].flatten().astype(np.int32)

    def observe(self):
        return self.obs, np.stack(self.history[-(self.m + 1) :]), np.asarray(self.state.agent_pos, dtype=np.float32)

    def advance(self, action, horizon: int):
        self.state = step(self.state, np.asarray(action, dtype=np.float64))
        self.steps += 1
        self.obs = render(self.state, self.resolution)
        self.history.append(self._tokens(self.obs))
        del self.history[: -(self.m + 1)]
        if self.tape is not None:
            self.tape["actions"].append(np.clip(np.asarray(action, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT))
            self.tape["obs"].append(self.obs)
            self.tape["proprio"].append(np.asarray(self.state.agent_pos, dtype=np.float64))
        if is_success(self.state, self.instr):
            self.done = self.success = True
        elif self.steps >= horizon:
            self.done = True

    def to_trajectory(self) -> Trajectory:
        return Trajectory(
            observations=np.stack(self.tape["obs"]).astype(np.float32),
            actions=np.asarray(self.tape["actions"], dtype=np.float64).reshape(-1, 2),
            proprio=np.stack(self.tape["proprio"]),
            instruction=tuple(self.instr.tokens()),
            success=self.success,
        )


def closed_loop_eval(
    cfg: ModelConfig,
    params: ExpertParams,
    codebook: Codebook,
    world_cfg: WorldConfig,
    seeds,
    sides=None,
    actor: str = "model",
    replan_every: int = None,
    denoise_steps: int = None,
    horizon: int = None,
    record: bool = False,
) -> ClosedLoopResult:
    """Batched receding-horizon rollout over one episode per seed.

    The model actor observes, generates foresight at the configured
    scales, samples a chunk, executes it, and replans; the expert actor
    pipes the scripted controller through the identical harness.
    """
    if actor not in ("model", "expert"):
        raise ConfigError(f"unknown actor {actor!r}")
    if world_cfg.resolution != cfg.image_size:
        raise ConfigError("world resolution does not match the model's image size")
    horizon = horizon or world_cfg.horizon
    exec_steps = min(replan_every or cfg.chunk, cfg.chunk)
    episodes = [_Episode(s, world_cfg, codebook, cfg.m, world_cfg.resolution, record=record) for s in seeds]
    p = params.np_view()
    while True:
        active = [e for e in episodes if not e.done]
        if not active:
            break
        if actor == "expert":
            for e in active:
                e.advance(scripted_expert(e.state, e.instr), horizon)
            continue
        views = [e.observe() for e in active]
        obs = np.stack([v[0] for v in views])
        hist = np.stack([v[1] for v in views])
        prop = np.stack([v[2] for v in views])
        instr = np.stack([np.asarray(e.instr.tokens(), dtype=np.int64) for e in active])
        cache, _ = build_context(cfg, params, codebook, instr, obs, hist, sides=sides)
        rng = np.random.default_rng((active[0].seed, 0xF10, active[0].steps))
        chunks = sample_actions(cfg, p, cache, prop, rng, steps=denoise_steps)
        for j in range(exec_steps):
            still = [i for i, e in enumerate(active) if not e.done]
            if not still:
                break
            for i in still:
                active[i].advance(chunks[i, j], horizon)
    records = [EpisodeRecord(seed=e.seed, success=e.success, steps=e.steps) for e in episodes]
    rate = float(np.mean([r.success for r in records])) if records else 0.0
    mean_steps = float(np.mean([r.steps for r in records])) if records else 0.0
    trajs = [e.to_trajectory() for e in episodes] if record else None
    return ClosedLoopResult(success_rate=rate, mean_steps=mean_steps, records=records, trajectories=trajs)


# ---- latency ---------------------------------------------------------------

BENCH_ROWS = (
    "image process (e.g., resize)",
    "temporal downsampling",
    "image encoder",
    "foresight generation",
    "x10 action forward pass (flow)",
    "total inference",
)


def bench_latency(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, world_cfg: WorldConfig = None, runs: int = 50, denoise_steps: int = None, seed: int = 0, stat: str = "median") -> dict:
    """Per-stage milliseconds over repeated single-frame inference.

    stat picks the aggregate: median for reporting, min for scaling
    comparisons that must shrug off background load.
    """
    world_cfg = world_cfg or WorldConfig(resolution=cfg.image_size)
    state, spec = sample_scene(world_cfg, np.random.default_rng((seed, 0xB6)))
    obs = render(state, world_cfg.resolution)
    raw = (obs * 255.0 + 0.5).astype(np.uint8)
    instr = np.asarray(spec.tokens(), dtype=np.int64)[None]
    prop = np.asarray(state.agent_pos, dtype=np.float32)[None]
    p = params.np_view()
    steps = denoise_steps or cfg.denoise_steps
    flat = encode(obs[None], codebook)[0].flatten().astype(np.int32)
    hist = np.stack([flat] * (cfg.m + 1))[None]
    rng = np.random.default_rng((seed, 0xB7))

    def once():
        t = {}
        t0 = time.perf_counter()
        image = raw.astype(np.float32) / 255.0
        t1 = time.perf_counter()
        t["image process (e.g., resize)"] = t1 - t0
        grids = history_grids_by_side(cfg, codebook, hist, cfg.scales)
        t2 = time.perf_counter()
        t["temporal downsampling"] = t2 - t1
        encode(image[None], codebook)
        cache = F.prefill_context(cfg, p, instr, image[None])
        t3 = time.perf_counter()
        t["image encoder"] = t3 - t2
        F.generate_scales(cfg, p, cache, grids, cfg.scales)
        t4 = time.perf_counter()
        t["foresight generation"] = t4 - t3
        sample_actions(cfg, p, cache, prop, rng, steps=steps)
        t5 = time.perf_counter()
        t["x10 action forward pass (flow)"] = t5 - t4
        t["total inference"] = t5 - t0
        return t

    once()  # warmup
    samples = {name: [] for name in BENCH_ROWS}
    for _ in range(runs):
        t = once()
        for name in BENCH_ROWS:
            samples[name].append(t[name])
    agg = np.median if stat == "median" else np.min
    return {name: float(agg(vals) * 1e3) for name, vals in samples.items()}


# ---- artifact writers ------------------------------------------------------

EVAL_COLUMNS = ("step", "image_token_acc", "acc_0.01", "acc_0.02", "acc_0.05")


def write_eval_csv(path, rows):
    """rows: iterable of dicts with EVAL_COLUMNS keys."""
    with open(path, "w", newline="") as f:
        f.write(",".join(EVAL_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in EVAL_COLUMNS) + "\n")


def write_foresight_csv(path, rows):
    """rows: iterable of dicts with step/scale/token_acc/mse keys."""
    with open(path, "w", newline="") as f:
        f.write("step,scale,token_acc,mse\n")
        for row in rows:
            f.write(f"{row['step']},{row['scale']},{_fmt(row['token_acc'])},{_fmt(row['mse'])}\n")


def write_correlation_json(path, per_tau: dict, n: int):
    doc = {"n_checkpoints": n, "taus": {}}
    for tau, (pearson, spearman) in per_tau.items():
        doc["taus"][f"{tau:g}"] = {"pearson": pearson, "spearman": spearman}
    with open(path, "w") as f:
        f.write(dumps_17g(doc, indent=2))


def write_rollout_summary(path, result: ClosedLoopResult):
    with open(path, "w") as f:
        f.write(dumps_17g(result.summary(), indent=2))


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)
