"""Three-stage training: orchestration, freezing, AdamW, schedules,
checkpointing, and the ablation switches.

Stage 1 aligns the generation expert against a frozen understanding
expert with the teacher-forced token loss. Stages 2 and 3 train all
experts jointly on the weighted sum of the predicted-token loss and the
flow-matching action loss; stage 3 reuses the same objective on
task-specific data with a cosine schedule.

All randomness is stateless: the rng for step t of stage s is seeded by
(seed, s, t), which is what makes interrupt/resume byte-exact.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import fastpath as F
from . import tensor as T
from .backbone import (
    ExpertParams,
    InputBatch,
    ModelConfig,
    embed_inputs,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigError, DataError, NumericError
from .foresight import (
    GenBatch,
    TokenizedDataset,
    assemble_batch,
    conditioning_from_flat,
    greedy_conditioning,
    scale_blocks,
    tokenize_dataset,
)
from .policy import make_flow_batch
from .rvq import Codebook, CodebookConfig
from .world import Dataset, WorldConfig

RUN_VERSION = "f1lab-run-1"


# ---- run configuration -----------------------------------------------------


@dataclass
class StageOpts:
    steps: int = 600
    lr: float = 1e-3
    schedule: str = "cosine"
    checkpoints: int = 1

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1 or self.checkpoints < 1:
            raise ConfigError("steps and checkpoints must be positive")


@dataclass
class TrainOpts:
    batch_size: int = 32
    p_tf: float = 0.5
    holdout_fraction: float = 0.1
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 100
    include_failed: bool = False
    stage1: StageOpts = field(default_factory=lambda: StageOpts(steps=600, lr=1e-3, schedule="cosine"))
    stage2: StageOpts = field(default_factory=lambda: StageOpts(steps=500, lr=5e-4, schedule="constant", checkpoints=8))
    stage3: StageOpts = field(default_factory=lambda: StageOpts(steps=250, lr=3e-4, schedule="cosine"))

    def __post_init__(self):
        if not 0.0 <= self.p_tf <= 1.0:
            raise ConfigError("p_tf must lie in [0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


@dataclass
class AblationFlags:
    no_gen: bool = False
    frozen_gen: bool = False
    skip_stage2: bool = False
    inference_scales: int = 4

    def __post_init__(self):
        if self.no_gen and self.frozen_gen:
            raise ConfigError("no_gen excludes frozen_gen")
        if self.inference_scales not in (2, 4, 6):
            raise ConfigError("inference_scales must be one of 2, 4, 6")


# eval-time scale lists per sweep setting; sides 3 and 6 reuse the
# nearest trained grids, so only the trained model's scales are grown
SWEEP_SIDES = {2: (1, 2), 4: (1, 2, 4, 8), 6: (1, 2, 3, 4, 6, 8)}


@dataclass
class RunConfig:
    version: str = RUN_VERSION
    seed: int = 7
    deterministic: bool = True
    task: str = "static"
    model: ModelConfig = field(default_factory=ModelConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    train: TrainOpts = field(default_factory=TrainOpts)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.version != RUN_VERSION:
            raise ConfigError(f"unsupported run config version {self.version!r}")
        if self.task not in ("static", "dynamic"):
            raise ConfigError(f"task must be 'static' or 'dynamic', got {self.task!r}")


def _build_section(dc_type, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    spec = {f.name: f for f in dataclasses.fields(dc_type)}
    kw = {}
    for key, value in data.items():
        if key not in spec:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
        ftype = spec[key].type
        sub = {"model": ModelConfig, "world": WorldConfig, "codebook": CodebookConfig, "train": TrainOpts, "ablation": AblationFlags, "stage1": StageOpts, "stage2": StageOpts, "stage3": StageOpts}
        if key in sub and isinstance(value, dict):
            kw[key] = _build_section(sub[key], value, f"{path}.{key}" if path else key)
        elif isinstance(value, list):
            kw[key] = tuple(value)
        else:
            kw[key] = value
    try:
        return dc_type(**kw)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}")


def run_config_from_dict(data: dict) -> RunConfig:
    """Schema-validated load; unknown keys are rejected."""
    return _build_section(RunConfig, data, "")


def run_config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def default_run_config(task: str = "static", **kw) -> RunConfig:
    world = WorldConfig() if task == "static" else WorldConfig(dynamic_fraction=1.0)
    chunk = 4 if task == "static" else 8
    return RunConfig(task=task, world=world, model=ModelConfig(chunk=chunk), **kw)


# ---- stage plans -----------------------------------------------------------


@dataclass
class StagePlan:
    stage: int
    steps: int
    lr: float
    schedule: str
    batch_size: int
    warmup: int
    frozen: tuple
    losses: tuple  # subset of {"gen_tf", "gen_ar", "act"}
    w_gen: float
    w_act: float
    p_tf: float
    checkpoints: int
    seed: int

    def __post_init__(self):
        if self.stage == 1 and ("act" in self.losses or "und" not in self.frozen):
            raise ConfigError("stage 1 freezes UND and excludes the action loss")


def make_stage_plans(run: RunConfig) -> dict:
    t = run.train
    w_gen = 0.0 if run.ablation.no_gen else run.model.w_gen
    frozen23 = ("gen",) if run.ablation.frozen_gen else ()
    losses23 = ("act",) if run.ablation.no_gen else ("gen_ar", "act")
    common = dict(batch_size=t.batch_size, warmup=t.warmup, w_act=run.model.w_act, p_tf=t.p_tf, seed=run.seed)
    plans = {}
    if not run.ablation.no_gen:
        plans[1] = StagePlan(stage=1, steps=t.stage1.steps, lr=t.stage1.lr, schedule=t.stage1.schedule, frozen=("und",), losses=("gen_tf",), w_gen=1.0, checkpoints=t.stage1.checkpoints, **common)
    if not run.ablation.skip_stage2:
        plans[2] = StagePlan(stage=2, steps=t.stage2.steps, lr=t.stage2.lr, schedule=t.stage2.schedule, frozen=frozen23, losses=losses23, w_gen=w_gen, checkpoints=t.stage2.checkpoints, **common)
    plans[3] = StagePlan(stage=3, steps=t.stage3.steps, lr=t.stage3.lr, schedule=t.stage3.schedule, frozen=frozen23, losses=losses23, w_gen=w_gen, checkpoints=t.stage3.checkpoints, **common)
    return plans


# ---- optimizer -------------------------------------------------------------


@dataclass
class Moments:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def init(params: ExpertParams) -> "Moments":
        zeros = lambda: {n: np.zeros_like(params[n].data) for n in params.names()}
        return Moments(m=zeros(), v=zeros())


def global_grad_norm(params: ExpertParams) -> float:
    total = 0.0
    for n in params.trainable_names():
        g = params[n].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def adamw_step(
    params: ExpertParams,
    moments: Moments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    grad_clip: float = 1.0,
) -> float:
    """One decoupled-weight-decay update; returns the pre-clip grad norm."""
    for n in params.trainable_names():
        g = params[n].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {n}")
    norm = global_grad_norm(params)
    scale = 1.0 if norm <= grad_clip or norm == 0.0 else grad_clip / norm
    moments.t += 1
    bc1 = 1.0 - beta1**moments.t
    bc2 = 1.0 - beta2**moments.t
    for n in params.trainable_names():
        t_ = params[n]
        g = (t_.grad if t_.grad is not None else np.zeros_like(t_.data)) * scale
        g = g.astype(t_.data.dtype)
        moments.m[n] = beta1 * moments.m[n] + (1.0 - beta1) * g
        moments.v[n] = beta2 * moments.v[n] + (1.0 - beta2) * g * g
        update = (moments.m[n] / bc1) / (np.sqrt(moments.v[n] / bc2) + eps)
        t_.data = (t_.data - lr * (update + weight_decay * t_.data)).astype(t_.data.dtype)
    return norm


def lr_at(plan: StagePlan, step: int) -> float:
    """Learning rate for 1-indexed step, linear warmup then schedule."""
    warmup = min(plan.warmup, plan.steps)
    if warmup > 0 and step <= warmup:
        return plan.lr * step / warmup
    if plan.schedule == "constant":
        return plan.lr
    span = max(1, plan.steps - warmup)
    progress = (step - warmup) / span
    return plan.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---- data plumbing ---------------------------------------------------------


@dataclass
class SplitData:
    train: TokenizedDataset
    heldout: TokenizedDataset


def split_dataset(data: TokenizedDataset, holdout_fraction: float, seed: int) -> SplitData:
    n = len(data.trajs)
    if n < 2 or holdout_fraction <= 0.0:
        return SplitData(train=data, heldout=data)
    perm = np.random.default_rng((seed, 0x5EED)).permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    n_hold = min(n_hold, n - 1)
    hold = set(perm[:n_hold].tolist())
    pick = lambda keep: TokenizedDataset(
        trajs=[t for i, t in enumerate(data.trajs) if (i in hold) == keep],
        scales=data.scales,
        n_tokens=data.n_tokens,
    )
    return SplitData(train=pick(False), heldout=pick(True))


def prepare_data(ds: Dataset, codebook: Codebook, run: RunConfig) -> SplitData:
    data = tokenize_dataset(ds, codebook, include_failed=run.train.include_failed)
    return split_dataset(data, run.train.holdout_fraction, run.seed)


def sample_pairs(data: TokenizedDataset, rng: np.random.Generator, count: int):
    pairs = data.sample_index()
    idx = rng.integers(0, len(pairs), size=count)
    return [pairs[i] for i in idx]


# ---- losses per stage ------------------------------------------------------


def fused_losses(cfg: ModelConfig, params: ExpertParams, codebook: Codebook, batch: GenBatch, plan: StagePlan, rng: np.random.Generator):
    """(total, gen, act) Tensors for one batch under the stage's loss set.

    GEN queries cannot see ACT tokens, so the fused joint pass yields
    exactly the same generation logits as a standalone generation pass;
    the logged components therefore match independent recomputation.
    """
    b = batch.proprio.shape[0]
    zero = T.Tensor(np.zeros(()))
    gen_loss, act_loss = zero, zero
    if "gen_tf" in plan.losses:
        cond = conditioning_from_flat(cfg, batch.target_flat)
        seq = embed_inputs(cfg, params, InputBatch(instr=batch.instr, image=batch.image, hist_feats=batch.hist_feats, cond_ids=cond))
        out = forward(cfg, params, seq)
        gen_loss = T.softmax_cross_entropy(out.gen_logits, batch.target_flat).sum(axis=1).mean()
    else:
        mix = rng.uniform(size=b) < plan.p_tf
        sample = make_flow_batch(batch.action_chunk, rng)
        kw = {}
        if cfg.use_gen:
            pred = greedy_conditioning(cfg, params, codebook, batch)
            source = np.where(mix[:, None], batch.target_flat, pred)
            kw = dict(hist_feats=batch.hist_feats, cond_ids=conditioning_from_flat(cfg, source))
        seq = embed_inputs(
            cfg,
            params,
            InputBatch(instr=batch.instr, image=batch.image, proprio=batch.proprio, a_tau=sample.a_tau, tau=np.asarray(sample.tau).reshape(-1), **kw),
        )
        out = forward(cfg, params, seq)
        if cfg.use_gen and ("gen_ar" in plan.losses):
            gen_loss = T.softmax_cross_entropy(out.gen_logits, batch.target_flat).sum(axis=1).mean()
        diff = out.act_field - T.Tensor(sample.target.astype(out.act_field.data.dtype))
        act_loss = (diff * diff).sum(axis=2).sum(axis=1).mean()
    total = gen_loss * plan.w_gen + act_loss * plan.w_act
    return total, gen_loss, act_loss


def heldout_token_nll(cfg: ModelConfig, p: dict, codebook: Codebook, data: TokenizedDataset, max_pairs: int = 128, seed: int = 0) -> float:
    """Teacher-forced per-token NLL on held-out pairs, gradient-free."""
    rng = np.random.default_rng((seed, 0xE7A1))
    pairs = data.sample_index()
    if len(pairs) > max_pairs:
        pick = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in pick]
    total, count = 0.0, 0
    for at in range(0, len(pairs), 32):
        chunk = pairs[at : at + 32]
        batch = assemble_batch(cfg, codebook, data, chunk)
        logits = teacher_forced_logits(cfg, p, codebook, batch)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        b, n, _ = logits.shape
        picked = logp[np.arange(b)[:, None], np.arange(n)[None, :], batch.target_flat]
        total += float(-picked.sum())
        count += b * n
    return total / count


def teacher_forced_logits(cfg: ModelConfig, p: dict, codebook: Codebook, batch: GenBatch) -> np.ndarray:
    """Ground-truth-conditioned GEN logits on the cached no-grad path."""
    from .foresight import history_grids_by_side

    cache = F.prefill_context(cfg, p, batch.instr, batch.image)
    hist = history_grids_by_side(cfg, codebook, batch.hist_tokens, cfg.scales)
    cond = conditioning_from_flat(cfg, batch.target_flat)
    b = batch.target_flat.shape[0]
    out = []
    for side, s, e in scale_blocks(cfg.scales):
        x = F.embed_gen_block(cfg, p, hist[side], cond[:, s:e].reshape(b, side, side), side)
        hid = F.extend(cfg, p, cache, x.reshape(b, side * side, cfg.model_dim), np.arange(s, e), "gen", causal=cfg.gen_token_causal)
        out.append(hid @ p["gen.head_w"] + p["gen.head_b"])
    return np.concatenate(out, axis=1)


# ---- the stage loop --------------------------------------------------------


@dataclass
class StageResult:
    params: ExpertParams
    moments: Moments
    log_rows: list
    checkpoints: list  # (step, path) pairs
    heldout_nll: list  # (step, value) pairs


def checkpoint_steps(plan: StagePlan) -> list:
    k = min(plan.checkpoints, plan.steps)
    return [plan.steps * (i + 1) // k for i in range(k)]


def run_stage(
    run: RunConfig,
    plan: StagePlan,
    params: ExpertParams,
    codebook: Codebook,
    data: SplitData,
    out_dir=None,
    moments: Moments = None,
    start_step: int = 0,
    log_path=None,
) -> StageResult:
    cfg = run.model
    params.freeze(set(plan.frozen))
    moments = moments or Moments.init(params)
    ck_steps = set(checkpoint_steps(plan))
    rows, cks, nlls = [], [], []
    mode = "a" if start_step else "w"
    log_file = open(log_path, mode, newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        if not start_step:
            writer.writerow(["step", "lr", "loss_total", "loss_gen", "loss_act", "wall_ms"])
    try:
        for step in range(start_step + 1, plan.steps + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng((plan.seed, plan.stage, step))
            batch = assemble_batch(cfg, codebook, data.train, sample_pairs(data.train, rng, plan.batch_size))
            params.zero_grads()
            total, gen_loss, act_loss = fused_losses(cfg, params, codebook, batch, plan, rng)
            total.backward()
            lr = lr_at(plan, step)
            adamw_step(params, moments, lr, weight_decay=run.train.weight_decay, grad_clip=run.train.grad_clip)
            row = {
                "step": step,
                "lr": lr,
                "loss_total": float(total.data),
                "loss_gen": float(gen_loss.data),
                "loss_act": float(act_loss.data),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            rows.append(row)
            if writer:
                writer.writerow([row["step"], f"{row['lr']:.8g}", f"{row['loss_total']:.8g}", f"{row['loss_gen']:.8g}", f"{row['loss_act']:.8g}", f"{row['wall_ms']:.3f}"])
            if run.train.eval_every and (step % run.train.eval_every == 0 or step == plan.steps) and data.heldout.trajs and cfg.use_gen:
                nlls.append((step, heldout_token_nll(cfg, params.np_view(), codebook, data.heldout, seed=plan.seed)))
            if out_dir is not None and step in ck_steps:
                path = str(out_dir) + f"/stage{plan.stage}_ck{sorted(ck_steps).index(step) + 1:02d}"
                _save_training_checkpoint(path, params, plan, step, moments, run)
                cks.append((step, path))
    finally:
        if log_file:
            log_file.close()
    return StageResult(params=params, moments=moments, log_rows=rows, checkpoints=cks, heldout_nll=nlls)


def _save_training_checkpoint(path, params: ExpertParams, plan: StagePlan, step: int, moments: Moments, run: RunConfig):
    extra = {
        "seed": plan.seed,
        "schedule": plan.schedule,
        "lr": plan.lr,
        "frozen": list(plan.frozen),
        "task": run.task,
        "adam_t": moments.t,
    }
    save_checkpoint(path, params, stage=plan.stage, step=step, extra=extra, moments={"m": moments.m, "v": moments.v})


def load_training_checkpoint(path):
    """(params, cfg, stage, step, extra, Moments) from a saved state."""
    params, cfg, stage, step, extra, raw = load_checkpoint(path)
    moments = None
    if raw is not None:
        moments = Moments(m=raw["m"], v=raw["v"], t=int(extra.get("adam_t", step)))
    return params, cfg, stage, step, extra, moments


# ---- pipeline orchestration ------------------------------------------------


@dataclass
class PipelineResult:
    params: ExpertParams
    stage_results: dict
    final_path: str | None


def run_training(
    run: RunConfig,
    ds: Dataset,
    codebook: Codebook,
    out_dir=None,
    stages=None,
    init_params: ExpertParams = None,
    log_dir=None,
) -> PipelineResult:
    """Run the configured stages in order, threading params and data."""
    if run.ablation.no_gen:
        run = dataclasses.replace(run, model=dataclasses.replace(run.model, use_gen=False))
    plans = make_stage_plans(run)
    stages = [s for s in (stages or sorted(plans)) if s in plans]
    data = prepare_data(ds, codebook, run)
    params = init_params or ExpertParams.init(run.model, run.seed)
    results = {}
    final_path = None
    for s in stages:
        log_path = (str(log_dir or out_dir) + f"/train_log_stage{s}.csv") if (log_dir or out_dir) else None
        results[s] = run_stage(run, plans[s], params, codebook, data, out_dir=out_dir, log_path=log_path)
        params = results[s].params
    if out_dir is not None and stages:
        final_path = str(out_dir) + "/final"
        last = stages[-1]
        _save_training_checkpoint(final_path, params, plans[last], plans[last].steps, results[last].moments, run)
    return PipelineResult(params=params, stage_results=results, final_path=final_path)
