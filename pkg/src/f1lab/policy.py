"""Action-expert logic: flow-matching targets, the action loss, and
iterative denoise sampling of action chunks.

The policy regresses a vector field that transports Gaussian noise to
the expert action chunk along the straight-line path a_tau =
(1 - tau) * eps + tau * a. Sampling integrates the learned field with
fixed-step Euler from tau = 0 to 1; a midpoint integrator sits behind a
flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fastpath as F
from . import tensor as T
from .backbone import ExpertParams, InputBatch, ModelConfig, embed_inputs, forward
from .errors import DataError, NumericError
from .foresight import GenBatch, conditioning_from_flat, generate_foresight


# ---- flow samples ----------------------------------------------------------


@dataclass
class FlowSample:
    """One tau per chunk, shared across its K steps."""

    tau: np.ndarray  # scalar or (B,)
    eps: np.ndarray  # (..., K, action_dim) standard normal
    a_tau: np.ndarray  # interpolant, same shape as eps
    target: np.ndarray  # a - eps, independent of tau


def _interpolate(actions, eps, tau):
    t = np.asarray(tau, dtype=np.float64)
    t = t.reshape(t.shape + (1,) * (actions.ndim - t.ndim))
    return ((1.0 - t) * eps + t * actions).astype(actions.dtype)


def make_flow_sample(actions: np.ndarray, rng: np.random.Generator) -> FlowSample:
    """Flow sample for a single (K, action_dim) chunk."""
    if not np.all(np.isfinite(actions)):
        raise DataError("non-finite action chunk")
    tau = rng.uniform(0.0, 1.0)
    eps = rng.standard_normal(actions.shape).astype(actions.dtype)
    return FlowSample(tau=np.float64(tau), eps=eps, a_tau=_interpolate(actions, eps, tau), target=actions - eps)


def make_flow_batch(actions: np.ndarray, rng: np.random.Generator) -> FlowSample:
    """Batched flow samples, one independent tau per chunk."""
    if not np.all(np.isfinite(actions)):
        raise DataError("non-finite action chunk")
    b = actions.shape[0]
    tau = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal(actions.shape).astype(actions.dtype)
    return FlowSample(tau=tau, eps=eps, a_tau=_interpolate(actions, eps, tau), target=actions - eps)


def forced_flow_sample(actions: np.ndarray, eps: np.ndarray, tau) -> FlowSample:
    """Sample with caller-supplied noise and tau; verification hook."""
    return FlowSample(tau=np.asarray(tau, dtype=np.float64), eps=eps, a_tau=_interpolate(actions, eps, tau), target=actions - eps)


def reconstruct_action(sample: FlowSample) -> np.ndarray:
    """Invert the interpolant; exact for tau > 0."""
    t = np.asarray(sample.tau, dtype=np.float64)
    t = t.reshape(t.shape + (1,) * (sample.eps.ndim - t.ndim))
    return (sample.a_tau - (1.0 - t) * sample.eps) / t


# ---- training loss ---------------------------------------------------------


def flow_loss(cfg: ModelConfig, params: ExpertParams, batch: GenBatch, sample: FlowSample, cond_source: np.ndarray = None):
    """Mean over the batch of the squared field error.

    cond_source supplies the flat foresight tokens the GEN block is
    conditioned on (ground truth or model predictions); omitted when the
    generation expert is disabled.
    """
    if sample.a_tau.shape != (batch.proprio.shape[0], cfg.chunk, cfg.action_dim):
        raise DataError("flow sample does not match batch/chunk shape")
    kw = {}
    if cfg.use_gen:
        if cond_source is None:
            cond_source = batch.target_flat
        kw = dict(hist_feats=batch.hist_feats, cond_ids=conditioning_from_flat(cfg, cond_source))
    seq = embed_inputs(
        cfg,
        params,
        InputBatch(
            instr=batch.instr,
            image=batch.image,
            proprio=batch.proprio,
            a_tau=sample.a_tau,
            tau=np.asarray(sample.tau, dtype=np.float64).reshape(-1),
            **kw,
        ),
    )
    field = forward(cfg, params, seq).act_field
    diff = field - T.Tensor(sample.target.astype(field.data.dtype))
    return (diff * diff).sum(axis=2).sum(axis=1).mean()


# ---- sampling --------------------------------------------------------------


def default_field(cfg: ModelConfig, p: dict, cache: F.Cache, proprio: np.ndarray):
    def field(a_tau, tau):
        return F.act_field(cfg, p, cache, proprio, a_tau, tau)

    return field


def sample_actions(
    cfg: ModelConfig,
    p: dict,
    cache: F.Cache,
    proprio: np.ndarray,
    rng: np.random.Generator,
    steps: int = None,
    midpoint: bool = False,
    field_fn=None,
) -> np.ndarray:
    """Integrate the learned field from seeded noise; returns (B, K, A).

    field_fn(a_tau, tau (B,)) -> (B, K, A) overrides the cached model
    query, which the integrator tests use to inject stub fields.
    """
    steps = cfg.denoise_steps if steps is None else steps
    if steps < 1:
        raise DataError("need at least one denoise step")
    b = proprio.shape[0]
    if field_fn is None:
        field_fn = default_field(cfg, p, cache, proprio)
    # float64 accumulation keeps constant-field integration exact
    a = rng.standard_normal((b, cfg.chunk, cfg.action_dim))
    delta = 1.0 / steps
    for i in range(steps):
        tau = np.full(b, i * delta)
        if midpoint:
            half = a + 0.5 * delta * np.asarray(field_fn(a, tau), dtype=np.float64)
            v = field_fn(half, tau + 0.5 * delta)
        else:
            v = field_fn(a, tau)
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite vector field during sampling")
        a = a + delta * np.asarray(v, dtype=np.float64)
    return a


def build_context(cfg: ModelConfig, params: ExpertParams, codebook, instr, image, hist_tokens, sides=None):
    """KV cache over UND (and generated GEN scales) ready for action passes.

    Returns (cache, ForesightResult or None). The generation expert runs
    its greedy decode first so action tokens can attend to the foresight.
    """
    p = params.np_view()
    if cfg.use_gen:
        out = []
        fs = generate_foresight(cfg, params, codebook, instr, image, hist_tokens, sides=sides, cache_out=out)
        return out[0], fs
    return F.prefill_context(cfg, p, instr, image), None
