"""Group-relative policy optimization: sampling, advantages, clipped loss, loop.

Each training step samples G candidate rewrites per query from the frozen
sampling-time parameters, scores them, and centers rewards within the group.
The update maximizes the clipped importance-weighted surrogate with an exact
KL penalty toward a reference policy (the supervised initialization by
default, or the sampling-time policy). Because per-position output
distributions are independent given the query, the sequence-level KL is the
sum of per-position categorical divergences — computed in closed form, not
sampled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Protocol, Sequence

import numpy as np

from .optim import AdamConfig, AdamState, adam_update, clip_by_global_norm, linear_decay_lr
from .policy import (PolicyParams, TrainingDivergedError, all_logits, backprop_logit_grads,
                     log_softmax, logprob, sample)
from .reward import CurriculumSchedule, RewardScore, composite, weights_at
from .seeding import STREAM_SAMPLE, derive_rng, make_request_id
from .tokens import TokenSeq

logger = logging.getLogger(__name__)

ADV_MEAN_ONLY = "mean_only"
ADV_MEAN_STD = "mean_std"
REF_SFT_INIT = "sft_init"
REF_OLD_POLICY = "old_policy"

RUN_LOG_HEADER = "step,mean_reward,mean_sa,mean_pc,w_sa,w_pc,kl,grad_norm,lr"

_ZERO_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GrpoConfig:
    """Hyperparameters for the group-relative stage.

    The documented large-scale defaults are lr=1e-6 over 250 steps; the
    desk-scale policy trained here needs the larger defaults below. Both are
    plain config values.
    """

    group_size: int = 4
    batch_size: int = 8
    epsilon: float = 0.2
    beta: float = 0.01
    total_steps: int = 400
    lr: float = 5e-3
    max_grad_norm: float = 20.0
    ref_mode: str = REF_SFT_INIT
    advantage_norm: str = ADV_MEAN_ONLY
    inner_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1 or self.inner_epochs < 1:
            raise ValueError("batch_size and inner_epochs must be >= 1")
        if self.ref_mode not in (REF_SFT_INIT, REF_OLD_POLICY):
            raise ValueError(f"unknown ref_mode {self.ref_mode!r}")
        if self.advantage_norm not in (ADV_MEAN_ONLY, ADV_MEAN_STD):
            raise ValueError(f"unknown advantage_norm {self.advantage_norm!r}")


@dataclass
class GroupRollout:
    """One query with its G candidates, scores, and group-relative advantages."""

    query: TokenSeq
    candidates: list[TokenSeq]
    scores: list[RewardScore]
    rewards: list[float]
    old_logprobs: list[float]
    advantages: list[float]

    def __post_init__(self) -> None:
        g = len(self.candidates)
        lists = (self.scores, self.rewards, self.old_logprobs, self.advantages)
        if any(len(v) != g for v in lists):
            raise ValueError("all per-candidate lists must have the group length")


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    old_params: PolicyParams
    ref_params: PolicyParams
    opt_state: AdamState
    seed: int


@dataclass(frozen=True)
class ScoreJob:
    """One scoring request: a candidate rewrite of a query at a training step."""

    request_id: int
    query: TokenSeq
    candidate: TokenSeq
    step: int


class RolloutScorer(Protocol):
    def score_batch(self, jobs: Sequence[ScoreJob]) -> list[RewardScore]: ...


@dataclass(frozen=True)
class GrpoEnv:
    """Query source plus scorer; `queries(step)` returns the step's B prompts."""

    queries: Callable[[int], list[TokenSeq]]
    scorer: RolloutScorer


def compute_advantages(rewards: Sequence[float], mode: str = ADV_MEAN_ONLY) -> list[float]:
    """Group-relative advantages: rewards centered on the group mean.

    mean_only subtracts the mean; mean_std additionally divides by the
    population standard deviation (plus 1e-8).
    """
    if len(rewards) < 2:
        raise ValueError("need at least 2 rewards per group")
    mean = sum(rewards) / len(rewards)
    centered = [r - mean for r in rewards]
    if mode == ADV_MEAN_ONLY:
        return centered
    if mode == ADV_MEAN_STD:
        var = sum(c * c for c in centered) / len(centered)
        std = math.sqrt(var)
        return [c / (std + 1e-8) for c in centered]
    raise ValueError(f"unknown advantage mode {mode!r}")


def clipped_term(ratio: float, advantage: float, epsilon: float) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A); never exceeds ratio * A."""
    if not (ratio > 0):
        raise ValueError(f"importance ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(params: PolicyParams, ref_params: PolicyParams, x: TokenSeq) -> float:
    """Exact KL(ref || current) over length-L sequences given x.

    By per-position independence this is the sum over positions of the
    categorical KL. Each term is p_ref * (log p_ref - log p_cur) computed
    elementwise, so identical parameters give exactly zero.
    """
    if params.config != ref_params.config:
        raise ValueError("parameter shapes differ between policy and reference")
    logp_ref = log_softmax(all_logits(ref_params, x))
    logp_cur = log_softmax(all_logits(params, x))
    p_ref = np.exp(logp_ref)
    return float(np.sum(p_ref * (logp_ref - logp_cur)))


def kl_penalty_grad(params: PolicyParams, ref_params: PolicyParams,
                    x: TokenSeq) -> tuple[float, PolicyParams]:
    """KL(ref || current) and its gradient w.r.t. the current parameters.

    d KL / d logits_t = softmax(logits_t) - p_ref_t, backpropagated through the
    shared linear head.
    """
    logp_ref = log_softmax(all_logits(ref_params, x))
    logp_cur = log_softmax(all_logits(params, x))
    p_ref = np.exp(logp_ref)
    p_cur = np.exp(logp_cur)
    value = float(np.sum(p_ref * (logp_ref - logp_cur)))
    return value, backprop_logit_grads(params, x, p_cur - p_ref)


def grpo_loss_and_grad(state: TrainState, groups: Sequence[GroupRollout],
                       config: GrpoConfig) -> tuple[float, PolicyParams]:
    """Clipped surrogate loss with KL penalty, and its analytic gradient.

    loss = -(1/(B*G)) sum_j sum_i min(w_i A_i, clip(w_i) A_i)
           + beta * mean_j KL(ref || current | x_j)

    with w_i = exp(logprob(current) - old_logprob_i). The surrogate gradient of
    an unclipped candidate is A_i * w_i * grad logprob; a candidate whose clip
    binds contributes nothing. Per-position distributions depend only on the
    query, so each group accumulates one logit-gradient matrix and runs a
    single backward pass.
    """
    if not groups:
        raise ValueError("need at least one rollout group")
    b = len(groups)
    g = config.group_size
    cfg = state.params.config
    surrogate_sum = 0.0
    kl_sum = 0.0
    grad = PolicyParams.zeros(cfg)

    for j, group in enumerate(groups):
        if len(group.candidates) != g:
            raise ValueError(f"group {j} has {len(group.candidates)} candidates, expected {g}")
        logp = log_softmax(all_logits(state.params, group.query))
        probs = np.exp(logp)
        logit_grads = np.zeros_like(logp)
        for i, y in enumerate(group.candidates):
            lp = float(logp[np.arange(len(y)), list(y)].sum()) if y else 0.0
            if not math.isfinite(lp):
                raise TrainingDivergedError(
                    f"non-finite logprob for group {j} candidate {i}: {lp}")
            ratio = math.exp(lp - group.old_logprobs[i])
            if not (math.isfinite(ratio) and ratio > 0):
                raise TrainingDivergedError(
                    f"bad importance ratio for group {j} candidate {i}: {ratio}")
            adv = group.advantages[i]
            clipped = min(max(ratio, 1.0 - config.epsilon), 1.0 + config.epsilon)
            unclipped_val = ratio * adv
            clipped_val = clipped * adv
            surrogate_sum += min(unclipped_val, clipped_val)
            if unclipped_val <= clipped_val:
                coef = adv * ratio
                logit_grads[np.arange(len(y)), list(y)] += coef
                logit_grads[: len(y)] -= coef * probs[: len(y)]
        gpart = backprop_logit_grads(state.params, group.query, logit_grads)
        for acc, part in zip(grad.arrays(), gpart.arrays()):
            acc -= part / (b * g)

        kl_val, kl_grad = kl_penalty_grad(state.params, state.ref_params, group.query)
        if not math.isfinite(kl_val):
            raise TrainingDivergedError(f"non-finite KL for group {j}: {kl_val}")
        kl_sum += kl_val
        if config.beta:
            for acc, part in zip(grad.arrays(), kl_grad.arrays()):
                acc += config.beta * part / b

    loss = -surrogate_sum / (b * g) + config.beta * (kl_sum / b)
    return loss, grad


def rollout(state: TrainState, queries: Sequence[TokenSeq], scorer: RolloutScorer,
            schedule: CurriculumSchedule, config: GrpoConfig,
            parallelism: int = 1) -> list[GroupRollout]:
    """Sample, score, and package one step's groups.

    Candidates come from the sampling-time parameters at temperature 1.0 and
    top_p 1.0. Each (batch, candidate) slot draws from its own derived RNG
    stream and carries a structured request id, so results are identical for
    any parallelism degree and for in-process vs protocol scoring.
    """
    step = state.step
    b = len(queries)
    g = config.group_size

    def sample_slot(ji: tuple[int, int]) -> tuple[TokenSeq, float]:
        j, i = ji
        rng = derive_rng(state.seed, STREAM_SAMPLE, step, j, i)
        y = sample(state.old_params, queries[j], rng, temperature=1.0, top_p=1.0)
        return y, logprob(state.old_params, queries[j], y)

    slots = [(j, i) for j in range(b) for i in range(g)]
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            drawn = list(pool.map(sample_slot, slots))
    else:
        drawn = [sample_slot(s) for s in slots]

    jobs = [ScoreJob(request_id=make_request_id(step, b, j, i),
                     query=queries[j], candidate=drawn[j * g + i][0], step=step)
            for j, i in slots]
    scores = scorer.score_batch(jobs)
    if len(scores) != len(jobs):
        raise RuntimeError(f"scorer returned {len(scores)} scores for {len(jobs)} jobs")

    wpair = weights_at(schedule, step)
    groups: list[GroupRollout] = []
    for j in range(b):
        cands = [drawn[j * g + i][0] for i in range(g)]
        lps = [drawn[j * g + i][1] for i in range(g)]
        scs = [scores[j * g + i] for i in range(g)]
        rewards = [composite(wpair, sc) for sc in scs]
        advs = compute_advantages(rewards, config.advantage_norm)
        if config.advantage_norm == ADV_MEAN_ONLY and abs(sum(advs)) > _ZERO_SUM_TOL:
            raise AssertionError(f"group {j} advantages sum to {sum(advs)}, not ~0")
        groups.append(GroupRollout(query=queries[j], candidates=cands, scores=scs,
                                   rewards=rewards, old_logprobs=lps, advantages=advs))
    return groups


@dataclass(frozen=True)
class StepLog:
    step: int
    mean_reward: float
    mean_sa: float
    mean_pc: float
    w_sa: float
    w_pc: float
    kl: float
    grad_norm: float
    lr: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.mean_reward!r},{self.mean_sa!r},{self.mean_pc!r},"
                f"{self.w_sa!r},{self.w_pc!r},{self.kl!r},{self.grad_norm!r},{self.lr!r}")


@dataclass
class GrpoResult:
    params: PolicyParams
    log: list[StepLog]


def train(params_init: PolicyParams, config: GrpoConfig, schedule: CurriculumSchedule,
          env: GrpoEnv, seed: int, parallelism: int = 1,
          on_diverge: Callable[[PolicyParams, int], str | None] | None = None) -> GrpoResult:
    """Run the full group-relative stage.

    Each outer step refreshes the sampling-time parameters, rolls out B groups,
    takes `inner_epochs` gradient steps on the clipped surrogate (gradient norm
    capped at max_grad_norm, lr decayed linearly), and logs reward, weight,
    KL, and gradient statistics. On a non-finite loss the `on_diverge` callback
    may write a checkpoint; its path is attached to the raised error.
    """
    if schedule.total_steps != config.total_steps:
        raise ValueError("schedule.total_steps must equal config.total_steps")
    params = params_init.copy()
    ref = params_init.copy()
    opt_cfg = AdamConfig(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2)
    opt_state = AdamState.init(params.arrays())
    log: list[StepLog] = []

    for t in range(config.total_steps):
        old = params.copy()
        ref_now = ref if config.ref_mode == REF_SFT_INIT else old
        state = TrainState(step=t, params=params, old_params=old,
                           ref_params=ref_now, opt_state=opt_state, seed=seed)
        queries = env.queries(t)
        if len(queries) != config.batch_size:
            raise ValueError(f"env returned {len(queries)} queries, expected {config.batch_size}")
        groups = rollout(state, queries, env.scorer, schedule, config, parallelism)

        lr_now = linear_decay_lr(t, config.total_steps, config.lr)
        kl_logged = math.nan
        raw_norm = math.nan
        try:
            for _ in range(config.inner_epochs):
                loss, grad = grpo_loss_and_grad(state, groups, config)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss {loss} at step {t}")
                if math.isnan(kl_logged):
                    kl_logged = sum(kl_penalty(params, ref_now, q) for q in queries) / len(queries)
                norm = clip_by_global_norm(grad.arrays(), config.max_grad_norm)
                if math.isnan(raw_norm):
                    raw_norm = norm
                adam_update(params.arrays(), grad.arrays(), opt_state, opt_cfg, lr_now)
        except TrainingDivergedError as err:
            path = on_diverge(params, t) if on_diverge is not None else None
            err.checkpoint_path = path
            raise

        n = config.batch_size * config.group_size
        all_scores = [sc for grp in groups for sc in grp.scores]
        all_rewards = [r for grp in groups for r in grp.rewards]
        wpair = weights_at(schedule, t)
        log.append(StepLog(
            step=t,
            mean_reward=sum(all_rewards) / n,
            mean_sa=sum(sc.sa for sc in all_scores) / n,
            mean_pc=sum(sc.pc for sc in all_scores) / n,
            w_sa=wpair.w_sa,
            w_pc=wpair.w_pc,
            kl=kl_logged,
            grad_norm=raw_norm,
            lr=lr_now,
        ))
        if (t + 1) % 50 == 0:
            logger.info("grpo step %d/%d mean reward %.4f", t + 1, config.total_steps,
                        log[-1].mean_reward)
    return GrpoResult(params=params, log=log)
