"""Autoregressive rewrite policy with exact log-probabilities and gradients.

The architecture is deliberately small: a bag-of-tokens context encoder, a
position embedding, and a linear output head. Because the context ignores the
rewrite prefix, the per-position output distributions are independent given
the input prompt, which makes sequence normalization and divergences exactly
computable in closed form. All gradients are hand-derived softmax
backpropagation; there is no autodiff dependency.

Shapes: input_embed [V, d], pos_embed [L, d], output_proj [d, V],
output_bias [V]. Logits at position t are (ctx + pos_embed[t]) @ output_proj
+ output_bias.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .optim import AdamConfig, AdamState, adam_update, clip_by_global_norm, warmup_cosine_lr
from .seeding import STREAM_SFT_SHUFFLE, derive_rng
from .tokens import TokenSeq, validate_sequence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    max_len: int
    context_dim: int

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.max_len, self.context_dim) < 1:
            raise ValueError("all policy dimensions must be >= 1")


@dataclass
class PolicyParams:
    """Dense parameter set of the rewrite policy."""

    input_embed: np.ndarray   # [V, d]
    pos_embed: np.ndarray     # [L, d]
    output_proj: np.ndarray   # [d, V]
    output_bias: np.ndarray   # [V]

    @property
    def config(self) -> PolicyConfig:
        v, d = self.input_embed.shape
        return PolicyConfig(vocab_size=v, max_len=self.pos_embed.shape[0], context_dim=d)

    def arrays(self) -> list[np.ndarray]:
        return [self.input_embed, self.pos_embed, self.output_proj, self.output_bias]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in self.arrays()))

    def validate(self) -> None:
        v, d = self.input_embed.shape
        ell = self.pos_embed.shape[0]
        if self.pos_embed.shape != (ell, d) or self.output_proj.shape != (d, v) \
                or self.output_bias.shape != (v,):
            raise ValueError("parameter shapes are inconsistent")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters contain non-finite entries")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParams":
        out = []
        offset = 0
        for a in self.arrays():
            out.append(vec[offset:offset + a.size].reshape(a.shape).copy())
            offset += a.size
        return PolicyParams(*out)

    @classmethod
    def zeros(cls, config: PolicyConfig) -> "PolicyParams":
        v, ell, d = config.vocab_size, config.max_len, config.context_dim
        return cls(np.zeros((v, d)), np.zeros((ell, d)), np.zeros((d, v)), np.zeros(v))


@dataclass(frozen=True)
class SftExample:
    """One supervised pair: original prompt and target rewrite."""

    x: TokenSeq
    y_target: TokenSeq


def init_params(config: PolicyConfig, rng: np.random.Generator,
                scale: float = 0.05) -> PolicyParams:
    v, ell, d = config.vocab_size, config.max_len, config.context_dim
    return PolicyParams(
        input_embed=scale * rng.standard_normal((v, d)),
        pos_embed=scale * rng.standard_normal((ell, d)),
        output_proj=scale * rng.standard_normal((d, v)),
        output_bias=scale * rng.standard_normal(v),
    )


def context_encode(params: PolicyParams, x: TokenSeq) -> np.ndarray:
    """Mean of the input-embedding rows of x; the zero vector for empty x."""
    validate_sequence(x, params.input_embed.shape[0], max(len(x), 1))
    if not x:
        return np.zeros(params.input_embed.shape[1])
    return params.input_embed[list(x)].mean(axis=0)


def step_logits(params: PolicyParams, ctx: np.ndarray, position: int) -> np.ndarray:
    """Output logits at one position given the context vector."""
    ell = params.pos_embed.shape[0]
    if not (0 <= position < ell):
        raise ValueError(f"position {position} outside [0, {ell})")
    return (ctx + params.pos_embed[position]) @ params.output_proj + params.output_bias


def all_logits(params: PolicyParams, x: TokenSeq) -> np.ndarray:
    """Logit matrix [L, V] for every position at once."""
    ctx = context_encode(params, x)
    return (ctx[None, :] + params.pos_embed) @ params.output_proj + params.output_bias


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logprob(params: PolicyParams, x: TokenSeq, y: TokenSeq) -> float:
    """log pi(y | x), summed over positions; 0.0 for empty y."""
    cfg = params.config
    validate_sequence(y, cfg.vocab_size, cfg.max_len)
    if not y:
        return 0.0
    logp = log_softmax(all_logits(params, x)[: len(y)])
    return float(logp[np.arange(len(y)), list(y)].sum())


def sample(params: PolicyParams, x: TokenSeq, rng: np.random.Generator,
           temperature: float = 1.0, top_p: float = 1.0) -> TokenSeq:
    """Sample exactly L tokens autoregressively.

    Temperature 0 is greedy argmax with lowest-id tie-break. Nucleus truncation
    is applied after temperature scaling: tokens are ranked by descending
    probability (id ascending on ties), the smallest prefix with cumulative
    mass >= top_p is kept, and the prefix is renormalized.
    """
    if not (temperature >= 0.0):
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if not (0.0 < top_p <= 1.0):
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    logits = all_logits(params, x)
    ell, v = logits.shape
    out: list[int] = []
    for t in range(ell):
        row = logits[t]
        if temperature == 0.0:
            out.append(int(np.argmax(row)))
            continue
        probs = softmax(row / temperature)
        # Stable nucleus order: probability descending, id ascending on ties.
        order = np.lexsort((np.arange(v), -probs))
        csum = np.cumsum(probs[order])
        cutoff = int(np.searchsorted(csum, top_p)) if top_p < 1.0 else v - 1
        cutoff = min(cutoff, v - 1)
        kept = order[: cutoff + 1]
        kept_probs = probs[kept]
        kept_probs = kept_probs / kept_probs.sum()
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(kept_probs), u))
        out.append(int(kept[min(idx, len(kept) - 1)]))
    return tuple(out)


def backprop_logit_grads(params: PolicyParams, x: TokenSeq,
                         logit_grads: np.ndarray) -> PolicyParams:
    """Parameter-space gradient from per-position logit gradients.

    logit_grads has shape [n, V] covering positions 0..n-1. This is the shared
    backward pass through the linear head, position embeddings, and the
    bag-of-tokens context for any objective whose derivative w.r.t. the logits
    is known (log-likelihood, divergences, weighted surrogate sums).
    """
    n = logit_grads.shape[0]
    ctx = context_encode(params, x)
    inputs = ctx[None, :] + params.pos_embed[:n]          # [n, d]
    w_grad = inputs.T @ logit_grads                        # [d, V]
    b_grad = logit_grads.sum(axis=0)                       # [V]
    pos_rows = logit_grads @ params.output_proj.T          # [n, d]
    pos_grad = np.zeros_like(params.pos_embed)
    pos_grad[:n] = pos_rows
    input_grad = np.zeros_like(params.input_embed)
    if x:
        ctx_grad = pos_rows.sum(axis=0) / len(x)
        np.add.at(input_grad, list(x), ctx_grad)
    return PolicyParams(input_embed=input_grad, pos_embed=pos_grad,
                        output_proj=w_grad, output_bias=b_grad)


def grad_logprob(params: PolicyParams, x: TokenSeq, y: TokenSeq) -> PolicyParams:
    """Analytic gradient of logprob(params, x, y) w.r.t. every parameter."""
    cfg = params.config
    validate_sequence(y, cfg.vocab_size, cfg.max_len)
    if not y:
        return PolicyParams.zeros(cfg)
    n = len(y)
    probs = softmax(all_logits(params, x)[:n])
    logit_grads = -probs
    logit_grads[np.arange(n), list(y)] += 1.0
    return backprop_logit_grads(params, x, logit_grads)


def sft_loss_and_grad(params: PolicyParams,
                      batch: list[SftExample]) -> tuple[float, PolicyParams]:
    """Mean negative log-likelihood over the batch, with its exact gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    grad = PolicyParams.zeros(params.config)
    for ex in batch:
        total += logprob(params, ex.x, ex.y_target)
        g = grad_logprob(params, ex.x, ex.y_target)
        for acc, part in zip(grad.arrays(), g.arrays()):
            acc += part
    scale = -1.0 / len(batch)
    for a in grad.arrays():
        a *= scale
    return -total / len(batch), grad


@dataclass(frozen=True)
class SftSettings:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-2
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4


@dataclass
class SftResult:
    params: PolicyParams
    epoch_losses: list[float]


def sft_train(params_init: PolicyParams, corpus: list[SftExample],
              settings: SftSettings, seed: int) -> SftResult:
    """Supervised stage: minimize mean cross-entropy over the corpus.

    AdamW with gradient-norm clipping; learning rate warms up linearly over the
    first ~5% of steps, then follows a cosine decay to zero. The per-epoch mean
    loss is logged and returned alongside the trained parameters.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    params = params_init.copy()
    opt_cfg = AdamConfig(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2,
                         weight_decay=settings.weight_decay)
    opt_state = AdamState.init(params.arrays())
    n_batches = (len(corpus) + settings.batch_size - 1) // settings.batch_size
    total_steps = settings.epochs * n_batches
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(settings.epochs):
        order = derive_rng(seed, STREAM_SFT_SHUFFLE, epoch).permutation(len(corpus))
        losses = []
        for b in range(n_batches):
            idx = order[b * settings.batch_size:(b + 1) * settings.batch_size]
            batch = [corpus[int(i)] for i in idx]
            loss, grad = sft_loss_and_grad(params, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite supervised loss {loss} at epoch {epoch} step {step}")
            clip_by_global_norm(grad.arrays(), settings.clip_norm)
            lr_now = warmup_cosine_lr(step, total_steps, settings.lr, settings.warmup_frac)
            adam_update(params.arrays(), grad.arrays(), opt_state, opt_cfg, lr_now)
            losses.append(loss)
            step += 1
        epoch_losses.append(sum(losses) / len(losses))
        logger.info("sft epoch %d/%d mean loss %.6f", epoch + 1, settings.epochs,
                    epoch_losses[-1])
    return SftResult(params=params, epoch_losses=epoch_losses)


def save_checkpoint(params: PolicyParams, path) -> None:
    """Versioned JSON checkpoint; bit-exact round trip for finite values."""
    cfg = params.config
    doc = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "config": {"vocab_size": cfg.vocab_size, "max_len": cfg.max_len,
                   "context_dim": cfg.context_dim},
        "input_embed": params.input_embed.ravel().tolist(),
        "pos_embed": params.pos_embed.ravel().tolist(),
        "output_proj": params.output_proj.ravel().tolist(),
        "output_bias": params.output_bias.ravel().tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    c = doc["config"]
    v, ell, d = c["vocab_size"], c["max_len"], c["context_dim"]
    params = PolicyParams(
        input_embed=np.array(doc["input_embed"], dtype=float).reshape(v, d),
        pos_embed=np.array(doc["pos_embed"], dtype=float).reshape(ell, d),
        output_proj=np.array(doc["output_proj"], dtype=float).reshape(d, v),
        output_bias=np.array(doc["output_bias"], dtype=float),
    )
    params.validate()
    return params
