"""Synthetic generator-plus-evaluator surrogate with an exhaustive oracle.

Scoring depends only on the token multiset of the rewrite, never on order, so
the full space of rewrites of length L is the set of multisets of size L over
the vocabulary — small enough to enumerate exactly. The weights are chosen so
the two objectives genuinely conflict: a semantically perfect rewrite cannot
reach the physics success threshold and vice versa, while a compromise rewrite
clears both.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Iterator

import numpy as np

from .policy import SftExample
from .reward import RewardScore, WeightPair, likert_clamp
from .tokens import ROLE_DISTRACTOR, ROLE_INTENT, ROLE_PHYSICS, Scenario, TokenSeq, Vocab, validate_sequence

OBJECTIVE_SA = "sa"
OBJECTIVE_PC = "pc"
OBJECTIVE_JOINT = "joint_indicator"
OBJECTIVE_COMPOSITE = "composite"
OBJECTIVES = (OBJECTIVE_SA, OBJECTIVE_PC, OBJECTIVE_JOINT, OBJECTIVE_COMPOSITE)

ENUMERATION_BOUND = 10 ** 7

ENV_FORMAT_VERSION = 1


class EnumerationBoundError(ValueError):
    """The multiset space is too large for exhaustive search."""


@dataclass(frozen=True)
class EnvWeights:
    sa_gain: float = 4.0
    incompat_penalty: float = 0.5
    distractor_penalty: float = 0.25
    pc_gain: float = 2.0
    pc_cap: int = 2
    pc_incompat_penalty: float = 1.0

    def __post_init__(self) -> None:
        vals = (self.sa_gain, self.incompat_penalty, self.distractor_penalty,
                self.pc_gain, self.pc_cap, self.pc_incompat_penalty)
        if any(v < 0 for v in vals):
            raise ValueError("all gain/penalty values must be >= 0")


@dataclass(frozen=True)
class EnvConfig:
    vocab: Vocab
    k: int
    max_len: int
    noise_sigma: float = 0.25
    weights: EnvWeights = field(default_factory=EnvWeights)

    def __post_init__(self) -> None:
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (1 <= self.k <= len(self.vocab.intent_ids)):
            raise ValueError("k must be within the intent pool")

    def to_json_dict(self) -> dict:
        return {
            "version": ENV_FORMAT_VERSION,
            "vocab": {
                "size": self.vocab.size,
                "roles": list(self.vocab.roles),
                "physics_class": list(self.vocab.physics_class),
            },
            "k": self.k,
            "max_len": self.max_len,
            "noise_sigma": self.noise_sigma,
            "weights": {
                "sa_gain": self.weights.sa_gain,
                "incompat_penalty": self.weights.incompat_penalty,
                "distractor_penalty": self.weights.distractor_penalty,
                "pc_gain": self.weights.pc_gain,
                "pc_cap": self.weights.pc_cap,
                "pc_incompat_penalty": self.weights.pc_incompat_penalty,
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EnvConfig":
        if doc.get("version") != ENV_FORMAT_VERSION:
            raise ValueError(f"unsupported env config version {doc.get('version')!r}")
        voc = doc["vocab"]
        vocab = Vocab(size=int(voc["size"]), roles=tuple(voc["roles"]),
                      physics_class=tuple(voc["physics_class"]))
        w = doc.get("weights", {})
        return cls(
            vocab=vocab,
            k=int(doc["k"]),
            max_len=int(doc["max_len"]),
            noise_sigma=float(doc.get("noise_sigma", 0.25)),
            weights=EnvWeights(**w) if w else EnvWeights(),
        )


@dataclass(frozen=True)
class ScoreBreakdown:
    """Token-count decomposition behind one score."""

    c_intent: int     # distinct scenario intent tokens present
    c_compat: int     # class-compatible physics tokens, with multiplicity
    c_incompat: int   # other-class physics tokens, with multiplicity
    c_distract: int   # distractor tokens, with multiplicity
    raw_sa: float
    raw_pc: float


def _counts(config: EnvConfig, scenario: Scenario, y: TokenSeq) -> tuple[int, int, int, int]:
    vocab = config.vocab
    seen_intent: set[int] = set()
    c_compat = c_incompat = c_distract = 0
    for tok in y:
        role = vocab.roles[tok]
        if role == ROLE_INTENT:
            if tok in scenario.intent_tokens:
                seen_intent.add(tok)
        elif role == ROLE_PHYSICS:
            if vocab.physics_class[tok] == scenario.class_id:
                c_compat += 1
            else:
                c_incompat += 1
        elif role == ROLE_DISTRACTOR:
            c_distract += 1
    return len(seen_intent), c_compat, c_incompat, c_distract


def score(config: EnvConfig, scenario: Scenario, y: TokenSeq,
          rng: np.random.Generator | None = None) -> tuple[RewardScore, ScoreBreakdown]:
    """Score a rewrite against a scenario.

    raw_sa = 1 + sa_gain * c_intent/k - incompat_penalty * c_incompat
                 - distractor_penalty * c_distract
    raw_pc = 1 + pc_gain * min(c_compat, pc_cap) - pc_incompat_penalty * c_incompat

    With an rng, independent Gaussian noise (std noise_sigma) is added to each
    raw value before clamping — sa first, then pc, so draws are reproducible.
    Scoring is a function of y's token multiset only.
    """
    validate_sequence(y, config.vocab.size, config.max_len)
    c_intent, c_compat, c_incompat, c_distract = _counts(config, scenario, y)
    w = config.weights
    raw_sa = (1.0 + w.sa_gain * (c_intent / config.k)
              - w.incompat_penalty * c_incompat
              - w.distractor_penalty * c_distract)
    raw_pc = (1.0 + w.pc_gain * min(c_compat, w.pc_cap)
              - w.pc_incompat_penalty * c_incompat)
    sa, pc = raw_sa, raw_pc
    if rng is not None and config.noise_sigma > 0:
        sa = sa + config.noise_sigma * rng.standard_normal()
        pc = pc + config.noise_sigma * rng.standard_normal()
    breakdown = ScoreBreakdown(c_intent=c_intent, c_compat=c_compat,
                               c_incompat=c_incompat, c_distract=c_distract,
                               raw_sa=raw_sa, raw_pc=raw_pc)
    return RewardScore(sa=likert_clamp(sa), pc=likert_clamp(pc)), breakdown


def _multiset_count(vocab_size: int, length: int) -> int:
    return math.comb(vocab_size + length - 1, length)


def enumerate_multisets(config: EnvConfig) -> Iterator[TokenSeq]:
    """All sorted token multisets of size exactly max_len, lexicographic order."""
    n = _multiset_count(config.vocab.size, config.max_len)
    if n > ENUMERATION_BOUND:
        raise EnumerationBoundError(
            f"{n} multisets exceeds the enumeration bound {ENUMERATION_BOUND}")
    return combinations_with_replacement(range(config.vocab.size), config.max_len)


def _objective_value(objective: str, sc: RewardScore,
                     weights: WeightPair | None) -> float:
    if objective == OBJECTIVE_SA:
        return sc.sa
    if objective == OBJECTIVE_PC:
        return sc.pc
    if objective == OBJECTIVE_JOINT:
        return 1.0 if (sc.sa >= 4.0 and sc.pc >= 4.0) else 0.0
    if objective == OBJECTIVE_COMPOSITE:
        if weights is None:
            raise ValueError("composite objective requires a WeightPair")
        return weights.w_sa * sc.sa + weights.w_pc * sc.pc
    raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")


def brute_force_best(config: EnvConfig, scenario: Scenario, objective: str,
                     weights: WeightPair | None = None) -> tuple[TokenSeq, RewardScore]:
    """Exhaustive maximization of an objective over all size-L multisets.

    Noiseless scoring; ties resolve to the lexicographically smallest sorted
    multiset (guaranteed by enumeration order plus strict improvement).
    """
    best_y: TokenSeq | None = None
    best_score: RewardScore | None = None
    best_val = -math.inf
    for y in enumerate_multisets(config):
        sc, _ = score(config, scenario, y, rng=None)
        val = _objective_value(objective, sc, weights)
        if val > best_val:
            best_val, best_y, best_score = val, y, sc
    assert best_y is not None and best_score is not None
    return best_y, best_score


@dataclass(frozen=True)
class ConflictCertificate:
    """Oracle-established facts about the sa/pc trade-off for one scenario."""

    max_sa: float
    best_pc_among_sa_optima: float
    max_pc: float
    best_sa_among_pc_optima: float
    joint_multiset: TokenSeq | None   # witness with sa >= 4 and pc = 5, if any
    joint_score: RewardScore | None


def conflict_certificate(config: EnvConfig, scenario: Scenario) -> ConflictCertificate:
    """One enumeration pass establishing the conflict structure."""
    max_sa = max_pc = -math.inf
    pc_at_sa_opt = sa_at_pc_opt = -math.inf
    joint_y: TokenSeq | None = None
    joint_sc: RewardScore | None = None
    for y in enumerate_multisets(config):
        sc, _ = score(config, scenario, y, rng=None)
        if sc.sa > max_sa:
            max_sa, pc_at_sa_opt = sc.sa, sc.pc
        elif sc.sa == max_sa:
            pc_at_sa_opt = max(pc_at_sa_opt, sc.pc)
        if sc.pc > max_pc:
            max_pc, sa_at_pc_opt = sc.pc, sc.sa
        elif sc.pc == max_pc:
            sa_at_pc_opt = max(sa_at_pc_opt, sc.sa)
        if joint_y is None and sc.sa >= 4.0 and sc.pc == 5.0:
            joint_y, joint_sc = y, sc
    return ConflictCertificate(
        max_sa=max_sa, best_pc_among_sa_optima=pc_at_sa_opt,
        max_pc=max_pc, best_sa_among_pc_optima=sa_at_pc_opt,
        joint_multiset=joint_y, joint_score=joint_sc,
    )


def dump_enumeration_csv(config: EnvConfig, scenario: Scenario) -> str:
    """Full enumeration as CSV (multiset, sa, pc) for audit."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["multiset", "sa", "pc"])
    for y in enumerate_multisets(config):
        sc, _ = score(config, scenario, y, rng=None)
        writer.writerow([" ".join(str(t) for t in y), repr(sc.sa), repr(sc.pc)])
    return buf.getvalue()


def make_sft_corpus(config: EnvConfig, scenarios: list[Scenario],
                    rng: np.random.Generator | None = None) -> list[SftExample]:
    """Supervised corpus: each target is the joint-optimal multiset, sorted.

    Targets are deterministic given the scenario (oracle plus lexicographic
    tie-break); the rng parameter is accepted for interface symmetry with the
    other factories but not consumed.
    """
    corpus: list[SftExample] = []
    cache: dict[tuple[int, frozenset[int]], TokenSeq] = {}
    for sc in scenarios:
        key = (sc.class_id, sc.intent_tokens)
        if key not in cache:
            best_y, _ = brute_force_best(config, sc, OBJECTIVE_JOINT)
            cache[key] = tuple(sorted(best_y))
        corpus.append(SftExample(x=sc.prompt, y_target=cache[key]))
    return corpus
