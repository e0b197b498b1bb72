"""Reward components, the scheduled two-objective weighting, and run metrics.

A candidate rewrite is scored on two 1-5 Likert axes: semantic adherence (sa,
does the output keep the requested content) and physical plausibility (pc).
The scalar training reward is a convex combination whose weights can follow a
step-dependent schedule that starts fully on sa and decays exponentially
toward pc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

MODE_DYNAMIC = "dynamic"
MODE_STATIC = "static"
MODE_SA_ONLY = "sa_only"
MODE_PC_ONLY = "pc_only"
SCHEDULE_MODES = (MODE_DYNAMIC, MODE_STATIC, MODE_SA_ONLY, MODE_PC_ONLY)

LIKERT_MIN = 1.0
LIKERT_MAX = 5.0

METRICS_CSV_HEADER = "sa_pct,pc_pct,joint_pct,avg_sa,avg_pc,n"


@dataclass(frozen=True)
class RewardScore:
    """One (sa, pc) score pair, both already within Likert bounds."""

    sa: float
    pc: float

    def __post_init__(self) -> None:
        for name, v in (("sa", self.sa), ("pc", self.pc)):
            if not (LIKERT_MIN <= v <= LIKERT_MAX):
                raise ValueError(f"{name}={v} outside Likert range [1, 5]")


@dataclass(frozen=True)
class WeightPair:
    """Convex weights for the two objectives; pc weight is 1 - sa weight."""

    w_sa: float
    w_pc: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.w_sa <= 1.0 and 0.0 <= self.w_pc <= 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if self.w_sa + self.w_pc != 1.0:
            raise ValueError("weights must sum to exactly 1")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Reward-mode plus decay parameters over a fixed training horizon."""

    mode: str
    total_steps: int
    alpha: float = 3.0

    def __post_init__(self) -> None:
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"mode must be one of {SCHEDULE_MODES}, got {self.mode!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.mode == MODE_DYNAMIC and not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError("alpha must be finite and positive for the dynamic mode")


@dataclass(frozen=True)
class MetricsSummary:
    """Threshold pass rates and score averages over an evaluation set."""

    sa_pct: float
    pc_pct: float
    joint_pct: float
    avg_sa: float
    avg_pc: float
    n: int

    def csv_row(self) -> str:
        return (f"{self.sa_pct!r},{self.pc_pct!r},{self.joint_pct!r},"
                f"{self.avg_sa!r},{self.avg_pc!r},{self.n}")


def weights_at(schedule: CurriculumSchedule, step: int) -> WeightPair:
    """Objective weights at a training step.

    Dynamic mode decays the sa weight as exp(-alpha * step / total_steps); the
    pc weight is always the complement, so the pair sums to exactly 1.
    """
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.mode == MODE_DYNAMIC:
        w_sa = math.exp(-schedule.alpha * step / schedule.total_steps)
    elif schedule.mode == MODE_STATIC:
        w_sa = 0.5
    elif schedule.mode == MODE_SA_ONLY:
        w_sa = 1.0
    else:
        w_sa = 0.0
    return WeightPair(w_sa=w_sa, w_pc=1.0 - w_sa)


def composite(weights: WeightPair, score: RewardScore) -> float:
    """Scalar reward: w_sa * sa + w_pc * pc."""
    return weights.w_sa * score.sa + weights.w_pc * score.pc


def likert_clamp(raw: float) -> float:
    """Clamp a raw score into the 1-5 Likert range."""
    if not math.isfinite(raw):
        raise ValueError(f"raw score must be finite, got {raw}")
    return min(LIKERT_MAX, max(LIKERT_MIN, raw))


def summarize(scores: Sequence[RewardScore] | Iterable[RewardScore],
              threshold: float = 4.0) -> MetricsSummary:
    """Pass rates at the threshold (sa, pc, joint) and mean scores."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot summarize an empty score list")
    n = len(scores)
    n_sa = sum(1 for s in scores if s.sa >= threshold)
    n_pc = sum(1 for s in scores if s.pc >= threshold)
    n_joint = sum(1 for s in scores if s.sa >= threshold and s.pc >= threshold)
    return MetricsSummary(
        sa_pct=100.0 * n_sa / n,
        pc_pct=100.0 * n_pc / n,
        joint_pct=100.0 * n_joint / n,
        avg_sa=sum(s.sa for s in scores) / n,
        avg_pc=sum(s.pc for s in scores) / n,
        n=n,
    )
