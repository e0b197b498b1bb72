import math

import pytest
from hypothesis import given, strategies as st

from promptrl.reward import (MODE_DYNAMIC, MODE_PC_ONLY, MODE_SA_ONLY, MODE_STATIC,
                             CurriculumSchedule, RewardScore, WeightPair, composite,
                             likert_clamp, summarize, weights_at)

likert = st.floats(min_value=1.0, max_value=5.0, allow_nan=False)


def test_dynamic_weights_start_at_one():
    sched = CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=100, alpha=3.0)
    w = weights_at(sched, 0)
    assert w.w_sa == 1.0 and w.w_pc == 0.0


def test_dynamic_weights_midpoint():
    sched = CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=100, alpha=3.0)
    w = weights_at(sched, 50)
    assert w.w_sa == pytest.approx(math.exp(-1.5), abs=1e-15)
    assert w.w_pc == pytest.approx(1.0 - math.exp(-1.5), abs=1e-15)


def test_static_weights_everywhere():
    sched = CurriculumSchedule(mode=MODE_STATIC, total_steps=10)
    for t in range(11):
        assert weights_at(sched, t) == WeightPair(0.5, 0.5)


def test_single_objective_weights():
    sa = CurriculumSchedule(mode=MODE_SA_ONLY, total_steps=5)
    pc = CurriculumSchedule(mode=MODE_PC_ONLY, total_steps=5)
    assert weights_at(sa, 3) == WeightPair(1.0, 0.0)
    assert weights_at(pc, 3) == WeightPair(0.0, 1.0)


def test_weights_reject_step_past_horizon():
    sched = CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=10)
    with pytest.raises(ValueError):
        weights_at(sched, 11)


def test_dynamic_strictly_decreasing_and_sums_exact():
    sched = CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=400, alpha=3.0)
    prev = math.inf
    for t in range(401):
        w = weights_at(sched, t)
        assert w.w_sa + w.w_pc == 1.0
        assert w.w_sa < prev
        prev = w.w_sa


def test_schedule_validation():
    with pytest.raises(ValueError):
        CurriculumSchedule(mode="bogus", total_steps=10)
    with pytest.raises(ValueError):
        CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=10, alpha=0.0)
    with pytest.raises(ValueError):
        CurriculumSchedule(mode=MODE_DYNAMIC, total_steps=0)


def test_composite_identity_when_scores_equal():
    for w in (WeightPair(1.0, 0.0), WeightPair(0.25, 0.75), WeightPair(0.5, 0.5)):
        assert composite(w, RewardScore(3.3, 3.3)) == pytest.approx(3.3)


def test_composite_projection():
    assert composite(WeightPair(1.0, 0.0), RewardScore(5.0, 1.0)) == 5.0


def test_composite_specific_value():
    w = WeightPair(0.223130, 1.0 - 0.223130)
    assert composite(w, RewardScore(4.0, 5.0)) == pytest.approx(4.776870, abs=1e-9)


@given(likert, likert, likert, likert, st.floats(0.0, 1.0, allow_nan=False))
def test_composite_monotone(sa1, sa2, pc, pc2, w_sa):
    w = WeightPair(w_sa, 1.0 - w_sa)
    lo, hi = sorted((sa1, sa2))
    assert composite(w, RewardScore(lo, pc)) <= composite(w, RewardScore(hi, pc)) + 1e-12
    lo, hi = sorted((pc, pc2))
    assert composite(w, RewardScore(sa1, lo)) <= composite(w, RewardScore(sa1, hi)) + 1e-12


@given(likert, likert)
def test_composite_balanced_swap_invariant(sa, pc):
    w = WeightPair(0.5, 0.5)
    assert composite(w, RewardScore(sa, pc)) == composite(w, RewardScore(pc, sa))


def test_likert_clamp():
    assert likert_clamp(7.2) == 5.0
    assert likert_clamp(-3.0) == 1.0
    assert likert_clamp(3.4) == 3.4
    with pytest.raises(ValueError):
        likert_clamp(float("nan"))
    with pytest.raises(ValueError):
        likert_clamp(float("inf"))


def test_summarize_hand_counted():
    scores = [RewardScore(5, 5), RewardScore(4, 3), RewardScore(3, 5)]
    m = summarize(scores)
    assert m.sa_pct == pytest.approx(200 / 3)
    assert m.pc_pct == pytest.approx(200 / 3)
    assert m.joint_pct == pytest.approx(100 / 3)
    assert m.avg_sa == pytest.approx(4.0)
    assert m.avg_pc == pytest.approx(13 / 3)
    assert m.n == 3


def test_summarize_all_perfect():
    m = summarize([RewardScore(5, 5)] * 4)
    assert (m.sa_pct, m.pc_pct, m.joint_pct) == (100.0, 100.0, 100.0)
    assert (m.avg_sa, m.avg_pc) == (5.0, 5.0)


def test_summarize_rejects_empty():
    with pytest.raises(ValueError):
        summarize([])


def test_summary_csv_row_schema():
    m = summarize([RewardScore(5, 5), RewardScore(3, 3)])
    row = m.csv_row()
    assert len(row.split(",")) == 6


@given(st.lists(st.tuples(likert, likert), min_size=1, max_size=40))
def test_joint_never_exceeds_marginals(pairs):
    m = summarize([RewardScore(sa, pc) for sa, pc in pairs])
    assert m.joint_pct <= min(m.sa_pct, m.pc_pct) + 1e-9
    assert 1.0 <= m.avg_sa <= 5.0 and 1.0 <= m.avg_pc <= 5.0


def test_reward_score_bounds():
    with pytest.raises(ValueError):
        RewardScore(sa=6.0, pc=3.0)
    with pytest.raises(ValueError):
        RewardScore(sa=3.0, pc=0.5)
