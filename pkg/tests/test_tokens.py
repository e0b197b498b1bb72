import numpy as np
import pytest

from promptrl.tokens import (ROLE_DISTRACTOR, ROLE_INTENT, ROLE_PHYSICS, Scenario, Vocab,
                             build_vocab, sample_scenario, validate_sequence)


def test_build_vocab_default_layout():
    vocab = build_vocab(4, 8, 8, 2, seed=7)
    assert vocab.size == 20
    assert vocab.intent_ids == (0, 1, 2, 3)
    assert vocab.physics_ids == tuple(range(4, 12))
    assert vocab.distractor_ids == tuple(range(12, 20))
    assert [vocab.physics_class[t] for t in range(4, 12)] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_build_vocab_minimal():
    vocab = build_vocab(1, 1, 1, 1, seed=123)
    assert vocab.size == 3
    assert vocab.roles == (ROLE_INTENT, ROLE_PHYSICS, ROLE_DISTRACTOR)


def test_build_vocab_deterministic():
    a = build_vocab(4, 8, 8, 2, seed=7)
    b = build_vocab(4, 8, 8, 2, seed=7)
    assert a == b
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("counts", [(0, 8, 8, 2), (4, 0, 8, 2), (4, 8, 0, 2), (4, 8, 8, 0)])
def test_build_vocab_rejects_zero_counts(counts):
    with pytest.raises(ValueError):
        build_vocab(*counts)


def test_build_vocab_rejects_indivisible_classes():
    with pytest.raises(ValueError):
        build_vocab(4, 7, 8, 2)


def test_vocab_json_round_trip():
    vocab = build_vocab(3, 6, 5, 3, seed=1)
    assert Vocab.from_json(vocab.to_json()) == vocab


def test_sample_scenario_full_intent_pool():
    vocab = build_vocab(4, 8, 8, 2)
    scenario = sample_scenario(vocab, 4, np.random.default_rng(0))
    assert scenario.intent_tokens == frozenset({0, 1, 2, 3})
    assert scenario.prompt == (0, 1, 2, 3)


def test_sample_scenario_rejects_bad_k():
    vocab = build_vocab(4, 8, 8, 2)
    with pytest.raises(ValueError):
        sample_scenario(vocab, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_scenario(vocab, 5, np.random.default_rng(0))


def test_sample_scenario_reproducible():
    vocab = build_vocab(8, 8, 8, 2)
    a = sample_scenario(vocab, 3, np.random.default_rng(42))
    b = sample_scenario(vocab, 3, np.random.default_rng(42))
    assert a == b


def test_sample_scenario_prompt_valid_against_vocab():
    vocab = build_vocab(8, 8, 8, 4)
    rng = np.random.default_rng(5)
    for _ in range(50):
        sc = sample_scenario(vocab, 3, rng)
        validate_sequence(sc.prompt, vocab.size, len(sc.prompt))
        assert all(vocab.roles[t] == ROLE_INTENT for t in sc.prompt)
        assert 0 <= sc.class_id < vocab.n_classes


def test_validate_sequence_bounds():
    validate_sequence((0, 1, 2), 3, 5)
    with pytest.raises(ValueError):
        validate_sequence((0, 3), 3, 5)
    with pytest.raises(ValueError):
        validate_sequence((0,) * 6, 3, 5)


def test_scenario_invariants():
    with pytest.raises(ValueError):
        Scenario(class_id=0, intent_tokens=frozenset({1, 2}), prompt=(2, 1))
