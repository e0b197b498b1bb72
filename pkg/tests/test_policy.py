import itertools
import math

import numpy as np
import pytest

from promptrl import policy as P

VOCAB, MAXLEN, DIM = 20, 5, 16


def tiny_params(rng, vocab=VOCAB, maxlen=MAXLEN, dim=DIM, scale=0.3):
    return P.init_params(P.PolicyConfig(vocab, maxlen, dim), rng, scale)


def reference_position_probs(params, x):
    """Independent oracle: per-position softmax from first principles."""
    if x:
        ctx = np.mean([params.input_embed[t] for t in x], axis=0)
    else:
        ctx = np.zeros(params.input_embed.shape[1])
    rows = []
    for t in range(params.pos_embed.shape[0]):
        logits = (ctx + params.pos_embed[t]) @ params.output_proj + params.output_bias
        e = [math.exp(v) for v in logits]
        z = sum(e)
        rows.append([v / z for v in e])
    return rows


def fd_gradient(f, params, coords, h=1e-5):
    vec = params.to_vector()
    out = []
    for i in coords:
        vp, vm = vec.copy(), vec.copy()
        vp[i] += h
        vm[i] -= h
        out.append((f(params.from_vector(vp)) - f(params.from_vector(vm))) / (2 * h))
    return np.array(out)


def rel_vec_error(a, b):
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1.0)
    return float(np.linalg.norm(a - b)) / denom


# --- context encoding ---

def test_context_singleton_is_embedding_row():
    params = tiny_params(np.random.default_rng(0))
    np.testing.assert_array_equal(P.context_encode(params, (7,)), params.input_embed[7])


def test_context_empty_is_zero():
    params = tiny_params(np.random.default_rng(0))
    np.testing.assert_array_equal(P.context_encode(params, ()), np.zeros(DIM))


def test_context_two_tokens_mean():
    params = tiny_params(np.random.default_rng(1))
    want = (params.input_embed[2] + params.input_embed[9]) / 2
    np.testing.assert_allclose(P.context_encode(params, (2, 9)), want, rtol=0, atol=1e-15)


# --- step logits ---

def test_zero_params_give_uniform():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    logits = P.step_logits(params, P.context_encode(params, (0, 1)), 0)
    np.testing.assert_array_equal(logits, np.zeros(VOCAB))
    probs = P.softmax(logits)
    np.testing.assert_allclose(probs, np.full(VOCAB, 1 / VOCAB))


def test_bias_only_logits_equal_bias_everywhere():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    params.output_bias[:] = np.arange(VOCAB, dtype=float)
    ctx = P.context_encode(params, (0, 1, 2))
    for pos in range(MAXLEN):
        np.testing.assert_array_equal(P.step_logits(params, ctx, pos), params.output_bias)


def test_step_logits_position_bounds():
    params = tiny_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        P.step_logits(params, np.zeros(DIM), MAXLEN)


def test_softmax_matches_high_precision_reference():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    params = tiny_params(np.random.default_rng(3), scale=0.5)
    x = (0, 4, 11)
    ours = P.softmax(P.all_logits(params, x))
    ctx = P.context_encode(params, x)
    for t in range(MAXLEN):
        logits = (ctx + params.pos_embed[t]) @ params.output_proj + params.output_bias
        exact = [mpmath.exp(mpmath.mpf(repr(float(v)))) for v in logits]
        z = sum(exact, mpmath.mpf(0))
        for v in range(VOCAB):
            assert abs(ours[t, v] - float(exact[v] / z)) < 1e-12


# --- sequence log-probability ---

def test_logprob_uniform_case():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    assert P.logprob(params, (0, 1), (3, 4, 5)) == pytest.approx(3 * math.log(1 / 20), abs=1e-12)


def test_logprob_empty_target():
    params = tiny_params(np.random.default_rng(0))
    assert P.logprob(params, (0, 1), ()) == 0.0


def test_logprob_matches_materialized_distributions():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params = tiny_params(rng, scale=0.4)
        x = tuple(rng.integers(0, VOCAB, size=3))
        y = tuple(int(v) for v in rng.integers(0, VOCAB, size=MAXLEN))
        rows = reference_position_probs(params, x)
        want = sum(math.log(rows[t][y[t]]) for t in range(len(y)))
        assert P.logprob(params, x, y) == pytest.approx(want, abs=1e-10)


def test_logprob_rejects_overlong_target():
    params = tiny_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        P.logprob(params, (0,), tuple(range(MAXLEN + 1)))


def test_sequence_probability_normalizes():
    # Exhaustive normalization oracle on a tiny configuration.
    rng = np.random.default_rng(11)
    params = tiny_params(rng, vocab=4, maxlen=3, dim=5, scale=0.8)
    x = (1, 2)
    total = 0.0
    for y in itertools.product(range(4), repeat=3):
        total += math.exp(P.logprob(params, x, y))
    assert total == pytest.approx(1.0, abs=1e-10)


# --- sampling ---

def test_greedy_bias_only_repeats_argmax():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    params.output_bias[13] = 2.0
    y = P.sample(params, (0,), np.random.default_rng(0), temperature=0.0)
    assert y == (13,) * MAXLEN


def test_greedy_tie_break_lowest_id():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    y = P.sample(params, (0,), np.random.default_rng(0), temperature=0.0)
    assert y == (0,) * MAXLEN


def test_sample_deterministic_given_stream():
    params = tiny_params(np.random.default_rng(5))
    a = P.sample(params, (0, 1), np.random.default_rng(99), 1.0, 0.9)
    b = P.sample(params, (0, 1), np.random.default_rng(99), 1.0, 0.9)
    assert a == b


def test_sample_rejects_bad_knobs():
    params = tiny_params(np.random.default_rng(0))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        P.sample(params, (0,), rng, temperature=-0.1)
    with pytest.raises(ValueError):
        P.sample(params, (0,), rng, top_p=0.0)
    with pytest.raises(ValueError):
        P.sample(params, (0,), rng, top_p=1.5)


def test_sample_frequencies_match_softmax():
    # Monte Carlo vs the analytic distribution at position 0; fixed stream.
    rng = np.random.default_rng(21)
    params = tiny_params(rng, scale=0.4)
    x = (0, 3)
    probs = P.softmax(P.all_logits(params, x))[0]
    n = 10 ** 5
    draw_rng = np.random.default_rng(1234)
    counts = np.zeros(VOCAB)
    for _ in range(n):
        counts[P.sample(params, x, draw_rng, 1.0, 1.0)[0]] += 1
    freq = counts / n
    se = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(freq - probs) <= 3 * se + 1e-12)


def test_top_p_truncates_tail():
    params = P.PolicyParams.zeros(P.PolicyConfig(4, 2, 3))
    params.output_bias[:] = np.array([3.0, 2.0, -5.0, -5.0])
    rng = np.random.default_rng(0)
    seen = {P.sample(params, (), rng, 1.0, 0.9)[0] for _ in range(500)}
    assert seen <= {0, 1}


# --- gradients ---

def test_grad_logprob_finite_difference():
    rng = np.random.default_rng(31)
    for _ in range(5):
        params = tiny_params(rng, scale=0.4)
        x = tuple(int(v) for v in rng.integers(0, VOCAB, size=2))
        y = tuple(int(v) for v in rng.integers(0, VOCAB, size=MAXLEN))
        grad = P.grad_logprob(params, x, y).to_vector()
        coords = rng.choice(grad.size, size=20, replace=False)
        fd = fd_gradient(lambda p: P.logprob(p, x, y), params, coords)
        assert rel_vec_error(grad[coords], fd) < 1e-5


def test_grad_logprob_empty_target_zero():
    params = tiny_params(np.random.default_rng(0))
    grad = P.grad_logprob(params, (0, 1), ())
    assert all(np.all(a == 0) for a in grad.arrays())


def test_grad_bias_is_softmax_identity():
    rng = np.random.default_rng(41)
    params = tiny_params(rng, scale=0.5)
    x, y = (2, 5), (1, 8, 3)
    probs = P.softmax(P.all_logits(params, x))
    want = np.zeros(VOCAB)
    for t, tok in enumerate(y):
        onehot = np.zeros(VOCAB)
        onehot[tok] = 1.0
        want += onehot - probs[t]
    np.testing.assert_allclose(P.grad_logprob(params, x, y).output_bias, want, atol=1e-12)


# --- supervised loss and training ---

def test_sft_loss_uniform_value():
    params = P.PolicyParams.zeros(P.PolicyConfig(VOCAB, MAXLEN, DIM))
    batch = [P.SftExample(x=(0, 1), y_target=(2, 3, 4))] * 3
    loss, _ = P.sft_loss_and_grad(params, batch)
    assert loss == pytest.approx(3 * math.log(20), abs=1e-12)


def test_sft_loss_single_example_is_negative_logprob():
    params = tiny_params(np.random.default_rng(2))
    ex = P.SftExample(x=(0, 1), y_target=(4, 4, 9))
    loss, _ = P.sft_loss_and_grad(params, [ex])
    assert loss == pytest.approx(-P.logprob(params, ex.x, ex.y_target), abs=1e-12)


def test_sft_loss_rejects_empty_batch():
    params = tiny_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        P.sft_loss_and_grad(params, [])


def test_sft_loss_finite_difference():
    rng = np.random.default_rng(51)
    params = tiny_params(rng, scale=0.4)
    batch = [P.SftExample(x=tuple(int(v) for v in rng.integers(0, VOCAB, 2)),
                          y_target=tuple(int(v) for v in rng.integers(0, VOCAB, 4)))
             for _ in range(3)]
    _, grad = P.sft_loss_and_grad(params, batch)
    gvec = grad.to_vector()
    coords = rng.choice(gvec.size, size=20, replace=False)
    fd = fd_gradient(lambda p: P.sft_loss_and_grad(p, batch)[0], params, coords)
    assert rel_vec_error(gvec[coords], fd) < 1e-5


def test_sft_memorizes_single_example():
    rng = np.random.default_rng(61)
    params = tiny_params(rng)
    ex = P.SftExample(x=(0, 1, 2, 3), y_target=(0, 1, 2, 4, 4))
    result = P.sft_train(params, [ex], P.SftSettings(epochs=300, batch_size=1), seed=0)
    assert P.logprob(result.params, ex.x, ex.y_target) > math.log(0.9) * len(ex.y_target)


def test_sft_zero_lr_is_noop():
    rng = np.random.default_rng(71)
    params = tiny_params(rng)
    ex = P.SftExample(x=(0, 1), y_target=(2, 3))
    result = P.sft_train(params, [ex], P.SftSettings(epochs=3, batch_size=1, lr=0.0), seed=0)
    for before, after in zip(params.arrays(), result.params.arrays()):
        np.testing.assert_array_equal(before, after)


def test_sft_rejects_empty_corpus():
    params = tiny_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        P.sft_train(params, [], P.SftSettings(epochs=1), seed=0)


# --- checkpointing ---

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = tiny_params(np.random.default_rng(81))
    path = tmp_path / "policy.json"
    P.save_checkpoint(params, path)
    loaded = P.load_checkpoint(path)
    for a, b in zip(params.arrays(), loaded.arrays()):
        np.testing.assert_array_equal(a, b)
