"""Deterministic RNG stream derivation.

Every random draw in a run is taken from a generator derived from the master
seed and a structured key (stream constant plus indices such as step, batch
slot, candidate slot). Derivation is a pure function, so results do not depend
on thread scheduling or parallelism degree.

Evaluator-side noise is the one exception: it is keyed by the score-request id
alone (no master seed), so an out-of-process evaluator that only sees requests
can reproduce it exactly.
"""

from __future__ import annotations

import numpy as np

# Stream tags. These are wire-level constants: changing them changes every run.
STREAM_SAMPLE = 0xC1        # policy rollout sampling, keyed (step, batch, candidate)
STREAM_SFT_SHUFFLE = 0xC2   # per-epoch corpus shuffling
STREAM_SFT_SCENARIO = 0xC3  # supervised-corpus scenario sampling
STREAM_EVAL_SCENARIO = 0xC4  # held-out evaluation scenario sampling
STREAM_QUERY_INTENT = 0xC5  # rollout query intent-set sampling, keyed (step, batch)
STREAM_POLICY_INIT = 0xC6   # parameter initialisation

# Entropy root for evaluator noise streams (independent of the master seed).
NOISE_ENTROPY = 0x5C0E_11FE

# Mixing salt for deriving a scenario class from a query serial number.
CLASS_SALT = 0x9E37_79B9_7F4A_7C15

_U64 = (1 << 64) - 1


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, key)."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def noise_rng(request_id: int) -> np.random.Generator:
    """Generator for score-noise of one request, derived from the id only."""
    ss = np.random.SeedSequence(entropy=NOISE_ENTROPY, spawn_key=(request_id,))
    return np.random.Generator(np.random.PCG64(ss))


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer; uniform-ish mixing of a 64-bit integer."""
    x = (x + 0x9E37_79B9_7F4A_7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58_476D_1CE4_E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D0_49BB_1331_11EB) & _U64
    return x ^ (x >> 31)


def class_for_query(query_serial: int, n_classes: int) -> int:
    """Scenario class for a rollout query, derivable by both trainer and evaluator.

    The wire protocol carries only (id, original, rewritten, step), so the class
    of a training query must be a shared pure function of information both sides
    hold. The query serial number (request id with the candidate bits stripped)
    is that information.
    """
    return splitmix64(query_serial ^ CLASS_SALT) % n_classes


# Low bits of a score-request id hold the candidate slot; the rest is the
# query serial (step * batch_size + batch slot). Both sides of the wire rely
# on this layout.
CANDIDATE_BITS = 16
MAX_CANDIDATES = 1 << CANDIDATE_BITS


def make_request_id(step: int, batch_size: int, batch_index: int,
                    candidate_index: int) -> int:
    if not (0 <= candidate_index < MAX_CANDIDATES):
        raise ValueError(f"candidate index {candidate_index} exceeds {MAX_CANDIDATES - 1}")
    serial = step * batch_size + batch_index
    rid = (serial << CANDIDATE_BITS) | candidate_index
    if rid > _U64:
        raise ValueError("request id overflows 64 bits")
    return rid


def query_serial_of(request_id: int) -> int:
    return request_id >> CANDIDATE_BITS
