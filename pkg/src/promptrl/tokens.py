"""Discrete token universe: vocabulary, prompts, and scenarios.

Token ids are dense integers from 0. Roles are assigned contiguously (intent
ids first, then physics, then distractor) so tests and the environment can
reason about role membership by range. A prompt or rewrite is a plain tuple of
token ids; ``validate_sequence`` enforces the shared invariants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROLE_INTENT = "intent"
ROLE_PHYSICS = "physics"
ROLE_DISTRACTOR = "distractor"

VOCAB_FORMAT_VERSION = 1

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Token universe with one role per id and a class per physics token."""

    size: int
    roles: tuple[str, ...]                 # role per token id
    physics_class: tuple[int | None, ...]  # class per id, None off the physics range

    def __post_init__(self) -> None:
        if self.size < 1 or len(self.roles) != self.size or len(self.physics_class) != self.size:
            raise ValueError("vocab arrays must cover exactly [0, size)")
        for tok in range(self.size):
            role = self.roles[tok]
            if role not in (ROLE_INTENT, ROLE_PHYSICS, ROLE_DISTRACTOR):
                raise ValueError(f"unknown role {role!r} for token {tok}")
            has_class = self.physics_class[tok] is not None
            if has_class != (role == ROLE_PHYSICS):
                raise ValueError(f"physics_class defined iff role is physics (token {tok})")

    @property
    def intent_ids(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.size) if self.roles[t] == ROLE_INTENT)

    @property
    def physics_ids(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.size) if self.roles[t] == ROLE_PHYSICS)

    @property
    def distractor_ids(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.size) if self.roles[t] == ROLE_DISTRACTOR)

    @property
    def n_classes(self) -> int:
        classes = {c for c in self.physics_class if c is not None}
        return len(classes)

    def role_of(self, token: int) -> str:
        return self.roles[token]

    def class_of(self, token: int) -> int:
        cls = self.physics_class[token]
        if cls is None:
            raise ValueError(f"token {token} has no physics class")
        return cls

    def to_json(self) -> str:
        doc = {
            "version": VOCAB_FORMAT_VERSION,
            "size": self.size,
            "roles": list(self.roles),
            "physics_class": list(self.physics_class),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        doc = json.loads(text)
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocab format version {doc.get('version')!r}")
        return cls(
            size=int(doc["size"]),
            roles=tuple(doc["roles"]),
            physics_class=tuple(doc["physics_class"]),
        )


@dataclass(frozen=True)
class Scenario:
    """One task instance: a hidden physics class plus the visible intent prompt."""

    class_id: int
    intent_tokens: frozenset[int]
    prompt: TokenSeq

    def __post_init__(self) -> None:
        if tuple(sorted(self.intent_tokens)) != self.prompt:
            raise ValueError("prompt must be exactly the sorted intent tokens")
        if len(self.prompt) != len(set(self.prompt)):
            raise ValueError("prompt tokens must be distinct")


def validate_sequence(tokens: TokenSeq, vocab_size: int, max_len: int) -> None:
    """Raise ValueError unless every id is in [0, vocab_size) and length <= max_len."""
    if len(tokens) > max_len:
        raise ValueError(f"sequence length {len(tokens)} exceeds budget {max_len}")
    for tok in tokens:
        if not (0 <= tok < vocab_size):
            raise ValueError(f"token id {tok} outside vocab of size {vocab_size}")


def build_vocab(
    n_intent: int,
    n_physics: int,
    n_distractor: int,
    n_classes: int,
    seed: int = 0,
) -> Vocab:
    """Build a vocabulary with contiguous role blocks.

    Intent ids come first, then physics, then distractor; physics tokens are
    split into equal contiguous class blocks. The layout is fully forced by the
    counts, so ``seed`` does not influence the result; it is kept so callers can
    treat vocabulary construction like the other seeded factories.
    """
    if min(n_intent, n_physics, n_distractor, n_classes) < 1:
        raise ValueError("all counts must be >= 1")
    if n_physics % n_classes != 0:
        raise ValueError(f"n_physics={n_physics} not divisible by n_classes={n_classes}")
    per_class = n_physics // n_classes
    roles: list[str] = []
    classes: list[int | None] = []
    roles += [ROLE_INTENT] * n_intent
    classes += [None] * n_intent
    for tok in range(n_physics):
        roles.append(ROLE_PHYSICS)
        classes.append(tok // per_class)
    roles += [ROLE_DISTRACTOR] * n_distractor
    classes += [None] * n_distractor
    return Vocab(size=n_intent + n_physics + n_distractor,
                 roles=tuple(roles), physics_class=tuple(classes))


def sample_scenario(vocab: Vocab, k: int, rng: np.random.Generator) -> Scenario:
    """Draw a scenario: a uniform class id and k distinct intent tokens."""
    intent_pool = vocab.intent_ids
    if not (1 <= k <= len(intent_pool)):
        raise ValueError(f"k={k} must be in [1, {len(intent_pool)}]")
    n_classes = vocab.n_classes
    class_id = int(rng.integers(0, n_classes))
    chosen = rng.choice(len(intent_pool), size=k, replace=False)
    intents = frozenset(intent_pool[int(i)] for i in chosen)
    return Scenario(class_id=class_id, intent_tokens=intents,
                    prompt=tuple(sorted(intents)))
