"""Shared fixtures: tiny model configs and hand-built sessions."""

import numpy as np
import pytest

from turnsat.data import Session, Turn
from turnsat.model import ModelConfig


def random_turn(rng, vocab_size, empty_response=False):
    nu = int(rng.integers(1, 5))
    nr = 0 if empty_response else int(rng.integers(1, 5))
    u = tuple(int(x) for x in rng.integers(0, vocab_size, nu))
    r = tuple(int(x) for x in rng.integers(0, vocab_size, nr))
    return Turn(u, r, " ".join(f"w{i}" for i in u), " ".join(f"w{i}" for i in r))


def random_session(rng, vocab_size, n_turns=None, targeted=None, label=None):
    n = n_turns if n_turns is not None else int(rng.integers(1, 6))
    turns = tuple(random_turn(rng, vocab_size) for _ in range(n))
    t = targeted if targeted is not None else int(rng.integers(0, n))
    return Session(turns=turns, targeted_index=t, skill="sk", label=label)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=30, embed_dim=4, gru_hidden=3, gru_layers=1,
                       bidirectional=True, head_hidden=4, context_T=2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
