"""RNG plumbing and worker-count helpers."""

import numpy as np
import pytest

from densflow import utils


def test_as_rng_accepts_seed_generator_and_none():
    g = np.random.default_rng(5)
    assert utils.as_rng(g) is g
    a = utils.as_rng(5).uniform()
    b = utils.as_rng(5).uniform()
    assert a == b
    assert isinstance(utils.as_rng(None), np.random.Generator)


def test_spawn_rngs_deterministic_and_independent():
    first = [g.uniform() for g in utils.spawn_rngs(np.random.default_rng(3), 8)]
    second = [g.uniform() for g in utils.spawn_rngs(np.random.default_rng(3), 8)]
    assert first == second
    assert len(set(first)) == 8
    # Spawning again from the same parent yields fresh children.
    parent = np.random.default_rng(3)
    utils.spawn_rngs(parent, 8)
    third = [g.uniform() for g in utils.spawn_rngs(parent, 8)]
    assert not set(third) & set(first)


def test_worker_count_env_override(monkeypatch):
    monkeypatch.setenv(utils.THREADS_ENV, "3")
    assert utils.worker_count() == 3
    monkeypatch.setenv(utils.THREADS_ENV, "0")
    assert utils.worker_count() >= 1
    monkeypatch.setenv(utils.THREADS_ENV, "not-a-number")
    assert utils.worker_count() >= 1
    monkeypatch.delenv(utils.THREADS_ENV)
    assert utils.worker_count() >= 1


@pytest.mark.parametrize("threads", ["1", "4"])
def test_map_workers_preserves_order(monkeypatch, threads):
    monkeypatch.setenv(utils.THREADS_ENV, threads)
    out = utils.map_workers(lambda v: v * v, range(20))
    assert out == [v * v for v in range(20)]
