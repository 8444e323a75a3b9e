"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from mmsink import engine, seqmodel
from mmsink.cachepolicy import CachePolicy
from mmsink.seqmodel import Token


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {outcome}")


@pytest.fixture(scope="session")
def tiny_config() -> engine.ModelConfig:
    """Smallest config the gradient checks run on."""
    return engine.ModelConfig(
        layers=1, heads=1, d_model=8, d_ff=16, v_text=12, m=4,
        q_queries=2, d_feat=4, max_positions=160, seed=5,
    )


@pytest.fixture(scope="session")
def small_config() -> engine.ModelConfig:
    return engine.ModelConfig(
        layers=2, heads=2, d_model=32, d_ff=64, v_text=32, m=4,
        q_queries=3, d_feat=4, max_positions=4096, seed=3,
    )


@pytest.fixture(scope="session")
def small_model(small_config) -> engine.Model:
    return engine.Model.init(small_config)


@pytest.fixture(scope="session")
def small_prompt(small_config) -> seqmodel.MultimodalSequence:
    story = seqmodel.synth_stories(
        1, items_per_story=2, rng_seed=9, d_feat=small_config.d_feat
    )[0]
    return seqmodel.prompt_sequence(
        story, 1, m=small_config.m, v_text=small_config.v_text
    )


def make_stream(rng: np.random.Generator, m: int, length: int, v_text: int = 32) -> list[Token]:
    """Random structurally valid token stream of at least ``length`` tokens.

    May end inside an image block (an in-progress generation prefix).
    """
    tokens: list[Token] = [Token.bos()]
    while len(tokens) < length:
        choice = rng.integers(4)
        if choice == 0:
            tokens.append(Token.boi())
            tokens.extend(Token.img(s) for s in range(m))
            tokens.append(Token.eoi())
        elif choice == 1:
            tokens.append(Token.punct(int(rng.integers(5))))
        else:
            tokens.append(Token.word(int(rng.integers(v_text))))
    return tokens[:length]


def all_policies(w: int, n_sink: int = 2, k_head: int = 1, k_tail: int = 2) -> list[CachePolicy]:
    return [
        CachePolicy.dense(),
        CachePolicy.windowed(w),
        CachePolicy.sink(n_sink, w),
        CachePolicy.mmsink(n_sink, k_head, k_tail, w),
    ]
