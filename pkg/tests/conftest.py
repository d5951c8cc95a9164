from __future__ import annotations

import pytest

from focusground.oracle import OracleKnobs, OraclePolicy
from focusground.simenv import SimConfig, generate_screens


def oracle_for(pairs, knobs: OracleKnobs | None = None, seed: int = 0) -> OraclePolicy:
    worlds = {scr.id: scr.world() for scr, _ in pairs}
    return OraclePolicy(worlds, knobs or OracleKnobs(), seed=seed)


@pytest.fixture(scope="session")
def sim_pairs():
    return generate_screens(SimConfig(), 40, seed=7)


@pytest.fixture(scope="session")
def sim_samples(sim_pairs):
    return [s for _, s in sim_pairs]


@pytest.fixture
def oracle(sim_pairs):
    return oracle_for(sim_pairs)
