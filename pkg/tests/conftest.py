from __future__ import annotations

import io

import pytest

from trajprompt.embedding import HashingEmbedder
from trajprompt.ingest import SegmentationConfig, parse_checkins, preprocess
from trajprompt.retrieval import RetrievalConfig, build_all_retrievals

from .helpers import embed_trajectories, synthetic_csv


@pytest.fixture(scope="session")
def synthetic_log() -> str:
    return synthetic_csv()


@pytest.fixture(scope="session")
def synthetic_split(synthetic_log):
    checkins, errors = parse_checkins(io.StringIO(synthetic_log))
    assert not errors
    return preprocess(checkins, SegmentationConfig())


@pytest.fixture(scope="session")
def synthetic_vectors(synthetic_split):
    return embed_trajectories(synthetic_split.all_trajectories(), HashingEmbedder(dim=128))


@pytest.fixture(scope="session")
def synthetic_retrievals(synthetic_split, synthetic_vectors):
    return build_all_retrievals(synthetic_split.all_trajectories(), synthetic_vectors, RetrievalConfig())


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
