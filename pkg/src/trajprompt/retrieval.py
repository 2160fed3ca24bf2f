"""Key-query history retrieval: cosine ranking of earlier trajectories under a check-in budget."""

from __future__ import annotations

import bisect
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingVector, VectorStore
from .ingest import Trajectory

log = logging.getLogger(__name__)

KEY_BLOCK = 256  # keys per matrix product; fixed so results don't depend on worker count


def key_id(trajectory_id: int) -> str:
    return f"key:{trajectory_id}"


def query_id(trajectory_id: int) -> str:
    return f"query:{trajectory_id}"


@dataclass(frozen=True)
class RetrievalConfig:
    history_checkin_budget: int = 300
    top_k_cap: int | None = None
    self_only: bool = False
    candidate_scope: str = "all_users"  # or "same_user"
    candidate_pool: str = "all"  # or "train": only training trajectories are candidates
    order: str = "similarity"  # or "recency": most recent first, similarity ignored

    def __post_init__(self) -> None:
        if self.history_checkin_budget < 0:
            raise ValueError("history_checkin_budget must be >= 0")
        if self.top_k_cap is not None and self.top_k_cap < 1:
            raise ValueError("top_k_cap must be >= 1 when set")
        if self.candidate_scope not in ("all_users", "same_user"):
            raise ValueError(f"unknown candidate_scope {self.candidate_scope!r}")
        if self.candidate_pool not in ("all", "train"):
            raise ValueError(f"unknown candidate_pool {self.candidate_pool!r}")
        if self.order not in ("similarity", "recency"):
            raise ValueError(f"unknown order {self.order!r}")

    @property
    def restrict_to_user(self) -> bool:
        return self.self_only or self.candidate_scope == "same_user"


@dataclass
class RetrievalResult:
    key_trajectory_id: int
    selected: list[tuple[int, float]] = field(default_factory=list)
    total_checkins_selected: int = 0
    oversize: bool = False  # single selected trajectory longer than the budget
    error: str | None = None

    @property
    def trajectory_ids(self) -> list[int]:
        return [tid for tid, _ in self.selected]

    def to_dict(self) -> dict:
        return {
            "key": self.key_trajectory_id,
            "selected": [[tid, sim] for tid, sim in self.selected],
            "total": self.total_checkins_selected,
            "oversize": self.oversize,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RetrievalResult:
        return cls(d["key"], [(int(t), float(s)) for t, s in d["selected"]], d["total"], d["oversize"], d["error"])


def eligible_queries(key: Trajectory, trajectories: Iterable[Trajectory], config: RetrievalConfig) -> list[Trajectory]:
    """Trajectories that ended strictly before ``key`` started."""
    return [
        t
        for t in trajectories
        if t.end_time < key.start_time
        and t.trajectory_id != key.trajectory_id
        and (not config.restrict_to_user or t.user_id == key.user_id)
    ]


def cosine(a: EmbeddingVector | np.ndarray | Sequence[float], b: EmbeddingVector | np.ndarray | Sequence[float]) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, EmbeddingVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(va, vb) / (na * nb))


def rank_candidates(
    candidates: Sequence[tuple[Trajectory, float]], config: RetrievalConfig
) -> list[tuple[Trajectory, float]]:
    if config.order == "recency":
        return sorted(candidates, key=lambda ts: (-ts[0].end_time.timestamp(), ts[0].trajectory_id))
    return sorted(candidates, key=lambda ts: (-ts[1], ts[0].end_time, ts[0].trajectory_id))


def select_history(
    key: Trajectory, candidates_with_sims: Sequence[tuple[Trajectory, float]], config: RetrievalConfig
) -> RetrievalResult:
    """Greedy budgeted selection over ranked candidates.

    Candidates are taken in rank order while their check-ins fit the remaining
    budget; the scan stops at the first one that does not fit. If the very
    first candidate alone exceeds the budget it is kept by itself and flagged.
    """
    result = RetrievalResult(key.trajectory_id)
    budget = config.history_checkin_budget
    if budget == 0:
        return result
    remaining = budget
    for t, sim in rank_candidates(candidates_with_sims, config):
        if config.top_k_cap is not None and len(result.selected) >= config.top_k_cap:
            break
        n = len(t)
        if n > remaining:
            if not result.selected:
                result.selected.append((t.trajectory_id, sim))
                result.total_checkins_selected = n
                result.oversize = True
            break
        result.selected.append((t.trajectory_id, sim))
        result.total_checkins_selected += n
        remaining -= n
    return result


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / norms


def build_all_retrievals(
    trajectories: Sequence[Trajectory],
    vectors: VectorStore,
    config: RetrievalConfig,
    *,
    train_ids: Iterable[int] | None = None,
    workers: int = 1,
) -> dict[int, RetrievalResult]:
    """Retrieval result for every trajectory, keyed by trajectory id.

    Vectors are normalised once so each similarity is a dot product; keys are
    processed in fixed-size blocks against the candidate matrix, which is
    sorted by end time so the eligible set of a key is a prefix.
    """
    trajectories = sorted(trajectories, key=lambda t: t.trajectory_id)
    if config.candidate_pool == "train":
        if train_ids is None:
            raise ValueError("candidate_pool='train' needs train_ids")
        pool_ids = set(train_ids)
        pool = [t for t in trajectories if t.trajectory_id in pool_ids]
    else:
        pool = list(trajectories)

    missing_queries = [t.trajectory_id for t in pool if query_id(t.trajectory_id) not in vectors]
    if missing_queries:
        log.warning("%d candidate trajectories lack a query vector and are skipped", len(missing_queries))
    pool = [t for t in pool if query_id(t.trajectory_id) in vectors]
    pool.sort(key=lambda t: (t.end_time, t.trajectory_id))
    pool_ends = [t.end_time for t in pool]
    if pool:
        q_unit = _unit_rows(np.vstack([vectors.get(query_id(t.trajectory_id)) for t in pool]))
    else:
        q_unit = np.zeros((0, vectors.dim))

    results: dict[int, RetrievalResult] = {}
    keyed: list[Trajectory] = []
    for t in trajectories:
        if key_id(t.trajectory_id) not in vectors:
            results[t.trajectory_id] = RetrievalResult(t.trajectory_id, error="missing key vector")
        else:
            keyed.append(t)

    blocks = [keyed[i : i + KEY_BLOCK] for i in range(0, len(keyed), KEY_BLOCK)]

    def run_block(block: list[Trajectory]) -> list[RetrievalResult]:
        limits = [bisect.bisect_left(pool_ends, k.start_time) for k in block]
        width = max(limits, default=0)
        k_unit = _unit_rows(np.vstack([vectors.get(key_id(k.trajectory_id)) for k in block]))
        sims = k_unit @ q_unit[:width].T if width else np.zeros((len(block), 0))
        out = []
        for row, (k, limit) in enumerate(zip(block, limits)):
            cands = [
                (pool[j], float(sims[row, j]))
                for j in range(limit)
                if not config.restrict_to_user or pool[j].user_id == k.user_id
            ]
            out.append(select_history(k, cands, config))
        return out

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            chunks = list(ex.map(run_block, blocks))
    else:
        chunks = [run_block(b) for b in blocks]
    for chunk in chunks:
        for r in chunk:
            results[r.key_trajectory_id] = r
    return dict(sorted(results.items()))


def save_retrievals(results: Mapping[int, RetrievalResult], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tid in sorted(results):
            fh.write(json.dumps(results[tid].to_dict(), sort_keys=True) + "\n")


def load_retrievals(path: str | os.PathLike) -> dict[int, RetrievalResult]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = RetrievalResult.from_dict(json.loads(line))
                out[r.key_trajectory_id] = r
    return out
