"""Prompt record assembly under a context-length budget, and JSON-lines corpora."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, MutableMapping, Sequence

from .ingest import DatasetSplit, Trajectory, _fmt_time
from .prompting import (
    DEFAULT_TEMPLATE,
    PromptRecord,
    PromptTemplate,
    Variant,
    build_answer,
    compose_question,
    current_block,
    instruction_block,
    render_checkin,
)
from .retrieval import RetrievalResult

log = logging.getLogger(__name__)


class RecordSkipped(Exception):
    def __init__(self, trajectory_id: int, reason: str):
        super().__init__(f"trajectory {trajectory_id}: {reason}")
        self.trajectory_id = trajectory_id
        self.reason = reason


class CorpusFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TokenBudget:
    max_tokens: int = 32768
    chars_per_token: float = 4.0
    reserve_for_answer: int = 64
    counter: Callable[[str], int] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.max_tokens > self.reserve_for_answer >= 0:
            raise ValueError("need max_tokens > reserve_for_answer >= 0")
        if self.chars_per_token <= 0:
            raise ValueError("chars_per_token must be positive")

    @property
    def question_limit(self) -> int:
        return self.max_tokens - self.reserve_for_answer

    def estimate(self, text: str) -> int:
        return estimate_tokens(text, self.chars_per_token, self.counter)


def estimate_tokens(text: str, chars_per_token: float = 4.0, counter: Callable[[str], int] | None = None) -> int:
    """ceil(len / chars_per_token), or the exact count from ``counter`` when given."""
    if counter is not None:
        return int(counter(text))
    return math.ceil(len(text) / chars_per_token)


def assemble_record(
    key: Trajectory,
    retrieval: RetrievalResult | None,
    budget: TokenBudget,
    *,
    id_range: int,
    trajectories: Mapping[int, Trajectory],
    template: PromptTemplate = DEFAULT_TEMPLATE,
    history_checkin_budget: int | None = None,
    variant: Variant = Variant.FULL,
    sentence_cache: MutableMapping[int, list[str]] | None = None,
) -> PromptRecord:
    """Build one question/answer record that fits ``budget``.

    Over-budget questions first lose history trajectories from the least
    similar end, then the oldest check-ins of the current block (down to one).
    An oversize single history trajectory is cut to its most recent
    ``history_checkin_budget`` check-ins. ``sentence_cache`` maps trajectory
    ids to rendered sentences and is shared across calls by ``build_corpus``.
    """
    if retrieval is not None and retrieval.key_trajectory_id != key.trajectory_id:
        raise ValueError(f"retrieval for {retrieval.key_trajectory_id} passed with key {key.trajectory_id}")
    cache = {} if sentence_cache is None else sentence_cache
    history: list[tuple[int, list[str]]] = []
    if retrieval is not None:
        for tid in retrieval.trajectory_ids:
            if tid not in cache:
                cache[tid] = [render_checkin(c, template) for c in trajectories[tid].checkins]
            sentences = cache[tid]
            if retrieval.oversize and history_checkin_budget is not None:
                sentences = sentences[-history_checkin_budget:]
            history.append((tid, sentences))

    limit = budget.question_limit
    current_text = current_block(key.user_id, key.checkins[:-1], template)
    instruction = instruction_block(key.target, id_range, template)
    rendered = [sentences for _, sentences in history]

    def compose(n_history: int) -> str:
        return compose_question(current_text, [s for r in rendered[:n_history] for s in r], instruction, template)

    # largest history prefix that fits; estimates never shrink as text is appended
    lo, hi = 0, len(history)
    if budget.estimate(compose(hi)) > limit:
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if budget.estimate(compose(mid)) <= limit:
                lo = mid
            else:
                hi = mid - 1
    history = history[:hi]
    question = compose(hi)
    if budget.estimate(question) > limit:
        context = key.checkins[:-1]
        keep = len(context) - 1
        while keep >= 1:
            question = compose_question(current_block(key.user_id, context[-keep:], template), [], instruction, template)
            if budget.estimate(question) <= limit:
                break
            keep -= 1
        else:
            raise RecordSkipped(key.trajectory_id, "one check-in plus instruction exceeds the token budget")

    target = key.target
    return PromptRecord(
        question=question,
        answer=build_answer(target, template),
        trajectory_id=key.trajectory_id,
        user_id=key.user_id,
        target_poi_id=target.poi_id,
        target_time=_fmt_time(target.timestamp),
        history_trajectory_ids=tuple(tid for tid, _ in history),
        variant=variant,
    )


def build_corpus(
    split: DatasetSplit,
    retrievals: Mapping[int, RetrievalResult] | None,
    budget: TokenBudget,
    *,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    history_checkin_budget: int | None = None,
    variant: Variant = Variant.FULL,
    workers: int = 1,
) -> tuple[dict[str, list[PromptRecord]], list[RecordSkipped]]:
    """Records for every split in trajectory-id order, plus the skipped ones."""
    by_id = {t.trajectory_id: t for t in split.all_trajectories()}
    id_range = split.id_maps.id_range
    cache: dict[int, list[str]] = {}

    def one(t: Trajectory) -> PromptRecord | RecordSkipped:
        r = None if retrievals is None else retrievals.get(t.trajectory_id)
        try:
            return assemble_record(
                t,
                r,
                budget,
                id_range=id_range,
                trajectories=by_id,
                template=template,
                history_checkin_budget=history_checkin_budget,
                variant=variant,
                sentence_cache=cache,
            )
        except RecordSkipped as exc:
            return exc

    corpora: dict[str, list[PromptRecord]] = {}
    skipped: list[RecordSkipped] = []
    for name in ("train", "validation", "test"):
        trajs = sorted(split.by_name(name), key=lambda t: t.trajectory_id)
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                outs = list(ex.map(one, trajs))
        else:
            outs = [one(t) for t in trajs]
        corpora[name] = [o for o in outs if isinstance(o, PromptRecord)]
        for o in outs:
            if isinstance(o, RecordSkipped):
                log.warning("skipped record: %s", o)
                skipped.append(o)
    return corpora, skipped


# --------------------------------------------------------------------------
# JSON lines
# --------------------------------------------------------------------------


def record_to_dict(r: PromptRecord, include_metadata: bool = True) -> dict:
    d: dict = {"question": r.question, "answer": r.answer}
    if include_metadata:
        d["meta"] = {
            "trajectory_id": r.trajectory_id,
            "user_id": r.user_id,
            "target_poi_id": r.target_poi_id,
            "target_time": r.target_time,
            "variant": Variant(r.variant).value,
            "history_trajectory_ids": list(r.history_trajectory_ids),
        }
    return d


def record_from_dict(d: dict) -> PromptRecord:
    m = d["meta"]
    return PromptRecord(
        question=d["question"],
        answer=d["answer"],
        trajectory_id=int(m["trajectory_id"]),
        user_id=int(m["user_id"]),
        target_poi_id=int(m["target_poi_id"]),
        target_time=m["target_time"],
        history_trajectory_ids=tuple(int(x) for x in m["history_trajectory_ids"]),
        variant=Variant(m["variant"]),
    )


def emit_jsonl(records: Sequence[PromptRecord], path: str | os.PathLike, include_metadata: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r, include_metadata), ensure_ascii=False) + "\n")


def load_jsonl(path: str | os.PathLike, strict: bool = True) -> tuple[list[PromptRecord], list[CorpusFormatError]]:
    """Read a corpus written with metadata.

    Strict mode raises on the first malformed line; lenient mode skips it and
    returns one error per skipped line.
    """
    records: list[PromptRecord] = []
    errors: list[CorpusFormatError] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                err = CorpusFormatError(lineno, f"{type(exc).__name__}: {exc}")
                if strict:
                    raise err from exc
                log.warning("skipping malformed corpus %s", err)
                errors.append(err)
    return records, errors
