"""Acc@1 with per-group breakdowns and the answer-in-question diagnostic."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .ingest import Trajectory
from .inference import OK, PredictionRecord
from .prompting import PromptRecord

TOP_FRACTION = 0.3


class AlignmentError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Partition:
    kind: str  # "user_activity" or "trajectory_length"
    labels: dict[int, str]  # user_id or trajectory_id -> group label
    thresholds: dict[str, int] = field(default_factory=dict)

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for k, label in sorted(self.labels.items()):
            out.setdefault(label, []).append(k)
        return out


@dataclass
class EvalReport:
    overall_acc1: float
    n_test: int
    hits: int
    parse_failures: int
    group_acc1: dict[str, tuple[int, float]]
    answer_in_question_rate: float
    config_fingerprint: str
    test_set_fingerprint: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_acc1"] = {k: {"count": c, "acc1": a} for k, (c, a) in sorted(self.group_acc1.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["group_acc1"] = {k: (v["count"], v["acc1"]) for k, v in d["group_acc1"].items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        rows = [("overall", str(self.n_test), f"{self.overall_acc1:.4f}")]
        rows += [(k, str(c), f"{a:.4f}") for k, (c, a) in sorted(self.group_acc1.items())]
        w0 = max(len(r[0]) for r in rows + [("group", "", "")])
        w1 = max(len(r[1]) for r in rows + [("", "count", "")])
        lines = [f"{'group':<{w0}}  {'count':>{w1}}  {'Acc@1':>7}"]
        lines += [f"{g:<{w0}}  {c:>{w1}}  {a:>7}" for g, c, a in rows]
        lines.append(f"parse failures: {self.parse_failures}")
        lines.append(f"answer in question: {self.answer_in_question_rate:.4f}")
        return "\n".join(lines) + "\n"


def acc_at_1(
    predictions: Sequence[PredictionRecord], gold: Mapping[int, int]
) -> tuple[float, int, int, int]:
    """Return (acc, hits, misses, parse_failures); unparsed outputs count as misses."""
    pred_ids = [p.trajectory_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids) or set(pred_ids) != set(gold):
        missing = sorted(set(gold) - set(pred_ids))[:5]
        extra = sorted(set(pred_ids) - set(gold))[:5]
        raise AlignmentError(f"prediction/gold id sets differ (missing {missing}, unexpected {extra})")
    hits = sum(1 for p in predictions if p.parse_status == OK and p.predicted_poi_id == gold[p.trajectory_id])
    failures = sum(1 for p in predictions if p.parse_status != OK)
    m = len(predictions)
    return (hits / m if m else 0.0), hits, m - hits, failures


def _rank_partition(kind: str, items: Sequence[tuple[int, int]], labels: tuple[str, str, str]) -> Partition:
    # items: (key, size); ranked by size descending, key ascending
    ranked = sorted(items, key=lambda kv: (-kv[1], kv[0]))
    n = len(ranked)
    k = math.floor(TOP_FRACTION * n)
    top, mid, bottom = labels
    out = {}
    for i, (key, _) in enumerate(ranked):
        out[key] = top if i < k else bottom if i >= n - k else mid
    return Partition(kind, out, {"n": n, "group_size": k})


def partition_users_by_activity(train: Sequence[Trajectory]) -> Partition:
    """Label training users very_active / normal / inactive by trajectory count."""
    if not train:
        raise ValueError("training set is empty")
    counts = Counter(t.user_id for t in train)
    return _rank_partition("user_activity", list(counts.items()), ("very_active", "normal", "inactive"))


def partition_trajectories_by_length(test: Sequence[Trajectory]) -> Partition:
    """Label test trajectories long / middle / short by check-in count."""
    return _rank_partition(
        "trajectory_length", [(t.trajectory_id, len(t)) for t in test], ("long", "middle", "short")
    )


def answer_in_question(record: PromptRecord) -> bool:
    return re.search(rf"POI id {record.target_poi_id}(?!\d)", record.question) is not None


def answer_in_question_rate(records: Sequence[PromptRecord]) -> float:
    if not records:
        return 0.0
    return sum(answer_in_question(r) for r in records) / len(records)


def fingerprint_test_set(records: Sequence[PromptRecord]) -> str:
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: r.trajectory_id):
        h.update(f"{r.trajectory_id}:{r.target_poi_id}:{r.target_time}\n".encode())
    return h.hexdigest()[:16]


def evaluate(
    records: Sequence[PromptRecord],
    predictions: Sequence[PredictionRecord],
    *,
    train: Sequence[Trajectory] = (),
    test: Sequence[Trajectory] = (),
    partitions: Sequence[str] = ("user_activity", "trajectory_length"),
    config_fingerprint: str = "",
) -> EvalReport:
    gold = {r.trajectory_id: r.target_poi_id for r in records}
    acc, hits, _, failures = acc_at_1(predictions, gold)
    by_id = {p.trajectory_id: p for p in predictions}

    def hit(tid: int) -> bool:
        p = by_id[tid]
        return p.parse_status == OK and p.predicted_poi_id == gold[tid]

    group_labels: dict[str, dict[int, str]] = {}
    if "user_activity" in partitions:
        part = partition_users_by_activity(train)
        labels = {}
        for r in records:
            if r.user_id not in part.labels:
                raise AlignmentError(f"test user {r.user_id} does not appear in train")
            labels[r.trajectory_id] = part.labels[r.user_id]
        group_labels["user_activity"] = labels
    if "trajectory_length" in partitions:
        ids = set(gold)
        part = partition_trajectories_by_length([t for t in test if t.trajectory_id in ids])
        missing = ids - set(part.labels)
        if missing:
            raise AlignmentError(f"{len(missing)} evaluated records have no test trajectory")
        group_labels["trajectory_length"] = part.labels

    groups: dict[str, tuple[int, float]] = {}
    for kind, labels in group_labels.items():
        members: dict[str, list[int]] = {}
        for tid, label in labels.items():
            members.setdefault(label, []).append(tid)
        for label, tids in members.items():
            groups[f"{kind}/{label}"] = (len(tids), sum(map(hit, tids)) / len(tids))

    return EvalReport(
        overall_acc1=acc,
        n_test=len(records),
        hits=hits,
        parse_failures=failures,
        group_acc1=groups,
        answer_in_question_rate=answer_in_question_rate(records),
        config_fingerprint=config_fingerprint,
        test_set_fingerprint=fingerprint_test_set(records),
    )


@dataclass
class Delta:
    metric: str
    a: float
    b: float

    @property
    def absolute(self) -> float:
        return self.b - self.a

    @property
    def relative(self) -> float | None:
        return None if self.a == 0 else (self.b - self.a) / self.a


def compare_runs(a: EvalReport, b: EvalReport) -> list[Delta]:
    """Per-metric deltas (b - a); refuses reports evaluated on different test sets."""
    if a.test_set_fingerprint != b.test_set_fingerprint:
        raise FingerprintMismatch(
            f"reports cover different test sets ({a.test_set_fingerprint} vs {b.test_set_fingerprint}); "
            "comparison would be meaningless"
        )
    deltas = [
        Delta("overall_acc1", a.overall_acc1, b.overall_acc1),
        Delta("answer_in_question_rate", a.answer_in_question_rate, b.answer_in_question_rate),
    ]
    for g in sorted(set(a.group_acc1) | set(b.group_acc1)):
        deltas.append(Delta(g, a.group_acc1.get(g, (0, 0.0))[1], b.group_acc1.get(g, (0, 0.0))[1]))
    return deltas


def format_deltas(deltas: Sequence[Delta]) -> str:
    w = max([len(d.metric) for d in deltas] + [6])
    lines = [f"{'metric':<{w}}  {'a':>7}  {'b':>7}  {'abs':>8}  {'rel':>8}"]
    for d in deltas:
        rel = "n/a" if d.relative is None else f"{d.relative:+.2%}"
        lines.append(f"{d.metric:<{w}}  {d.a:>7.4f}  {d.b:>7.4f}  {d.absolute:>+8.4f}  {rel:>8}")
    return "\n".join(lines) + "\n"
