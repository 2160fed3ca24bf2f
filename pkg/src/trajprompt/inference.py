"""Completion-endpoint client and answer parsing for resumable prediction runs."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .embedding import EndpointConfig, TransportError, post_with_retry
from .prompting import PromptRecord

log = logging.getLogger(__name__)

OK, NO_MATCH, OUT_OF_RANGE = "ok", "no_match", "out_of_range"

_POI_ID = re.compile(r"poi\s+id", re.IGNORECASE)
_INT = re.compile(r"(?<!\d)\d+")
# digits not glued to word characters or date/time punctuation
_STANDALONE_INT = re.compile(r"(?<![\w\-:./])\d+(?![\w\-:/]|\.\d)")


@dataclass
class PredictionRecord:
    trajectory_id: int
    raw_output: str
    predicted_poi_id: int | None
    parse_status: str
    latency_ms: int = 0
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.predicted_poi_id is not None) != (self.parse_status == OK):
            raise ValueError("predicted_poi_id must be set iff parse_status is 'ok'")


@dataclass
class CompletionConfig(EndpointConfig):
    mode: str = "completion"  # "completion" -> choices[0].text, "chat" -> choices[0].message.content
    max_new_tokens: int = 48
    temperature: float = 0.0


def parse_poi_id(raw_output: str, id_range: int) -> tuple[int | None, str]:
    """Extract the predicted POI id from a generation.

    Takes the first integer after the first "POI id" (any case); failing that,
    the first standalone integer anywhere. Never raises.
    """
    value = None
    m = _POI_ID.search(raw_output or "")
    if m:
        n = _INT.search(raw_output, m.end())
        if n:
            value = int(n.group())
    if value is None:
        n = _STANDALONE_INT.search(raw_output or "")
        if n:
            value = int(n.group())
    if value is None:
        return None, NO_MATCH
    if not 0 <= value <= id_range:
        return None, OUT_OF_RANGE
    return value, OK


def complete(question: str, cfg: CompletionConfig, client: httpx.Client | None = None) -> str:
    """Greedy completion of ``question``; raises TransportError after exhausting retries."""
    own = client is None
    client = client or httpx.Client()
    try:
        payload: dict = {"model": cfg.model, "temperature": cfg.temperature, "max_tokens": cfg.max_new_tokens}
        if cfg.mode == "chat":
            payload["messages"] = [{"role": "user", "content": question}]
        else:
            payload["prompt"] = question
        body = post_with_retry(client, cfg, payload)
    finally:
        if own:
            client.close()
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"] if cfg.mode == "chat" else choice["text"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected completion response shape: {exc}") from exc
    return text or ""


class FrequencyPredictor:
    """Offline stand-in for a fine-tuned model: answers with the POI id seen most
    often in the question (ties go to the most recent mention)."""

    _mention = re.compile(r"POI id (\d+) which")

    def __call__(self, question: str) -> str:
        ids = self._mention.findall(question)
        if not ids:
            return "no idea"
        counts = Counter(ids)
        best = max(counts.values())
        pick = next(i for i in reversed(ids) if counts[i] == best)
        return f"<answer>: user will visit POI id {pick}."


def _load_checkpoint(path: Path) -> dict[int, PredictionRecord]:
    done: dict[int, PredictionRecord] = {}
    if not path.exists():
        return done
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = PredictionRecord(**json.loads(line))
                    done[rec.trajectory_id] = rec
    except (ValueError, TypeError) as exc:
        log.warning("checkpoint %s is corrupt (%s); starting fresh", path, exc)
        path.unlink()
        return {}
    return done


def run_predictions(
    records: Sequence[PromptRecord],
    generate: Callable[[str], str],
    id_range: int,
    *,
    concurrency_limit: int = 1,
    checkpoint: str | os.PathLike | None = None,
) -> list[PredictionRecord]:
    """One prediction per record, in input order.

    ``generate`` maps a question to raw model text (e.g. a bound ``complete``).
    Successful predictions are appended to ``checkpoint`` as they finish so an
    interrupted run resumes without re-sending them; failures are not
    checkpointed and are retried on the next run.
    """
    ckpt = Path(checkpoint) if checkpoint is not None else None
    done = _load_checkpoint(ckpt) if ckpt else {}
    lock = threading.Lock()
    fh = open(ckpt, "a", encoding="utf-8", newline="\n") if ckpt else None

    def one(r: PromptRecord) -> PredictionRecord:
        if r.trajectory_id in done:
            return done[r.trajectory_id]
        t0 = time.perf_counter()
        try:
            raw = generate(r.question)
        except (TransportError, httpx.HTTPError) as exc:
            log.error("prediction for trajectory %d failed: %s", r.trajectory_id, exc)
            return PredictionRecord(r.trajectory_id, "", None, NO_MATCH, int((time.perf_counter() - t0) * 1000), str(exc))
        pid, status = parse_poi_id(raw, id_range)
        pred = PredictionRecord(r.trajectory_id, raw, pid, status, int((time.perf_counter() - t0) * 1000))
        if fh is not None:
            with lock:
                fh.write(json.dumps(asdict(pred), sort_keys=True) + "\n")
                fh.flush()
        return pred

    try:
        if concurrency_limit > 1:
            with ThreadPoolExecutor(concurrency_limit) as ex:
                return list(ex.map(one, records))
        return [one(r) for r in records]
    finally:
        if fh is not None:
            fh.close()


def save_predictions(preds: Sequence[PredictionRecord], path: str | os.PathLike, with_latency: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in preds:
            d = asdict(p)
            if not with_latency:
                d.pop("latency_ms")
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def load_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionRecord(**json.loads(line)) for line in fh if line.strip()]
