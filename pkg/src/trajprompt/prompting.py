"""Text rendering of check-ins and the question/answer prompts built from them."""

from __future__ import annotations

import hashlib
import random
import re
import string
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Sequence

import yaml

from .ingest import CheckIn, Trajectory

QUESTION_TAG = "<question>"
ANSWER_TAG = "<answer>:"
ARTICLE_SLOT = "a/an"


class Variant(str, Enum):
    FULL = "full"
    NO_HISTORY = "no_history"
    SELF_HISTORY_ONLY = "self_history_only"
    MASKED_CONTEXT = "masked_context"


@dataclass(frozen=True)
class PromptTemplate:
    """Text patterns for each prompt block.

    Placeholders are bracketed names. ``checkin_sentence`` also carries the
    literal ``a/an`` slot, resolved per category name.
    """

    checkin_sentence: str = (
        "At [time], user [user id] visited POI id [poi id] which is a/an "
        "[poi category name] with category id [category id]."
    )
    current_block_header: str = "The following is a trajectory of user [user id]:"
    history_block_header: str = "There is also historical data:"
    instruction_text: str = (
        "Given the data, at [time], which POI id will user [user id] visit? "
        "Note that POI id is an integer in the range from 0 to [id range]."
    )
    target_text: str = "<answer>: At [time], user [user id] will visit POI id [poi id]."
    time_format: str = "%Y-%m-%d %H:%M"

    _required = {
        "checkin_sentence": ("[time]", "[user id]", "[poi id]", "[poi category name]", "[category id]"),
        "current_block_header": ("[user id]",),
        "history_block_header": (),
        "instruction_text": ("[time]", "[user id]", "[id range]"),
        "target_text": ("[time]", "[user id]", "[poi id]"),
    }

    def __post_init__(self) -> None:
        for name, placeholders in self._required.items():
            pattern = getattr(self, name)
            for ph in placeholders:
                if pattern.count(ph) != 1:
                    raise ValueError(f"{name} must contain {ph} exactly once: {pattern!r}")
        if not self.target_text.startswith(ANSWER_TAG):
            raise ValueError(f"target_text must start with {ANSWER_TAG!r}")

    def fmt_time(self, dt: datetime) -> str:
        return dt.strftime(self.time_format)

    @classmethod
    def from_file(cls, path: str | Path) -> PromptTemplate:
        """Load overrides from a YAML mapping of field name -> pattern."""
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        unknown = set(data) - {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        if unknown:
            raise ValueError(f"unknown template field(s): {sorted(unknown)}")
        return cls(**data)


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class PromptRecord:
    question: str
    answer: str
    trajectory_id: int
    user_id: int
    target_poi_id: int
    target_time: str
    history_trajectory_ids: tuple[int, ...] = ()
    variant: Variant = Variant.FULL


def _fill(pattern: str, values: dict[str, object]) -> str:
    for ph, v in values.items():
        pattern = pattern.replace(ph, str(v))
    return pattern


def article_for(name: str) -> str:
    return "an" if name[:1].lower() in "aeiou" else "a"


def render_checkin(c: CheckIn, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    # category name is substituted last so names containing brackets stay verbatim
    text = _fill(
        template.checkin_sentence.replace(ARTICLE_SLOT, article_for(c.category_name), 1),
        {
            "[time]": template.fmt_time(c.local_time),
            "[user id]": c.user_id,
            "[poi id]": c.poi_id,
            "[category id]": c.category_id,
        },
    )
    return text.replace("[poi category name]", c.category_name, 1)


def render_block(header: str, checkins: Sequence[CheckIn], template: PromptTemplate) -> str:
    return " ".join([header, *(render_checkin(c, template) for c in checkins)])


def current_block(user_id: int, checkins: Sequence[CheckIn], template: PromptTemplate) -> str:
    return render_block(_fill(template.current_block_header, {"[user id]": user_id}), checkins, template)


def instruction_block(target: CheckIn, id_range: int, template: PromptTemplate) -> str:
    return _fill(
        template.instruction_text,
        {"[time]": template.fmt_time(target.local_time), "[user id]": target.user_id, "[id range]": id_range},
    )


def build_key_prompt(t: Trajectory, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """Current-block rendering without the final check-in."""
    return current_block(t.user_id, t.checkins[:-1], template)


def build_query_prompt(t: Trajectory, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """Current-block rendering of the whole trajectory."""
    return current_block(t.user_id, t.checkins, template)


def build_question(
    current: Trajectory,
    history: Sequence[Trajectory | Sequence[CheckIn]],
    id_range: int,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    *,
    keep_recent: int | None = None,
) -> str:
    """Assemble the question text; the target (last) check-in is never rendered.

    ``history`` items are rendered in the order given. ``keep_recent`` limits the
    current block to its most recent check-ins.
    """
    if len(current.checkins) < 2:
        raise ValueError("current trajectory needs at least 2 check-ins")
    context = current.checkins[:-1]
    if keep_recent is not None:
        if keep_recent < 1:
            raise ValueError("keep_recent must be >= 1")
        context = context[-keep_recent:]
    hist_checkins = [c for h in history for c in (h.checkins if isinstance(h, Trajectory) else h)]
    return compose_question(
        current_block(current.user_id, context, template),
        [render_checkin(c, template) for c in hist_checkins],
        instruction_block(current.target, id_range, template),
        template,
    )


def compose_question(
    current_text: str, history_sentences: Sequence[str], instruction: str, template: PromptTemplate = DEFAULT_TEMPLATE
) -> str:
    """Join already-rendered pieces; lets callers re-assemble without re-rendering."""
    parts = [QUESTION_TAG, current_text]
    if history_sentences:
        parts.append(" ".join([template.history_block_header, *history_sentences]))
    parts.append(instruction)
    return " ".join(parts)


def build_answer(target: CheckIn, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    return _fill(
        template.target_text,
        {"[time]": template.fmt_time(target.local_time), "[user id]": target.user_id, "[poi id]": target.poi_id},
    )


# --------------------------------------------------------------------------
# context masking
# --------------------------------------------------------------------------


def _sentence_regex(template: PromptTemplate) -> re.Pattern[str]:
    pattern = re.escape(template.checkin_sentence)
    subs = {
        re.escape("[time]"): r".+?",
        re.escape("[user id]"): r"\d+",
        re.escape("[poi id]"): r"\d+",
        re.escape(ARTICLE_SLOT): r"(?:an|a)",
        re.escape("[poi category name]"): r"(?P<name>.+?)",
        re.escape("[category id]"): r"\d+",
    }
    for k, v in subs.items():
        pattern = pattern.replace(k, v, 1)
    return re.compile(pattern)


def category_spans(question: str, template: PromptTemplate = DEFAULT_TEMPLATE) -> list[tuple[int, int]]:
    """Character spans of every category name inside rendered check-in sentences."""
    return [m.span("name") for m in _sentence_regex(template).finditer(question)]


def mask_string(name: str, seed: int) -> str:
    """Same-length lowercase letter string, fixed for a given (name, seed)."""
    digest = hashlib.sha256(f"{seed}\x00{name}".encode("utf-8")).digest()
    rng = random.Random(digest)
    return "".join(rng.choice(string.ascii_lowercase) for _ in name)


def mask_context(p: PromptRecord, seed: int, template: PromptTemplate = DEFAULT_TEMPLATE) -> PromptRecord:
    """Replace every category name with a meaningless string of the same length."""
    if p.variant == Variant.MASKED_CONTEXT:
        raise ValueError("record is already masked")
    q = p.question
    pieces = []
    last = 0
    cache: dict[str, str] = {}
    for start, end in category_spans(q, template):
        name = q[start:end]
        if name not in cache:
            cache[name] = mask_string(name, seed)
        pieces.append(q[last:start])
        pieces.append(cache[name])
        last = end
    pieces.append(q[last:])
    return replace(p, question="".join(pieces), variant=Variant.MASKED_CONTEXT)
