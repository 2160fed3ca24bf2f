"""Check-in ingestion from raw logs up to the chronological train/validation/test split."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import IO, Iterable, Sequence

log = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "validation", "test")


class SchemaError(ValueError):
    """Input file lacks a required column."""


class ConfigError(ValueError):
    """Invalid preprocessing configuration."""


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    poi_id: int
    category_id: int
    category_name: str
    timestamp: datetime  # UTC, second precision
    latitude: float
    longitude: float
    raw_user_key: str
    raw_poi_key: str
    raw_category_key: str = ""
    offset_minutes: int = 0
    row: int = 0  # source row number, used as the final tie-break

    @property
    def local_time(self) -> datetime:
        return self.timestamp + timedelta(minutes=self.offset_minutes)

    @property
    def sort_key(self) -> tuple[datetime, int]:
        return (self.timestamp, self.row)


@dataclass(frozen=True)
class Trajectory:
    trajectory_id: int
    user_id: int
    checkins: tuple[CheckIn, ...]

    def __post_init__(self) -> None:
        if len(self.checkins) < 2:
            raise ValueError(f"trajectory {self.trajectory_id} has fewer than 2 check-ins")

    @property
    def start_time(self) -> datetime:
        return self.checkins[0].timestamp

    @property
    def end_time(self) -> datetime:
        return self.checkins[-1].timestamp

    def __len__(self) -> int:
        return len(self.checkins)

    @property
    def target(self) -> CheckIn:
        return self.checkins[-1]


@dataclass(frozen=True)
class SegmentationConfig:
    delta_t: timedelta = timedelta(hours=24)
    min_poi_visits: int = 10
    min_user_records: int = 10
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self) -> None:
        if self.delta_t <= timedelta(0):
            raise ConfigError("delta_t must be positive")
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios needs exactly three fractions")
        if any(not 0.0 < r < 1.0 for r in self.split_ratios):
            raise ConfigError(f"split ratios must lie in (0, 1): {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1: {self.split_ratios}")


@dataclass
class IdMaps:
    """Remapped id -> raw key tables; list position is the remapped id."""

    users: list[str] = field(default_factory=list)
    pois: list[str] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)
    # False when the raw category keys were already non-negative integers and were kept.
    categories_remapped: bool = False

    def user_id(self, raw: str) -> int:
        return self._user_index()[raw]

    def poi_id(self, raw: str) -> int:
        return self._poi_index()[raw]

    def _user_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.users)}

    def _poi_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.pois)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_pois(self) -> int:
        return len(self.pois)

    @property
    def id_range(self) -> int:
        """Largest valid POI id (inclusive), i.e. M - 1."""
        return len(self.pois) - 1

    def to_dict(self) -> dict:
        return {
            "users": self.users,
            "pois": self.pois,
            "categories": self.categories,
            "categories_remapped": self.categories_remapped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> IdMaps:
        return cls(list(d["users"]), list(d["pois"]), list(d["categories"]), bool(d["categories_remapped"]))


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    validation: list[Trajectory]
    test: list[Trajectory]
    id_maps: IdMaps
    stats: dict = field(default_factory=dict)

    def all_trajectories(self) -> list[Trajectory]:
        return sorted(self.train + self.validation + self.test, key=lambda t: t.trajectory_id)

    def by_name(self, name: str) -> list[Trajectory]:
        return getattr(self, name)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSchema:
    """Maps the required check-in fields to header names of the input file."""

    user: str = "user_id"
    poi: str = "poi_id"
    category_id: str = "category_id"
    category_name: str = "category_name"
    latitude: str = "latitude"
    longitude: str = "longitude"
    timestamp: str = "timestamp"
    offset_minutes: str | None = None
    delimiter: str = ","
    time_format: str | None = None  # strptime pattern; None = ISO 8601 or Foursquare style

    def required(self) -> dict[str, str]:
        return {
            "user": self.user,
            "poi": self.poi,
            "category_id": self.category_id,
            "category_name": self.category_name,
            "latitude": self.latitude,
            "longitude": self.longitude,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class RowError:
    row: int
    reason: str


_FOURSQUARE_TIME = "%a %b %d %H:%M:%S %z %Y"


def parse_timestamp(text: str, fmt: str | None = None) -> datetime:
    """Parse into an aware UTC datetime truncated to seconds. Naive inputs are read as UTC."""
    text = text.strip()
    if fmt is not None:
        dt = datetime.strptime(text, fmt)
    else:
        try:
            iso = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
            dt = datetime.fromisoformat(iso)
        except ValueError:
            dt = datetime.strptime(text, _FOURSQUARE_TIME)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def _open_text(source: str | os.PathLike | bytes | IO) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def parse_checkins(
    source: str | os.PathLike | bytes | IO, schema: ColumnSchema | None = None
) -> tuple[list[CheckIn], list[RowError]]:
    """Read delimiter-separated check-ins with a header row.

    Returns the parsed check-ins in source order (ids not yet remapped, all 0)
    and one ``RowError`` per rejected row. Row numbers count the header as row 1.
    """
    schema = schema or ColumnSchema()
    fh = _open_text(source)
    try:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = next(reader, None)
        if header is None:
            raise SchemaError("input has no header row")
        header = [h.strip() for h in header]
        index = {name: i for i, name in enumerate(header)}
        wanted = schema.required()
        if schema.offset_minutes is not None:
            wanted["offset_minutes"] = schema.offset_minutes
        missing = sorted(col for col in wanted.values() if col not in index)
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        cols = {key: index[col] for key, col in wanted.items()}

        out: list[CheckIn] = []
        errors: list[RowError] = []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                out.append(_row_to_checkin(row, cols, schema, rowno))
            except (ValueError, IndexError) as exc:
                errors.append(RowError(rowno, str(exc)))
                log.warning("skipping row %d: %s", rowno, exc)
    finally:
        if fh is not source:
            fh.close()
    return out, errors


def _row_to_checkin(row: list[str], cols: dict[str, int], schema: ColumnSchema, rowno: int) -> CheckIn:
    def cell(key: str) -> str:
        return row[cols[key]].strip()

    user, poi = cell("user"), cell("poi")
    if not user or not poi:
        raise ValueError("empty user or POI key")
    name = cell("category_name")
    if not name:
        raise ValueError("empty category name")
    lat, lon = float(cell("latitude")), float(cell("longitude"))
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"coordinate out of range: ({lat}, {lon})")
    try:
        ts = parse_timestamp(cell("timestamp"), schema.time_format)
    except ValueError as exc:
        raise ValueError(f"bad timestamp {cell('timestamp')!r}") from exc
    offset = int(float(cell("offset_minutes"))) if "offset_minutes" in cols else 0
    cat_key = cell("category_id")
    return CheckIn(
        user_id=0,
        poi_id=0,
        category_id=int(cat_key) if cat_key.isdigit() else 0,
        category_name=name,
        timestamp=ts,
        latitude=lat,
        longitude=lon,
        raw_user_key=user,
        raw_poi_key=poi,
        raw_category_key=cat_key,
        offset_minutes=offset,
        row=rowno,
    )


# --------------------------------------------------------------------------
# filtering / remapping
# --------------------------------------------------------------------------


def filter_dataset(checkins: Sequence[CheckIn], config: SegmentationConfig) -> list[CheckIn]:
    """Drop rare POIs, then drop users left with too few records.

    One ordered pass, not iterated to a fixed point: removing users can push a
    POI back under the threshold and that POI is kept.
    """
    poi_counts = Counter(c.raw_poi_key for c in checkins)
    kept = [c for c in checkins if poi_counts[c.raw_poi_key] >= config.min_poi_visits]
    user_counts = Counter(c.raw_user_key for c in kept)
    return [c for c in kept if user_counts[c.raw_user_key] >= config.min_user_records]


def remap_ids(checkins: Sequence[CheckIn]) -> tuple[list[CheckIn], IdMaps]:
    """Assign contiguous user/POI ids by first chronological appearance.

    Category ids are kept when every raw category key is a non-negative integer,
    otherwise they are remapped the same way as users and POIs.
    """
    ordered = sorted(checkins, key=lambda c: c.sort_key)
    users: dict[str, int] = {}
    pois: dict[str, int] = {}
    cats: dict[str, int] = {}
    for c in ordered:
        users.setdefault(c.raw_user_key, len(users))
        pois.setdefault(c.raw_poi_key, len(pois))
        cats.setdefault(c.raw_category_key, len(cats))
    numeric_cats = all(k.isdigit() for k in cats)
    remapped = [
        replace(
            c,
            user_id=users[c.raw_user_key],
            poi_id=pois[c.raw_poi_key],
            category_id=int(c.raw_category_key) if numeric_cats else cats[c.raw_category_key],
        )
        for c in checkins
    ]
    maps = IdMaps(list(users), list(pois), list(cats), categories_remapped=not numeric_cats)
    return remapped, maps


# --------------------------------------------------------------------------
# segmentation / splitting
# --------------------------------------------------------------------------


def segment_trajectories(checkins: Iterable[CheckIn], config: SegmentationConfig) -> list[Trajectory]:
    """Greedy per-user segmentation anchored at each trajectory's first check-in.

    A check-in joins the open trajectory while ``t - t_first <= delta_t``.
    Single check-in groups are discarded. Ids follow (user_id, start_time) order.
    """
    per_user: dict[int, list[CheckIn]] = defaultdict(list)
    for c in checkins:
        per_user[c.user_id].append(c)

    groups: list[tuple[int, datetime, tuple[CheckIn, ...]]] = []
    for user in sorted(per_user):
        seq = sorted(per_user[user], key=lambda c: c.sort_key)
        current: list[CheckIn] = []
        for c in seq:
            if current and c.timestamp - current[0].timestamp > config.delta_t:
                if len(current) >= 2:
                    groups.append((user, current[0].timestamp, tuple(current)))
                current = []
            current.append(c)
        if len(current) >= 2:
            groups.append((user, current[0].timestamp, tuple(current)))

    groups.sort(key=lambda g: (g[0], g[1]))
    return [Trajectory(i, user, cs) for i, (user, _, cs) in enumerate(groups)]


def chronological_split(trajectories: Sequence[Trajectory], config: SegmentationConfig) -> DatasetSplit:
    """Split by end time at the cumulative check-in boundaries, then prune unseen ids.

    A trajectory goes to train while the running check-in count including it
    stays within ``ratio_train * total``; likewise for validation.
    """
    r_train, r_val, _ = config.split_ratios
    ordered = sorted(trajectories, key=lambda t: (t.end_time, t.trajectory_id))
    total = sum(len(t) for t in ordered)
    train_cut = r_train * total + 1e-9
    val_cut = (r_train + r_val) * total + 1e-9

    parts: tuple[list[Trajectory], list[Trajectory], list[Trajectory]] = ([], [], [])
    running = 0
    for t in ordered:
        running += len(t)
        if running <= train_cut:
            parts[0].append(t)
        elif running <= val_cut:
            parts[1].append(t)
        else:
            parts[2].append(t)
    split = DatasetSplit(*parts, id_maps=IdMaps())
    return prune_unseen(split)


def prune_unseen(split: DatasetSplit) -> DatasetSplit:
    """Remove validation/test trajectories touching a user or POI absent from train."""
    seen_users = {t.user_id for t in split.train}
    seen_pois = {c.poi_id for t in split.train for c in t.checkins}

    def known(t: Trajectory) -> bool:
        return t.user_id in seen_users and all(c.poi_id in seen_pois for c in t.checkins)

    stats = dict(split.stats)
    kept = {}
    for name in ("validation", "test"):
        before = split.by_name(name)
        kept[name] = [t for t in before if known(t)]
        stats[f"{name}_pruned"] = len(before) - len(kept[name])
        if before and not kept[name]:
            log.warning("pruning unseen users/POIs emptied the %s split", name)
    return DatasetSplit(split.train, kept["validation"], kept["test"], split.id_maps, stats)


def preprocess(checkins: Sequence[CheckIn], config: SegmentationConfig) -> DatasetSplit:
    """filter -> remap -> segment -> split, with summary counts in ``stats``."""
    filtered = filter_dataset(checkins, config)
    remapped, maps = remap_ids(filtered)
    trajectories = segment_trajectories(remapped, config)
    split = chronological_split(trajectories, config)
    split.id_maps = maps
    split.stats.update(
        {
            "raw_checkins": len(checkins),
            "filtered_checkins": len(filtered),
            "n_users": maps.n_users,
            "n_pois": maps.n_pois,
            "trajectories": len(trajectories),
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        }
    )
    return split


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _fmt_time(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def checkin_to_dict(c: CheckIn) -> dict:
    return {
        "user_id": c.user_id,
        "poi_id": c.poi_id,
        "category_id": c.category_id,
        "category_name": c.category_name,
        "timestamp": _fmt_time(c.timestamp),
        "offset_minutes": c.offset_minutes,
        "latitude": c.latitude,
        "longitude": c.longitude,
        "raw_user_key": c.raw_user_key,
        "raw_poi_key": c.raw_poi_key,
        "raw_category_key": c.raw_category_key,
        "row": c.row,
    }


def checkin_from_dict(d: dict) -> CheckIn:
    return CheckIn(
        user_id=d["user_id"],
        poi_id=d["poi_id"],
        category_id=d["category_id"],
        category_name=d["category_name"],
        timestamp=parse_timestamp(d["timestamp"]),
        latitude=d["latitude"],
        longitude=d["longitude"],
        raw_user_key=d["raw_user_key"],
        raw_poi_key=d["raw_poi_key"],
        raw_category_key=d.get("raw_category_key", ""),
        offset_minutes=d.get("offset_minutes", 0),
        row=d.get("row", 0),
    )


def trajectory_to_dict(t: Trajectory) -> dict:
    return {
        "trajectory_id": t.trajectory_id,
        "user_id": t.user_id,
        "start_time": _fmt_time(t.start_time),
        "end_time": _fmt_time(t.end_time),
        "checkins": [checkin_to_dict(c) for c in t.checkins],
    }


def trajectory_from_dict(d: dict) -> Trajectory:
    return Trajectory(d["trajectory_id"], d["user_id"], tuple(checkin_from_dict(c) for c in d["checkins"]))


def save_split(split: DatasetSplit, directory: str | os.PathLike) -> list[Path]:
    """Write ``{train,validation,test}.jsonl`` plus ``id_maps.json``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SPLIT_NAMES:
        path = directory / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in sorted(split.by_name(name), key=lambda t: t.trajectory_id):
                fh.write(json.dumps(trajectory_to_dict(t), sort_keys=True, ensure_ascii=False) + "\n")
        written.append(path)
    side = directory / "id_maps.json"
    payload = {"format_version": SPLIT_FORMAT_VERSION, "id_maps": split.id_maps.to_dict(), "stats": split.stats}
    side.write_text(json.dumps(payload, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    written.append(side)
    return written


def load_split(directory: str | os.PathLike) -> DatasetSplit:
    directory = Path(directory)
    side = json.loads((directory / "id_maps.json").read_text(encoding="utf-8"))
    if side.get("format_version") != SPLIT_FORMAT_VERSION:
        raise ValueError(f"unsupported split format version {side.get('format_version')!r}")
    parts = []
    for name in SPLIT_NAMES:
        with open(directory / f"{name}.jsonl", encoding="utf-8") as fh:
            parts.append([trajectory_from_dict(json.loads(line)) for line in fh if line.strip()])
    return DatasetSplit(*parts, id_maps=IdMaps.from_dict(side["id_maps"]), stats=side["stats"])
