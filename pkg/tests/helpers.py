from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone

from trajprompt.ingest import CheckIn, Trajectory

EPOCH = datetime(2012, 4, 3, 0, 0, tzinfo=timezone.utc)

CATEGORIES = [
    (1, "Coffee Shop"),
    (2, "Art Gallery"),
    (3, "Subway"),
    (4, "Office"),
    (5, "Italian Restaurant"),
    (6, "Gym / Fitness Center"),
    (7, "Bar"),
    (8, "Airport"),
    (9, "Park"),
    (10, "Electronics Store"),
]


def ck(
    user: int = 0,
    poi: int = 0,
    hours: float = 0.0,
    cat: tuple[int, str] = (1, "Coffee Shop"),
    row: int = 0,
    offset: int = 0,
) -> CheckIn:
    return CheckIn(
        user_id=user,
        poi_id=poi,
        category_id=cat[0],
        category_name=cat[1],
        timestamp=EPOCH + timedelta(hours=hours),
        latitude=40.7,
        longitude=-74.0,
        raw_user_key=f"u{user}",
        raw_poi_key=f"p{poi}",
        raw_category_key=str(cat[0]),
        offset_minutes=offset,
        row=row,
    )


def traj(tid: int, user: int, hours: list[float], pois: list[int] | None = None, cat=None) -> Trajectory:
    pois = pois or [tid * 10 + i for i in range(len(hours))]
    return Trajectory(
        tid,
        user,
        tuple(ck(user, p, h, cat or CATEGORIES[(p + tid) % len(CATEGORIES)], row=i) for i, (p, h) in enumerate(zip(pois, hours))),
    )


def synthetic_csv(n_checkins: int = 5000, n_users: int = 200, n_pois: int = 150, seed: int = 7) -> str:
    """Check-in log as CSV: users visit in sessions of 1-6 check-ins spread over a few hours."""
    rng = random.Random(seed)
    poi_cat = {p: CATEGORIES[rng.randrange(len(CATEGORIES))] for p in range(n_pois)}
    # skewed popularity so some POIs fall under the visit threshold
    weights = [1.0 / (1 + p) ** 0.9 for p in range(n_pois)]
    user_weights = [rng.uniform(0.2, 3.0) for _ in range(n_users)]
    rows = []
    while len(rows) < n_checkins:
        u = rng.choices(range(n_users), user_weights)[0]
        day = rng.randrange(120)
        start = day * 24 + rng.uniform(6, 20)
        for k in range(rng.randint(1, 6)):
            if len(rows) >= n_checkins:
                break
            t = start + k * rng.uniform(0.2, 6.0)
            p = rng.choices(range(n_pois), weights)[0]
            ts = (EPOCH + timedelta(seconds=int(t * 3600))).strftime("%Y-%m-%dT%H:%M:%SZ")
            cid, cname = poi_cat[p]
            rows.append(f"user{u},venue{p},{cid},{cname},{40 + rng.random():.5f},{-74 + rng.random():.5f},{ts},{-240}")
    rng.shuffle(rows)
    header = "user_id,poi_id,category_id,category_name,latitude,longitude,timestamp,offset"
    return header + "\n" + "\n".join(rows) + "\n"


def synthetic_trajectories(n: int = 200, n_users: int = 15, n_pois: int = 60, seed: int = 1) -> list[Trajectory]:
    """Trajectories with overlapping time spans, lengths 2-12, ids in (user, start) order."""
    rng = random.Random(seed)
    raw = []
    for _ in range(n):
        user = rng.randrange(n_users)
        start = rng.uniform(0, 24 * 90)
        length = rng.randint(2, 12)
        hours = sorted(start + rng.uniform(0, 23) for _ in range(length))
        pois = [rng.randrange(n_pois) for _ in range(length)]
        raw.append((user, hours[0], hours, pois))
    raw.sort(key=lambda r: (r[0], r[1]))
    out = []
    for tid, (user, _, hours, pois) in enumerate(raw):
        cs = tuple(ck(user, p, h, CATEGORIES[p % len(CATEGORIES)], row=i) for i, (p, h) in enumerate(zip(pois, hours)))
        out.append(Trajectory(tid, user, cs))
    return out


def embed_trajectories(trajectories, embedder):
    from trajprompt.embedding import VectorStore
    from trajprompt.prompting import build_key_prompt, build_query_prompt
    from trajprompt.retrieval import key_id, query_id

    ids, texts = [], []
    for t in trajectories:
        ids += [key_id(t.trajectory_id), query_id(t.trajectory_id)]
        texts += [build_key_prompt(t), build_query_prompt(t)]
    return VectorStore.build(ids, embedder.embed(texts))
