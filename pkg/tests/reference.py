"""Brute-force reference implementations used as test oracles.

Written against plain dicts/tuples and deliberately share no code with the
package beyond the input records.
"""

from __future__ import annotations

import math

import numpy as np


def ref_preprocess(rows, min_poi=10, min_user=10, delta_seconds=86400, ratios=(0.8, 0.1, 0.1)):
    """rows: list of (row_no, user_key, poi_key, epoch_seconds).

    Returns {"train"|"validation"|"test": [(tid, user_id, ((poi_id, epoch), ...)), ...]}.
    """
    poi_count = {}
    for _, _, p, _ in rows:
        poi_count[p] = poi_count.get(p, 0) + 1
    step1 = [r for r in rows if poi_count[r[2]] >= min_poi]
    user_count = {}
    for _, u, _, _ in step1:
        user_count[u] = user_count.get(u, 0) + 1
    kept = [r for r in step1 if user_count[r[1]] >= min_user]

    chrono = sorted(kept, key=lambda r: (r[3], r[0]))
    uid, pid = {}, {}
    for _, u, p, _ in chrono:
        if u not in uid:
            uid[u] = len(uid)
        if p not in pid:
            pid[p] = len(pid)

    trajs = []
    for u in sorted(uid, key=lambda k: uid[k]):
        mine = [r for r in chrono if r[1] == u]
        i = 0
        while i < len(mine):
            j = i
            while j + 1 < len(mine) and mine[j + 1][3] - mine[i][3] <= delta_seconds:
                j += 1
            if j > i:
                trajs.append((uid[u], mine[i][3], tuple((pid[r[2]], r[3]) for r in mine[i : j + 1])))
            i = j + 1
    trajs.sort(key=lambda t: (t[0], t[1]))
    trajs = [(k, u, cs) for k, (u, _, cs) in enumerate(trajs)]

    ordered = sorted(trajs, key=lambda t: (t[2][-1][1], t[0]))
    sizes = [len(t[2]) for t in ordered]
    prefix = [0]
    for s in sizes:
        prefix.append(prefix[-1] + s)
    total = prefix[-1]
    out = {"train": [], "validation": [], "test": []}
    for i, t in enumerate(ordered):
        upto = prefix[i + 1]
        # compare in integers: upto <= r*total  <=>  upto*10^9 <= round(r*10^9)*total
        if upto * 10**9 <= round(ratios[0] * 10**9) * total:
            out["train"].append(t)
        elif upto * 10**9 <= round((ratios[0] + ratios[1]) * 10**9) * total:
            out["validation"].append(t)
        else:
            out["test"].append(t)

    users = {t[1] for t in out["train"]}
    pois = {p for t in out["train"] for p, _ in t[2]}
    for name in ("validation", "test"):
        out[name] = [t for t in out[name] if t[1] in users and all(p in pois for p, _ in t[2])]
    return {k: sorted(v) for k, v in out.items()}


def ref_cosine(a, b) -> float:
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def ref_retrievals(trajectories, key_vecs, query_vecs, budget, self_only=False, top_k=None):
    """Exhaustive O(T^2) selection: every pair scored, candidates fully ranked, greedy-with-stop.

    trajectories: list of (tid, user, start_epoch, end_epoch, length).
    Returns {tid: [(qid, sim), ...]}.
    """
    out = {}
    for tid, user, start, _, _ in trajectories:
        scored = []
        for qid, quser, _, qend, qlen in trajectories:
            if qid == tid or not qend < start:
                continue
            if self_only and quser != user:
                continue
            scored.append((ref_cosine(key_vecs[tid], query_vecs[qid]), qend, qid, qlen))
        scored.sort(key=lambda s: (-s[0], s[1], s[2]))
        chosen, used = [], 0
        for sim, _, qid, qlen in scored:
            if budget == 0 or (top_k is not None and len(chosen) >= top_k):
                break
            if used + qlen > budget:
                if not chosen:
                    chosen.append((qid, sim))
                break
            chosen.append((qid, sim))
            used += qlen
        out[tid] = chosen
    return out


def ref_acc(pred_ids, gold_ids):
    hits = 0
    for p, g in zip(pred_ids, gold_ids):
        if p is not None and p == g:
            hits += 1
    return hits


def as_array(v):
    return np.asarray(v, dtype=np.float64)
