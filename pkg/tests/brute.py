"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's numerical code; each function is written
from the definition with plain Python loops and ``math.fsum``.
"""
import itertools
import math


def pearson(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def avg_rank(x):
    # rank = 1 + (#smaller) + (#equal - 1) / 2
    return [1 + sum(v < a for v in x) + (sum(v == a for v in x) - 1) / 2 for a in x]


def spearman(x, y):
    return pearson(avg_rank(x), avg_rank(y))


def average_precision(pred, gt, top_fraction):
    n = len(gt)
    n_pos = min(n, max(1, math.ceil(round(top_fraction * n, 9))))
    by_gt = sorted(range(n), key=lambda i: (-gt[i], i))
    positives = set(by_gt[:n_pos])
    by_pred = sorted(range(n), key=lambda i: (-pred[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(by_pred, 1):
        if i in positives:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / n_pos


def recurrence(k):
    if k == 1:
        return 1
    return recurrence(k // 2) + recurrence(k - k // 2) + 2 * k - 1


def smooth(w, sigma, size):
    r = (size - 1) // 2
    out = []
    for i in range(len(w)):
        num = den = 0.0
        for o in range(-r, r + 1):
            if 0 <= i + o < len(w):
                g = math.exp(-0.5 * (o / sigma) ** 2)
                num += g * w[i + o]
                den += g
        out.append(min(1.0, max(0.0, num / den)))
    return out


def chunk_qoe(levels_kbps, rebuffers, weights, mu=4.3, smooth_pen=1.0, prev_kbps=None, scope="all"):
    total = 0.0
    prev = prev_kbps
    for r, rb, w in zip(levels_kbps, rebuffers, weights):
        q = r / 1000.0
        s = 0.0 if prev is None else abs(q - prev / 1000.0)
        pen = mu * rb + smooth_pen * s
        total += w * (q - pen) if scope == "all" else w * q - pen
        prev = r
    return total


def best_plan(ladder, horizon, buffer_s, last_kbps, tp_kbps, weights, chunk_s=1.0, mu=4.3, smooth_pen=1.0):
    """Exhaustive plan search; among plans within 1e-9 of the best, the lexicographically first wins."""
    scored = []
    for plan in itertools.product(range(len(ladder)), repeat=horizon):
        buf, rbs = buffer_s, []
        for lv in plan:
            dl = ladder[lv] * chunk_s / tp_kbps
            rbs.append(max(dl - buf, 0.0))
            buf = max(buf - dl, 0.0) + chunk_s
        scored.append((plan, chunk_qoe([ladder[lv] for lv in plan], rbs, weights, mu, smooth_pen, last_kbps)))
    top = max(v for _, v in scored)
    for plan, v in scored:
        if v >= top - 1e-9 * max(1.0, abs(top)):
            return plan, v


def replay_hits(events):
    """Recount pool hits from the raw event dicts of a timeline."""
    pool = {}
    hits = []
    for e in events:
        if e["event"] == "ForecastCompleted":
            for off, w in enumerate(e["values"]):
                chunk = e["start_chunk"] + off
                stamp = (e["submitted_at"], e["window"])
                if chunk not in pool or stamp >= pool[chunk][0]:
                    pool[chunk] = (stamp, off < e["n_real"])
        elif e["event"] == "WeightsQueried":
            hits.append(all(c in pool and pool[c][1] for c in e["chunks"]))
    return hits
