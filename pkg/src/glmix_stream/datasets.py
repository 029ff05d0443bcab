"""Data preparation: MovieLens-style ratings and synthetic drifting streams."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

from .model import Assignment, Instance, SparseVector

FOURTEEN_DAYS_MS = 14 * 24 * 3600 * 1000
HOUR_MS = 3600 * 1000


class DataError(ValueError):
    """Malformed input data."""


def binarize(rating: float) -> int:
    """1 for ratings of at least 4.0, else 0."""
    if not np.isfinite(rating):
        raise DataError(f"non-finite rating {rating!r}")
    return int(rating >= 4.0)


def compress_time(ts: int, t_min: int, t_max: int, target_span_ms: int = FOURTEEN_DAYS_MS) -> int:
    """Map ``[t_min, t_max]`` linearly onto ``[0, target_span_ms]``, rounded."""
    if not t_min < t_max:
        raise ValueError("t_min must be smaller than t_max")
    if not t_min <= ts <= t_max:
        raise ValueError(f"timestamp {ts} outside [{t_min}, {t_max}]")
    return int(round(target_span_ms * (ts - t_min) / (t_max - t_min)))


# -- ALS ------------------------------------------------------------------

def als_objective(R: sparse.csr_matrix, P: np.ndarray, Q: np.ndarray, reg: float) -> float:
    coo = R.tocoo()
    resid = coo.data - np.einsum("ij,ij->i", P[coo.row], Q[coo.col])
    return float(resid @ resid + reg * (np.sum(P * P) + np.sum(Q * Q)))


def _ridge_rows(R: sparse.csr_matrix, F: np.ndarray, reg: float) -> np.ndarray:
    k = F.shape[1]
    out = np.empty((R.shape[0], k))
    eye = reg * np.eye(k)
    for u in range(R.shape[0]):
        lo, hi = R.indptr[u], R.indptr[u + 1]
        Fi = F[R.indices[lo:hi]]
        out[u] = np.linalg.solve(Fi.T @ Fi + eye, Fi.T @ R.data[lo:hi])
    return out


def als_factorize(ratings, rank: int, reg: float = 0.1, iters: int = 15, seed: int = 0,
                  history: list | None = None):
    """Explicit-feedback ALS on observed entries.

    Minimizes ``sum_obs (r_ui - p_u . q_i)^2 + reg (||P||^2 + ||Q||^2)`` by
    alternating exact ridge solves.  Factors are initialised from
    ``N(0, 0.1^2)`` with the given seed.  If ``history`` is a list, the
    objective after every half-iteration is appended.

    Returns
    -------
    P : array (n_users, rank)
    Q : array (n_items, rank)
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if reg <= 0:
        raise ValueError("reg must be positive")
    R = sparse.csr_matrix(ratings, dtype=np.float64)
    R.sum_duplicates()
    R.sort_indices()
    if np.any(np.diff(R.indptr) == 0):
        raise DataError("every user row needs at least one rating")
    Rt = R.T.tocsr()
    Rt.sort_indices()
    if np.any(np.diff(Rt.indptr) == 0):
        raise DataError("every item column needs at least one rating")
    rng = np.random.default_rng(seed)
    P = 0.1 * rng.standard_normal((R.shape[0], rank))
    Q = 0.1 * rng.standard_normal((R.shape[1], rank))
    for _ in range(iters):
        P = _ridge_rows(R, Q, reg)
        if history is not None:
            history.append(als_objective(R, P, Q, reg))
        Q = _ridge_rows(Rt, P, reg)
        if history is not None:
            history.append(als_objective(R, P, Q, reg))
    return P, Q


# -- MovieLens ------------------------------------------------------------

@dataclass
class Ratings:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def subset(self, mask) -> "Ratings":
        return Ratings(self.users[mask], self.items[mask], self.ratings[mask], self.timestamps[mask])


def read_ratings_csv(path) -> Ratings:
    """Read ``userId,movieId,rating,timestamp`` rows (header required)."""
    users, items, vals, tss = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["userId", "movieId", "rating", "timestamp"]:
            raise DataError(f"{path}:1: expected header userId,movieId,rating,timestamp")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                u, i, r, t = row[:4]
                users.append(int(u))
                items.append(int(i))
                vals.append(float(r))
                tss.append(int(t))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if not np.isfinite(vals[-1]):
                raise DataError(f"{path}:{lineno}: non-finite rating")
    return Ratings(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                   np.array(vals), np.array(tss, dtype=np.int64))


def write_ratings_csv(path, r: Ratings) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        for row in zip(r.users, r.items, r.ratings, r.timestamps):
            w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), int(row[3])])


def cap_ratings(r: Ratings, max_users: int | None = None, max_items: int | None = None) -> Ratings:
    """Keep the most active users and items (ties broken by smaller id)."""
    def top(ids, cap):
        uniq, counts = np.unique(ids, return_counts=True)
        order = np.lexsort((uniq, -counts))
        return set(uniq[order[:cap]].tolist())

    mask = np.ones(len(r), dtype=bool)
    if max_items is not None:
        keep = top(r.items, max_items)
        mask &= np.array([i in keep for i in r.items])
    if max_users is not None:
        keep = top(r.users[mask], max_users)
        mask &= np.array([u in keep for u in r.users])
    return r.subset(mask)


def item_factors_from_ratings(r: Ratings, rank: int = 30, reg: float = 0.1, iters: int = 15,
                              seed: int = 0) -> dict[int, np.ndarray]:
    uids, urow = np.unique(r.users, return_inverse=True)
    iids, icol = np.unique(r.items, return_inverse=True)
    R = sparse.coo_matrix((r.ratings, (urow, icol)), shape=(uids.size, iids.size))
    _, Q = als_factorize(R, rank, reg, iters, seed)
    return {int(i): Q[j] for j, i in enumerate(iids)}


def build_movielens_instances(ratings: Ratings, item_factors: dict[int, np.ndarray],
                              target_span_ms: int = FOURTEEN_DAYS_MS) -> list[Instance]:
    """One instance per rating, sorted by compressed timestamp.

    Fixed and per-user random-effect features are both the item's latent
    factors followed by a constant 1.0 bias at index ``rank``.
    """
    if not len(ratings):
        return []
    t_min, t_max = int(ratings.timestamps.min()), int(ratings.timestamps.max())
    rank = None
    out = []
    for u, i, val, t in zip(ratings.users, ratings.items, ratings.ratings, ratings.timestamps):
        q = item_factors.get(int(i))
        if q is None:
            raise DataError(f"no latent factors for item {int(i)}")
        rank = q.shape[0] if rank is None else rank
        feats = SparseVector.from_dense(np.append(q, 1.0))
        ts = compress_time(int(t), t_min, t_max, target_span_ms) if t_max > t_min else 0
        out.append(Instance(ts, binarize(float(val)), feats,
                            (Assignment("user", str(int(u)), feats),)))
    order = sorted(range(len(out)), key=lambda k: out[k].timestamp)
    return [out[k] for k in order]


def prepare_movielens(path, rank: int = 30, reg: float = 0.1, iters: int = 15, seed: int = 0,
                      max_users: int | None = None, max_items: int | None = None,
                      target_span_ms: int = FOURTEEN_DAYS_MS):
    """Read, cap, factorize and convert a ratings CSV; returns (instances, manifest)."""
    r = read_ratings_csv(path)
    if max_users is not None or max_items is not None:
        r = cap_ratings(r, max_users, max_items)
    if not len(r):
        raise DataError("no ratings left after capping")
    factors = item_factors_from_ratings(r, rank, reg, iters, seed)
    instances = build_movielens_instances(r, factors, target_span_ms)
    manifest = {
        "source": "movielens",
        "ratings": len(r),
        "instances": len(instances),
        "users": int(np.unique(r.users).size),
        "items": int(np.unique(r.items).size),
        "rank": rank, "als_reg": reg, "als_iters": iters, "seed": seed,
        "span_ms": [instances[0].timestamp, instances[-1].timestamp],
        "positive_rate": float(np.mean([i.label for i in instances])),
        "fixed_dim": rank + 1, "re_dims": {"user": rank + 1},
    }
    return instances, manifest


def surrogate_ratings(n_users: int = 600, n_items: int = 1200, n_ratings: int = 100_000,
                      rank: int = 8, drift: float = 1.0, active_span: float = 0.02,
                      seed: int = 0) -> Ratings:
    """MovieLens-shaped ratings from a latent-factor model with taste drift.

    Stands in for the public ratings file when it cannot be downloaded.
    Half-star ratings in [0.5, 5], timestamps spread over twenty years, user
    tastes move linearly by ``drift`` over that span; user and item activity
    is heavy-tailed.  Each user is active for an exponential fraction of the
    span with mean ``active_span``; pass ``active_span=inf`` to spread every
    user over the whole span.
    """
    rng = np.random.default_rng(seed)
    start, span = 820_000_000, 20 * 365 * 24 * 3600
    U0 = rng.standard_normal((n_users, rank)) / np.sqrt(rank)
    U1 = U0 + drift * rng.standard_normal((n_users, rank)) / np.sqrt(rank)
    V = rng.standard_normal((n_items, rank))
    item_bias = 0.5 * rng.standard_normal(n_items)
    user_bias = 0.3 * rng.standard_normal(n_users)
    uw = rng.pareto(1.5, n_users) + 1.0
    iw = rng.pareto(1.2, n_items) + 1.0
    if n_ratings > n_users * n_items:
        raise ValueError("more ratings requested than user-item pairs")
    # draw pairs until n_ratings distinct ones exist, keeping first occurrences
    pair = np.empty(0, dtype=np.int64)
    while True:
        draw = (rng.choice(n_users, n_ratings, p=uw / uw.sum()).astype(np.int64) * n_items
                + rng.choice(n_items, n_ratings, p=iw / iw.sum()))
        pair = np.concatenate([pair, draw])
        _, first = np.unique(pair, return_index=True)
        if first.size >= n_ratings:
            break
        uw, iw = np.sqrt(uw), np.sqrt(iw)
    first.sort()
    pair = pair[first[:n_ratings]]
    users, items = pair // n_items, pair % n_items
    # users rate in a burst after joining, as in the public logs
    window = np.minimum(rng.exponential(active_span, n_users), 1.0)
    joined = rng.random(n_users) * (1.0 - window)
    frac = joined[users] + window[users] * rng.random(users.size)
    ts = start + (frac * span).astype(np.int64)
    taste = (1 - frac)[:, None] * U0[users] + frac[:, None] * U1[users]
    latent = 3.4 + user_bias[users] + item_bias[items] + np.einsum("ij,ij->i", taste, V[items])
    noisy = latent + 0.6 * rng.standard_normal(users.size)
    vals = np.clip(np.round(noisy * 2) / 2, 0.5, 5.0)
    order = np.argsort(ts, kind="stable")
    return Ratings(users[order] + 1, items[order] + 1, vals[order], ts[order])


# -- synthetic drifting stream -------------------------------------------

@dataclass
class SyntheticStream:
    instances: list[Instance]
    fixed_truth: np.ndarray
    truth_before: dict[str, np.ndarray]
    truth_after: dict[str, np.ndarray]
    true_logits: np.ndarray
    drift_ts: int
    fixed_dim: int
    re_dims: dict[str, int]
    meta: dict = field(default_factory=dict)

    def truth_log(self) -> list[dict]:
        rows = [{"kind": "fixed", "w": self.fixed_truth.tolist()}]
        for eid in sorted(self.truth_before, key=int):
            rows.append({"kind": "entity", "id": eid, "drift_ts": self.drift_ts,
                         "w_before": self.truth_before[eid].tolist(),
                         "w_after": self.truth_after[eid].tolist()})
        return rows

    def write_truth_log(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.truth_log():
                fh.write(json.dumps(row, sort_keys=True))
                fh.write("\n")


def synth_drift_stream(n_entities: int, n_per_entity: int, drift_at: float = 0.5,
                       drift_magnitude: float = 2.0, seed: int = 0, *,
                       span_ms: int = 96 * HOUR_MS, fixed_dim: int = 3, re_dim: int = 3,
                       features: str = "gaussian", fixed_scale: float = 1.0,
                       entity_scale: float = 1.0, re_type: str = "entity") -> SyntheticStream:
    """Logistic stream with per-entity truths that jump at ``drift_at``.

    Each entity has a ground-truth weight vector ``w ~ N(0, entity_scale^2 I)``;
    at time ``drift_at * span_ms`` it moves by ``drift_magnitude`` in a
    uniformly random direction.  Fixed features are standard normal plus a
    bias; random-effect features are standard normal plus a bias
    (``features="gaussian"``) or a one-hot category out of ``re_dim``
    (``features="onehot"``).  Instance times are uniform over the span.
    """
    if n_entities < 1 or n_per_entity < 1:
        raise ValueError("entity counts must be positive")
    if not 0 < drift_at < 1:
        raise ValueError("drift_at must lie in (0, 1)")
    if features not in ("gaussian", "onehot"):
        raise ValueError("features must be 'gaussian' or 'onehot'")
    rng = np.random.default_rng(seed)
    d_f = fixed_dim + 1
    d_r = re_dim + 1 if features == "gaussian" else re_dim
    w_f = fixed_scale * rng.standard_normal(d_f) / np.sqrt(d_f)
    drift_ts = int(drift_at * span_ms)
    n = n_entities * n_per_entity
    ent = np.repeat(np.arange(n_entities), n_per_entity)
    ts = rng.integers(0, span_ms, size=n)
    X = np.hstack([rng.standard_normal((n, fixed_dim)), np.ones((n, 1))])
    if features == "gaussian":
        Z = np.hstack([rng.standard_normal((n, re_dim)), np.ones((n, 1))])
    else:
        Z = np.eye(re_dim)[rng.integers(0, re_dim, size=n)]
    W0 = entity_scale * rng.standard_normal((n_entities, d_r))
    direction = rng.standard_normal((n_entities, d_r))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    W1 = W0 + drift_magnitude * direction
    W = np.where((ts >= drift_ts)[:, None], W1[ent], W0[ent])
    logits = X @ w_f + np.einsum("ij,ij->i", Z, W)
    labels = (rng.random(n) < expit(logits)).astype(int)
    order = np.lexsort((np.arange(n), ts))
    instances = []
    for k in order:
        instances.append(Instance(int(ts[k]), int(labels[k]), SparseVector.from_dense(X[k]),
                                  (Assignment(re_type, str(int(ent[k])), SparseVector.from_dense(Z[k])),)))
    ids = [str(e) for e in range(n_entities)]
    return SyntheticStream(instances, w_f, dict(zip(ids, W0)), dict(zip(ids, W1)),
                           logits[order], drift_ts, d_f, {re_type: d_r},
                           {"seed": seed, "n_entities": n_entities, "n_per_entity": n_per_entity,
                            "drift_at": drift_at, "drift_magnitude": drift_magnitude,
                            "span_ms": span_ms, "features": features})
