"""Cross-modal retrieval metrics: median rank and recall at K."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_KS = (1, 5, 10)
DIRECTIONS = ("im2recipe", "recipe2im")


@dataclass
class RetrievalResult:
    ranks: np.ndarray
    medr: float
    recall_at: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"medr": self.medr, **{f"R@{k}": v for k, v in self.recall_at.items()}}


def lower_median(values) -> float:
    v = np.sort(np.asarray(values))
    if len(v) == 0:
        raise ValueError("median of an empty sequence")
    return float(v[(len(v) - 1) // 2])


def recall_at(ranks, k: int) -> float:
    return float(np.mean(np.asarray(ranks) <= k))


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding in retrieval")
    return x / n


def rank_queries(queries, pool, truth=None, ks: Sequence[int] = DEFAULT_KS) -> RetrievalResult:
    """Rank of each query's true pool item under cosine similarity.

    ``truth[i]`` is the pool index matching query ``i`` (identity by
    default). Equal similarities are ordered by pool index.
    """
    q, p = _unit(queries), _unit(pool)
    if q.shape[1] != p.shape[1]:
        raise ValueError(f"dimension mismatch: queries {q.shape[1]} vs pool {p.shape[1]}")
    if len(p) == 0:
        raise ValueError("empty retrieval pool")
    truth = np.arange(len(q)) if truth is None else np.asarray(truth, dtype=np.int64)
    if truth.shape != (len(q),) or truth.min(initial=0) < 0 or truth.max(initial=0) >= len(p):
        raise ValueError("truth must give one valid pool index per query")
    sims = q @ p.T
    true_sim = sims[np.arange(len(q)), truth][:, None]
    better = (sims > true_sim).sum(1)
    tied_before = ((sims == true_sim) & (np.arange(len(p))[None, :] < truth[:, None])).sum(1)
    ranks = better + tied_before + 1
    return RetrievalResult(ranks, lower_median(ranks), {k: recall_at(ranks, k) for k in ks})


def evaluate_pools(image_emb, text_emb, pool_size: int, repetitions: int = 10, seed: int = 0,
                   ks: Sequence[int] = DEFAULT_KS) -> dict:
    """Average retrieval metrics over random pools of paired embeddings.

    Row ``i`` of ``image_emb`` pairs with row ``i`` of ``text_emb``. Returns
    ``{direction: {metric: {"mean", "std"}}}`` for both directions.
    """
    image_emb, text_emb = np.asarray(image_emb), np.asarray(text_emb)
    n = len(image_emb)
    if len(text_emb) != n:
        raise ValueError("image and text embeddings must pair up")
    if pool_size > n:
        raise ValueError(f"pool size {pool_size} exceeds the {n} available pairs (short by {pool_size - n})")
    rng = np.random.default_rng(seed)
    per = {d: [] for d in DIRECTIONS}
    for _ in range(repetitions):
        idx = np.sort(rng.choice(n, size=pool_size, replace=False))
        per["im2recipe"].append(rank_queries(image_emb[idx], text_emb[idx], ks=ks).to_json())
        per["recipe2im"].append(rank_queries(text_emb[idx], image_emb[idx], ks=ks).to_json())
    return {d: aggregate(rows) for d, rows in per.items()}


def aggregate(rows: Sequence[dict]) -> dict:
    return {key: {"mean": float(np.mean([r[key] for r in rows])),
                  "std": float(np.std([r[key] for r in rows]))}
            for key in rows[0]}


def random_baseline(pool_size: int, dim: int = 64, repetitions: int = 100, seed: int = 0) -> dict:
    """MedR statistics of random Gaussian embeddings (expected (P + 1) / 2)."""
    rng = np.random.default_rng(seed)
    medrs = []
    for _ in range(repetitions):
        q = rng.standard_normal((pool_size, dim))
        p = rng.standard_normal((pool_size, dim))
        medrs.append(rank_queries(q, p).medr)
    return {"medr": {"mean": float(np.mean(medrs)), "std": float(np.std(medrs))}}


def format_table(rows: dict[str, dict], ks: Sequence[int] = DEFAULT_KS) -> str:
    """Text table with MedR and R@K for both directions, one line per model."""
    cols = ["MedR"] + [f"R@{k}" for k in ks]
    header = f"{'model':<24}" + "".join(f"{d + ' ' + c:>18}" for d in DIRECTIONS for c in cols)
    lines = [header, "-" * len(header)]
    for name, res in rows.items():
        cells = []
        for d in DIRECTIONS:
            for c in cols:
                key = "medr" if c == "MedR" else c
                v = res.get(d, {}).get(key)
                cells.append(f"{'-':>18}" if v is None else f"{v['mean']:>18.4f}")
        lines.append(f"{name:<24}" + "".join(cells))
    return "\n".join(lines)
