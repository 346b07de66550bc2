"""Canonical ingredient vocabulary.

The build runs in stages: keep the most frequent raw ingredient strings,
merge strings that share a stem, train an embedding table, propose fusions
of tokens that sit close together in that table, and apply the accepted
fusions read from a reviewable decisions file
(``token_a<TAB>token_b<TAB>accept|reject`` per line).
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Recipe, normalize_ingredient
from .embeddings import PAD_INDEX, EmbeddingTable, train_embeddings

DECISIONS = ("pending", "accept", "reject")

_stemmer = PorterStemmer()


class UnknownIngredientError(KeyError):
    pass


@dataclass
class MergeProposal:
    token_a: str
    token_b: str
    similarity: float
    decision: str = "pending"

    @property
    def key(self) -> frozenset:
        return frozenset((self.token_a, self.token_b))


@dataclass
class IngredientVocabulary:
    canonical: list[str]
    raw_to_canonical: dict[str, int]
    counts: list[int] = field(default_factory=list)
    coverage: float = 0.0

    def __post_init__(self):
        if len(set(self.canonical)) != len(self.canonical):
            raise ValueError("canonical tokens must be unique")
        if any(t != t.lower() for t in self.canonical):
            raise ValueError("canonical tokens must be lowercase")
        bad = [r for r, i in self.raw_to_canonical.items() if not 0 <= i < len(self.canonical)]
        if bad:
            raise ValueError(f"raw strings map outside the canonical table: {bad[:5]}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.canonical)

    def lookup(self, raw: str) -> int:
        """Canonical index of a raw string; dropped strings raise."""
        key = normalize_ingredient(raw)
        try:
            return self.raw_to_canonical[key]
        except KeyError:
            raise UnknownIngredientError(raw) from None

    def canonical_of(self, raw: str) -> str:
        return self.canonical[self.lookup(raw)]

    def encode(self, ingredients: Iterable[str]) -> list[int]:
        """Embedding-row indices (canonical index + 1); unknown strings map to the pad row."""
        out = []
        for raw in ingredients:
            i = self.raw_to_canonical.get(normalize_ingredient(raw))
            out.append(PAD_INDEX if i is None else i + 1)
        return out

    def aliases(self) -> list[list[str]]:
        groups: list[list[str]] = [[] for _ in self.canonical]
        for raw, i in sorted(self.raw_to_canonical.items()):
            groups[i].append(raw)
        return groups

    def recompute_coverage(self, recipes: Iterable[Recipe]) -> float:
        self.coverage = coverage(self.raw_to_canonical, recipes)
        return self.coverage

    def digest(self) -> str:
        h = hashlib.sha256()
        for tok, al in zip(self.canonical, self.aliases()):
            h.update(("\t".join([tok, *al]) + "\n").encode("utf-8"))
        return h.hexdigest()

    # one canonical token and its aliases per line; the header carries coverage
    def save(self, path) -> None:
        lines = [f"#coverage\t{self.coverage!r}"]
        for tok, al, n in zip(self.canonical, self.aliases(), self._counts_or_zero()):
            lines.append("\t".join([tok, str(n), *al]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "IngredientVocabulary":
        canonical, mapping, counts, cov = [], {}, [], 0.0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if parts[0] == "#coverage":
                cov = float(parts[1])
                continue
            idx = len(canonical)
            canonical.append(parts[0])
            counts.append(int(parts[1]))
            for alias in parts[2:]:
                mapping[alias] = idx
        return cls(canonical, mapping, counts, cov)

    def _counts_or_zero(self) -> list[int]:
        return self.counts if len(self.counts) == len(self.canonical) else [0] * len(self.canonical)


def ingredient_counts(recipes: Iterable[Recipe]) -> Counter:
    """Number of recipes each normalized raw ingredient appears in."""
    counter: Counter = Counter()
    for r in recipes:
        counter.update(set(normalize_ingredient(x) for x in r.ingredients))
    return counter


def coverage(raw_to_canonical: Mapping[str, int], recipes: Iterable[Recipe]) -> float:
    """Fraction of recipes whose every ingredient resolves to a canonical token."""
    total = covered = 0
    for r in recipes:
        total += 1
        covered += all(normalize_ingredient(x) in raw_to_canonical for x in r.ingredients)
    return covered / total if total else 0.0


def frequency_cut(recipes: Iterable[Recipe], top_k: int) -> list[str]:
    """The ``top_k`` most frequent raw ingredients, ties broken lexicographically."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    counts = ingredient_counts(recipes)
    if not counts:
        raise ValueError("cannot cut an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ranked[:top_k]]


def stem(token: str) -> str:
    return "_".join(_stemmer.stem(part) for part in token.split("_"))


def _preference(token: str, counts: Mapping[str, int]):
    # most frequent, then shortest, then lexicographic
    return (-counts.get(token, 0), len(token), token)


def stem_merge(tokens: Sequence[str], counts: Mapping[str, int] | None = None) -> dict[str, str]:
    """Map each token to the preferred surface form among tokens sharing its stem."""
    counts = counts or {}
    groups: dict[str, list[str]] = {}
    for tok in tokens:
        groups.setdefault(stem(tok), []).append(tok)
    mapping = {}
    for members in groups.values():
        rep = min(members, key=lambda t: _preference(t, counts))
        for tok in members:
            mapping[tok] = rep
    return mapping


def vocabulary_from_mapping(
    mapping: Mapping[str, str],
    counts: Mapping[str, int],
    recipes: Iterable[Recipe] | None = None,
) -> IngredientVocabulary:
    """Build a vocabulary from ``raw -> canonical token``, ordered by frequency."""
    totals: Counter = Counter()
    for raw, canon in mapping.items():
        totals[canon] += counts.get(raw, 0)
    canonical = sorted(totals, key=lambda t: (-totals[t], t))
    index = {t: i for i, t in enumerate(canonical)}
    vocab = IngredientVocabulary(
        canonical=canonical,
        raw_to_canonical={raw: index[c] for raw, c in mapping.items()},
        counts=[totals[t] for t in canonical],
    )
    if recipes is not None:
        vocab.recompute_coverage(recipes)
    return vocab


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    unit = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    return np.clip(unit @ unit.T, -1.0, 1.0)


def propose_fusions(table: EmbeddingTable, threshold: float = 0.85,
                    tokens: Sequence[str] | None = None) -> list[MergeProposal]:
    """Every unordered token pair with cosine >= ``threshold``, most similar first.

    The pad row is never proposed. Token names come from ``tokens`` or the
    table's own token list.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    tokens = list(tokens if tokens is not None else table.tokens or [])
    vectors = table.vectors[1:]
    if len(tokens) != len(vectors):
        raise ValueError(f"{len(tokens)} token names for {len(vectors)} embedding rows")
    sims = cosine_matrix(vectors)
    ii, jj = np.nonzero(np.triu(sims >= threshold, k=1))
    proposals = [MergeProposal(tokens[i], tokens[j], float(sims[i, j])) for i, j in zip(ii, jj)]
    proposals.sort(key=lambda p: (-p.similarity, p.token_a, p.token_b))
    return proposals


def write_decisions(proposals: Iterable[MergeProposal], path) -> None:
    lines = ["# token_a\ttoken_b\taccept|reject (similarity in trailing comment)"]
    for p in proposals:
        lines.append(f"{p.token_a}\t{p.token_b}\t{p.decision}\t# {p.similarity:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_decisions(path) -> list[tuple[str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("\t") if p.strip()]
        if len(parts) != 3 or parts[2] not in DECISIONS:
            raise ValueError(f"{path}:{lineno}: expected 'token_a<TAB>token_b<TAB>accept|reject'")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def apply_decisions(
    vocab: IngredientVocabulary,
    proposals: Sequence[MergeProposal],
    decisions,
    recipes: Iterable[Recipe] | None = None,
) -> IngredientVocabulary:
    """Fuse the tokens of accepted proposals and rebuild the vocabulary.

    ``decisions`` is a path to a decisions file or an iterable of
    ``(token_a, token_b, decision)`` rows. Accepted pairs are unioned
    transitively; each group is represented by its most frequent token.
    """
    rows = read_decisions(decisions) if isinstance(decisions, (str, Path)) else list(decisions)
    by_key = {p.key: p for p in proposals}
    for a, b, d in rows:
        if d not in DECISIONS:
            raise ValueError(f"unknown decision {d!r} for pair ({a}, {b})")
        p = by_key.get(frozenset((a, b)))
        if p is None:
            raise KeyError(f"decision for unknown pair ({a}, {b})")
        p.decision = d

    counts = dict(zip(vocab.canonical, vocab._counts_or_zero()))
    uf = _UnionFind(vocab.canonical)
    for p in proposals:
        if p.decision == "accept":
            uf.union(p.token_a, p.token_b)
    groups: dict[str, list[str]] = {}
    for tok in vocab.canonical:
        groups.setdefault(uf.find(tok), []).append(tok)
    rep_of = {}
    for members in groups.values():
        rep = min(members, key=lambda t: _preference(t, counts))
        for t in members:
            rep_of[t] = rep

    totals: Counter = Counter()
    for tok in vocab.canonical:
        totals[rep_of[tok]] += counts.get(tok, 0)
    canonical = sorted(totals, key=lambda t: (-totals[t], t))
    index = {t: i for i, t in enumerate(canonical)}
    mapping = {raw: index[rep_of[vocab.canonical[i]]] for raw, i in vocab.raw_to_canonical.items()}
    out = IngredientVocabulary(canonical, mapping, [totals[t] for t in canonical], vocab.coverage)
    if recipes is not None:
        out.recompute_coverage(recipes)
    return out


class IngredientVocabularyBuilder(BaseEstimator, TransformerMixin):
    """Fit the full vocabulary pipeline on recipes; transform to index lists.

    Without ``decisions`` every fusion proposal stays pending, so the fitted
    vocabulary is the stem-merged one and ``proposals_`` is ready for review.
    """

    def __init__(self, top_k: int = 4000, fusion_threshold: float = 0.85,
                 embedding_dim: int = 300, epochs: int = 5, seed: int = 0):
        self.top_k = top_k
        self.fusion_threshold = fusion_threshold
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.seed = seed

    def fit(self, recipes: Sequence[Recipe], y=None, decisions=None):
        recipes = list(recipes)
        counts = ingredient_counts(recipes)
        kept = frequency_cut(recipes, self.top_k)
        stemmed = stem_merge(kept, counts)
        vocab = vocabulary_from_mapping(stemmed, counts, recipes)
        table = self._train(vocab, recipes)
        self.proposals_ = propose_fusions(table, self.fusion_threshold, vocab.canonical)
        if decisions is not None:
            vocab = apply_decisions(vocab, self.proposals_, decisions, recipes)
            table = self._train(vocab, recipes)
        self.vocabulary_ = vocab
        self.embeddings_ = table
        return self

    def _train(self, vocab: IngredientVocabulary, recipes) -> EmbeddingTable:
        seqs = [vocab.encode(r.ingredients) for r in recipes]
        table = train_embeddings(seqs, len(vocab), dim=self.embedding_dim,
                                 epochs=self.epochs, seed=self.seed)
        table.tokens = tuple(vocab.canonical)
        return table

    def transform(self, recipes: Sequence[Recipe]) -> list[list[int]]:
        check_is_fitted(self, "vocabulary_")
        return [self.vocabulary_.encode(r.ingredients) for r in recipes]
