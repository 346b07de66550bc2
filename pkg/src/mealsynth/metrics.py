"""Image-quality metrics: Inception Score and Frechet distance of activations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

PSD_TOL = 1e-10


def inception_score(class_probs, splits: int = 10) -> tuple[float, float]:
    """Mean and std over splits of exp(E_x KL(p(y|x) || p(y)))."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("class probabilities must be an (n, C) matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("every row must be a probability distribution")
    if splits < 1 or len(p) < splits:
        raise ValueError(f"need at least {splits} rows for {splits} splits")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass
class ActivationStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def from_features(cls, features) -> "ActivationStats":
        return RunningStats().update(features).finalize()

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        return RunningStats.from_stats(self).combine(RunningStats.from_stats(other)).finalize()

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "count": self.count}


class RunningStats:
    """Streaming mean / scatter accumulator with an associative merge."""

    def __init__(self, dim: int | None = None):
        self.n = 0
        self.mean = None if dim is None else np.zeros(dim)
        self.m2 = None if dim is None else np.zeros((dim, dim))

    @classmethod
    def from_stats(cls, s: ActivationStats) -> "RunningStats":
        r = cls(s.dim)
        r.n, r.mean, r.m2 = s.count, s.mean.copy(), s.cov * max(s.count - 1, 0)
        return r

    def combine(self, other: "RunningStats") -> "RunningStats":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.mean = self.mean + delta * (other.n / n)
        self.n = n
        return self

    def update(self, features) -> "RunningStats":
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if len(x) == 0:
            return self
        batch = RunningStats(x.shape[1])
        batch.n = len(x)
        batch.mean = x.mean(axis=0)
        centred = x - batch.mean
        batch.m2 = centred.T @ centred
        return self.combine(batch)

    def finalize(self) -> ActivationStats:
        if self.n < 2:
            raise ValueError("activation statistics need at least two samples")
        cov = self.m2 / (self.n - 1)
        return ActivationStats(self.mean.copy(), (cov + cov.T) / 2, self.n)


def activation_stats(images: Iterable, feature_extractor: Callable, batch_size: int = 256) -> ActivationStats:
    """Feature mean/covariance of an image collection, accumulated batch by batch."""
    acc = RunningStats()
    batch = []
    for img in images:
        batch.append(img)
        if len(batch) == batch_size:
            acc.update(feature_extractor(np.stack(batch)))
            batch = []
    if batch:
        acc.update(feature_extractor(np.stack(batch)))
    return acc.finalize()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    floor = -PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < floor:
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: ActivationStats, b: ActivationStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken through the symmetric form
    (S_a^(1/2) S_b S_a^(1/2))^(1/2), which has the same eigenvalues.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov)
    _psd_sqrt(b.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    floor = -PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < floor:
        raise ValueError("covariance product is not positive semi-definite")
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_root)


class InceptionFeatures:
    """Inception-v3 pool features and class probabilities from a local weights file.

    Used for parity runs on real photographs; images are ``(n, 3, H, W)``
    in [-1, 1] and are resized to 299px.
    """

    def __init__(self, weights_path, batch_size: int = 32):
        import torch
        import torchvision

        net = torchvision.models.inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.net = net.eval()
        self.batch_size = batch_size

    def _run(self, images):
        import torch
        import torch.nn.functional as F

        pools, probs = [], []
        store = {}
        hook = self.net.avgpool.register_forward_hook(lambda m, i, o: store.__setitem__("pool", o.flatten(1)))
        try:
            with torch.no_grad():
                for i in range(0, len(images), self.batch_size):
                    x = torch.as_tensor(images[i : i + self.batch_size], dtype=torch.float32)
                    x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
                    logits = self.net(x)
                    pools.append(store["pool"].double().numpy())
                    probs.append(torch.softmax(logits.double(), dim=1).numpy())
        finally:
            hook.remove()
        return np.concatenate(pools), np.concatenate(probs)

    def transform(self, images) -> np.ndarray:
        return self._run(images)[0]

    def class_distribution(self, images) -> np.ndarray:
        return self._run(images)[1]
