"""Qualitative probes of a trained generator: fixed-z grids, fixed-c grids, interpolations."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

MIN_OVERLAP = 0.7


class OverlapError(ValueError):
    def __init__(self, overlap: float, required: float = MIN_OVERLAP):
        self.overlap = overlap
        super().__init__(f"recipes share {overlap:.3f} of their remaining ingredients; "
                         f"at least {required:.2f} is required")


def interpolation_points(steps: int = 5) -> list[Fraction]:
    """Mixing weights t for ``steps`` evenly spaced points, ``4/0 .. 0/4`` for five."""
    if steps < 2:
        raise ValueError("an interpolation needs at least its two endpoints")
    return [Fraction(k, steps - 1) for k in range(steps)]


def remaining_overlap(a: Sequence[str], b: Sequence[str], target: str) -> float:
    """Jaccard overlap of two ingredient sets once ``target`` is removed from both."""
    ra, rb = set(a) - {target}, set(b) - {target}
    if not ra and not rb:
        return 1.0
    return len(ra & rb) / len(ra | rb)


def check_pair(ingredients_i: Sequence[str], ingredients_j: Sequence[str], target: str,
               min_overlap: float = MIN_OVERLAP) -> float:
    if target not in ingredients_i:
        raise ValueError(f"first recipe does not contain {target!r}")
    if target in ingredients_j:
        raise ValueError(f"second recipe already contains {target!r}")
    ov = remaining_overlap(ingredients_i, ingredients_j, target)
    if ov < min_overlap:
        raise OverlapError(ov, min_overlap)
    return ov


def mine_pairs(recipes, target: str, min_overlap: float = MIN_OVERLAP, limit: int | None = None,
               seed: int = 0) -> list[tuple[str, str, float]]:
    """Exhaustive search for (with-target, without-target) pairs above the overlap bar.

    Each recipe containing the target is paired with its best partner
    (highest overlap, then smallest id). Output order is shuffled by ``seed``
    before truncation so ``limit`` does not favour low ids.
    """
    with_t = [r for r in recipes if target in r.ingredients]
    without = [r for r in recipes if target not in r.ingredients]
    rest = {r.id: frozenset(r.ingredients) - {target} for r in recipes}
    pairs = []
    for ri in with_t:
        best = None
        for rj in without:
            a, b = rest[ri.id], rest[rj.id]
            ov = 1.0 if not (a or b) else len(a & b) / len(a | b)
            if ov >= min_overlap and (best is None or (-ov, rj.id) < (-best[1], best[0])):
                best = (rj.id, ov)
        if best is not None:
            pairs.append((ri.id, best[0], best[1]))
    order = np.random.default_rng(seed).permutation(len(pairs))
    pairs = [pairs[k] for k in order]
    return pairs if limit is None else pairs[:limit]


def interpolate(gan, p_i, p_j, points: Sequence[Fraction] | None = None, z_seed: int = 0) -> list[torch.Tensor]:
    """Generate from (1 - t) p_i + t p_j with one shared z and c = mu.

    Returns the three scales, each shaped ``(len(points), 3, s, s)``.
    """
    points = interpolation_points() if points is None else list(points)
    p_i = np.asarray(p_i, dtype=np.float32)
    p_j = np.asarray(p_j, dtype=np.float32)
    if p_i.shape != p_j.shape or p_i.ndim != 1:
        raise ValueError("endpoints must be two embeddings of equal width")
    # t == 0 and t == 1 reproduce the endpoints exactly
    rows = [p_i if t == 0 else p_j if t == 1 else (1 - float(t)) * p_i + float(t) * p_j for t in points]
    z = gan.noise(1, z_seed).repeat(len(rows), 1)
    return gan.generate(np.stack(rows), z=z)


def grid_fixed_z(gan, p, z_seed: int = 0) -> list[torch.Tensor]:
    """One image per embedding row, all sharing the same z."""
    p = np.asarray(p, dtype=np.float32)
    if len(p) < 2:
        raise ValueError("a fixed-z grid needs at least two recipes")
    z = gan.noise(1, z_seed).repeat(len(p), 1)
    return gan.generate(p, z=z)


def grid_fixed_c(gan, p_row, num_z: int = 8, z_seed: int = 0) -> list[torch.Tensor]:
    """``num_z`` samples of one recipe with independent z."""
    if num_z < 1:
        raise ValueError("num_z must be >= 1")
    p = np.repeat(np.asarray(p_row, dtype=np.float32)[None], num_z, axis=0)
    return gan.generate(p, z=gan.noise(num_z, z_seed))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(n, 3, s, s)`` in [-1, 1] to ``(n, s, s, 3)`` uint8."""
    x = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def tile(images: torch.Tensor, columns: int, pad: int = 2) -> np.ndarray:
    arr = to_uint8(images)
    n, s = len(arr), arr.shape[1]
    rows = -(-n // columns)
    out = np.full((rows * (s + pad) + pad, columns * (s + pad) + pad, 3), 255, np.uint8)
    for k in range(n):
        r, c = divmod(k, columns)
        y, x = pad + r * (s + pad), pad + c * (s + pad)
        out[y : y + s, x : x + s] = arr[k]
    return out


def save_grid(scales: Sequence[torch.Tensor], out_dir, stem: str, columns: int, sidecar: dict) -> list[Path]:
    """Write one PNG per scale plus ``<stem>.json`` describing every cell."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for images in scales:
        path = out_dir / f"{stem}_{images.shape[-1]}px.png"
        Image.fromarray(tile(images, columns)).save(path)
        paths.append(path)
    meta = dict(sidecar, files=[p.name for p in paths], scales=[int(s.shape[-1]) for s in scales])
    (out_dir / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return paths
