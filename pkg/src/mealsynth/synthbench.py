"""Procedurally rendered "meals" with a known ingredient set.

Each visible ingredient is a glyph with its own saturated hue and shape,
drawn on a grey plate over a dark table. Glyph positions come from a layout
seed: every glyph id owns a slot of a small grid on the plate (a seeded
permutation) plus a seeded jitter, so a glyph lands in the same place
whatever else is on the plate. Optional invisible ingredients take part in
recipes but are never drawn.

An oracle presence classifier trained on clean renders scores generated
images for ingredient content.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .data import DEFAULT_FRACTIONS, DatasetManifest, Recipe, assign_splits
from .vocab import IngredientVocabulary

SHAPES = ("disc", "square", "triangle", "diamond", "cross", "ring", "bar", "hourglass")
TABLE_RGB = (40, 40, 40)
PLATE_RGB = (196, 196, 196)
PLATE_RADIUS = 0.46
GLYPH_RADIUS = 0.085
DEFAULT_FREQUENCY = 0.2


def glyph_name(g: int) -> str:
    return f"g{g + 1}"


def invisible_name(h: int) -> str:
    return f"h{h + 1}"


def glyph_color(g: int, num_glyphs: int) -> tuple[int, int, int]:
    """Saturated colour with hue spaced evenly around the wheel."""
    r, gg, b = colorsys.hsv_to_rgb(g / num_glyphs, 1.0, 1.0)
    return (int(round(r * 255)), int(round(gg * 255)), int(round(b * 255)))


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "disc":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (ax <= 0.8 * r) & (ay <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * ax)
    if shape == "diamond":
        return ax + ay <= r
    if shape == "cross":
        return ((ax <= 0.3 * r) & (ay <= r)) | ((ay <= 0.3 * r) & (ax <= r))
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    if shape == "bar":
        return (ax <= r) & (ay <= 0.45 * r)
    if shape == "hourglass":
        return (ay <= 0.9 * r) & (ax <= ay + 0.15 * r)
    raise ValueError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class SynthRecipe:
    subset: tuple[int, ...]  # visible glyph ids in [0, num_glyphs) ; invisible ids follow
    layout_seed: int
    num_glyphs: int = 8
    num_invisible: int = 0

    def __post_init__(self):
        total = self.num_glyphs + self.num_invisible
        if not 1 <= len(self.subset) <= total:
            raise ValueError("subset must hold between 1 and K ingredients")
        bad = [g for g in self.subset if not 0 <= g < total]
        if bad:
            raise ValueError(f"unknown glyph id(s) {bad}")

    @property
    def visible(self) -> tuple[int, ...]:
        return tuple(g for g in self.subset if g < self.num_glyphs)

    def ingredient_names(self) -> list[str]:
        return [glyph_name(g) if g < self.num_glyphs else invisible_name(g - self.num_glyphs)
                for g in self.subset]


def glyph_radius(num_glyphs: int) -> float:
    # shrink with the slot grid so large K still fits on the plate
    return GLYPH_RADIUS * 3.0 / max(math.ceil(math.sqrt(num_glyphs)), 3)


def layout(layout_seed: int, num_glyphs: int) -> np.ndarray:
    """Centres ``(num_glyphs, 2)`` in unit image coordinates for one layout seed."""
    rng = np.random.default_rng(layout_seed)
    n = math.ceil(math.sqrt(num_glyphs))
    side = PLATE_RADIUS * math.sqrt(2.0)
    cell = side / n
    slots = rng.permutation(n * n)[:num_glyphs]
    slack = max(cell / 2 - glyph_radius(num_glyphs), 0.0)
    jitter = rng.uniform(-slack, slack, size=(num_glyphs, 2))
    origin = 0.5 - side / 2
    cx = origin + (slots % n + 0.5) * cell + jitter[:, 0]
    cy = origin + (slots // n + 0.5) * cell + jitter[:, 1]
    return np.stack([cx, cy], axis=1)


def render(recipe: SynthRecipe, size: int) -> np.ndarray:
    """Rasterize a recipe to a ``(size, size, 3)`` uint8 image. Pure in (subset, seed, size)."""
    if size < 8:
        raise ValueError("size must be >= 8")
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    img = np.empty((size, size, 3), np.uint8)
    img[:] = TABLE_RGB
    img[(xx - 0.5) ** 2 + (yy - 0.5) ** 2 <= PLATE_RADIUS**2] = PLATE_RGB
    centres = layout(recipe.layout_seed, recipe.num_glyphs)
    r = glyph_radius(recipe.num_glyphs)
    for g in sorted(recipe.visible):
        cx, cy = centres[g]
        mask = _shape_mask(SHAPES[g % len(SHAPES)], xx - cx, yy - cy, r)
        img[mask] = glyph_color(g, recipe.num_glyphs)
    return img


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``(n, H, W, 3)`` -> float ``(n, 3, H, W)`` in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return t / 127.5 - 1.0


@dataclass
class SynthBench:
    """A generated benchmark: recipes, their glyph subsets and layouts."""

    manifest: DatasetManifest
    recipes: dict[str, SynthRecipe]
    num_glyphs: int
    num_invisible: int

    def synth(self, recipe: Recipe | str) -> SynthRecipe:
        return self.recipes[recipe if isinstance(recipe, str) else recipe.id]

    def images(self, recipes: Sequence[Recipe | str], size: int) -> torch.Tensor:
        arr = np.stack([render(self.synth(r), size) for r in recipes])
        return to_tensor(arr)

    def labels(self, recipes: Sequence[Recipe | str]) -> np.ndarray:
        return presence_matrix([self.synth(r).visible for r in recipes], self.num_glyphs)

    def ingredient_names(self) -> list[str]:
        return ([glyph_name(g) for g in range(self.num_glyphs)]
                + [invisible_name(h) for h in range(self.num_invisible)])

    def vocabulary(self) -> IngredientVocabulary:
        names = self.ingredient_names()
        counts = {n: 0 for n in names}
        for r in self.manifest.recipes:
            for x in r.ingredients:
                counts[x] += 1
        order = sorted(names, key=lambda n: (-counts[n], n))
        return IngredientVocabulary(
            canonical=order,
            raw_to_canonical={n: i for i, n in enumerate(order)},
            counts=[counts[n] for n in order],
            coverage=1.0,
        )

    def write_images(self, root, size: int) -> None:
        from PIL import Image

        root = Path(root)
        for r in self.manifest.recipes:
            path = root / r.image_refs[0]
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(render(self.synth(r), size)).save(path)


def presence_matrix(subsets: Sequence[Sequence[int]], num_glyphs: int) -> np.ndarray:
    y = np.zeros((len(subsets), num_glyphs), np.int64)
    for i, s in enumerate(subsets):
        for g in s:
            if g < num_glyphs:
                y[i, g] = 1
    return y


def inclusion_probabilities(frequencies) -> np.ndarray:
    """Per-draw probabilities whose marginals after redrawing empty sets equal ``frequencies``.

    With draw probabilities ``q = z * f`` the marginal of ingredient ``i`` given
    a non-empty set is ``z f_i / P(non-empty)``, so ``z`` solves
    ``z = 1 - prod(1 - z f_j)``; found by bisection.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.sum() <= 1.0:
        raise ValueError("frequencies must sum to more than 1 (every recipe has an ingredient)")
    g = lambda z: 1.0 - np.prod(1.0 - z * f) - z
    lo, hi = 1e-12, 1.0 / f.max()
    if g(hi) >= 0:  # a certain ingredient makes every draw non-empty
        return f.copy()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if g(mid) > 0 else (lo, mid)
    return f * lo


def sample_subset(rng: np.random.Generator, frequencies: np.ndarray) -> tuple[int, ...]:
    while True:
        present = np.flatnonzero(rng.random(len(frequencies)) < frequencies)
        if len(present):
            return tuple(int(g) for g in present)


def build_benchmark(
    num_recipes: int,
    num_glyphs: int = 8,
    seed: int = 0,
    frequencies: Sequence[float] | None = None,
    num_invisible: int = 0,
    fractions=DEFAULT_FRACTIONS,
    category: str | None = None,
    unique_subsets: bool = False,
) -> SynthBench:
    """Sample recipes (each ingredient independently, empty sets redrawn) and split them.

    ``frequencies`` gives the per-ingredient marginal frequencies for the
    ``num_glyphs + num_invisible`` ingredients (default 0.2 each). With
    ``unique_subsets`` repeated ingredient sets are redrawn, so no two
    recipes share an ingredient list.
    """
    if num_recipes < 1:
        raise ValueError("num_recipes must be >= 1")
    total = num_glyphs + num_invisible
    if unique_subsets and num_recipes > 2**total - 1:
        raise ValueError(f"only {2**total - 1} distinct non-empty subsets of {total} ingredients exist")
    freq = np.full(total, DEFAULT_FREQUENCY) if frequencies is None else np.asarray(frequencies, float)
    if freq.shape != (total,) or np.any(freq <= 0) or np.any(freq > 1):
        raise ValueError(f"need {total} inclusion frequencies in (0, 1]")
    draw = inclusion_probabilities(freq)
    rng = np.random.default_rng(seed)
    synth, recipes, seen = {}, [], set()
    for i in range(num_recipes):
        subset = sample_subset(rng, draw)
        while unique_subsets and subset in seen:
            subset = sample_subset(rng, draw)
        seen.add(subset)
        order = rng.permutation(len(subset))
        sr = SynthRecipe(tuple(subset[j] for j in order), int(rng.integers(2**31 - 1)),
                         num_glyphs, num_invisible)
        rid = f"syn{i:06d}"
        synth[rid] = sr
        recipes.append(Recipe(rid, sr.ingredient_names(), 1, [f"images/{rid}.png"], category=category))
    manifest = assign_splits(recipes, fractions, seed)
    manifest.meta.update({
        "synthbench": {
            "num_glyphs": num_glyphs,
            "num_invisible": num_invisible,
            "seed": seed,
            "frequencies": [float(f) for f in freq],
            "layout_seeds": {rid: sr.layout_seed for rid, sr in synth.items()},
        }
    })
    return SynthBench(manifest, synth, num_glyphs, num_invisible)


def bench_from_manifest(manifest: DatasetManifest) -> SynthBench:
    """Rebuild the glyph bookkeeping of a saved synthetic manifest."""
    meta = manifest.meta.get("synthbench")
    if meta is None:
        raise ValueError("manifest was not produced by the synthetic benchmark")
    k, m = meta["num_glyphs"], meta["num_invisible"]
    index = {glyph_name(g): g for g in range(k)}
    index.update({invisible_name(h): k + h for h in range(m)})
    synth = {
        r.id: SynthRecipe(tuple(index[x] for x in r.ingredients), meta["layout_seeds"][r.id], k, m)
        for r in manifest.recipes
    }
    return SynthBench(manifest, synth, k, m)


# --------------------------------------------------------------------------- oracle


class _OracleNet(nn.Module):
    def __init__(self, num_glyphs: int, width: int = 32, feature_dim: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(),
        )
        self.features = nn.Sequential(nn.Linear(2 * width, feature_dim), nn.ReLU())
        self.head = nn.Linear(feature_dim, num_glyphs)

    def embed(self, x):
        h = self.body(x)
        return self.features(h.amax(dim=(2, 3)))

    def forward(self, x):
        return self.head(self.embed(x))


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    # random blur strength, additive noise and a small brightness shift
    k = torch.tensor([1.0, 2.0, 1.0])
    kernel = (k[:, None] * k[None, :] / 16.0).expand(3, 1, 3, 3)
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel, groups=3)
    w = torch.rand(n, 1, 1, 1, generator=gen)
    x = w * blurred + (1 - w) * x
    x = x + 0.15 * torch.rand(n, 1, 1, 1, generator=gen) * torch.randn(x.shape, generator=gen)
    x = x + 0.1 * (torch.rand(n, 3, 1, 1, generator=gen) - 0.5)
    return x.clamp(-1, 1)


class OracleClassifier(BaseEstimator, ClassifierMixin):
    """Multi-label glyph-presence classifier on images in [-1, 1].

    Any input resolution is accepted; images are resized to ``input_size``.
    The penultimate activations (``transform``) serve as a feature extractor
    for FID at desk scale.
    """

    def __init__(self, num_glyphs: int = 8, input_size: int = 32, epochs: int = 8,
                 batch_size: int = 64, lr: float = 2e-3, augment: bool = True, seed: int = 0):
        self.num_glyphs = num_glyphs
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.augment = augment
        self.seed = seed

    def _prep(self, X) -> torch.Tensor:
        x = torch.as_tensor(X, dtype=torch.float32)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images shaped (n, 3, H, W), got {tuple(x.shape)}")
        if x.shape[-1] != self.input_size:
            mode = "area" if x.shape[-1] > self.input_size else "bilinear"
            kw = {} if mode == "area" else {"align_corners": False}
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode=mode, **kw)
        return x

    def fit(self, X, y):
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        x = self._prep(X)
        yt = torch.as_tensor(np.asarray(y), dtype=torch.float32)
        if yt.shape != (len(x), self.num_glyphs):
            raise ValueError(f"labels must be shaped (n, {self.num_glyphs})")
        self.net_ = _OracleNet(self.num_glyphs)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        self.net_.train()
        for _ in range(self.epochs):
            order = torch.randperm(len(x), generator=gen)
            for start in range(0, len(x), self.batch_size):
                idx = order[start : start + self.batch_size]
                xb = _augment(x[idx], gen) if self.augment else x[idx]
                loss = F.binary_cross_entropy_with_logits(self.net_(xb), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net_.eval()
        self.classes_ = np.arange(self.num_glyphs)
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        x = self._prep(X)
        out = [torch.sigmoid(self.net_(x[i : i + 256])) for i in range(0, len(x), 256)]
        return torch.cat(out).numpy().astype(np.float64)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        x = self._prep(X)
        out = [self.net_.embed(x[i : i + 256]) for i in range(0, len(x), 256)]
        return torch.cat(out).numpy().astype(np.float64)

    def class_distribution(self, X) -> np.ndarray:
        """Presence probabilities normalised to sum to one per image (for IS)."""
        p = self.predict_proba(X) + 1e-12
        return p / p.sum(axis=1, keepdims=True)

    def state_dict(self) -> dict:
        check_is_fitted(self, "net_")
        return {"params": self.get_params(), "net": self.net_.state_dict()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "OracleClassifier":
        est = cls(**state["params"])
        est.net_ = _OracleNet(est.num_glyphs)
        est.net_.load_state_dict(state["net"])
        est.net_.eval()
        est.classes_ = np.arange(est.num_glyphs)
        return est


def train_oracle(num_glyphs: int = 8, num_images: int = 4000, seed: int = 0,
                 sizes: Sequence[int] = (16, 32, 64), epochs: int = 12,
                 input_size: int = 32, noise_fraction: float = 0.1) -> OracleClassifier:
    """Fit an oracle on fresh renders at mixed scales.

    A ``noise_fraction`` share of extra uniform-noise images is labelled with
    the glyph marginals as soft targets, so content-free inputs score near the
    prior instead of triggering whichever glyph colour the noise happens to hit.
    """
    bench = build_benchmark(num_images, num_glyphs, seed=seed + 7919)
    rng = np.random.default_rng(seed)
    recipes = list(bench.manifest.recipes)
    images = []
    for r in recipes:
        s = int(rng.choice(sizes))
        x = to_tensor(render(bench.synth(r), s)[None])
        if s != input_size:
            mode = "area" if s > input_size else "bilinear"
            kw = {} if mode == "area" else {"align_corners": False}
            x = F.interpolate(x, size=(input_size, input_size), mode=mode, **kw)
        images.append(x)
    X = torch.cat(images)
    y = bench.labels(recipes).astype(np.float64)
    n_noise = int(round(noise_fraction * num_images))
    if n_noise:
        gen = torch.Generator().manual_seed(seed + 1)
        X = torch.cat([X, torch.rand(n_noise, 3, input_size, input_size, generator=gen) * 2 - 1])
        y = np.vstack([y, np.tile(y.mean(0), (n_noise, 1))])
    return OracleClassifier(num_glyphs, input_size=input_size, epochs=epochs, seed=seed).fit(X, y)
