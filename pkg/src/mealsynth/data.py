"""Recipe corpora: loading, filtering, split assignment and persistence.

Two on-disk formats are understood:

* ``jsonl`` -- the package's own schema, one recipe per line::

    {"id": "r0001", "ingredients": ["tomato", "basil"], "instructions_count": 3,
     "image_refs": ["images/r0001.png"], "split": "train", "category": "salad"}

  ``id``, ``ingredients``, ``instructions_count`` and ``image_refs`` are
  mandatory; ``split`` and ``category`` are optional; unknown keys are ignored.

* ``recipe1m`` -- a pair of layered JSON files (a recipe layer holding
  ingredients and instructions, an image layer holding image ids) joined on
  the recipe id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)

MAX_INGREDIENTS = 20
MAX_INSTRUCTIONS = 20
MAX_IMAGES = 5

_MANDATORY = ("id", "ingredients", "instructions_count", "image_refs")


class CorpusFormatError(ValueError):
    """A record could not be parsed. Carries the line number and record id."""

    def __init__(self, message: str, line: int | None = None, record_id: str | None = None):
        self.line = line
        self.record_id = record_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record_id is not None:
            where.append(f"record {record_id!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class MissingFieldError(CorpusFormatError):
    def __init__(self, field_name: str, line: int | None = None, record_id: str | None = None):
        self.field = field_name
        super().__init__(f"missing mandatory field {field_name!r}", line, record_id)


@dataclass(frozen=True)
class Recipe:
    id: str
    ingredients: tuple[str, ...]
    instructions_count: int
    image_refs: tuple[str, ...]
    split: str | None = None
    category: str | None = None

    def __post_init__(self):
        # accept lists from callers, store tuples so recipes stay hashable
        object.__setattr__(self, "ingredients", tuple(self.ingredients))
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["ingredients"] = list(self.ingredients)
        d["image_refs"] = list(self.image_refs)
        if d["category"] is None:
            del d["category"]
        return d


@dataclass(frozen=True)
class DatasetManifest:
    recipes: tuple[Recipe, ...]
    split_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "recipes", tuple(self.recipes))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))

    def split(self, name: str) -> list[Recipe]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.recipes if r.split == name]

    def by_category(self, category: str | None) -> "DatasetManifest":
        """Return a manifest restricted to one category (``None`` keeps all)."""
        if category is None:
            return self
        kept = [r for r in self.recipes if r.category == category]
        return replace(self, recipes=tuple(kept))

    def counts(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.recipes) for s in SPLITS}


# --------------------------------------------------------------------------- loading


def _recipe_from_record(rec: dict, line: int | None) -> Recipe:
    if not isinstance(rec, dict):
        raise CorpusFormatError("record is not a JSON object", line)
    rid = rec.get("id")
    for name in _MANDATORY:
        if name not in rec:
            raise MissingFieldError(name, line, None if rid is None else str(rid))
    rid = str(rid)
    ingredients = rec["ingredients"]
    refs = rec["image_refs"]
    if not isinstance(ingredients, list) or not all(isinstance(x, str) for x in ingredients):
        raise CorpusFormatError("'ingredients' must be a list of strings", line, rid)
    if not isinstance(refs, list) or not all(isinstance(x, str) for x in refs):
        raise CorpusFormatError("'image_refs' must be a list of strings", line, rid)
    try:
        n_instr = int(rec["instructions_count"])
    except (TypeError, ValueError):
        raise CorpusFormatError("'instructions_count' must be an integer", line, rid) from None
    try:
        return Recipe(
            id=rid,
            ingredients=ingredients,
            instructions_count=n_instr,
            image_refs=refs,
            split=rec.get("split"),
            category=rec.get("category"),
        )
    except ValueError as exc:
        raise CorpusFormatError(str(exc), line, rid) from None


def _load_jsonl(path: Path) -> list[Recipe]:
    recipes = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"malformed JSON ({exc.msg})", lineno) from None
            recipes.append(_recipe_from_record(rec, lineno))
    return recipes


def recipe1m_image_path(image_id: str) -> str:
    """Relative path of a Recipe1M image id (``abcd...jpg`` -> ``a/b/c/d/abcd...jpg``)."""
    return "/".join(list(image_id[:4]) + [image_id])


def _texts(entries) -> list[str]:
    out = []
    for e in entries or []:
        text = e.get("text") if isinstance(e, dict) else e
        if isinstance(text, str) and text.strip():
            out.append(text.strip())
    return out


def _load_recipe1m(path: Path, image_layer: Path | None) -> list[Recipe]:
    if image_layer is None:
        image_layer = path.with_name("layer2.json")
    try:
        layer1 = json.loads(path.read_text(encoding="utf-8"))
        layer2 = json.loads(image_layer.read_text(encoding="utf-8")) if image_layer.exists() else []
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"malformed JSON ({exc.msg})", exc.lineno) from None

    images: dict[str, list[str]] = {}
    for i, entry in enumerate(layer2):
        if "id" not in entry:
            raise MissingFieldError("id", None, f"image-layer entry {i}")
        images[str(entry["id"])] = [recipe1m_image_path(im["id"]) for im in entry.get("images", [])]

    recipes = []
    for i, entry in enumerate(layer1):
        rid = entry.get("id")
        for name in ("id", "ingredients", "instructions"):
            if name not in entry:
                raise MissingFieldError(name, None, f"entry {i}" if rid is None else str(rid))
        partition = entry.get("partition")
        recipes.append(
            Recipe(
                id=str(rid),
                ingredients=_texts(entry["ingredients"]),
                instructions_count=len(_texts(entry["instructions"])),
                image_refs=images.get(str(rid), []),
                split=partition if partition in SPLITS else None,
            )
        )
    return recipes


def load_corpus(path, format: str = "jsonl", image_layer=None) -> list[Recipe]:
    """Read raw recipes without filtering.

    ``format`` is ``"jsonl"`` or ``"recipe1m"``. For ``recipe1m`` the image
    layer defaults to ``layer2.json`` next to ``path``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "jsonl":
        return _load_jsonl(path)
    if format == "recipe1m":
        return _load_recipe1m(path, None if image_layer is None else Path(image_layer))
    raise ValueError(f"unknown corpus format {format!r}")


def normalize_ingredient(text: str) -> str:
    return "_".join(text.lower().split())


# --------------------------------------------------------------------------- filtering / splits


def keep_recipe(r: Recipe) -> bool:
    return (
        len(r.image_refs) >= 1
        and 1 <= len(r.ingredients) <= MAX_INGREDIENTS
        and 1 <= r.instructions_count <= MAX_INSTRUCTIONS
    )


def filter_recipes(recipes: Iterable[Recipe]) -> list[Recipe]:
    """Keep recipes with an image, 1-20 ingredients and 1-20 instructions.

    At most five image references survive per recipe.
    """
    out = []
    for r in recipes:
        if not keep_recipe(r):
            continue
        if len(r.image_refs) > MAX_IMAGES:
            r = replace(r, image_refs=r.image_refs[:MAX_IMAGES])
        out.append(r)
    return out


def _split_key(recipe_id: str, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{recipe_id}".encode("utf-8")).digest()


def assign_splits(
    recipes: Sequence[Recipe],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> DatasetManifest:
    """Partition recipes into train/val/test by a seeded hash of the id.

    Recipes are ordered by ``sha256(seed:id)`` and cut at the requested
    quantiles, so counts match the fractions up to rounding and a recipe's
    split never depends on the input order. Splitting is per recipe: all of
    a recipe's images follow it.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    ids = [r.id for r in recipes]
    if len(set(ids)) != len(ids):
        raise ValueError("recipe ids must be unique")

    n = len(recipes)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    order = sorted(range(n), key=lambda i: _split_key(ids[i], seed))
    split_of = {}
    for rank, i in enumerate(order):
        split_of[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    assigned = [replace(r, split=split_of[i]) for i, r in enumerate(recipes)]
    return DatasetManifest(recipes=tuple(assigned), split_fractions=fractions, seed=seed)


# --------------------------------------------------------------------------- persistence

MANIFEST_NAME = "manifest.json"
RECIPES_NAME = "recipes.jsonl"


def save_recipes(recipes: Iterable[Recipe], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in recipes:
            fh.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def save_manifest(manifest: DatasetManifest, directory) -> Path:
    """Write ``recipes.jsonl`` plus ``manifest.json`` (seed, fractions, split ids)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_recipes(manifest.recipes, directory / RECIPES_NAME)
    doc = {
        "dataset": RECIPES_NAME,
        "seed": manifest.seed,
        "split_fractions": list(manifest.split_fractions),
        "splits": {s: [r.id for r in manifest.recipes if r.split == s] for s in SPLITS},
        "meta": manifest.meta,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    doc = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    recipes = load_corpus(directory / doc.get("dataset", RECIPES_NAME), "jsonl")
    split_of = {rid: s for s, ids in doc["splits"].items() for rid in ids}
    recipes = [replace(r, split=split_of.get(r.id, r.split)) for r in recipes]
    return DatasetManifest(
        recipes=tuple(recipes),
        split_fractions=tuple(doc["split_fractions"]),
        seed=int(doc["seed"]),
        meta=doc.get("meta", {}),
    )


# --------------------------------------------------------------------------- images


def load_image(path, size: int) -> np.ndarray | None:
    """Load an RGB image as a float32 ``(3, size, size)`` array in [-1, 1].

    Missing files yield ``None`` and a warning; corpora are often partially
    downloaded, so absence is reported at batch time only.
    """
    from PIL import Image

    path = Path(path)
    if not path.exists():
        warnings.warn(f"missing image file {path}", stacklevel=2)
        return None
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR if size > im.size[0] else Image.BOX)
        arr = np.asarray(im, dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5) - 1.0


def load_image_batch(root, recipes: Sequence[Recipe], size: int, which: int = 0):
    """Load one image per recipe. Returns ``(images, kept_indices)``."""
    root = Path(root)
    arrays, kept = [], []
    for i, r in enumerate(recipes):
        ref = r.image_refs[min(which, len(r.image_refs) - 1)]
        img = load_image(root / ref, size)
        if img is not None:
            arrays.append(img)
            kept.append(i)
    if not arrays:
        return np.zeros((0, 3, size, size), np.float32), kept
    return np.stack(arrays), kept
