"""Command-line experiment runner.

Every command that writes a run directory stores ``config.json`` (the full
argument set, seeds and package version) next to its outputs, and holds a
lock on the directory while running. Metric files are written with sorted
keys and no timestamps so fixed-seed runs can be compared byte for byte.

    mealsynth data synth    --out data/syn --num-recipes 5000
    mealsynth data prepare  --corpus corpus.jsonl --out data/real
    mealsynth oracle train  --out runs/oracle.pt
    mealsynth vocab build   --data data/syn --out runs/vocab
    mealsynth assoc train   --data data/syn --vocab runs/vocab --out runs/assoc
    mealsynth assoc eval    --run runs/assoc --pool-size 500
    mealsynth gan train     --assoc runs/assoc --out runs/gan --base-size 16
    mealsynth gan eval      --run runs/gan --oracle runs/oracle.pt
    mealsynth grid          --run runs/gan --mode fixed-z --recipes syn000001 syn000002
    mealsynth interp        --run runs/gan --target g3 --mine
    mealsynth report        runs/assoc runs/gan
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .data import (
    DEFAULT_FRACTIONS,
    DatasetManifest,
    assign_splits,
    filter_recipes,
    load_corpus,
    load_image_batch,
    load_manifest,
    save_manifest,
)
from .embeddings import EmbeddingTable
from .vocab import IngredientVocabulary, IngredientVocabularyBuilder, write_decisions

logger = logging.getLogger("mealsynth")

CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.json"


class CommandError(RuntimeError):
    """A user-facing failure; reported without a traceback."""


# --------------------------------------------------------------------------- run directories


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg = json.loads(json.dumps(cfg, default=str))
    return {"command": cfg.pop("command_path"), "version": __version__, "args": cfg}


@contextmanager
def run_dir(path, args: argparse.Namespace, write_config: bool = True):
    """Create ``path``, lock it for the duration and store the config."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(path / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CommandError(f"{path} is locked by another running command") from None
    try:
        if write_config:
            dump_json(_config(args), path / CONFIG_NAME)
        yield path
    finally:
        lock.release()


def _set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# --------------------------------------------------------------------------- data helpers


def _manifest(path, category=None) -> DatasetManifest:
    try:
        m = load_manifest(path)
    except FileNotFoundError as exc:
        raise CommandError(f"no dataset manifest at {path}: {exc}") from None
    return m.by_category(category)


def _is_synthetic(m: DatasetManifest) -> bool:
    return "synthbench" in m.meta


def _paired_images(m: DatasetManifest, data_dir, recipes, size: int, image_root=None):
    """Images for ``recipes`` at ``size``; recipes without a readable image are dropped."""
    if _is_synthetic(m) and image_root is None:
        from .synthbench import bench_from_manifest

        return list(recipes), bench_from_manifest(m).images(recipes, size)
    root = Path(image_root) if image_root else Path(data_dir)
    arr, kept = load_image_batch(root, recipes, size)
    if len(kept) < len(recipes):
        logger.warning("%d of %d recipes have no readable image", len(recipes) - len(kept), len(recipes))
    return [recipes[i] for i in kept], torch.from_numpy(arr)


def _sequences(vocab: IngredientVocabulary, recipes) -> list[list[int]]:
    return [vocab.encode(r.ingredients) for r in recipes]


def _limit(recipes, n):
    return recipes if n is None else recipes[:n]


# --------------------------------------------------------------------------- data


def cmd_data_prepare(args):
    recipes = load_corpus(args.corpus, args.format, args.image_layer)
    kept = filter_recipes(recipes)
    if args.category:
        from dataclasses import replace

        kept = [replace(r, category=args.category) for r in kept]
    m = assign_splits(kept, tuple(args.fractions), args.seed)
    m.meta["source"] = {"corpus": str(args.corpus), "format": args.format, "raw": len(recipes),
                        "kept": len(kept)}
    with run_dir(args.out, args) as out:
        save_manifest(m, out)
    print(json.dumps({"raw": len(recipes), "kept": len(kept), **m.counts()}, sort_keys=True))


def cmd_data_synth(args):
    from .synthbench import build_benchmark

    freq = None
    if args.frequency is not None:
        freq = [args.frequency] * (args.glyphs + args.invisible)
    bench = build_benchmark(args.num_recipes, args.glyphs, args.seed, freq, args.invisible,
                            tuple(args.fractions), args.category)
    with run_dir(args.out, args) as out:
        save_manifest(bench.manifest, out)
        if args.write_images:
            bench.write_images(out, args.image_size)
    print(json.dumps(bench.manifest.counts(), sort_keys=True))


def cmd_oracle_train(args):
    from .synthbench import train_oracle

    _set_seed(args.seed)
    oracle = train_oracle(args.glyphs, args.num_images, args.seed, epochs=args.epochs,
                          input_size=args.input_size, noise_fraction=args.noise_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(oracle.state_dict(), out)
    print(f"oracle written to {out}")


def _load_oracle(path):
    from .synthbench import OracleClassifier

    return OracleClassifier.from_state_dict(torch.load(path, map_location="cpu", weights_only=False))


# --------------------------------------------------------------------------- vocabulary


def cmd_vocab_build(args):
    m = _manifest(args.data, args.category)
    train = m.split("train")
    if not train:
        raise CommandError("the training split is empty")
    _set_seed(args.seed)
    est = IngredientVocabularyBuilder(args.top_k, args.threshold, args.dim, args.epochs, args.seed)
    est.fit(train, decisions=args.decisions)
    with run_dir(args.out, args) as out:
        est.vocabulary_.save(out / "vocab.tsv")
        est.embeddings_.save(out / "embeddings.bin")
        write_decisions(est.proposals_, out / "proposals.tsv")
        summary = {"canonical": len(est.vocabulary_), "coverage": est.vocabulary_.coverage,
                   "proposals": len(est.proposals_), "vocab_digest": est.vocabulary_.digest()}
        dump_json(summary, out / METRICS_NAME)
    print(json.dumps(summary, sort_keys=True))


def _load_vocab(vocab_dir):
    vocab_dir = Path(vocab_dir)
    vocab = IngredientVocabulary.load(vocab_dir / "vocab.tsv")
    table = EmbeddingTable.load(vocab_dir / "embeddings.bin") if (vocab_dir / "embeddings.bin").exists() else None
    return vocab, table


# --------------------------------------------------------------------------- association model


def cmd_assoc_train(args):
    from .foodspace import FoodSpaceModel

    m = _manifest(args.data, args.category)
    vocab, table = _load_vocab(args.vocab)
    if args.no_init_embeddings:
        table = None
    elif table is not None and table.vectors.shape[1] != args.embedding_dim:
        raise CommandError(f"embedding table width {table.vectors.shape[1]} != --embedding-dim {args.embedding_dim}")
    train, timgs = _paired_images(m, args.data, _limit(m.split("train"), args.max_train),
                                  args.image_size, args.image_root)
    val, vimgs = _paired_images(m, args.data, _limit(m.split("val"), args.max_val), args.image_size,
                                args.image_root)
    if len(train) < 2:
        raise CommandError("need at least two training pairs with images")
    _set_seed(args.seed)
    model = FoodSpaceModel(
        num_embeddings=len(vocab) + 1, embedding_dim=args.embedding_dim, attention=not args.no_attention,
        backbone=args.backbone, backbone_weights=args.backbone_weights, image_size=args.image_size,
        width=args.width, margin=args.margin, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, init_embeddings=table,
    )
    with run_dir(args.out, args) as out:
        log = (out / "train_log.jsonl").open("w")
        try:
            model.fit(_sequences(vocab, train), timgs,
                      val=(_sequences(vocab, val), vimgs) if len(val) >= 2 else None,
                      log=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"))
        finally:
            log.close()
        vocab.save(out / "vocab.tsv")
        model.save(out / "model.pt", vocab_hash=vocab.digest())
        metrics = {"kind": "assoc_train", "history": model.history_,
                   "best_val_medr": getattr(model, "best_val_medr_", None), "digest": model.digest()}
        dump_json(metrics, out / "train_metrics.json")
    print(json.dumps({k: metrics[k] for k in ("best_val_medr", "digest")}, sort_keys=True))


def _load_assoc(run):
    from .foodspace import FoodSpaceModel

    run = Path(run)
    cfg = read_json(run / CONFIG_NAME)["args"]
    model = FoodSpaceModel.load(run / "model.pt")
    vocab = IngredientVocabulary.load(run / "vocab.tsv")
    if model.vocab_hash_ not in (None, vocab.digest()):
        raise CommandError(f"vocabulary in {run} does not match the checkpoint")
    return model, vocab, cfg


def cmd_assoc_eval(args):
    from .retrieval import evaluate_pools

    model, vocab, cfg = _load_assoc(args.run)
    data = args.data or cfg["data"]
    m = _manifest(data, args.category if args.category else cfg.get("category"))
    recipes, imgs = _paired_images(m, data, m.split(args.split), cfg["image_size"],
                                   args.image_root or cfg.get("image_root"))
    if len(recipes) < args.pool_size:
        raise CommandError(f"split {args.split!r} has {len(recipes)} pairs; pool size {args.pool_size} "
                           f"is short by {args.pool_size - len(recipes)}")
    p = model.transform_text(_sequences(vocab, recipes))
    q = model.transform_images(imgs)
    res = evaluate_pools(q, p, args.pool_size, args.repetitions, args.seed)
    out = Path(args.out or args.run)
    metrics = {
        "kind": "retrieval",
        "model": args.name or Path(args.run).name,
        "category": m.meta.get("category") or cfg.get("category") or "all",
        "split": args.split,
        "pool_size": args.pool_size,
        "repetitions": args.repetitions,
        "seed": args.seed,
        "attention": bool(model.attention),
        "retrieval": res,
    }
    with run_dir(out, args, write_config=False) as out:
        dump_json(metrics, out / METRICS_NAME)
        dump_json(_config(args), out / "eval_config.json")
        if args.attention_out:
            n = min(args.attention_count, len(recipes))
            rows = model.attention_trace(_sequences(vocab, recipes[:n]),
                                         [r.ingredients for r in recipes[:n]], [r.id for r in recipes[:n]])
            dump_json(rows, Path(args.attention_out))
    print(json.dumps(res, sort_keys=True))


# --------------------------------------------------------------------------- GAN


def _channels(text: str) -> tuple[int, ...]:
    ch = tuple(int(x) for x in text.split(","))
    if len(ch) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated channel counts")
    return ch


def cmd_gan_train(args):
    from .figures import grid_fixed_z, save_grid
    from .gan import MealGAN

    assoc, vocab, acfg = _load_assoc(args.assoc)
    data = args.data or acfg["data"]
    category = args.category if args.category else acfg.get("category")
    m = _manifest(data, category)
    gan = MealGAN(z_dim=args.z_dim, c_dim=args.c_dim, p_dim=assoc.foodspace_dim, base_size=args.base_size,
                  g_channels=args.g_channels, d_channels=args.d_channels, lambda_uncond=args.lambda_uncond,
                  lambda_ca=args.lambda_ca, lambda_cycle=args.lambda_cycle, steps=args.steps,
                  batch_size=args.batch_size, lr_g=args.lr_g, lr_d=args.lr_d,
                  ema_decay=args.ema_decay, seed=args.seed)
    image_root = args.image_root or acfg.get("image_root")
    train, imgs = _paired_images(m, data, _limit(m.split("train"), args.max_train), gan.sizes[2], image_root)
    if len(train) < 2:
        raise CommandError("need at least two training pairs with images")
    p = assoc.transform_text(_sequences(vocab, train))
    _set_seed(args.seed)
    with run_dir(args.out, args) as out:
        log = (out / "train_log.jsonl").open("w")
        try:
            gan.fit(p, imgs, assoc, callback=lambda s, r: log.write(json.dumps(r, sort_keys=True) + "\n"),
                    log_every=args.log_every)
        finally:
            log.close()
        gan.save(out / "gan.pt", extra={"assoc_run": str(args.assoc), "data": str(data),
                                        "category": category})
        show = (m.split("val") or train)[: args.num_samples]
        if len(show) >= 2:
            pv = assoc.transform_text(_sequences(vocab, show))
            save_grid(grid_fixed_z(gan, pv, z_seed=args.seed), out / "samples", "samples", len(show),
                      {"kind": "fixed_z", "recipes": [r.id for r in show], "z_seed": args.seed})
        dump_json({"kind": "gan_train", "history": gan.history_, "digest": gan.digest()},
                  out / "train_metrics.json")
    print(json.dumps({"steps": args.steps, "digest": gan.digest()}, sort_keys=True))


def _load_gan(run):
    from .gan import MealGAN

    run = Path(run)
    cfg = read_json(run / CONFIG_NAME)["args"]
    gan = MealGAN.load(run / "gan.pt")
    assoc, vocab, acfg = _load_assoc(cfg["assoc"])
    if gan.encoder_digest_ not in (None, assoc.digest()):
        raise CommandError(f"association model under {cfg['assoc']} changed since {run} was trained")
    data = cfg.get("data") or acfg["data"]
    category = cfg.get("category") or acfg.get("category")
    return gan, assoc, vocab, data, category, acfg


def _f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    from sklearn.metrics import f1_score

    return float(f1_score(y_true, y_pred, average="micro", zero_division=0))


def cmd_gan_eval(args):
    from .metrics import ActivationStats, InceptionFeatures, fid, inception_score
    from .retrieval import aggregate, rank_queries

    gan, assoc, vocab, data, category, acfg = _load_gan(args.run)
    m = _manifest(data, category)
    image_root = args.image_root or acfg.get("image_root")
    recipes = m.split(args.split)
    rng = np.random.default_rng(args.seed)
    if len(recipes) < args.num_samples:
        raise CommandError(f"split {args.split!r} has {len(recipes)} recipes; "
                           f"{args.num_samples} samples requested (short by {args.num_samples - len(recipes)})")
    chosen = [recipes[i] for i in np.sort(rng.choice(len(recipes), args.num_samples, replace=False))]
    chosen, reals = _paired_images(m, data, chosen, gan.sizes[2], image_root)
    p = assoc.transform_text(_sequences(vocab, chosen))
    fakes = gan.generate(p, z_seed=args.z_seed)[2]

    if args.inception_weights:
        scorer, features = "inception", InceptionFeatures(args.inception_weights)
    elif args.oracle:
        scorer, features = "oracle", _load_oracle(args.oracle)
    else:
        raise CommandError("give --oracle (synthetic data) or --inception-weights")
    is_mean, is_std = inception_score(features.class_distribution(fakes), args.is_splits)
    fid_value = fid(ActivationStats.from_features(features.transform(reals)),
                    ActivationStats.from_features(features.transform(fakes)))

    if len(chosen) < args.pool_size:
        raise CommandError(f"{len(chosen)} generated images; pool size {args.pool_size} "
                           f"is short by {args.pool_size - len(chosen)}")
    q = assoc.transform_images(fakes)
    rows = []
    for _ in range(args.repetitions):
        idx = np.sort(rng.choice(len(chosen), args.pool_size, replace=False))
        rows.append(rank_queries(q[idx], p[idx]).to_json())
    medr = aggregate(rows)

    metrics = {
        "kind": "generation",
        "model": args.name or Path(args.run).name,
        "category": category or "all",
        "IS_mean": is_mean,
        "IS_std": is_std,
        "FID": fid_value,
        "fake2recipe": medr,
        "pool_size": args.pool_size,
        "num_samples": len(chosen),
        "scorer": scorer,
        "lambda_cycle": gan.lambda_cycle,
        "seed": args.seed,
        "z_seed": args.z_seed,
    }
    if scorer == "oracle" and _is_synthetic(m):
        from .synthbench import bench_from_manifest

        y = bench_from_manifest(m).labels(chosen)
        perm = np.random.default_rng(args.seed + 1).permutation(len(chosen))
        shuffled = gan.generate(p[perm], z_seed=args.z_seed)[2]
        metrics["presence_f1"] = _f1(y, features.predict(fakes))
        metrics["presence_f1_shuffled"] = _f1(y, features.predict(shuffled))
    out = Path(args.out or args.run)
    with run_dir(out, args, write_config=False) as out:
        dump_json(metrics, out / METRICS_NAME)
        dump_json(_config(args), out / "eval_config.json")
    print(json.dumps({k: metrics[k] for k in ("IS_mean", "IS_std", "FID")} | {"medr": medr["medr"]},
                     sort_keys=True))


# --------------------------------------------------------------------------- figures


def _recipes_by_id(m: DatasetManifest, ids):
    index = {r.id: r for r in m.recipes}
    missing = [i for i in ids if i not in index]
    if missing:
        raise CommandError(f"unknown recipe id(s): {', '.join(missing)}")
    return [index[i] for i in ids]


def cmd_grid(args):
    from .figures import grid_fixed_c, grid_fixed_z, save_grid

    gan, assoc, vocab, data, category, _ = _load_gan(args.run)
    m = _manifest(data, category)
    recipes = _recipes_by_id(m, args.recipes)
    p = assoc.transform_text(_sequences(vocab, recipes))
    out = Path(args.out or Path(args.run) / "grids")
    with run_dir(out, args, write_config=False) as out:
        if args.mode == "fixed-z":
            if len(recipes) < 2:
                raise CommandError("a fixed-z grid needs at least two recipes")
            scales = grid_fixed_z(gan, p, args.z_seed)
            cells = [{"recipe": r.id, "z_seed": args.z_seed} for r in recipes]
            stem = f"fixed_z_{args.z_seed}"
            save_grid(scales, out, stem, 1, {"kind": "fixed_z", "cells": cells, "layout": "one row per recipe"})
        else:
            if len(recipes) != 1:
                raise CommandError("a fixed-c grid takes exactly one recipe")
            scales = grid_fixed_c(gan, p[0], args.num_z, args.z_seed)
            cells = [{"recipe": recipes[0].id, "z_seed": args.z_seed, "z_index": k} for k in range(args.num_z)]
            stem = f"fixed_c_{recipes[0].id}"
            save_grid(scales, out, stem, args.num_z, {"kind": "fixed_c", "cells": cells})
    print(f"grid written to {out}")


def cmd_interp(args):
    from .figures import OverlapError, check_pair, interpolate, interpolation_points, mine_pairs, save_grid

    gan, assoc, vocab, data, category, _ = _load_gan(args.run)
    m = _manifest(data, category)
    points = interpolation_points(args.steps)
    if args.mine:
        pool = m.split(args.split)
        pairs = mine_pairs(pool, args.target, args.min_overlap, args.limit, args.seed)
        if not pairs:
            raise CommandError(f"no pairs around {args.target!r} reach overlap {args.min_overlap}")
    else:
        if not (args.recipe_i and args.recipe_j):
            raise CommandError("give --recipe-i and --recipe-j, or --mine")
        ri, rj = _recipes_by_id(m, [args.recipe_i, args.recipe_j])
        try:
            ov = check_pair(ri.ingredients, rj.ingredients, args.target, args.min_overlap)
        except OverlapError as exc:
            raise CommandError(str(exc)) from None
        except ValueError as exc:
            raise CommandError(str(exc)) from None
        pairs = [(ri.id, rj.id, ov)]
    out = Path(args.out or Path(args.run) / "interp")
    index = {r.id: r for r in m.recipes}
    summary = []
    oracle = _load_oracle(args.oracle) if args.oracle else None
    target_glyph = None
    if oracle is not None and _is_synthetic(m):
        from .synthbench import glyph_name

        names = [glyph_name(g) for g in range(oracle.num_glyphs)]
        target_glyph = names.index(args.target) if args.target in names else None
    with run_dir(out, args, write_config=False) as out:
        for i_id, j_id, ov in pairs:
            p = assoc.transform_text(_sequences(vocab, [index[i_id], index[j_id]]))
            scales = interpolate(gan, p[0], p[1], points, args.z_seed)
            row = {"recipe_i": i_id, "recipe_j": j_id, "target": args.target, "overlap": ov,
                   "points": [str(t) for t in points], "z_seed": args.z_seed}
            if target_glyph is not None:
                row["target_prob"] = [float(x) for x in oracle.predict_proba(scales[2])[:, target_glyph]]
            save_grid(scales, out, f"{i_id}__{j_id}", len(points), row)
            summary.append(row)
        dump_json(summary, out / "interp.json")
    if target_glyph is not None:
        dropped = float(np.mean([r["target_prob"][-1] < r["target_prob"][0] for r in summary]))
        print(json.dumps({"pairs": len(summary), "fraction_decreasing": dropped}, sort_keys=True))
    else:
        print(json.dumps({"pairs": len(summary)}, sort_keys=True))


# --------------------------------------------------------------------------- report


def _fmt(v, width=12, prec=2):
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.{prec}f}"


def build_report(run_dirs) -> str:
    """Table-1 style retrieval tables and Table-3 style generation tables."""
    from .retrieval import format_table

    retrieval, generation, missing = {}, [], []
    for d in run_dirs:
        path = Path(d) / METRICS_NAME
        if not path.exists():
            missing.append(f"{d}: no {METRICS_NAME}")
            continue
        doc = read_json(path)
        if doc.get("kind") == "retrieval":
            retrieval.setdefault(doc["pool_size"], {})[doc["model"]] = doc["retrieval"]
        elif doc.get("kind") == "generation":
            generation.append(doc)
            for key in ("IS_mean", "IS_std", "FID", "fake2recipe"):
                if doc.get(key) is None:
                    missing.append(f"{d}: {key}")
        else:
            missing.append(f"{d}: unrecognised metrics kind {doc.get('kind')!r}")

    parts = []
    for pool in sorted(retrieval):
        parts.append(f"Retrieval, pool {pool}\n" + format_table(retrieval[pool]))
    if generation:
        lines = [f"{'category':<14}{'model':<24}{'IS':>12}{'IS std':>12}{'FID':>12}", "-" * 74]
        for g in sorted(generation, key=lambda g: (g["category"], g["model"])):
            lines.append(f"{g['category']:<14}{g['model']:<24}{_fmt(g.get('IS_mean'))}"
                         f"{_fmt(g.get('IS_std'))}{_fmt(g.get('FID'))}")
        parts.append("Image quality\n" + "\n".join(lines))

        models = sorted({g["model"] for g in generation})
        cats = sorted({g["category"] for g in generation})
        pools = sorted({g["pool_size"] for g in generation})
        cell = {(g["category"], g["model"]): g for g in generation}
        for pool in pools:
            header = f"{'category':<14}" + "".join(f"{mdl:>24}" for mdl in models) + f"{'random':>24}"
            lines = [header, "-" * len(header)]
            for c in cats:
                vals = []
                for mdl in models:
                    g = cell.get((c, mdl))
                    ok = g is not None and g["pool_size"] == pool and g.get("fake2recipe")
                    vals.append(_fmt(g["fake2recipe"]["medr"]["mean"] if ok else None, 24))
                lines.append(f"{c:<14}" + "".join(vals) + _fmt(pool / 2, 24))
            parts.append(f"Fake image to recipe MedR, pool {pool}\n" + "\n".join(lines))
    if missing:
        parts.append("Missing metrics\n" + "\n".join(f"  {x}" for x in missing))
    return "\n\n".join(parts) + "\n"


def cmd_report(args):
    text = build_report(args.runs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --------------------------------------------------------------------------- parser


def _add(sub, name, func, help_text):
    p = sub.add_parser(name, help=help_text, description=help_text)
    p.set_defaults(func=func)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mealsynth", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    top = parser.add_subparsers(dest="group", required=True)

    # data
    data = top.add_parser("data", help="datasets").add_subparsers(dest="action", required=True)
    p = _add(data, "prepare", cmd_data_prepare, "load, filter and split a recipe corpus")
    p.add_argument("--corpus", required=True, help="JSON-Lines file or recipe layer JSON")
    p.add_argument("--format", choices=("jsonl", "recipe1m"), default="jsonl")
    p.add_argument("--image-layer", help="image layer JSON (recipe1m format)")
    p.add_argument("--out", required=True)
    p.add_argument("--category", help="tag every kept recipe with this category")
    p.add_argument("--fractions", type=float, nargs=3, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--seed", type=int, default=0)

    p = _add(data, "synth", cmd_data_synth, "generate a synthetic glyph benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--num-recipes", type=int, default=5000)
    p.add_argument("--glyphs", type=int, default=8)
    p.add_argument("--invisible", type=int, default=0, help="ingredients that are never drawn")
    p.add_argument("--frequency", type=float, help="inclusion probability of each ingredient (default 0.2)")
    p.add_argument("--category")
    p.add_argument("--fractions", type=float, nargs=3, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--write-images", action="store_true", help="also write PNG renders")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    oracle = top.add_parser("oracle", help="synthetic presence oracle").add_subparsers(dest="action", required=True)
    p = _add(oracle, "train", cmd_oracle_train, "train the glyph presence oracle on fresh renders")
    p.add_argument("--out", required=True)
    p.add_argument("--glyphs", type=int, default=8)
    p.add_argument("--num-images", type=int, default=4000)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--noise-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    # vocabulary
    vocab = top.add_parser("vocab", help="ingredient vocabulary").add_subparsers(dest="action", required=True)
    p = _add(vocab, "build", cmd_vocab_build, "frequency cut, stem merge, embeddings and fusion proposals")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=4000)
    p.add_argument("--threshold", type=float, default=0.85, help="cosine threshold for fusion proposals")
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--decisions", help="reviewed decisions file (token_a, token_b, accept|reject)")
    p.add_argument("--category")
    p.add_argument("--seed", type=int, default=0)

    # association
    assoc = top.add_parser("assoc", help="association model").add_subparsers(dest="action", required=True)
    p = _add(assoc, "train", cmd_assoc_train, "train ingredient and image encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True, help="directory written by 'vocab build'")
    p.add_argument("--out", required=True)
    p.add_argument("--image-root", help="image directory (defaults to the dataset directory)")
    p.add_argument("--category")
    p.add_argument("--backbone", choices=("small", "resnet50"), default="small")
    p.add_argument("--backbone-weights", help="local state dict for the resnet50 backbone")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--width", type=int, default=32, help="width of the small backbone")
    p.add_argument("--embedding-dim", type=int, default=300)
    p.add_argument("--no-attention", action="store_true", help="pool with final recurrent states")
    p.add_argument("--no-init-embeddings", action="store_true")
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-train", type=int)
    p.add_argument("--max-val", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = _add(assoc, "eval", cmd_assoc_eval, "retrieval MedR and R@K over resampled pools")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="override the dataset used for training")
    p.add_argument("--image-root")
    p.add_argument("--category")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--pool-size", type=int, default=1000)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--name", help="model name in reports (default: run directory name)")
    p.add_argument("--out", help="metrics directory (default: the run directory)")
    p.add_argument("--attention-out", help="write per-recipe attention weights to this JSON file")
    p.add_argument("--attention-count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    # GAN
    gan = top.add_parser("gan", help="conditional generator").add_subparsers(dest="action", required=True)
    p = _add(gan, "train", cmd_gan_train, "train the three-scale GAN on a frozen association model")
    p.add_argument("--assoc", required=True, help="association run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="override the association run's dataset")
    p.add_argument("--image-root")
    p.add_argument("--category")
    p.add_argument("--base-size", type=int, default=64, help="smallest output size; others are 2x and 4x")
    p.add_argument("--z-dim", type=int, default=100)
    p.add_argument("--c-dim", type=int, default=128)
    p.add_argument("--g-channels", type=_channels, default=(64, 32, 16))
    p.add_argument("--d-channels", type=int, default=16)
    p.add_argument("--lambda-uncond", type=float, default=0.5)
    p.add_argument("--lambda-ca", type=float, default=0.02)
    p.add_argument("--lambda-cycle", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-g", type=float, default=2e-4)
    p.add_argument("--lr-d", type=float, default=2e-4)
    p.add_argument("--ema-decay", type=float, default=0.999, help="generator weight averaging; 0 disables")
    p.add_argument("--max-train", type=int)
    p.add_argument("--num-samples", type=int, default=8, help="recipes in the final sample grid")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = _add(gan, "eval", cmd_gan_eval, "IS, FID and fake-to-recipe MedR")
    p.add_argument("--run", required=True)
    p.add_argument("--oracle", help="presence oracle checkpoint (synthetic data)")
    p.add_argument("--inception-weights", help="local Inception-v3 state dict (real photographs)")
    p.add_argument("--image-root")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--num-samples", type=int, default=900)
    p.add_argument("--pool-size", type=int, default=900)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--is-splits", type=int, default=10)
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)

    p = _add(top, "grid", cmd_grid, "fixed-z (several recipes) or fixed-c (one recipe) sample grids")
    p.add_argument("--run", required=True, help="GAN run directory")
    p.add_argument("--mode", choices=("fixed-z", "fixed-c"), required=True)
    p.add_argument("--recipes", nargs="+", required=True)
    p.add_argument("--num-z", type=int, default=8)
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--out")

    p = _add(top, "interp", cmd_interp, "interpolate between a recipe with an ingredient and one without")
    p.add_argument("--run", required=True, help="GAN run directory")
    p.add_argument("--target", required=True, help="ingredient present in the first recipe only")
    p.add_argument("--recipe-i")
    p.add_argument("--recipe-j")
    p.add_argument("--mine", action="store_true", help="search the split for qualifying pairs")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--min-overlap", type=float, default=0.7)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--oracle", help="score the target glyph along the sweep")
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)

    p = _add(top, "report", cmd_report, "retrieval and generation tables from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command_path = " ".join(x for x in (args.group, getattr(args, "action", None)) if x)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (CommandError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mealsynth: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
