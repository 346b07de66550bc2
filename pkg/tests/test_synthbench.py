import numpy as np
import pytest

from mealsynth.data import load_manifest, save_manifest
from mealsynth.synthbench import (
    SynthRecipe,
    bench_from_manifest,
    build_benchmark,
    glyph_color,
    inclusion_probabilities,
    render,
    to_tensor,
)


def colour_set(img, k=8):
    flat = {tuple(c) for c in img.reshape(-1, 3)}
    return {g for g in range(k) if glyph_color(g, k) in flat}


def colour_count(img, g, k=8):
    return int((img.reshape(-1, 3) == np.array(glyph_color(g, k))).all(1).sum())


def test_render_is_pure():
    r = SynthRecipe((0, 3, 5), 1234)
    a, b = render(r, 64), render(SynthRecipe((0, 3, 5), 1234), 64)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (64, 64, 3) and a.dtype == np.uint8


def test_render_errors():
    with pytest.raises(ValueError):
        SynthRecipe((9,), 0)
    with pytest.raises(ValueError):
        SynthRecipe((), 0)
    with pytest.raises(ValueError):
        render(SynthRecipe((1,), 0), 4)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_disjoint_subsets_disjoint_colours(size):
    a = render(SynthRecipe((0, 1, 2), 7), size)
    b = render(SynthRecipe((4, 5), 7), size)
    assert colour_set(a) == {0, 1, 2}
    assert colour_set(b) == {4, 5}


def test_added_glyph_pixels_all_present():
    for seed in range(20):
        alone = render(SynthRecipe((1,), seed), 64)
        both = render(SynthRecipe((0, 1), seed), 64)
        mask = (alone == np.array(glyph_color(1, 8))).all(-1)
        assert mask.sum() > 0
        assert (both[mask] == np.array(glyph_color(1, 8))).all()
        assert colour_count(both, 1) == mask.sum()


def test_invisible_ingredients_are_not_drawn():
    shown = render(SynthRecipe((2,), 5, 8, 2), 32)
    hidden = render(SynthRecipe((2, 8, 9), 5, 8, 2), 32)
    assert shown.tobytes() == hidden.tobytes()
    assert SynthRecipe((2, 8, 9), 5, 8, 2).ingredient_names() == ["g3", "h1", "h2"]


def test_glyph_position_independent_of_other_glyphs():
    alone = render(SynthRecipe((6,), 99), 64)
    crowded = render(SynthRecipe((0, 1, 2, 3, 6), 99), 64)
    m = (alone == np.array(glyph_color(6, 8))).all(-1)
    assert (crowded[m] == np.array(glyph_color(6, 8))).all()


def test_benchmark_contract():
    b = build_benchmark(1000, 8, seed=3)
    assert len(b.manifest.recipes) == 1000
    assert all(1 <= len(r.ingredients) <= 8 for r in b.manifest.recipes)
    assert b.manifest.counts() == {"train": 700, "val": 150, "test": 150}
    again = build_benchmark(1000, 8, seed=3)
    assert again.manifest == b.manifest and again.recipes == b.recipes
    assert build_benchmark(1000, 8, seed=4).manifest != b.manifest


def test_marginals_match_configured_frequencies():
    freq = [0.1, 0.2, 0.3, 0.4, 0.15, 0.25, 0.35, 0.05]
    b = build_benchmark(20000, 8, seed=1, frequencies=freq)
    y = b.labels(list(b.manifest.recipes))
    assert np.all(np.abs(y.mean(0) - freq) <= 0.05 * np.asarray(freq) + 0.005)


def test_inclusion_probabilities_solve_redraw_bias():
    f = np.array([0.2] * 8)
    q = inclusion_probabilities(f)
    assert q[0] / (1 - np.prod(1 - q)) == pytest.approx(0.2, abs=1e-9)
    with pytest.raises(ValueError):
        inclusion_probabilities([0.1, 0.2])


def test_unique_subsets():
    b = build_benchmark(100, 8, seed=0, unique_subsets=True)
    assert len({frozenset(r.ingredients) for r in b.manifest.recipes}) == 100
    with pytest.raises(ValueError):
        build_benchmark(300, 8, unique_subsets=True)


def test_manifest_round_trip_keeps_layouts(tmp_path):
    b = build_benchmark(50, 8, seed=2, num_invisible=2)
    save_manifest(b.manifest, tmp_path)
    back = bench_from_manifest(load_manifest(tmp_path))
    assert back.recipes == b.recipes
    rs = list(b.manifest.recipes[:5])
    assert np.array_equal(back.images(rs, 16).numpy(), b.images(rs, 16).numpy())
    vocab = back.vocabulary()
    assert sorted(vocab.canonical) == sorted([f"g{i}" for i in range(1, 9)] + ["h1", "h2"])
    assert vocab.coverage == 1.0


def test_to_tensor_range():
    t = to_tensor(np.array([[[[0, 255, 128]]]], np.uint8))
    assert t.shape == (1, 3, 1, 1)
    assert t.min() == -1 and t.max() == 1


# ------------------------------------------------------------------ oracle

def held_out(num, size, seed=11):
    b = build_benchmark(num, 8, seed=seed)
    rs = list(b.manifest.recipes)
    return b.images(rs, size), b.labels(rs)


@pytest.mark.parametrize("size", [32, 64])
def test_oracle_exact_subset_accuracy(oracle, size):
    x, y = held_out(1000, size)
    pred = oracle.predict(x)
    assert (pred == y).all(1).mean() >= 0.99


def test_oracle_contract(oracle):
    x, _ = held_out(20, 32, seed=12)
    p = oracle.predict_proba(x)
    assert p.shape == (20, 8) and (p >= 0).all() and (p <= 1).all()
    d = oracle.class_distribution(x)
    assert np.allclose(d.sum(1), 1)
    assert oracle.transform(x).shape == (20, 64)


def test_oracle_on_uniform_noise_is_not_confident(oracle):
    import torch

    noise = torch.rand(200, 3, 32, 32, generator=torch.Generator().manual_seed(0)) * 2 - 1
    p = oracle.predict_proba(noise)
    # near the 0.2 marginal prior for every glyph, nothing called present
    assert np.abs(p.mean(0) - 0.2).max() < 0.1
    assert (oracle.predict(noise).mean(0) < 0.5).all()


def test_oracle_state_round_trip(oracle):
    from mealsynth.synthbench import OracleClassifier

    x, _ = held_out(10, 32, seed=13)
    back = OracleClassifier.from_state_dict(oracle.state_dict())
    assert np.array_equal(back.predict_proba(x), oracle.predict_proba(x))
