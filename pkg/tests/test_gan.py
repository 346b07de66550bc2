import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import central_fd, cond_d_ref, cycle_ref, generator_ref, kl_monte_carlo, kl_ref, rel_err, uncond_d_ref
from mealsynth.foodspace import DivergenceError, FoodSpaceModel
from mealsynth.gan import (
    ConditionAugment,
    LossWeights,
    MealGAN,
    MultiScaleGenerator,
    ScaleDiscriminator,
    adversarial_g_loss,
    conditional_d_loss,
    cycle_similarity,
    discriminator_loss,
    generator_loss,
    kl_standard_normal,
    unconditional_d_loss,
)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ------------------------------------------------------------------ KL

def test_kl_zero_at_standard_normal():
    assert float(kl_standard_normal(torch.zeros(3, 5), torch.zeros(3, 5))) == 0.0


def test_kl_unit_means_dim4():
    assert float(kl_standard_normal(torch.ones(1, 4), torch.zeros(1, 4))) == pytest.approx(2.0)


def test_kl_matches_reference_and_monte_carlo():
    rng = np.random.default_rng(0)
    mu, lv = rng.normal(0, 0.8, (4, 6)), rng.normal(0, 0.5, (4, 6))
    assert float(kl_standard_normal(t64(mu), t64(lv))) == pytest.approx(kl_ref(mu, lv), abs=1e-6)
    for m_row, l_row in zip(mu, lv):
        mc = kl_monte_carlo(m_row, l_row, 100_000, rng)
        closed = float(kl_standard_normal(t64(m_row[None]), t64(l_row[None])))
        assert abs(mc - closed) <= 0.01 * closed


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-4, 4)), arrays(np.float64, (2, 3), elements=st.floats(-4, 4)))
def test_kl_non_negative(mu, lv):
    v = float(kl_standard_normal(t64(mu), t64(lv)))
    assert v >= -1e-12
    if v == 0:
        assert np.allclose(mu, 0, atol=1e-6) and np.allclose(lv, 0, atol=1e-3)


def test_kl_rejects_bad_input():
    with pytest.raises(ValueError):
        kl_standard_normal(torch.tensor([[float("nan")]]), torch.zeros(1, 1))
    with pytest.raises(ValueError):
        kl_standard_normal(torch.zeros(1, 2), torch.zeros(1, 3))


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    mu0, lv0 = rng.standard_normal((3, 4)), rng.normal(0, 0.5, (3, 4))
    mu, lv = t64(mu0).requires_grad_(), t64(lv0).requires_grad_()
    kl_standard_normal(mu, lv).backward()
    assert rel_err(mu.grad, central_fd(lambda x: float(kl_standard_normal(t64(x), t64(lv0))), mu0)) < 1e-4
    assert rel_err(lv.grad, central_fd(lambda x: float(kl_standard_normal(t64(mu0), t64(x))), lv0)) < 1e-4


# ------------------------------------------------------------------ discriminator losses

def test_conditional_d_loss_at_half():
    half = torch.full((5,), 0.5, dtype=torch.float64)
    assert float(conditional_d_loss(half, half, half)) == pytest.approx(3 * math.log(2), abs=1e-12)


def test_conditional_d_loss_perfect_limit():
    e = 1e-9
    v = float(conditional_d_loss(t64([1 - e]), t64([e]), t64([e])))
    assert 0 < v < 1e-8


def test_conditional_d_loss_monotone_in_real_score():
    other = t64([0.3])
    vals = [float(conditional_d_loss(t64([d]), other, other)) for d in np.linspace(0.05, 0.95, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_d_losses_match_reference():
    rng = np.random.default_rng(2)
    r, w, f = (rng.uniform(0.01, 0.99, 7) for _ in range(3))
    assert float(conditional_d_loss(t64(r), t64(w), t64(f))) == pytest.approx(cond_d_ref(r, w, f), abs=1e-6)
    assert float(unconditional_d_loss(t64(r), t64(w), t64(f))) == pytest.approx(uncond_d_ref(r, w, f), abs=1e-6)


def test_logit_path_equals_probability_path():
    rng = np.random.default_rng(3)
    logits = [t64(rng.normal(0, 2, 6)) for _ in range(3)]
    probs = [torch.sigmoid(x) for x in logits]
    for fn in (conditional_d_loss, unconditional_d_loss):
        assert float(fn(*logits, from_logits=True)) == pytest.approx(float(fn(*probs)), abs=1e-10)
    assert float(adversarial_g_loss(logits[0], True)) == pytest.approx(float(adversarial_g_loss(probs[0])), abs=1e-10)


def test_d_loss_rejects_non_probabilities():
    with pytest.raises(ValueError):
        conditional_d_loss(t64([1.0]), t64([0.5]), t64([0.5]))
    with pytest.raises(ValueError):
        unconditional_d_loss(t64([0.5]), t64([-0.1]), t64([0.5]))


def test_discriminator_loss_permutation_invariant():
    torch.manual_seed(0)
    d = ScaleDiscriminator(16, c_dim=8, channels=4)
    real, wrong, fake = (torch.randn(6, 3, 16, 16) for _ in range(3))
    c = torch.randn(6, 8)
    perm = torch.tensor([5, 2, 0, 4, 1, 3])
    a = discriminator_loss(d, real, wrong, fake, c)
    b = discriminator_loss(d, real[perm], wrong[perm], fake[perm], c[perm])
    assert a.item() == pytest.approx(b.item(), abs=1e-6)


# ------------------------------------------------------------------ generator loss and cycle term

def scales_fixture(seed=4):
    rng = np.random.default_rng(seed)
    cond = [rng.uniform(0.05, 0.95, 5) for _ in range(3)]
    uncond = [rng.uniform(0.05, 0.95, 5) for _ in range(3)]
    cyc = list(rng.uniform(-1, 1, 3))
    return cond, uncond, cyc


def test_generator_loss_matches_reference():
    cond, uncond, cyc = scales_fixture()
    w = LossWeights(0.5, 0.02, 1.0)
    got = generator_loss([t64(x) for x in cond], [t64(x) for x in uncond], [t64(x) for x in cyc], t64(3.7), w)
    assert float(got) == pytest.approx(generator_ref(cond, uncond, cyc, 3.7, 0.5, 0.02, 1.0), abs=1e-6)


def test_generator_loss_zero_weights_is_plain_adversarial():
    cond, uncond, cyc = scales_fixture(5)
    got = generator_loss([t64(x) for x in cond], [t64(x) for x in uncond], [t64(x) for x in cyc], t64(9.0),
                         LossWeights(0, 0, 0))
    plain = sum(-np.mean(np.log(x)) for x in cond)
    assert float(got) == pytest.approx(plain, abs=1e-12)


def test_generator_loss_identical_embeddings_cycle_contribution():
    q = torch.randn(4, 16, dtype=torch.float64)
    sims = [cycle_similarity(q, q.clone()) for _ in range(3)]
    ones = [torch.full((4,), 0.5, dtype=torch.float64)] * 3
    with_cyc = generator_loss(ones, ones, sims, t64(0.0), LossWeights(0.5, 0.02, 2.0))
    without = generator_loss(ones, ones, [t64(0.0)] * 3, t64(0.0), LossWeights(0.5, 0.02, 2.0))
    assert float(with_cyc - without) == pytest.approx(-3 * 2.0, abs=1e-12)


def test_generator_loss_needs_three_scales():
    one = [t64([0.5])]
    with pytest.raises(ValueError):
        generator_loss(one * 2, one * 2, [t64(0.0)] * 2, t64(0.0))


def test_cycle_similarity_matches_reference_and_bounds():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((8, 32)), rng.standard_normal((8, 32))
    v = float(cycle_similarity(t64(a), t64(b)))
    assert v == pytest.approx(cycle_ref(a, b), abs=1e-6)
    assert -1 <= v <= 1
    assert float(cycle_similarity(t64(a), t64(-a))) == pytest.approx(-1.0)


def test_cycle_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    qr, qf0 = rng.standard_normal((3, 9)), rng.standard_normal((3, 9))
    qf = t64(qf0).requires_grad_()
    cycle_similarity(t64(qr), qf).backward()
    fd = central_fd(lambda x: float(cycle_similarity(t64(qr), t64(x))), qf0)
    assert rel_err(qf.grad, fd) < 1e-4


# ------------------------------------------------------------------ conditioning augmentation

def test_condition_augment_sampling_and_eval_switch():
    torch.manual_seed(0)
    ca = ConditionAugment(32, 8)
    p = torch.randn(2, 32)
    mu1, lv1, c1 = ca(p, sample=True)
    mu2, lv2, c2 = ca(p, sample=True)
    assert torch.equal(mu1, mu2) and torch.equal(lv1, lv2)
    assert not torch.equal(c1, c2)
    mu, _, c = ca(p, sample=False)
    assert torch.equal(c, mu)


def test_condition_augment_monte_carlo_mean():
    torch.manual_seed(1)
    ca = ConditionAugment(16, 4)
    p = torch.randn(1, 16).expand(100_000, 16)
    with torch.no_grad():
        mu, lv, c = ca(p, sample=True, generator=torch.Generator().manual_seed(2))
    se = torch.exp(0.5 * lv[0]) / math.sqrt(len(c))
    assert ((c.mean(0) - mu[0]).abs() <= 3 * se).all()


def test_reparameterisation_gradient_is_identity():
    mu = torch.zeros(1, 5, requires_grad=True)
    lv = torch.zeros(1, 5)
    eta = torch.randn(1, 5)
    c = mu + torch.exp(0.5 * lv) * eta
    jac = torch.stack([torch.autograd.grad(c[0, i], mu, retain_graph=True)[0][0] for i in range(5)])
    assert torch.equal(jac, torch.eye(5))
    # and the module uses the same construction
    torch.manual_seed(3)
    ca = ConditionAugment(6, 5)
    p = torch.randn(1, 6)
    g = torch.Generator().manual_seed(9)
    mu, lv, c = ca(p, sample=True, generator=g)
    eta = torch.randn(mu.shape, generator=torch.Generator().manual_seed(9))
    assert torch.allclose(c, mu + torch.exp(0.5 * lv) * eta)


# ------------------------------------------------------------------ generator network

@pytest.fixture(scope="module")
def generator64():
    torch.manual_seed(0)
    return MultiScaleGenerator(z_dim=10, c_dim=6, p_dim=12, base_size=64, channels=(8, 4, 4)).eval()


def test_generate_shapes_at_64(generator64):
    outs = generator64(torch.randn(2, 6), torch.randn(2, 10))
    assert [tuple(o.shape) for o in outs] == [(2, 3, 64, 64), (2, 3, 128, 128), (2, 3, 256, 256)]
    assert all(o.abs().max() <= 1 for o in outs)


def test_generate_deterministic_and_conditioned(generator64):
    c, z = torch.randn(1, 6), torch.randn(1, 10)
    a = generator64(c, z)
    b = generator64(c, z)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    other = generator64(c + 1.0, z)
    assert all((x - y).abs().max() > 0 for x, y in zip(a, other))


def test_generate_batch_shape_stable(generator64):
    c, z = torch.randn(3, 6), torch.randn(3, 10)
    one = generator64(c, z)
    two = generator64(torch.cat([c, c]), torch.cat([z, z]))
    for x, y in zip(one, two):
        assert y.shape[0] == 2 * x.shape[0] and y.shape[1:] == x.shape[1:]
        assert torch.allclose(y[:3], x, atol=1e-6)


def test_generate_dimension_mismatch(generator64):
    with pytest.raises(ValueError):
        generator64(torch.randn(2, 5), torch.randn(2, 10))


def test_discriminator_rejects_wrong_scale():
    d = ScaleDiscriminator(32, c_dim=4, channels=4)
    with pytest.raises(ValueError):
        d(torch.zeros(1, 3, 16, 16), torch.zeros(1, 4))


# ------------------------------------------------------------------ training plumbing

@pytest.fixture(scope="module")
def tiny_setup():
    g = torch.Generator().manual_seed(0)
    seqs = [[1 + i % 4] for i in range(16)]
    imgs = torch.rand(16, 3, 64, 64, generator=g) * 2 - 1
    assoc = FoodSpaceModel(num_embeddings=5, embedding_dim=8, epochs=1, batch_size=8, image_size=16,
                           width=4).fit(seqs, imgs)
    return assoc, assoc.transform_text(seqs), imgs


def small_gan(**kw):
    args = dict(z_dim=8, c_dim=8, base_size=16, g_channels=(8, 4, 4), d_channels=4, steps=50,
                batch_size=4, seed=0)
    args.update(kw)
    return MealGAN(**args)


def test_smoke_run_and_frozen_encoder(tiny_setup, tmp_path):
    from mealsynth.figures import grid_fixed_z, save_grid

    assoc, p, imgs = tiny_setup
    before = assoc.digest()
    flags = [q.requires_grad for q in assoc.image_encoder_.parameters()]
    gan = small_gan(p_dim=p.shape[1]).fit(p, imgs, assoc, log_every=25)
    assert assoc.digest() == before
    assert [q.requires_grad for q in assoc.image_encoder_.parameters()] == flags
    assert [r["step"] for r in gan.history_] == [25, 50]
    paths = save_grid(grid_fixed_z(gan, p[:3]), tmp_path, "g", 3, {"recipes": [0, 1, 2]})
    assert [x.name for x in paths] == ["g_16px.png", "g_32px.png", "g_64px.png"]


def test_fit_is_reproducible(tiny_setup):
    assoc, p, imgs = tiny_setup
    a = small_gan(p_dim=p.shape[1], steps=6).fit(p, imgs, assoc, log_every=3)
    b = small_gan(p_dim=p.shape[1], steps=6).fit(p, imgs, assoc, log_every=3)
    assert a.history_ == b.history_ and a.digest() == b.digest()


def test_divergence_restores_and_raises(tiny_setup):
    assoc, p, imgs = tiny_setup
    bad = p.copy()
    bad[:] = np.nan
    gan = small_gan(p_dim=p.shape[1], steps=3)
    with pytest.raises(DivergenceError):
        gan.fit(bad, imgs, assoc)


def test_wrong_image_scale_rejected(tiny_setup):
    assoc, p, imgs = tiny_setup
    with pytest.raises(ValueError):
        small_gan(p_dim=p.shape[1]).fit(p, imgs[:, :, :32, :32], assoc)


def test_eval_generation_uses_mu(tiny_setup):
    assoc, p, imgs = tiny_setup
    gan = small_gan(p_dim=p.shape[1], steps=2).fit(p, imgs, assoc)
    mu, _, c = gan.condition(p[:2])
    assert torch.equal(mu, c)
    a = gan.generate(p[:2], z_seed=4)
    b = gan.generate(p[:2], z_seed=4)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_save_load(tiny_setup, tmp_path):
    assoc, p, imgs = tiny_setup
    gan = small_gan(p_dim=p.shape[1], steps=2).fit(p, imgs, assoc)
    gan.save(tmp_path / "g.pt")
    back = MealGAN.load(tmp_path / "g.pt")
    assert back.digest() == gan.digest()
    assert back.encoder_digest_ == assoc.digest()
    assert torch.equal(back.generate(p[:2])[2], gan.generate(p[:2])[2])


def test_generator_weight_average(tiny_setup):
    assoc, p, imgs = tiny_setup
    steps, decay = 5, 0.6
    raw = []

    def grab(step, rec):
        raw.append({k: v.clone() for k, v in gan0.generator_.state_dict().items()})

    gan0 = small_gan(p_dim=p.shape[1], steps=steps, ema_decay=0.0)
    gan0.fit(p, imgs, assoc, callback=grab, log_every=1)
    init = {k: v.clone() for k, v in small_gan(p_dim=p.shape[1])._build().generator_.state_dict().items()}
    # averaging must not change the training trajectory, only the weights handed back
    avg = small_gan(p_dim=p.shape[1], steps=steps, ema_decay=decay).fit(p, imgs, assoc)
    assert not hasattr(avg, "ema_generator_")
    expect = init
    for t, w in enumerate(raw):
        d = min(decay, (1 + t) / (10 + t))
        expect = {k: d * expect[k] + (1 - d) * w[k] for k in w}
    got = avg.generator_.state_dict()
    for k in expect:
        assert torch.allclose(got[k], expect[k], atol=1e-6), k
    assert torch.equal(gan0.generator_.state_dict()[k], raw[-1][k])
