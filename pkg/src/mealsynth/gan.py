"""Three-scale conditional GAN with conditioning augmentation and a cycle term.

The ingredient embedding ``p`` is mapped to a diagonal Gaussian over the
appearance factor ``c``; a sample of ``c`` plus noise ``z`` drives three
chained generator branches producing images at sizes ``s``, ``2s`` and ``4s``.
Each scale has its own discriminator with a conditional head (image + c)
and an unconditional head (image only). The generator is additionally
pulled towards the real image's embedding by a cosine term computed with
the frozen image encoder of the association model.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .foodspace import FOODSPACE_DIM, DivergenceError, cosine, parameter_digest

logger = logging.getLogger(__name__)

NUM_SCALES = 3


@dataclass(frozen=True)
class LossWeights:
    uncond: float = 0.5
    ca: float = 0.02
    cycle: float = 1.0

    def __post_init__(self):
        if min(self.uncond, self.ca, self.cycle) < 0:
            raise ValueError("loss weights must be non-negative")


# --------------------------------------------------------------------------- loss functions


def _check_finite(*tensors):
    for t in tensors:
        if not bool(torch.isfinite(torch.as_tensor(t)).all()):
            raise ValueError("non-finite input")


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, averaged over the batch."""
    mu, logvar = torch.as_tensor(mu), torch.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    _check_finite(mu, logvar)
    per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)
    return per.mean() if per.ndim else per


def _log_pair(d: torch.Tensor, from_logits: bool):
    """(log D, log(1 - D)) from probabilities or logits."""
    d = torch.as_tensor(d)
    if from_logits:
        return F.logsigmoid(d), F.logsigmoid(-d)
    if bool(((d <= 0) | (d >= 1)).any()):
        raise ValueError("discriminator outputs must lie strictly inside (0, 1)")
    return torch.log(d), torch.log1p(-d)


def conditional_d_loss(real, wrong, fake, from_logits: bool = False) -> torch.Tensor:
    """-E log D(v+, c) - E log(1 - D(v-, c)) - E log(1 - D(fake, c))."""
    lr, _ = _log_pair(real, from_logits)
    _, lw = _log_pair(wrong, from_logits)
    _, lf = _log_pair(fake, from_logits)
    return -lr.mean() - lw.mean() - lf.mean()


def unconditional_d_loss(real, wrong, fake, from_logits: bool = False) -> torch.Tensor:
    """Both real images count as real: -E log D(v+) - E log D(v-) - E log(1 - D(fake))."""
    lr, _ = _log_pair(real, from_logits)
    lw, _ = _log_pair(wrong, from_logits)
    _, lf = _log_pair(fake, from_logits)
    return -lr.mean() - lw.mean() - lf.mean()


def adversarial_g_loss(fake, from_logits: bool = False) -> torch.Tensor:
    """Non-saturating generator term -E log D(fake)."""
    lf, _ = _log_pair(fake, from_logits)
    return -lf.mean()


def cycle_similarity(q_real: torch.Tensor, q_fake: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity between real and generated image embeddings."""
    return cosine(q_real, q_fake).mean()


def generator_loss(cond_fake: Sequence, uncond_fake: Sequence, cycle_sims: Sequence, kl,
                   weights: LossWeights = LossWeights(), from_logits: bool = False) -> torch.Tensor:
    """Sum over scales of adv_cond + w_uncond * adv_uncond - w_cycle * cycle, plus w_ca * KL.

    ``cond_fake``/``uncond_fake`` hold discriminator outputs on the fakes at
    each scale; ``cycle_sims`` the per-scale cosine terms.
    """
    if not (len(cond_fake) == len(uncond_fake) == len(cycle_sims) == NUM_SCALES):
        raise ValueError(f"generator loss needs all {NUM_SCALES} scales")
    total = weights.ca * torch.as_tensor(kl)
    for dc, du, cyc in zip(cond_fake, uncond_fake, cycle_sims):
        total = (total + adversarial_g_loss(dc, from_logits)
                 + weights.uncond * adversarial_g_loss(du, from_logits)
                 - weights.cycle * torch.as_tensor(cyc))
    return total


# --------------------------------------------------------------------------- networks


class GLU(nn.Module):
    def forward(self, x):
        a, b = x.chunk(2, dim=1)
        return a * torch.sigmoid(b)


def _up_block(cin: int, cout: int) -> nn.Module:
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(cin, 2 * cout, 3, padding=1), GLU())


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(ch, 2 * ch, 3, padding=1), GLU(),
                                  nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class ConditionAugment(nn.Module):
    """Maps p to (mu, logvar) of the appearance factor and samples c."""

    def __init__(self, p_dim: int = FOODSPACE_DIM, c_dim: int = 128):
        super().__init__()
        self.fc = nn.Linear(p_dim, 4 * c_dim)
        self.glu = GLU()
        self.c_dim = c_dim

    def forward(self, p: torch.Tensor, sample: bool = True, generator: torch.Generator | None = None):
        h = self.glu(self.fc(p))
        mu, logvar = h[:, : self.c_dim], h[:, self.c_dim :]
        if not sample:
            return mu, logvar, mu
        eta = torch.randn(mu.shape, generator=generator)
        return mu, logvar, mu + torch.exp(0.5 * logvar) * eta


class _InitBranch(nn.Module):  # F0: (z, c) -> h0 at base size
    def __init__(self, in_dim: int, channels: int, size: int):
        super().__init__()
        n_up = int(round(math.log2(size / 4)))
        if 4 * 2**n_up != size:
            raise ValueError("base size must be 4 * 2^k")
        start = channels * 2**n_up
        self.start = start
        self.fc = nn.Linear(in_dim, 2 * start * 16)
        self.glu = GLU()
        self.ups = nn.Sequential(*[_up_block(start // 2**i, start // 2 ** (i + 1)) for i in range(n_up)])

    def forward(self, z, c):
        h = self.glu(self.fc(torch.cat([c, z], dim=1)).view(-1, 2 * self.start, 4, 4))
        return self.ups(h)


class _NextBranch(nn.Module):  # F1/F2: (h_prev, c) -> h at twice the size
    def __init__(self, cin: int, c_dim: int, channels: int):
        super().__init__()
        self.joint = nn.Sequential(nn.Conv2d(cin + c_dim, 2 * channels, 3, padding=1), GLU())
        self.res = _ResBlock(channels)
        self.up = _up_block(channels, channels)

    def forward(self, h, c):
        cmap = c[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        return self.up(self.res(self.joint(torch.cat([h, cmap], dim=1))))


class _ToImage(nn.Module):  # T_i
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, h):
        return torch.tanh(self.conv(h))


class MultiScaleGenerator(nn.Module):
    def __init__(self, z_dim: int = 100, c_dim: int = 128, p_dim: int = FOODSPACE_DIM,
                 base_size: int = 64, channels: Sequence[int] = (64, 32, 16)):
        super().__init__()
        self.z_dim, self.c_dim, self.base_size = z_dim, c_dim, base_size
        self.ca = ConditionAugment(p_dim, c_dim)
        self.f0 = _InitBranch(z_dim + c_dim, channels[0], base_size)
        self.f1 = _NextBranch(channels[0], c_dim, channels[1])
        self.f2 = _NextBranch(channels[1], c_dim, channels[2])
        self.t0, self.t1, self.t2 = _ToImage(channels[0]), _ToImage(channels[1]), _ToImage(channels[2])

    def forward(self, c: torch.Tensor, z: torch.Tensor):
        if c.shape[1] != self.c_dim or z.shape[1] != self.z_dim or c.shape[0] != z.shape[0]:
            raise ValueError(f"expected c (n, {self.c_dim}) and z (n, {self.z_dim}), "
                             f"got {tuple(c.shape)} and {tuple(z.shape)}")
        h0 = self.f0(z, c)
        h1 = self.f1(h0, c)
        h2 = self.f2(h1, c)
        return [self.t0(h0), self.t1(h1), self.t2(h2)]


class ScaleDiscriminator(nn.Module):
    """Discriminator for one scale with conditional and unconditional logit heads."""

    def __init__(self, size: int, c_dim: int = 128, channels: int = 16, max_channels: int = 128):
        super().__init__()
        n_down = int(round(math.log2(size / 4)))
        if 4 * 2**n_down != size:
            raise ValueError("image size must be 4 * 2^k")
        layers, cin = [], 3
        for i in range(n_down):
            cout = min(channels * 2**i, max_channels)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.size = size
        self.body = nn.Sequential(*layers)
        self.uncond = nn.Conv2d(cin, 1, 4)
        self.joint = nn.Sequential(nn.Conv2d(cin + c_dim, cin, 3, padding=1), nn.LeakyReLU(0.2))
        self.cond = nn.Conv2d(cin, 1, 4)

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None):
        """Logits ``(cond, uncond)``; ``cond`` is ``None`` when ``c`` is omitted."""
        if x.shape[-1] != self.size:
            raise ValueError(f"discriminator for {self.size}px got {x.shape[-1]}px images")
        h = self.body(x)
        u = self.uncond(h).view(-1)
        if c is None:
            return None, u
        cmap = c[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        return self.cond(self.joint(torch.cat([h, cmap], dim=1))).view(-1), u


def discriminator_loss(disc: ScaleDiscriminator, real, wrong, fake, c, lambda_uncond: float = 0.5):
    """Conditional plus weighted unconditional cross-entropy for one scale."""
    rc, ru = disc(real, c)
    wc, wu = disc(wrong, c)
    fc, fu = disc(fake, c)
    return (conditional_d_loss(rc, wc, fc, from_logits=True)
            + lambda_uncond * unconditional_d_loss(ru, wu, fu, from_logits=True))


def downscale(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="area")


# --------------------------------------------------------------------------- estimator


class MealGAN(BaseEstimator):
    """Conditional three-scale GAN over ingredient embeddings.

    ``fit(p, images, encoder)`` takes ingredient embeddings ``p``, paired real
    images at the top scale ``4 * base_size`` and the frozen association
    model whose image encoder supplies the cycle term.

    With ``ema_decay > 0`` a running average of the generator weights is kept
    during training and installed as ``generator_`` when ``fit`` returns; the
    raw last-step weights are noisier under the adversarial game.
    """

    def __init__(self, z_dim: int = 100, c_dim: int = 128, p_dim: int = FOODSPACE_DIM,
                 base_size: int = 64, g_channels: tuple = (64, 32, 16), d_channels: int = 16,
                 lambda_uncond: float = 0.5, lambda_ca: float = 0.02, lambda_cycle: float = 1.0,
                 steps: int = 2000, batch_size: int = 32, lr_g: float = 2e-4, lr_d: float = 2e-4,
                 ema_decay: float = 0.999, seed: int = 0):
        self.z_dim = z_dim
        self.c_dim = c_dim
        self.p_dim = p_dim
        self.base_size = base_size
        self.g_channels = g_channels
        self.d_channels = d_channels
        self.lambda_uncond = lambda_uncond
        self.lambda_ca = lambda_ca
        self.lambda_cycle = lambda_cycle
        self.steps = steps
        self.batch_size = batch_size
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.ema_decay = ema_decay
        self.seed = seed

    @property
    def sizes(self) -> tuple[int, int, int]:
        s = self.base_size
        return (s, 2 * s, 4 * s)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_uncond, self.lambda_ca, self.lambda_cycle)

    def _build(self):
        torch.manual_seed(self.seed)
        self.generator_ = MultiScaleGenerator(self.z_dim, self.c_dim, self.p_dim, self.base_size,
                                              tuple(self.g_channels))
        self.discriminators_ = nn.ModuleList(
            [ScaleDiscriminator(s, self.c_dim, self.d_channels) for s in self.sizes])
        return self

    def fit(self, p, images, encoder, callback: Callable[[int, dict], None] | None = None,
            log_every: int = 50):
        """Alternate discriminator and generator steps over all three scales.

        ``encoder`` is a fitted association model and is never updated.
        ``callback(step, record)`` fires every ``log_every`` steps.
        """
        p = torch.as_tensor(np.asarray(p), dtype=torch.float32)
        images = torch.as_tensor(images, dtype=torch.float32)
        if images.shape[-1] != self.sizes[2]:
            raise ValueError(f"real images must be {self.sizes[2]}px, got {images.shape[-1]}px")
        if len(p) != len(images) or len(p) < 2:
            raise ValueError("need at least two (embedding, image) pairs")
        self._build()
        img_enc = encoder.image_encoder_
        img_enc.eval()
        frozen = [prm.requires_grad for prm in img_enc.parameters()]
        for prm in img_enc.parameters():
            prm.requires_grad_(False)
        try:
            self._train(p, images, img_enc, callback, log_every)
        finally:
            for prm, flag in zip(img_enc.parameters(), frozen):
                prm.requires_grad_(flag)
        self.encoder_digest_ = encoder.digest()
        return self.eval()

    def _train(self, p, images, img_enc, callback, log_every):
        gen = torch.Generator().manual_seed(self.seed)
        reals = [downscale(images, s) for s in self.sizes]
        with torch.no_grad():
            q_real = torch.cat([img_enc(images[i : i + 256]) for i in range(0, len(images), 256)])
        G, Ds = self.generator_, self.discriminators_
        opt_g = torch.optim.Adam(G.parameters(), lr=self.lr_g, betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(Ds.parameters(), lr=self.lr_d, betas=(0.5, 0.999))
        w = self.weights
        n = len(p)
        self.history_ = []
        ema = copy.deepcopy(G).requires_grad_(False) if self.ema_decay > 0 else None
        self.ema_generator_ = ema
        last_good = copy.deepcopy((G.state_dict(), Ds.state_dict()))
        order, cursor = torch.randperm(n, generator=gen), 0
        G.train()
        Ds.train()
        for step in range(self.steps):
            if cursor + self.batch_size > n:
                order, cursor = torch.randperm(n, generator=gen), 0
            idx = order[cursor : cursor + self.batch_size]
            cursor += self.batch_size
            wrong_idx = idx.roll(1)
            pb = p[idx]
            mu, logvar, c = G.ca(pb, sample=True, generator=gen)
            z = torch.randn(len(idx), self.z_dim, generator=gen)
            fakes = G(c, z)

            # discriminators judge pairs against mu; the sampled c only feeds the generator
            d_loss = sum(discriminator_loss(Ds[i], reals[i][idx], reals[i][wrong_idx],
                                            fakes[i].detach(), mu.detach(), w.uncond)
                         for i in range(NUM_SCALES))
            if not torch.isfinite(d_loss):
                self._diverged(last_good, step)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            cond_out, uncond_out, cyc = [], [], []
            for i in range(NUM_SCALES):
                dc, du = Ds[i](fakes[i], mu)
                cond_out.append(dc)
                uncond_out.append(du)
                if w.cycle > 0:
                    cyc.append(cycle_similarity(q_real[idx], img_enc(fakes[i])))
                else:
                    cyc.append(torch.zeros(()))
            if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
                self._diverged(last_good, step)
            kl = kl_standard_normal(mu, logvar)
            g_loss = generator_loss(cond_out, uncond_out, cyc, kl, w, from_logits=True)
            if not torch.isfinite(g_loss):
                self._diverged(last_good, step)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if ema is not None:
                decay = min(self.ema_decay, (1 + step) / (10 + step))
                with torch.no_grad():
                    for pa, pg in zip(ema.parameters(), G.parameters()):
                        pa.lerp_(pg, 1 - decay)
            if (step + 1) % log_every == 0 or step + 1 == self.steps:
                record = {"step": step + 1, "loss_d": d_loss.item(), "loss_g": g_loss.item(),
                          "kl": kl.item(), "cycle": [float(x.detach()) for x in cyc]}
                self.history_.append(record)
                logger.info("gan %s", json.dumps(record))
                last_good = copy.deepcopy((G.state_dict(), Ds.state_dict()))
                if callback is not None:
                    callback(step + 1, record)
                    G.train()
                    Ds.train()
        if ema is not None:
            G.load_state_dict(ema.state_dict())
        del self.ema_generator_

    def _diverged(self, last_good, step):
        self.__dict__.pop("ema_generator_", None)
        self.generator_.load_state_dict(last_good[0])
        self.discriminators_.load_state_dict(last_good[1])
        self.eval()
        raise DivergenceError(f"non-finite GAN loss at step {step}; restored last good weights")

    def eval(self):
        self.generator_.eval()
        self.discriminators_.eval()
        return self

    # ------------------------------------------------------------ inference
    def noise(self, n: int, seed: int) -> torch.Tensor:
        return torch.randn(n, self.z_dim, generator=torch.Generator().manual_seed(seed))

    @torch.no_grad()
    def condition(self, p, sample: bool = False, seed: int | None = None):
        """Appearance factor for embeddings ``p``: ``(mu, logvar, c)``; ``c = mu`` unless sampling."""
        check_is_fitted(self, "generator_")
        p = torch.as_tensor(np.asarray(p), dtype=torch.float32)
        gen = None if seed is None else torch.Generator().manual_seed(seed)
        return self.generator_.ca(p, sample=sample, generator=gen)

    @torch.no_grad()
    def generate(self, p, z=None, z_seed: int = 0, sample: bool = False, seed: int | None = None,
                 batch_size: int = 128) -> list[torch.Tensor]:
        """Images at the three scales for embeddings ``p`` (one row per image)."""
        check_is_fitted(self, "generator_")
        self.eval()
        _, _, c = self.condition(p, sample=sample, seed=seed)
        z = self.noise(len(c), z_seed) if z is None else torch.as_tensor(z, dtype=torch.float32)
        if len(z) != len(c):
            raise ValueError("z and p must have the same number of rows")
        outs = [self.generator_(c[i : i + batch_size], z[i : i + batch_size])
                for i in range(0, len(c), batch_size)]
        return [torch.cat([o[k] for o in outs]) for k in range(NUM_SCALES)]

    # ------------------------------------------------------------ persistence
    def digest(self) -> str:
        return hashlib.sha256((parameter_digest(self.generator_)
                               + parameter_digest(self.discriminators_)).encode()).hexdigest()

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "generator_")
        params = self.get_params()
        params["g_channels"] = list(params["g_channels"])
        torch.save({
            "kind": "mealgan",
            "params": params,
            "generator": self.generator_.state_dict(),
            "discriminators": self.discriminators_.state_dict(),
            "foodspace_digest": getattr(self, "encoder_digest_", None),
            "history": getattr(self, "history_", []),
            "extra": extra or {},
        }, path)

    @classmethod
    def load(cls, path) -> "MealGAN":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "mealgan":
            raise ValueError(f"{path} is not a GAN checkpoint")
        params = dict(ckpt["params"])
        params["g_channels"] = tuple(params["g_channels"])
        model = cls(**params)._build()
        model.generator_.load_state_dict(ckpt["generator"])
        model.discriminators_.load_state_dict(ckpt["discriminators"])
        model.encoder_digest_ = ckpt.get("foodspace_digest")
        model.history_ = ckpt.get("history", [])
        return model.eval()
