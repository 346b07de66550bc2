"""Cross-modal association model.

Ingredient lists go through an embedding table, a bi-directional LSTM
(150 units per direction, so each hidden state is 300-d), attention pooling
with one learned context vector and a linear projection to the 1024-d
shared space. Images go through a convolutional backbone whose 2048-d
average-pooled activation is projected to the same space. Both encoders are
trained with a two-sided cosine margin objective.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .embeddings import PAD_INDEX, EmbeddingTable

logger = logging.getLogger(__name__)

FOODSPACE_DIM = 1024
HIDDEN_DIM = 300
BACKBONE_DIM = 2048
MARGIN = 0.3


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------- functional pieces


def attention_pool(hidden: torch.Tensor, context: torch.Tensor, mask: torch.Tensor | None = None):
    """Softmax-weighted sum of hidden states scored against a context vector.

    ``hidden`` is ``(N, D)`` or ``(B, N, D)``; ``mask`` marks real positions
    of padded batches. Returns ``(pooled, weights)``.
    """
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = hidden.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if hidden.shape[1] < 1:
        raise ValueError("attention pooling needs at least one hidden state")
    logits = hidden @ context
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    pooled = (weights.unsqueeze(-1) * hidden).sum(dim=1)
    if squeeze:
        return pooled[0], weights[0]
    return pooled, weights


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; zero-norm rows are rejected."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return (a * b).sum(-1) / (na * nb)


def triplet_objective(p_pos, q_pos, q_neg, p_neg, margin: float = MARGIN) -> torch.Tensor:
    """Two-sided margin objective V (to be maximised), averaged over the batch.

    V = min(s(p+, q+) - s(p+, q-) - margin, 0) + min(s(p+, q+) - s(p-, q+) - margin, 0)
    with s the cosine similarity. V <= 0, and V = 0 iff both margins hold.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pos = cosine(p_pos, q_pos)
    v = (torch.clamp(pos - cosine(p_pos, q_neg) - margin, max=0.0)
         + torch.clamp(pos - cosine(p_neg, q_pos) - margin, max=0.0))
    return v.mean()


def in_batch_objective(p: torch.Tensor, q: torch.Tensor, margin: float = MARGIN,
                       same: torch.Tensor | None = None) -> torch.Tensor:
    """Margin objective with every other batch item as the negative, averaged.

    Equivalent to the expectation of :func:`triplet_objective` when negatives
    are drawn uniformly from the other recipes of the batch. ``same`` masks
    pairs that must not serve as negatives of each other.
    """
    b = p.shape[0]
    sims = F.normalize(p, dim=1) @ F.normalize(q, dim=1).T  # [text i, image j]
    pos = sims.diagonal()
    off = ~torch.eye(b, dtype=torch.bool)
    if same is not None:
        off = off & ~same
    n = off.sum(1).clamp(min=1)
    t2i = torch.clamp(pos[:, None] - sims - margin, max=0.0) * off  # negative image q_j
    i2t = torch.clamp(pos[None, :] - sims - margin, max=0.0) * off  # negative text p_i for image j
    return (t2i.sum(1) / n).mean() + (i2t.sum(0) / n).mean()


# --------------------------------------------------------------------------- encoders


@dataclass
class EncoderState:
    hidden: np.ndarray  # (N, 300)
    context: np.ndarray  # (300,)
    attention: np.ndarray  # (N,)
    pooled: np.ndarray  # (300,)


class IngredientEncoder(nn.Module):
    def __init__(self, num_embeddings: int, embedding_dim: int = 300, hidden_dim: int = HIDDEN_DIM,
                 out_dim: int = FOODSPACE_DIM, attention: bool = True):
        super().__init__()
        if hidden_dim % 2:
            raise ValueError("hidden_dim must be even (two directions)")
        self.embedding = nn.Embedding(num_embeddings, embedding_dim, padding_idx=None)
        self.rnn = nn.LSTM(embedding_dim, hidden_dim // 2, batch_first=True, bidirectional=True)
        self.context = nn.Parameter(torch.randn(hidden_dim) / math.sqrt(hidden_dim))
        self.project = nn.Linear(hidden_dim, out_dim)
        self.attention = attention

    def hidden_states(self, tokens: torch.Tensor, lengths: torch.Tensor):
        emb = self.embedding(tokens)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        return out, h_n

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor, return_trace: bool = False):
        hidden, h_n = self.hidden_states(tokens, lengths)
        mask = torch.arange(tokens.shape[1])[None, :] < lengths[:, None]
        if self.attention:
            pooled, weights = attention_pool(hidden, self.context, mask)
        else:
            # final forward state and final backward state
            pooled = torch.cat([h_n[0], h_n[1]], dim=1)
            weights = mask.float() / lengths[:, None].float()
        p = self.project(pooled)
        if return_trace:
            return p, hidden, weights, pooled
        return p


class SmallBackbone(nn.Module):
    """Desk-scale convolutional trunk ending in a 2048-d average-pooled feature."""

    def __init__(self, width: int = 32, out_dim: int = BACKBONE_DIM):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(4 * width, 8 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(8 * width, out_dim, 1), nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(2, 3))


def resnet50_backbone(weights_path=None) -> nn.Module:
    """torchvision ResNet-50 trunk (2048-d pooled); weights loaded from a local file if given."""
    import torchvision

    net = torchvision.models.resnet50(weights=None)
    if weights_path is not None:
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    net.fc = nn.Identity()
    return net


class ImageEncoder(nn.Module):
    def __init__(self, backbone: str = "small", image_size: int = 32, width: int = 32,
                 out_dim: int = FOODSPACE_DIM, weights_path=None):
        super().__init__()
        if backbone == "small":
            self.backbone = SmallBackbone(width)
        elif backbone == "resnet50":
            self.backbone = resnet50_backbone(weights_path)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.image_size = image_size
        self.project = nn.Linear(BACKBONE_DIM, out_dim)

    def resize(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] == self.image_size and x.shape[-2] == self.image_size:
            return x
        return F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear",
                             align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images shaped (n, 3, H, W), got {tuple(x.shape)}")
        return self.project(self.backbone(self.resize(x)))


# --------------------------------------------------------------------------- batching helpers


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    if len(seqs) == 0 or int(lengths.min()) < 1:
        raise ValueError("every ingredient sequence needs at least one token")
    tokens = torch.full((len(seqs), int(lengths.max())), PAD_INDEX, dtype=torch.long)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return tokens, lengths


def _seq_keys(seqs: Sequence[Sequence[int]]) -> list[tuple]:
    return [tuple(sorted(s)) for s in seqs]


def _state_bytes(module: nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.save(module.state_dict(), buf)
    return buf.getvalue()


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- estimator


class FoodSpaceModel(BaseEstimator):
    """Fit ingredient and image encoders into a shared cosine space.

    ``fit(sequences, images)`` takes lists of 1-based embedding-row indices
    and an image tensor ``(n, 3, H, W)`` in [-1, 1] paired row by row.
    """

    def __init__(self, num_embeddings: int = 2, embedding_dim: int = 300, hidden_dim: int = HIDDEN_DIM,
                 foodspace_dim: int = FOODSPACE_DIM, attention: bool = True, backbone: str = "small",
                 backbone_weights: str | None = None, image_size: int = 32, width: int = 32,
                 margin: float = MARGIN, epochs: int = 10, batch_size: int = 64, lr: float = 1e-3,
                 seed: int = 0, init_embeddings: EmbeddingTable | None = None):
        self.num_embeddings = num_embeddings
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.foodspace_dim = foodspace_dim
        self.attention = attention
        self.backbone = backbone
        self.backbone_weights = backbone_weights
        self.image_size = image_size
        self.width = width
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.init_embeddings = init_embeddings

    # ------------------------------------------------------------ building
    def _build(self):
        torch.manual_seed(self.seed)
        self.text_encoder_ = IngredientEncoder(self.num_embeddings, self.embedding_dim, self.hidden_dim,
                                               self.foodspace_dim, self.attention)
        if self.init_embeddings is not None:
            table = self.init_embeddings.vectors
            if table.shape != (self.num_embeddings, self.embedding_dim):
                raise ValueError(f"embedding table {table.shape} does not match "
                                 f"({self.num_embeddings}, {self.embedding_dim})")
            with torch.no_grad():
                self.text_encoder_.embedding.weight.copy_(torch.from_numpy(table))
        self.image_encoder_ = ImageEncoder(self.backbone, self.image_size, self.width,
                                           self.foodspace_dim, self.backbone_weights)
        return self

    def _modules(self):
        return [self.text_encoder_, self.image_encoder_]

    def eval(self):
        for m in self._modules():
            m.eval()
        return self

    # ------------------------------------------------------------ training
    def fit(self, sequences, images, val=None, log=None):
        """Train with mini-batch ascent on the margin objective.

        ``val=(sequences, images)`` enables best-validation-MedR model
        selection. ``history_`` holds per-epoch loss and MedR.
        """
        from .retrieval import rank_queries

        sequences = [list(s) for s in sequences]
        images = torch.as_tensor(images, dtype=torch.float32)
        if len(sequences) != len(images):
            raise ValueError("sequences and images must pair up row by row")
        if len(sequences) < 2:
            raise ValueError("need at least two pairs for in-batch negatives")
        self._validate_tokens(sequences)
        self._build()
        gen = torch.Generator().manual_seed(self.seed)
        params = [p for m in self._modules() for p in m.parameters()]
        opt = torch.optim.Adam(params, lr=self.lr)
        keys = _seq_keys(sequences)
        self.history_ = []
        best = (math.inf, None)
        n = len(sequences)
        for epoch in range(self.epochs):
            for m in self._modules():
                m.train()
            order = torch.randperm(n, generator=gen).tolist()
            total, batches = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue
                tokens, lengths = pad_sequences([sequences[i] for i in idx])
                p = self.text_encoder_(tokens, lengths)
                q = self.image_encoder_(images[idx])
                bk = [keys[i] for i in idx]
                same = torch.tensor([[a == b for b in bk] for a in bk])
                loss = -in_batch_objective(p, q, self.margin, same)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                batches += 1
            record = {"epoch": epoch, "loss": total / max(batches, 1)}
            if val is not None:
                self.eval()
                vp = self.transform_text(val[0])
                vq = self.transform_images(val[1])
                res = rank_queries(vq, vp)
                record["val_medr"] = res.medr
                if res.medr < best[0]:
                    best = (res.medr, [copy.deepcopy(m.state_dict()) for m in self._modules()])
            self.history_.append(record)
            logger.info("association epoch %s", json.dumps(record))
            if log is not None:
                log(record)
        if best[1] is not None:
            for m, state in zip(self._modules(), best[1]):
                m.load_state_dict(state)
            self.best_val_medr_ = best[0]
        return self.eval()

    def _validate_tokens(self, sequences):
        for s in sequences:
            if len(s) < 1:
                raise ValueError("ingredient sequence is empty")
            bad = [t for t in s if not 0 <= int(t) < self.num_embeddings]
            if bad:
                raise IndexError(f"token index {bad[0]} out of range for {self.num_embeddings} rows")

    # ------------------------------------------------------------ inference
    @torch.no_grad()
    def transform_text(self, sequences, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "text_encoder_")
        sequences = [list(s) for s in sequences]
        self._validate_tokens(sequences)
        self.text_encoder_.eval()
        out = []
        for start in range(0, len(sequences), batch_size):
            tokens, lengths = pad_sequences(sequences[start : start + batch_size])
            out.append(self.text_encoder_(tokens, lengths))
        return torch.cat(out).numpy() if out else np.zeros((0, self.foodspace_dim), np.float32)

    @torch.no_grad()
    def transform_images(self, images, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "image_encoder_")
        images = torch.as_tensor(images, dtype=torch.float32)
        self.image_encoder_.eval()
        out = [self.image_encoder_(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.foodspace_dim), np.float32)

    @torch.no_grad()
    def encode_ingredients(self, sequence: Sequence[int]) -> tuple[np.ndarray, EncoderState]:
        """Encode one ingredient list and return its attention trace."""
        check_is_fitted(self, "text_encoder_")
        self._validate_tokens([sequence])
        self.text_encoder_.eval()
        tokens, lengths = pad_sequences([sequence])
        p, hidden, weights, pooled = self.text_encoder_(tokens, lengths, return_trace=True)
        state = EncoderState(hidden[0].numpy(), self.text_encoder_.context.detach().numpy().copy(),
                             weights[0].numpy(), pooled[0].numpy())
        return p[0].numpy(), state

    def encode_image(self, image) -> np.ndarray:
        image = torch.as_tensor(image, dtype=torch.float32)
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.shape[1] != 3:
            raise ValueError(f"expected 3 channels, got {image.shape[1]}")
        return self.transform_images(image)[0]

    def attention_trace(self, sequences, names: Sequence[Sequence[str]], ids: Sequence[str]) -> list[dict]:
        """JSON-ready attention weights per recipe for inspection."""
        rows = []
        for rid, seq, nm in zip(ids, sequences, names):
            _, state = self.encode_ingredients(seq)
            rows.append({"id": rid, "ingredients": list(nm),
                         "attention": [round(float(a), 6) for a in state.attention]})
        return rows

    # ------------------------------------------------------------ persistence
    def digest(self) -> str:
        check_is_fitted(self, "text_encoder_")
        return hashlib.sha256((parameter_digest(self.text_encoder_)
                               + parameter_digest(self.image_encoder_)).encode()).hexdigest()

    def save(self, path, vocab_hash: str | None = None, extra: dict | None = None) -> None:
        check_is_fitted(self, "text_encoder_")
        params = self.get_params()
        params["init_embeddings"] = None
        torch.save({
            "kind": "foodspace",
            "params": params,
            "text_encoder": self.text_encoder_.state_dict(),
            "image_encoder": self.image_encoder_.state_dict(),
            "vocab_hash": vocab_hash,
            "history": getattr(self, "history_", []),
            "extra": extra or {},
        }, path)

    @classmethod
    def load(cls, path) -> "FoodSpaceModel":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "foodspace":
            raise ValueError(f"{path} is not an association-model checkpoint")
        model = cls(**ckpt["params"])
        model.backbone_weights = None
        model._build()
        model.text_encoder_.load_state_dict(ckpt["text_encoder"])
        model.image_encoder_.load_state_dict(ckpt["image_encoder"])
        model.history_ = ckpt.get("history", [])
        model.vocab_hash_ = ckpt.get("vocab_hash")
        return model.eval()
