"""Ingredient embedding table: skip-gram training and a binary file layout.

Binary layout (little-endian)::

    bytes 0-3   magic b"MSEB"
    bytes 4-7   uint32 row count (canonical vocabulary size + 1 pad row)
    bytes 8-11  uint32 dim
    rest        row-major float32, row 0 is the pad/unknown row
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

MAGIC = b"MSEB"
PAD_INDEX = 0


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (rows, dim); row 0 is the pad row
    tokens: tuple[str, ...] | None = None  # canonical token of row i+1

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("embedding vectors must be a 2-d matrix")
        if self.tokens is not None:
            self.tokens = tuple(self.tokens)
            if len(self.tokens) != self.vectors.shape[0] - 1:
                raise ValueError(
                    f"{len(self.tokens)} tokens for {self.vectors.shape[0]} rows (expected rows - 1)"
                )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    def save(self, path) -> None:
        path = Path(path)
        rows, dim = self.vectors.shape
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", rows, dim))
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, tokens: Sequence[str] | None = None) -> "EmbeddingTable":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not an embedding table (bad magic {raw[:4]!r})")
        rows, dim = struct.unpack("<II", raw[4:12])
        body = raw[12:]
        if len(body) != rows * dim * 4:
            raise ValueError(f"{path}: expected {rows * dim * 4} payload bytes, found {len(body)}")
        vectors = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float32)
        return cls(vectors, tokens)


def cooccurrence_pairs(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """All ordered (center, context) pairs within each list, pad indices dropped."""
    pairs = []
    for seq in sequences:
        toks = [t for t in dict.fromkeys(seq) if t != PAD_INDEX]
        for a in toks:
            for b in toks:
                if a != b:
                    pairs.append((a, b))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def train_embeddings(
    sequences: Sequence[Sequence[int]],
    vocab_size: int,
    dim: int = 300,
    epochs: int = 5,
    seed: int = 0,
    negatives: int = 5,
    batch_size: int = 1024,
    lr: float = 0.01,
) -> EmbeddingTable:
    """Skip-gram with negative sampling where each ingredient list is one window.

    ``sequences`` hold 1-based canonical indices (0 = pad/unknown) and
    ``vocab_size`` counts canonical tokens, so the table has ``vocab_size + 1``
    rows. Negatives are drawn from the unigram distribution raised to 0.75.
    """
    if vocab_size < 1:
        raise ValueError("vocabulary is empty")
    gen = torch.Generator().manual_seed(seed)
    rows = vocab_size + 1
    center = (torch.rand(rows, dim, generator=gen) - 0.5) / dim
    context = torch.zeros(rows, dim)
    center[PAD_INDEX] = 0.0
    center.requires_grad_(True)
    context.requires_grad_(True)

    pairs = torch.from_numpy(cooccurrence_pairs(sequences))
    if len(pairs):
        counts = torch.bincount(pairs[:, 0], minlength=rows).double()
        noise = counts.pow(0.75)
        noise[PAD_INDEX] = 0.0
        noise = noise / noise.sum()
        opt = torch.optim.Adam([center, context], lr=lr)
        for _ in range(epochs):
            order = torch.randperm(len(pairs), generator=gen)
            for start in range(0, len(pairs), batch_size):
                batch = pairs[order[start : start + batch_size]]
                neg = torch.multinomial(noise, len(batch) * negatives, replacement=True, generator=gen)
                neg = neg.view(len(batch), negatives)
                c = center[batch[:, 0]]
                pos = (c * context[batch[:, 1]]).sum(-1)
                negs = torch.einsum("bd,bkd->bk", c, context[neg])
                loss = -(torch.nn.functional.logsigmoid(pos).mean()
                         + torch.nn.functional.logsigmoid(-negs).sum(-1).mean())
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    center[PAD_INDEX] = 0.0
    return EmbeddingTable(center.detach().numpy().copy())
