"""Mention encoders.

Every encoder maps a batch of preprocessed strings to a ``(B, d)`` matrix and
can backpropagate a gradient on that matrix into its own parameters. The
trainer only talks to this interface, so a pretrained transformer (see
:mod:`conceptnorm.hf_encoder`) and the small reference :class:`ToyEncoder`
are interchangeable.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import Counter
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import EmptyDataset, NotInitialized

UNK, PAD = "<unk>", "<pad>"


class Vocabulary:
    """Whitespace-token vocabulary with ``<unk>`` at 0 and ``<pad>`` at 1."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [UNK, PAD]:
            tokens = [UNK, PAD] + [t for t in tokens if t not in (UNK, PAD)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index and token not in (UNK, PAD)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self._index.get(token, 0)

    def ids(self, text: str) -> list[int]:
        return [self.lookup(t) for t in text.split()]


def build_vocab(records: Iterable, min_count: int = 1) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, in first-appearance order.

    ``records`` may hold strings or objects with a ``text`` attribute.
    """
    texts = [r if isinstance(r, str) else r.text for r in records]
    if not texts:
        raise EmptyDataset("cannot build a vocabulary from zero records")
    counts = Counter(t for text in texts for t in text.split())
    order = dict.fromkeys(t for text in texts for t in text.split())
    return Vocabulary([t for t in order if counts[t] >= min_count])


class Encoder(ABC):
    """Trainable text encoder producing fixed-width mention vectors."""

    dim: int
    frozen: bool = False

    @abstractmethod
    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. Updated in place by the optimizer; empty when frozen."""

    @abstractmethod
    def forward(self, texts: Sequence[str]) -> tuple[np.ndarray, Any]:
        """Encode a batch; returns ``(M, cache)`` with ``M`` of shape ``(len(texts), dim)``."""

    @abstractmethod
    def backward(self, cache: Any, grad: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. :meth:`parameters`, given ``dL/dM``."""

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        return self.forward(list(texts))[0]

    def encode(self, text: str) -> np.ndarray:
        return self.encode_batch([text])[0]

    # checkpoint hooks
    @abstractmethod
    def spec(self) -> dict:
        """JSON-serializable description sufficient to rebuild an empty encoder."""

    def state(self) -> dict[str, np.ndarray]:
        """Every tensor a checkpoint must store (including frozen ones)."""
        return self.parameters()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state()
        if set(own) != set(arrays):
            raise KeyError(f"tensor names differ: {sorted(own)} vs {sorted(arrays)}")
        for name, value in arrays.items():
            if own[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {own[name].shape}")
            own[name][...] = value


class ToyEncoder(Encoder):
    """Mean of token embeddings, then ``tanh(W x + b)``.

    Small enough to train from scratch in seconds; used for tests, synthetic
    experiments and as the default encoder.
    """

    # excluded from weight decay: rows absent from a batch should not move
    no_decay = ("token_embeddings", "affine_bias")

    def __init__(
        self,
        vocab: Vocabulary | None = None,
        dim: int = 64,
        seed: int = 0,
        dtype=np.float32,
        frozen: bool = False,
    ):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.frozen = frozen
        self.vocab: Vocabulary | None = None
        self._params: dict[str, np.ndarray] = {}
        if vocab is not None:
            self.initialize(vocab)

    @classmethod
    def from_records(cls, records, min_count: int = 1, **kw) -> "ToyEncoder":
        return cls(build_vocab(records, min_count), **kw)

    def initialize(self, vocab: Vocabulary) -> None:
        self.vocab = vocab
        rng = np.random.default_rng(self.seed)
        d = self.dim
        bound = 1.0 / np.sqrt(d)
        self._params = {
            "token_embeddings": rng.normal(0.0, 1.0, size=(len(vocab), d)).astype(self.dtype),
            "affine_weight": rng.uniform(-bound, bound, size=(d, d)).astype(self.dtype),
            "affine_bias": rng.uniform(-bound, bound, size=d).astype(self.dtype),
        }

    def _require(self) -> None:
        if self.vocab is None:
            raise NotInitialized("ToyEncoder has no vocabulary; call initialize() first")

    def parameters(self) -> dict[str, np.ndarray]:
        self._require()
        return {} if self.frozen else dict(self._params)

    def state(self) -> dict[str, np.ndarray]:
        self._require()
        return dict(self._params)

    def forward(self, texts: Sequence[str]) -> tuple[np.ndarray, Any]:
        self._require()
        ids = [self.vocab.ids(t) for t in texts]
        counts = np.array([len(x) for x in ids], dtype=np.intp)
        flat = np.fromiter((i for x in ids for i in x), dtype=np.intp, count=int(counts.sum()))
        seg = np.repeat(np.arange(len(ids)), counts)
        E = self._params["token_embeddings"]
        pooled = np.zeros((len(ids), self.dim), dtype=self.dtype)
        np.add.at(pooled, seg, E[flat])
        pooled /= np.maximum(counts, 1)[:, None].astype(self.dtype)
        W, b = self._params["affine_weight"], self._params["affine_bias"]
        M = np.tanh(np.einsum("be,de->bd", pooled, W) + b)
        return M, (flat, seg, counts, pooled, M)

    def backward(self, cache, grad: np.ndarray) -> dict[str, np.ndarray]:
        if self.frozen:
            return {}
        flat, seg, counts, pooled, M = cache
        dh = grad * (1.0 - M * M)
        W = self._params["affine_weight"]
        dpooled = dh @ W
        dE = np.zeros_like(self._params["token_embeddings"])
        share = dpooled / np.maximum(counts, 1)[:, None]
        np.add.at(dE, flat, share[seg])
        return {
            "token_embeddings": dE,
            "affine_weight": dh.T @ pooled,
            "affine_bias": dh.sum(axis=0),
        }

    def spec(self) -> dict:
        return {
            "type": "toy",
            "dim": self.dim,
            "seed": self.seed,
            "dtype": self.dtype.name,
            "frozen": self.frozen,
        }
