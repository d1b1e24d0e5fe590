"""Pretrained-transformer encoder adapter (optional; needs ``torch`` and ``transformers``).

The mention vector is the mask-aware mean of the final hidden layer
(``pooling="mean"``) or the first-token state (``pooling="cls"``). Parameter
arrays handed to the optimizer are numpy views that share memory with the
torch tensors, so in-place updates reach the model directly.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from .encoder import Encoder


class TransformerEncoder(Encoder):
    def __init__(
        self,
        name_or_path: str,
        pooling: str = "mean",
        max_length: int = 64,
        frozen: bool = False,
        seed: int = 0,
        model=None,
        tokenizer=None,
    ):
        import torch
        from transformers import AutoModel, AutoTokenizer

        if pooling not in ("mean", "cls"):
            raise ValueError(f"pooling must be 'mean' or 'cls', got {pooling!r}")
        torch.manual_seed(seed)
        self._torch = torch
        self.name_or_path = str(name_or_path)
        self.pooling = pooling
        self.max_length = max_length
        self.frozen = frozen
        self.seed = seed
        self.model = model if model is not None else AutoModel.from_pretrained(self.name_or_path)
        self.model = self.model.float()
        self.tokenizer = tokenizer if tokenizer is not None else AutoTokenizer.from_pretrained(self.name_or_path)
        self.dim = int(self.model.config.hidden_size)
        self._named = {name: p for name, p in self.model.named_parameters()}
        for p in self._named.values():
            p.requires_grad_(not frozen)
        self._views = {name: p.detach().numpy() for name, p in self._named.items()}

    @classmethod
    def from_spec(cls, spec: dict) -> "TransformerEncoder":
        return cls(
            spec["name_or_path"],
            pooling=spec["pooling"],
            max_length=spec["max_length"],
            frozen=spec["frozen"],
            seed=spec["seed"],
        )

    def spec(self) -> dict:
        return {
            "type": "transformer",
            "name_or_path": self.name_or_path,
            "pooling": self.pooling,
            "max_length": self.max_length,
            "frozen": self.frozen,
            "seed": self.seed,
            "dim": self.dim,
        }

    def parameters(self) -> dict[str, np.ndarray]:
        return {} if self.frozen else dict(self._views)

    def state(self) -> dict[str, np.ndarray]:
        return dict(self._views)

    def _pool(self, texts: Sequence[str]):
        batch = self.tokenizer(
            list(texts),
            padding=True,
            truncation=True,
            max_length=self.max_length,
            return_tensors="pt",
        )
        hidden = self.model(**batch).last_hidden_state
        if self.pooling == "cls":
            return hidden[:, 0]
        mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
        return (hidden * mask).sum(1) / mask.sum(1).clamp(min=1.0)

    def forward(self, texts: Sequence[str]) -> tuple[np.ndarray, Any]:
        if self.frozen:
            return self.encode_batch(texts), None
        self.model.train()
        out = self._pool(texts)
        return out.detach().numpy().copy(), out

    def backward(self, cache, grad: np.ndarray) -> dict[str, np.ndarray]:
        if self.frozen or cache is None:
            return {}
        torch = self._torch
        self.model.zero_grad(set_to_none=False)
        cache.backward(torch.from_numpy(np.ascontiguousarray(grad, dtype=np.float32)))
        grads = {}
        for name, p in self._named.items():
            grads[name] = np.zeros_like(self._views[name]) if p.grad is None else p.grad.numpy().copy()
        return grads

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        torch = self._torch
        self.model.eval()
        with torch.no_grad():
            return self._pool(list(texts)).numpy().copy()
