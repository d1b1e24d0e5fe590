"""Joint training of the mention encoder and the concept matrix, plus random
hyperparameter search.

Loss per batch is the mean cross-entropy (sum over the batch divided by its
size); the per-epoch figure kept in :class:`TrainReport` is the plain sum over
all training instances.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .corpus import ConceptInventory, MentionRecord, validation_split
from .encoder import Encoder, ToyEncoder
from .errors import ConfigError, Diverged, EmptyDataset
from .preprocess import PreprocessConfig
from .sim_head import (
    batch_cross_entropy,
    head_backward,
    init_concepts,
    similarity_matrix,
    softmax,
)

log = logging.getLogger(__name__)

# learning rate for fine-tuning a pretrained transformer encoder
PRETRAINED_LEARNING_RATE = 3e-5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    dim: int = 64
    min_count: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        checks = [
            (self.learning_rate >= 0 and math.isfinite(self.learning_rate), "learning_rate", "must be >= 0"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.max_epochs >= 1, "max_epochs", "must be >= 1"),
            (self.patience >= 1, "patience", "must be >= 1"),
            (self.weight_decay >= 0, "weight_decay", "must be >= 0"),
            (0 < self.val_fraction < 1, "val_fraction", "must be in (0, 1)"),
            (self.dim >= 1, "dim", "must be >= 1"),
            (self.min_count >= 1, "min_count", "must be >= 1"),
            (self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key} {msg}, got {getattr(self, key)!r}", key=key)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**_coerce(cls, values))

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(read_kv_file(path))


# ------------------------------------------------------------ config files

_KV = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def parse_kv(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _KV.match(line)
        if not m:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = m.groups()
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}", key=key)
        out[key] = value
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def _coerce(cls, values: dict) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        kind = types[key]
        if not isinstance(value, str):
            out[key] = value
            continue
        try:
            if kind in ("int", int):
                out[key] = int(value)
            elif kind in ("float", float):
                out[key] = float(value)
            else:
                out[key] = value.strip("'\"")
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}", key=key) from None
    return out


# ------------------------------------------------------------------ model


class ConceptNormalizer:
    """Encoder plus concept matrix over a fixed inventory."""

    def __init__(
        self,
        encoder: Encoder,
        concepts: np.ndarray,
        inventory: ConceptInventory,
        config: TrainConfig | None = None,
        preprocess_config: PreprocessConfig | None = None,
    ):
        if concepts.shape != (len(inventory), encoder.dim):
            raise ValueError(
                f"concept matrix shape {concepts.shape} != ({len(inventory)}, {encoder.dim})"
            )
        self.encoder = encoder
        self.concepts = concepts
        self.inventory = inventory
        self.config = config or TrainConfig(dim=encoder.dim)
        self.preprocess_config = preprocess_config or PreprocessConfig()

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params["concepts"] = self.concepts
        return params

    def no_decay(self) -> set[str]:
        return {f"encoder.{k}" for k in getattr(self.encoder, "no_decay", ())}

    def scores(self, texts: Sequence[str]) -> np.ndarray:
        return similarity_matrix(self.encoder.encode_batch(texts), self.concepts)

    def predict(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Argmax concept indices (lowest index on ties) and the similarity matrix."""
        Q = self.scores(texts)
        return Q.argmax(axis=1), Q

    def topk(self, texts: Sequence[str], k: int = 5) -> list[list[tuple[int, float]]]:
        Q = self.scores(texts)
        k = min(k, Q.shape[1])
        # stable sort keeps the lowest-index tie-break of argmax
        order = np.argsort(-Q, axis=1, kind="stable")[:, :k]
        return [[(int(i), float(q[i])) for i in row] for q, row in zip(Q, order)]

    def loss_and_grads(self, texts: Sequence[str], gold: np.ndarray):
        """Summed cross-entropy of a batch and gradients of its mean."""
        M, cache = self.encoder.forward(texts)
        Q = similarity_matrix(M, self.concepts)
        losses = batch_cross_entropy(Q, gold)
        G = softmax(Q)
        G[np.arange(len(gold)), gold] -= 1.0
        G /= len(gold)
        dM, dC = head_backward(M, self.concepts, Q, G)
        grads = {f"encoder.{k}": v for k, v in self.encoder.backward(cache, dM).items()}
        grads["concepts"] = dC
        return float(losses.sum()), grads, Q


# -------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        no_decay: set[str] = frozenset(),
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if self.weight_decay and name not in self.no_decay:
                p *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= p.dtype.type(b1)
            m += p.dtype.type(1 - b1) * g
            v *= p.dtype.type(b2)
            v += p.dtype.type(1 - b2) * g * g
            denom = np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(self.eps)
            p -= p.dtype.type(self.lr / c1) * m / denom


# ------------------------------------------------------------------ report


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    n_train: int = 0
    n_val: int = 0
    stopped_early: bool = False
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        """Serializable form. Wall time is left out so reports from identical runs match byte for byte."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        d = dict(d)
        d["epochs"] = [EpochStats(**e) for e in d.get("epochs", [])]
        return cls(**d)

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


# ------------------------------------------------------------------ train

EncoderFactory = Callable[[TrainConfig, Sequence[MentionRecord]], Encoder]


def default_encoder_factory(cfg: TrainConfig, records: Sequence[MentionRecord]) -> Encoder:
    return ToyEncoder.from_records(
        records, min_count=cfg.min_count, dim=cfg.dim, seed=cfg.seed, dtype=np.dtype(cfg.dtype)
    )


def derive_seeds(seed: int, fold: int = 0) -> dict[str, int]:
    """Independent seeds for each random stage of one training run."""
    state = np.random.SeedSequence([seed, fold]).generate_state(4)
    return dict(zip(("split", "encoder", "concepts", "shuffle"), (int(s) for s in state)))


def train(
    records: Sequence[MentionRecord],
    cfg: TrainConfig,
    inventory: ConceptInventory,
    encoder: Encoder | EncoderFactory | None = None,
    fold: int = 0,
    preprocess_config: PreprocessConfig | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[ConceptNormalizer, TrainReport]:
    """Train on ``records``, holding out ``cfg.val_fraction`` of them for early stopping.

    ``encoder`` may be a ready encoder, a factory called with the config and
    the post-split training records, or None for a :class:`ToyEncoder`. The
    returned model carries the parameters of the best validation epoch.
    """
    if not records:
        raise EmptyDataset("no training records")
    started = time.perf_counter()
    seeds = derive_seeds(cfg.seed, fold)
    train_recs, val_recs = validation_split(records, cfg.val_fraction, seeds["split"])
    if encoder is None:
        encoder = default_encoder_factory(dataclasses.replace(cfg, seed=seeds["encoder"]), train_recs)
    elif not isinstance(encoder, Encoder):
        encoder = encoder(dataclasses.replace(cfg, seed=seeds["encoder"]), train_recs)
    if encoder.dim != cfg.dim:
        cfg = dataclasses.replace(cfg, dim=encoder.dim)
    dtype = next(iter(encoder.state().values())).dtype if encoder.state() else np.dtype(cfg.dtype)
    C = init_concepts(len(inventory), encoder.dim, seeds["concepts"], dtype=dtype)
    model = ConceptNormalizer(encoder, C, inventory, cfg, preprocess_config)

    texts = [r.text for r in train_recs]
    gold = np.array([inventory.index(r.concept_id) for r in train_recs], dtype=np.intp)
    val_texts = [r.text for r in val_recs]
    val_gold = np.array([inventory.index(r.concept_id) for r in val_recs], dtype=np.intp)

    params = model.parameters()
    opt = AdamW(params, cfg.learning_rate, weight_decay=cfg.weight_decay, no_decay=model.no_decay())
    report = TrainReport(n_train=len(train_recs), n_val=len(val_recs), config=cfg.to_dict())
    best_state = {k: v.copy() for k, v in params.items()}
    since_best = 0

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([seeds["shuffle"], epoch]).permutation(len(texts))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, Q = model.loss_and_grads([texts[i] for i in idx], gold[idx])
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                report.error = f"non-finite loss or gradient in epoch {epoch}"
                report.wall_time = time.perf_counter() - started
                raise Diverged(report.error, report)
            loss_sum += loss
            correct += int((Q.argmax(axis=1) == gold[idx]).sum())
            opt.step(grads)
        val_pred, _ = model.predict(val_texts)
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum,
            train_accuracy=correct / len(texts),
            val_accuracy=float(np.mean(val_pred == val_gold)),
        )
        report.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if stats.val_accuracy > report.best_val_accuracy or report.best_epoch < 0:
            report.best_epoch = epoch
            report.best_val_accuracy = stats.val_accuracy
            best_state = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break

    for name, value in best_state.items():
        params[name][...] = value
    report.wall_time = time.perf_counter() - started
    log.info(
        "trained %d epochs in %.2fs; best epoch %d, val acc %.4f",
        len(report.epochs), report.wall_time, report.best_epoch, report.best_val_accuracy,
    )
    return model, report


# ----------------------------------------------------------- random search


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ConfigError(f"loguniform needs 0 < low <= high, got ({self.low}, {self.high})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def __contains__(self, x) -> bool:
        return self.low <= x <= self.high

    def __str__(self) -> str:
        return f"loguniform({self.low!r}, {self.high!r})"


@dataclass(frozen=True)
class Choice:
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ConfigError("choice needs at least one value")

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]

    def __contains__(self, x) -> bool:
        return x in self.values

    def __str__(self) -> str:
        return "choice(" + ", ".join(repr(v) for v in self.values) + ")"


@dataclass(frozen=True)
class IntRange:
    low: int
    high: int

    def __post_init__(self):
        if self.low > self.high:
            raise ConfigError(f"int range needs low <= high, got ({self.low}, {self.high})")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))

    def __contains__(self, x) -> bool:
        return self.low <= x <= self.high

    def __str__(self) -> str:
        return f"int({self.low}, {self.high})"


_DIST = re.compile(r"^(loguniform|choice|int)\((.*)\)$")


def parse_distribution(text: str, kind=float):
    m = _DIST.match(text.strip())
    if not m:
        return None
    name, args = m.groups()
    parts = [a.strip() for a in args.split(",") if a.strip()]
    try:
        if name == "loguniform":
            lo, hi = (float(p) for p in parts)
            return LogUniform(lo, hi)
        if name == "int":
            lo, hi = (int(p) for p in parts)
            return IntRange(lo, hi)
        return Choice(tuple(kind(p) for p in parts))
    except ValueError:
        raise ConfigError(f"cannot parse distribution {text!r}") from None


@dataclass(frozen=True)
class HparamSpace:
    ranges: dict[str, Any]
    n_trials: int = 8
    search_seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1", key="n_trials")
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        for key in self.ranges:
            if key not in names:
                raise ConfigError(f"unknown hyperparameter {key!r}", key=key)

    def sample(self) -> list[dict]:
        """``n_trials`` points, drawn in sorted-name order from one seeded stream."""
        rng = np.random.default_rng(self.search_seed)
        return [
            {name: self.ranges[name].sample(rng) for name in sorted(self.ranges)}
            for _ in range(self.n_trials)
        ]


def read_search_config(path_or_text: str | Path, is_text: bool = False) -> tuple[HparamSpace, TrainConfig]:
    """Split a search config into the space and the fixed base training config.

    A value written as ``loguniform(a, b)``, ``choice(x, y, ...)`` or
    ``int(a, b)`` is searched; other TrainConfig keys are fixed;
    ``n_trials`` and ``search_seed`` configure the search itself.
    """
    raw = parse_kv(path_or_text) if is_text else read_kv_file(path_or_text)
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    ranges, fixed, search = {}, {}, {}
    for key, value in raw.items():
        if key in ("n_trials", "search_seed"):
            try:
                search[key] = int(value)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}", key=key) from None
            continue
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        kind = {"int": int, "float": float}.get(types[key], str)
        dist = parse_distribution(value, kind)
        if dist is None:
            fixed[key] = value
        else:
            ranges[key] = dist
    return HparamSpace(ranges, **search), TrainConfig.from_dict(fixed)


@dataclass
class TrialResult:
    index: int
    config: TrainConfig
    report: TrainReport | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None or self.error is not None

    def rank_key(self):
        if self.failed:
            return (1, 0.0, 0.0, self.index)
        best = self.report.epochs[self.report.best_epoch]
        return (0, -self.report.best_val_accuracy, best.train_loss, self.index)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "config": self.config.to_dict(),
            "error": self.error,
            "report": None if self.report is None else self.report.to_dict(),
        }


def random_search(
    space: HparamSpace,
    records: Sequence[MentionRecord],
    inventory: ConceptInventory,
    base: TrainConfig | None = None,
    encoder_factory: EncoderFactory | None = None,
    fold: int = 0,
    workers: int = 1,
) -> tuple[TrainConfig, list[TrialResult]]:
    """Train one model per sampled point and pick the best by validation accuracy.

    Ties go to the lower training loss at the best epoch, then the earlier
    trial. A trial that raises is recorded and ranked last. Trials are
    independent, so ``workers > 1`` runs them in a thread pool; the result
    does not depend on ``workers``.
    """
    base = base or TrainConfig()
    points = space.sample()
    results: list[TrialResult] = []
    lock = threading.Lock()

    def run(i: int, point: dict) -> None:
        try:
            cfg = dataclasses.replace(base, **point)
        except ConfigError as exc:
            result = TrialResult(i, base, error=str(exc))
        else:
            try:
                _, report = train(records, cfg, inventory, encoder=encoder_factory, fold=fold)
                result = TrialResult(i, cfg, report)
            except Exception as exc:  # a failed trial must not stop the search
                result = TrialResult(i, cfg, getattr(exc, "report", None), error=f"{type(exc).__name__}: {exc}")
        with lock:
            results.append(result)
        log.info("trial %d/%d: %s", i + 1, len(points), result.error or f"val acc {result.report.best_val_accuracy:.4f}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda ip: run(*ip), enumerate(points)))
    else:
        for i, point in enumerate(points):
            run(i, point)
    results.sort(key=lambda r: r.index)
    best = min(results, key=TrialResult.rank_key)
    if best.failed:
        raise Diverged(f"all {len(results)} search trials failed; first error: {results[0].error}")
    return best.config, results
