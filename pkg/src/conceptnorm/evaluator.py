"""Accuracy, fold averaging and error bucketing."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .corpus import ConceptInventory, MentionRecord
from .encoder import Vocabulary
from .errors import EmptyEval
from .sim_head import softmax

LOW_TRAIN_SUPPORT = "LOW_TRAIN_SUPPORT"
RARE_TOKENS = "RARE_TOKENS"
OTHER = "OTHER"
BUCKETS = (LOW_TRAIN_SUPPORT, RARE_TOKENS, OTHER)


@dataclass
class PredictionOutcome:
    mention: str
    gold: int
    predicted: int
    scores: np.ndarray  # cosine similarity to every concept

    @property
    def correct(self) -> bool:
        return self.gold == self.predicted

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.scores)

    def rivals(self, k: int = 5) -> list[tuple[int, float]]:
        order = np.argsort(-self.scores, kind="stable")[:k]
        return [(int(i), float(self.scores[i])) for i in order]


@dataclass
class EvalResult:
    n_total: int
    n_correct: int
    outcomes: list[PredictionOutcome] = field(default_factory=list, repr=False)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_total

    @property
    def exact_accuracy(self) -> Fraction:
        return Fraction(self.n_correct, self.n_total)


def accuracy(outcomes: Sequence[PredictionOutcome]) -> EvalResult:
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyEval("cannot score an empty evaluation set")
    return EvalResult(len(outcomes), sum(o.correct for o in outcomes), outcomes)


def fold_average(results: Iterable[EvalResult | float]) -> float:
    """Unweighted mean of per-fold accuracies (folds count equally, whatever their size)."""
    accs = [r.accuracy if isinstance(r, EvalResult) else float(r) for r in results]
    if not accs:
        raise EmptyEval("no folds to average")
    return float(np.mean(accs))


def predict_outcomes(model, records: Sequence[MentionRecord]) -> list[PredictionOutcome]:
    if not records:
        raise EmptyEval("no records to evaluate")
    pred, Q = model.predict([r.text for r in records])
    inv = model.inventory
    return [
        PredictionOutcome(r.text, inv.index(r.concept_id), int(p), q)
        for r, p, q in zip(records, pred, Q)
    ]


def evaluate(model, records: Sequence[MentionRecord]) -> EvalResult:
    return accuracy(predict_outcomes(model, records))


# ------------------------------------------------------------ error report


@dataclass
class ErrorBucket:
    label: str
    outcomes: list[PredictionOutcome] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outcomes)


def rare_token_fraction(text: str, vocab: Vocabulary | None) -> float:
    tokens = text.split()
    if not tokens or vocab is None:
        return 0.0
    return sum(t not in vocab for t in tokens) / len(tokens)


def classify_error(
    outcome: PredictionOutcome,
    support: Counter,
    vocab: Vocabulary | None,
    min_support: int = 3,
    max_unknown: float = 0.5,
) -> str:
    if support[outcome.gold] < min_support:
        return LOW_TRAIN_SUPPORT
    if rare_token_fraction(outcome.mention, vocab) > max_unknown:
        return RARE_TOKENS
    return OTHER


def error_report(
    outcomes: Sequence[PredictionOutcome],
    train_records: Sequence[MentionRecord],
    vocab: Vocabulary | None,
    inventory: ConceptInventory,
    min_support: int = 3,
    max_unknown: float = 0.5,
) -> list[ErrorBucket]:
    """Partition the wrong predictions into the three buckets of :data:`BUCKETS`.

    A gold concept seen fewer than ``min_support`` times in training goes to
    LOW_TRAIN_SUPPORT; otherwise a mention whose tokens are mostly (more than
    ``max_unknown``) outside the vocabulary goes to RARE_TOKENS; the rest is
    OTHER. Buckets are always returned in that order, possibly empty.
    """
    support = Counter(inventory.index(r.concept_id) for r in train_records if r.concept_id in inventory)
    buckets = {label: ErrorBucket(label) for label in BUCKETS}
    for o in outcomes:
        if not o.correct:
            buckets[classify_error(o, support, vocab, min_support, max_unknown)].outcomes.append(o)
    return [buckets[label] for label in BUCKETS]


def _label(inventory: ConceptInventory, index: int) -> str:
    term = inventory.term(index)
    cid = inventory.concept_id(index)
    return cid if term is None else f"{cid} ({term})"


def _severity(o: PredictionOutcome) -> float:
    # how far the gold concept trails the winner
    return float(o.scores[o.predicted] - o.scores[o.gold])


def format_report(
    buckets: Sequence[ErrorBucket],
    inventory: ConceptInventory,
    n_total: int | None = None,
    examples: int = 5,
    topk: int = 5,
) -> str:
    n_errors = sum(len(b) for b in buckets)
    lines = ["Error analysis", "=============="]
    if n_total is not None:
        lines.append(f"{n_errors} errors out of {n_total} mentions")
    else:
        lines.append(f"{n_errors} errors")
    for b in buckets:
        lines.append("")
        lines.append(f"[{b.label}] {len(b)}")
        worst = sorted(b.outcomes, key=lambda o: (-_severity(o), o.mention))[:examples]
        for o in worst:
            lines.append(f"  mention:   {o.mention!r}")
            lines.append(f"  gold:      {_label(inventory, o.gold)}  cos={o.scores[o.gold]:.4f}")
            lines.append(f"  predicted: {_label(inventory, o.predicted)}  cos={o.scores[o.predicted]:.4f}")
            rivals = ", ".join(f"{inventory.concept_id(i)}={s:.4f}" for i, s in o.rivals(topk))
            lines.append(f"  top{topk}:     {rivals}")
    return "\n".join(lines) + "\n"


def report_tsv(buckets: Sequence[ErrorBucket], inventory: ConceptInventory, topk: int = 5) -> str:
    """One line per error: ``mention, gold, pred, bucket, top-k`` (``id:score`` joined by ``|``)."""
    rows = ["mention\tgold\tpred\tbucket\ttop5"]
    for b in buckets:
        for o in b.outcomes:
            top = "|".join(f"{inventory.concept_id(i)}:{s:.6f}" for i, s in o.rivals(topk))
            mention = o.mention.replace("\t", " ")
            rows.append(
                f"{mention}\t{inventory.concept_id(o.gold)}\t{inventory.concept_id(o.predicted)}\t{b.label}\t{top}"
            )
    return "\n".join(rows) + "\n"
