"""Datasets: mention records, the concept inventory, folds, file I/O and a
seed-deterministic synthetic corpus generator.

On-disk layout of a dataset directory::

    concepts.tsv            concept_id<TAB>preferred_term
    fold_<k>/train.tsv      raw_mention<TAB>concept_id[<TAB>processed_text]
    fold_<k>/test.tsv       same

UTF-8, no header, ``#`` starts a comment line.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataset, FormatError, InvalidParams, TooSmall, UnknownConcept
from .preprocess import AcronymLexicon, PreprocessConfig, load_lexicon, preprocess

log = logging.getLogger(__name__)

_FOLD_DIR = re.compile(r"^fold_(\d+)$")


@dataclass(frozen=True)
class MentionRecord:
    raw_text: str
    concept_id: str
    processed_text: str | None = None

    @property
    def text(self) -> str:
        """Text fed to the encoder: the processed form when available."""
        return self.processed_text if self.processed_text is not None else self.raw_text


class ConceptInventory:
    """Bijection between concept IDs and dense indices ``0..N-1``."""

    def __init__(self, concept_ids: Sequence[str], terms: Sequence[str | None] | None = None):
        ids = list(concept_ids)
        if not ids:
            raise EmptyDataset("concept inventory needs at least one concept")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(c for c in ids if c in seen or seen.add(c))
            raise InvalidParams(f"duplicate concept id {dup!r}")
        if terms is None:
            terms = [None] * len(ids)
        elif len(terms) != len(ids):
            raise InvalidParams("terms and concept_ids differ in length")
        self._ids = ids
        self._terms = list(terms)
        self._index = {cid: i for i, cid in enumerate(ids)}

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self):
        return iter(self._ids)

    def __contains__(self, concept_id) -> bool:
        return concept_id in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConceptInventory):
            return NotImplemented
        return self._ids == other._ids and self._terms == other._terms

    def __repr__(self) -> str:
        return f"ConceptInventory(N={len(self)})"

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def terms(self) -> list[str | None]:
        return list(self._terms)

    def index(self, concept_id: str) -> int:
        try:
            return self._index[concept_id]
        except KeyError:
            raise UnknownConcept(f"concept {concept_id!r} is not in the inventory") from None

    def concept_id(self, index: int) -> str:
        return self._ids[index]

    def term(self, index: int) -> str | None:
        return self._terms[index]

    def fingerprint(self) -> str:
        """Hash of the index order; checkpoints use it to detect a reordered label space."""
        h = hashlib.sha256()
        for cid in self._ids:
            h.update(cid.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class Fold:
    train: list[MentionRecord]
    test: list[MentionRecord]

    def overlap(self) -> set[tuple[str, str]]:
        """(raw_text, concept_id) pairs present in both train and test."""
        train_pairs = {(r.raw_text, r.concept_id) for r in self.train}
        return {(r.raw_text, r.concept_id) for r in self.test} & train_pairs


@dataclass
class FoldSet:
    folds: list[Fold] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, k: int) -> Fold:
        return self.folds[k]

    def records(self) -> list[MentionRecord]:
        return [r for f in self.folds for r in (*f.train, *f.test)]

    def map_records(self, fn) -> "FoldSet":
        return FoldSet([Fold([fn(r) for r in f.train], [fn(r) for r in f.test]) for f in self.folds])


def build_inventory(records: Iterable[MentionRecord]) -> ConceptInventory:
    """Inventory over every distinct concept in ``records``, in first-appearance order."""
    ids: dict[str, None] = {}
    for r in records:
        ids.setdefault(r.concept_id, None)
    if not ids:
        raise EmptyDataset("cannot build an inventory from zero records")
    return ConceptInventory(list(ids))


def validation_split(
    train: Sequence[MentionRecord], fraction: float = 0.1, seed: int = 0
) -> tuple[list[MentionRecord], list[MentionRecord]]:
    """Hold out ``round(fraction * len(train))`` records (at least one) for validation.

    Both halves keep the input order. The split depends only on
    ``(len(train), fraction, seed)``.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidParams(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(train)
    if n < 2:
        raise TooSmall(f"need at least 2 training records to split, got {n}")
    n_val = min(max(1, math.floor(fraction * n + 0.5)), n - 1)
    rng = np.random.default_rng(seed)
    held = np.zeros(n, dtype=bool)
    held[rng.permutation(n)[:n_val]] = True
    return (
        [r for r, h in zip(train, held) if not h],
        [r for r, h in zip(train, held) if h],
    )


def preprocess_foldset(
    folds: FoldSet, cfg: PreprocessConfig | None = None, lexicon: AcronymLexicon | None = None
) -> FoldSet:
    cfg = cfg or PreprocessConfig()
    if lexicon is None and cfg.expand:
        lexicon = load_lexicon(cfg)
    return folds.map_records(
        lambda r: replace(r, processed_text=preprocess(r.raw_text, cfg, lexicon))
    )


# ---------------------------------------------------------------- file I/O


def _data_lines(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError("file not found", path) from None
    except UnicodeDecodeError as exc:
        raise FormatError(f"not valid UTF-8 ({exc.reason})", path) from None
    for lineno, line in enumerate(text.split("\n"), 1):
        if line.endswith("\r"):
            line = line[:-1]
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def read_concepts(path: str | Path) -> ConceptInventory:
    path = Path(path)
    ids, terms = [], []
    seen = set()
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) > 2 or not parts[0].strip():
            raise FormatError(f"expected 'concept_id<TAB>preferred_term', got {line!r}", path, lineno)
        cid = parts[0]
        if cid in seen:
            raise FormatError(f"duplicate concept id {cid!r}", path, lineno)
        seen.add(cid)
        ids.append(cid)
        terms.append(parts[1] if len(parts) == 2 else None)
    if not ids:
        raise FormatError("no concepts", path)
    return ConceptInventory(ids, terms)


def read_mentions(path: str | Path, inventory: ConceptInventory | None = None) -> list[MentionRecord]:
    path = Path(path)
    records = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise FormatError(
                f"expected 'raw_mention<TAB>concept_id[<TAB>processed]', got {len(parts)} field(s)",
                path,
                lineno,
            )
        raw, cid = parts[0], parts[1]
        if not raw.strip():
            raise FormatError("empty mention text", path, lineno)
        if not cid:
            raise FormatError("empty concept id", path, lineno)
        if inventory is not None and cid not in inventory:
            raise UnknownConcept(f"concept {cid!r} missing from concepts.tsv", path, lineno)
        records.append(MentionRecord(raw, cid, parts[2] if len(parts) == 3 else None))
    if not records:
        raise FormatError("empty mentions file", path)
    return records


def load_dataset(path: str | Path) -> tuple[ConceptInventory, FoldSet]:
    root = Path(path)
    if not root.is_dir():
        raise FormatError("dataset directory not found", root)
    inventory = read_concepts(root / "concepts.tsv")
    fold_dirs = sorted(
        (int(m.group(1)), p)
        for p in root.iterdir()
        if p.is_dir() and (m := _FOLD_DIR.match(p.name))
    )
    if not fold_dirs:
        raise FormatError("no fold_<k>/ directories", root)
    expected = list(range(len(fold_dirs)))
    if [k for k, _ in fold_dirs] != expected:
        raise FormatError(f"fold directories must be numbered 0..{len(fold_dirs) - 1}", root)
    folds = FoldSet()
    for k, d in fold_dirs:
        fold = Fold(read_mentions(d / "train.tsv", inventory), read_mentions(d / "test.tsv", inventory))
        shared = fold.overlap()
        if shared and len(fold_dirs) > 1:
            log.warning("fold %d: %d train/test pairs overlap", k, len(shared))
        folds.folds.append(fold)
    return inventory, folds


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise FormatError(f"{what} contains a tab or newline: {value!r}")
    return value


def _mention_lines(records: Iterable[MentionRecord]) -> str:
    out = []
    for r in records:
        fields = [_check_field(r.raw_text, "mention"), _check_field(r.concept_id, "concept id")]
        if r.processed_text is not None:
            fields.append(_check_field(r.processed_text, "processed text"))
        out.append("\t".join(fields) + "\n")
    return "".join(out)


def save_dataset(path: str | Path, inventory: ConceptInventory, folds: FoldSet) -> Path:
    """Write ``inventory`` and ``folds`` in the canonical layout (overwrites files)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for cid, term in zip(inventory.ids, inventory.terms):
        lines.append(_check_field(cid, "concept id") + ("" if term is None else "\t" + _check_field(term, "term")))
    (root / "concepts.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    for k, fold in enumerate(folds):
        d = root / f"fold_{k}"
        d.mkdir(exist_ok=True)
        (d / "train.tsv").write_text(_mention_lines(fold.train), encoding="utf-8")
        (d / "test.tsv").write_text(_mention_lines(fold.test), encoding="utf-8")
    return root


# ------------------------------------------------------------ synthetic data

_MODIFIERS = (
    "severe", "mild", "constant", "sharp", "chronic", "sudden", "dull", "intense",
    "occasional", "terrible", "persistent", "painful", "recurring", "slight", "extreme",
)
_SYMPTOMS = (
    "pain", "ache", "cramps", "swelling", "numbness", "itching", "weakness", "stiffness",
    "tingling", "burning", "fatigue", "soreness", "tremors", "spasms", "rash", "bruising",
)
_SITES = (
    "back", "head", "legs", "arms", "chest", "stomach", "joints", "muscles", "neck",
    "feet", "hands", "shoulders", "knees", "skin", "eyes", "throat",
)
# templates built around lexicon expansions so acronym noise has something to hit
_LEXICAL = (
    "high blood pressure", "shortness of breath", "heart rate", "urinary tract infection",
    "irritable bowel syndrome", "restless legs syndrome", "bowel movement", "weight",
    "nausea and vomiting", "deep vein thrombosis", "atrial fibrillation", "hypertension",
)
_SYNONYMS = {
    "pain": ("hurt", "aching"),
    "ache": ("pain", "soreness"),
    "severe": ("awful", "horrible"),
    "mild": ("light", "minor"),
    "constant": ("nonstop", "always"),
    "fatigue": ("tiredness", "exhaustion"),
    "stomach": ("tummy", "belly"),
    "legs": ("leg", "calves"),
    "head": ("skull", "temples"),
    "terrible": ("awful", "horrible"),
    "weakness": ("weak", "feebleness"),
    "sudden": ("abrupt", "unexpected"),
    "chronic": ("longterm", "ongoing"),
    "itching": ("itchy", "itch"),
    "high": ("elevated", "raised"),
}


@dataclass(frozen=True)
class SyntheticNoise:
    """Per-token probabilities of each corruption applied to a concept template."""

    synonym: float = 0.3
    repeat: float = 0.15
    acronym: float = 0.5

    @classmethod
    def uniform(cls, level: float) -> "SyntheticNoise":
        return cls(synonym=level, repeat=level, acronym=level)

    def is_zero(self) -> bool:
        return self.synonym == 0 and self.repeat == 0 and self.acronym == 0


def _templates(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` phrases whose token multisets are pairwise distinct."""
    pool = [f"{s} {t}" for s in _SITES for t in _SYMPTOMS]
    pool += [f"{m} {s} {t}" for m in _MODIFIERS for s in _SITES for t in _SYMPTOMS]
    pool += [f"{m} {x}" for m in _MODIFIERS for x in _LEXICAL] + list(_LEXICAL)
    order = rng.permutation(len(pool))
    out, seen = [], set()
    for i in order:
        phrase = pool[i]
        key = tuple(sorted(phrase.split()))
        if key in seen:
            continue
        seen.add(key)
        out.append(phrase)
        if len(out) == n:
            return out
    raise InvalidParams(f"at most {len(out)} distinct synthetic concepts are available")


def _reverse_lexicon() -> list[tuple[list[str], str]]:
    """(expansion tokens, surface form) pairs from the shipped acronym list, longest first."""
    cfg = PreprocessConfig(expand_contractions=False)
    pairs = [(exp.split(), surf) for surf, exp in load_lexicon(cfg).items()]
    return sorted(pairs, key=lambda p: -len(p[0]))


def _corrupt(template: str, noise: SyntheticNoise, rng: np.random.Generator, reverse) -> str:
    tokens = template.split()
    if noise.acronym > 0:
        out, i = [], 0
        while i < len(tokens):
            for exp, surf in reverse:
                if tokens[i : i + len(exp)] == exp and rng.random() < noise.acronym:
                    out.append(surf.upper() if rng.random() < 0.5 else surf)
                    i += len(exp)
                    break
            else:
                out.append(tokens[i])
                i += 1
        tokens = out
    if noise.synonym > 0:
        tokens = [
            str(rng.choice(_SYNONYMS[t])) if t in _SYNONYMS and rng.random() < noise.synonym else t
            for t in tokens
        ]
    if noise.repeat > 0:
        noisy = []
        for t in tokens:
            if rng.random() < noise.repeat:
                j = int(rng.integers(len(t)))
                t = t[:j] + t[j] * int(rng.integers(3, 6)) + t[j + 1 :]
            noisy.append(t)
        tokens = noisy
    return " ".join(tokens)


def generate_synthetic(
    n_concepts: int,
    n_mentions: int,
    noise: SyntheticNoise | float = 0.3,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> tuple[ConceptInventory, FoldSet]:
    """A single-fold corpus of noisy template mentions.

    Mentions are spread round-robin over concepts, so every concept gets
    ``n_mentions // n_concepts`` or one more. Each concept keeps at least one
    training mention whenever it has more than one mention.
    """
    if n_concepts < 2:
        raise InvalidParams("n_concepts must be >= 2")
    if n_mentions < n_concepts:
        raise InvalidParams("n_mentions must be >= n_concepts")
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParams("test_fraction must be in (0, 1)")
    if not isinstance(noise, SyntheticNoise):
        noise = SyntheticNoise.uniform(float(noise))
    for name in ("synonym", "repeat", "acronym"):
        p = getattr(noise, name)
        if not 0.0 <= p <= 1.0:
            raise InvalidParams(f"noise.{name} must be in [0, 1], got {p}")

    rng = np.random.default_rng(seed)
    templates = _templates(n_concepts, rng)
    width = len(str(n_concepts - 1))
    ids = [f"SYN{i:0{width}d}" for i in range(n_concepts)]
    inventory = ConceptInventory(ids, templates)
    reverse = _reverse_lexicon() if noise.acronym > 0 else []

    per_concept: list[list[MentionRecord]] = [[] for _ in range(n_concepts)]
    for j in range(n_mentions):
        c = j % n_concepts
        text = templates[c] if noise.is_zero() else _corrupt(templates[c], noise, rng, reverse)
        per_concept[c].append(MentionRecord(text, ids[c]))

    n_test = math.floor(test_fraction * n_mentions + 0.5)
    # never hold out a concept's first mention unless there is no other choice
    spare = [(c, i) for c in range(n_concepts) for i in range(1, len(per_concept[c]))]
    firsts = [(c, 0) for c in range(n_concepts)]
    picks = [spare[i] for i in rng.permutation(len(spare))]
    picks += [firsts[i] for i in rng.permutation(len(firsts))]
    held = set(picks[:n_test])

    train, test = [], []
    for c, i in sorted(((c, i) for c in range(n_concepts) for i in range(len(per_concept[c]))), key=lambda ci: (ci[1], ci[0])):
        (test if (c, i) in held else train).append(per_concept[c][i])
    return inventory, FoldSet([Fold(train, test)])
