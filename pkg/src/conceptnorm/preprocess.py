"""Mention normalization: character filtering, repeat squashing, and
contraction / acronym expansion.

The three stages always run in the same order (filter, squash, expand) so
that ``"BP!!"`` is reduced to ``"bp"`` before the lexicon sees it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import LexiconError, MissingLexicon

DEFAULT_LEXICON_FILES = ("contractions.tsv", "acronyms.tsv")

_APOSTROPHES = re.compile(r"['`]")
_NON_ASCII = re.compile(r"[^\x00-\x7f]")
_SPECIAL = re.compile(r"[^a-z0-9]+")
_REPEATS = re.compile(r"(.)\1{2,}", re.DOTALL)


def strip_special(text: str) -> str:
    """Lowercase and reduce ``text`` to ``[a-z0-9]`` tokens separated by single spaces.

    Non-ASCII characters and apostrophes are dropped outright (so ``"can't"``
    and ``"can’t"`` both become ``"cant"``); any other run of ASCII
    punctuation or whitespace becomes one space.
    """
    text = _NON_ASCII.sub("", text)
    text = _APOSTROPHES.sub("", text.lower())
    return _SPECIAL.sub(" ", text).strip()


def squash_repeats(text: str) -> str:
    """Shorten every run of more than two identical characters to exactly two."""
    return _REPEATS.sub(r"\1\1", text)


def _normalize_surface(text: str) -> str:
    return squash_repeats(strip_special(text))


class AcronymLexicon:
    """Case-insensitive map from surface token sequences to expansions.

    Keys and expansions are stored normalized (the same way mention text is
    normalized) so lookups against preprocessed text line up. Construction
    rejects lexicons whose output could be expanded again, which is what makes
    :func:`preprocess` idempotent.
    """

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[tuple[str, ...], str] = {}
        for surface, expansion in items:
            self._add(surface, expansion)
        self._check_closed()
        self.max_key_len = max((len(k) for k in self._entries), default=0)

    def _add(self, surface: str, expansion: str, origin: str = "") -> None:
        key = tuple(_normalize_surface(surface).split())
        value = _normalize_surface(expansion)
        if not key:
            raise LexiconError(f"{origin}empty surface form {surface!r}")
        if not value:
            raise LexiconError(f"{origin}empty expansion for {surface!r}")
        if " ".join(key) == value:
            raise LexiconError(f"{origin}{surface!r} maps to itself")
        previous = self._entries.get(key)
        if previous is not None and previous != value:
            raise LexiconError(
                f"{origin}conflicting expansions for {' '.join(key)!r}: "
                f"{previous!r} vs {value!r}"
            )
        self._entries[key] = value

    def _check_closed(self) -> None:
        key_tokens = {tok for key in self._entries for tok in key}
        for key, value in self._entries.items():
            clash = key_tokens.intersection(value.split())
            if clash:
                raise LexiconError(
                    f"expansion of {' '.join(key)!r} contains lexicon token(s) "
                    f"{sorted(clash)}; expansions must not be re-expandable"
                )

    @classmethod
    def from_files(cls, paths: Iterable[str | Path]) -> "AcronymLexicon":
        lex = cls()
        for path in paths:
            path = Path(path)
            try:
                lines = path.read_text(encoding="utf-8").splitlines()
            except OSError as exc:
                raise MissingLexicon(f"cannot read lexicon {path}: {exc}") from exc
            for lineno, line in enumerate(lines, 1):
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise LexiconError(
                        f"{path}:{lineno}: expected 'surface<TAB>expansion', got {line!r}"
                    )
                lex._add(parts[0], parts[1], origin=f"{path}:{lineno}: ")
        lex._check_closed()
        lex.max_key_len = max((len(k) for k in lex._entries), default=0)
        return lex

    def get(self, tokens: Iterable[str]) -> str | None:
        return self._entries.get(tuple(t.lower() for t in tokens))

    def items(self):
        return ((" ".join(k), v) for k, v in self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, surface: str) -> bool:
        return tuple(_normalize_surface(surface).split()) in self._entries


def default_lexicon_paths() -> list[Path]:
    base = resources.files("conceptnorm") / "data"
    return [Path(str(base / name)) for name in DEFAULT_LEXICON_FILES]


@dataclass(frozen=True)
class PreprocessConfig:
    strip_non_ascii: bool = True
    squash_repeats: bool = True
    expand_contractions: bool = True
    expand_acronyms: bool = True
    lexicon_paths: tuple[str, ...] = field(
        default_factory=lambda: tuple(str(p) for p in default_lexicon_paths())
    )

    @property
    def expand(self) -> bool:
        return self.expand_contractions or self.expand_acronyms

    def active_lexicon_paths(self) -> tuple[str, ...]:
        """Lexicon files to load, honoring the two expansion toggles for the shipped files."""
        skip = set()
        if not self.expand_contractions:
            skip.add("contractions.tsv")
        if not self.expand_acronyms:
            skip.add("acronyms.tsv")
        defaults = {str(p) for p in default_lexicon_paths()}
        return tuple(
            p for p in self.lexicon_paths if not (p in defaults and Path(p).name in skip)
        )


@lru_cache(maxsize=8)
def _cached_lexicon(paths: tuple[str, ...]) -> AcronymLexicon:
    return AcronymLexicon.from_files(paths)


def load_lexicon(cfg: PreprocessConfig | None = None) -> AcronymLexicon:
    cfg = cfg or PreprocessConfig()
    return _cached_lexicon(cfg.active_lexicon_paths())


def expand_terms(text: str, lexicon: AcronymLexicon) -> str:
    """Replace whole whitespace tokens (or token runs) found in ``lexicon``.

    Matching is longest-key-first at each position, in a single left-to-right
    pass; produced text is never re-scanned.
    """
    tokens = text.split()
    if not tokens or lexicon.max_key_len == 0:
        return " ".join(tokens)
    out = []
    i = 0
    while i < len(tokens):
        for width in range(min(lexicon.max_key_len, len(tokens) - i), 0, -1):
            expansion = lexicon.get(tokens[i : i + width])
            if expansion is not None:
                out.append(expansion)
                i += width
                break
        else:
            out.append(tokens[i])
            i += 1
    return " ".join(out)


def preprocess(
    text: str,
    cfg: PreprocessConfig | None = None,
    lexicon: AcronymLexicon | None = None,
) -> str:
    cfg = cfg or PreprocessConfig()
    if cfg.strip_non_ascii:
        text = strip_special(text)
    if cfg.squash_repeats:
        text = squash_repeats(text)
    if cfg.expand:
        if lexicon is None:
            lexicon = load_lexicon(cfg)
        text = expand_terms(text, lexicon)
    return text
