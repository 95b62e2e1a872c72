"""Lexicon matching and negation detection over captions and referring text.

Negation uses trigger phrases with a token window: a pre-trigger negates
terms that start within ``scope_window`` words after it, a post-trigger
negates terms that end within ``scope_window`` words before it, and a
terminator word in between blocks the scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal

from figmine.errors import FigmineError
from figmine.linker import LinkedFigure

Polarity = Literal["positive", "negated"]
Category = Literal["symptom", "finding"]

ABBREVIATIONS = frozenset(
    {"fig", "figs", "dr", "e.g", "i.e", "al", "vs", "approx", "ca", "cf", "no", "resp", "mr", "mrs", "ms", "st", "etc"}
)

_WORD_RE = re.compile(r"\w+(?:[-'’]\w+)*")
_SENT_END_RE = re.compile(r"[.!?]+(?=\s|$)|[;\n]")


class LexiconError(FigmineError, ValueError):
    pass


# --------------------------------------------------------------------------
# lexicon
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LexiconEntry:
    term: str
    category: Category
    synonyms: tuple[str, ...]


@dataclass(frozen=True)
class Lexicon:
    entries: tuple[LexiconEntry, ...]

    def __post_init__(self) -> None:
        terms = [e.term for e in self.entries]
        if len(set(terms)) != len(terms):
            raise LexiconError("canonical terms must be unique")
        owner: dict[str, str] = {}
        for e in self.entries:
            if e.category not in ("symptom", "finding"):
                raise LexiconError(f"{e.term}: unknown category {e.category!r}")
            for syn in e.synonyms:
                key = _norm(syn)
                if key in owner and owner[key] != e.term:
                    raise LexiconError(f"synonym {syn!r} maps to both {owner[key]!r} and {e.term!r}")
                owner[key] = e.term

    def by_category(self, category: Category) -> list[LexiconEntry]:
        return [e for e in self.entries if e.category == category]

    @property
    def terms(self) -> list[str]:
        return [e.term for e in self.entries]

    def entry(self, term: str) -> LexiconEntry:
        for e in self.entries:
            if e.term == term:
                return e
        raise KeyError(term)

    @cached_property
    def _synonym_index(self) -> dict[str, LexiconEntry]:
        return {_norm(s): e for e in self.entries for s in e.synonyms}

    def resolve(self, surface: str) -> LexiconEntry | None:
        return self._synonym_index.get(_norm(surface))

    @cached_property
    def _patterns(self) -> list[tuple[re.Pattern[str], LexiconEntry]]:
        out = []
        for e in self.entries:
            for syn in e.synonyms:
                body = r"\s+".join(re.escape(part) for part in syn.split())
                out.append((re.compile(rf"(?<!\w){body}(?!\w)", re.IGNORECASE), e))
        return out


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


def parse_lexicon(lines: Iterable[str]) -> Lexicon:
    entries = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise LexiconError(f"line {lineno}: expected 3 tab-separated fields")
        term, category, synonyms = parts
        syns = tuple(s.strip() for s in synonyms.split("|") if s.strip())
        if term not in syns:
            syns = (term,) + syns
        entries.append(LexiconEntry(term.strip(), category.strip(), syns))  # type: ignore[arg-type]
    return Lexicon(tuple(entries))


def load_lexicon(path: str | Path) -> Lexicon:
    with open(path, encoding="utf-8") as fh:
        return parse_lexicon(fh)


def _data_lines(name: str) -> list[str]:
    return resources.files("figmine").joinpath("data", name).read_text(encoding="utf-8").splitlines()


def load_default_lexicon() -> Lexicon:
    return parse_lexicon(_data_lines("lexicon.tsv"))


# --------------------------------------------------------------------------
# negation rules
# --------------------------------------------------------------------------


def _phrases(lines: Iterable[str]) -> tuple[str, ...]:
    return tuple(_norm(l) for l in lines if l.strip() and not l.lstrip().startswith("#"))


@dataclass(frozen=True)
class NegationRules:
    pre_triggers: tuple[str, ...]
    post_triggers: tuple[str, ...]
    terminators: tuple[str, ...]
    pseudo_triggers: tuple[str, ...] = ()
    scope_window: int = 6

    def __post_init__(self) -> None:
        if not self.pre_triggers or not self.post_triggers:
            raise LexiconError("trigger lists must be non-empty")
        if self.scope_window < 1:
            raise LexiconError("scope_window must be >= 1")

    @classmethod
    def default(cls, scope_window: int = 6) -> NegationRules:
        return cls(
            pre_triggers=_phrases(_data_lines("pre_triggers.txt")),
            post_triggers=_phrases(_data_lines("post_triggers.txt")),
            terminators=_phrases(_data_lines("terminators.txt")),
            pseudo_triggers=_phrases(_data_lines("pseudo_triggers.txt")),
            scope_window=scope_window,
        )

    @classmethod
    def from_directory(cls, directory: str | Path, scope_window: int = 6) -> NegationRules:
        """Load ``pre_triggers.txt``, ``post_triggers.txt``, ``terminators.txt``
        and optionally ``pseudo_triggers.txt``; missing files fall back to defaults."""
        d = Path(directory)
        default = cls.default(scope_window)

        def read(name: str, fallback: tuple[str, ...]) -> tuple[str, ...]:
            p = d / name
            return _phrases(p.read_text(encoding="utf-8").splitlines()) if p.exists() else fallback

        return cls(
            pre_triggers=read("pre_triggers.txt", default.pre_triggers),
            post_triggers=read("post_triggers.txt", default.post_triggers),
            terminators=read("terminators.txt", default.terminators),
            pseudo_triggers=read("pseudo_triggers.txt", default.pseudo_triggers),
            scope_window=scope_window,
        )


# --------------------------------------------------------------------------
# mentions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mention:
    term: str
    category: Category
    span: tuple[int, int]
    text: str
    polarity: Polarity | None = None
    source: str | None = None  # "caption" or "referring_text"
    pmcid: str | None = None
    figure_number: int | None = None
    passage_index: int | None = None


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences; ``.``/``!``/``?`` end a sentence unless
    they follow a known abbreviation, ``;`` and newlines always do."""
    spans: list[tuple[int, int]] = []
    start = 0
    for m in _SENT_END_RE.finditer(text):
        if m.group().startswith("."):
            prev = re.search(r"(\S+)$", text[start : m.start()])
            if prev and prev.group(1).lower().rstrip(".") in ABBREVIATIONS:
                continue
        end = m.end()
        if text[start:end].strip():
            spans.append(_trim(text, start, end))
        start = end
    if text[start:].strip():
        spans.append(_trim(text, start, len(text)))
    return spans


def _trim(text: str, start: int, end: int) -> tuple[int, int]:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end


def find_mentions(text: str, lexicon: Lexicon, offset: int = 0) -> list[Mention]:
    """Longest-match lexicon hits; shorter overlapping hits are dropped."""
    if not text:
        return []
    hits = []
    for pattern, entry in lexicon._patterns:
        for m in pattern.finditer(text):
            hits.append((m.start(), m.end(), entry))
    hits.sort(key=lambda h: (-(h[1] - h[0]), h[0], h[2].term))
    taken: list[tuple[int, int, LexiconEntry]] = []
    for s, e, entry in hits:
        if all(e <= ts or s >= te for ts, te, _ in taken):
            taken.append((s, e, entry))
    taken.sort(key=lambda h: h[0])
    return [
        Mention(entry.term, entry.category, (s + offset, e + offset), text[s:e])
        for s, e, entry in taken
    ]


@dataclass(frozen=True)
class _Trigger:
    kind: str  # pre, post, pseudo, term
    first: int
    last: int  # inclusive token index


def _match_triggers(words: list[str], rules: NegationRules) -> list[_Trigger]:
    candidates: list[tuple[int, int, int, str]] = []
    # pre-triggers win ties so "negative for X" is not read as "... was negative"
    groups = (
        ("pseudo", rules.pseudo_triggers, 0),
        ("pre", rules.pre_triggers, 1),
        ("post", rules.post_triggers, 2),
        ("term", rules.terminators, 3),
    )
    for kind, phrases, rank in groups:
        for phrase in phrases:
            toks = phrase.split()
            n = len(toks)
            for i in range(len(words) - n + 1):
                if words[i : i + n] == toks:
                    candidates.append((n, rank, i, kind))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used: set[int] = set()
    out: list[_Trigger] = []
    for n, _, i, kind in candidates:
        span = set(range(i, i + n))
        if span & used:
            continue
        used |= span
        out.append(_Trigger(kind, i, i + n - 1))
    return sorted(out, key=lambda t: t.first)


def detect_negation(
    sentence: str,
    mention: Mention,
    rules: NegationRules,
    sentence_offset: int = 0,
) -> Polarity:
    """Polarity of ``mention`` inside ``sentence``.

    ``mention.span`` is in source coordinates; ``sentence_offset`` is where the
    sentence starts in that source.
    """
    tokens = [(m.start(), m.end(), m.group().lower()) for m in _WORD_RE.finditer(sentence)]
    words = [t[2] for t in tokens]
    ms, me = mention.span[0] - sentence_offset, mention.span[1] - sentence_offset
    covered = [i for i, (s, e, _) in enumerate(tokens) if s < me and e > ms]
    if not covered:
        return "positive"
    first, last = covered[0], covered[-1]
    triggers = _match_triggers(words, rules)
    terminators = [t for t in triggers if t.kind == "term"]

    def blocked(lo: int, hi: int) -> bool:
        return any(lo <= t.first and t.last <= hi for t in terminators)

    window = rules.scope_window
    for t in triggers:
        if t.kind == "pre" and t.last < first and first - t.last <= window and not blocked(t.last + 1, first - 1):
            return "negated"
        if t.kind == "post" and t.first > last and t.first - last <= window and not blocked(last + 1, t.first - 1):
            return "negated"
    return "positive"


def mine_text(
    text: str,
    lexicon: Lexicon,
    rules: NegationRules,
    **tags,
) -> list[Mention]:
    """Mentions in ``text`` with polarity set; extra keyword args tag each mention."""
    out: list[Mention] = []
    for s, e in split_sentences(text):
        sentence = text[s:e]
        for m in find_mentions(sentence, lexicon, offset=s):
            out.append(replace(m, polarity=detect_negation(sentence, m, rules, s), **tags))
    return out


def mine_linked_figure(lf: LinkedFigure, lexicon: Lexicon, rules: NegationRules) -> list[Mention]:
    fig = lf.figure
    mentions = mine_text(
        fig.caption_text,
        lexicon,
        rules,
        source="caption",
        pmcid=lf.pmcid,
        figure_number=fig.figure_number,
        passage_index=fig.caption_passage_index,
    )
    for index, text in zip(lf.referring_passages, lf.referring_text):
        mentions += mine_text(
            text,
            lexicon,
            rules,
            source="referring_text",
            pmcid=lf.pmcid,
            figure_number=fig.figure_number,
            passage_index=index,
        )
    return mentions


def collapse_mentions(mentions: Iterable[Mention]) -> list[tuple[str, Polarity]]:
    """Distinct (term, polarity) pairs in first-seen order, for frequency counting."""
    return list(dict.fromkeys((m.term, m.polarity) for m in mentions if m.polarity))


def positive_terms(mentions: Iterable[Mention]) -> frozenset[str]:
    return frozenset(m.term for m in mentions if m.polarity == "positive")


@dataclass(frozen=True)
class MentionSummary:
    term: str
    polarity: Polarity
    sources: tuple[str, ...] = field(default=())

    def encode(self) -> str:
        return f"{self.term}:{self.polarity}:{'+'.join(self.sources)}"

    @classmethod
    def decode(cls, text: str) -> MentionSummary:
        term, polarity, sources = text.rsplit(":", 2)
        return cls(term, polarity, tuple(s for s in sources.split("+") if s))  # type: ignore[arg-type]


def summarize(mentions: Iterable[Mention]) -> list[MentionSummary]:
    grouped: dict[tuple[str, str], list[str]] = {}
    for m in mentions:
        if m.polarity is None:
            continue
        srcs = grouped.setdefault((m.term, m.polarity), [])
        if m.source and m.source not in srcs:
            srcs.append(m.source)
    return [MentionSummary(t, p, tuple(s)) for (t, p), s in grouped.items()]  # type: ignore[arg-type]
