"""Join figures to their captions and to the body passages that cite them."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Any

from figmine.errors import FigmineError
from figmine.ingest import ArticleDocument, FigureBlock

# Passages whose mentions are never cross-references.
EXCLUDED_SECTIONS = frozenset({"FIG", "TABLE", "REF"})

_KEYWORD_RE = re.compile(r"(?<![A-Za-z])(fig(?:ure)?s?)(?![A-Za-z])(\.?)", re.IGNORECASE)
_DASHES = "-‐‑‒–—−"
_NUM_RE = re.compile(r"\d+")
_PANEL_RE = re.compile(rf"([a-zA-Z])(?![A-Za-z])(?:\s*[{_DASHES}]\s*([a-zA-Z])(?![A-Za-z]))?")
_PAREN_PANEL_RE = re.compile(r" ?\(([a-zA-Z])\)")
_BARE_PANEL_RE = re.compile(r"([a-zA-Z])(?![A-Za-z])")
_WS_RE = re.compile(r"\s*")
_SEP_RE = re.compile(r"\s*(?:,\s*(?:and\s+|&\s*)?|\s+and\s+|\s*&\s*)")
_RANGE_RE = re.compile(rf"\s*[{_DASHES}]\s*")


class UnknownFigureNumber(FigmineError, KeyError):
    pass


@dataclass(frozen=True)
class FigureMention:
    start: int
    end: int
    targets: tuple[tuple[int, str | None], ...]


@dataclass(frozen=True)
class FigureReference:
    figure_number: int
    panel: str | None
    passage_index: int
    span: tuple[int, int]
    panels: tuple[str, ...] = ()


@dataclass(frozen=True)
class LinkedFigure:
    pmcid: str
    metadata: dict[str, str | None]
    figure: FigureBlock
    references: tuple[FigureReference, ...]
    referring_text: tuple[str, ...] = field(default=())
    referring_passages: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LinkedFigure:
        refs = tuple(
            FigureReference(
                figure_number=r["figure_number"],
                panel=r["panel"],
                passage_index=r["passage_index"],
                span=tuple(r["span"]),  # type: ignore[arg-type]
                panels=tuple(r.get("panels", ())),
            )
            for r in data["references"]
        )
        return cls(
            pmcid=data["pmcid"],
            metadata=dict(data["metadata"]),
            figure=FigureBlock(**data["figure"]),
            references=refs,
            referring_text=tuple(data.get("referring_text", ())),
            referring_passages=tuple(data.get("referring_passages", ())),
        )


def _letters(first: str, last: str | None) -> list[str]:
    first = first.lower()
    if last is None:
        return [first]
    last = last.lower()
    if last < first:
        return [first, last]
    return [chr(c) for c in range(ord(first), ord(last) + 1)]


def _parse_panels(text: str, pos: int) -> tuple[list[str], int]:
    """Panel letters attached to a number: ``2a``, ``3a-c``, ``2(a)``, ``2 (b)``."""
    m = _PANEL_RE.match(text, pos)
    if m:
        return _letters(m.group(1), m.group(2)), m.end()
    m = _PAREN_PANEL_RE.match(text, pos)
    if m:
        return [m.group(1).lower()], m.end()
    return [], pos


def _parse_item(text: str, pos: int) -> tuple[list[tuple[int, str | None]], int] | None:
    """One enumeration item: a number or number range, with optional panels."""
    m = _NUM_RE.match(text, pos)
    if not m:
        return None
    first = int(m.group())
    pos = m.end()
    panels, pos = _parse_panels(text, pos)
    r = _RANGE_RE.match(text, pos)
    if r and not panels:
        m_last = _NUM_RE.match(text, r.end())
        if m_last and int(m_last.group()) > first:
            last = int(m_last.group())
            end_panels, pos = _parse_panels(text, m_last.end())
            items: list[tuple[int, str | None]] = [(n, None) for n in range(first, last)]
            items += [(last, p) for p in end_panels] or [(last, None)]
            return items, pos
    if panels:
        return [(first, p) for p in panels], pos
    return [(first, None)], pos


def iter_mentions(text: str) -> list[FigureMention]:
    """All figure mentions in ``text`` with their expanded (number, panel) targets."""
    out: list[FigureMention] = []
    pos = 0
    while True:
        k = _KEYWORD_RE.search(text, pos)
        if not k:
            return out
        cur = k.end()
        cur = _WS_RE.match(text, cur).end()
        if cur < len(text) and text[cur] in "sS" and cur + 1 < len(text) and text[cur + 1].isdigit():
            # supplementary figure: consume and ignore
            pos = cur + 1
            continue
        first = _parse_item(text, cur)
        if first is None:
            pos = k.end()
            continue
        targets, cur = first
        end = cur
        while True:
            sep = _SEP_RE.match(text, cur)
            if not sep or sep.end() == cur:
                break
            nxt = _parse_item(text, sep.end())
            if nxt is None:
                # bare panel letter continuing the previous number: "2a and b"
                last_num, last_panel = targets[-1]
                pm = _BARE_PANEL_RE.match(text, sep.end())
                if last_panel is not None and pm and pm.group(1).lower() > last_panel:
                    targets.append((last_num, pm.group(1).lower()))
                    cur = end = pm.end()
                    continue
                break
            items, cur = nxt
            targets.extend(items)
            end = cur
        targets = [t for t in targets if t[0] >= 1]
        if targets:
            out.append(FigureMention(k.start(), end, tuple(dict.fromkeys(targets))))
        pos = max(end, k.end())


def normalize_figure_label(raw: str) -> list[tuple[int, str | None]]:
    """Expand a figure mention into its (figure number, panel) pairs.

    >>> normalize_figure_label("Figures 1-3")
    [(1, None), (2, None), (3, None)]
    >>> normalize_figure_label("Fig. 2a and 2b")
    [(2, 'a'), (2, 'b')]
    """
    pairs: list[tuple[int, str | None]] = []
    for mention in iter_mentions(raw):
        pairs.extend(mention.targets)
    return list(dict.fromkeys(pairs))


def find_references(doc: ArticleDocument, figure_number: int) -> list[FigureReference]:
    if not any(f.figure_number == figure_number for f in doc.figures):
        raise UnknownFigureNumber(f"{doc.pmcid} has no figure {figure_number}")
    refs: list[FigureReference] = []
    for index, passage in enumerate(doc.passages):
        if passage.section_type in EXCLUDED_SECTIONS:
            continue
        for mention in iter_mentions(passage.text):
            panels = tuple(p for n, p in mention.targets if n == figure_number and p is not None)
            if not any(n == figure_number for n, _ in mention.targets):
                continue
            refs.append(
                FigureReference(
                    figure_number=figure_number,
                    panel=panels[0] if len(panels) == 1 else None,
                    passage_index=index,
                    span=(mention.start, mention.end),
                    panels=panels,
                )
            )
    return refs


def article_metadata(doc: ArticleDocument) -> dict[str, str | None]:
    return {
        "doi": doc.doi,
        "title": doc.title,
        "journal": doc.journal,
        "pub_date": doc.pub_date,
        "license": doc.license,
    }


def link_figures(doc: ArticleDocument) -> list[LinkedFigure]:
    linked: list[LinkedFigure] = []
    meta = article_metadata(doc)
    for figure in doc.figures:
        refs = find_references(doc, figure.figure_number)
        first_by_text: dict[str, int] = {}
        for i in sorted({r.passage_index for r in refs} - {figure.caption_passage_index}):
            first_by_text.setdefault(doc.passages[i].text, i)
        linked.append(
            LinkedFigure(
                pmcid=doc.pmcid,
                metadata=meta,
                figure=figure,
                references=tuple(refs),
                referring_text=tuple(first_by_text),
                referring_passages=tuple(first_by_text.values()),
            )
        )
    return linked
