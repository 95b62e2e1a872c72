"""Fetch full-text articles and parse BioC XML into an article model.

Two sources are supported: a fixture directory laid out as ``<dir>/<PMCID>.xml``
and the live BioC web service. The live client serialises every request through
one rate limiter and honours ``Retry-After`` on HTTP 429.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import requests

from figmine.errors import ConfigError, FigmineError

log = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://www.ncbi.nlm.nih.gov/research/bionlp/RESTful/pmcoa.cgi"
DEFAULT_SEARCH_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
API_BASE_ENV = "FIGMINE_API_BASE"

PMCID_RE = re.compile(r"^PMC\d+$")

# Section types emitted by the PMC BioC converter; anything else maps to OTHER.
SECTION_TYPES = frozenset(
    {
        "TITLE",
        "ABSTRACT",
        "INTRO",
        "METHODS",
        "RESULTS",
        "DISCUSS",
        "CONCL",
        "CASE",
        "FIG",
        "TABLE",
        "REF",
        "SUPPL",
        "ACK_FUND",
        "AUTH_CONT",
        "COMP_INT",
        "ABBR",
        "APPENDIX",
        "KEYWORD",
        "REVIEW_INFO",
        "OTHER",
    }
)

_LABEL_RE = re.compile(r"^\s*(fig(?:ure)?s?\.?\s*(\d+))", re.IGNORECASE)
_DIGITS_RE = re.compile(r"(\d+)")


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------


class IngestError(FigmineError):
    pass


class InvalidIdentifier(IngestError, ValueError):
    pass


class NotFound(IngestError):
    pass


class NotOpenAccess(IngestError):
    pass


class NetworkError(IngestError):
    pass


class RateLimited(IngestError):
    def __init__(self, message: str, retry_after: float) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class MalformedXml(IngestError):
    pass


class MissingRequiredField(IngestError):
    pass


class EncodingError(IngestError):
    pass


# --------------------------------------------------------------------------
# article model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Passage:
    section_type: str
    text: str
    offset: int


@dataclass(frozen=True)
class FigureBlock:
    figure_number: int
    raw_label: str
    caption_text: str
    graphic_ref: str
    caption_passage_index: int


@dataclass(frozen=True)
class ArticleDocument:
    pmcid: str
    doi: str | None
    title: str | None
    journal: str | None
    pub_date: str | None
    license: str | None
    passages: tuple[Passage, ...]
    figures: tuple[FigureBlock, ...]
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ArticleDocument:
        return cls(
            pmcid=data["pmcid"],
            doi=data.get("doi"),
            title=data.get("title"),
            journal=data.get("journal"),
            pub_date=data.get("pub_date"),
            license=data.get("license"),
            passages=tuple(Passage(**p) for p in data["passages"]),
            figures=tuple(FigureBlock(**f) for f in data["figures"]),
            warnings=tuple(data.get("warnings", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ArticleDocument:
        return cls.from_dict(json.loads(text))


def normalize_pmcid(value: str) -> str:
    """Return ``PMC<digits>``; bare digits are accepted and prefixed."""
    v = str(value).strip()
    if v.isdigit():
        v = "PMC" + v
    if v[:3].lower() == "pmc":
        v = "PMC" + v[3:]
    if not PMCID_RE.match(v):
        raise InvalidIdentifier(f"not a PMC identifier: {value!r}")
    return v


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# --------------------------------------------------------------------------
# sources
# --------------------------------------------------------------------------


class RateLimiter:
    """Enforce a minimum delay between consecutive calls across threads."""

    def __init__(
        self,
        min_interval: float = 0.35,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._last: float | None = None

    def wait(self) -> None:
        with self._lock:
            now = self._clock()
            if self._last is not None:
                remaining = self.min_interval - (now - self._last)
                if remaining > 0:
                    self._sleep(remaining)
                    now = self._clock()
            self._last = now


class FixtureSource:
    """Read articles from ``<directory>/<PMCID>.xml``."""

    mode = "fixture"

    def __init__(self, directory: str | os.PathLike[str]) -> None:
        self.directory = Path(directory)

    def fetch(self, pmcid: str) -> bytes:
        path = self.directory / f"{pmcid}.xml"
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{pmcid}: no fixture at {path}") from None

    def image_path(self, pmcid: str, graphic_ref: str) -> Path:
        return self.directory / pmcid / graphic_ref

    def fetch_image(self, pmcid: str, graphic_ref: str) -> bytes:
        path = self.image_path(pmcid, graphic_ref)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{pmcid}: missing image {graphic_ref}") from None

    def search(self, query: str, retmax: int = 10000) -> list[str]:
        raise ConfigError("query resolution requires live mode")


class LiveSource:
    """HTTP client for the BioC service, with optional on-disk cache.

    Cached responses are keyed by the SHA-256 of the request URL so an
    interrupted run can resume without refetching.
    """

    mode = "live"

    def __init__(
        self,
        api_base: str | None = None,
        search_base: str = DEFAULT_SEARCH_BASE,
        image_url_template: str = "https://www.ncbi.nlm.nih.gov/pmc/articles/{pmcid}/bin/{file}",
        min_interval: float = 0.35,
        timeout: float = 30.0,
        cache_dir: str | os.PathLike[str] | None = None,
        session: requests.Session | None = None,
        limiter: RateLimiter | None = None,
    ) -> None:
        self.api_base = (api_base or os.environ.get(API_BASE_ENV) or DEFAULT_API_BASE).rstrip("/")
        self.search_base = search_base.rstrip("/")
        self.image_url_template = image_url_template
        self.timeout = timeout
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.session = session or requests.Session()
        self.session.headers.setdefault("User-Agent", "figmine/0.1")
        self.limiter = limiter or RateLimiter(min_interval)

    def article_url(self, pmcid: str) -> str:
        return f"{self.api_base}/BioC_xml/{pmcid}/unicode"

    def _cache_path(self, url: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / hashlib.sha256(url.encode("utf-8")).hexdigest()

    def _get(self, url: str, params: dict[str, Any] | None = None) -> bytes:
        key = url if not params else url + "?" + "&".join(f"{k}={params[k]}" for k in sorted(params))
        cached = self._cache_path(key)
        if cached is not None and cached.exists():
            return cached.read_bytes()
        self.limiter.wait()
        try:
            resp = self.session.get(url, params=params, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise NetworkError(f"{url}: {exc}") from exc
        if resp.status_code == 429:
            retry_after = _parse_retry_after(resp.headers.get("Retry-After"))
            raise RateLimited(f"{url}: rate limited", retry_after)
        if resp.status_code == 404:
            raise NotFound(f"{url}: not found")
        if resp.status_code in (401, 403):
            raise NotOpenAccess(f"{url}: access refused ({resp.status_code})")
        if resp.status_code >= 400:
            raise NetworkError(f"{url}: HTTP {resp.status_code}")
        body = resp.content
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            tmp = cached.with_suffix(".tmp")
            tmp.write_bytes(body)
            tmp.replace(cached)
        return body

    def fetch(self, pmcid: str) -> bytes:
        body = self._get(self.article_url(pmcid))
        head = body[:512].decode("utf-8", errors="replace").lower()
        # The service answers 200 with a plain-text error for absent or non-OA articles.
        if "<collection" not in head and "<?xml" not in head:
            if "open access" in head or "not available" in head:
                raise NotOpenAccess(f"{pmcid}: full text not available")
            raise NotFound(f"{pmcid}: {head.strip()[:80]}")
        return body

    def fetch_image(self, pmcid: str, graphic_ref: str) -> bytes:
        return self._get(self.image_url_template.format(pmcid=pmcid, file=graphic_ref))

    def search(self, query: str, retmax: int = 10000) -> list[str]:
        body = self._get(
            f"{self.search_base}/esearch.fcgi",
            params={"db": "pmc", "term": query, "retmax": retmax, "retmode": "json"},
        )
        try:
            ids = json.loads(body)["esearchresult"]["idlist"]
        except (ValueError, KeyError) as exc:
            raise NetworkError(f"unexpected search response: {exc}") from exc
        return [normalize_pmcid(i) for i in ids]


def _parse_retry_after(value: str | None, default: float = 1.0) -> float:
    if not value:
        return default
    try:
        return max(0.0, float(value))
    except ValueError:
        return default


Source = FixtureSource | LiveSource


def fetch_article(pmcid: str, source: Source) -> bytes:
    return source.fetch(normalize_pmcid(pmcid))


# --------------------------------------------------------------------------
# BioC parsing
# --------------------------------------------------------------------------


def _infons(elem: ET.Element) -> dict[str, str]:
    out: dict[str, str] = {}
    for inf in elem.findall("infon"):
        key = inf.get("key")
        if key and key not in out:
            out[key] = (inf.text or "").strip()
    return out


def _pub_date(infons: dict[str, str]) -> str | None:
    for key in ("pub-date", "date", "epub-date"):
        value = infons.get(key, "")
        if re.fullmatch(r"\d{4}(-\d{2}(-\d{2})?)?", value):
            return value
    year = infons.get("year", "")
    if not re.fullmatch(r"\d{4}", year):
        return None
    month, day = infons.get("month", ""), infons.get("day", "")
    if month.isdigit():
        if day.isdigit():
            return f"{year}-{int(month):02d}-{int(day):02d}"
        return f"{year}-{int(month):02d}"
    return year


def parse_bioc(data: bytes) -> ArticleDocument:
    """Parse one BioC XML article into an :class:`ArticleDocument`.

    FIG passages become figure blocks. Several FIG passages that share an
    ``id``/``file`` pair (title and caption split by the converter) form one
    figure whose caption is the ``fig_caption`` passage when present.
    """
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"document is not valid UTF-8: {exc}") from exc
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc

    doc = root if root.tag == "document" else root.find("document")
    if doc is None:
        raise MalformedXml("no <document> element")

    meta: dict[str, str] = dict(_infons(doc))
    passages: list[Passage] = []
    raw_fig: list[tuple[int, dict[str, str]]] = []
    prev_end = 0
    for elem in doc.findall("passage"):
        infons = _infons(elem)
        for k, v in infons.items():
            if v:
                meta.setdefault(k, v)
        text = unicodedata.normalize("NFC", normalize_whitespace(elem.findtext("text") or ""))
        if not text:
            continue
        offset_text = (elem.findtext("offset") or "").strip()
        if offset_text:
            try:
                offset = int(offset_text)
            except ValueError:
                raise MalformedXml(f"bad passage offset {offset_text!r}") from None
        else:
            offset = prev_end + 1 if passages else 0
        if passages and offset < prev_end:
            raise MalformedXml(f"passage offsets not increasing at offset {offset}")
        section = infons.get("section_type", "").upper()
        if section not in SECTION_TYPES:
            section = "OTHER"
        passages.append(Passage(section, text, offset))
        prev_end = offset + len(text)
        if section == "FIG":
            raw_fig.append((len(passages) - 1, infons))

    pmc_raw = meta.get("article-id_pmc") or (doc.findtext("id") or "").strip()
    if not pmc_raw:
        raise MissingRequiredField("document has no PMC identifier")
    try:
        pmcid = normalize_pmcid(pmc_raw)
    except InvalidIdentifier as exc:
        raise MissingRequiredField(str(exc)) from None

    title = next((p.text for p in passages if p.section_type == "TITLE"), None)
    figures, warnings = _build_figures(passages, raw_fig)
    return ArticleDocument(
        pmcid=pmcid,
        doi=meta.get("article-id_doi") or None,
        title=title,
        journal=meta.get("journal") or meta.get("journal-title") or meta.get("source") or None,
        pub_date=_pub_date(meta),
        license=meta.get("license") or None,
        passages=tuple(passages),
        figures=tuple(figures),
        warnings=tuple(warnings),
    )


def _build_figures(
    passages: Sequence[Passage], raw_fig: Iterable[tuple[int, dict[str, str]]]
) -> tuple[list[FigureBlock], list[str]]:
    groups: dict[tuple[str, str], list[tuple[int, dict[str, str]]]] = {}
    for index, infons in raw_fig:
        key = (infons.get("id", ""), infons.get("file", ""))
        if not key[0] and not key[1]:
            key = (f"#{index}", "")
        groups.setdefault(key, []).append((index, infons))

    figures: list[FigureBlock] = []
    warnings: list[str] = []
    seen: set[tuple[int, str]] = set()
    for ordinal, ((fig_id, file), members) in enumerate(groups.items(), start=1):
        caption_index = next(
            (i for i, inf in members if inf.get("type") == "fig_caption"), members[0][0]
        )
        number, raw_label = None, ""
        for i, inf in members:
            label = inf.get("label", "")
            m = _LABEL_RE.match(label) or _LABEL_RE.match(passages[i].text)
            if m:
                number, raw_label = int(m.group(2)), m.group(1)
                break
            if label and not raw_label:
                raw_label = label
        if number is None and fig_id:
            m = _DIGITS_RE.search(fig_id)
            if m and not fig_id.startswith("#"):
                number = int(m.group(1))
        if number is None or number < 1:
            number = ordinal
            if not raw_label:
                raw_label = passages[members[0][0]].text.split(".")[0][:40]
        graphic = file or (fig_id if not fig_id.startswith("#") else "")
        if not graphic:
            warnings.append(f"figure {number}: no graphic asset, skipped")
            continue
        if (number, graphic) in seen:
            warnings.append(f"figure {number}: duplicate graphic {graphic}, skipped")
            continue
        if any(f.figure_number == number for f in figures):
            warnings.append(f"figure {number}: multiple graphic assets")
        seen.add((number, graphic))
        figures.append(
            FigureBlock(
                figure_number=number,
                raw_label=raw_label,
                caption_text=passages[caption_index].text,
                graphic_ref=graphic,
                caption_passage_index=caption_index,
            )
        )
    return figures, warnings


# --------------------------------------------------------------------------
# corpus collection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuerySpec:
    query: str
    retmax: int = 10000


@dataclass(frozen=True)
class FetchStatus:
    pmcid: str
    status: str  # "ok" or "skipped"
    reason: str = ""


@dataclass
class Corpus:
    documents: list[ArticleDocument] = field(default_factory=list)
    statuses: list[FetchStatus] = field(default_factory=list)


def resolve_ids(request: Sequence[str] | QuerySpec, source: Source) -> list[str]:
    if isinstance(request, QuerySpec):
        if source.mode != "live":
            raise ConfigError("query resolution requires live mode")
        return source.search(request.query, request.retmax)
    if not request:
        raise ConfigError("empty article ID list")
    return list(request)


def fetch_with_retry(
    pmcid: str,
    source: Source,
    max_retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> bytes:
    attempt = 0
    while True:
        try:
            return fetch_article(pmcid, source)
        except RateLimited as exc:
            if attempt >= max_retries:
                raise
            attempt += 1
            log.info("pmcid=%s rate_limited retry_after=%.2f attempt=%d", pmcid, exc.retry_after, attempt)
            sleep(exc.retry_after)


def collect_corpus(
    request: Sequence[str] | QuerySpec,
    source: Source | None,
    max_retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> Corpus:
    """Fetch and parse every requested article; single-article failures are recorded, not raised."""
    if source is None:
        raise ConfigError("no article source configured")
    ids = resolve_ids(request, source)
    corpus = Corpus()
    for raw in ids:
        try:
            pmcid = normalize_pmcid(raw)
            doc = parse_bioc(fetch_with_retry(pmcid, source, max_retries, sleep))
        except IngestError as exc:
            corpus.statuses.append(FetchStatus(str(raw), "skipped", f"{type(exc).__name__}: {exc}"))
            continue
        corpus.documents.append(doc)
        corpus.statuses.append(FetchStatus(pmcid, "ok"))
    return corpus
