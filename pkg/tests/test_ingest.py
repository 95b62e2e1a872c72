from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from figmine.errors import ConfigError
from figmine.ingest import (
    API_BASE_ENV,
    ArticleDocument,
    EncodingError,
    FigureBlock,
    FixtureSource,
    InvalidIdentifier,
    LiveSource,
    MalformedXml,
    MissingRequiredField,
    NotFound,
    NotOpenAccess,
    Passage,
    QuerySpec,
    RateLimited,
    RateLimiter,
    collect_corpus,
    fetch_article,
    fetch_with_retry,
    normalize_pmcid,
    parse_bioc,
    resolve_ids,
)
from figmine.synthetic import bioc_xml

MINIMAL = b"""<?xml version="1.0" encoding="UTF-8"?>
<collection><source>PMC</source><document><id>7100000</id>
  <passage>
    <infon key="section_type">TITLE</infon><infon key="type">front</infon>
    <infon key="article-id_pmc">7100000</infon><infon key="article-id_doi">10.1000/xyz</infon>
    <infon key="journal">J Test Imaging</infon><infon key="year">2020</infon>
    <infon key="license">CC BY</infon>
    <offset>0</offset><text>A  case   of pneumonia</text>
  </passage>
  <passage>
    <infon key="section_type">CASE</infon><infon key="type">paragraph</infon>
    <offset>23</offset><text>Chest CT is shown in Figure 1.</text>
  </passage>
  <passage>
    <infon key="section_type">FIG</infon><infon key="type">fig_caption</infon>
    <infon key="id">fig1</infon><infon key="file">pmc7100000_f1.jpg</infon>
    <offset>54</offset><text>Figure 1. Axial CT with bilateral opacities.</text>
  </passage>
</document></collection>
"""


def test_minimal_document_by_hand():
    doc = parse_bioc(MINIMAL)
    assert doc.pmcid == "PMC7100000"
    assert doc.doi == "10.1000/xyz"
    assert doc.journal == "J Test Imaging"
    assert doc.pub_date == "2020"
    assert doc.license == "CC BY"
    assert doc.title == "A case of pneumonia"
    assert [p.section_type for p in doc.passages] == ["TITLE", "CASE", "FIG"]
    assert [p.offset for p in doc.passages] == [0, 23, 54]
    assert doc.figures == (
        FigureBlock(
            figure_number=1,
            raw_label="Figure 1",
            caption_text="Figure 1. Axial CT with bilateral opacities.",
            graphic_ref="pmc7100000_f1.jpg",
            caption_passage_index=2,
        ),
    )


def test_no_figures_gives_empty_list():
    doc = parse_bioc(bioc_xml("PMC1", {}, [("INTRO", "Nothing to see.", {})]))
    assert doc.figures == ()
    assert doc.title is None


def test_truncated_xml_is_malformed():
    with pytest.raises(MalformedXml):
        parse_bioc(MINIMAL[: len(MINIMAL) // 2])


def test_non_utf8_is_encoding_error():
    with pytest.raises(EncodingError):
        parse_bioc(MINIMAL.replace(b"pneumonia", b"pneum\xf6nia"))


def test_missing_pmcid():
    data = b"<collection><document><passage><offset>0</offset><text>x</text></passage></document></collection>"
    with pytest.raises(MissingRequiredField):
        parse_bioc(data)


def test_decreasing_offsets_rejected():
    data = MINIMAL.replace(b"<offset>54</offset>", b"<offset>10</offset>")
    with pytest.raises(MalformedXml):
        parse_bioc(data)


def test_unknown_section_falls_back_to_other():
    doc = parse_bioc(bioc_xml("PMC2", {}, [("WEIRD", "Some text.", {})]))
    assert doc.passages[0].section_type == "OTHER"


def test_caption_is_nfc_normalized():
    decomposed = "Figure 1. Cafe\u0301 lungs"
    doc = parse_bioc(bioc_xml("PMC3", {}, [("FIG", decomposed, {"type": "fig_caption", "file": "a.png"})]))
    assert doc.figures[0].caption_text == "Figure 1. Caf\u00e9 lungs"


def test_title_and_caption_passages_form_one_figure():
    passages = [
        ("FIG", "Figure 2", {"type": "fig_title_caption", "id": "f2", "file": "f2.png"}),
        ("FIG", "CT of the chest.", {"type": "fig_caption", "id": "f2", "file": "f2.png"}),
    ]
    doc = parse_bioc(bioc_xml("PMC4", {}, passages))
    assert len(doc.figures) == 1
    fig = doc.figures[0]
    assert fig.figure_number == 2
    assert fig.caption_text == "CT of the chest."
    assert fig.caption_passage_index == 1


def test_unparseable_label_numbered_by_order():
    passages = [
        ("FIG", "Graphical abstract", {"type": "fig_caption", "id": "ga", "file": "ga.png"}),
        ("FIG", "Figure 1. Lungs.", {"type": "fig_caption", "id": "f1", "file": "f1.png"}),
    ]
    doc = parse_bioc(bioc_xml("PMC5", {}, passages))
    assert [(f.figure_number, f.raw_label) for f in doc.figures] == [(1, "Graphical abstract"), (1, "Figure 1")]
    assert any("multiple graphic" in w for w in doc.warnings)


def test_duplicate_graphic_skipped():
    passages = [
        ("FIG", "Figure 1. A.", {"type": "fig_caption", "id": "f1", "file": "f1.png"}),
        ("FIG", "Figure 1. A again.", {"type": "fig_caption", "id": "f1b", "file": "f1.png"}),
    ]
    doc = parse_bioc(bioc_xml("PMC6", {}, passages))
    assert len(doc.figures) == 1
    assert any("duplicate" in w for w in doc.warnings)


def test_caption_equals_exactly_one_fig_passage(demo_config):
    corpus = demo_config.parent / "corpus"
    for path in sorted(corpus.glob("*.xml")):
        doc = parse_bioc(path.read_bytes())
        for fig in doc.figures:
            matches = [p for p in doc.passages if p.section_type == "FIG" and p.text == fig.caption_text]
            assert len(matches) == 1
            assert 0 <= fig.caption_passage_index < len(doc.passages)


def test_json_round_trip_and_determinism():
    doc = parse_bioc(MINIMAL)
    assert ArticleDocument.from_json(doc.to_json()) == doc
    assert parse_bioc(MINIMAL) == doc


@given(
    st.lists(
        st.tuples(
            st.sampled_from(["INTRO", "CASE", "FIG", "RESULTS", "TABLE"]),
            st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=40),
        ),
        max_size=6,
    )
)
def test_round_trip_property(items):
    passages = [(s, t, {"type": "fig_caption", "file": f"{i}.png"} if s == "FIG" else {}) for i, (s, t) in enumerate(items)]
    doc = parse_bioc(bioc_xml("PMC77", {"journal": "J"}, passages))
    assert ArticleDocument.from_json(doc.to_json()) == doc
    ends = [p.offset + len(p.text) for p in doc.passages]
    assert all(nxt.offset >= end for nxt, end in zip(doc.passages[1:], ends))
    assert all(p.text == " ".join(p.text.split()) and p.text for p in doc.passages)


@pytest.mark.parametrize(
    "raw, expected",
    [("PMC123", "PMC123"), ("123", "PMC123"), (" pmc42 ", "PMC42")],
)
def test_normalize_pmcid(raw, expected):
    assert normalize_pmcid(raw) == expected


@pytest.mark.parametrize("raw", ["", "PMC", "PMID123", "PMC12a"])
def test_invalid_pmcid(raw):
    with pytest.raises(InvalidIdentifier):
        normalize_pmcid(raw)


def test_passage_and_figure_models_are_values():
    assert Passage("CASE", "x", 0) == Passage("CASE", "x", 0)


# --------------------------------------------------------------------------
# sources
# --------------------------------------------------------------------------


def test_fixture_passthrough_and_missing(tmp_path):
    (tmp_path / "PMC7100000.xml").write_bytes(MINIMAL)
    source = FixtureSource(tmp_path)
    assert fetch_article("PMC7100000", source) == MINIMAL
    with pytest.raises(NotFound):
        fetch_article("PMC9999999999", source)
    with pytest.raises(ConfigError, match="query resolution requires live mode"):
        resolve_ids(QuerySpec("influenza"), source)


def test_collect_corpus_records_failures(tmp_path):
    for n in (1, 2):
        (tmp_path / f"PMC{n}.xml").write_bytes(bioc_xml(f"PMC{n}", {}, [("INTRO", "text", {})]))
    corpus = collect_corpus(["PMC1", "PMC3", "2"], FixtureSource(tmp_path))
    assert [d.pmcid for d in corpus.documents] == ["PMC1", "PMC2"]
    assert [s.status for s in corpus.statuses] == ["ok", "skipped", "ok"]
    assert corpus.statuses[1].reason.startswith("NotFound")


def test_collect_corpus_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        collect_corpus([], FixtureSource(tmp_path))
    with pytest.raises(ConfigError):
        collect_corpus(["PMC1"], None)


class _Stub(BaseHTTPRequestHandler):
    routes: dict[str, list[tuple[int, dict[str, str], bytes]]] = {}
    hits: list[str] = []

    def do_GET(self):  # noqa: N802
        path = self.path.split("?")[0]
        type(self).hits.append(self.path)
        script = type(self).routes.get(path) or [(404, {}, b"nope")]
        status, headers, body = script.pop(0) if len(script) > 1 else script[0]
        self.send_response(status)
        for k, v in headers.items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Stub.routes = {}
    _Stub.hits = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", _Stub
    server.shutdown()
    server.server_close()


def _live(base, **kw):
    return LiveSource(api_base=base, search_base=base, min_interval=0.0, timeout=5, **kw)


def test_live_429_carries_retry_after(stub_server):
    base, stub = stub_server
    stub.routes["/BioC_xml/PMC7100000/unicode"] = [(429, {"Retry-After": "2.5"}, b"slow down")]
    with pytest.raises(RateLimited) as info:
        fetch_article("PMC7100000", _live(base))
    assert info.value.retry_after == 2.5


def test_live_retry_then_success(stub_server):
    base, stub = stub_server
    stub.routes["/BioC_xml/PMC7100000/unicode"] = [(429, {"Retry-After": "3"}, b""), (200, {}, MINIMAL)]
    slept = []
    data = fetch_with_retry("PMC7100000", _live(base), max_retries=2, sleep=slept.append)
    assert data == MINIMAL
    assert slept == [3.0]


def test_live_status_mapping(stub_server):
    base, stub = stub_server
    stub.routes["/BioC_xml/PMC2/unicode"] = [(403, {}, b"")]
    stub.routes["/BioC_xml/PMC3/unicode"] = [(200, {}, b"[Error] : No result can be found.")]
    stub.routes["/BioC_xml/PMC4/unicode"] = [(200, {}, b"This article is not in the open access subset")]
    source = _live(base)
    with pytest.raises(NotFound):
        source.fetch("PMC1")
    with pytest.raises(NotOpenAccess):
        source.fetch("PMC2")
    with pytest.raises(NotFound):
        source.fetch("PMC3")
    with pytest.raises(NotOpenAccess):
        source.fetch("PMC4")


def test_live_cache_avoids_refetch(stub_server, tmp_path):
    base, stub = stub_server
    stub.routes["/BioC_xml/PMC7100000/unicode"] = [(200, {}, MINIMAL)]
    assert _live(base, cache_dir=tmp_path).fetch("PMC7100000") == MINIMAL
    assert _live(base, cache_dir=tmp_path).fetch("PMC7100000") == MINIMAL
    assert len(stub.hits) == 1


def test_query_resolution(stub_server):
    base, stub = stub_server
    body = json.dumps({"esearchresult": {"idlist": ["7100000", "7200000"]}}).encode()
    stub.routes["/esearch.fcgi"] = [(200, {}, body)]
    ids = resolve_ids(QuerySpec("influenza[Title] AND open access[Filter]"), _live(base))
    assert ids == ["PMC7100000", "PMC7200000"]
    assert "db=pmc" in stub.hits[0]


def test_env_var_overrides_base(monkeypatch):
    monkeypatch.setenv(API_BASE_ENV, "http://example.invalid/api/")
    assert LiveSource().article_url("PMC1") == "http://example.invalid/api/BioC_xml/PMC1/unicode"


def test_rate_limiter_spacing():
    now = [0.0]
    slept = []

    def sleep(dt):
        slept.append(round(dt, 9))
        now[0] += dt

    limiter = RateLimiter(0.35, clock=lambda: now[0], sleep=sleep)
    limiter.wait()
    now[0] += 0.1
    limiter.wait()
    now[0] += 1.0
    limiter.wait()
    assert slept == [0.25]
