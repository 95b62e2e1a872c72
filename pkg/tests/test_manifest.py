from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from figmine.manifest import (
    FIELD_NAMES,
    ManifestEntry,
    ManifestIoError,
    ManifestSchemaError,
    check_entry,
    emit_manifest,
    read_manifest,
    validate_manifest,
)
from figmine.raster import RasterImage


def _entry(**kw) -> ManifestEntry:
    base = dict(
        pmcid="PMC1",
        doi="10.1/x",
        title="A case",
        journal="J",
        pub_date="2020",
        license="CC BY",
        figure_number=1,
        subfigure_index=1,
        image_path="images/PMC1_fig1_1.png",
        width=240,
        height=230,
        modality="CT",
        prob_ct=0.5,
        prob_cxr=0.3,
        prob_other=0.2,
        caption="Chest CT.",
        referring_text="As shown in Fig. 1.",
        mentions=("fever:positive:caption",),
    )
    base.update(kw)
    return ManifestEntry(**base)


def _with_image(tmp_path, entry: ManifestEntry) -> ManifestEntry:
    target = tmp_path / entry.image_path
    target.parent.mkdir(parents=True, exist_ok=True)
    RasterImage(np.zeros((entry.height, entry.width, 3), np.uint8)).save_png(target)
    return entry


def test_field_order():
    assert FIELD_NAMES[:3] == ("pmcid", "doi", "title")
    assert FIELD_NAMES[-3:] == ("caption", "referring_text", "mentions")


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_round_trip_awkward_text(tmp_path, fmt):
    entries = [
        _entry(caption='Panel "A", left;\nright, "B"', referring_text="x\n\ny, z"),
        _entry(subfigure_index=2, doi=None, title="Ünïcode – title", mentions=()),
    ]
    path = emit_manifest(entries, tmp_path / f"m.{fmt}", fmt)
    assert read_manifest(path) == entries


def test_empty_manifest(tmp_path):
    csv_path = emit_manifest([], tmp_path / "m.csv", "csv")
    assert csv_path.read_text(encoding="utf-8").strip() == ",".join(FIELD_NAMES)
    assert read_manifest(csv_path) == []
    jsonl_path = emit_manifest([], tmp_path / "m.jsonl")
    assert jsonl_path.read_text() == ""
    assert validate_manifest(jsonl_path).ok


def test_empty_optionals_become_none():
    assert _entry(doi="").doi is None
    with pytest.raises(ValueError):
        _entry(mentions=("a;b",))


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_manifest([], tmp_path / "m.xml", "xml")  # type: ignore[arg-type]


def test_unwritable(tmp_path):
    with pytest.raises(ManifestIoError):
        emit_manifest([_entry()], tmp_path / "missing" / "m.jsonl")


def test_pristine_validates(tmp_path):
    entries = [_with_image(tmp_path, _entry()), _with_image(tmp_path, _entry(subfigure_index=2, image_path="images/b.png"))]
    report = validate_manifest(emit_manifest(entries, tmp_path / "m.jsonl"))
    assert report.ok and report.entries == 2


def test_below_filter_is_reported(tmp_path):
    small = _with_image(tmp_path, _entry(height=200, image_path="images/small.png"))
    report = validate_manifest(emit_manifest([small], tmp_path / "m.jsonl"))
    assert not report.ok
    assert any("below 224 filter" in v.message and v.line == 1 for v in report.violations)


def test_duplicate_lines_listed(tmp_path):
    e = _with_image(tmp_path, _entry())
    report = validate_manifest(emit_manifest([e, e], tmp_path / "m.jsonl"))
    (v,) = report.violations
    assert "lines 1 and 2" in v.message and "duplicate" in v.message


@pytest.mark.parametrize(
    "change, fragment",
    [
        (dict(modality="MRI"), "modality"),
        (dict(prob_ct=0.6), "sum"),
        (dict(prob_ct=-0.1, prob_cxr=0.9), "out of range"),
        (dict(modality="Other"), "most probable"),
        (dict(figure_number=0), ">= 1"),
        (dict(image_path="images/nope.png"), "missing"),
    ],
)
def test_content_violations(tmp_path, change, fragment):
    entry = replace(_with_image(tmp_path, _entry()), **change)
    problems = check_entry(entry, tmp_path)
    assert any(fragment in p for p in problems), problems


def test_dimension_mismatch_with_file(tmp_path):
    entry = _with_image(tmp_path, _entry())
    assert any("file is 240x230" in p for p in check_entry(replace(entry, width=300), tmp_path))
    assert check_entry(replace(entry, width=300), tmp_path, check_files=False) == []


def test_undecodable_image(tmp_path):
    entry = _entry()
    (tmp_path / "images").mkdir()
    (tmp_path / entry.image_path).write_bytes(b"garbage")
    assert any("decode" in p for p in check_entry(entry, tmp_path))


def test_schema_errors_carry_line_numbers(tmp_path):
    good = json.dumps(_entry().to_dict())
    path = tmp_path / "m.jsonl"
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(ManifestSchemaError) as err:
        validate_manifest(path)
    assert err.value.line == 2

    record = _entry().to_dict()
    del record["caption"]
    path.write_text(good + "\n" + good + "\n" + json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(ManifestSchemaError) as err:
        read_manifest(path)
    assert err.value.line == 3


def test_csv_bad_number(tmp_path):
    path = emit_manifest([_entry()], tmp_path / "m.csv", "csv")
    text = path.read_text(encoding="utf-8").replace(",240,", ",wide,")
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ManifestSchemaError) as err:
        read_manifest(path)
    assert err.value.line == 2


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestIoError):
        validate_manifest(tmp_path / "none.jsonl")


safe_text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), max_size=40)


@settings(max_examples=60, deadline=None)
@given(
    caption=safe_text,
    title=st.none() | safe_text.filter(bool),
    mentions=st.lists(st.text("abc:- ", min_size=1, max_size=12), max_size=4),
    p=st.floats(0, 1),
)
def test_round_trip_property(tmp_path_factory, caption, title, mentions, p):
    d = tmp_path_factory.mktemp("rt")
    entry = _entry(caption=caption, title=title, mentions=tuple(mentions), prob_ct=p, prob_cxr=1 - p, prob_other=0.0)
    for fmt in ("jsonl", "csv"):
        assert read_manifest(emit_manifest([entry], d / f"m.{fmt}", fmt)) == [entry]
