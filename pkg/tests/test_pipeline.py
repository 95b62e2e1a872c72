from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from figmine.errors import ConfigError
from figmine.manifest import read_manifest, validate_manifest
from figmine.pipeline import (
    OutputNotWritable,
    PipelineConfig,
    config_from_mapping,
    load_cohort,
    load_config,
    merge_config,
    run_pipeline,
)
from figmine.synthetic import DEMO_ABSENT, DEMO_TRUTH, write_demo_corpus


@pytest.fixture(scope="module")
def demo_run(demo_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(load_config(demo_config, {"output": {"dir": out}}))


def test_demo_counts(demo_run):
    s = demo_run.summary
    for key, value in DEMO_TRUTH.items():
        assert s[key] == value, key
    (skip,) = s["skipped"]
    assert skip["pmcid"] == DEMO_ABSENT and skip["reason"].startswith("NotFound")
    assert s["articles_in_cohort"] == 3


def test_manifest_is_valid_and_filtered(demo_run):
    jsonl = demo_run.outputs["manifest_jsonl"]
    report = validate_manifest(jsonl)
    assert report.ok and report.entries == DEMO_TRUTH["subfigures_after_filter"]
    assert read_manifest(demo_run.outputs["manifest_csv"]) == read_manifest(jsonl)
    for e in demo_run.entries:
        assert min(e.width, e.height) >= 224
        assert (jsonl.parent / e.image_path).is_file()
        assert e.doi and e.journal == "Demo Journal of Radiology"


def test_entries_carry_text(demo_run):
    fig2 = [e for e in demo_run.entries if e.pmcid == "PMC1000001" and e.figure_number == 2]
    (entry,) = fig2
    assert entry.caption.startswith("Figure 2.")
    assert "Figure 2" in entry.referring_text
    assert any(m.startswith("ground-glass opacification:positive") for m in entry.mentions)
    assert any(m.startswith("effusion:negated") for m in entry.mentions)


def test_mentions_file_feeds_cohort_loader(demo_run):
    label, units = load_cohort(demo_run.outputs["mentions"])
    assert label == "covid19" and len(units) == 3
    assert all({"fever", "cough", "ground-glass opacification"} <= u for u in units)
    assert all("diarrhea" not in u for u in units)


def test_single_cohort_report(demo_run):
    report = demo_run.report
    assert set(report["cohorts"]) == {"A"} and report["cohorts"]["A"]["n"] == 3
    fever = next(t for t in report["terms"] if t["term"] == "fever")
    assert fever["count_a"] == 3 and fever["prop_a"] == 1.0


def test_rerun_is_byte_identical(demo_config, demo_run, tmp_path):
    again = run_pipeline(load_config(demo_config, {"output": {"dir": tmp_path / "again"}, "run": {"workers": 1}}))
    for key in ("manifest_jsonl", "manifest_csv", "mentions", "report", "symptoms", "findings", "summary"):
        assert again.outputs[key].read_bytes() == demo_run.outputs[key].read_bytes(), key
    for e in again.entries:
        a = (again.outputs["manifest_jsonl"].parent / e.image_path).read_bytes()
        b = (demo_run.outputs["manifest_jsonl"].parent / e.image_path).read_bytes()
        assert a == b


def test_comparison_cohort(demo_run, tmp_path):
    flu_cfg = write_demo_corpus(tmp_path / "flu", seed=1, cohort="influenza")
    result = run_pipeline(
        load_config(flu_cfg, {"output": {"compare_with": demo_run.outputs["mentions"], "compare_label": "COVID-19"}})
    )
    cohorts = result.report["cohorts"]
    assert cohorts["A"] == {"label": "influenza", "n": 3} and cohorts["B"] == {"label": "COVID-19", "n": 3}
    terms = {t["term"]: t for t in result.report["terms"]}
    assert terms["ground-glass opacification"]["count_a"] == 0 and terms["ground-glass opacification"]["count_b"] == 3
    assert terms["infiltration"]["count_a"] == 3 and terms["infiltration"]["count_b"] == 0
    assert terms["dyspnea"]["count_a"] == 0
    # 3 against 0 of 3 is not significant
    assert terms["infiltration"]["p_value"] == pytest.approx(0.1)


def test_pretrained_model_path(demo_config, demo_run, tmp_path):
    model = demo_run.outputs["manifest_jsonl"].parent / "model.json"
    cfg = load_config(demo_config, {"output": {"dir": tmp_path / "m"}, "classifier": {"model": model}})
    assert cfg.training_dir is not None  # file value kept, model wins
    result = run_pipeline(cfg)
    assert result.summary["modalities"] == DEMO_TRUTH["modalities"]


def test_empty_id_list_is_config_error(demo_config, tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(load_config(demo_config, {"articles": {"ids": []}, "output": {"dir": tmp_path}}))


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({"output": {"dir": "o"}, "bogus": {}}, "section"),
        ({"output": {"dir": "o", "colour": "red"}}, "colour"),
        ({"output": {"dir": "o"}, "source": {"fixture_dir": "c"}, "articles": {"query": "covid"}, "classifier": {"model": "m"}}, "live"),
        ({"output": {"dir": "o"}, "source": {"fixture_dir": "c"}, "articles": {"ids": ["PMC1"], "ids_file": "x"}, "classifier": {"model": "m"}}, "exactly one"),
        ({"output": {"dir": "o"}, "source": {"fixture_dir": "c"}, "articles": {"ids": ["PMC1"]}}, "model"),
        ({"output": {"dir": "o"}, "source": {"fixture_dir": "c"}, "articles": {"ids": ["PMC1"]}, "classifier": {"model": "m"}, "text": {"mine_modalities": ["MRI"]}}, "MRI"),
    ],
)
def test_config_errors(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_mapping(data).validate()


def test_relative_paths_follow_config_file(demo_config):
    cfg = load_config(demo_config)
    assert cfg.fixture_dir == demo_config.parent / "corpus"
    assert cfg.output_dir == demo_config.parent / "out"


def test_override_replaces_article_source():
    merged = merge_config({"articles": {"ids_file": "x"}}, {"articles": {"ids": ["PMC1"], "query": None}})
    assert merged["articles"] == {"ids": ["PMC1"]}


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")


def test_bad_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[output\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output(demo_config, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(OutputNotWritable):
        run_pipeline(load_config(demo_config, {"output": {"dir": locked / "out"}}))


def test_output_is_a_file(demo_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputNotWritable):
        run_pipeline(load_config(demo_config, {"output": {"dir": blocker}}))


def test_worker_count_default():
    cfg = PipelineConfig(output_dir=Path("o"))
    assert cfg.worker_count >= 1


def test_summary_file_matches(demo_run):
    on_disk = json.loads(demo_run.outputs["summary"].read_text(encoding="utf-8"))
    assert on_disk == demo_run.summary
