"""End-to-end run: ingest, link, split, filter, classify, mine, report.

Configuration comes from a sectioned TOML file::

    [source]      mode, fixture_dir, api_base, search_base, min_interval, max_retries
    [articles]    ids | ids_file | query, retmax
    [split]       uniformity_threshold, min_gutter, max_depth, min_panel, color_tolerance
    [classifier]  model | training_dir, test_dir, learning_rate, batch_size, epochs, validation_fraction
    [text]        lexicon, rules_dir, scope_window, mine_modalities
    [output]      dir, cohort, compare_with, compare_label
    [run]         seed, workers

Relative paths are resolved against the config file's directory. Command-line
flags are merged on top of the file with the same section/key shape.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from figmine.classifier import (
    CLASSES,
    DegenerateDataset,
    Hyperparams,
    ModelParams,
    extract_features,
    predict,
    softmax_forward,
    train_arrays,
)
from figmine.errors import ConfigError, FigmineError
from figmine.ingest import (
    DEFAULT_SEARCH_BASE,
    FixtureSource,
    IngestError,
    LiveSource,
    QuerySpec,
    Source,
    fetch_with_retry,
    normalize_pmcid,
    parse_bioc,
    resolve_ids,
)
from figmine.linker import LinkedFigure, link_figures
from figmine.manifest import REFERRING_SEPARATOR, ManifestEntry, emit_manifest
from figmine.raster import ImageDecodeError, RasterImage
from figmine.report import write_report
from figmine.splitter import SplitParams, crop, filter_min_size, split_compound
from figmine.stats import frequency_comparison, multiclass_metrics
from figmine.textmine import (
    Lexicon,
    Mention,
    NegationRules,
    load_default_lexicon,
    load_lexicon,
    mine_linked_figure,
    summarize,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = frozenset({".png", ".jpg", ".jpeg", ".gif", ".tif", ".tiff", ".bmp"})


class OutputNotWritable(FigmineError, OSError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: Path
    mode: str = "fixture"
    fixture_dir: Path | None = None
    api_base: str | None = None
    search_base: str = DEFAULT_SEARCH_BASE
    min_interval: float = 0.35
    max_retries: int = 3
    ids: tuple[str, ...] | None = None
    ids_file: Path | None = None
    query: str | None = None
    retmax: int = 10000
    split: SplitParams = field(default_factory=SplitParams)
    model_path: Path | None = None
    training_dir: Path | None = None
    test_dir: Path | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    lexicon_path: Path | None = None
    rules_dir: Path | None = None
    scope_window: int = 6
    mine_modalities: tuple[str, ...] = ("CT", "CXR")
    cohort: str = "cohort"
    compare_with: Path | None = None
    compare_label: str | None = None
    seed: int = 0
    workers: int | None = None

    def validate(self) -> None:
        if self.mode not in ("fixture", "live"):
            raise ConfigError(f"source mode must be 'fixture' or 'live', got {self.mode!r}")
        if self.mode == "fixture" and self.fixture_dir is None:
            raise ConfigError("fixture mode requires source.fixture_dir")
        given = [name for name in ("ids", "ids_file", "query") if getattr(self, name) is not None]
        if len(given) != 1:
            raise ConfigError(f"exactly one of articles.ids, ids_file, query is required (got {given or 'none'})")
        if self.query is not None and self.mode != "live":
            raise ConfigError("query resolution requires live mode")
        if self.ids is not None and not self.ids:
            raise ConfigError("empty article ID list")
        if self.model_path is None and self.training_dir is None:
            raise ConfigError("classifier needs a model path or a training directory")
        unknown = set(self.mine_modalities) - set(CLASSES)
        if unknown:
            raise ConfigError(f"unknown modalities in text.mine_modalities: {sorted(unknown)}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("run.workers must be >= 1")

    @property
    def worker_count(self) -> int:
        return self.workers or os.cpu_count() or 1


_SCHEMA: dict[str, dict[str, str]] = {
    "source": {
        "mode": "mode",
        "fixture_dir": "fixture_dir",
        "api_base": "api_base",
        "search_base": "search_base",
        "min_interval": "min_interval",
        "max_retries": "max_retries",
    },
    "articles": {"ids": "ids", "ids_file": "ids_file", "query": "query", "retmax": "retmax"},
    "split": {name: name for name in SplitParams.__dataclass_fields__},
    "classifier": {
        "model": "model_path",
        "training_dir": "training_dir",
        "test_dir": "test_dir",
        "learning_rate": "learning_rate",
        "batch_size": "batch_size",
        "epochs": "epochs",
        "validation_fraction": "validation_fraction",
    },
    "text": {
        "lexicon": "lexicon_path",
        "rules_dir": "rules_dir",
        "scope_window": "scope_window",
        "mine_modalities": "mine_modalities",
    },
    "output": {"dir": "output_dir", "cohort": "cohort", "compare_with": "compare_with", "compare_label": "compare_label"},
    "run": {"seed": "seed", "workers": "workers"},
}
_PATHS = {"fixture_dir", "ids_file", "model_path", "training_dir", "test_dir", "lexicon_path", "rules_dir", "output_dir", "compare_with"}
_ARTICLE_SOURCES = {"ids", "ids_file", "query"}
_HYPER = {"learning_rate", "batch_size", "epochs", "validation_fraction"}


def merge_config(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Section-wise merge; ``None`` values in ``overrides`` leave the base untouched.

    An overriding article source (ids, ids_file or query) replaces the base's.
    """
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in base.items()}
    new_source = {k for k, v in overrides.get("articles", {}).items() if v is not None} & _ARTICLE_SOURCES
    if new_source:
        for key in _ARTICLE_SOURCES:
            out.get("articles", {}).pop(key, None)
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                out.setdefault(section, {})[key] = value
    return out


def config_from_mapping(data: Mapping[str, Any], base_dir: str | Path = ".") -> PipelineConfig:
    base = Path(base_dir)
    flat: dict[str, Any] = {}
    for section, values in data.items():
        if section not in _SCHEMA or not isinstance(values, Mapping):
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in values.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            flat[_SCHEMA[section][key]] = value
    if "output_dir" not in flat:
        raise ConfigError("output.dir is required")
    for name in _PATHS & flat.keys():
        flat[name] = base / Path(flat[name]).expanduser()
    split = {k: flat.pop(k) for k in list(flat) if k in SplitParams.__dataclass_fields__}
    hyper = {k: flat.pop(k) for k in list(flat) if k in _HYPER}
    try:
        seed = int(flat.get("seed", 0))
        cfg = PipelineConfig(
            split=SplitParams(**split),
            hyperparams=Hyperparams(seed=seed, **hyper),
            **{k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()},
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        base_dir = path.parent
    # flag values are relative to the working directory, file values to the file
    resolved = {
        s: {k: (str(Path(v).resolve()) if _SCHEMA[s].get(k) in _PATHS and v is not None else v) for k, v in vals.items()}
        for s, vals in (overrides or {}).items()
    }
    return config_from_mapping(merge_config(data, resolved), base_dir)


def read_id_file(path: Path) -> list[str]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read ID list {path}: {exc}") from exc
    return [ln.split("#", 1)[0].strip() for ln in lines if ln.split("#", 1)[0].strip()]


def make_source(cfg: PipelineConfig) -> Source:
    if cfg.mode == "fixture":
        assert cfg.fixture_dir is not None
        if not cfg.fixture_dir.is_dir():
            raise ConfigError(f"fixture directory not found: {cfg.fixture_dir}")
        return FixtureSource(cfg.fixture_dir)
    return LiveSource(
        api_base=cfg.api_base,
        search_base=cfg.search_base,
        min_interval=cfg.min_interval,
        cache_dir=cfg.output_dir / "cache",
    )


def requested_ids(cfg: PipelineConfig, source: Source) -> list[str]:
    if cfg.query is not None:
        return resolve_ids(QuerySpec(cfg.query, cfg.retmax), source)
    ids = list(cfg.ids) if cfg.ids is not None else read_id_file(cfg.ids_file)  # type: ignore[arg-type]
    return resolve_ids(ids, source)


def ensure_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=directory):
            pass
    except OSError as exc:
        raise OutputNotWritable(f"output directory not writable: {directory}: {exc}") from exc


# --------------------------------------------------------------------------
# classifier resources
# --------------------------------------------------------------------------


def iter_labelled_images(directory: Path, classes: Iterable[str] = CLASSES) -> list[tuple[Path, str]]:
    """``<dir>/<class>/<image>`` pairs in sorted order."""
    out = []
    for cls in classes:
        sub = directory / cls
        if sub.is_dir():
            out += [(p, cls) for p in sorted(sub.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    return out


def feature_matrix(items: list[tuple[Path, str]]) -> tuple[np.ndarray, list[str]]:
    feats = [extract_features(RasterImage.open(p)) for p, _ in items]
    return np.stack(feats) if feats else np.zeros((0, 0)), [c for _, c in items]


def train_from_directory(directory: Path, hp: Hyperparams) -> ModelParams:
    items = iter_labelled_images(directory)
    if not items:
        raise ConfigError(f"no training images under {directory}/{{{','.join(CLASSES)}}}")
    x, y = feature_matrix(items)
    try:
        return train_arrays(x, y, hp).params
    except DegenerateDataset as exc:
        raise ConfigError(f"cannot train from {directory}: {exc}") from exc


def evaluate_directory(model: ModelParams, directory: Path) -> dict[str, Any]:
    items = iter_labelled_images(directory, model.class_list)
    if not items:
        raise ConfigError(f"no test images under {directory}")
    x, y_true = feature_matrix(items)
    preds = [softmax_forward(model, row) for row in x]
    metrics = multiclass_metrics(y_true, [p.label for p in preds], model.class_list, [p.probs for p in preds])
    return {"n_test": len(items), "metrics": {k: m.as_dict() for k, m in metrics.items()}}


def load_model(cfg: PipelineConfig) -> ModelParams:
    if cfg.training_dir is not None:
        return train_from_directory(cfg.training_dir, cfg.hyperparams)
    assert cfg.model_path is not None
    try:
        return ModelParams.load(cfg.model_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load model {cfg.model_path}: {exc}") from exc


def load_text_resources(cfg: PipelineConfig) -> tuple[Lexicon, NegationRules]:
    try:
        lexicon = load_lexicon(cfg.lexicon_path) if cfg.lexicon_path else load_default_lexicon()
        rules = (
            NegationRules.from_directory(cfg.rules_dir, cfg.scope_window)
            if cfg.rules_dir
            else NegationRules.default(cfg.scope_window)
        )
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load text resources: {exc}") from exc
    return lexicon, rules


# --------------------------------------------------------------------------
# per-article work
# --------------------------------------------------------------------------


@dataclass
class ArticleResult:
    pmcid: str
    status: str = "ok"  # "ok" or "skipped"
    reason: str = ""
    figures: int = 0
    figures_failed: int = 0
    subfigures_before_filter: int = 0
    subfigures_after_filter: int = 0
    modalities: dict[str, int] = field(default_factory=dict)
    entries: list[ManifestEntry] = field(default_factory=list)
    mentions: list[Mention] = field(default_factory=list)
    in_cohort: bool = False

    def log_line(self) -> str:
        mods = ",".join(f"{k}:{v}" for k, v in sorted(self.modalities.items()))
        return (
            f"pmcid={self.pmcid} status={self.status} figures={self.figures} "
            f"figures_failed={self.figures_failed} subfigures={self.subfigures_before_filter}"
            f"/{self.subfigures_after_filter} modalities={mods or '-'} mentions={len(self.mentions)}"
            + (f" reason={self.reason!r}" if self.reason else "")
        )


@dataclass(frozen=True)
class _Context:
    cfg: PipelineConfig
    source: Source
    model: ModelParams
    lexicon: Lexicon
    rules: NegationRules
    image_dir: Path


def image_name(pmcid: str, figure_number: int, index: int) -> str:
    return f"{pmcid}_fig{figure_number}_{index}.png"


def _process_figure(lf: LinkedFigure, ctx: _Context, result: ArticleResult) -> None:
    fig = lf.figure
    mentions = mine_linked_figure(lf, ctx.lexicon, ctx.rules)
    encoded = tuple(s.encode() for s in summarize(mentions))
    try:
        image = RasterImage.from_bytes(ctx.source.fetch_image(lf.pmcid, fig.graphic_ref))
    except (IngestError, ImageDecodeError) as exc:
        result.figures_failed += 1
        log.warning("pmcid=%s figure=%d image_failed reason=%r", lf.pmcid, fig.figure_number, str(exc))
        return
    boxes = split_compound(image, ctx.cfg.split)
    kept = filter_min_size(boxes, ctx.cfg.split)
    result.subfigures_before_filter += len(boxes)
    result.subfigures_after_filter += len(kept)
    qualifies = False
    for index, box in enumerate(kept, 1):
        sub = crop(image, box)
        pred = predict(ctx.model, sub)
        name = image_name(lf.pmcid, fig.figure_number, index)
        sub.save_png(ctx.image_dir / name)
        result.modalities[pred.label] = result.modalities.get(pred.label, 0) + 1
        qualifies |= pred.label in ctx.cfg.mine_modalities
        probs = dict(zip(ctx.model.class_list, pred.probs))
        result.entries.append(
            ManifestEntry(
                pmcid=lf.pmcid,
                figure_number=fig.figure_number,
                subfigure_index=index,
                image_path=f"{ctx.image_dir.name}/{name}",
                width=sub.width,
                height=sub.height,
                modality=pred.label,
                prob_ct=float(probs.get("CT", 0.0)),
                prob_cxr=float(probs.get("CXR", 0.0)),
                prob_other=float(probs.get("Other", 0.0)),
                caption=fig.caption_text,
                referring_text=REFERRING_SEPARATOR.join(lf.referring_text),
                mentions=encoded,
                **lf.metadata,
            )
        )
    if qualifies:
        result.in_cohort = True
        result.mentions += mentions


def process_article(raw_id: str, ctx: _Context) -> ArticleResult:
    result = ArticleResult(pmcid=str(raw_id))
    try:
        result.pmcid = normalize_pmcid(raw_id)
        doc = parse_bioc(fetch_with_retry(result.pmcid, ctx.source, ctx.cfg.max_retries))
    except IngestError as exc:
        result.status, result.reason = "skipped", f"{type(exc).__name__}: {exc}"
        return result
    linked = link_figures(doc)
    result.figures = len(linked)
    for lf in linked:
        try:
            _process_figure(lf, ctx, result)
        except FigmineError as exc:
            result.figures_failed += 1
            log.warning("pmcid=%s figure=%d failed reason=%r", lf.pmcid, lf.figure.figure_number, str(exc))
    return result


# --------------------------------------------------------------------------
# cohorts and the run itself
# --------------------------------------------------------------------------


def mention_record(m: Mention) -> dict[str, Any]:
    return {
        "term": m.term,
        "category": m.category,
        "polarity": m.polarity,
        "source": m.source,
        "figure_number": m.figure_number,
        "passage_index": m.passage_index,
        "span": list(m.span),
        "text": m.text,
    }


def load_cohort(path: str | Path) -> tuple[str | None, list[frozenset[str]]]:
    """Per-article positive term sets from a mentions JSONL file.

    Lines sharing a ``pmcid`` are merged, so per-figure files work too.
    """
    label: str | None = None
    units: dict[str, set[str]] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read cohort file {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key = rec["pmcid"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{line_no}: bad mentions record: {exc}") from exc
        label = label or rec.get("cohort")
        terms = units.setdefault(key, set())
        for m in rec.get("mentions", []):
            if m.get("polarity") == "positive":
                terms.add(m["term"])
    return label, [frozenset(t) for t in units.values()]


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class RunResult:
    summary: dict[str, Any]
    entries: list[ManifestEntry]
    articles: list[ArticleResult]
    report: dict[str, Any]
    outputs: dict[str, Path]


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    cfg.validate()
    out = cfg.output_dir
    ensure_writable(out)
    image_dir = out / "images"
    image_dir.mkdir(exist_ok=True)

    source = make_source(cfg)
    ids = requested_ids(cfg, source)
    lexicon, rules = load_text_resources(cfg)
    model = load_model(cfg)
    model.save(out / "model.json")
    classifier_report = evaluate_directory(model, cfg.test_dir) if cfg.test_dir else None

    ctx = _Context(cfg, source, model, lexicon, rules, image_dir)
    # live fetches stay serialised by the source's rate limiter
    with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
        results = list(pool.map(lambda pid: process_article(pid, ctx), ids))
    for r in results:
        log.info(r.log_line())

    entries = [e for r in results for e in r.entries]
    outputs = {
        "manifest_jsonl": emit_manifest(entries, out / "manifest.jsonl", "jsonl"),
        "manifest_csv": emit_manifest(entries, out / "manifest.csv", "csv"),
        "mentions": out / "mentions.jsonl",
    }
    cohort_units = [r for r in results if r.in_cohort]
    with outputs["mentions"].open("w", encoding="utf-8", newline="\n") as fh:
        for r in cohort_units:
            rec = {"pmcid": r.pmcid, "cohort": cfg.cohort, "mentions": [mention_record(m) for m in r.mentions]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    units_a = [r.mentions for r in cohort_units]
    single = cfg.compare_with is None
    if single:
        units_b: list[Any] = [()]
        label_b = ""
    else:
        file_label, units_b = load_cohort(cfg.compare_with)  # type: ignore[arg-type]
        label_b = cfg.compare_label or file_label or "comparison"
        if not units_b:
            raise ConfigError(f"comparison cohort {cfg.compare_with} is empty")
    comparisons = frequency_comparison(units_a, units_b, lexicon) if units_a else []
    paths = write_report(out, comparisons, (cfg.cohort, label_b), classifier_report, single)
    outputs.update(paths)
    report = json.loads(paths["report"].read_text(encoding="utf-8"))

    ok = [r for r in results if r.status == "ok"]
    modalities = {c: sum(r.modalities.get(c, 0) for r in results) for c in model.class_list}
    all_mentions = [m for r in results for m in r.mentions]
    summary = {
        "cohort": cfg.cohort,
        "seed": cfg.seed,
        "articles_requested": len(ids),
        "articles_parsed": len(ok),
        "articles_skipped": len(results) - len(ok),
        "articles_with_figures": sum(1 for r in ok if r.figures),
        "articles_in_cohort": len(cohort_units),
        "figures": sum(r.figures for r in ok),
        "figures_failed": sum(r.figures_failed for r in ok),
        "subfigures_before_filter": sum(r.subfigures_before_filter for r in ok),
        "subfigures_after_filter": sum(r.subfigures_after_filter for r in ok),
        "modalities": modalities,
        "mentions": len(all_mentions),
        "mentions_positive": sum(m.polarity == "positive" for m in all_mentions),
        "mentions_negated": sum(m.polarity == "negated" for m in all_mentions),
        "skipped": [{"pmcid": r.pmcid, "reason": r.reason} for r in results if r.status != "ok"],
    }
    assert summary["subfigures_after_filter"] == sum(modalities.values())
    outputs["summary"] = out / "run_summary.json"
    _write_json(outputs["summary"], summary)
    log.info(
        "run cohort=%s articles=%d/%d figures=%d subfigures=%d/%d %s",
        cfg.cohort,
        summary["articles_parsed"],
        summary["articles_requested"],
        summary["figures"],
        summary["subfigures_before_filter"],
        summary["subfigures_after_filter"],
        " ".join(f"{k}={v}" for k, v in modalities.items()),
    )
    return RunResult(summary, entries, results, report, outputs)
