"""Command-line entry point: ``figmine <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 validation failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from figmine import __version__
from figmine.classifier import Hyperparams, ModelParams, predict
from figmine.errors import ConfigError, FigmineError
from figmine.ingest import (
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
from figmine.manifest import ManifestError, ManifestIoError, ManifestSchemaError, validate_manifest
from figmine.pipeline import (
    OutputNotWritable,
    load_config,
    load_cohort,
    mention_record,
    read_id_file,
    run_pipeline,
    train_from_directory,
)
from figmine.raster import ImageDecodeError, RasterImage
from figmine.report import write_report
from figmine.splitter import SplitParams, crop, filter_min_size, split_compound
from figmine.stats import EmptyCohort, frequency_comparison
from figmine.textmine import NegationRules, load_default_lexicon, load_lexicon, mine_linked_figure

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("figmine")


class ValidationFailed(FigmineError):
    pass


# --------------------------------------------------------------------------
# shared argument groups
# --------------------------------------------------------------------------


def _add_source(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("article source")
    g.add_argument("--fixture-dir", type=Path, help="directory of <PMCID>.xml files")
    g.add_argument("--live", action="store_true", help="fetch from the BioC web service")
    g.add_argument("--api-base", help="override the BioC endpoint (also FIGMINE_API_BASE)")
    g.add_argument("--min-interval", type=float, help="seconds between live requests")
    g.add_argument("--ids", nargs="+", metavar="PMCID")
    g.add_argument("--ids-file", type=Path)
    g.add_argument("--query", help="PMC search query (live mode)")


def _add_split(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("splitting")
    g.add_argument("--uniformity-threshold", type=float)
    g.add_argument("--min-gutter", type=int)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--min-panel", type=int)
    g.add_argument("--color-tolerance", type=float)


def _add_text(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("text mining")
    g.add_argument("--lexicon", type=Path, help="TSV lexicon (default: bundled)")
    g.add_argument("--rules-dir", type=Path, help="directory of trigger lists (default: bundled)")
    g.add_argument("--scope-window", type=int)


def _split_params(args: argparse.Namespace) -> SplitParams:
    given = {k: getattr(args, k) for k in SplitParams.__dataclass_fields__ if getattr(args, k, None) is not None}
    try:
        return SplitParams(**given)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _text_resources(args: argparse.Namespace):
    window = args.scope_window or 6
    try:
        lexicon = load_lexicon(args.lexicon) if args.lexicon else load_default_lexicon()
        rules = NegationRules.from_directory(args.rules_dir, window) if args.rules_dir else NegationRules.default(window)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load text resources: {exc}") from exc
    return lexicon, rules


def _source(args: argparse.Namespace, cache_dir: Path | None = None) -> Source:
    if args.live == (args.fixture_dir is not None):
        raise ConfigError("choose exactly one of --fixture-dir or --live")
    if args.live:
        kwargs: dict[str, Any] = {"api_base": args.api_base, "cache_dir": cache_dir}
        if args.min_interval is not None:
            kwargs["min_interval"] = args.min_interval
        return LiveSource(**kwargs)
    if not args.fixture_dir.is_dir():
        raise ConfigError(f"fixture directory not found: {args.fixture_dir}")
    return FixtureSource(args.fixture_dir)


def _ids(args: argparse.Namespace, source: Source) -> list[str]:
    given = [n for n in ("ids", "ids_file", "query") if getattr(args, n) is not None]
    if len(given) != 1:
        raise ConfigError("give exactly one of --ids, --ids-file, --query")
    if args.query is not None:
        return resolve_ids(QuerySpec(args.query), source)
    return resolve_ids(args.ids if args.ids is not None else read_id_file(args.ids_file), source)


def _documents(args: argparse.Namespace, source: Source):
    for raw in _ids(args, source):
        try:
            pmcid = normalize_pmcid(raw)
            data = fetch_with_retry(pmcid, source)
            doc = parse_bioc(data)
        except IngestError as exc:
            log.warning("pmcid=%s status=skipped reason=%r", raw, f"{type(exc).__name__}: {exc}")
            continue
        log.info("pmcid=%s status=ok figures=%d", doc.pmcid, len(doc.figures))
        yield data, doc


def _open_out(path: Path | None):
    if path is None:
        return sys.stdout
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", encoding="utf-8", newline="\n")


def _jsonl(fh, record: dict[str, Any]) -> None:
    fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_fetch(args: argparse.Namespace) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    source = _source(args, cache_dir=args.cache_dir)
    n = 0
    for data, doc in _documents(args, source):
        (out / f"{doc.pmcid}.xml").write_bytes(data)
        n += 1
        if not args.images:
            continue
        for fig in doc.figures:
            try:
                blob = source.fetch_image(doc.pmcid, fig.graphic_ref)
            except IngestError as exc:
                log.warning("pmcid=%s figure=%d image_failed reason=%r", doc.pmcid, fig.figure_number, str(exc))
                continue
            target = out / doc.pmcid / fig.graphic_ref
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(blob)
    log.info("fetched %d articles into %s", n, out)
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    source = _source(args)
    fh = _open_out(args.out)
    try:
        for _, doc in _documents(args, source):
            for lf in link_figures(doc):
                _jsonl(fh, lf.to_dict())
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    params = _split_params(args)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = RasterImage.open(path)
        boxes = split_compound(image, params)
        kept = filter_min_size(boxes, params) if not args.no_filter else boxes
        for k, box in enumerate(kept, 1):
            record = {"image": str(path), "index": k, "x": box.x, "y": box.y, "w": box.w, "h": box.h}
            if args.out:
                target = args.out / f"{Path(path).stem}_{k}.png"
                crop(image, box).save_png(target)
                record["crop"] = str(target)
            _jsonl(sys.stdout, record)
        log.info("image=%s subfigures=%d/%d", path, len(boxes), len(kept))
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    if args.train:
        hp = Hyperparams(
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            epochs=args.epochs,
            seed=args.seed,
        )
        model = train_from_directory(args.train, hp)
        model.save(args.model)
        log.info("trained model written to %s", args.model)
    else:
        try:
            model = ModelParams.load(args.model)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load model {args.model}: {exc}") from exc
    for path in args.images:
        pred = predict(model, RasterImage.open(path))
        _jsonl(sys.stdout, {"image": str(path), "modality": pred.label, **dict(zip(model.class_list, pred.probs))})
    return EXIT_OK


def cmd_mine(args: argparse.Namespace) -> int:
    lexicon, rules = _text_resources(args)
    fh = _open_out(args.out)
    try:
        with args.linked.open("r", encoding="utf-8") as src:
            for line_no, line in enumerate(src, 1):
                if not line.strip():
                    continue
                try:
                    lf = LinkedFigure.from_dict(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{args.linked}:{line_no}: not a linked-figure record: {exc}") from exc
                mentions = mine_linked_figure(lf, lexicon, rules)
                _jsonl(
                    fh,
                    {
                        "pmcid": lf.pmcid,
                        "figure_number": lf.figure.figure_number,
                        "cohort": args.cohort,
                        "mentions": [mention_record(m) for m in mentions],
                    },
                )
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    lexicon, _ = _text_resources(args)
    label_a, units_a = load_cohort(args.cohort_a)
    label_b, units_b = load_cohort(args.cohort_b)
    labels = (args.label_a or label_a or "A", args.label_b or label_b or "B")
    try:
        comparisons = frequency_comparison(units_a, units_b, lexicon)
    except EmptyCohort as exc:
        raise ConfigError(str(exc)) from exc
    paths = write_report(args.out, comparisons, labels)
    for c in comparisons:
        if c.stars:
            log.info("term=%r p=%.3g stars=%s enriched_in=%s", c.term, c.p_value, c.stars, labels[c.direction == "B"])
    log.info("report written to %s", paths["report"])
    return EXIT_OK


def _run_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    return {
        "source": {
            "mode": "live" if args.live else ("fixture" if args.fixture_dir else None),
            "fixture_dir": args.fixture_dir,
            "api_base": args.api_base,
            "min_interval": args.min_interval,
        },
        "articles": {"ids": args.ids, "ids_file": args.ids_file, "query": args.query},
        "split": {k: getattr(args, k) for k in SplitParams.__dataclass_fields__},
        "classifier": {
            "model": args.model,
            "training_dir": args.training_dir,
            "test_dir": args.test_dir,
            "learning_rate": args.learning_rate,
            "batch_size": args.batch_size,
            "epochs": args.epochs,
        },
        "text": {"lexicon": args.lexicon, "rules_dir": args.rules_dir, "scope_window": args.scope_window},
        "output": {
            "dir": args.out,
            "cohort": args.cohort,
            "compare_with": args.compare_with,
            "compare_label": args.compare_label,
        },
        "run": {"seed": args.seed, "workers": args.workers},
    }


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _run_overrides(args))
    result = run_pipeline(cfg)
    s = result.summary
    print(
        f"articles {s['articles_parsed']}/{s['articles_requested']}  figures {s['figures']}  "
        f"subfigures {s['subfigures_before_filter']} -> {s['subfigures_after_filter']}  "
        + "  ".join(f"{k} {v}" for k, v in s["modalities"].items())
    )
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    report = validate_manifest(args.manifest, check_files=not args.no_files)
    for v in report.violations:
        print(f"{args.manifest}:{v}")
    print(f"{report.entries} entries, {len(report.violations)} violations")
    if not report.ok:
        raise ValidationFailed(f"{len(report.violations)} violations")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figmine", description="Mine radiology figures and text from open-access articles.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download BioC XML (and figures) into a fixture-layout directory")
    _add_source(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--images", action="store_true", help="also fetch figure images")
    p.add_argument("--cache-dir", type=Path, help="content-addressed response cache")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("extract", help="parse articles and link figures to citing text (JSONL)")
    _add_source(p)
    p.add_argument("--out", type=Path, help="output JSONL (default: stdout)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="cut compound figures into panels")
    p.add_argument("images", nargs="+", type=Path)
    _add_split(p)
    p.add_argument("--no-filter", action="store_true", help="keep panels below the size filter")
    p.add_argument("--out", type=Path, help="directory for cropped panels")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("classify", help="predict image modality (optionally training first)")
    p.add_argument("images", nargs="*", type=Path)
    p.add_argument("--model", type=Path, required=True, help="model JSON to load, or to write with --train")
    p.add_argument("--train", type=Path, metavar="DIR", help="train from DIR/{CT,CXR,Other}/ first")
    p.add_argument("--learning-rate", type=float, default=Hyperparams.learning_rate)
    p.add_argument("--batch-size", type=int, default=Hyperparams.batch_size)
    p.add_argument("--epochs", type=int, default=Hyperparams.epochs)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("mine", help="extract symptom and finding mentions from linked figures")
    p.add_argument("--linked", type=Path, required=True, help="JSONL written by 'extract'")
    p.add_argument("--cohort", default="cohort")
    p.add_argument("--out", type=Path, help="output JSONL (default: stdout)")
    _add_text(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("report", help="compare term frequencies between two cohorts")
    p.add_argument("--cohort-a", type=Path, required=True, help="mentions JSONL for cohort A")
    p.add_argument("--cohort-b", type=Path, required=True, help="mentions JSONL for cohort B")
    p.add_argument("--label-a")
    p.add_argument("--label-b")
    p.add_argument("--out", type=Path, required=True)
    _add_text(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from a TOML config; flags override the file")
    p.add_argument("--config", type=Path)
    _add_source(p)
    _add_split(p)
    _add_text(p)
    g = p.add_argument_group("classifier")
    g.add_argument("--model", type=Path)
    g.add_argument("--training-dir", type=Path)
    g.add_argument("--test-dir", type=Path)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g = p.add_argument_group("output")
    g.add_argument("--out", type=Path)
    g.add_argument("--cohort")
    g.add_argument("--compare-with", type=Path, help="mentions.jsonl of another cohort")
    g.add_argument("--compare-label")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a manifest (JSONL or CSV)")
    p.add_argument("manifest", type=Path)
    p.add_argument("--no-files", action="store_true", help="skip image existence and size checks")
    p.set_defaults(func=cmd_validate)
    return parser


_EXIT_MAP: list[tuple[type[BaseException], int]] = [
    (ConfigError, EXIT_CONFIG),
    (ValidationFailed, EXIT_VALIDATION),
    (ManifestSchemaError, EXIT_VALIDATION),
    (ManifestIoError, EXIT_IO),
    (OutputNotWritable, EXIT_IO),
    (ImageDecodeError, EXIT_IO),
    (IngestError, EXIT_IO),
    (OSError, EXIT_IO),
    (ManifestError, EXIT_VALIDATION),
    (FigmineError, EXIT_CONFIG),
]


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except Exception as exc:
        for kind, code in _EXIT_MAP:
            if isinstance(exc, kind):
                if not isinstance(exc, ValidationFailed):
                    print(f"figmine {args.command}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    raise SystemExit(main())
