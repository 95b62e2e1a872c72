"""Dataset manifest: one row per extracted subfigure, as JSONL or CSV."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Literal

from figmine.classifier import CLASSES
from figmine.errors import FigmineError
from figmine.raster import ImageDecodeError, RasterImage

MIN_SIDE = 224
PROB_TOLERANCE = 1e-6
REFERRING_SEPARATOR = "\n\n"
MENTION_SEPARATOR = ";"

_OPTIONAL_TEXT = ("doi", "title", "journal", "pub_date", "license")
_INT_FIELDS = ("figure_number", "subfigure_index", "width", "height")
_FLOAT_FIELDS = ("prob_ct", "prob_cxr", "prob_other")

Format = Literal["jsonl", "csv"]


class ManifestError(FigmineError):
    pass


class ManifestIoError(ManifestError, OSError):
    pass


class ManifestSchemaError(ManifestError, ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ManifestEntry:
    pmcid: str
    doi: str | None
    title: str | None
    journal: str | None
    pub_date: str | None
    license: str | None
    figure_number: int
    subfigure_index: int  # 1-based, in splitter order
    image_path: str  # relative to the manifest's directory, POSIX separators
    width: int
    height: int
    modality: str
    prob_ct: float
    prob_cxr: float
    prob_other: float
    caption: str
    referring_text: str
    mentions: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        # CSV cannot tell "" from a missing value, so empty optionals are stored as None
        for name in _OPTIONAL_TEXT:
            if getattr(self, name) == "":
                object.__setattr__(self, name, None)
        object.__setattr__(self, "mentions", tuple(self.mentions))
        bad = [m for m in self.mentions if MENTION_SEPARATOR in m]
        if bad:
            raise ValueError(f"mention summaries may not contain {MENTION_SEPARATOR!r}: {bad}")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.pmcid, self.figure_number, self.subfigure_index)

    @property
    def probs(self) -> tuple[float, float, float]:
        return (self.prob_ct, self.prob_cxr, self.prob_other)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mentions"] = list(self.mentions)
        return d


FIELD_NAMES = tuple(f.name for f in fields(ManifestEntry))


def _from_record(record: dict, line: int) -> ManifestEntry:
    missing = [k for k in FIELD_NAMES if k not in record]
    extra = [k for k in record if k not in FIELD_NAMES]
    if missing or extra:
        raise ManifestSchemaError(line, f"missing fields {missing}, unexpected fields {extra}")
    try:
        return ManifestEntry(**record)
    except (TypeError, ValueError) as exc:
        raise ManifestSchemaError(line, str(exc)) from exc


def _csv_value(entry: ManifestEntry, name: str) -> str:
    value = getattr(entry, name)
    if value is None:
        return ""
    if name == "mentions":
        return MENTION_SEPARATOR.join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_record(row: dict[str, str], line: int) -> dict:
    record: dict = dict(row)
    try:
        for name in _INT_FIELDS:
            record[name] = int(row[name])
        for name in _FLOAT_FIELDS:
            record[name] = float(row[name])
    except (KeyError, ValueError) as exc:
        raise ManifestSchemaError(line, f"bad numeric field: {exc}") from exc
    for name in _OPTIONAL_TEXT:
        if record.get(name) == "":
            record[name] = None
    mentions = row.get("mentions") or ""
    record["mentions"] = tuple(mentions.split(MENTION_SEPARATOR)) if mentions else ()
    return record


def emit_manifest(entries: Iterable[ManifestEntry], path: str | Path, fmt: Format = "jsonl") -> Path:
    path = Path(path)
    rows = list(entries)
    try:
        if fmt == "jsonl":
            with path.open("w", encoding="utf-8", newline="\n") as fh:
                for e in rows:
                    fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")
        elif fmt == "csv":
            with path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(FIELD_NAMES)
                for e in rows:
                    writer.writerow([_csv_value(e, n) for n in FIELD_NAMES])
        else:
            raise ValueError(f"unknown manifest format {fmt!r}")
    except OSError as exc:
        raise ManifestIoError(f"cannot write {path}: {exc}") from exc
    return path


def _iter_jsonl(path: Path) -> Iterable[tuple[int, ManifestEntry]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestSchemaError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ManifestSchemaError(line_no, "expected a JSON object")
            if isinstance(record.get("mentions"), list):
                record["mentions"] = tuple(record["mentions"])
            yield line_no, _from_record(record, line_no)


def _iter_csv(path: Path) -> Iterable[tuple[int, ManifestEntry]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return
        if tuple(reader.fieldnames) != FIELD_NAMES:
            raise ManifestSchemaError(1, f"header mismatch: {reader.fieldnames}")
        for row in reader:
            # line_num is the physical line where the record ends
            yield reader.line_num, _from_record(_csv_record(row, reader.line_num), reader.line_num)


def _format_of(path: Path) -> Format:
    return "csv" if path.suffix.lower() == ".csv" else "jsonl"


def iter_manifest(path: str | Path) -> Iterable[tuple[int, ManifestEntry]]:
    """``(line_number, entry)`` pairs; the format follows the file suffix."""
    path = Path(path)
    if not path.is_file():
        raise ManifestIoError(f"manifest not found: {path}")
    return _iter_csv(path) if _format_of(path) == "csv" else _iter_jsonl(path)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    try:
        return [e for _, e in iter_manifest(path)]
    except UnicodeDecodeError as exc:
        raise ManifestIoError(f"{path} is not UTF-8: {exc}") from exc


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


@dataclass
class ValidationReport:
    path: Path
    entries: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_entry(entry: ManifestEntry, root: Path | None = None, check_files: bool = True) -> list[str]:
    problems = []
    if entry.width < MIN_SIDE or entry.height < MIN_SIDE:
        problems.append(f"{entry.width}x{entry.height} is below 224 filter")
    if entry.modality not in CLASSES:
        problems.append(f"modality {entry.modality!r} not in {list(CLASSES)}")
    probs = entry.probs
    if not all(math.isfinite(p) and 0.0 <= p <= 1.0 for p in probs):
        problems.append(f"probabilities out of range: {probs}")
    elif abs(sum(probs) - 1.0) > PROB_TOLERANCE:
        problems.append(f"probabilities sum to {sum(probs)!r}")
    elif entry.modality in CLASSES and probs[CLASSES.index(entry.modality)] < max(probs):
        problems.append(f"modality {entry.modality} is not the most probable class")
    if entry.figure_number < 1 or entry.subfigure_index < 1:
        problems.append("figure_number and subfigure_index must be >= 1")
    if check_files:
        target = (root or Path(".")) / entry.image_path
        if not target.is_file():
            problems.append(f"image file missing: {entry.image_path}")
        else:
            try:
                img = RasterImage.open(target)
            except ImageDecodeError as exc:
                problems.append(f"image does not decode: {exc}")
            else:
                if (img.width, img.height) != (entry.width, entry.height):
                    problems.append(
                        f"recorded {entry.width}x{entry.height} but file is {img.width}x{img.height}"
                    )
    return problems


def validate_manifest(path: str | Path, check_files: bool = True) -> ValidationReport:
    """Check every entry; schema errors raise, content problems are collected."""
    path = Path(path)
    report = ValidationReport(path)
    seen: dict[tuple[str, int, int], int] = {}
    for line, entry in iter_manifest(path):
        report.entries += 1
        for problem in check_entry(entry, path.parent, check_files):
            report.violations.append(Violation(line, problem))
        if entry.key in seen:
            report.violations.append(
                Violation(line, f"duplicate key {entry.key} on lines {seen[entry.key]} and {line}")
            )
        else:
            seen[entry.key] = line
    return report
