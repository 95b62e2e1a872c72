"""Synthetic images and datasets with known ground truth.

Used by the test suite as construction oracles and by ``python -m
figmine.synthetic`` to write a small demo corpus.
"""

from __future__ import annotations

import argparse
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from figmine.raster import RasterImage
from figmine.splitter import SubfigureBox


def noisy_panel(rng: np.random.Generator, h: int, w: int, noise: float = 35.0) -> np.ndarray:
    base = rng.integers(40, 200, size=3)
    px = base + rng.normal(0.0, noise, size=(h, w, 3))
    return np.clip(px, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class GridFigure:
    image: RasterImage
    panels: list[SubfigureBox]


def grid_figure(
    rng: np.random.Generator,
    row_heights: list[int],
    col_widths: list[int],
    gutter: int | list[int] = 20,
    background: int = 255,
    panel_fn=None,
) -> GridFigure:
    """Panels laid out on a guillotine grid, touching the outer edge.

    ``gutter`` is one width for every band, or a list with one width per
    horizontal band followed by one per vertical band.
    """
    n_h, n_v = len(row_heights) - 1, len(col_widths) - 1
    gutters = [gutter] * (n_h + n_v) if isinstance(gutter, int) else list(gutter)
    h_gut, v_gut = gutters[:n_h], gutters[n_h:]
    height = sum(row_heights) + sum(h_gut)
    width = sum(col_widths) + sum(v_gut)
    canvas = np.full((height, width, 3), background, dtype=np.uint8)
    panel_fn = panel_fn or noisy_panel
    panels: list[SubfigureBox] = []
    y = 0
    for r, ph in enumerate(row_heights):
        x = 0
        for c, pw in enumerate(col_widths):
            canvas[y : y + ph, x : x + pw] = panel_fn(rng, ph, pw)
            panels.append(SubfigureBox(x, y, pw, ph))
            x += pw + (v_gut[c] if c < n_v else 0)
        y += ph + (h_gut[r] if r < n_h else 0)
    return GridFigure(RasterImage(canvas), panels)


def random_grid(
    rng: np.random.Generator,
    min_gutter: int = 6,
    max_per_axis: int = 4,
    panel_range: tuple[int, int] = (40, 260),
) -> GridFigure:
    rows = int(rng.integers(1, max_per_axis + 1))
    cols = int(rng.integers(1, max_per_axis + 1))
    heights = [int(v) for v in rng.integers(*panel_range, size=rows)]
    widths = [int(v) for v in rng.integers(*panel_range, size=cols)]
    gutters = [int(v) for v in rng.integers(min_gutter, 4 * min_gutter + 1, size=rows + cols - 2)]
    background = int(rng.choice([255, 250, 240, 0]))
    return grid_figure(rng, heights, widths, gutters, background=background)


# --------------------------------------------------------------------------
# modality look-alikes
# --------------------------------------------------------------------------


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _gray(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0, 255).astype(np.uint8)
    return np.repeat(v[:, :, None], 3, axis=2)


def synth_ct(rng: np.random.Generator, h: int = 256, w: int = 256) -> np.ndarray:
    """Axial chest CT look-alike: black field, bright body ring, dark lungs."""
    img = rng.normal(8.0, 2.0, size=(h, w))
    body = _ellipse(h, w, h / 2, w / 2, h * rng.uniform(0.33, 0.42), w * rng.uniform(0.42, 0.47))
    img[body] = rng.normal(150, 12, size=body.sum())
    for side in (-1, 1):
        lung = _ellipse(h, w, h / 2, w / 2 + side * w * 0.2, h * 0.27, w * 0.15)
        img[lung] = rng.normal(35, 10, size=lung.sum())
    spine = _ellipse(h, w, h * 0.72, w / 2, h * 0.06, w * 0.05)
    img[spine] = 235
    return _gray(img)


def synth_cxr(rng: np.random.Generator, h: int = 256, w: int = 256) -> np.ndarray:
    """Frontal chest X-ray look-alike: grey field, dark lungs, bright mediastinum."""
    yy = np.linspace(0, 1, h)[:, None]
    img = 90 + 70 * yy + rng.normal(0, 10, size=(h, w))
    for side in (-1, 1):
        lung = _ellipse(h, w, h * 0.48, w / 2 + side * w * 0.2, h * 0.33, w * 0.15)
        img[lung] = rng.normal(45, 12, size=lung.sum())
    mediastinum = _ellipse(h, w, h * 0.6, w / 2, h * 0.45, w * 0.07)
    img[mediastinum] = 170 + 40 * np.broadcast_to(yy, (h, w))[mediastinum] + rng.normal(0, 8, mediastinum.sum())
    return _gray(img)


def synth_other(rng: np.random.Generator, h: int = 256, w: int = 256) -> np.ndarray:
    """Bar chart look-alike: white page, coloured bars, black axes."""
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    n = int(rng.integers(3, 8))
    slot = (w - 40) // n
    for i in range(n):
        colour = rng.integers(0, 256, size=3)
        top = int(rng.integers(20, h - 40))
        x = 30 + i * slot
        img[top : h - 20, x : x + max(4, slot - 6)] = colour
    img[h - 20 : h - 18, 20 : w - 10] = 0
    img[10 : h - 18, 20:22] = 0
    return img


MODALITY_GENERATORS = {"CT": synth_ct, "CXR": synth_cxr, "Other": synth_other}


# --------------------------------------------------------------------------
# feature blobs
# --------------------------------------------------------------------------


def feature_blobs(
    rng: np.random.Generator,
    n_per_class: int,
    dim: int = 21,
    separation: float = 5.0,
    sigma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Three isotropic Gaussian blobs; class ``k`` is shifted ``separation`` sigmas along axis ``k``."""
    means = np.zeros((3, dim))
    for k in range(3):
        means[k, k] = separation * sigma
    x = np.concatenate([rng.normal(means[k], sigma, size=(n_per_class, dim)) for k in range(3)])
    y = np.repeat(np.arange(3), n_per_class)
    order = rng.permutation(len(y))
    return x[order], y[order]


# --------------------------------------------------------------------------
# demo fixture corpus
# --------------------------------------------------------------------------


def bioc_xml(pmcid: str, meta: dict[str, str], passages: list[tuple[str, str, dict[str, str]]]) -> bytes:
    """Serialise ``(section_type, text, extra_infons)`` passages as a BioC collection."""
    collection = ET.Element("collection")
    ET.SubElement(collection, "source").text = "PMC"
    document = ET.SubElement(collection, "document")
    ET.SubElement(document, "id").text = pmcid.removeprefix("PMC")
    offset = 0
    for i, (section, text, extra) in enumerate(passages):
        passage = ET.SubElement(document, "passage")
        infons = {"section_type": section, "type": "paragraph", **extra}
        if i == 0:
            infons.update(meta)
        for key, value in infons.items():
            inf = ET.SubElement(passage, "infon", key=key)
            inf.text = value
        ET.SubElement(passage, "offset").text = str(offset)
        ET.SubElement(passage, "text").text = text
        offset += len(text) + 1
    return ET.tostring(collection, encoding="utf-8", xml_declaration=True)


_COHORT_TEXT = {
    "covid19": (
        "The patient presented with fever and dry cough but no diarrhea (Fig. 1a).",
        "Chest CT showing bilateral ground-glass opacities with crazy paving. No pleural effusion.",
    ),
    "influenza": (
        "The patient reported fever, myalgia and sore throat without dyspnea (Figure 1).",
        "Chest radiograph showing patchy infiltration in the right lower lobe. No pneumothorax.",
    ),
}

# (figure_number, layout) per article; layout is "missing" or (rows, cols, kinds)
_DEMO_ARTICLES = {
    "PMC1000001": [
        (1, ([256], [256, 256], ["CXR", "Other"])),
        (2, ([280], [280], ["CT"])),
    ],
    "PMC1000002": [
        (1, ([256, 120], [256, 256], ["CXR", "CXR", "noise", "noise"])),
    ],
    "PMC1000003": [
        (1, ([260], [300], ["CXR"])),
        (2, "missing"),
    ],
}
DEMO_ABSENT = "PMC1000004"

DEMO_TRUTH = {
    "articles_requested": 4,
    "articles_parsed": 3,
    "articles_skipped": 1,
    "figures": 5,
    "figures_failed": 1,
    "subfigures_before_filter": 8,
    "subfigures_after_filter": 6,
    "modalities": {"CT": 1, "CXR": 4, "Other": 1},
}


def _panel(kind: str):
    if kind == "noise":
        return noisy_panel
    gen = MODALITY_GENERATORS[kind]
    return lambda rng, h, w: gen(rng, h, w)


def _mixed_grid(rng: np.random.Generator, rows: list[int], cols: list[int], kinds: list[str]) -> RasterImage:
    queue = iter(kinds)
    return grid_figure(rng, rows, cols, 20, panel_fn=lambda r, h, w: _panel(next(queue))(r, h, w)).image


def write_training_set(directory: str | Path, rng: np.random.Generator, per_class: int = 20) -> Path:
    root = Path(directory)
    for cls, gen in MODALITY_GENERATORS.items():
        (root / cls).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            h, w = (int(v) for v in rng.integers(224, 330, size=2))
            RasterImage(gen(rng, h, w)).save_png(root / cls / f"{cls.lower()}_{i:03d}.png")
    return root


def write_demo_corpus(directory: str | Path, seed: int = 0, cohort: str = "covid19") -> Path:
    """Fixture corpus with a known composition (see ``DEMO_TRUTH``), a training
    set and a ready-to-run ``config.toml``; returns the config path."""
    root = Path(directory)
    corpus = root / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    referring, caption = _COHORT_TEXT[cohort]
    for n, (pmcid, figures) in enumerate(_DEMO_ARTICLES.items(), 1):
        meta = {
            "article-id_pmc": pmcid.removeprefix("PMC"),
            "article-id_doi": f"10.0000/demo.{n}",
            "journal": "Demo Journal of Radiology",
            "year": "2020",
            "license": "CC BY",
        }
        passages = [
            ("TITLE", f"Demo case report {n}", {"type": "front"}),
            ("ABSTRACT", "A case with imaging findings.", {"type": "abstract"}),
            ("CASE", referring, {}),
            ("RESULTS", f"Follow-up imaging is shown in Figure 2, with {caption.lower()}", {}),
        ]
        (corpus / pmcid).mkdir(exist_ok=True)
        for number, layout in figures:
            graphic = f"{pmcid.lower()}_f{number}.png"
            passages.append(
                ("FIG", f"Figure {number}. {caption}", {"type": "fig_caption", "id": f"fig{number}", "file": graphic})
            )
            if layout == "missing":
                continue
            rows, cols, kinds = layout
            _mixed_grid(rng, rows, cols, kinds).save_png(corpus / pmcid / graphic)
        passages.append(("REF", "Figure 1 of an unrelated paper.", {"type": "ref"}))
        (corpus / f"{pmcid}.xml").write_bytes(bioc_xml(pmcid, meta, passages))
    (root / "ids.txt").write_text("\n".join([*_DEMO_ARTICLES, DEMO_ABSENT]) + "\n", encoding="utf-8")
    write_training_set(root / "train", rng)
    config = root / "config.toml"
    config.write_text(
        "[source]\n"
        'mode = "fixture"\n'
        'fixture_dir = "corpus"\n\n'
        "[articles]\n"
        'ids_file = "ids.txt"\n\n'
        "[classifier]\n"
        'training_dir = "train"\n\n'
        "[output]\n"
        'dir = "out"\n'
        f'cohort = "{cohort}"\n\n'
        "[run]\n"
        f"seed = {seed}\n",
        encoding="utf-8",
    )
    return config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write a small demo fixture corpus.")
    parser.add_argument("directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cohort", choices=sorted(_COHORT_TEXT), default="covid19")
    args = parser.parse_args(argv)
    print(write_demo_corpus(args.directory, args.seed, args.cohort))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
