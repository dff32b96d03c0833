"""Sparsity pattern analysis: score-vector PCA, selection overlap, and
resource-tier breakdowns.

Language vectors are evaluation-mode (noise-free) scores over all
components in the canonical order defined by the gating module, so two runs
from the same checkpoint produce identical artifacts.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .errors import ConfigurationError
from .gating import ScoreTable, SubNetworkMask
from .inference import EvalReport


def language_vectors(table: ScoreTable) -> tuple[list[str], np.ndarray]:
    """(languages, matrix) of evaluation-mode scores, one row per language."""
    langs = list(table.languages)
    rows = [table.language_vector(lang) for lang in langs]
    return langs, np.stack(rows).astype(np.float64)


def pca_project(vectors: np.ndarray, dims: int = 2) -> tuple[np.ndarray, dict]:
    """Mean-centered projection onto the top principal components.

    Uses an eigendecomposition of the covariance matrix; eigenvector signs
    are fixed (largest-magnitude entry positive) so output is deterministic.
    Returns (coordinates, info) where info flags degenerate input.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("need at least two language vectors")
    if x.shape[1] < dims:
        raise ConfigurationError(f"vector dimension {x.shape[1]} below dims={dims}")
    centered = x - x.mean(axis=0, keepdims=True)
    if np.allclose(centered, 0.0):
        return np.zeros((x.shape[0], dims)), {"degenerate": True}
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:dims]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        k = int(np.argmax(np.abs(components[:, j])))
        if components[k, j] < 0:
            components[:, j] = -components[:, j]
    coords = centered @ components
    explained = eigvals[order] / eigvals.sum()
    return coords, {"degenerate": False, "explained_variance": explained.tolist(),
                    "centering": "mean-only"}


def write_pca_csv(langs: list[str], coords: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["language", "x", "y"])
        for lang, (x, y) in zip(langs, coords[:, :2]):
            w.writerow([lang, f"{x:.8g}", f"{y:.8g}"])


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f"]


def write_pca_svg(langs: list[str], coords: np.ndarray,
                  families: dict[str, str], path) -> None:
    """Deterministic standalone SVG scatter, points colored by family."""
    size, margin = 420, 48
    pts = coords[:, :2]
    span = max(1e-12, float(np.abs(pts).max()))
    fams = sorted(set(families.get(l, "?") for l in langs))
    color = {f: _PALETTE[i % len(_PALETTE)] for i, f in enumerate(fams)}

    def sx(v):
        return margin + (v / span * 0.5 + 0.5) * (size - 2 * margin)

    def sy(v):
        return size - margin - (v / span * 0.5 + 0.5) * (size - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="#999"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="#999"/>',
    ]
    for lang, (x, y) in zip(langs, pts):
        fam = families.get(lang, "?")
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="5" '
                     f'fill="{color[fam]}"/>')
        parts.append(f'<text x="{sx(x) + 7:.2f}" y="{sy(y) + 4:.2f}" '
                     f'font-size="11" font-family="sans-serif">{lang}</text>')
    for i, fam in enumerate(fams):
        y = margin + 14 * i
        parts.append(f'<circle cx="{size - margin - 70}" cy="{y}" r="5" fill="{color[fam]}"/>')
        parts.append(f'<text x="{size - margin - 60}" y="{y + 4}" font-size="11" '
                     f'font-family="sans-serif">{fam}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def selection_overlap(masks: SubNetworkMask,
                      families: dict[str, str] | None = None) -> dict:
    """Pairwise Jaccard similarity of selected component sets.

    With a family map, also reports mean within-family vs. cross-family
    similarity over unordered language pairs.
    """
    langs = masks.languages()
    selected = {lang: masks.selected(lang) for lang in langs}
    jaccard: dict[tuple[str, str], float] = {}
    for i, la in enumerate(langs):
        for lb in langs[i + 1:]:
            a, b = selected[la], selected[lb]
            union = a | b
            jaccard[(la, lb)] = len(a & b) / len(union) if union else 1.0
    summary = {}
    if families is not None:
        within = [v for (la, lb), v in jaccard.items()
                  if families.get(la) == families.get(lb)]
        cross = [v for (la, lb), v in jaccard.items()
                 if families.get(la) != families.get(lb)]
        summary = {
            "within_family_mean": float(np.mean(within)) if within else None,
            "cross_family_mean": float(np.mean(cross)) if cross else None,
        }
    return {"languages": langs, "jaccard": jaccard, "summary": summary}


def write_overlap_csv(overlap: dict, path) -> None:
    langs = overlap["languages"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + langs)
        for la in langs:
            row = [la]
            for lb in langs:
                if la == lb:
                    row.append("1")
                else:
                    key = (la, lb) if (la, lb) in overlap["jaccard"] else (lb, la)
                    row.append(f"{overlap['jaccard'][key]:.6g}")
            w.writerow(row)


def resource_breakdown(report: EvalReport, corpus: Corpus,
                       by: str = "target") -> dict[str, float]:
    """Mean BLEU per resource tier; a direction is assigned to the tier of
    its target (or source) language. Tiers with no directions are absent."""
    if by not in ("target", "source"):
        raise ConfigurationError(f"breakdown must be by target or source, got {by!r}")
    per_tier: dict[str, list[float]] = {}
    for key, score in report.per_direction.items():
        d = corpus.direction(key)
        lang_id = d.tgt if by == "target" else d.src
        if lang_id not in corpus.languages:
            raise ConfigurationError(f"language {lang_id} missing from manifest")
        tier = corpus.languages[lang_id].tier
        per_tier.setdefault(tier, []).append(score)
    return {tier: float(np.mean(vals)) for tier, vals in sorted(per_tier.items())}
