"""AUROC, threshold selection and result tables.

AUROC follows the Mann-Whitney convention: the probability that a random
anomalous score exceeds a random flawless score, with ties counted half.
All defect types of a category are pooled into one anomalous set.  Tables
render one row per category and one column per model variant, percentages
with two decimals and a period separator, closing with an unweighted
"Average AUROC" row.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

FLAWLESS = "flawless"
ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class ScoredEntry:
    id: str
    score: float
    label: str

    def __post_init__(self):
        if self.label not in (FLAWLESS, ANOMALOUS):
            raise ConfigError(f"unknown label {self.label!r}")


@dataclass
class ScoredSet:
    entries: list[ScoredEntry] = field(default_factory=list)

    def add(self, id: str, score: float, label: str) -> None:
        self.entries.append(ScoredEntry(id, float(score), label))

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        neg = np.array([e.score for e in self.entries if e.label == FLAWLESS])
        pos = np.array([e.score for e in self.entries if e.label == ANOMALOUS])
        return neg, pos


def auroc(s: ScoredSet) -> float:
    """Rank-based Mann-Whitney AUROC; exact pair-counting semantics."""
    neg, pos = s.split()
    if len(neg) == 0 or len(pos) == 0:
        raise InputError("AUROC needs at least one score of each label")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise InputError("AUROC inputs must be finite")
    scores = np.concatenate([neg, pos])
    ranks = _average_ranks(scores)
    u = ranks[len(neg):].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def select_threshold(s: ScoredSet) -> float:
    """Score maximizing Youden's J = TPR - FPR.

    Candidates are midpoints of adjacent distinct scores (the lone distinct
    score when all scores tie); a sample is called anomalous when its score
    is strictly above the threshold.  Ties in J resolve to the lowest
    candidate.
    """
    neg, pos = s.split()
    if len(neg) == 0 or len(pos) == 0:
        raise InputError("threshold selection needs both labels")
    distinct = np.unique(np.concatenate([neg, pos]))
    if len(distinct) == 1:
        return float(distinct[0])
    candidates = (distinct[:-1] + distinct[1:]) / 2.0
    best_t, best_j = None, -np.inf
    for t in candidates:
        j = (pos > t).mean() - (neg > t).mean()
        if j > best_j:
            best_t, best_j = t, j
    return float(best_t)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class CategoryResult:
    category: str
    auroc: float  # fraction in [0, 1]
    n_flawless: int
    n_anomalous: int
    threshold: float


@dataclass
class EvalReport:
    variant: str
    rows: list[CategoryResult]

    @property
    def mean_auroc(self) -> float:
        """Unweighted mean over categories."""
        return float(np.mean([r.auroc for r in self.rows]))


def evaluate(scored_by_category: dict[str, ScoredSet],
             variant: str) -> EvalReport:
    """Build a report from per-category scored sets."""
    rows = []
    for category, s in scored_by_category.items():
        neg, pos = s.split()
        rows.append(CategoryResult(
            category=category, auroc=auroc(s), n_flawless=len(neg),
            n_anomalous=len(pos), threshold=select_threshold(s)))
    return EvalReport(variant=variant, rows=rows)


def _pct(fraction: float) -> str:
    return f"{fraction * 100.0:.2f}"


def render_report(reports: list[EvalReport], format: str = "markdown") -> str:
    """Render one row per category, one column per variant, plus the
    average row.  Byte-deterministic for fixed inputs."""
    if not reports:
        raise InputError("render_report needs at least one report")
    categories = [r.category for r in reports[0].rows]
    by_variant = {}
    for rep in reports:
        cats = [r.category for r in rep.rows]
        if cats != categories:
            raise ConfigError(
                f"variant {rep.variant!r} categories {cats} do not match "
                f"{categories}")
        by_variant[rep.variant] = {r.category: r for r in rep.rows}
    if format == "csv":
        return _render_csv(reports, categories, by_variant)
    if format == "markdown":
        return _render_markdown(reports, categories, by_variant)
    raise ConfigError(f"unknown report format {format!r}")


def _render_csv(reports, categories, by_variant) -> str:
    out = io.StringIO()
    out.write("category,variant,auroc_percent,n_flawless,n_anomalous,threshold\n")
    for cat in categories:
        for rep in reports:
            r = by_variant[rep.variant][cat]
            out.write(f"{cat},{rep.variant},{_pct(r.auroc)},"
                      f"{r.n_flawless},{r.n_anomalous},{r.threshold:.6g}\n")
    for rep in reports:
        n_f = sum(r.n_flawless for r in rep.rows)
        n_a = sum(r.n_anomalous for r in rep.rows)
        out.write(f"Average AUROC,{rep.variant},{_pct(rep.mean_auroc)},"
                  f"{n_f},{n_a},\n")
    return out.getvalue()


def _render_markdown(reports, categories, by_variant) -> str:
    variants = [r.variant for r in reports]
    lines = ["| Category | " + " | ".join(variants) + " |",
             "| --- |" + " --- |" * len(variants)]
    for cat in categories:
        cells = [_pct(by_variant[v][cat].auroc) + "%" for v in variants]
        lines.append(f"| {cat} | " + " | ".join(cells) + " |")
    avg = [_pct(rep.mean_auroc) + "%" for rep in reports]
    lines.append("| Average AUROC | " + " | ".join(avg) + " |")
    return "\n".join(lines) + "\n"
