"""MUSHRA response aggregation and significance testing.

Scores are 0-100 ratings, one per (listener, system, utterance). System
comparisons use paired t-tests over per-(listener, utterance) cells with
Bonferroni-Holm correction across the family of pairwise comparisons.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

INTENSITIES = ("low", "medium", "high")


@dataclass(frozen=True)
class MushraResponse:
    listener_id: str
    system: str
    utterance_id: str
    intensity: str
    score: float

    def __post_init__(self):
        if not self.listener_id or not self.system or not self.utterance_id:
            raise ValueError("empty id field in response")
        if self.intensity not in INTENSITIES:
            raise ValueError(f"intensity {self.intensity!r} not in "
                             f"{INTENSITIES}")
        if not (0.0 <= self.score <= 100.0):
            raise ValueError(f"score {self.score} outside [0, 100]")


class ResponseParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_responses_csv(path) -> list:
    """CSV with header listener_id,system,utterance_id,intensity,score."""
    expected = ["listener_id", "system", "utterance_id", "intensity", "score"]
    responses = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ResponseParseError(1, f"bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ResponseParseError(lineno, f"expected 5 fields, got "
                                         f"{len(row)}")
            try:
                responses.append(MushraResponse(
                    listener_id=row[0], system=row[1], utterance_id=row[2],
                    intensity=row[3], score=float(row[4])))
            except ValueError as exc:
                raise ResponseParseError(lineno, str(exc)) from exc
    return responses


def aggregate(responses, group_by=("system",)) -> list:
    """Per-group summary rows: mean, median, quartiles and count.

    group_by is ("system",) or ("system", "intensity").
    """
    group_by = tuple(group_by)
    if not group_by or not set(group_by) <= {"system", "intensity"}:
        raise ValueError(f"bad group_by {group_by!r}")
    if not responses:
        raise ValueError("empty response table")
    groups: dict = {}
    for r in responses:
        key = tuple(getattr(r, g) for g in group_by)
        groups.setdefault(key, []).append(r.score)
    rows = []
    for key in sorted(groups):
        # sorted so the summary is exactly invariant to row order
        scores = np.sort(np.asarray(groups[key], dtype=np.float64))
        row = dict(zip(group_by, key))
        row.update(
            mean=float(scores.mean()),
            median=float(np.median(scores)),
            q1=float(np.percentile(scores, 25)),
            q3=float(np.percentile(scores, 75)),
            n=int(scores.size),
        )
        rows.append(row)
    return rows


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on aligned score lists.

    p comes from the regularized incomplete beta form of the t survival
    function. Zero-variance differences with nonzero mean are flagged
    degenerate (p = 0); identical samples give t = 0, p = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0)
        return TTestResult(t=math.copysign(math.inf, mean), df=df, p=0.0,
                           degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=float(t), df=df, p=min(1.0, p))


def bonferroni_holm(pvalues, alpha: float = 0.05) -> list:
    """Step-down Holm rejections, returned in the input order.

    Walk the sorted p-values; reject while p_(i) <= alpha / (m - i + 1)
    and stop at the first failure.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha {alpha} outside (0, 1)")
    for p in pvalues:
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"p-value {p} outside [0, 1]")
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    reject = [False] * m
    for rank, idx in enumerate(order):  # rank 0-based
        if pvalues[idx] <= alpha / (m - rank):
            reject[idx] = True
        else:
            break
    return reject


@dataclass(frozen=True)
class TestOutcome:
    system_a: str
    system_b: str
    n: int
    t: float
    df: int
    p: float
    rank: int
    threshold: float
    reject: bool
    degenerate: bool = False


def mushra_compare(responses, alpha: float = 0.05):
    """All pairwise system comparisons with Holm correction.

    Scores are aligned on (listener, utterance) cells; cells missing for
    either system of a pair are dropped and counted. Returns
    (outcomes, dropped_cells).
    """
    systems = sorted({r.system for r in responses})
    if len(systems) < 2:
        raise ValueError("need at least 2 systems to compare")

    cells: dict = {}
    counts: dict = {}
    for r in responses:
        key = (r.system, r.listener_id, r.utterance_id)
        cells[key] = cells.get(key, 0.0) + r.score
        counts[key] = counts.get(key, 0) + 1
    for key in cells:
        cells[key] /= counts[key]

    pairs = list(itertools.combinations(systems, 2))
    results, dropped = [], 0
    for sa, sb in pairs:
        keys_a = {(l, u) for s, l, u in cells if s == sa}
        keys_b = {(l, u) for s, l, u in cells if s == sb}
        common = sorted(keys_a & keys_b)
        dropped += len(keys_a ^ keys_b)
        a = [cells[(sa, l, u)] for l, u in common]
        b = [cells[(sb, l, u)] for l, u in common]
        results.append(paired_t_test(a, b))

    pvals = [r.p for r in results]
    flags = bonferroni_holm(pvals, alpha)
    ranks = sorted(range(len(pvals)), key=lambda i: pvals[i])
    rank_of = {idx: rank for rank, idx in enumerate(ranks)}

    outcomes = []
    for i, ((sa, sb), res) in enumerate(zip(pairs, results)):
        rank = rank_of[i]
        outcomes.append(TestOutcome(
            system_a=sa, system_b=sb, n=res.df + 1, t=res.t, df=res.df,
            p=res.p, rank=rank + 1, threshold=alpha / (len(pvals) - rank),
            reject=flags[i], degenerate=res.degenerate))
    return outcomes, dropped


def write_aggregate_tsv(rows: list, path) -> None:
    cols = list(rows[0].keys())
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(
            f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c])
            for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
