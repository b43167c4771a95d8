"""Median-absolute-deviation fault diagnosis over per-token error rates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import median
from typing import Sequence

log = logging.getLogger(__name__)

THRESHOLD = 2.0
MIN_TERMINALS = 3


class EmptyInput(ValueError):
    pass


def mad(xs: Sequence[float]) -> float:
    """Raw median absolute deviation (no normal-consistency factor)."""
    if len(xs) == 0:
        raise EmptyInput("mad of an empty sequence")
    m = median(xs)
    return median([abs(x - m) for x in xs])


def anomaly_indices(xs: Sequence[float]) -> list[float]:
    """(x - median) / mad for every point.

    When mad is 0, points at the median get 0 and every other point gets
    +inf or -inf, so a lone deviant among identical values still stands out.
    """
    if len(xs) == 0:
        raise EmptyInput("anomaly indices of an empty sequence")
    m = median(xs)
    d = median([abs(x - m) for x in xs])
    if d == 0:
        return [0.0 if x == m else math.copysign(math.inf, x - m) for x in xs]
    return [(x - m) / d for x in xs]


@dataclass(frozen=True)
class TokenDiagnosis:
    rule: str
    terminal: str
    count: int
    err: int
    error_rate: float
    anomaly_index: float | None
    is_anomalous: bool


@dataclass
class AnomalyReport:
    entries: list[TokenDiagnosis]
    threshold: float = THRESHOLD
    insufficient: list[str] = field(default_factory=list)

    @property
    def anomalous(self) -> list[tuple[str, str]]:
        return [(e.rule, e.terminal) for e in self.entries if e.is_anomalous]

    def rule_entries(self, rule: str) -> list[TokenDiagnosis]:
        return [e for e in self.entries if e.rule == rule]

    def get(self, rule: str, terminal: str) -> TokenDiagnosis:
        for e in self.entries:
            if e.rule == rule and e.terminal == terminal:
                return e
        raise KeyError((rule, terminal))

    def to_table(self) -> str:
        lines = ["rule\tterminal\tcount\terr\trate\tindex\tflagged"]
        for e in self.entries:
            idx = "-" if e.anomaly_index is None else _fmt_index(e.anomaly_index)
            lines.append(
                f"{e.rule}\t{e.terminal}\t{e.count}\t{e.err}\t{e.error_rate:.6f}\t{idx}\t"
                f"{'yes' if e.is_anomalous else 'no'}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "insufficient_rules": list(self.insufficient),
            "entries": [
                {
                    "rule": e.rule,
                    "terminal": e.terminal,
                    "count": e.count,
                    "err": e.err,
                    "rate": round(e.error_rate, 9),
                    "index": None if e.anomaly_index is None else _fmt_index(e.anomaly_index),
                    "flagged": e.is_anomalous,
                }
                for e in self.entries
            ],
        }


def _fmt_index(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def fault_diagnosis(term_err, term_count, threshold: float = THRESHOLD) -> AnomalyReport:
    """Per-rule error rates, anomaly indices and outlier flags.

    Indices are computed within each production rule over the terminals
    that were actually sampled. Rules with fewer than three sampled
    terminals are reported without indices.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    by_rule: dict[str, list[tuple[str, int, int]]] = {}
    for (rule, lit), c in sorted(term_count.items()):
        if c <= 0:
            continue
        e = term_err[(rule, lit)]
        if e > c:
            raise ValueError(f"error count exceeds count for {(rule, lit)}")
        by_rule.setdefault(rule, []).append((lit, c, e))

    entries: list[TokenDiagnosis] = []
    insufficient = []
    for rule, rows in by_rule.items():
        rates = [e / c for _, c, e in rows]
        if len(rows) < MIN_TERMINALS:
            insufficient.append(rule)
            log.debug("rule %s: insufficient data (%d terminals sampled)", rule, len(rows))
            entries.extend(TokenDiagnosis(rule, lit, c, e, r, None, False)
                           for (lit, c, e), r in zip(rows, rates))
            continue
        for (lit, c, e), r, idx in zip(rows, rates, anomaly_indices(rates)):
            entries.append(TokenDiagnosis(rule, lit, c, e, r, idx, abs(idx) > threshold))
    return AnomalyReport(entries, threshold, insufficient)


def top_k_tokens(report: AnomalyReport, k: int, rule: str | None = None) -> list[tuple[str, str]]:
    if k < 1:
        raise ValueError("k must be at least 1")
    pool = report.entries if rule is None else report.rule_entries(rule)
    ranked = sorted(pool, key=lambda e: (-e.error_rate, -e.count, e.terminal, e.rule))
    return [(e.rule, e.terminal) for e in ranked[:k]]
