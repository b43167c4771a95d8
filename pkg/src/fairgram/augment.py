"""Labelled augmentation datasets built from diagnosed error-inducing tokens."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from .diagnosis import AnomalyReport, top_k_tokens
from .generator import EPSILON, build_input, derive_rng
from .grammar import Grammar, WeightTable, equal_prob
from .oracles import LabelRule, predictive_label

MAX_UNLABELED_SHARE = 0.5
MIN_ATTEMPTS_BEFORE_CHECK = 50


class LabelCoverageError(Exception):
    pass


class GrammarExhausted(Exception):
    pass


@dataclass(frozen=True)
class AugmentationSet:
    records: tuple[tuple[str, str], ...]
    source_tokens: tuple[str, ...]
    rule: str
    percent: float
    base_size: int
    seed: int

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"text": t, "label": lab}, ensure_ascii=False) + "\n" for t, lab in self.records
        )


def target_size(percent: float, base_size: int) -> int:
    if base_size <= 0 or percent < 0:
        raise ValueError("base_size must be positive and percent non-negative")
    return int(math.floor(percent / 100.0 * base_size + 0.5))


def restricted_weights(g: Grammar, rule: str, rates: dict[str, float]) -> WeightTable:
    weights = dict(equal_prob(g).weights)
    alts = g.rules[rule]
    ws = [0.0] * len(alts)
    for i, alt in enumerate(alts):
        if alt.leaf in rates:
            ws[i] = max(rates[alt.leaf], EPSILON)
    total = sum(ws)
    weights[rule] = tuple(w / total for w in ws)
    return WeightTable(weights)


def build_augmentation(
    g: Grammar,
    report: AnomalyReport,
    k: int,
    percent: float,
    base_size: int,
    label_rules: Sequence[LabelRule],
    seed: int = 0,
    rule: str | None = None,
    max_attempts_factor: int = 200,
) -> AugmentationSet:
    """Fresh sentences whose diagnosed rule is limited to its top-k tokens.

    The top-k tokens are weighted by their error rates; every kept sentence
    is distinct and carries a label from the predictive oracle.
    """
    size = target_size(percent, base_size)
    if rule is None:
        top = top_k_tokens(report, 1)
        if not top:
            raise ValueError("diagnosis report is empty")
        rule = top[0][0]
    chosen = top_k_tokens(report, k, rule)
    if not chosen:
        raise ValueError(f"no diagnosed tokens for rule {rule!r}")
    tokens = tuple(t for _, t in chosen)
    if size == 0:
        return AugmentationSet((), tokens, rule, percent, base_size, seed)
    rates = {t: report.get(rule, t).error_rate for t in tokens}
    w = restricted_weights(g, rule, rates)

    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    attempts = unlabeled = 0
    limit = max(size * max_attempts_factor, 1000)
    while len(records) < size:
        if attempts >= limit:
            raise GrammarExhausted(
                f"only {len(records)} distinct labelled sentences after {attempts} attempts; "
                f"{size} requested"
            )
        trace = build_input(g, w, derive_rng(seed, "augment", attempts))
        attempts += 1
        used = {c.literal for c in trace.choices if c.rule == rule}
        if not used & set(tokens) or trace.sentence in seen:
            continue
        label = predictive_label(trace.sentence, label_rules)
        if label is None:
            unlabeled += 1
            if attempts >= MIN_ATTEMPTS_BEFORE_CHECK and unlabeled / attempts > MAX_UNLABELED_SHARE:
                raise LabelCoverageError(
                    f"{unlabeled} of {attempts} generated sentences have no label"
                )
            continue
        seen.add(trace.sentence)
        records.append((trace.sentence, label))
    return AugmentationSet(tuple(records), tokens, rule, percent, base_size, seed)
