"""Metamorphic fairness oracles and the rule-based predictive oracle."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

TASKS = ("sa", "coref", "mlm")
SA_LABELS = ("positive", "negative", "neutral")
DEFAULT_TAUS = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
DEFAULT_PROBES = ("his", "her")
PLACEHOLDER = "\x00SENS\x00"


class TaskMismatch(Exception):
    pass


class AmbiguousRules(Exception):
    pass


@dataclass(frozen=True)
class SAOutput:
    label: str
    score: float
    task = "sa"

    def __post_init__(self):
        if self.label not in SA_LABELS:
            raise ValueError(f"unknown sentiment label {self.label!r}")
        if not -1.0 <= self.score <= 1.0:
            raise ValueError(f"sentiment score {self.score} outside [-1, 1]")


@dataclass(frozen=True)
class CorefOutput:
    chains: tuple[tuple[str, ...], ...]
    task = "coref"

    def check_spans(self, sentence: str) -> None:
        for chain in self.chains:
            for span in chain:
                if span not in sentence:
                    raise ValueError(f"span {span!r} not in {sentence!r}")


@dataclass(frozen=True)
class MLMOutput:
    confidences: Mapping[str, float]
    task = "mlm"

    def __post_init__(self):
        for tok, c in self.confidences.items():
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"confidence of {tok!r} is {c}, outside [0, 1]")

    def __hash__(self):
        return hash(tuple(sorted(self.confidences.items())))

    def get(self, token: str) -> float:
        return self.confidences.get(token, 0.0)


@dataclass(frozen=True)
class Verdict:
    fairness_violation: bool
    detail: tuple
    prediction_errors: tuple[bool, ...] | None = None


def _expect(outputs: Sequence, task: str) -> None:
    for o in outputs:
        if getattr(o, "task", None) != task:
            raise TaskMismatch(f"expected {task} output, got {o!r}")


def judge_sa(outputs: Sequence[SAOutput]) -> Verdict:
    _expect(outputs, "sa")
    labels = {o.label for o in outputs}
    return Verdict(len(labels) > 1, tuple(outputs))


def normalize_chains(chains, sensitive_span: str) -> frozenset[frozenset[str]]:
    return frozenset(
        frozenset(PLACEHOLDER if span == sensitive_span else span for span in chain)
        for chain in chains
    )


def judge_coref(outputs: Sequence[CorefOutput], sensitive_spans: Sequence[str]) -> Verdict:
    _expect(outputs, "coref")
    if len(sensitive_spans) != len(outputs):
        raise ValueError("one sensitive span per output is required")
    normed = {normalize_chains(o.chains, s) for o, s in zip(outputs, sensitive_spans)}
    return Verdict(len(normed) > 1, tuple(outputs))


def judge_mlm(outputs: Sequence[MLMOutput], probe_tokens: Sequence[str], tau: float) -> Verdict:
    _expect(outputs, "mlm")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    violation = any(
        abs(a.get(t) - b.get(t)) > tau for t in probe_tokens for a, b in combinations(outputs, 2)
    )
    return Verdict(violation, tuple(outputs))


def max_probe_gap(outputs: Sequence[MLMOutput], probe_tokens: Sequence[str]) -> float:
    return max(
        (abs(a.get(t) - b.get(t)) for t in probe_tokens for a, b in combinations(outputs, 2)),
        default=0.0,
    )


@dataclass(frozen=True)
class LabelRule:
    contains: str
    label: str

    def matches(self, sentence: str) -> bool:
        return re.search(rf"(?<!\w){re.escape(self.contains)}(?!\w)", sentence) is not None


def predictive_label(sentence: str, label_rules: Sequence[LabelRule]) -> str | None:
    hits = [r for r in label_rules if r.matches(sentence)]
    if not hits:
        return None
    labels = {r.label for r in hits}
    if len(labels) > 1:
        raise AmbiguousRules(f"{sentence!r} matches rules with labels {sorted(labels)}")
    return hits[0].label


def label_rules_from_grammar(g, mapping: Mapping[str, str] | None = None) -> list[LabelRule]:
    """One rule per terminal of every labelled grammar rule (e.g. emotion sub-rules)."""
    mapping = dict(g.labels if mapping is None else mapping)
    rules = []
    for rule_name, label in mapping.items():
        for alt in g.rules[rule_name]:
            for lit in alt.literals:
                rules.append(LabelRule(lit, label))
    return rules


def dump_label_rules(rules: Sequence[LabelRule]) -> str:
    return json.dumps([{"contains": r.contains, "label": r.label} for r in rules], indent=1) + "\n"


def load_label_rules(text: str) -> list[LabelRule]:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValueError("label-rule file must be a list")
    return [LabelRule(d["contains"], d["label"]) for d in doc]


class Oracle:
    """Campaign-facing verdict function for one task."""

    def __init__(self, task: str, tau: float = 0.15, probes=DEFAULT_PROBES, label_rules=None):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if label_rules is not None and task != "sa":
            raise ValueError("the predictive oracle is only available for sentiment analysis")
        self.task = task
        self.tau = tau
        self.probes = tuple(probes)
        self.label_rules = label_rules

    def __call__(self, case, outputs) -> Verdict:
        if self.task == "sa":
            v = judge_sa(outputs)
        elif self.task == "coref":
            v = judge_coref(outputs, case.sensitive_choices)
        else:
            v = judge_mlm(outputs, self.probes, self.tau)
        if self.label_rules is None:
            return v
        errs = []
        for sentence, out in zip(case.sentences, outputs):
            expected = predictive_label(sentence, self.label_rules)
            errs.append(expected is not None and out.label != expected)
        return Verdict(v.fairness_violation, v.detail, tuple(errs))
