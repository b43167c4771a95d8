"""Annotated context-free grammars, derivation traces and grammar coverage.

A grammar file is a JSON document::

    {"start": "Sentence",
     "rules": {"Sentence": [[{"ref": "Subj"}, {"t": "feels"}, ...], ...], ...},
     "sensitive": ["Subj"],
     "bias": {"Subj": [0, 1, 2]},
     "prob_rules": ["Subj"]}

Sensitive and prob rules must have single-terminal alternatives, since they
are the slots that get mutated and re-weighted.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

MAX_DEPTH = 64

_PUNCT_SPACE = re.compile(r"\s+([.,!?;:])")


class GrammarError(Exception):
    pass


class SchemaError(GrammarError):
    pass


class UnresolvedRef(GrammarError):
    pass


class SensitiveArity(GrammarError):
    pass


class GrammarRecursionError(GrammarError):
    """Grammar is recursive or deeper than MAX_DEPTH."""


class DepthExceeded(GrammarError):
    pass


class TraceMismatch(GrammarError):
    pass


@dataclass(frozen=True)
class RuleRef:
    name: str


@dataclass(frozen=True)
class Terminal:
    literal: str


Item = Union[RuleRef, Terminal]


@dataclass(frozen=True)
class Alternative:
    items: tuple[Item, ...]

    @cached_property
    def literals(self) -> tuple[str, ...]:
        """Distinct terminal literals of this alternative, in order."""
        seen: dict[str, None] = {}
        for it in self.items:
            if isinstance(it, Terminal):
                seen.setdefault(it.literal)
        return tuple(seen)

    @property
    def leaf(self) -> str | None:
        if len(self.items) == 1 and isinstance(self.items[0], Terminal):
            return self.items[0].literal
        return None


@dataclass(frozen=True)
class Choice:
    rule: str
    alt: int
    literal: str | None = None


@dataclass(frozen=True)
class DerivationTrace:
    choices: tuple[Choice, ...]
    sentence: str

    def sites(self, rule: str) -> list[int]:
        return [i for i, c in enumerate(self.choices) if c.rule == rule]

    def to_json(self) -> list:
        return [[c.rule, c.alt] for c in self.choices]


@dataclass(frozen=True)
class Grammar:
    start: str
    rules: Mapping[str, tuple[Alternative, ...]]
    sensitive: frozenset[str] = frozenset()
    bias: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    prob_rules: frozenset[str] = frozenset()
    labels: Mapping[str, str] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        _validate(self)

    def __hash__(self):
        return id(self)

    def allowed(self, rule: str) -> tuple[int, ...]:
        """Alternative indices of `rule` left after the bias mask."""
        if rule in self.bias:
            return self.bias[rule]
        return tuple(range(len(self.rules[rule])))

    def leaf_index(self, rule: str, literal: str) -> int:
        for i, alt in enumerate(self.rules[rule]):
            if alt.leaf == literal:
                return i
        raise KeyError(f"{rule!r} has no alternative {literal!r}")

    @cached_property
    def terminals(self) -> tuple[tuple[str, str], ...]:
        """Every (rule, literal) terminal, in grammar order."""
        out: dict[tuple[str, str], None] = {}
        for name, alts in self.rules.items():
            for alt in alts:
                for lit in alt.literals:
                    out.setdefault((name, lit))
        return tuple(out)

    @property
    def n_terminals(self) -> int:
        return len(self.terminals)

    def render(self, choices: Sequence[Choice]) -> str:
        return replay(self, choices).sentence

    def to_dict(self) -> dict:
        doc = {
            "start": self.start,
            "rules": {
                name: [[_item_json(it) for it in alt.items] for alt in alts]
                for name, alts in self.rules.items()
            },
            "sensitive": sorted(self.sensitive),
        }
        if self.bias:
            doc["bias"] = {k: list(v) for k, v in self.bias.items()}
        if self.prob_rules:
            doc["prob_rules"] = sorted(self.prob_rules)
        if self.labels:
            doc["labels"] = dict(self.labels)
        return doc


def _item_json(it: Item) -> dict:
    if isinstance(it, RuleRef):
        return {"ref": it.name}
    return {"t": it.literal}


def join_tokens(tokens: Iterable[str]) -> str:
    return _PUNCT_SPACE.sub(r"\1", " ".join(tokens))


def _validate(g: Grammar) -> None:
    if g.start not in g.rules:
        raise UnresolvedRef(f"start rule {g.start!r} is not defined")
    for name, alts in g.rules.items():
        if not alts:
            raise SchemaError(f"rule {name!r} has no alternatives")
        for alt in alts:
            if not alt.items:
                raise SchemaError(f"rule {name!r} has an empty alternative")
            for it in alt.items:
                if isinstance(it, RuleRef) and it.name not in g.rules:
                    raise UnresolvedRef(f"{name!r} refers to undefined rule {it.name!r}")
                if isinstance(it, Terminal) and not it.literal:
                    raise SchemaError(f"rule {name!r} has an empty terminal")
    for name in g.sensitive | g.prob_rules:
        if name not in g.rules:
            raise UnresolvedRef(f"annotated rule {name!r} is not defined")
        leaves = [alt.leaf for alt in g.rules[name]]
        if any(leaf is None for leaf in leaves):
            raise SchemaError(f"annotated rule {name!r} must have single-terminal alternatives")
        if len(set(leaves)) != len(leaves):
            raise SchemaError(f"annotated rule {name!r} has duplicate alternatives")
    for name, idx in g.bias.items():
        if name not in g.rules:
            raise UnresolvedRef(f"bias rule {name!r} is not defined")
        n = len(g.rules[name])
        if not idx or any(not 0 <= i < n for i in idx) or len(set(idx)) != len(idx):
            raise SchemaError(f"bias mask for {name!r} is invalid: {list(idx)}")
    for name in g.sensitive:
        if len(g.allowed(name)) < 2:
            raise SensitiveArity(f"sensitive rule {name!r} needs at least 2 alternatives")
    for name, label in g.labels.items():
        if name not in g.rules:
            raise UnresolvedRef(f"label rule {name!r} is not defined")
    _check_depth(g)


def _check_depth(g: Grammar) -> None:
    depth: dict[str, int] = {}
    visiting: set[str] = set()

    def visit(name: str) -> int:
        if name in depth:
            return depth[name]
        if name in visiting:
            raise GrammarRecursionError(f"rule {name!r} is recursive")
        visiting.add(name)
        d = 1
        for alt in g.rules[name]:
            for it in alt.items:
                if isinstance(it, RuleRef):
                    d = max(d, 1 + visit(it.name))
        visiting.discard(name)
        depth[name] = d
        return d

    for name in g.rules:
        if visit(name) > MAX_DEPTH:
            raise GrammarRecursionError(f"rule {name!r} derives deeper than {MAX_DEPTH}")


def parse_grammar(source: bytes | str, name: str = "") -> Grammar:
    try:
        doc = json.loads(source)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"grammar is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("grammar document must be an object")
    try:
        start = doc["start"]
        raw_rules = doc["rules"]
    except KeyError as exc:
        raise SchemaError(f"missing key {exc}") from exc
    if not isinstance(start, str) or not isinstance(raw_rules, dict):
        raise SchemaError("'start' must be a string and 'rules' an object")

    rules: dict[str, tuple[Alternative, ...]] = {}
    for rname, alts in raw_rules.items():
        if not isinstance(alts, list):
            raise SchemaError(f"rule {rname!r} must be a list of alternatives")
        parsed = []
        for alt in alts:
            if not isinstance(alt, list):
                raise SchemaError(f"alternative of {rname!r} must be a list")
            items: list[Item] = []
            for it in alt:
                if isinstance(it, dict) and set(it) == {"ref"} and isinstance(it["ref"], str):
                    items.append(RuleRef(it["ref"]))
                elif isinstance(it, dict) and set(it) == {"t"} and isinstance(it["t"], str):
                    items.append(Terminal(it["t"]))
                else:
                    raise SchemaError(f"bad item in {rname!r}: {it!r}")
            parsed.append(Alternative(tuple(items)))
        rules[rname] = tuple(parsed)

    sensitive = _str_list(doc.get("sensitive", []), "sensitive")
    bias_raw = doc.get("bias", {}) or {}
    if not isinstance(bias_raw, dict):
        raise SchemaError("'bias' must be an object")
    bias = {}
    for k, v in bias_raw.items():
        if not isinstance(v, list) or not all(isinstance(i, int) for i in v):
            raise SchemaError(f"bias mask for {k!r} must be a list of indices")
        bias[k] = tuple(v)
    if "prob_rules" in doc:
        prob_rules = _str_list(doc["prob_rules"], "prob_rules")
    else:
        prob_rules = list(sensitive)
    labels = doc.get("labels", {}) or {}
    if not isinstance(labels, dict) or not all(isinstance(v, str) for v in labels.values()):
        raise SchemaError("'labels' must map rule names to labels")

    return Grammar(
        start=start,
        rules=rules,
        sensitive=frozenset(sensitive),
        bias=bias,
        prob_rules=frozenset(prob_rules),
        labels=dict(labels),
        name=name,
    )


def _str_list(value, key: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{key!r} must be a list of rule names")
    return value


SHIPPED = ("coref-ambiguous", "coref-unambiguous", "mlm", "sentiment")


def load_grammar(path_or_name: str | Path) -> Grammar:
    """Load a grammar from a file path or by shipped name."""
    if str(path_or_name) in SHIPPED:
        name = str(path_or_name)
        data = resources.files("fairgram.grammars").joinpath(f"{name}.json").read_bytes()
        return parse_grammar(data, name=name)
    p = Path(path_or_name)
    return parse_grammar(p.read_bytes(), name=p.stem)


@dataclass(frozen=True)
class WeightTable:
    weights: Mapping[str, tuple[float, ...]]

    def __post_init__(self):
        for rule, ws in self.weights.items():
            if any(w < 0 for w in ws):
                raise ValueError(f"negative weight in {rule!r}")
            if abs(sum(ws) - 1.0) > 1e-9:
                raise ValueError(f"weights of {rule!r} sum to {sum(ws)}")

    def __getitem__(self, rule: str) -> tuple[float, ...]:
        return self.weights[rule]

    @cached_property
    def cumulative(self) -> dict[str, tuple[float, ...]]:
        out = {}
        for rule, ws in self.weights.items():
            acc, cum = 0.0, []
            for w in ws:
                acc += w
                cum.append(acc)
            out[rule] = tuple(cum)
        return out

    def check_covers(self, g: Grammar) -> None:
        for rule, alts in g.rules.items():
            if rule not in self.weights or len(self.weights[rule]) != len(alts):
                raise ValueError(f"weight table does not cover rule {rule!r}")


def uniform_over(n: int, allowed: Sequence[int]) -> tuple[float, ...]:
    share = 1.0 / len(allowed)
    ws = [0.0] * n
    for i in allowed:
        ws[i] = share
    return tuple(ws)


def equal_prob(g: Grammar) -> WeightTable:
    return WeightTable({r: uniform_over(len(alts), g.allowed(r)) for r, alts in g.rules.items()})


def replay(g: Grammar, choices: Sequence[Choice] | Sequence[Sequence]) -> DerivationTrace:
    """Re-expand a choice sequence against `g`; raises TraceMismatch if it does not fit."""
    norm = [c if isinstance(c, Choice) else Choice(c[0], int(c[1])) for c in choices]
    out: list[Choice] = []
    tokens: list[str] = []
    pos = 0

    def expand(rule: str):
        nonlocal pos
        if pos >= len(norm):
            raise TraceMismatch(f"trace ended before expanding {rule!r}")
        c = norm[pos]
        pos += 1
        alts = g.rules.get(c.rule)
        if c.rule != rule or alts is None or not 0 <= c.alt < len(alts):
            raise TraceMismatch(f"expected a choice for {rule!r}, got {c.rule!r}/{c.alt}")
        alt = alts[c.alt]
        out.append(Choice(rule, c.alt, alt.leaf))
        for it in alt.items:
            if isinstance(it, Terminal):
                tokens.append(it.literal)
            else:
                expand(it.name)

    expand(g.start)
    if pos != len(norm):
        raise TraceMismatch("trace has trailing choices")
    return DerivationTrace(tuple(out), join_tokens(tokens))


def instantiated(g: Grammar, trace: DerivationTrace) -> list[tuple[str, str]]:
    """(rule, literal) terminals produced by each expansion in the trace."""
    out = []
    for c in trace.choices:
        for lit in g.rules[c.rule][c.alt].literals:
            out.append((c.rule, lit))
    return out


@dataclass(frozen=True)
class CoverageReport:
    terminals_covered: int
    terminals_total: int
    pairs_covered: int
    pairs_total: int

    @property
    def terminal_ratio(self) -> float:
        return self.terminals_covered / self.terminals_total if self.terminals_total else 0.0

    @property
    def pair_ratio(self) -> float:
        return self.pairs_covered / self.pairs_total if self.pairs_total else 0.0

    def to_dict(self) -> dict:
        return {
            "terminals_covered": self.terminals_covered,
            "terminals_total": self.terminals_total,
            "terminal_coverage": round(self.terminal_ratio, 6),
            "pairs_covered": self.pairs_covered,
            "pairs_total": self.pairs_total,
            "pair_coverage": round(self.pair_ratio, 6),
        }


def coverage(
    traces: Iterable[DerivationTrace | Sequence[DerivationTrace]], g: Grammar
) -> CoverageReport:
    """Terminal and sensitive-pairwise coverage.

    Each element is one test case: either a single trace or the traces of
    all its sentences. Pairs couple a sensitive-rule terminal with a
    terminal of any other rule that occurs in the same test case.
    """
    all_terms = set(g.terminals)
    sens_terms = {t for t in all_terms if t[0] in g.sensitive}
    other_terms = all_terms - sens_terms
    covered: set[tuple[str, str]] = set()
    pairs: set[tuple[tuple[str, str], tuple[str, str]]] = set()

    for case in traces:
        group = [case] if isinstance(case, DerivationTrace) else list(case)
        terms: set[tuple[str, str]] = set()
        for tr in group:
            if replay(g, tr.choices).sentence != tr.sentence:
                raise TraceMismatch(f"trace does not render to {tr.sentence!r}")
            terms.update(instantiated(g, tr))
        covered |= terms
        s_here = terms & sens_terms
        o_here = terms & other_terms
        pairs.update((s, o) for s in s_here for o in o_here)

    return CoverageReport(
        terminals_covered=len(covered),
        terminals_total=len(all_terms),
        pairs_covered=len(pairs),
        pairs_total=len(sens_terms) * len(other_terms),
    )
