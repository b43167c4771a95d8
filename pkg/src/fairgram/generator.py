"""Discriminatory test-case construction and the RAND/PROB campaign loop."""

from __future__ import annotations

import bisect
import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .grammar import (
    MAX_DEPTH,
    Choice,
    DepthExceeded,
    DerivationTrace,
    Grammar,
    GrammarError,
    Terminal,
    WeightTable,
    equal_prob,
    instantiated,
    join_tokens,
    uniform_over,
)

log = logging.getLogger(__name__)

EPSILON = 0.01
SATURATION_WINDOW = 500
RAND, PROB = "rand", "prob"


class InsufficientAlternatives(GrammarError):
    pass


class MultipleSensitiveSites(GrammarError):
    """The sensitive rule is expanded zero or several times in one derivation."""


def derive_rng(seed: int, *keys) -> random.Random:
    """Independent stream for (seed, *keys); stable across processes."""
    material = repr((int(seed),) + tuple(keys)).encode()
    return random.Random(int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big"))


def _pick(cum: Sequence[float], rng: random.Random) -> int:
    u = rng.random() * cum[-1]
    return min(bisect.bisect_right(cum, u), len(cum) - 1)


def build_input(g: Grammar, w: WeightTable, rng: random.Random) -> DerivationTrace:
    cum = w.cumulative
    choices: list[Choice] = []
    tokens: list[str] = []

    def expand(rule: str, depth: int):
        if depth > MAX_DEPTH:
            raise DepthExceeded(f"derivation passed depth {MAX_DEPTH} at {rule!r}")
        idx = _pick(cum[rule], rng)
        alt = g.rules[rule][idx]
        choices.append(Choice(rule, idx, alt.leaf))
        for it in alt.items:
            if isinstance(it, Terminal):
                tokens.append(it.literal)
            else:
                expand(it.name, depth + 1)

    expand(g.start, 1)
    return DerivationTrace(tuple(choices), join_tokens(tokens))


def _walk(g: Grammar, choices: Sequence[Choice]) -> str:
    tokens: list[str] = []
    it_choices = iter(choices)

    def expand():
        c = next(it_choices)
        for it in g.rules[c.rule][c.alt].items:
            if isinstance(it, Terminal):
                tokens.append(it.literal)
            else:
                expand()

    expand()
    return join_tokens(tokens)


def substitute(g: Grammar, base: DerivationTrace, site: int, alt: int) -> DerivationTrace:
    """Swap the alternative at a single-terminal choice site."""
    c = base.choices[site]
    new_alt = g.rules[c.rule][alt]
    if new_alt.leaf is None or g.rules[c.rule][c.alt].leaf is None:
        raise GrammarError(f"{c.rule!r} is not a single-terminal rule")
    choices = list(base.choices)
    choices[site] = Choice(c.rule, alt, new_alt.leaf)
    return DerivationTrace(tuple(choices), _walk(g, choices))


def sensitive_site(base: DerivationTrace, sens: str) -> int:
    sites = base.sites(sens)
    if len(sites) != 1:
        raise MultipleSensitiveSites(
            f"{sens!r} is expanded {len(sites)} times in {base.sentence!r}; expected exactly once"
        )
    return sites[0]


def mutate_input(
    g: Grammar, base: DerivationTrace, sens: str, k: int, rng: random.Random
) -> list[DerivationTrace]:
    if k <= 0:
        return []
    site = sensitive_site(base, sens)
    current = base.choices[site].alt
    remaining = [i for i in g.allowed(sens) if i != current]
    if len(remaining) < k:
        raise InsufficientAlternatives(
            f"{sens!r} has {len(remaining)} alternatives left, {k} mutations requested"
        )
    return [substitute(g, base, site, i) for i in rng.sample(remaining, k)]


@dataclass(frozen=True)
class TestCase:
    sentences: tuple[str, ...]
    traces: tuple[DerivationTrace, ...]
    sensitive_rule: str
    sensitive_choices: tuple[str, ...]

    __test__ = False  # not a pytest class

    @property
    def base_trace(self) -> DerivationTrace:
        return self.traces[0]

    @property
    def key(self) -> frozenset[str]:
        return frozenset(self.sentences)

    def to_json(self) -> dict:
        return {
            "sentences": list(self.sentences),
            "sensitive_rule": self.sensitive_rule,
            "sensitive_choices": list(self.sensitive_choices),
            "trace": self.base_trace.to_json(),
        }


def build_test(
    g: Grammar, n: int, w: WeightTable, sens: str, rng: random.Random
) -> TestCase:
    if n < 1:
        raise ValueError("n must be at least 1")
    base = build_input(g, w, rng)
    site = sensitive_site(base, sens)
    traces = [base] + mutate_input(g, base, sens, n - 1, rng)
    return TestCase(
        sentences=tuple(t.sentence for t in traces),
        traces=tuple(traces),
        sensitive_rule=sens,
        sensitive_choices=tuple(t.choices[site].literal for t in traces),
    )


def case_from_json(g: Grammar, doc: dict) -> TestCase:
    from .grammar import replay

    base = replay(g, doc["trace"])
    sens = doc["sensitive_rule"]
    site = sensitive_site(base, sens)
    traces = [base] + [
        substitute(g, base, site, g.leaf_index(sens, lit)) for lit in doc["sensitive_choices"][1:]
    ]
    return TestCase(
        tuple(t.sentence for t in traces), tuple(traces), sens, tuple(doc["sensitive_choices"])
    )


class TokenCountMap:
    """Per-rule, per-terminal tallies."""

    def __init__(self, counts: dict[tuple[str, str], int] | None = None):
        self.counts: dict[tuple[str, str], int] = dict(counts or {})

    def add(self, g: Grammar, traces: Iterable[DerivationTrace]) -> None:
        for tr in traces:
            for key in instantiated(g, tr):
                self.counts[key] = self.counts.get(key, 0) + 1

    def __getitem__(self, key: tuple[str, str]) -> int:
        return self.counts.get(key, 0)

    def __eq__(self, other):
        return isinstance(other, TokenCountMap) and self.counts == other.counts

    def __len__(self):
        return len(self.counts)

    def items(self):
        return self.counts.items()

    def keys(self):
        return self.counts.keys()

    def copy(self) -> "TokenCountMap":
        return TokenCountMap(self.counts)

    def rule_items(self, rule: str) -> list[tuple[str, int]]:
        return [(lit, n) for (r, lit), n in self.counts.items() if r == rule]

    def to_json(self) -> list:
        return [[r, lit, n] for (r, lit), n in sorted(self.counts.items())]

    @classmethod
    def from_json(cls, rows) -> "TokenCountMap":
        return cls({(r, lit): int(n) for r, lit, n in rows})

    def __repr__(self):
        return f"TokenCountMap({len(self.counts)} terminals)"


@dataclass
class Record:
    phase: str
    iteration: int
    case: TestCase
    violation: bool
    prediction_errors: tuple[bool, ...] | None = None


@dataclass
class PhaseStats:
    iterations: int = 0
    unique: int = 0
    violations: int = 0
    duplicates: int = 0
    mut_errors: int = 0
    prediction_errors: int = 0

    @property
    def error_rate(self) -> float:
        return self.violations / self.unique if self.unique else 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "unique_test_cases": self.unique,
            "violations": self.violations,
            "error_rate": round(self.error_rate, 6),
            "duplicates": self.duplicates,
            "mut_errors": self.mut_errors,
            "prediction_errors": self.prediction_errors,
        }


@dataclass
class CampaignState:
    seed: int = 0
    phase: str = RAND
    records: list[Record] = field(default_factory=list)
    seen: set[frozenset[str]] = field(default_factory=set)
    term_count: TokenCountMap = field(default_factory=TokenCountMap)
    term_err: TokenCountMap = field(default_factory=TokenCountMap)
    stats: dict[str, PhaseStats] = field(default_factory=dict)
    iters: int = 0

    @property
    def s_count(self) -> set[frozenset[str]]:
        return self.seen

    @property
    def s_err(self) -> set[frozenset[str]]:
        return {r.case.key for r in self.records if r.violation}

    def phase_records(self, phase: str) -> list[Record]:
        return [r for r in self.records if r.phase == phase]


Oracle = Callable[[TestCase, list], object]


def get_probabilities(
    g: Grammar,
    term_count: TokenCountMap,
    term_err: TokenCountMap,
    prob_rules: Iterable[str],
    epsilon: float = EPSILON,
) -> WeightTable:
    """Weights for prob rules proportional to floored per-terminal error rates."""
    weights = dict(equal_prob(g).weights)
    for rule in prob_rules:
        alts = g.rules[rule]
        allowed = g.allowed(rule)
        rates = {}
        for i in allowed:
            lit = alts[i].leaf
            c = term_count[(rule, lit)]
            rates[i] = term_err[(rule, lit)] / c if c else 0.0
        if not any(rates.values()):
            weights[rule] = uniform_over(len(alts), allowed)
            continue
        floored = {i: max(r, epsilon) for i, r in rates.items()}
        total = sum(floored.values())
        ws = [0.0] * len(alts)
        for i, r in floored.items():
            ws[i] = r / total
        weights[rule] = tuple(ws)
    return WeightTable(weights)


def evaluate_all(f, sentences: Sequence[str], workers: int = 1) -> list:
    """Query `f` for every sentence; failed items come back as the exception."""
    from .mut import MUTError

    def one(s):
        try:
            return f.evaluate(s)
        except MUTError as exc:
            return exc

    if workers <= 1 or len(sentences) <= 1:
        return [one(s) for s in sentences]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, sentences))


def run_phase(
    f,
    g: Grammar,
    n: int,
    w: WeightTable,
    sens: str,
    iters: int,
    state: CampaignState,
    oracle: Oracle,
    phase: str = RAND,
    workers: int = 1,
    saturation: bool = False,
) -> CampaignState:
    """Run `iters` iterations of test generation and judging into `state`.

    Each iteration draws from its own stream derived from (seed, phase, i),
    so results do not depend on `workers`. With `saturation`, the phase
    also stops once two consecutive windows add no unique test case.
    """
    from .mut import MUTError

    w.check_covers(g)
    stats = state.stats.setdefault(phase, PhaseStats())
    state.phase = phase
    idle_windows = 0
    start = 0
    while start < iters:
        stop = min(start + SATURATION_WINDOW, iters)
        fresh: list[tuple[int, TestCase]] = []
        chunk_keys: set[frozenset[str]] = set()
        for i in range(start, stop):
            tc = build_test(g, n, w, sens, derive_rng(state.seed, phase, i))
            if tc.key in state.seen or tc.key in chunk_keys:
                stats.duplicates += 1
                continue
            chunk_keys.add(tc.key)
            fresh.append((i, tc))
        flat = [s for _, tc in fresh for s in tc.sentences]
        outputs = evaluate_all(f, flat, workers)
        added = 0
        pos = 0
        for i, tc in fresh:
            outs = outputs[pos : pos + len(tc.sentences)]
            pos += len(tc.sentences)
            errs = [o for o in outs if isinstance(o, MUTError)]
            if errs:
                stats.mut_errors += 1
                log.warning("MUT failed on iteration %d (%s); test case discarded", i, errs[0])
                continue
            verdict = oracle(tc, outs)
            state.seen.add(tc.key)
            state.term_count.add(g, tc.traces)
            stats.unique += 1
            added += 1
            if verdict.fairness_violation:
                stats.violations += 1
                state.term_err.add(g, tc.traces)
            perr = verdict.prediction_errors
            if perr is not None and any(perr):
                stats.prediction_errors += 1
            state.records.append(
                Record(phase, i, tc, verdict.fairness_violation,
                       tuple(perr) if perr is not None else None)
            )
        stats.iterations += stop - start
        state.iters += stop - start
        start = stop
        if saturation:
            idle_windows = idle_windows + 1 if added == 0 else 0
            if idle_windows >= 2:
                log.info("phase %s saturated after %d iterations", phase, stop)
                break
    return state


@dataclass
class CampaignResult:
    state: CampaignState
    rand_report: object
    rand_count: TokenCountMap
    rand_err: TokenCountMap
    prob_weights: WeightTable | None

    def error_rate(self, phase: str) -> float:
        return self.state.stats[phase].error_rate


def run_individual_campaign(
    f,
    g: Grammar,
    n: int,
    sens: str,
    iters: int,
    prob_rules: Iterable[str] | None,
    oracle: Oracle,
    seed: int = 0,
    workers: int = 1,
    threshold: float = 2.0,
    phases: Sequence[str] = (RAND, PROB),
    saturation: bool = False,
) -> CampaignResult:
    from .diagnosis import fault_diagnosis

    prob_rules = sorted(g.prob_rules if prob_rules is None else prob_rules)
    state = CampaignState(seed=seed)
    run_phase(f, g, n, equal_prob(g), sens, iters, state, oracle, RAND, workers, saturation)
    rand_count, rand_err = state.term_count.copy(), state.term_err.copy()
    report = fault_diagnosis(rand_err, rand_count, threshold)
    weights = None
    if PROB in phases:
        weights = get_probabilities(g, rand_count, rand_err, prob_rules)
        run_phase(f, g, n, weights, sens, iters, state, oracle, PROB, workers, saturation)
    return CampaignResult(state, report, rand_count, rand_err, weights)
