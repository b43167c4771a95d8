import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairgram.generator import build_input, derive_rng
from fairgram.grammar import (
    SHIPPED,
    Choice,
    GrammarRecursionError,
    SchemaError,
    SensitiveArity,
    TraceMismatch,
    UnresolvedRef,
    WeightTable,
    coverage,
    equal_prob,
    load_grammar,
    parse_grammar,
    replay,
)

from conftest import R, T, toy


def test_unambiguous_coref_size():
    g = load_grammar("coref-unambiguous")
    assert len(g.rules) == 16
    assert g.n_terminals == 92


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_grammars_load(name):
    g = load_grammar(name)
    assert g.sensitive
    assert g.prob_rules <= set(g.rules)


def test_minimal_grammar():
    g = parse_grammar(b'{"start": "S", "rules": {"S": [[{"t": "a"}]]}}')
    assert len(g.rules) == 1
    assert g.n_terminals == 1


def test_sensitive_rule_needs_two_alternatives():
    with pytest.raises(SensitiveArity):
        toy({"S": [[R("P")]], "P": [[T("He")]]}, sensitive=["P"])


def test_bias_can_leave_sensitive_rule_too_small():
    with pytest.raises(SensitiveArity):
        toy({"S": [[R("P")]], "P": [[T("He")], [T("She")]]}, sensitive=["P"], bias={"P": [0]})


def test_unresolved_reference():
    with pytest.raises(UnresolvedRef):
        toy({"S": [[R("Missing")]]})
    with pytest.raises(UnresolvedRef):
        toy({"S": [[T("a")]]}, start="Nope")


@pytest.mark.parametrize("rules", [
    {"S": [[R("S"), T("a")]]},
    {"S": [[R("A")]], "A": [[T("x"), R("B")]], "B": [[R("A")], [T("y")]]},
])
def test_recursion_rejected(rules):
    with pytest.raises(GrammarRecursionError):
        toy(rules)


def test_depth_limit():
    rules = {f"R{i}": [[R(f"R{i + 1}")]] for i in range(70)}
    rules["R70"] = [[T("x")]]
    with pytest.raises(GrammarRecursionError):
        toy(rules, start="R0")
    shallow = {f"R{i}": [[R(f"R{i + 1}")]] for i in range(63)}
    shallow["R63"] = [[T("x")]]
    assert toy(shallow, start="R0").render([Choice(f"R{i}", 0) for i in range(64)]) == "x"


@pytest.mark.parametrize("source", [
    b"not json",
    b"[]",
    b'{"rules": {}}',
    b'{"start": "S", "rules": {"S": []}}',
    b'{"start": "S", "rules": {"S": [[]]}}',
    b'{"start": "S", "rules": {"S": [[{"t": ""}]]}}',
    b'{"start": "S", "rules": {"S": [[{"x": "a"}]]}}',
    b'{"start": "S", "rules": {"S": [[{"t": "a"}]]}, "bias": {"S": [3]}}',
    b'{"start": "S", "rules": {"S": [[{"t": "a"}, {"t": "b"}], [{"t": "c"}]]}, "sensitive": ["S"]}',
])
def test_schema_errors(source):
    with pytest.raises(SchemaError):
        parse_grammar(source)


def test_prob_rules_must_exist():
    with pytest.raises(UnresolvedRef):
        toy({"S": [[T("a")]]}, prob_rules=["Nope"])


def test_equal_prob_uniform():
    g = toy({"S": [[R("A"), R("B")]], "A": [[T(c)] for c in "wxyz"], "B": [[T("p")], [T("q")]]})
    w = equal_prob(g)
    assert w["A"] == (0.25, 0.25, 0.25, 0.25)
    assert w["B"] == (0.5, 0.5)


def test_equal_prob_with_bias():
    g = toy({"S": [[R("N")]], "N": [[T(c)] for c in "abcde"]}, bias={"N": [1, 3]})
    assert equal_prob(g)["N"] == (0.0, 0.5, 0.0, 0.5, 0.0)


def test_weight_table_validation():
    with pytest.raises(ValueError):
        WeightTable({"A": (0.5, 0.6)})
    with pytest.raises(ValueError):
        WeightTable({"A": (1.5, -0.5)})


def test_coverage_exhaustive_toy():
    g = toy({"S": [[T("a")], [T("b")], [T("c")]]})
    traces = [replay(g, [Choice("S", i)]) for i in range(3)]
    cov = coverage(traces, g)
    assert (cov.terminals_covered, cov.terminals_total) == (3, 3)


def test_coverage_empty():
    g = load_grammar("coref-unambiguous")
    cov = coverage([], g)
    assert cov.terminals_covered == 0 and cov.pairs_covered == 0
    assert cov.terminals_total == 92
    assert cov.pairs_total == 2 * 90


def test_coverage_pairs(pronoun_grammar):
    g = pronoun_grammar
    he = replay(g, [("S", 0), ("Occ", 0), ("Pron", 0)])
    she = replay(g, [("S", 0), ("Occ", 0), ("Pron", 1)])
    cov = coverage([[he, she]], g)
    # sensitive {He, She} x other {The, left., waved., farmer}
    assert cov.pairs_covered == 8
    assert cov.pairs_total == 2 * 6


def test_coverage_rejects_foreign_trace(pronoun_grammar):
    g = pronoun_grammar
    good = replay(g, [("S", 0), ("Occ", 0), ("Pron", 0)])
    with pytest.raises(TraceMismatch):
        coverage([good.__class__(good.choices, "something else")], g)
    with pytest.raises(TraceMismatch):
        replay(g, [("S", 0), ("Pron", 0)])


@pytest.mark.parametrize("name", SHIPPED)
def test_replay_determinism(name):
    g = load_grammar(name)
    w = equal_prob(g)
    for i in range(300):
        tr = build_input(g, w, derive_rng(7, i))
        again = replay(g, tr.choices)
        assert again == tr
        assert replay(g, tr.to_json()).sentence == tr.sentence


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 10_000), max_size=40), st.integers(0, 10_000))
def test_coverage_monotone(seeds, extra):
    g = load_grammar("coref-unambiguous")
    w = equal_prob(g)
    traces = [build_input(g, w, random.Random(s)) for s in seeds]
    before = coverage(traces, g)
    after = coverage(traces + [build_input(g, w, random.Random(extra))], g)
    assert after.terminals_covered >= before.terminals_covered
    assert after.pairs_covered >= before.pairs_covered


def test_to_dict_round_trip():
    g = load_grammar("sentiment")
    again = parse_grammar(json.dumps(g.to_dict()))
    assert again.rules == g.rules
    assert again.bias == g.bias and again.sensitive == g.sensitive and again.labels == g.labels
