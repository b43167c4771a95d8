import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairgram.grammar import load_grammar
from fairgram.oracles import (
    AmbiguousRules,
    CorefOutput,
    LabelRule,
    MLMOutput,
    SAOutput,
    TaskMismatch,
    dump_label_rules,
    judge_coref,
    judge_mlm,
    judge_sa,
    label_rules_from_grammar,
    load_label_rules,
    predictive_label,
)


def sa(label):
    return SAOutput(label, {"positive": 0.8, "negative": -0.8, "neutral": 0.0}[label])


def test_sa_verdicts():
    assert judge_sa([sa("negative"), sa("positive")]).fairness_violation
    assert not judge_sa([sa("negative"), sa("negative")]).fairness_violation
    assert not judge_sa([sa("neutral")] * 3).fairness_violation


def test_coref_verdicts():
    a = CorefOutput((("farmer", "He"),))
    assert judge_coref([a, CorefOutput((("farmer", "baker"),))], ["He", "She"]).fairness_violation
    assert not judge_coref([a, CorefOutput((("farmer", "She"),))], ["He", "She"]).fairness_violation
    assert not judge_coref([CorefOutput(()), CorefOutput(())], ["He", "She"]).fairness_violation


def test_coref_chain_order_irrelevant():
    a = CorefOutput((("He", "farmer"), ("baker", "him")))
    b = CorefOutput((("him", "baker"), ("farmer", "She")))
    assert not judge_coref([a, b], ["He", "She"]).fairness_violation


def test_mlm_verdicts():
    a = MLMOutput({"his": 0.700, "her": 0.179})
    b = MLMOutput({"his": 0.182, "her": 0.179})
    assert judge_mlm([a, b], ["his", "her"], 0.5).fairness_violation
    assert not judge_mlm([a, a], ["his", "her"], 0.01).fairness_violation
    c = MLMOutput({"his": 0.30, "her": 0.35})
    d = MLMOutput({"his": 0.35, "her": 0.30})
    assert not judge_mlm([c, d], ["his", "her"], 0.15).fairness_violation


def test_mlm_tau_domain():
    a = MLMOutput({"his": 0.5})
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            judge_mlm([a, a], ["his"], tau)


def test_task_mismatch():
    with pytest.raises(TaskMismatch):
        judge_sa([sa("positive"), MLMOutput({"his": 0.1})])


def test_output_validation():
    with pytest.raises(ValueError):
        SAOutput("great", 0.1)
    with pytest.raises(ValueError):
        SAOutput("positive", 1.5)
    with pytest.raises(ValueError):
        MLMOutput({"his": 1.2})


labels = st.sampled_from(["positive", "negative", "neutral"])
conf = st.floats(0, 1, allow_nan=False)
mlm_out = st.builds(lambda h, s: MLMOutput({"his": h, "her": s}), conf, conf)


@settings(max_examples=200, deadline=None)
@given(st.lists(labels, min_size=1, max_size=6), st.randoms())
def test_sa_permutation_invariant(ls, rnd):
    outs = [sa(x) for x in ls]
    shuffled = outs[:]
    rnd.shuffle(shuffled)
    assert judge_sa(outs).fairness_violation == judge_sa(shuffled).fairness_violation


@settings(max_examples=200, deadline=None)
@given(st.lists(mlm_out, min_size=2, max_size=5), st.floats(0.01, 0.99), st.randoms())
def test_mlm_permutation_invariant(outs, tau, rnd):
    shuffled = outs[:]
    rnd.shuffle(shuffled)
    assert judge_mlm(outs, ["his", "her"], tau).fairness_violation == \
        judge_mlm(shuffled, ["his", "her"], tau).fairness_violation


@settings(max_examples=200, deadline=None)
@given(st.lists(mlm_out, min_size=2, max_size=5), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_mlm_tau_monotone(outs, tau, step):
    hi = min(tau + step, 0.99)
    if judge_mlm(outs, ["his", "her"], hi).fairness_violation:
        assert judge_mlm(outs, ["his", "her"], tau).fairness_violation


@settings(max_examples=100, deadline=None)
@given(labels, mlm_out, st.integers(1, 5))
def test_reflexive(label, m, n):
    assert not judge_sa([sa(label)] * n).fairness_violation
    assert not judge_mlm([m] * n, ["his", "her"], 0.01).fairness_violation
    c = CorefOutput((("nurse", "She"),))
    assert not judge_coref([c] * n, ["She"] * n).fairness_violation


def test_coref_judged_per_pair_of_spans():
    outs = [CorefOutput((("farmer", p),)) for p in ("He", "She", "He")]
    assert not judge_coref(outs, ["He", "She", "He"]).fairness_violation
    for perm in itertools.permutations(range(3)):
        assert not judge_coref([outs[i] for i in perm], [["He", "She", "He"][i] for i in perm]).fairness_violation


RULES = [LabelRule("excited", "positive"), LabelRule("enraged", "negative")]


def test_predictive_labels():
    assert predictive_label("The CEO feels excited.", RULES) == "positive"
    assert predictive_label("The CEO feels enraged.", RULES) == "negative"
    assert predictive_label("The CEO feels tired.", RULES) is None
    assert predictive_label("The CEO feels unexcitedly.", RULES) is None


def test_ambiguous_label_rules():
    with pytest.raises(AmbiguousRules):
        predictive_label("excited and enraged", RULES)


def test_grammar_label_rules_cover_emotions():
    g = load_grammar("sentiment")
    rules = label_rules_from_grammar(g)
    words = {r.contains: r.label for r in rules}
    assert words["excited"] == "positive" and words["enraged"] == "negative"
    assert load_label_rules(dump_label_rules(rules)) == rules
