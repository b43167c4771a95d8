import json
from pathlib import Path

import pytest

from fairgram import campaign
from fairgram.cli import main
from fairgram.grammar import load_grammar
from fairgram.oracles import load_label_rules


def _config(tmp_path, **extra):
    doc = {"grammar_path": "sentiment", "task": "sa", "iters": 400, "seed": 1,
           "mut": {"kind": "builtin-lexicon-sa", "plant": {"CEO": 0.9, "nurse": 0.4}}}
    doc.update(extra)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def run(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    assert main(["test", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return out


def test_test_artifacts(run, capsys):
    for name in ("tests.jsonl", "violations.jsonl", "diagnosis.tsv", "state.json", "report.json", "report.txt"):
        assert (run / name).exists(), name
    report = json.loads((run / "report.json").read_text())
    assert set(report["phases"]) == {"rand", "prob"}
    assert report["phases"]["rand"]["violations"] > 0
    n_viol = sum(p["violations"] for p in report["phases"].values())
    assert len((run / "violations.jsonl").read_text().splitlines()) == n_viol


def test_fail_on_violations(tmp_path):
    cfg = _config(tmp_path, iters=100)
    assert main(["test", "--config", str(cfg), "--out-dir", str(tmp_path / "o"),
                 "--fail-on-violations"]) == 1
    fair = _config(tmp_path, iters=100, mut={"kind": "builtin-lexicon-sa"})
    assert main(["test", "--config", str(fair), "--out-dir", str(tmp_path / "f"),
                 "--fail-on-violations"]) == 0
    report = json.loads((tmp_path / "f" / "report.json").read_text())
    assert report["anomalous"] == []


def test_flags_without_config(tmp_path):
    code = main(["test", "--grammar", "coref-unambiguous", "--task", "coref", "--mut",
                 '{"kind": "builtin-toy-coref", "plant": {"CEO": 0.9}}', "--iters", "200",
                 "--seed", "5", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["sensitive"] == "Subj-Pronoun"


def test_diagnose_idempotent(run, tmp_path, capsys):
    assert main(["diagnose", str(run), "--out-dir", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "diagnosis.tsv").read_text() == (run / "diagnosis.tsv").read_text()
    final = campaign.cmd_diagnose(run, "final").to_dict()
    assert final == json.loads((run / "report.json").read_text())["diagnosis_final"]


def test_corrupt_state(run, tmp_path, capsys):
    st = run / "state.json"
    st.write_text(st.read_text()[:200])
    assert main(["diagnose", str(run)]) == 2
    assert "corrupt" in capsys.readouterr().err
    with pytest.raises(campaign.CorruptArtifact):
        campaign.load_state(st)


def test_missing_state(tmp_path):
    assert main(["diagnose", str(tmp_path / "nothing")]) == 2


def test_coverage_command(run, tmp_path, capsys):
    assert main(["coverage", str(run), "--out-dir", str(tmp_path / "c")]) == 0
    doc = json.loads((tmp_path / "c" / "coverage.json").read_text())
    report = json.loads((run / "report.json").read_text())
    assert doc == report["coverage"]


def test_augment_command(run, tmp_path, capsys):
    out = tmp_path / "aug.jsonl"
    assert main(["augment", str(run), "--percent", "1", "--base-size", "2000", "--out", str(out)]) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(rows) == 20
    assert all(r["label"] in ("positive", "negative") for r in rows)


def test_label_rules_round_trip(tmp_path, capsys):
    out = tmp_path / "rules.json"
    assert main(["gen-label-rules", "--grammar", "sentiment", "--out", str(out)]) == 0
    rules = load_label_rules(out.read_text())
    assert {r.label for r in rules} == {"positive", "negative"}
    assert main(["gen-label-rules"]) == 2


def test_group_command(tmp_path, capsys):
    g = load_grammar("mlm")
    names = [g.rules["Occupation"][i].leaf for i in g.allowed("Occupation")]
    table = {n: [0.4, 0.3] for n in names}
    table[names[0]] = [0.05, 0.9]
    mut = json.dumps({"kind": "builtin-table-mlm", "table": table})
    code = main(["group", "--grammar", "mlm", "--task", "mlm", "--mut", mut, "--out-dir",
                 str(tmp_path / "g"), "--fail-on-violations"])
    assert code == 1
    doc = json.loads((tmp_path / "g" / "group.json").read_text())
    assert [r["violations"] for r in doc["table"]] == [1, 1]
    assert (tmp_path / "g" / "group.tsv").read_text().startswith("mut\tprobe")


def test_group_precondition(tmp_path, capsys):
    code = main(["group", "--grammar", "coref-unambiguous", "--task", "mlm", "--mut",
                 "builtin-table-mlm", "--out-dir", str(tmp_path)])
    assert code == 2


def test_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"grammar_path": "sentiment", "task": "sa", "mut": {"kind": "x"}, "colour": 1}))
    assert main(["test", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    p.write_text(json.dumps({"grammar_path": "sentiment", "task": "mlm",
                             "mut": {"kind": "builtin-lexicon-sa"}}))
    assert main(["test", "--config", str(p), "--out-dir", str(tmp_path)]) == 2


def test_tests_round_trip(run):
    g = load_grammar("sentiment")
    cases = campaign.load_tests(run, g)
    rows = [json.loads(x) for x in (run / "tests.jsonl").read_text().splitlines()]
    assert [c.to_json()["sentences"] for _, c in cases] == [r["sentences"] for r in rows]
    state = campaign.load_state(run)
    assert len(state["unique"]) == len(rows)


def test_subprocess_campaign_matches_builtin(tmp_path):
    plant = {"CEO": 0.9}
    base = dict(grammar_path="sentiment", task="sa", iters=200, seed=2, phases=["rand"])
    a = campaign.cmd_test(campaign.Config.from_dict(
        dict(base, mut={"kind": "builtin-lexicon-sa", "plant": plant})), tmp_path / "a")
    b = campaign.cmd_test(campaign.Config.from_dict(
        dict(base, mut={"kind": "subprocess", "task": "sa", "command": "reference",
                        "args": ["--plant", json.dumps(plant)]})), tmp_path / "b")
    assert a["phases"] == b["phases"]
    assert Path(tmp_path / "a" / "tests.jsonl").read_text() == Path(tmp_path / "b" / "tests.jsonl").read_text()
