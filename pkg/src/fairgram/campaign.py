"""Campaign orchestration, on-disk artifacts and reports."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentationSet, build_augmentation
from .diagnosis import THRESHOLD, AnomalyReport, fault_diagnosis
from .generator import (
    PROB,
    RAND,
    CampaignResult,
    TokenCountMap,
    case_from_json,
    run_individual_campaign,
)
from .grammar import Grammar, coverage, load_grammar
from .group import DEFAULT_ITERS_PER_GROUP, group_table, run_group_campaign
from .mut import Handle, make_mut
from .oracles import DEFAULT_PROBES, Oracle, load_label_rules

STATE_FORMAT = 1
DEFAULT_N = {"sa": 2, "coref": 2, "mlm": 2}


class CorruptArtifact(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class Config:
    grammar_path: str
    task: str
    mut: dict
    n: int = 2
    iters: int = 3000
    seed: int = 0
    tau: float = 0.15
    phases: list = field(default_factory=lambda: [RAND, PROB])
    prob_rules: list | None = None
    sensitive: str | None = None
    threshold: float = THRESHOLD
    label_rules: str | None = None
    saturation: bool = False
    workers: int = 1
    iters_per_group: int = DEFAULT_ITERS_PER_GROUP
    probes: list = field(default_factory=lambda: list(DEFAULT_PROBES))

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("grammar_path", "task", "mut"):
            if key not in doc:
                raise ConfigError(f"config is missing {key!r}")
        cfg = cls(**doc)
        if cfg.task not in ("sa", "coref", "mlm"):
            raise ConfigError(f"unknown task {cfg.task!r}")
        if not set(cfg.phases) <= {RAND, PROB} or RAND not in cfg.phases:
            raise ConfigError("phases must include 'rand' and may add 'prob'")
        if cfg.n < 1 or cfg.iters < 0 or cfg.workers < 1:
            raise ConfigError("n >= 1, iters >= 0 and workers >= 1 are required")
        return cfg

    def echo(self) -> dict:
        doc = dict(self.__dict__)
        doc.pop("workers")
        return doc


def load_config(path: str | Path) -> Config:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return Config.from_dict(doc)


def pick_sensitive(g: Grammar, requested: str | None) -> str:
    if requested is not None:
        if requested not in g.sensitive:
            raise ConfigError(f"{requested!r} is not a sensitive rule of the grammar")
        return requested
    if not g.sensitive:
        raise ConfigError("grammar declares no sensitive rule")
    return sorted(g.sensitive)[0]


def _dump(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n")


def _jsonl(path: Path, rows) -> None:
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def record_json(r) -> dict:
    doc = r.case.to_json()
    doc.update(phase=r.phase, iteration=r.iteration, violation=r.violation)
    if r.prediction_errors is not None:
        doc["prediction_errors"] = list(r.prediction_errors)
    return doc


def cmd_test(cfg: Config, out_dir: str | Path, mut: Handle | None = None) -> dict:
    """Run RAND then PROB, write every artifact, return the structured report."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = load_grammar(cfg.grammar_path)
    sens = pick_sensitive(g, cfg.sensitive)
    labels = load_label_rules(Path(cfg.label_rules).read_text()) if cfg.label_rules else None
    oracle = Oracle(cfg.task, tau=cfg.tau, probes=cfg.probes, label_rules=labels)
    own = mut is None
    mut = mut or make_mut(cfg.mut)
    try:
        if mut.task != cfg.task:
            raise ConfigError(f"MUT serves {mut.task!r} but the campaign task is {cfg.task!r}")
        res = run_individual_campaign(
            mut, g, cfg.n, sens, cfg.iters, cfg.prob_rules, oracle,
            seed=cfg.seed, workers=cfg.workers, threshold=cfg.threshold,
            phases=cfg.phases, saturation=cfg.saturation,
        )
    finally:
        if own:
            mut.close()
    t1 = time.perf_counter()
    report = write_campaign(res, g, cfg, sens, out)
    report["timing"] = {"campaign_s": round(t1 - t0, 3), "total_s": round(time.perf_counter() - t0, 3)}
    _dump(out / "report.json", report)
    (out / "report.txt").write_text(render_report(report))
    return report


def write_campaign(res: CampaignResult, g: Grammar, cfg: Config, sens: str, out: Path) -> dict:
    st = res.state
    rows = [record_json(r) for r in st.records]
    _jsonl(out / "tests.jsonl", rows)
    _jsonl(out / "violations.jsonl", [r for r in rows if r["violation"]])
    final = fault_diagnosis(st.term_err, st.term_count, cfg.threshold)
    (out / "diagnosis.tsv").write_text(res.rand_report.to_table())
    _dump(out / "state.json", {
        "format": STATE_FORMAT,
        "grammar": cfg.grammar_path,
        "sensitive": sens,
        "seed": st.seed,
        "threshold": cfg.threshold,
        "rng_cursor": {p: s.iterations for p, s in st.stats.items()},
        "phases": {p: s.to_dict() for p, s in st.stats.items()},
        "unique": sorted(sorted(k) for k in st.seen),
        "rand_count": res.rand_count.to_json(),
        "rand_err": res.rand_err.to_json(),
        "term_count": st.term_count.to_json(),
        "term_err": st.term_err.to_json(),
    })
    cov = {}
    for phase in st.stats:
        cov[phase] = coverage([r.case.traces for r in st.phase_records(phase)], g).to_dict()
    return {
        "config": cfg.echo(),
        "seed": st.seed,
        "sensitive": sens,
        "phases": {p: s.to_dict() for p, s in st.stats.items()},
        "diagnosis": res.rand_report.to_dict(),
        "diagnosis_final": final.to_dict(),
        "anomalous": [list(t) for t in res.rand_report.anomalous],
        "coverage": cov,
        "prob_weights": (
            {r: [round(x, 9) for x in res.prob_weights[r]] for r in sorted(res.prob_weights.weights)
             if r in set(cfg.prob_rules or g.prob_rules)}
            if res.prob_weights is not None else None
        ),
    }


def render_report(report: dict) -> str:
    lines = [f"seed {report['seed']}  sensitive {report['sensitive']}", ""]
    lines.append(f"{'phase':<6} {'#unique':>8} {'#violations':>12} {'error rate':>11}")
    for p, s in report["phases"].items():
        lines.append(
            f"{p:<6} {s['unique_test_cases']:>8} {s['violations']:>12} {s['error_rate']:>11.4f}"
        )
    lines += ["", "coverage (terminals / sensitive pairs)"]
    for p, c in report["coverage"].items():
        lines.append(
            f"{p:<6} {c['terminals_covered']}/{c['terminals_total']} "
            f"({100 * c['terminal_coverage']:.1f}%)  "
            f"{c['pairs_covered']}/{c['pairs_total']} ({100 * c['pair_coverage']:.1f}%)"
        )
    lines += ["", "anomalous tokens after RAND:"]
    lines += [f"  {r}: {t}" for r, t in report["anomalous"]] or ["  none"]
    if "timing" in report:
        lines += ["", f"time {report['timing']['total_s']}s"]
    return "\n".join(lines) + "\n"


def load_state(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "state.json"
    try:
        doc = json.loads(p.read_text())
        if doc.get("format") != STATE_FORMAT:
            raise CorruptArtifact(f"{p}: unsupported state format {doc.get('format')!r}")
        for key in ("rand_count", "rand_err", "term_count", "term_err"):
            doc[key] = TokenCountMap.from_json(doc[key])
        doc["seed"] = int(doc["seed"])
        doc["threshold"] = float(doc["threshold"])
    except CorruptArtifact:
        raise
    except OSError as exc:
        raise CorruptArtifact(f"cannot read {p}: {exc}") from exc
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CorruptArtifact(f"{p} is corrupt: {exc}") from exc
    return doc


def cmd_diagnose(state_path: str | Path, phase: str = "rand", threshold: float | None = None) -> AnomalyReport:
    st = load_state(state_path)
    th = st["threshold"] if threshold is None else threshold
    if phase == "rand":
        return fault_diagnosis(st["rand_err"], st["rand_count"], th)
    if phase == "final":
        return fault_diagnosis(st["term_err"], st["term_count"], th)
    raise ValueError("phase must be 'rand' or 'final'")


def load_tests(path: str | Path, g: Grammar) -> list[tuple[str, object]]:
    p = Path(path)
    if p.is_dir():
        p = p / "tests.jsonl"
    out = []
    try:
        for n, line in enumerate(p.read_text().splitlines(), 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            out.append((doc["phase"], case_from_json(g, doc)))
    except OSError as exc:
        raise CorruptArtifact(f"cannot read {p}: {exc}") from exc
    except Exception as exc:
        raise CorruptArtifact(f"{p} line {n} is corrupt: {exc}") from exc
    return out


def cmd_coverage(tests_path: str | Path, g: Grammar) -> dict:
    cases = load_tests(tests_path, g)
    phases = list(dict.fromkeys(p for p, _ in cases)) or [RAND]
    return {
        ph: coverage([c.traces for p, c in cases if p == ph], g)
        for ph in phases
    }


def cmd_augment(
    state_path, g: Grammar, k: int, percent: float, base_size: int, label_rules, seed: int,
    rule: str | None = None, phase: str = "final",
) -> AugmentationSet:
    report = cmd_diagnose(state_path, phase)
    if rule is None:
        st = load_state(state_path)
        rule = sorted(g.prob_rules)[0] if g.prob_rules else st["sensitive"]
    return build_augmentation(g, report, k, percent, base_size, label_rules, seed, rule=rule)


def cmd_group(cfg: Config, out_dir: str | Path, mut: Handle | None = None) -> dict:
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = load_grammar(cfg.grammar_path)
    sens = pick_sensitive(g, cfg.sensitive)
    own = mut is None
    mut = mut or make_mut(cfg.mut)
    try:
        scores = run_group_campaign(
            mut, g, sens, cfg.iters_per_group, cfg.probes, cfg.seed, cfg.workers, cfg.threshold
        )
    finally:
        if own:
            mut.close()
    table = group_table(scores, mut.name)
    report = {
        "config": cfg.echo(),
        "sensitive": sens,
        "table": table,
        "groups": [s.to_dict() for s in scores],
        "timing": {"total_s": round(time.perf_counter() - t0, 3)},
    }
    _dump(out / "group.json", report)
    lines = ["mut\tprobe\tviolations\tgroups\tpct_violation"]
    lines += [f"{r['mut']}\t{r['probe']}\t{r['violations']}\t{r['groups']}\t{r['pct_violation']:.2f}"
              for r in table]
    (out / "group.tsv").write_text("\n".join(lines) + "\n")
    return report
