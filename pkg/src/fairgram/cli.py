"""Command-line entry point: ``fairgram <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import campaign
from .augment import GrammarExhausted, LabelCoverageError
from .grammar import GrammarError, load_grammar
from .mut import KINDS, MUTError
from .oracles import dump_label_rules, label_rules_from_grammar, load_label_rules

log = logging.getLogger("fairgram")

EXIT_OK, EXIT_VIOLATIONS, EXIT_ERROR = 0, 1, 2


def _parse_mut(value: str) -> dict:
    if value in KINDS:
        return {"kind": value}
    if value.lstrip().startswith("{"):
        return json.loads(value)
    return json.loads(Path(value).read_text())


def _config(args) -> campaign.Config:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    if args.grammar:
        doc["grammar_path"] = args.grammar
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.workers is not None:
        doc["workers"] = args.workers
    if args.mut:
        doc["mut"] = _parse_mut(args.mut)
    if getattr(args, "task", None):
        doc["task"] = args.task
    if getattr(args, "iters", None) is not None:
        doc["iters"] = args.iters
    if isinstance(doc.get("mut"), str):
        doc["mut"] = _parse_mut(doc["mut"])
    return campaign.Config.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grammar", help="grammar file or shipped grammar name")
    common.add_argument("--config", help="campaign config (JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--workers", type=int)
    common.add_argument("--mut", help="MUT spec: a built-in kind, inline JSON or a JSON file")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="fairgram", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", parents=[common], help="individual-fairness campaign (RAND + PROB)")
    t.add_argument("--task", choices=["sa", "coref", "mlm"])
    t.add_argument("--iters", type=int)
    t.add_argument("--fail-on-violations", action="store_true")

    gp = sub.add_parser("group", parents=[common], help="group-fairness campaign")
    gp.add_argument("--task", choices=["sa", "mlm"])
    gp.add_argument("--fail-on-violations", action="store_true")

    d = sub.add_parser("diagnose", parents=[common], help="recompute diagnosis from saved state")
    d.add_argument("state", help="state.json or a campaign output directory")
    d.add_argument("--phase", choices=["rand", "final"], default="rand")
    d.add_argument("--threshold", type=float)

    a = sub.add_parser("augment", parents=[common], help="emit a labelled augmentation set")
    a.add_argument("state", help="state.json or a campaign output directory")
    a.add_argument("--top-k", type=int, default=5)
    a.add_argument("--percent", type=float, required=True)
    a.add_argument("--base-size", type=int, required=True)
    a.add_argument("--label-rules", help="label-rule JSON; defaults to the grammar's labels")
    a.add_argument("--rule", help="diagnosed rule to restrict (default: first prob rule)")
    a.add_argument("--out", help="output JSONL path (default: <out-dir>/augmentation.jsonl)")

    c = sub.add_parser("coverage", parents=[common], help="grammar coverage of saved test cases")
    c.add_argument("tests", help="tests.jsonl or a campaign output directory")

    lr = sub.add_parser("gen-label-rules", parents=[common], help="label rules from the grammar")
    lr.add_argument("--label", action="append", default=[], metavar="RULE=LABEL")
    lr.add_argument("--out", help="output path (default: stdout)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (campaign.ConfigError, campaign.CorruptArtifact, GrammarError, MUTError,
            LabelCoverageError, GrammarExhausted, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args) -> int:
    out = Path(args.out_dir)
    if args.command == "test":
        cfg = _config(args)
        report = campaign.cmd_test(cfg, out)
        print(campaign.render_report(report), end="")
        found = sum(p["violations"] for p in report["phases"].values())
        return EXIT_VIOLATIONS if args.fail_on_violations and found else EXIT_OK

    if args.command == "group":
        cfg = _config(args)
        report = campaign.cmd_group(cfg, out)
        for row in report["table"]:
            print(f"{row['mut']}\t{row['probe']}\t{row['violations']}/{row['groups']}\t"
                  f"{row['pct_violation']:.2f}%")
        found = sum(r["violations"] for r in report["table"])
        return EXIT_VIOLATIONS if args.fail_on_violations and found else EXIT_OK

    if args.command == "diagnose":
        report = campaign.cmd_diagnose(args.state, args.phase, args.threshold)
        table = report.to_table()
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnosis.tsv").write_text(table)
        print(table, end="")
        return EXIT_OK

    if args.command == "augment":
        st = campaign.load_state(args.state)
        g = load_grammar(args.grammar or st["grammar"])
        rules = (load_label_rules(Path(args.label_rules).read_text()) if args.label_rules
                 else label_rules_from_grammar(g))
        seed = args.seed if args.seed is not None else st["seed"]
        aug = campaign.cmd_augment(args.state, g, args.top_k, args.percent, args.base_size,
                                   rules, seed, rule=args.rule)
        path = Path(args.out) if args.out else out / "augmentation.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(aug.to_jsonl())
        print(f"{len(aug.records)} records from {', '.join(aug.source_tokens)} -> {path}")
        return EXIT_OK

    if args.command == "coverage":
        g = _grammar_for(args, args.tests)
        rows = campaign.cmd_coverage(args.tests, g)
        doc = {p: c.to_dict() for p, c in rows.items()}
        out.mkdir(parents=True, exist_ok=True)
        (out / "coverage.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        for p, c in rows.items():
            print(f"{p}\tterminals {c.terminals_covered}/{c.terminals_total} "
                  f"({100 * c.terminal_ratio:.1f}%)\tpairs {c.pairs_covered}/{c.pairs_total} "
                  f"({100 * c.pair_ratio:.1f}%)")
        return EXIT_OK

    if args.command == "gen-label-rules":
        if not args.grammar:
            raise campaign.ConfigError("--grammar is required")
        g = load_grammar(args.grammar)
        mapping = dict(item.split("=", 1) for item in args.label) or None
        text = dump_label_rules(label_rules_from_grammar(g, mapping))
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text, end="")
        return EXIT_OK
    raise AssertionError(args.command)


def _grammar_for(args, artifact: str):
    if args.grammar:
        return load_grammar(args.grammar)
    p = Path(artifact)
    state = (p if p.is_dir() else p.parent) / "state.json"
    return load_grammar(campaign.load_state(state)["grammar"])


if __name__ == "__main__":
    sys.exit(main())
