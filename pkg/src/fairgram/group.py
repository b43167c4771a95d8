"""Group-fairness campaign and the subset check between the two group criteria."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .diagnosis import THRESHOLD, anomaly_indices
from .generator import build_input, derive_rng, evaluate_all, sensitive_site, substitute
from .grammar import Grammar, equal_prob
from .mut import MUTError
from .oracles import DEFAULT_PROBES

log = logging.getLogger(__name__)

DEFAULT_ITERS_PER_GROUP = 150
MIN_GROUPS = 3


class CounterexampleFound(AssertionError):
    pass


@dataclass(frozen=True)
class GroupScore:
    group: str
    probe: str
    mean_score: float
    sample_count: int
    anomaly_index: float
    is_violation: bool

    def to_dict(self) -> dict:
        from .diagnosis import _fmt_index

        return {
            "group": self.group,
            "probe": self.probe,
            "mean_score": round(self.mean_score, 9),
            "samples": self.sample_count,
            "index": _fmt_index(self.anomaly_index),
            "violation": self.is_violation,
        }


def task_score(output, probe: str) -> float:
    if output.task == "mlm":
        return output.get(probe)
    if output.task == "sa":
        return 1.0 if output.label == probe else 0.0
    raise ValueError(f"no group score defined for task {output.task!r}")


def run_group_campaign(
    f,
    g: Grammar,
    sens: str,
    iters_per_group: int = DEFAULT_ITERS_PER_GROUP,
    probes: Sequence[str] = DEFAULT_PROBES,
    seed: int = 0,
    workers: int = 1,
    threshold: float = THRESHOLD,
) -> list[GroupScore]:
    """Mean probe score per sensitive token, screened by MAD anomaly index.

    Every input is drawn uniformly from the grammar and then has its
    sensitive terminal overwritten with the group token.
    """
    groups = g.allowed(sens)
    if len(groups) < MIN_GROUPS:
        raise ValueError(f"{sens!r} offers {len(groups)} groups; at least {MIN_GROUPS} are needed")
    if not probes:
        raise ValueError("at least one probe is required")
    w = equal_prob(g)
    names, means, counts = [], {p: [] for p in probes}, []
    for gi in groups:
        token = g.rules[sens][gi].leaf
        sentences = []
        for i in range(iters_per_group):
            base = build_input(g, w, derive_rng(seed, "group", token, i))
            sentences.append(substitute(g, base, sensitive_site(base, sens), gi).sentence)
        outputs = [o for o in evaluate_all(f, sentences, workers) if not isinstance(o, MUTError)]
        if len(outputs) < len(sentences):
            log.warning("group %s: %d adapter failures", token, len(sentences) - len(outputs))
        if not outputs:
            raise MUTError(f"every query for group {token!r} failed")
        names.append(token)
        counts.append(len(outputs))
        for p in probes:
            means[p].append(sum(task_score(o, p) for o in outputs) / len(outputs))

    scores = []
    for p in probes:
        for name, n, m, idx in zip(names, counts, means[p], anomaly_indices(means[p])):
            scores.append(GroupScore(name, p, m, n, idx, abs(idx) > threshold))
    return scores


def group_table(scores: Sequence[GroupScore], mut_name: str) -> list[dict]:
    rows = []
    for p in dict.fromkeys(s.probe for s in scores):
        mine = [s for s in scores if s.probe == p]
        v = sum(s.is_violation for s in mine)
        rows.append(
            {"mut": mut_name, "probe": p, "violations": v, "groups": len(mine),
             "pct_violation": round(100.0 * v / len(mine), 2)}
        )
    return rows


def traditional_violation(scores: Sequence[float]) -> bool:
    """Mean-equality group criterion: violated by any inequality at all."""
    return len(set(scores)) > 1


def anomaly_violation(scores: Sequence[float], threshold: float = THRESHOLD) -> bool:
    return any(abs(i) > threshold for i in anomaly_indices(scores))


def check_theorem1(score_sets: Sequence[Sequence[float]], threshold: float = THRESHOLD) -> dict:
    """Every anomaly-index violation must also be a mean-equality violation.

    Also reports whether some instance is a mean-equality violation that the
    anomaly criterion accepts, showing the inclusion is strict.
    """
    instances = []
    witness = None
    for k, xs in enumerate(score_sets):
        if len(xs) < MIN_GROUPS:
            raise ValueError(f"instance {k} has fewer than {MIN_GROUPS} groups")
        trad = traditional_violation(xs)
        anom = anomaly_violation(xs, threshold)
        if anom and not trad:
            raise CounterexampleFound(f"instance {k} violates only the anomaly criterion: {xs}")
        if trad and not anom and witness is None:
            witness = k
        instances.append({"traditional": trad, "anomaly": anom})
    return {
        "instances": instances,
        "implication_holds": True,
        "strict": witness is not None,
        "witness": witness,
    }
