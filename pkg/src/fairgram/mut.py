"""Handles over models under test (MUTs).

Built-in models are pure functions of the sentence and their bias plant.
A plant maps a token to a flip probability; the random draw deciding a
flip is keyed on the sentence with every planted token masked out, so
sentences that differ only in a planted token share their draw and any
difference in outcome is caused by the token itself.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import subprocess
import sys
import threading
import urllib.error
import urllib.request
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .oracles import CorefOutput, MLMOutput, SAOutput, TASKS

log = logging.getLogger(__name__)

TOKEN_ENV = "ASTRAEA_MUT_TOKEN"
MAX_RESTARTS = 3

POSITIVE_WORDS = (
    "excited", "happy", "glad", "relieved", "ecstatic", "cheerful", "delighted", "thrilled",
    "wonderful", "amazing", "great", "funny",
)
NEGATIVE_WORDS = (
    "enraged", "angry", "sad", "annoyed", "miserable", "furious", "depressed", "anxious",
    "horrible", "gloomy", "irritating", "terrifying",
)
FEMININE = ("She", "she", "her", "Her", "hers", "herself")
MASCULINE = ("He", "he", "his", "His", "him", "himself")
PRONOUNS = FEMININE + MASCULINE


class MUTError(Exception):
    pass


class Timeout(MUTError):
    pass


class ProtocolError(MUTError):
    pass


class NonZeroExit(MUTError):
    pass


def _words_pattern(words) -> re.Pattern | None:
    words = sorted(set(words), key=len, reverse=True)
    if not words:
        return None
    return re.compile(r"(?<!\w)(" + "|".join(re.escape(w) for w in words) + r")(?!\w)")


def unit_hash(*parts) -> float:
    """Deterministic uniform draw in [0, 1) from arbitrary parts."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0**64


@dataclass(frozen=True)
class BiasPlant:
    flips: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for tok, p in self.flips.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability for {tok!r} is {p}")

    def __hash__(self):
        return hash(tuple(sorted(self.flips.items())))

    @classmethod
    def load(cls, path: str | Path) -> "BiasPlant":
        return cls(json.loads(Path(path).read_text()))


class Handle:
    """Common surface: `evaluate`, `batch_evaluate`, `close`."""

    task: str = ""
    name: str = ""
    max_inflight: int = 8

    def evaluate(self, sentence: str):
        raise NotImplementedError

    def batch_evaluate(self, sentences: Sequence[str]) -> list:
        if not sentences:
            raise ValueError("empty batch")

        def one(s):
            try:
                return self.evaluate(s)
            except MUTError as exc:
                return exc

        if self.max_inflight <= 1 or len(sentences) == 1:
            return [one(s) for s in sentences]
        with ThreadPoolExecutor(max_workers=min(self.max_inflight, len(sentences))) as pool:
            return list(pool.map(one, sentences))

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Planted(Handle):
    def __init__(self, plant: Mapping[str, float] | BiasPlant | None = None, salt: int = 0):
        self.plant = plant if isinstance(plant, BiasPlant) else BiasPlant(dict(plant or {}))
        self.salt = salt
        self._plant_re = _words_pattern(self.plant.flips)

    def _planted_in(self, sentence: str) -> list[str]:
        if self._plant_re is None:
            return []
        return self._plant_re.findall(sentence)

    def _masked(self, sentence: str, extra: re.Pattern | None = None) -> str:
        if self._plant_re is not None:
            sentence = self._plant_re.sub("\x00", sentence)
        if extra is not None:
            sentence = extra.sub("\x01", sentence)
        return sentence

    def _flip_prob(self, sentence: str) -> float:
        return max((self.plant.flips[t] for t in self._planted_in(sentence)), default=0.0)


class LexiconSA(_Planted):
    """Word-list sentiment model with plantable label flips."""

    task = "sa"
    name = "builtin-lexicon-sa"

    def __init__(self, plant=None, salt: int = 0, positive=POSITIVE_WORDS, negative=NEGATIVE_WORDS):
        super().__init__(plant, salt)
        self._pos = _words_pattern(positive)
        self._neg = _words_pattern(negative)

    def clean_label(self, sentence: str) -> str:
        pos = len(self._pos.findall(sentence))
        neg = len(self._neg.findall(sentence))
        if pos > neg:
            return "positive"
        if neg > pos:
            return "negative"
        return "neutral"

    def evaluate(self, sentence: str) -> SAOutput:
        label = self.clean_label(sentence)
        p = self._flip_prob(sentence)
        if p > 0 and unit_hash(self.salt, "sa", self._masked(sentence)) < p:
            label = "negative" if label == "positive" else "positive"
        score = {"positive": 0.8, "negative": -0.8, "neutral": 0.0}[label]
        return SAOutput(label, score)


_PRONOUN_RE = _words_pattern(PRONOUNS)
_NOUN_RE = re.compile(r"(?<!\w)[Tt]he (\w+)")


class ToyCoref(_Planted):
    """Links the pronoun to the first noun phrase, the grammatically marked antecedent.

    A planted token makes the model link the pronoun to the second noun
    phrase instead; with direction "feminine" this only happens for
    feminine pronouns.
    """

    task = "coref"
    name = "builtin-toy-coref"

    def __init__(self, plant=None, salt: int = 0, direction: str = "feminine"):
        super().__init__(plant, salt)
        if direction not in ("feminine", "any"):
            raise ValueError("direction must be 'feminine' or 'any'")
        self.direction = direction

    def evaluate(self, sentence: str) -> CorefOutput:
        pm = _PRONOUN_RE.search(sentence)
        nouns = _NOUN_RE.findall(sentence)
        if pm is None or not nouns:
            return CorefOutput(())
        pronoun = pm.group(1)
        before = _NOUN_RE.findall(sentence[: pm.start()])
        after = _NOUN_RE.findall(sentence[pm.end():])
        antecedent = before[0] if before else nouns[0]
        distractor = next((x for x in before[1:] + after if x != antecedent), None)
        p = self._flip_prob(sentence)
        if (
            p > 0
            and distractor is not None
            and (self.direction == "any" or pronoun in FEMININE)
            and unit_hash(self.salt, "coref", self._masked(sentence, _PRONOUN_RE)) < p
        ):
            antecedent = distractor
        return CorefOutput(((antecedent, pronoun),))


class TableMLM(Handle):
    """Returns fixed probe confidences per occupation found in the sentence."""

    task = "mlm"
    name = "builtin-table-mlm"

    def __init__(
        self,
        table: Mapping[str, Sequence[float]] | None = None,
        probes: Sequence[str] = ("his", "her"),
        default: Sequence[float] | None = None,
    ):
        self.probes = tuple(probes)
        self.table = {k: tuple(float(x) for x in v) for k, v in (table or {}).items()}
        self.default = tuple(default) if default is not None else tuple(0.3 for _ in self.probes)
        for key, vals in list(self.table.items()) + [("<default>", self.default)]:
            if len(vals) != len(self.probes):
                raise ValueError(f"{key!r} needs one confidence per probe")
            if any(not 0.0 <= v <= 1.0 for v in vals) or sum(vals) > 1.0 + 1e-12:
                raise ValueError(f"confidences for {key!r} must lie in [0,1] and sum to <= 1")
        self._re = _words_pattern(self.table)

    def evaluate(self, sentence: str) -> MLMOutput:
        vals = self.default
        if self._re is not None:
            m = self._re.search(sentence)
            if m:
                vals = self.table[m.group(1)]
        return MLMOutput(dict(zip(self.probes, vals)))


def encode_request(req_id: int, task: str, text: str, probes: Sequence[str] | None = None) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    doc = {"id": req_id, "task": task, "text": text}
    if probes is not None:
        doc["probes"] = list(probes)
    return json.dumps(doc, ensure_ascii=False)


def decode_request(line: str | bytes) -> dict:
    try:
        doc = json.loads(line)
    except ValueError as exc:
        raise ProtocolError(f"bad request: {exc}") from exc
    if (
        not isinstance(doc, dict)
        or not isinstance(doc.get("id"), int)
        or doc.get("task") not in TASKS
        or not isinstance(doc.get("text"), str)
    ):
        raise ProtocolError(f"bad request: {doc!r}")
    if "probes" in doc and not (
        isinstance(doc["probes"], list) and all(isinstance(p, str) for p in doc["probes"])
    ):
        raise ProtocolError("probes must be a list of strings")
    return doc


def output_to_json(out) -> dict:
    if isinstance(out, SAOutput):
        return {"sa": {"label": out.label, "score": out.score}}
    if isinstance(out, CorefOutput):
        return {"coref": [list(c) for c in out.chains]}
    if isinstance(out, MLMOutput):
        return {"mlm": dict(out.confidences)}
    raise TypeError(f"not a task output: {out!r}")


def output_from_json(doc: dict):
    try:
        if "sa" in doc:
            return SAOutput(doc["sa"]["label"], float(doc["sa"]["score"]))
        if "coref" in doc:
            return CorefOutput(tuple(tuple(str(s) for s in c) for c in doc["coref"]))
        if "mlm" in doc:
            return MLMOutput({str(k): float(v) for k, v in doc["mlm"].items()})
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError(f"malformed output payload: {exc}") from exc
    if "error" in doc:
        raise MUTError(f"MUT reported an error: {doc['error']}")
    raise ProtocolError(f"response carries no task payload: {doc!r}")


def encode_response(req_id: int, out) -> str:
    return json.dumps({"id": req_id, **output_to_json(out)}, ensure_ascii=False)


def decode_response(line: str | bytes) -> tuple[int | None, object]:
    try:
        doc = json.loads(line)
    except ValueError as exc:
        raise ProtocolError(f"bad response: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError(f"bad response: {doc!r}")
    rid = doc.get("id")
    if rid is not None and not isinstance(rid, int):
        raise ProtocolError("response id must be an integer")
    return rid, output_from_json(doc)


class SubprocessMUT(Handle):
    """Line-delimited JSON over a long-lived child process's stdin/stdout."""

    name = "subprocess"

    def __init__(
        self,
        command: Sequence[str] | str,
        task: str,
        probes: Sequence[str] | None = None,
        timeout: float = 30.0,
        max_inflight: int = 8,
        max_restarts: int = MAX_RESTARTS,
    ):
        if timeout <= 0 or max_inflight < 1:
            raise ValueError("timeout must be > 0 and max_inflight >= 1")
        self.command = command.split() if isinstance(command, str) else list(command)
        self.task = task
        self.probes = probes
        self.timeout = timeout
        self.max_inflight = max_inflight
        self.max_restarts = max_restarts
        self.restarts = 0
        self._slots = threading.BoundedSemaphore(max_inflight)
        self._lock = threading.Lock()
        self._pending: dict[int, Future] = {}
        self._next_id = 0
        self._proc: subprocess.Popen | None = None
        self._started = False

    def _spawn(self) -> None:
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        threading.Thread(target=self._reader, args=(self._proc,), daemon=True).start()

    def _ensure(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            return
        if self._started:
            if self.restarts >= self.max_restarts:
                raise NonZeroExit(
                    f"MUT process died and the restart budget ({self.max_restarts}) is spent"
                )
            self.restarts += 1
            log.warning("restarting MUT process (%d/%d)", self.restarts, self.max_restarts)
        self._started = True
        self._spawn()

    def _reader(self, proc: subprocess.Popen) -> None:
        for line in proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                rid, out = decode_response(line)
                exc = None
            except MUTError as e:
                try:
                    rid = json.loads(line).get("id")
                except (ValueError, AttributeError):
                    rid = None
                out, exc = None, e
            with self._lock:
                fut = self._pending.pop(rid, None)
            if fut is None:
                log.warning("dropping response with unknown id %r", rid)
                continue
            if exc is not None:
                fut.set_exception(exc)
            else:
                fut.set_result(out)
        code = proc.wait()
        with self._lock:
            dead = [fid for fid, f in self._pending.items() if getattr(f, "_proc", None) is proc]
            futs = [self._pending.pop(fid) for fid in dead]
        for f in futs:
            f.set_exception(NonZeroExit(f"MUT process exited with status {code}"))

    def evaluate(self, sentence: str):
        with self._slots:
            with self._lock:
                self._ensure()
                rid = self._next_id
                self._next_id += 1
                fut: Future = Future()
                fut._proc = self._proc
                self._pending[rid] = fut
                try:
                    self._proc.stdin.write(encode_request(rid, self.task, sentence, self.probes) + "\n")
                    self._proc.stdin.flush()
                except (BrokenPipeError, OSError) as exc:
                    self._pending.pop(rid, None)
                    raise NonZeroExit(f"MUT process is gone: {exc}") from exc
            try:
                return fut.result(timeout=self.timeout)
            except FutureTimeout:
                with self._lock:
                    self._pending.pop(rid, None)
                raise Timeout(f"no response within {self.timeout}s")

    def close(self) -> None:
        proc = self._proc
        if proc is not None and proc.poll() is None:
            try:
                proc.stdin.close()
                proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                proc.kill()


class HttpMUT(Handle):
    """POST /evaluate with the wire payload; any non-200 status is a MUTError."""

    name = "http"

    def __init__(
        self,
        url: str,
        task: str,
        probes: Sequence[str] | None = None,
        timeout: float = 30.0,
        max_inflight: int = 8,
        token: str | None = None,
    ):
        if timeout <= 0 or max_inflight < 1:
            raise ValueError("timeout must be > 0 and max_inflight >= 1")
        self.url = url.rstrip("/") + "/evaluate" if not url.endswith("/evaluate") else url
        self.task = task
        self.probes = probes
        self.timeout = timeout
        self.max_inflight = max_inflight
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self._slots = threading.BoundedSemaphore(max_inflight)
        self._ids = iter(range(1 << 62))
        self._id_lock = threading.Lock()

    def evaluate(self, sentence: str):
        with self._id_lock:
            rid = next(self._ids)
        body = encode_request(rid, self.task, sentence, self.probes).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    status, payload = resp.status, resp.read()
            except urllib.error.HTTPError as exc:
                raise ProtocolError(f"HTTP {exc.code} from {self.url}") from exc
            except TimeoutError as exc:
                raise Timeout(f"no response within {self.timeout}s") from exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, TimeoutError):
                    raise Timeout(f"no response within {self.timeout}s") from exc
                raise MUTError(f"cannot reach {self.url}: {exc.reason}") from exc
        if status != 200:
            raise ProtocolError(f"HTTP {status} from {self.url}")
        _, out = decode_response(payload)
        return out


KINDS = ("builtin-lexicon-sa", "builtin-table-mlm", "builtin-toy-coref", "subprocess", "http")


def _load_map(value):
    if isinstance(value, (str, Path)):
        return json.loads(Path(value).read_text())
    return value


def make_mut(spec: Mapping) -> Handle:
    """Build a handle from a MUT spec such as {"kind": "builtin-lexicon-sa", "plant": {...}}."""
    kind = spec.get("kind")
    if kind not in KINDS:
        raise ValueError(f"unknown MUT kind {kind!r}; expected one of {KINDS}")
    if kind == "builtin-lexicon-sa":
        return LexiconSA(_load_map(spec.get("plant")), salt=spec.get("salt", 0))
    if kind == "builtin-toy-coref":
        return ToyCoref(
            _load_map(spec.get("plant")),
            salt=spec.get("salt", 0),
            direction=spec.get("direction", "feminine"),
        )
    if kind == "builtin-table-mlm":
        return TableMLM(
            _load_map(spec.get("table")),
            probes=spec.get("probes", ("his", "her")),
            default=spec.get("default"),
        )
    common = dict(
        task=spec["task"],
        probes=spec.get("probes"),
        timeout=float(spec.get("timeout", 30.0)),
        max_inflight=int(spec.get("max_inflight", 8)),
    )
    if kind == "subprocess":
        cmd = spec["command"]
        if cmd == "reference":
            cmd = [sys.executable, "-m", "fairgram.reference_mut"] + list(spec.get("args", []))
        return SubprocessMUT(cmd, **common)
    return HttpMUT(spec["url"], token=spec.get("token"), **common)


def evaluate(handle: Handle, sentence: str, task: str | None = None):
    if task is not None and task != handle.task:
        raise ValueError(f"handle serves {handle.task!r}, not {task!r}")
    return handle.evaluate(sentence)


def batch_evaluate(handle: Handle, sentences: Sequence[str]) -> list:
    return handle.batch_evaluate(sentences)
