"""Synthetic fact corpus and sequential edit streams.

World model: facts are (subject, relation) -> object triples over a
small integer vocabulary carved into disjoint id ranges (edit-pool
subjects, probe-pool subjects, relations, one synonym per relation,
objects).  The pretraining corpus teaches every fact under both its
primary phrasing (s, r) and its synonym phrasing (s, syn(r)), so a
pretrained model has a paraphrase surface for generalization tests.

An edit stream is an ordered list of records; each record rewrites one
edit-pool fact to a fresh object and carries the probes the metrics
need: the paraphrase prompt x_bar, and an unrelated probe-pool fact
(x_tilde, y_tilde) whose answer must survive the edit.  Probe facts are
validated against the pretrained model at generation time, so locality
checks measure damage done by editing rather than pretraining misses.

Stream files ("stream-v1") are line-oriented text: a three-line header
(format tag, seed, generation spec), then one record per line as named
integer fields.  load_stream also accepts an external JSON file of
pre-tokenized records shaped like the usual zero-shot relation
extraction editing sets (src/alt/answers/rephrase/loc/loc_ans keys).
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint, toylm

STREAM_FORMAT = "stream-v1"


class StreamError(ValueError):
    """Invalid stream spec, record, or generation request."""


class StreamParseError(StreamError):
    """Malformed stream file; message carries the 1-based line number."""


@dataclass(frozen=True)
class StreamSpec:
    """Generation parameters for the corpus and its edit streams."""

    n_edit_facts: int = 300
    n_probe_facts: int = 100
    n_relations: int = 3
    n_objects: int = 80
    t: int = 200
    seed: int = 0
    vocab_size: int = 256

    @property
    def n_edit_subjects(self):
        return math.ceil(self.n_edit_facts / self.n_relations)

    @property
    def n_probe_subjects(self):
        return math.ceil(self.n_probe_facts / self.n_relations)

    @property
    def n_facts(self):
        return self.n_edit_facts + self.n_probe_facts

    def validate(self):
        if min(self.n_edit_facts, self.n_probe_facts, self.n_relations, self.t) < 1:
            raise StreamError("all stream spec counts must be positive")
        if self.n_objects < 2:
            raise StreamError("need at least two objects to rewrite a fact")
        needed = (
            self.n_edit_subjects
            + self.n_probe_subjects
            + 2 * self.n_relations
            + self.n_objects
        )
        if needed > self.vocab_size:
            raise StreamError(
                f"vocab partition needs {needed} tokens, vocabulary has {self.vocab_size}"
            )
        return self

    def to_dict(self):
        return {
            "n_edit_facts": self.n_edit_facts,
            "n_probe_facts": self.n_probe_facts,
            "n_relations": self.n_relations,
            "n_objects": self.n_objects,
            "t": self.t,
            "seed": self.seed,
            "vocab_size": self.vocab_size,
        }

    @staticmethod
    def from_dict(d):
        return StreamSpec(**{k: int(v) for k, v in d.items()}).validate()


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint token id ranges derived from a StreamSpec."""

    edit_subjects: range
    probe_subjects: range
    relations: range
    synonyms: range
    objects: range


def vocab_layout(spec: StreamSpec) -> VocabLayout:
    spec.validate()
    a = spec.n_edit_subjects
    b = a + spec.n_probe_subjects
    c = b + spec.n_relations
    d = c + spec.n_relations
    e = d + spec.n_objects
    return VocabLayout(range(0, a), range(a, b), range(b, c), range(c, d), range(d, e))


@dataclass(frozen=True)
class CorpusFact:
    subject: int
    relation: int
    obj: int
    pool: str  # "edit" or "probe"

    @property
    def prompt(self):
        return (self.subject, self.relation)


@dataclass
class Corpus:
    spec: StreamSpec
    layout: VocabLayout
    facts: list  # list[CorpusFact], edit pool first
    synonym: dict  # relation token -> synonym token

    def __len__(self):
        return len(self.facts)

    def edit_pool(self):
        return [f for f in self.facts if f.pool == "edit"]

    def probe_pool(self):
        return [f for f in self.facts if f.pool == "probe"]

    def sequences(self):
        """Training rows: every fact under both phrasings.

        Returns (prompts [2N, 2], targets [2N])."""
        prompts, targets = [], []
        for f in self.facts:
            prompts.append([f.subject, f.relation])
            targets.append(f.obj)
        for f in self.facts:
            prompts.append([f.subject, self.synonym[f.relation]])
            targets.append(f.obj)
        return np.asarray(prompts, np.int64), np.asarray(targets, np.int64)

    def primary_rows(self):
        """Primary-phrasing rows only: (prompts [N, 2], targets [N])."""
        prompts = np.asarray([[f.subject, f.relation] for f in self.facts], np.int64)
        targets = np.asarray([f.obj for f in self.facts], np.int64)
        return prompts, targets


def make_pretrain_corpus(spec: StreamSpec) -> Corpus:
    """Build the fact world: a deterministic (subject x relation) grid
    with objects drawn from the spec's seed."""
    lay = vocab_layout(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    synonym = dict(zip(lay.relations, lay.synonyms))
    objects = np.array(lay.objects)
    facts = []
    for pool, subjects, count in (
        ("edit", lay.edit_subjects, spec.n_edit_facts),
        ("probe", lay.probe_subjects, spec.n_probe_facts),
    ):
        grid = [(s, r) for s in subjects for r in lay.relations][:count]
        objs = rng.choice(objects, size=len(grid), replace=True)
        facts += [CorpusFact(s, r, int(o), pool) for (s, r), o in zip(grid, objs)]
    return Corpus(spec, lay, facts, synonym)


@dataclass(frozen=True)
class FactRecord:
    """One sequential edit: rewrite x -> y (previously y_prev), then
    check the paraphrase x_bar and the unrelated probe (x_tilde, y_tilde)."""

    x: tuple
    y: int
    y_prev: int
    x_bar: tuple
    x_tilde: tuple
    y_tilde: int

    def validate(self, where=""):
        for name, v in (("y", self.y), ("y_prev", self.y_prev), ("y_tilde", self.y_tilde)):
            if v < 0:
                raise StreamError(f"{where}negative token in field {name}")
        for name, p in (("x", self.x), ("x_bar", self.x_bar), ("x_tilde", self.x_tilde)):
            if len(p) == 0 or any(t < 0 for t in p):
                raise StreamError(f"{where}empty or negative prompt in field {name}")
        if self.y == self.y_prev:
            raise StreamError(f"{where}edit target equals the previous answer")
        if tuple(self.x) == tuple(self.x_tilde):
            raise StreamError(f"{where}probe prompt equals the edit prompt")
        return self


@dataclass
class EditStream:
    meta: dict  # header fields: seed plus generation spec
    records: list  # list[FactRecord]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def synth_stream(spec: StreamSpec, corpus: Corpus, weights=None) -> EditStream:
    """Draw a T-step edit stream over the corpus.

    Edited facts are sampled without replacement from the edit pool, so
    every record rewrites a distinct prompt.  When `weights` is given,
    probe facts the model answers incorrectly are excluded up front
    (weights=None skips that filter; meant for tests only).
    """
    spec.validate()
    pool = corpus.edit_pool()
    if spec.t > len(pool):
        raise StreamError(
            f"stream length {spec.t} exceeds the editable fact pool ({len(pool)})"
        )
    probes = corpus.probe_pool()
    if weights is not None:
        prompts = np.asarray([f.prompt for f in probes], np.int64)
        targets = np.asarray([f.obj for f in probes], np.int64)
        from .autodiff import no_grad

        with no_grad():
            logits = toylm.lm_logits_last(weights, prompts).data
        keep = np.argmax(logits, axis=1) == targets
        probes = [f for f, ok in zip(probes, keep) if ok]
        if not probes:
            raise StreamError("no probe fact is answered correctly by the base model")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    chosen = rng.choice(len(pool), size=spec.t, replace=False)
    objects = np.array(corpus.layout.objects)
    records = []
    for i in chosen:
        fact = pool[int(i)]
        y = int(rng.choice(objects))
        while y == fact.obj:
            y = int(rng.choice(objects))
        probe = probes[int(rng.integers(len(probes)))]
        records.append(
            FactRecord(
                x=fact.prompt,
                y=y,
                y_prev=fact.obj,
                x_bar=(fact.subject, corpus.synonym[fact.relation]),
                x_tilde=probe.prompt,
                y_tilde=probe.obj,
            ).validate()
        )
    return EditStream({"seed": spec.seed, "spec": spec.to_dict()}, records)


def heldout_rows(corpus: Corpus, stream: EditStream):
    """Corpus facts whose prompt is never edited by the stream, as
    (prompts, targets) arrays; the general-knowledge retention set."""
    edited = {tuple(r.x) for r in stream}
    keep = [f for f in corpus.facts if f.prompt not in edited]
    prompts = np.asarray([f.prompt for f in keep], np.int64)
    targets = np.asarray([f.obj for f in keep], np.int64)
    return prompts, targets


# ----------------------------------------------------------- persistence

_FIELDS = ("x", "y", "y_prev", "x_bar", "x_tilde", "y_tilde")


def _fmt_tokens(p):
    return ",".join(str(int(t)) for t in p)


def save_stream(path, stream: EditStream):
    lines = [STREAM_FORMAT, f"seed={stream.meta.get('seed', 0)}"]
    spec = stream.meta.get("spec", {})
    lines.append("spec=" + ",".join(f"{k}:{v}" for k, v in sorted(spec.items())))
    for r in stream:
        lines.append(
            f"x={_fmt_tokens(r.x)} y={r.y} y_prev={r.y_prev} "
            f"x_bar={_fmt_tokens(r.x_bar)} x_tilde={_fmt_tokens(r.x_tilde)} "
            f"y_tilde={r.y_tilde}"
        )
    checkpoint.atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_record_line(line, lineno):
    fields = {}
    for part in line.split():
        if "=" not in part:
            raise StreamParseError(f"line {lineno}: malformed field {part!r}")
        k, v = part.split("=", 1)
        fields[k] = v
    missing = [f for f in _FIELDS if f not in fields]
    if missing:
        raise StreamParseError(f"line {lineno}: missing field {missing[0]!r}")
    extra = [k for k in fields if k not in _FIELDS]
    if extra:
        raise StreamParseError(f"line {lineno}: unknown field {extra[0]!r}")
    try:
        rec = FactRecord(
            x=tuple(int(t) for t in fields["x"].split(",")),
            y=int(fields["y"]),
            y_prev=int(fields["y_prev"]),
            x_bar=tuple(int(t) for t in fields["x_bar"].split(",")),
            x_tilde=tuple(int(t) for t in fields["x_tilde"].split(",")),
            y_tilde=int(fields["y_tilde"]),
        )
    except ValueError as e:
        raise StreamParseError(f"line {lineno}: non-integer token ({e})") from None
    return rec.validate(where=f"line {lineno}: ")


def _load_native(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != STREAM_FORMAT:
        raise StreamParseError(f"line 1: expected format tag {STREAM_FORMAT!r}")
    meta = {"seed": 0, "spec": {}}
    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("seed="):
            try:
                meta["seed"] = int(line[5:])
            except ValueError:
                raise StreamParseError(f"line {lineno}: non-integer seed") from None
        elif line.startswith("spec="):
            body = line[5:]
            if body:
                try:
                    meta["spec"] = {
                        k: v for k, v in (kv.split(":", 1) for kv in body.split(","))
                    }
                except ValueError:
                    raise StreamParseError(f"line {lineno}: malformed spec") from None
        else:
            records.append(_parse_record_line(line, lineno))
    return EditStream(meta, records)


def _load_zsre(text, path):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise StreamParseError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, list):
        raise StreamParseError(f"{path}: expected a JSON list of records")
    records = []
    for i, rec in enumerate(data):
        where = f"record {i}: "
        for key in ("src", "alt", "answers", "rephrase", "loc", "loc_ans"):
            if key not in rec:
                raise StreamParseError(f"{where}missing key {key!r}")
        answers = rec["answers"]
        if not isinstance(answers, list) or not answers:
            raise StreamParseError(f"{where}answers must be a non-empty list")
        records.append(
            FactRecord(
                x=tuple(int(t) for t in rec["src"]),
                y=int(rec["alt"]),
                y_prev=int(answers[0]),
                x_bar=tuple(int(t) for t in rec["rephrase"]),
                x_tilde=tuple(int(t) for t in rec["loc"]),
                y_tilde=int(rec["loc_ans"]),
            ).validate(where=where)
        )
    return EditStream({"seed": -1, "spec": {"source": "zsre", "t": len(records)}}, records)


def load_stream(path) -> EditStream:
    """Read a stream file; native stream-v1 text or a JSON list of
    pre-tokenized external records."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if text.lstrip().startswith(("[", "{")):
        return _load_zsre(text, path)
    return _load_native(text)
