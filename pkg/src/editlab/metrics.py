"""Evaluation protocol for edit streams.

Five measures, split by when they are taken:

- efficacy: the edit prompt x produces the new answer y, checked on
  the model state right after that edit was committed;
- generalization: the paraphrase x_bar produces y, same timing;
- specificity: the unrelated probe x_tilde keeps its answer y_tilde,
  same timing;
- edited retention: mean of efficacy and generalization restricted to
  the first t0 records but measured on the final model (how well early
  edits survived the rest of the stream);
- general retention: final-model top-1 accuracy on held-out facts no
  edit touched.

The first three are immediate, per-edit outcomes: each edit run
records a hit/miss bit for every check at every step (see
`immediate_outcomes`), and the stream-level numbers are exact counts
over those bits.  The two retention measures interrogate the single
model left standing after the whole stream.

Each check has a hard top-1 mode (argmax of the next-token logits) and
a probability-comparison mode (the intended answer must outweigh the
competing one: y vs y_prev for edits and paraphrases, y_tilde vs the
record's y for probes).

Every metric is an exact hit count over facts, and facts are scored
one at a time so any straightforward per-fact reimplementation gets
bit-identical logits and therefore identical counts.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .checkpoint import atomic_write_text
from .toylm import LMWeights, lm_logits_last

METRICS_FORMAT = "metrics-v1"
MODES = ("top1", "prob-compare")


@dataclass(frozen=True)
class MetricValue:
    """An exact fraction: hits out of total."""

    hits: int
    total: int

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("metric needs at least one evaluated fact")
        if not (0 <= self.hits <= self.total):
            raise ValueError(f"hits {self.hits} outside [0, {self.total}]")

    @property
    def value(self) -> float:
        return self.hits / self.total


@dataclass(frozen=True)
class MetricReport:
    mode: str
    t0: int
    efficacy: MetricValue
    generalization: MetricValue
    specificity: MetricValue
    edited_retention: MetricValue
    general_retention: MetricValue = None  # absent without a held-out corpus


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _answer_logits(weights: LMWeights, prompt) -> np.ndarray:
    with no_grad():
        return lm_logits_last(weights, [tuple(prompt)]).data[0]


def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _bits(logits, want, against):
    """(top1 bit, probability-comparison bit) for one answer position."""
    top1 = int(int(np.argmax(logits)) == want)
    p = _probs(logits)
    return top1, int(p[want] > p[against])


def _score(weights, prompt, want, against, mode) -> int:
    """1 when the model prefers `want` after `prompt`: strict argmax in
    top1 mode, p(want) > p(against) in probability-comparison mode."""
    top1, prob = _bits(_answer_logits(weights, prompt), want, against)
    return top1 if mode == "top1" else prob


OUTCOME_KEYS = (
    "eff_top1", "gen_top1", "spe_top1",
    "eff_prob", "gen_prob", "spe_prob",
)


def immediate_outcomes(weights: LMWeights, rec) -> dict:
    """Hit/miss bits for one record against one model state.

    Evaluated by edit runs on W_t right after committing edit t; both
    scoring modes are recorded so the mode can be chosen at evaluation
    time.  Keys follow OUTCOME_KEYS.
    """
    eff = _bits(_answer_logits(weights, rec.x), rec.y, rec.y_prev)
    gen = _bits(_answer_logits(weights, rec.x_bar), rec.y, rec.y_prev)
    spe = _bits(_answer_logits(weights, rec.x_tilde), rec.y_tilde, rec.y)
    return {
        "eff_top1": eff[0], "gen_top1": gen[0], "spe_top1": spe[0],
        "eff_prob": eff[1], "gen_prob": gen[1], "spe_prob": spe[1],
    }


def _need_records(records, what):
    records = list(records)
    if not records:
        raise ValueError(f"{what} needs at least one fact")
    return records


def efficacy(weights: LMWeights, records, mode="top1") -> MetricValue:
    """Did each edit take: x must yield y (beating y_prev in
    probability mode)."""
    _check_mode(mode)
    records = _need_records(records, "efficacy")
    hits = sum(_score(weights, r.x, r.y, r.y_prev, mode) for r in records)
    return MetricValue(hits, len(records))


def generalization(weights: LMWeights, records, mode="top1") -> MetricValue:
    """Does each edit carry over to the paraphrase prompt x_bar."""
    _check_mode(mode)
    records = _need_records(records, "generalization")
    hits = sum(_score(weights, r.x_bar, r.y, r.y_prev, mode) for r in records)
    return MetricValue(hits, len(records))


def specificity(weights: LMWeights, records, mode="top1") -> MetricValue:
    """Did unrelated probes keep their answers: x_tilde must still
    yield y_tilde (beating the record's injected y in probability
    mode)."""
    _check_mode(mode)
    records = _need_records(records, "specificity")
    hits = sum(_score(weights, r.x_tilde, r.y_tilde, r.y, mode) for r in records)
    return MetricValue(hits, len(records))


def edited_retention(weights: LMWeights, records, t0, mode="top1") -> MetricValue:
    """Mean of efficacy and generalization over the first t0 records,
    expressed as one exact count (eff hits + gen hits out of 2*t0)."""
    records = list(records)
    if not (1 <= t0 <= len(records)):
        raise ValueError(f"t0 must lie in [1, {len(records)}], got {t0}")
    head = records[:t0]
    eff = efficacy(weights, head, mode)
    gen = generalization(weights, head, mode)
    return MetricValue(eff.hits + gen.hits, eff.total + gen.total)


def general_retention(weights: LMWeights, heldout_rows) -> MetricValue:
    """Top-1 accuracy on (prompt, answer) pairs no edit ever touched."""
    rows = list(heldout_rows)
    if not rows:
        raise ValueError("general_retention needs a non-empty held-out corpus")
    hits = 0
    for prompt, answer in rows:
        logits = _answer_logits(weights, prompt)
        hits += int(int(np.argmax(logits)) == int(answer))
    return MetricValue(hits, len(rows))


def mask_frequency_report(logs) -> np.ndarray:
    """Per-slot selection frequency over a trajectory's step logs."""
    logs = list(logs)
    if not logs:
        raise ValueError("mask_frequency_report needs at least one step log")
    return np.stack([log.mask for log in logs]).mean(axis=0)


def _outcome_count(logs, check, mode) -> MetricValue:
    suffix = "top1" if mode == "top1" else "prob"
    key = f"{check}_{suffix}"
    hits = sum(int(log.outcomes[key]) for log in logs)
    return MetricValue(hits, len(logs))


def evaluate_stream(final_weights, records, logs, t0, mode="top1",
                    heldout_rows=None) -> MetricReport:
    """All stream metrics in one report.

    Efficacy / generalization / specificity aggregate the per-edit
    immediate outcome bits carried by the trajectory's step logs; the
    retention measures interrogate `final_weights`.  Held-out accuracy
    is included only when a held-out corpus is supplied.
    """
    _check_mode(mode)
    records = list(records)
    logs = list(logs)
    if len(logs) != len(records):
        raise ValueError(
            f"{len(logs)} step logs for {len(records)} records; an edit "
            "run must log every record exactly once"
        )
    if not logs:
        raise ValueError("evaluate_stream needs a non-empty stream")
    gr = general_retention(final_weights, heldout_rows) if heldout_rows else None
    return MetricReport(
        mode=mode,
        t0=int(t0),
        efficacy=_outcome_count(logs, "eff", mode),
        generalization=_outcome_count(logs, "gen", mode),
        specificity=_outcome_count(logs, "spe", mode),
        edited_retention=edited_retention(final_weights, records, t0, mode),
        general_retention=gr,
    )


# ----------------------------------------------------------------- reporting


_FIELDS = (
    "efficacy",
    "generalization",
    "specificity",
    "edited_retention",
    "general_retention",
)


def render_metrics(report: MetricReport) -> str:
    lines = [METRICS_FORMAT, f"mode={report.mode}", f"t0={report.t0}"]
    for name in _FIELDS:
        mv = getattr(report, name)
        if mv is None:
            continue
        lines.append(f"{name}={mv.value:.17g} hits={mv.hits} total={mv.total}")
    return "\n".join(lines) + "\n"


def write_metrics(path, report: MetricReport):
    atomic_write_text(path, render_metrics(report))


def load_metrics(path) -> dict:
    """Read a metrics file back into {name: (value, hits, total)} plus
    'mode' and 't0' entries."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != METRICS_FORMAT:
        raise ValueError(f"{path}: not a {METRICS_FORMAT} file")
    out = {}
    for ln in lines[1:]:
        if not ln:
            continue
        head, rest = ln.split("=", 1)
        if head == "mode":
            out["mode"] = rest
        elif head == "t0":
            out["t0"] = int(rest)
        else:
            parts = rest.split()
            out[head] = (
                float(parts[0]),
                int(parts[1].split("=")[1]),
                int(parts[2].split("=")[1]),
            )
    return out


def metrics_table(report: MetricReport) -> str:
    """One-row delimited table with the five headline columns."""
    header = ["eff", "gen", "spe", "edit_ret", "gen_ret"]
    mv = [getattr(report, n) for n in _FIELDS]
    row = [f"{v.value:.6f}" if v is not None else "nan" for v in mv]
    return "\t".join(header) + "\n" + "\t".join(row) + "\n"


def mask_frequency_table(freq) -> str:
    """One row per slot: index and selection frequency."""
    lines = ["slot\tfrequency"]
    for i, f in enumerate(np.asarray(freq)):
        lines.append(f"{i}\t{f:.6f}")
    return "\n".join(lines) + "\n"


def curve_table(logs) -> str:
    """Per-step trajectory curves: t, loss, rewards, selected count."""
    lines = ["t\tloss\tcf_loss\tr_low\tr_high\tn_selected"]
    for log in logs:
        lines.append(
            f"{log.t}\t{log.loss:.10g}\t{log.cf_loss:.10g}\t"
            f"{log.r_low:.10g}\t{log.r_high:.10g}\t{int(log.mask.sum())}"
        )
    return "\n".join(lines) + "\n"
