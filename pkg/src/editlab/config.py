"""Run configuration: a plain text file of dotted keys plus command
line overrides.

Grammar: one `section.key = value` per line; `#` starts a comment;
blank lines are skipped.  Every key has a typed default below, values
are coerced to the default's type, and unknown keys are errors (they
are always typos).  Precedence: defaults < config file < --set
overrides.  When no path is given the EDITLAB_CONFIG environment
variable supplies one.

The global `seed` feeds every seeded stage (model init, stream
generation, editor init, training), so one config line pins the whole
pipeline.
"""

import dataclasses
import os
from dataclasses import dataclass

from .hypernets import EditorConfig
from .metrics import MODES
from .stream import StreamSpec
from .toylm import LMConfig
from .trainer import TrainConfig

ENV_CONFIG = "EDITLAB_CONFIG"


class ConfigError(ValueError):
    pass


def _section_defaults(prefix, cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        out[f"{prefix}.{f.name}"] = f.default
    return out


# stream.seed / stream.vocab_size and train.seed are wired from the
# global seed and the model section, so they are not independent keys
DEFAULTS = {
    "seed": 0,
    "paths.workdir": "runs",
    **_section_defaults("lm", LMConfig),
    **_section_defaults("stream", StreamSpec, skip=("seed", "vocab_size")),
    **_section_defaults("editor", EditorConfig),
    **_section_defaults("train", TrainConfig, skip=("seed",)),
    "pretrain.steps": 800,
    "pretrain.lr": 2.0,
    "eval.t0": 100,
    "eval.mode": "top1",
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from e


@dataclass(frozen=True)
class RunConfig:
    lm: LMConfig
    stream_spec: StreamSpec
    editor: EditorConfig
    train: TrainConfig
    pretrain_steps: int
    pretrain_lr: float
    eval_t0: int
    eval_mode: str
    workdir: str
    seed: int

    # ------------------------------------------------- artifact layout

    def path(self, name):
        return os.path.join(self.workdir, name)

    @property
    def base_lm_path(self):
        return self.path("base_lm.bin")

    @property
    def stream_path(self):
        return self.path("stream.txt")

    @property
    def editor_path(self):
        return self.path("editor.bin")

    @property
    def train_curve_path(self):
        return self.path("train_curve.tsv")

    @property
    def edited_lm_path(self):
        return self.path("edited_lm.bin")

    @property
    def trajlog_path(self):
        return self.path("trajlog.txt")

    @property
    def metrics_path(self):
        return self.path("metrics.txt")

    @property
    def report_dir(self):
        return self.path("report")

    def n_slots(self):
        return 2 * self.lm.n_blocks

    def validate(self):
        for section, obj in (("lm", self.lm), ("stream", self.stream_spec),
                             ("editor", self.editor), ("train", self.train)):
            try:
                obj.validate()
            except ValueError as e:
                raise ConfigError(f"{section}: {e}") from e
        if self.editor.k_select > self.n_slots():
            raise ConfigError(
                f"editor.k_select = {self.editor.k_select} exceeds the "
                f"{self.n_slots()} editable slots"
            )
        if not (1 <= self.eval_t0 <= self.stream_spec.t):
            raise ConfigError(
                f"eval.t0 = {self.eval_t0} must lie in [1, {self.stream_spec.t}]"
            )
        if self.eval_mode not in MODES:
            raise ConfigError(f"eval.mode must be one of {MODES}")
        if self.pretrain_steps < 1 or self.pretrain_lr <= 0:
            raise ConfigError("pretrain.steps must be >= 1 and pretrain.lr > 0")
        return self


def _build(values) -> RunConfig:
    def section(prefix, cls, **extra):
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {
            k.split(".", 1)[1]: v
            for k, v in values.items()
            if k.startswith(prefix + ".") and k.split(".", 1)[1] in names
        }
        kw.update(extra)
        return cls(**kw)

    lm = section("lm", LMConfig)
    return RunConfig(
        lm=lm,
        stream_spec=section(
            "stream", StreamSpec, seed=values["seed"], vocab_size=lm.vocab_size
        ),
        editor=section("editor", EditorConfig),
        train=section("train", TrainConfig, seed=values["seed"]),
        pretrain_steps=values["pretrain.steps"],
        pretrain_lr=values["pretrain.lr"],
        eval_t0=values["eval.t0"],
        eval_mode=values["eval.mode"],
        workdir=values["paths.workdir"],
        seed=values["seed"],
    ).validate()


def _parse_line(line, where, values):
    text = line.split("#", 1)[0].strip()
    if not text:
        return
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {line.rstrip()!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    values[key] = _coerce(key, raw)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Load configuration from an optional file plus key=value
    overrides; every unset key takes its default."""
    values = dict(DEFAULTS)
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, 1):
                _parse_line(line, f"{path}:{i}", values)
    for ov in overrides:
        _parse_line(ov, f"--set {ov!r}", values)
    return _build(values)


def render_defaults() -> str:
    """The full key space with default values, as a valid config file."""
    lines = [f"{k} = {v}" for k, v in sorted(DEFAULTS.items())]
    return "\n".join(lines) + "\n"
