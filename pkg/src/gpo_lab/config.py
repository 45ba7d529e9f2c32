"""Run configuration: INI files with one section per module, plus dotted overrides.

Sections are ``[run]``, ``[task]``, ``[trainer]``, ``[schedule]``, ``[theory]``
and ``[sweep]``.  Unknown sections or keys are errors.  Real-valued keys accept
plain fractions such as ``1/3000``.  ``serialize`` writes every resolved value,
so ``parse_text(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .envs import EnvKind, EnvSpec
from .errors import ConfigError
from .growth import GrowthSchedule, ScheduleKind
from .theory import TheoryConfig
from .trainer import TrainerConfig

SECTIONS = ("run", "task", "trainer", "schedule", "theory", "sweep")
ALL_SCHEDULES = tuple(k.value for k in ScheduleKind)


# ---------------------------------------------------------------- converters


def _float(text):
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        try:
            return float(Fraction(num.strip()) / Fraction(den.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"bad fraction {text!r}") from exc
    return float(text)


def _int(text):
    val = _float(text)
    if not float(val).is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(val)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _str(text):
    return text.strip()


def _ints(text):
    return tuple(_int(t) for t in text.split(",") if t.strip())


def _auto_bool(text):
    return "auto" if text.strip().lower() == "auto" else _bool(text)


def _optional_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else _float(text)


def _cmd_range(text):
    if text.strip().lower() in ("", "default", "none"):
        return None
    pairs = []
    for part in text.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"cmd_range entries are lo:hi, got {part.strip()!r}")
        pairs.append((_float(lo), _float(hi)))
    return tuple(pairs)


def _schedules(text):
    kinds = tuple(t.strip() for t in text.split(",") if t.strip())
    for k in kinds:
        ScheduleKind(k)
    if not kinds:
        raise ValueError("need at least one schedule kind")
    return kinds


def _seeds(text):
    """``0,3,7`` or a half-open range ``0:10``."""
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        seeds = tuple(range(_int(lo), _int(hi)))
    else:
        seeds = _ints(text)
    if not seeds:
        raise ValueError("need at least one seed")
    return seeds


SCHEMA = {
    "run": {"seed": _int, "output_dir": _str, "checkpoint_every": _int},
    "task": {
        "kind": _str,
        "a_limit": _float,
        "dt": _float,
        "horizon": _int,
        "cmd_scaling": _auto_bool,
        "damping": _float,
        "mass": _float,
        "length": _float,
        "gravity": _float,
        "fatigue_gamma": _float,
        "fatigue_scale": _optional_float,
        "cmd_range": _cmd_range,
    },
    "trainer": {
        "clip_eps": _float,
        "gamma": _float,
        "lam": _float,
        "lr": _float,
        "lr_anneal": _bool,
        "updates": _int,
        "horizon": _int,
        "n_envs": _int,
        "epochs": _int,
        "minibatches": _int,
        "normalize_adv": _bool,
        "sigma_mode": _str,
        "hidden": _ints,
        "log_sigma0": _float,
        "vf_coef": _float,
        "ent_coef": _float,
        "max_grad_norm": _float,
        "ratio_path": _str,
    },
    "schedule": {"kind": _str, "k": _optional_float, "t0": _optional_float},
    "theory": {
        f.name: (_int if f.type in ("int", int) else _float) for f in fields(TheoryConfig)
    },
    "sweep": {"schedules": _schedules, "seeds": _seeds, "early_frac": _float, "window_frac": _float},
}


# ---------------------------------------------------------------- RunConfig


@dataclass(frozen=True)
class SweepConfig:
    schedules: tuple = ALL_SCHEDULES
    seeds: tuple = tuple(range(10))
    early_frac: float = 0.2
    window_frac: float = 0.05

    def __post_init__(self):
        if not 0 < self.early_frac <= 1 or not 0 < self.window_frac <= 1:
            raise ValueError("early_frac and window_frac must lie in (0, 1]")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    task: dict
    trainer: TrainerConfig
    schedule: GrowthSchedule
    theory: TheoryConfig
    sweep: SweepConfig
    output_dir: Path = Path("runs")
    seed: int = 0
    checkpoint_every: int = 0

    @property
    def cmd_scaling(self):
        return self.task.get("cmd_scaling", "auto")

    def env_spec(self, kind=None):
        """Environment for a run under schedule ``kind`` (default: the configured one).

        ``cmd_scaling = auto`` turns command scaling on for growing schedules and
        off for the fixed-range baseline.
        """
        kind = ScheduleKind(kind or self.schedule.kind)
        task = dict(self.task)
        scaling = task.pop("cmd_scaling", "auto")
        if scaling == "auto":
            scaling = kind is not ScheduleKind.NONE
        return EnvSpec(cmd_scaling=scaling, **task)

    def schedule_for(self, kind):
        """Schedule of ``kind`` sized to this run; keeps explicit k/t0 only for the configured kind."""
        kind = ScheduleKind(kind)
        if kind is self.schedule.kind:
            return self.schedule
        return GrowthSchedule.for_run(kind, self.trainer.updates, self.schedule.a_limit)

    def trainer_for(self, kind=None, seed=None):
        kind = self.schedule.kind if kind is None else kind
        return replace(self.trainer, schedule=self.schedule_for(kind), seed=self.seed if seed is None else seed)


def _raw_from_text(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    raw = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            raw.setdefault(section, {})[key] = value
    return raw


def parse_override(item):
    """``section.key=value`` (a leading ``--`` is allowed) -> ``(section, key, value)``."""
    body = item[2:] if item.startswith("--") else item
    lhs, sep, value = body.partition("=")
    section, dot, key = lhs.partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {item!r} is not of the form --section.key=value")
    if section not in SCHEMA:
        raise ConfigError(f"override {item!r}: unknown section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"override {item!r}: unknown key {section}.{key}")
    return section, key, value


def _convert(raw):
    out = {s: {} for s in SECTIONS}
    for section, items in raw.items():
        for key, text in items.items():
            try:
                out[section][key] = SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key} = {text!r}: {exc}") from exc
    return out


def _build(vals):
    run, task, tr, sch, th, sw = (vals[s] for s in SECTIONS)
    try:
        seed = run.get("seed", 0)
        if seed < 0:
            raise ValueError("run.seed must be >= 0")
        task = dict(task)
        kind = EnvKind(task.setdefault("kind", EnvKind.POINT_MASS.value))
        task["kind"] = kind.value
        base = EnvSpec(kind)
        for key in ("a_limit", "dt", "horizon", "damping", "mass", "length", "gravity", "fatigue_gamma", "cmd_range"):
            task.setdefault(key, getattr(base, key))
        task.setdefault("cmd_scaling", "auto")
        task.setdefault("fatigue_scale", None)
        if task["fatigue_scale"] is None:
            task["fatigue_scale"] = 1.0 / task["a_limit"]
        spec_check = dict(task)
        spec_check["cmd_scaling"] = True
        EnvSpec(**spec_check)  # validates invariants

        tr = dict(tr)
        trainer = TrainerConfig(**tr, seed=seed)
        sk = ScheduleKind(sch.get("kind", ScheduleKind.GOMPERTZ.value))
        default = GrowthSchedule.for_run(sk, trainer.updates, task["a_limit"])
        k = sch.get("k")
        t0 = sch.get("t0")
        schedule = GrowthSchedule(sk, default.k if k is None else k, default.t0 if t0 is None else t0, task["a_limit"])
        trainer = replace(trainer, schedule=schedule)
        theory = TheoryConfig(**th)
        sweep = SweepConfig(**sw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        task=task,
        trainer=trainer,
        schedule=schedule,
        theory=theory,
        sweep=sweep,
        output_dir=Path(run.get("output_dir", "runs")),
        seed=seed,
        checkpoint_every=run.get("checkpoint_every", 0),
    )


def parse_text(text, overrides=(), source="<config>"):
    raw = _raw_from_text(text, source)
    for item in overrides:
        section, key, value = parse_override(item)
        raw.setdefault(section, {})[key] = value
    return _build(_convert(raw))


def parse_config(path=None, overrides=()):
    """Resolve a config file (or all defaults when ``path`` is None) plus overrides."""
    if path is None:
        return parse_text("", overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, overrides, source=str(path))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{_fmt(lo)}:{_fmt(hi)}" for lo, hi in value)
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def config_sections(cfg: RunConfig):
    """Every resolved value, section by section, in schema order."""
    trainer = {k: v for k, v in asdict(cfg.trainer).items() if k not in ("schedule", "seed")}
    trainer["hidden"] = tuple(cfg.trainer.hidden)
    vals = {
        "run": {"seed": cfg.seed, "output_dir": str(cfg.output_dir), "checkpoint_every": cfg.checkpoint_every},
        "task": dict(cfg.task),
        "trainer": trainer,
        "schedule": {"kind": cfg.schedule.kind.value, "k": float(cfg.schedule.k), "t0": float(cfg.schedule.t0)},
        "theory": asdict(cfg.theory),
        "sweep": {
            "schedules": tuple(cfg.sweep.schedules),
            "seeds": tuple(cfg.sweep.seeds),
            "early_frac": cfg.sweep.early_frac,
            "window_frac": cfg.sweep.window_frac,
        },
    }
    return {s: {k: vals[s][k] for k in SCHEMA[s] if k in vals[s]} for s in SECTIONS}


def serialize(cfg: RunConfig):
    """Canonical INI text of the fully resolved config."""
    buf = io.StringIO()
    for i, (section, items) in enumerate(config_sections(cfg).items()):
        if i:
            buf.write("\n")
        buf.write(f"[{section}]\n")
        for key, value in items.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"{section}.{key} is not finite")
            buf.write(f"{key} = {_fmt(value)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------- manifest


def sha256_file(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: str
    code_version: str
    started: str
    finished: str = ""
    files: dict = field(default_factory=dict)
    resolved_env: dict = field(default_factory=dict)

    def add_tree(self, root, exclude=("manifest.json",)):
        """Hash every file below ``root`` (relative POSIX paths, sorted)."""
        root = Path(root)
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            rel = path.relative_to(root).as_posix()
            if rel not in exclude:
                self.files[rel] = sha256_file(path)

    def write(self, path):
        data = asdict(self)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return Path(path)
