"""Plain-text experiment configuration.

The format is flat ``key = value`` lines with dotted section prefixes::

    seed = 0
    out = runs/default
    scene.n_body_dims = 6
    objective.kind = ipa
    objective.beta = 300.0
    sweep.beta_grid = 10.0, 100.0, 1000.0

``#`` starts a comment. Every key has a default, unknown keys are rejected,
and :meth:`ExperimentConfig.to_text` writes every key back out so that
``parse(to_text(cfg)) == cfg``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .dataworld import SceneSpec
from .objectives import ObjectiveConfig
from .trainlab import PretrainConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key or invalid value."""


@dataclass(frozen=True)
class CurateConfig:
    n_candidates: int = 96
    k_per_condition: int = 4
    threshold: float = 0.9
    bad_threshold: float = 0.5
    n_steps: int = 32


@dataclass(frozen=True)
class EvalConfig:
    n_heldout: int = 256
    n_noise: int = 4
    n_t: int = 16
    n_ode_steps: int = 32


@dataclass(frozen=True)
class SweepConfig:
    beta_grid: tuple = (10.0, 100.0, 1000.0)
    lambda_grid: tuple = (0.0, 1.0, 10.0)
    halo_lambda: float = 10.0
    objectives: tuple = ("ipa", "ipa_halo", "sft", "sft_l2", "pos_dpo", "kto", "paired_dpo")


# TrainConfig minus the nested objective and the seed (both live elsewhere).
_TRAIN_SKIP = ("objective", "seed")
_SCENE_SKIP = ("seed",)
_PRETRAIN_SKIP = ("seed",)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    scene: SceneSpec = field(default_factory=SceneSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    # resolved views with the shared seed applied

    def scene_spec(self):
        return replace(self.scene, seed=self.seed)

    def pretrain_config(self):
        return replace(self.pretrain, seed=self.seed)

    def train_config(self):
        return replace(self.train, objective=self.objective, seed=self.seed)

    def to_text(self):
        return to_text(self)


_SECTIONS = {
    "scene": _SCENE_SKIP,
    "pretrain": _PRETRAIN_SKIP,
    "curate": (),
    "objective": (),
    "train": _TRAIN_SKIP,
    "eval": (),
    "sweep": (),
}


def _section_fields(name):
    cls = type(getattr(ExperimentConfig(), name))
    return [f for f in fields(cls) if f.name not in _SECTIONS[name]]


def known_keys():
    keys = ["seed", "out"]
    for sec in _SECTIONS:
        keys.extend(f"{sec}.{f.name}" for f in _section_fields(sec))
    return keys


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            proto = default[0] if default else ""
            return tuple(_coerce(key, s, proto) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def to_text(cfg):
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        lines.append("")
        lines.extend(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}"
                     for f in _section_fields(sec))
    return "\n".join(lines) + "\n"


def parse(text, base=None):
    """Parse config text on top of ``base`` (default: all defaults)."""
    cfg = base or ExperimentConfig()
    top = {}
    updates = {sec: {} for sec in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in ("seed", "out"):
            top[key] = _coerce(key, raw, getattr(cfg, key))
            continue
        sec, _, name = key.partition(".")
        if sec not in _SECTIONS or name not in {f.name for f in _section_fields(sec)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[sec][name] = _coerce(key, raw, getattr(getattr(cfg, sec), name))
    try:
        sections = {sec: replace(getattr(cfg, sec), **upd) for sec, upd in updates.items() if upd}
        return replace(cfg, **top, **sections)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path):
    with open(path) as fh:
        return parse(fh.read())


def to_header(cfg):
    """Flat dict of every key, used in output headers."""
    return dict(line.split(" = ", 1) for line in to_text(cfg).splitlines() if line)
