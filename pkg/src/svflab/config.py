"""Strict INI experiment configuration with ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from svflab.episodes import REFERENCE_SIZE, SplitPlan
from svflab.strategy import StrategyConfig
from svflab.training import TrainConfig

# section -> key -> parser; anything else in a file is rejected
_EXPERIMENT = {"output_dir": str, "seed": int, "fold": int, "num_folds": int, "image_size": int}
_PRETRAIN = {"epochs": int, "per_class": int, "eval_per_class": int, "patch_size": int,
             "batch_size": int, "lr": float, "momentum": float, "seed": int}
_STRATEGY = {"kind": str, "stages": str, "conv_kind": str, "subspaces": str, "variant": str,
             "bn_trainable": str}
_TRAIN = {"lr": float, "momentum": float, "epochs": int, "episodes_per_epoch": int,
          "batch_size": int, "precision": str, "k": int, "val_episodes": int,
          "max_distractors": int, "backbone": str}
_EVAL = {"shots": str, "episodes": int}
SCHEMA = {"experiment": _EXPERIMENT, "pretrain": _PRETRAIN, "strategy": _STRATEGY,
          "train": _TRAIN, "eval": _EVAL}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    per_class: int = 40
    eval_per_class: int = 10
    patch_size: int = 32
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int | None = None  # falls back to the experiment seed


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: Path
    seed: int
    fold: int
    num_folds: int
    image_size: int
    pretrain: PretrainConfig
    strategy: StrategyConfig
    train: TrainConfig
    eval_shots: tuple[int, ...]
    eval_episodes: int
    backbone: Path | None = None
    source: Path | None = None

    @property
    def plan(self) -> SplitPlan:
        return SplitPlan.default(self.fold, self.image_size, self.num_folds)

    @property
    def pretrain_seed(self) -> int:
        return self.seed if self.pretrain.seed is None else self.pretrain.seed

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    @property
    def backbone_dir(self) -> Path:
        return self.backbone if self.backbone is not None else self.checkpoint_dir / "pretrain"

    def with_strategy(self, strategy: StrategyConfig) -> "ExperimentConfig":
        return replace(self, strategy=strategy)


def _parse_overrides(overrides) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value.strip()
    return out


def _typed(section: str, raw: dict[str, str]) -> dict:
    schema = SCHEMA[section]
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}; allowed: {', '.join(sorted(schema))}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {value!r} ({exc})") from None
    return out


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Parse ``path`` (optional), apply overrides, then the ``seed`` override."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for section, items in _parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(items)
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sec = {name: _typed(name, raw.get(name, {})) for name in SCHEMA}

    exp = sec["experiment"]
    if seed is not None:
        exp["seed"] = int(seed)
    run_seed = exp.get("seed", 321)
    out_dir = Path(exp.get("output_dir", "runs/default"))
    out_dir = out_dir if out_dir.is_absolute() else base / out_dir
    image_size = exp.get("image_size", REFERENCE_SIZE)

    train_kw = dict(sec["train"])
    backbone = train_kw.pop("backbone", None)
    if backbone is not None:
        backbone = Path(backbone) if Path(backbone).is_absolute() else base / backbone
        if not (backbone / "manifest.txt").is_file():
            raise ConfigError(f"train.backbone does not point at a checkpoint: {backbone}")
    try:
        train = TrainConfig(seed=run_seed, image_size=image_size, **train_kw)
        strategy = StrategyConfig.from_dict(sec["strategy"]) if sec["strategy"] else StrategyConfig.svf()
        pretrain = PretrainConfig(**sec["pretrain"])
        plan_args = (exp.get("fold", 0), image_size, exp.get("num_folds", 4))
        SplitPlan.default(*plan_args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    shots_txt = sec["eval"].get("shots", "1,5")
    try:
        shots = tuple(int(s) for s in shots_txt.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"eval.shots must be a comma list of integers, got {shots_txt!r}") from None
    if not shots or any(s not in (1, 5) for s in shots):
        raise ConfigError(f"eval.shots must list values from {{1, 5}}, got {shots_txt!r}")

    return ExperimentConfig(
        output_dir=out_dir, seed=run_seed, fold=plan_args[0], num_folds=plan_args[2],
        image_size=image_size, pretrain=pretrain, strategy=strategy, train=train,
        eval_shots=shots, eval_episodes=sec["eval"].get("episodes", train.val_episodes),
        backbone=backbone, source=path,
    )


def config_keys() -> dict[str, list[str]]:
    return {s: sorted(k) for s, k in SCHEMA.items()}


def default_config_text() -> str:
    """A complete config file with every key at its default."""
    p, t = PretrainConfig(), TrainConfig()
    s = StrategyConfig.svf().to_dict()
    lines = ["[experiment]", "output_dir = runs/default", "seed = 321", "fold = 0", "num_folds = 4",
             f"image_size = {REFERENCE_SIZE}", "", "[pretrain]"]
    lines += [f"{f.name} = {getattr(p, f.name)}" for f in fields(p) if f.name != "seed"]
    lines += ["", "[strategy]"] + [f"{k} = {v}" for k, v in s.items()]
    lines += ["", "[train]"]
    skip = {"seed", "image_size", "cache_prefix"}
    lines += [f"{f.name} = {getattr(t, f.name)}" for f in fields(t) if f.name not in skip]
    lines += ["", "[eval]", "shots = 1,5", f"episodes = {t.val_episodes}", ""]
    return "\n".join(lines)
