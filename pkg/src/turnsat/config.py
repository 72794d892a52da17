"""Flat key=value experiment configuration.

One file drives generation, splitting, the model, training, and the
sweep grid. Lines are ``section.key = value``; ``#`` starts a comment.
Every output artifact embeds the hash of the effective configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .data import ConfigError, GeneratorConfig
from .model import ModelConfig
from .train import TrainConfig

VALID_METHODS = ("supervised", "pretrain_finetune", "few_shot")


@dataclass
class ExperimentConfig:
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    out_of_domain_skill_fraction: float = 0.15
    low_freq_max_sessions: int = 10
    split_seed: int = 0
    methods: tuple = VALID_METHODS
    n_labeled_grid: tuple = (64, 256, 1024)
    seeds: tuple = (0, 1, 2, 3)
    out_dir: str = "runs/exp"
    pretrain_epochs: int = 0   # 0 means: use train.epochs
    few_shot_epochs: int = 0

    def validate(self):
        self.gen.validate()
        self.model.validate()
        self.train.validate()
        if not self.methods:
            raise ConfigError("exp.methods must be nonempty")
        for mth in self.methods:
            if mth not in VALID_METHODS:
                raise ConfigError(f"unknown method {mth!r}; valid: {', '.join(VALID_METHODS)}")
        if not self.n_labeled_grid or any(n < 2 for n in self.n_labeled_grid):
            raise ConfigError("exp.n_labeled grid must be nonempty with sizes >= 2")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("exp.seeds must be nonempty and distinct")


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _int_list(v: str) -> tuple:
    return tuple(int(x.strip()) for x in v.split(",") if x.strip())


def _str_list(v: str) -> tuple:
    return tuple(x.strip() for x in v.split(",") if x.strip())


# flat key -> (target object attribute path, parser)
_KEYS = {
    "gen.num_skills_major": ("gen.num_skills_major", int),
    "gen.num_skills_minor": ("gen.num_skills_minor", int),
    "gen.num_labeled": ("gen.num_labeled", int),
    "gen.num_unlabeled": ("gen.num_unlabeled", int),
    "gen.sat_ratio": ("gen.sat_ratio", float),
    "gen.vocab_size": ("gen.vocab_size", int),
    "gen.max_pad_turns": ("gen.max_pad_turns", int),
    "gen.items_per_skill": ("gen.items_per_skill", int),
    "gen.minor_unsup_share": ("gen.minor_unsup_share", float),
    "gen.seed": ("gen.seed", int),
    "split.train_fraction": ("train_fraction", float),
    "split.val_fraction": ("val_fraction", float),
    "split.out_of_domain_skill_fraction": ("out_of_domain_skill_fraction", float),
    "split.low_freq_max_sessions": ("low_freq_max_sessions", int),
    "split.seed": ("split_seed", int),
    "model.embed_dim": ("model.embed_dim", int),
    "model.gru_hidden": ("model.gru_hidden", int),
    "model.gru_layers": ("model.gru_layers", int),
    "model.bidirectional": ("model.bidirectional", _parse_bool),
    "model.head_hidden": ("model.head_hidden", int),
    "model.context_T": ("model.context_T", int),
    "train.batch_size": ("train.batch_size", int),
    "train.epochs": ("train.epochs", int),
    "train.lr_encoder": ("train.lr_encoder", float),
    "train.lr_other": ("train.lr_other", float),
    "train.alpha": ("train.alpha", float),
    "train.lambda": ("train.lam", float),
    "train.body_lr_scale_finetune": ("train.body_lr_scale_finetune", float),
    "train.patience": ("train.patience", int),
    "train.val_max_sessions": ("train.val_max_sessions", int),
    "train.finetune_epochs": ("train.finetune_epochs", int),
    "train.proportional_blocks": ("train.proportional_blocks", _parse_bool),
    "exp.methods": ("methods", _str_list),
    "exp.n_labeled": ("n_labeled_grid", _int_list),
    "exp.seeds": ("seeds", _int_list),
    "exp.out_dir": ("out_dir", str),
    "exp.pretrain_epochs": ("pretrain_epochs", int),
    "exp.few_shot_epochs": ("few_shot_epochs", int),
}


def parse_config(path: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        attr_path, parser = _KEYS[key]
        try:
            parsed = parser(value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}")
        target = cfg
        *heads, leaf = attr_path.split(".")
        for h in heads:
            target = getattr(target, h)
        setattr(target, leaf, parsed)
    cfg.validate()
    return cfg


def canonical_text(cfg: ExperimentConfig) -> str:
    """Stable textual form of the effective configuration."""
    out = []
    for key, (attr_path, _) in sorted(_KEYS.items()):
        target = cfg
        *heads, leaf = attr_path.split(".")
        for h in heads:
            target = getattr(target, h)
        value = getattr(target, leaf)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        out.append(f"{key} = {value}")
    return "\n".join(out) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]


def effective_epochs(cfg: ExperimentConfig, phase: str) -> int:
    if phase == "pretrain" and cfg.pretrain_epochs > 0:
        return cfg.pretrain_epochs
    if phase == "few_shot" and cfg.few_shot_epochs > 0:
        return cfg.few_shot_epochs
    return cfg.train.epochs
