"""Training configuration: defaults, validation, flat-file round trip.

The config file format is one ``key = value`` pair per line with ``#``
comments.  Values are parsed as Python literals where possible; bare
comma-separated integers become tuples.  Unknown keys are a hard error so a
typo never silently trains the wrong model.
"""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path


@dataclasses.dataclass
class TrainConfig:
    """Everything one training run depends on besides the dataset itself."""

    # loss weights
    lambda_h: float = 1.0
    lambda_r: float = 0.2
    lambda_u: float = 1.0
    lambda_af: float = 1.0
    # pseudo-labels
    tau: float = 0.95
    t_ensemble: float = 0.5
    # feature-level perturbation
    p_rand: float = 0.8
    # teacher
    ema_momentum: float = 0.99
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    alpha_lr_multiplier: float = 10.0
    # aggregated branch
    alpha_init: float = 0.5
    aggregated_statistics: str = "mixed"  # mixed | batch | instance
    use_branches: bool = True
    # normalization
    norm_momentum: float = 0.1
    epsilon: float = 1e-5
    # loop
    iterations: int = 1000
    labeled_per_domain: int = 2
    unlabeled_per_domain: int = 2
    seed: int = 0
    eval_every: int = 100
    pseudo_quality_at: tuple[int, ...] = ()
    # protocol
    labeled_fraction: float = 0.3
    unseen_domain: int = 4
    # masked cross-entropy denominator
    ce_denominator: str = "total"  # total | masked
    # strong augmentation
    strong_jitter_lo: float = 0.5
    strong_jitter_hi: float = 1.5
    strong_blur_lo: float = 0.1
    strong_blur_hi: float = 2.0
    strong_op_prob: float = 0.5
    # architecture
    widths: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_h", "lambda_r", "lambda_u", "lambda_af"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 <= self.t_ensemble <= 1.0:
            raise ValueError(f"t_ensemble must be in [0, 1], got {self.t_ensemble}")
        if not 0.0 <= self.p_rand <= 1.0:
            raise ValueError(f"p_rand must be in [0, 1], got {self.p_rand}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.alpha_lr_multiplier <= 0:
            raise ValueError(
                f"alpha_lr_multiplier must be > 0, got {self.alpha_lr_multiplier}"
            )
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError(f"alpha_init must be in (0, 1), got {self.alpha_init}")
        if self.aggregated_statistics not in ("mixed", "batch", "instance"):
            raise ValueError(
                f"aggregated_statistics must be mixed, batch, or instance, got "
                f"{self.aggregated_statistics!r}"
            )
        if not 0.0 <= self.norm_momentum <= 1.0:
            raise ValueError(f"norm_momentum must be in [0, 1], got {self.norm_momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.labeled_per_domain < 2 or self.unlabeled_per_domain < 2:
            raise ValueError(
                "per-domain sub-batches need >= 2 samples for well-defined "
                f"batch statistics, got labeled={self.labeled_per_domain}, "
                f"unlabeled={self.unlabeled_per_domain}"
            )
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(
                f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}"
            )
        if self.unseen_domain < 1:
            raise ValueError(f"unseen_domain must be >= 1, got {self.unseen_domain}")
        if self.ce_denominator not in ("total", "masked"):
            raise ValueError(
                f"ce_denominator must be total or masked, got {self.ce_denominator!r}"
            )
        if self.lambda_r > 0 and not self.use_branches:
            raise ValueError(
                "lambda_r > 0 requires use_branches: the random-forward stream "
                "needs per-domain branches"
            )
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 2 positive stages, got {self.widths}")


def _parse_value(field_name: str, field_type, raw: str):
    raw = raw.strip()
    if field_type is str:
        try:
            unquoted = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            return raw
        return unquoted if isinstance(unquoted, str) else raw
    if field_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse {raw!r} as a boolean for {field_name}")
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        raise ValueError(f"cannot parse {raw!r} for key {field_name}") from None
    if field_type is float:
        return float(value)
    if field_type is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{field_name} expects an integer, got {raw!r}")
        return int(value)
    # tuple-typed fields
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    if isinstance(value, int):
        return (value,)
    raise ValueError(f"cannot parse {raw!r} for key {field_name}")


def _field_types() -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.type in ("float", float):
            out[f.name] = float
        elif f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("bool", bool):
            out[f.name] = bool
        elif f.type in ("str", str):
            out[f.name] = str
        else:
            out[f.name] = tuple
    return out


def config_from_dict(values: dict) -> TrainConfig:
    """Build a validated config, rejecting unknown keys by name."""
    types = _field_types()
    parsed = {}
    for key, value in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(value, str):
            parsed[key] = _parse_value(key, types[key], value)
        elif types[key] is tuple and isinstance(value, (list, tuple)):
            parsed[key] = tuple(int(v) for v in value)
        else:
            parsed[key] = value
    return TrainConfig(**parsed)


def read_config_values(path) -> dict[str, str]:
    """Parse a ``key = value`` file into raw string values, unvalidated."""
    path = Path(path)
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = raw.strip()
    return values


def load_config(path) -> TrainConfig:
    """Parse a ``key = value`` file into a validated TrainConfig."""
    return config_from_dict(read_config_values(path))


def save_config(cfg: TrainConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = "(" + ", ".join(str(v) for v in value) + ")"
        else:
            rendered = repr(value) if isinstance(value, str) else str(value)
        lines.append(f"{f.name} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n")
