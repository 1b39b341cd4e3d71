"""Run configuration (``key = value`` text) and seed derivation.

Every random stream in a run derives from the root ``seed`` plus a purpose
label: ``derive_seed(root, "train")`` hashes ``"<root>/train"`` with SHA-256
and keeps the first four bytes, so streams are independent of execution
order.  Monte-Carlo weight draw ``i`` of a prediction seeded ``s`` uses
``s + i``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

CONFIG_ENV = "SARBNN_CONFIG"


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every tunable of the train -> attack -> calibrate -> explain pipeline."""

    seed: int = 0
    # data
    num_classes: int = 10
    chip_size: int = 64
    crop_size: int = 48
    train_per_class: int = 200
    test_per_class: int = 100
    augment_count: int = 2
    # model
    arch: str = "AConvNet"
    prior_mean: float = 0.0
    prior_std: float = 0.1
    rho_init: float = -5.0
    # training
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 0.0005
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    kl_weight_schedule: str = "batches"
    mc_samples_per_step: int = 1
    # inference / detection / explanation
    samples: int = 30
    alpha: float = 0.1
    theta: str = ""
    k: str = "10,50,100"
    calibration_per_group: int = 50
    sir_radius: int = 2
    sir_images: int = 100
    resample_saliency: bool = False
    stderr_images: int = 50
    stderr_repeats: int = 3
    # attack
    attack_n: str = "1,2,3"
    attack_images: int = 300
    attack_amplitude_min: float = 0.3
    attack_amplitude_max: float = 0.6
    attack_amplitudes: int = 2
    attack_radius: float = 1.25
    attack_stride: int = 2
    attack_max_evals: int = 1000
    attack_mask_percentile: float = 90.0
    attack_mask_dilation: int = 2
    attack_objective_samples: int = 0
    # paths
    data_dir: str = ""
    checkpoint: str = ""

    def k_values(self) -> list[int]:
        return _int_list(self.k, "k")

    def attack_values(self) -> list[int]:
        return _int_list(self.attack_n, "attack_n")

    def theta_value(self) -> float | None:
        return float(self.theta) if str(self.theta).strip() else None

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _int_list(text: str, name: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise ConfigError(f"{name} must list positive integers, got {text!r}")
    return vals


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {typ if isinstance(typ, str) else typ.__name__}, "
                          f"got {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Load ``path``, falling back to $SARBNN_CONFIG, then to defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
