"""Run configuration and its plain-text key/value file format.

One ``key = value`` per line; ``#`` starts a comment.  Values are JSON
literals (numbers, ``true``/``false``, ``"strings"``, ``[lists]``); bare
words are read as strings.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..architecture import NetworkConfig
from ..augment import ExternalAugConfig, IntensityAugConfig, InternalAugConfig
from ..loss import WeightConfig

__all__ = ["ARMS", "ConfigError", "RunConfig", "lr_at", "lr_trace", "restart_epochs"]

ARMS = ("none", "exa", "internal", "internal-exa")
PLANES = ("axial", "coronal", "sagittal")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # network
    variant: str = "VINNA"
    arm: str = "internal"
    depth: int = 5
    channels: tuple[int, ...] = (16, 32, 32, 32, 32)
    res_inner: float = 0.8
    convs_per_block: int = 4
    thickness: int = 1
    # optimizer (decoupled weight decay Adam) and schedule
    lr: float = 0.001
    beta1: float = 0.95
    beta2: float = 0.999
    weight_decay: float = 1e-4
    t0: int = 10
    t_mult: int = 2
    eta_min: float = 0.0
    epochs: int = 70
    batch_size: int = 16
    # data
    manifest: str = "manifest.tsv"
    planes: tuple[str, ...] = PLANES
    seed: int = 0
    threads: int = 1
    max_slices_per_volume: int = 0
    # external augmentation
    ext_rot: tuple[float, float] = (-180.0, 180.0)
    ext_trans: tuple[float, float] = (0.0, 15.0)
    ext_scale: tuple[float, float] = (0.8, 1.15)
    # internal augmentation
    int_rot: tuple[float, float] = (-180.0, 180.0)
    int_trans: tuple[float, float] = (0.0, 15.0)
    alpha_sigma: float = 0.1
    # intensity augmentation
    intensity_prob: float = 0.4
    intensity_ops: tuple[str, ...] = ("bias", "gamma", "ghosting", "spiking", "blur", "noise")
    # loss weights
    loss_radius: int = 2
    loss_gradient: float = 1.0
    loss_w_gm: float = 2.0
    loss_w_wm: float = 2.0
    # view aggregation (axial, coronal, sagittal)
    view_weights: tuple[float, float, float] = (1.0, 1.0, 0.5)

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.variant not in ("CNN*", "VINN", "VINNA"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if self.arm.startswith("internal") and self.variant != "VINNA":
            raise ConfigError(f"arm {self.arm!r} needs the VINNA transform module, not {self.variant}")
        if not set(self.planes) <= set(PLANES) or not self.planes:
            raise ConfigError(f"planes must be a non-empty subset of {PLANES}")
        if self.lr <= 0 or self.t0 < 1 or self.t_mult < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, t0, t_mult, epochs and batch_size must be positive")
        if any(w <= 0 for w in self.view_weights):
            raise ConfigError("view weights must be > 0")
        if self.thickness < 1 or self.thickness % 2 == 0:
            raise ConfigError("slice thickness must be a positive odd number")

    # -- derived configs -------------------------------------------------

    @property
    def uses_external(self) -> bool:
        return self.arm in ("exa", "internal-exa")

    @property
    def uses_internal(self) -> bool:
        return self.arm in ("internal", "internal-exa")

    def network(self, plane: str, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            variant=self.variant, depth=self.depth, channels=self.channels, num_classes=num_classes,
            res_inner=self.res_inner, plane=plane, in_channels=self.thickness,
            convs_per_block=self.convs_per_block,
        )

    def external(self) -> ExternalAugConfig:
        # Scale jitter only for fixed-resolution networks; the others normalize resolution.
        return ExternalAugConfig(self.ext_rot, self.ext_trans, self.ext_scale, scale=self.variant == "CNN*")

    def internal(self) -> InternalAugConfig:
        if self.uses_internal:
            return InternalAugConfig(self.int_rot, self.int_trans, self.alpha_sigma)
        return InternalAugConfig((0.0, 0.0), (0.0, 0.0), self.alpha_sigma)

    def intensity(self) -> IntensityAugConfig:
        return IntensityAugConfig(self.intensity_prob, self.intensity_ops)

    def weights(self) -> WeightConfig:
        return WeightConfig(self.loss_radius, self.loss_gradient, self.loss_w_gm, self.loss_w_wm)

    # -- text format -----------------------------------------------------

    def dumps(self) -> str:
        lines = ["# latentseg run config v1"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, **overrides) -> RunConfig:
        known = {f.name for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def read(cls, path: str | Path, **overrides) -> RunConfig:
        return cls.loads(Path(path).read_text(), **overrides)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)


def restart_epochs(t0: int, t_mult: int, until: int) -> list[int]:
    """Epochs at which the schedule restarts (first restart at ``t0``)."""
    out, period, e = [], t0, t0
    while e <= until:
        out.append(e)
        period *= t_mult
        e += period
    return out


def lr_at(epoch: float, base: float, t0: int, t_mult: int = 2, eta_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts, evaluated in closed form at ``epoch``."""
    if t_mult == 1:
        t_i = t0
        t_cur = epoch % t0
    else:
        # index of the current cycle: sum_{k<n} t0 * m^k <= epoch
        n = int(math.floor(math.log(epoch / t0 * (t_mult - 1) + 1, t_mult))) if epoch >= t0 else 0
        start = t0 * (t_mult**n - 1) / (t_mult - 1)
        t_i = t0 * t_mult**n
        t_cur = epoch - start
        if t_cur >= t_i:  # guard against log rounding at cycle boundaries
            start += t_i
            t_cur -= t_i
            t_i *= t_mult
        elif t_cur < 0:
            t_i //= t_mult
            t_cur += t_i
    return eta_min + (base - eta_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2


def lr_trace(cfg: RunConfig) -> list[float]:
    return [lr_at(e, cfg.lr, cfg.t0, cfg.t_mult, cfg.eta_min) for e in range(cfg.epochs)]
