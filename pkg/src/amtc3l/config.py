"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Precedence is flags > file > defaults. Every key is validated before any
computation starts; unknown keys are rejected with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .data import DataConfig, DataError
from .model import ModelConfig
from .trainer import ConfigError, TrainConfig


def _opt(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(s: str):
        if s.strip().lower() in ("", "none", "auto"):
            return None
        return conv(s)

    return parse


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s: str) -> str:
    return s.strip()


def _int(s: str) -> int:
    return int(s.strip(), 0)


@dataclass(frozen=True)
class RunConfig:
    # model
    d_in: int = 32
    c_f: int = 16
    h_f: int = 2
    w_f: int = 2
    c_d: int = 8
    k_classes: int = 7
    hidden: int = 32
    # training
    lam: float = 0.1
    nss: str = "mm"
    margin_mode: str = "adaptive"
    fixed_margin: float = 1.0
    lr: float = 0.05
    center_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    batch_size: int = 64
    seed: int = 0
    attention: str = "element"
    attention_reduction: int = 4
    jitter_std: float = 0.0
    center_weight_decay: float = 0.0
    folds: int = 0
    # data
    n_total: int = 2800
    proportions: Optional[tuple[float, ...]] = None
    separation: float = 3.0
    noise_std: float = 1.0
    data_seed: Optional[int] = None
    train_fraction: float = 0.75
    data_path: Optional[str] = None
    test_path: Optional[str] = None
    dump_stats: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_in=self.d_in, c_f=self.c_f, h_f=self.h_f, w_f=self.w_f,
            c_d=self.c_d, k_classes=self.k_classes, hidden=self.hidden,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam, nss=self.nss, margin_mode=self.margin_mode, fixed_margin=self.fixed_margin,
            lr=self.lr, center_lr=self.center_lr, momentum=self.momentum,
            weight_decay=self.weight_decay, epochs=self.epochs, lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor, batch_size=self.batch_size, seed=self.seed,
            attention=self.attention, attention_reduction=self.attention_reduction,
            jitter_std=self.jitter_std, center_weight_decay=self.center_weight_decay,
        )

    def data_config(self) -> DataConfig:
        return DataConfig(
            k_classes=self.k_classes, d_in=self.d_in, n_total=self.n_total,
            proportions=self.proportions, separation=self.separation, noise_std=self.noise_std,
            jitter_std=self.jitter_std,
            seed=self.seed if self.data_seed is None else self.data_seed,
        )

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def validate(self) -> "RunConfig":
        """Build every sub-config so all constraints are checked up front."""
        try:
            mc = self.model_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        tc = self.train_config()
        tc.check_against(mc)
        if self.data_path is None:
            try:
                self.data_config()
            except DataError as exc:
                raise ConfigError(f"data: {exc}") from None
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.folds == 1 or self.folds < 0:
            raise ConfigError("folds must be 0 (off) or at least 2")
        return self

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# config-file / flag name -> dataclass field
KEY_ALIASES = {"lambda": "lam"}
FIELD_KEYS = {v: k for k, v in KEY_ALIASES.items()}
_FIELD_NAMES = frozenset(f.name for f in fields(RunConfig))

_PARSERS: dict[str, Callable[[str], Any]] = {
    "center_lr": _opt(float),
    "proportions": _opt(_floats),
    "data_seed": _opt(_int),
    "data_path": _opt(_str),
    "test_path": _opt(_str),
    "dump_stats": _bool,
}


def key_names() -> list[str]:
    return [FIELD_KEYS.get(f.name, f.name) for f in fields(RunConfig)]


def _field_for(key: str) -> str:
    name = KEY_ALIASES.get(key, key)
    if name not in _FIELD_NAMES:
        raise KeyError(key)
    return name


def parse_value(key: str, raw: str):
    name = _field_for(key)
    if name in _PARSERS:
        return _PARSERS[name](raw)
    default = getattr(RunConfig(), name)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return _int(raw)
    if isinstance(default, float):
        return float(raw)
    return _str(raw)


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        try:
            name = _field_for(key)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}") from None
        try:
            values[name] = parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_config(path=None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``.

    ``overrides`` maps key names (``lambda`` or ``lam``) to raw strings or
    already-typed values.
    """
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        values.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    for key, raw in (overrides or {}).items():
        try:
            name = _field_for(key)
        except KeyError:
            raise ConfigError(f"flag: unknown key {key!r}") from None
        try:
            values[name] = parse_value(key, raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"flag --{key}: {exc}") from None
    try:
        cfg = RunConfig(**values)
    except (ConfigError, DataError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, tuple):
        return ",".join(format(x, ".17g") for x in v)
    return str(v)


def render_config(cfg: RunConfig) -> str:
    lines = [f"{FIELD_KEYS.get(f.name, f.name)} = {_render(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
