"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, duplicate keys and malformed values are errors that name the
offending line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .data import DATASETS
from .discriminator import DiscriminatorConfig
from .losses import LOSS_NAMES, LossConfig
from .segmentor import SegmentorConfig, canonical_variant, make_variant
from .trainer import TrainConfig

MODES = ("seg-only", "multi-task")


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None, source: str = "<config>"):
        self.line = line
        self.key = key
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class RunConfig:
    mode: str = "seg-only"
    dataset: str = "SYNTH"
    data_root: str = ""
    variant: str = "PPAU-Net"
    loss: str = "KLTV"
    seed: int = 0
    data_seed: int = 0
    out: str = "runs/run"
    device: str = "cpu"
    # data
    input_size: int = 128
    synth_count: int = 200
    # networks
    base_channels: int = 32
    disc_base_channels: int = 32
    disc_blocks: int = 5
    dropout: float = 0.4
    # optimization
    epochs: int = 300
    batch_size: int = 16
    lr_segmentor: float = 1e-5
    lr_discriminator: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    labeled_fraction: float = 0.10
    sup_weight: float = 1.0
    eval_every: int = 1
    checkpoint_every: int = 10
    threshold: float = 0.5
    classify_with: str = "prediction"
    # loss hyperparameters
    a: float = 1.0
    b: float = 1.0
    c: float = 0.1
    alpha: float = 0.3
    beta: float = 0.7
    epsilon: float = 1e-6
    kappa: float = 1e-4
    side_weights: tuple = (0.125, 0.25, 0.5, 1.0)
    # report/figure output
    overlays: int = 4

    def validate(self, source: str = "<config>", lines: Optional[dict] = None) -> "RunConfig":
        lines = lines or {}

        def fail(key, msg):
            raise ConfigError(msg, lines.get(key), key, source)

        if self.mode not in MODES:
            fail("mode", f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.dataset.upper() not in DATASETS:
            fail("dataset", f"dataset must be one of {', '.join(DATASETS)}, got {self.dataset!r}")
        self.dataset = self.dataset.upper()
        try:
            self.variant = canonical_variant(self.variant)
        except ValueError as exc:
            fail("variant", str(exc))
        if self.loss.upper() not in LOSS_NAMES:
            fail("loss", f"loss must be one of {', '.join(LOSS_NAMES)}, got {self.loss!r}")
        self.loss = self.loss.upper()
        builders = (
            ("input_size", self.segmentor_config),
            ("dropout", lambda: self.discriminator_config(2)),
            ("alpha", self.loss_config),
            ("epochs", self.train_config),
        )
        for key, build in builders:
            try:
                build()
            except ValueError as exc:
                bad = next((k for k in lines if k in str(exc)), key)
                fail(bad, str(exc))
        if self.overlays < 0:
            fail("overlays", "overlays must be nonnegative")
        return self

    def segmentor_config(self) -> SegmentorConfig:
        return make_variant(self.variant, input_size=self.input_size, base_channels=self.base_channels)

    def discriminator_config(self, n_real_classes: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            n_real_classes=n_real_classes,
            input_size=self.input_size,
            base_channels=self.disc_base_channels,
            n_blocks=self.disc_blocks,
            dropout_rate=self.dropout,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.a, self.b, self.c, self.alpha, self.beta, self.epsilon, self.kappa, self.side_weights)

    def train_config(self, checkpoint_dir: Optional[str] = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_segmentor=self.lr_segmentor,
            lr_discriminator=self.lr_discriminator,
            beta1=self.beta1,
            beta2=self.beta2,
            labeled_fraction=self.labeled_fraction,
            loss=self.loss,
            loss_cfg=self.loss_config(),
            sup_weight=self.sup_weight,
            seed=self.seed,
            threshold=self.threshold,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=checkpoint_dir,
            classify_with=self.classify_with,
        )

    @property
    def model_name(self) -> str:
        prefix = "A" if self.mode == "multi-task" else ""
        return f"{prefix}{self.variant}-{self.loss}"

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def parse_pairs(text: str, source: str = "<config>") -> list:
    """``[(lineno, key, raw_value)]`` for every setting line."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, None, source)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", lineno, None, source)
        pairs.append((lineno, key, value))
    return pairs


def apply_pairs(pairs, base: Optional[RunConfig] = None, source: str = "<config>"):
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    lines: dict = {}
    for lineno, key, raw in pairs:
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno, key, source)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, key, source)
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, key, source) from None
        lines[key] = lineno
    return cfg, lines


def parse_config(text: str, source: str = "<config>", overrides: Optional[dict] = None) -> RunConfig:
    cfg, lines = apply_pairs(parse_pairs(text, source), source=source)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate(source, lines)


def load_config(path: Union[str, Path], overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, str(path), overrides)


# --------------------------------------------------------------------------
# sweep matrices

MATRIX_KEYS = {"datasets": "dataset", "variants": "variant", "losses": "loss", "modes": "mode"}


@dataclass
class SweepMatrix:
    base: RunConfig
    axes: dict = field(default_factory=dict)   # run-config key -> list of values

    def runs(self) -> list:
        combos = [{}]
        for key, values in self.axes.items():
            combos = [dict(c, **{key: v}) for c in combos for v in values]
        out = []
        for combo in combos:
            cfg = dataclasses.replace(self.base, **combo).validate()
            out.append(cfg)
        return out


def parse_matrix(text: str, source: str = "<matrix>") -> SweepMatrix:
    """A run config whose ``datasets``/``variants``/``losses``/``modes`` keys hold comma lists."""
    pairs = parse_pairs(text, source)
    axes = {}
    rest = []
    for lineno, key, raw in pairs:
        if key in MATRIX_KEYS:
            values = [v.strip() for v in raw.split(",") if v.strip()]
            if not values:
                raise ConfigError(f"{key} needs at least one value", lineno, key, source)
            axes[MATRIX_KEYS[key]] = values
        else:
            rest.append((lineno, key, raw))
    base, lines = apply_pairs(rest, source=source)
    base.validate(source, lines)
    matrix = SweepMatrix(base, axes)
    for cfg_key, values in axes.items():
        for v in values:
            try:
                dataclasses.replace(base, **{cfg_key: v}).validate(source)
            except ConfigError:
                line = next(ln for ln, k, _ in pairs if MATRIX_KEYS.get(k) == cfg_key)
                raise ConfigError(f"invalid {cfg_key} {v!r}", line, cfg_key, source) from None
    return matrix


def load_matrix(path: Union[str, Path]) -> SweepMatrix:
    path = Path(path)
    return parse_matrix(path.read_text(), str(path))
