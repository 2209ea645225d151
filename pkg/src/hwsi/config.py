"""Flat JSON run configuration with per-key provenance.

A run config file is a single JSON object whose keys are drawn from
``RunConfig``'s fields.  Values not in the file keep their defaults;
command-line flags override both.  ``provenance`` records which of the three
supplied each value so the run header can echo it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from hwsi.encoders import EncoderConfig
from hwsi.errors import ConfigError
from hwsi.losses import LossConfig
from hwsi.spf import SpfConfig
from hwsi.synthgen import GenConfig
from hwsi.training import StageConfig

_GEN = {f.name for f in fields(GenConfig)} - {"seed"}
_ENC = {f.name for f in fields(EncoderConfig)} - {"d_cell_raw", "d_patch_raw", "text_vocab"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # corpus
    classes: int = 8
    n_samples: int = 320
    regions_per_wsi: int = 4
    patches_per_region: int = 16
    cells_per_patch: int = 8
    d_cell_raw: int = 16
    d_patch_raw: int = 16
    d_text_raw: int = 16
    noise: float = 0.1
    cell_vocab: int = 32
    patch_vocab: int = 64
    region_vocab: int = 48
    wsi_vocab: int = 8
    region_pool: int = 6
    patch_pool: int = 4
    patches_active: int = 2
    cell_pool: int = 3
    split_train: float = 0.8
    split_val: float = 0.0
    split_test: float = 0.2
    distractor_prob: float = 0.2
    # model
    d_cell: int = 32
    d_patch: int = 32
    d_text: int = 32
    d_joint: int = 32
    ccaf_blocks: int = 2
    ccaf_heads: int = 2
    region_blocks: int = 1
    region_heads: int = 2
    wsi_blocks: int = 1
    wsi_heads: int = 2
    ff_mult: int = 2
    activation: str = "relu"
    dtype: str = "float64"
    # patch filtering
    top_k: int = 8
    # objective
    tau: float = 0.02
    w_scale: float = 1.0
    w_wsi: float = 1.0
    w_consistency: float = 1.0
    # optimization
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    batch_stage1: int = 8
    batch_stage2: int = 8
    epochs_stage1: int = 50
    epochs_stage2: int = 20
    provenance: dict = field(default_factory=dict, compare=False, repr=False)

    # -- views ---------------------------------------------------------------
    def gen_config(self) -> GenConfig:
        return GenConfig(seed=self.seed, **{k: getattr(self, k) for k in _GEN})

    def encoder_config(self, corpus) -> EncoderConfig:
        return EncoderConfig(d_cell_raw=corpus.config.d_cell_raw, d_patch_raw=corpus.config.d_patch_raw,
                             text_vocab=corpus.bank.vocab_size,
                             **{k: getattr(self, k) for k in _ENC}).validate()

    def spf_config(self, mode: str = "training") -> SpfConfig:
        return SpfConfig(top_k=self.top_k, mode=mode).validate()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.w_scale, self.w_wsi, self.w_consistency).validate()

    def stage_config(self, stage: int) -> StageConfig:
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        return StageConfig(stage=stage, lr=getattr(self, f"lr_stage{stage}"),
                           batch_size=getattr(self, f"batch_stage{stage}"),
                           epochs=getattr(self, f"epochs_stage{stage}"), seed=self.seed).validate()

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("provenance")
        return out

    def echo(self) -> dict:
        """Values plus where each came from, for run headers."""
        return {k: {"value": v, "source": self.provenance.get(k, "default")} for k, v in self.to_dict().items()}

    # -- validation ----------------------------------------------------------
    def validate(self) -> "RunConfig":
        for f in fields(self):
            if f.name == "provenance":
                continue
            _check_type(f.name, getattr(self, f.name), _TYPES[f.name])
        _check_range(self)
        try:
            self.gen_config().validate()
            self.spf_config()
            self.loss_config()
            self.stage_config(1)
            self.stage_config(2)
        except ConfigError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return self


KEYS = tuple(f.name for f in fields(RunConfig) if f.name != "provenance")
_TYPES = {k: type(getattr(RunConfig, k)) for k in KEYS}


def _check_type(key, value, expected) -> None:
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")


_POSITIVE = ("tau", "lr_stage1", "lr_stage2")
_NONNEG = ("noise", "w_scale", "w_wsi", "w_consistency", "split_train", "split_val", "split_test")
_CHOICES = {"activation": ("relu", "gelu"), "dtype": ("float64", "float32")}


def _check_range(cfg: RunConfig) -> None:
    for key in KEYS:
        value = getattr(cfg, key)
        if key in _POSITIVE and not value > 0:
            raise ConfigError(f"{key}: must be > 0, got {value}")
        if key in _NONNEG and value < 0:
            raise ConfigError(f"{key}: must be >= 0, got {value}")
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"{key}: must be one of {_CHOICES[key]}, got {value!r}")
        if _TYPES[key] is int and key != "seed" and value < 1:
            raise ConfigError(f"{key}: must be >= 1, got {value}")
    if not 0.0 <= cfg.distractor_prob <= 1.0:
        raise ConfigError(f"distractor_prob: must lie in [0, 1], got {cfg.distractor_prob}")
    if cfg.seed < 0:
        raise ConfigError(f"seed: must be >= 0, got {cfg.seed}")


def _merge(base: RunConfig, values: dict, source: str) -> RunConfig:
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: float(v) if _TYPES[k] is float and type(v) is int else v for k, v in values.items()}
    prov = dict(base.provenance)
    prov.update({k: source for k in values})
    return replace(base, provenance=prov, **values)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags)."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = _merge(cfg, values, "file")
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "flag")
    return cfg.validate()


def config_from_echo(echo: dict) -> RunConfig:
    """Rebuild a config from ``RunConfig.echo()`` output (run headers)."""
    return _merge(RunConfig(), {k: v["value"] for k, v in echo.items()}, "file").validate()
