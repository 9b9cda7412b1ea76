"""Run configuration.

Every section is a dataclass. Loading is strict: unknown keys raise
``ConfigError`` so a typo in an ablation config never silently falls back to
a default. Defaults are the published hyperparameters; ``toy_config()`` is the
desk-scale preset used by the shipped toy corpus.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

ENCODER_ROLES = ("detail", "reconstruction", "target")


@dataclass(frozen=True)
class EncoderSpec:
    role: str
    input_size: int
    patch_size: int
    d_enc: int
    # "toy:<seed>" builds the in-repo random patch transformer; anything else is a state-dict path.
    weights_ref: str
    depth: int = 1
    heads: int = 2
    pooling: str = "mean"
    color_invariant: bool = False

    def __post_init__(self):
        if self.role not in ENCODER_ROLES:
            raise ConfigError(f"encoder role must be one of {ENCODER_ROLES}, got {self.role!r}")
        if self.input_size < 1 or self.patch_size < 1 or self.input_size % self.patch_size:
            raise ConfigError(
                f"input_size {self.input_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.d_enc < 1:
            raise ConfigError("d_enc must be positive")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def grid(self):
        n = self.input_size // self.patch_size
        return (n, n)

    @property
    def n_patches(self):
        h, w = self.grid
        return h * w


def _detail_spec():
    return EncoderSpec("detail", 32, 4, 48, "toy:101", depth=1, heads=2, color_invariant=True)


def _recon_spec():
    return EncoderSpec("reconstruction", 32, 8, 32, "toy:202", depth=1, heads=2)


def _target_spec():
    return EncoderSpec("target", 32, 8, 32, "toy:404", depth=1, heads=2)


@dataclass
class ExtractorConfig:
    detail: EncoderSpec = field(default_factory=_detail_spec)
    recon: EncoderSpec = field(default_factory=_recon_spec)
    mode: str = "ensemble"  # ensemble | detail_only | recon_only
    crop_to_mask: bool = True
    crop_margin: float = 0.1
    d_hidden: typing.Optional[int] = None
    activation: str = "gelu"


@dataclass
class DenoiserConfig:
    latent_channels: int = 3
    base_width: int = 32
    depth: int = 2
    heads: int = 4
    d_model: int = 32
    T: int = 1000
    image_size: int = 16
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    injection: str = "both"  # both | global | local


@dataclass
class TextConfig:
    max_len: int = 24
    vocab_size: int = 1024
    seed: int = 303


@dataclass
class CodecConfig:
    mode: str = "identity"  # identity | tiny_autoencoder
    scale: float = 2.0
    latent_channels: int = 4


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 32
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.01
    contrast_sign: float = 1.0
    contrast_form: str = "abs"  # abs | signed
    cond_dropout: float = 0.1
    epochs: int = 6
    max_steps: typing.Optional[int] = None
    weight_decay: float = 0.0
    seed: int = 0
    max_skip_fraction: float = 0.01
    target_encoder: EncoderSpec = field(default_factory=_target_spec)


@dataclass
class SamplingConfig:
    steps: int = 50
    cfg_scale: float = 7.0


def _default_embedders():
    return {
        "clip_i": {"kind": "toy_conv", "seed": 11, "dim": 64},
        "dino_i": {"kind": "toy_conv", "seed": 12, "dim": 64, "color_invariant": True},
        "clip_t": {"kind": "scene_text"},
        "fid": {"kind": "toy_conv", "seed": 13, "dim": 16},
    }


@dataclass
class MetricsConfig:
    embedders: dict = field(default_factory=_default_embedders)
    compare_to: str = "reference"  # reference | target
    diversim_pairs: str = "cross"  # cross | all
    max_missing_fraction: float = 0.05
    diversim_base_prompt: str = "a photo of a {class_word}."
    images_per_scenario: int = 1


@dataclass
class DatasetConfig:
    min_side: int = 300
    pairs_per_group: int = 1
    min_frame_gap: int = 0
    jitter: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    text: TextConfig = field(default_factory=TextConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        validate(self)


def validate(cfg):
    ex, dn, tr = cfg.extractor, cfg.denoiser, cfg.train
    if ex.mode not in ("ensemble", "detail_only", "recon_only"):
        raise ConfigError(f"unknown extractor mode {ex.mode!r}")
    if ex.detail.role != "detail" or ex.recon.role != "reconstruction":
        raise ConfigError("extractor.detail / extractor.recon must carry roles detail / reconstruction")
    if dn.injection not in ("both", "global", "local"):
        raise ConfigError(f"unknown injection mode {dn.injection!r}")
    if dn.depth < 1:
        raise ConfigError("denoiser.depth must be >= 1")
    if dn.image_size % (2 ** (dn.depth - 1)):
        raise ConfigError("denoiser.image_size must be divisible by 2**(depth-1)")
    if not 0.0 < dn.beta_start < dn.beta_end < 1.0:
        raise ConfigError("need 0 < beta_start < beta_end < 1")
    if min(tr.alpha1, tr.alpha2, tr.alpha3) < 0:
        raise ConfigError("loss weights must be non-negative")
    if not 0.0 <= tr.cond_dropout < 1.0:
        raise ConfigError("cond_dropout must lie in [0, 1)")
    if tr.contrast_form not in ("signed", "abs"):
        raise ConfigError("contrast_form must be signed or abs")
    if tr.contrast_sign not in (1.0, -1.0):
        raise ConfigError("contrast_sign must be +1 or -1")
    if tr.target_encoder.d_enc != dn.d_model:
        raise ConfigError("target encoder width must equal d_model (the masked feature is added to the fused token)")
    if tr.batch_size < 1 or tr.epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    if cfg.sampling.steps < 1 or cfg.sampling.steps > dn.T:
        raise ConfigError("sampling.steps must lie in [1, T]")
    if cfg.codec.mode not in ("identity", "tiny_autoencoder"):
        raise ConfigError(f"unknown codec mode {cfg.codec.mode!r}")
    if cfg.metrics.compare_to not in ("reference", "target"):
        raise ConfigError("metrics.compare_to must be reference or target")
    if cfg.metrics.diversim_pairs not in ("cross", "all"):
        raise ConfigError("metrics.diversim_pairs must be cross or all")


# -- (de)serialization ------------------------------------------------------------


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return copy.deepcopy(value)
    return value


def from_dict(cls, data, path=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(source=None):
    """Load a RunConfig from a YAML/JSON file, a packaged preset name, or None (defaults)."""
    if source is None:
        return RunConfig()
    if isinstance(source, dict):
        return from_dict(RunConfig, source)
    path = Path(source)
    if not path.exists():
        preset = Path(__file__).parent / "configs" / f"{source}.yaml"
        if not preset.exists():
            raise ConfigError(f"config file not found: {source}")
        path = preset
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(RunConfig, data)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        # embedder entries are free-form, everything else must already exist
        free_form = parts[:2] == ["metrics", "embedders"] and len(parts) >= 3
        node = data
        for depth, p in enumerate(parts[:-1]):
            if free_form and depth >= 2 and isinstance(node, dict):
                node = node.setdefault(p, {})
                continue
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if not isinstance(node, dict) or (parts[-1] not in node and not free_form):
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(RunConfig, data)


def toy_config(**overrides):
    """Desk-scale preset for the procedural shapes corpus (same file as configs/toy.yaml)."""
    cfg = load_config("toy")
    if overrides:
        cfg = apply_overrides(cfg, [f"{k}={v}" for k, v in overrides.items()])
    return cfg
