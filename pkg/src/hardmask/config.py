"""Configuration dataclasses, strict dict/YAML loading, and named profiles.

Every run is described by a single ``RunConfig`` tree.  Loading is strict:
unknown keys are rejected, and every sub-config validates its own ranges.
The canonical snapshot form (``snapshot_dict`` / ``save_snapshot``) is a
sorted-key YAML document that reloads to an identical config.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass
class SynthConfig:
    """Synthetic corpus: utterances concatenated from a unit codebook."""

    num_utterances: int = 200
    segments_per_utterance: int = 8
    codebook_size: int = 8
    segment_len_range: tuple[int, int] = (250, 450)
    sample_rate: int = 8000
    seed: int = 0

    def validate(self) -> None:
        if self.num_utterances < 1:
            raise ConfigurationError("num_utterances must be >= 1")
        if self.segments_per_utterance < 1:
            raise ConfigurationError("segments_per_utterance must be >= 1")
        if self.codebook_size < 2:
            raise ConfigurationError("codebook_size must be >= 2")
        lo, hi = self.segment_len_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"segment_len_range {self.segment_len_range} is empty")
        if self.sample_rate < 1:
            raise ConfigurationError("sample_rate must be positive")


@dataclass
class FrontendConfig:
    """Fixed strided-conv feature frontend (waveform -> frames).

    ``layers`` is a tuple of (channels, kernel, stride) stages.  Weights are
    drawn once from ``seed`` and never trained; the frontend is a deterministic
    feature extractor shared by construction between student and teacher,
    which lets batches be assembled (and prefetched) independently of the
    training loop.  ``passthrough`` accepts precomputed N x d feature arrays.
    """

    layers: tuple[tuple[int, int, int], ...] = ((64, 10, 5), (64, 8, 4), (64, 4, 2))
    passthrough: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not self.passthrough and not self.layers:
            raise ConfigurationError("frontend needs at least one conv layer")
        for i, layer in enumerate(self.layers):
            if len(layer) != 3:
                raise ConfigurationError(f"frontend layer {i} must be (channels, kernel, stride)")
            ch, k, s = layer
            if ch < 1 or k < 1 or s < 1:
                raise ConfigurationError(f"frontend layer {i} has non-positive geometry")

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0]

    def key(self) -> tuple:
        return (self.layers, self.seed)


@dataclass
class ModelConfig:
    """Encoder/decoder/predictor geometry.

    Desk-scale defaults; ``paper_profile()`` documents the full-scale values.
    """

    dim: int = 64
    encoder_layers: int = 4
    attention_heads: int = 2
    ffn_dim: int = 128
    head_layers: int = 2
    head_dim: int = 64
    head_kernel: int = 7
    head_groups: int = 1
    layers_to_average: int = 8  # clamped to encoder_layers at use
    max_positions: int = 2048
    instance_norm_eps: float = 1e-5
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    def validate(self) -> None:
        self.frontend.validate()
        if self.dim < 1 or self.encoder_layers < 1 or self.ffn_dim < 1:
            raise ConfigurationError("model dims must be positive")
        if self.dim % self.attention_heads != 0:
            raise ConfigurationError("dim must be divisible by attention_heads")
        if self.head_layers < 1 or self.head_dim < 1 or self.head_kernel < 1:
            raise ConfigurationError("head geometry must be positive")
        if self.head_dim % self.head_groups != 0:
            raise ConfigurationError("head_dim must be divisible by head_groups")
        if self.layers_to_average < 1:
            raise ConfigurationError("layers_to_average must be >= 1")
        if not self.frontend.passthrough and self.frontend.output_dim != self.dim:
            raise ConfigurationError(
                f"frontend output dim {self.frontend.output_dim} != model dim {self.dim}"
            )

    @property
    def effective_layers_to_average(self) -> int:
        return min(self.layers_to_average, self.encoder_layers)


#: Recognised curriculum schedules: "e2h" grows the selective share linearly,
#: "hard" is always fully selective, "random" is never selective.
SCHEDULES = ("e2h", "hard", "random")


@dataclass
class MaskConfig:
    """Block-mask geometry and curriculum parameters."""

    mask_prob: float = 0.5
    mask_length: int = 5
    min_masks: int = 0
    require_same_masks: bool = True
    mask_dropout: float = 0.0
    total_epochs: int = 30
    schedule: str = "e2h"
    mask_adjust: float = 0.05  # reserved knob, accepted but unused by the pipeline
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigurationError("mask_prob must be in (0, 1)")
        if self.mask_length < 1:
            raise ConfigurationError("mask_length must be >= 1")
        if self.min_masks < 0:
            raise ConfigurationError("min_masks must be >= 0")
        if not 0.0 <= self.mask_dropout < 1.0:
            raise ConfigurationError("mask_dropout must be in [0, 1)")
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")


@dataclass
class EmaSchedule:
    """Teacher decay anneal: linear from tau_start to tau_end over anneal_steps."""

    tau_start: float = 0.99
    tau_end: float = 0.999
    anneal_steps: int = 1000

    def validate(self) -> None:
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ConfigurationError("need 0 <= tau_start <= tau_end <= 1")
        if self.anneal_steps < 1:
            raise ConfigurationError("anneal_steps must be >= 1")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 300
    total_steps: int = 3000
    epochs: int = 30
    batch_size: int = 8
    mask: MaskConfig = field(default_factory=MaskConfig)
    ema: EmaSchedule = field(default_factory=EmaSchedule)
    alpha: float = 0.05
    aux_normalize: bool = True
    aux_detach_encoder: bool = False
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    tracked_utterance: int | None = None

    def validate(self) -> None:
        self.mask.validate()
        self.ema.validate()
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigurationError("warmup_steps must be < total_steps")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")


@dataclass
class HarnessConfig:
    """Evaluation harness options.

    ``probe_layer`` 0 selects the final normalized encoder output; 1..K select
    the residual-stream output of that layer.
    """

    probe_layer: int = 0
    probe_train_fraction: float = 0.8
    degrade_percentages: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    degrade_use_actual: bool = False

    def validate(self) -> None:
        if self.probe_layer < 0:
            raise ConfigurationError("probe_layer must be >= 0")
        if not 0.0 < self.probe_train_fraction < 1.0:
            raise ConfigurationError("probe_train_fraction must be in (0, 1)")
        last = 0.0
        for p in self.degrade_percentages:
            if not 0.0 <= p < 1.0:
                raise ConfigurationError("degrade percentages must be in [0, 1)")
            if p <= last and p != self.degrade_percentages[0]:
                raise ConfigurationError("degrade percentages must be strictly increasing")
            last = p


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.model.validate()
        self.train.validate()
        self.harness.validate()
        if self.harness.probe_layer > self.model.encoder_layers:
            raise ConfigurationError("harness.probe_layer exceeds encoder depth")


# ---------------------------------------------------------------------------
# strict dict loading


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):  # Optional[...]
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a bool")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an int")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string")
        return value
    raise ConfigurationError(f"{path}: unsupported config type {tp!r}")


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a plain dict, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name: hints[f.name] for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for name, tp in known.items():
        if name in data:
            kwargs[name] = _coerce(tp, data[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def snapshot_dict(cfg: RunConfig) -> dict:
    """Canonical plain-dict form of a config (tuples become lists)."""
    return dataclasses.asdict(cfg)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def save_snapshot(cfg: RunConfig, path: str | Path) -> None:
    """Write the canonical snapshot atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(yaml.safe_dump(snapshot_dict(cfg), sort_keys=True))
    tmp.replace(path)


def desk_profile() -> RunConfig:
    """Default minutes-scale CPU profile used throughout the test suite."""
    return RunConfig()


def paper_profile() -> RunConfig:
    """Full-scale profile, shipped for documentation only (not CI-sized).

    Matches the published base recipe: 12-layer encoder, 4 conv layers in the
    decoder and loss predictor (width 384, kernel 7, 16 groups), top-8 layer
    averaging, EMA 0.999 -> 0.99999 over 75k steps, Adam(0.9, 0.98) at
    7.5e-4 with 8k warmup and cosine decay over 400k updates, mask blocks of
    width 5 at probability 0.5, alpha 0.05.
    """
    cfg = RunConfig()
    cfg.model = ModelConfig(
        dim=768,
        encoder_layers=12,
        attention_heads=12,
        ffn_dim=3072,
        head_layers=4,
        head_dim=384,
        head_kernel=7,
        head_groups=16,
        layers_to_average=8,
        frontend=FrontendConfig(
            layers=((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
                    (512, 3, 2), (512, 2, 2), (768, 2, 2)),
        ),
    )
    cfg.train = TrainConfig(
        learning_rate=7.5e-4,
        warmup_steps=8000,
        total_steps=400_000,
        epochs=100,
        batch_size=64,
        mask=MaskConfig(mask_prob=0.5, mask_length=5, total_epochs=100),
        ema=EmaSchedule(tau_start=0.999, tau_end=0.99999, anneal_steps=75_000),
        alpha=0.05,
        aux_normalize=False,
    )
    return cfg
