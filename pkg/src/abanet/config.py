"""Architecture and run configuration: profiles, key=value files, digests."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class EncoderBlockConfig:
    """Geometry of one encoder stack (convolution sublayers, then
    self-attention and feed-forward, per block)."""
    num_conv_layers: int
    kernel: int
    num_blocks: int


@dataclass
class CapsuleConfig:
    primary_count: int
    primary_dim: int
    digit_count: int
    digit_dim: int
    routing_iterations: int


@dataclass
class ModelConfig:
    """All architecture/training hyperparameters.

    The defaults are the published ones; ``mini_profile`` shrinks every
    width until a full-model finite-difference check is affordable.
    """

    d: int = 128
    num_heads: int = 8
    ffn_hidden: int = 128
    embedding_encoder: EncoderBlockConfig = field(
        default_factory=lambda: EncoderBlockConfig(5, 7, 1))
    model_encoder: EncoderBlockConfig = field(
        default_factory=lambda: EncoderBlockConfig(2, 5, 4))
    capsules: CapsuleConfig = field(
        default_factory=lambda: CapsuleConfig(16, 8, 16, 8, 3))

    # embedding layer
    word_dim: int = 300
    word_trainable: bool = False
    char_emb_dim: int = 16
    char_out_dim: int = 64
    char_kernel: int = 3
    max_word_len: int = 16
    pos_dim: int = 16
    ner_dim: int = 8
    rule_dim: int = 4
    pos_vocab: int = 64
    ner_vocab: int = 32
    rule_vocab: int = 8
    provider_layers: int = 4
    provider_width: int = 128
    lstm_hidden: int = 128
    lstm_layers: int = 1

    # regularization
    dropout_word: float = 0.1
    dropout_char: float = 0.05
    dropout_layer: float = 0.1
    survival_end: float = 0.9
    l2_decay: float = 3e-7

    # attention
    lambda_init: str = "identity"  # "identity" or "paper"
    use_adaptive_scale: bool = True

    # head / optimization
    max_span_len: int = 30
    unanswerable: bool = False
    batch_size: int = 25
    learning_rate: float = 1e-3
    warmup_steps: int = 100

    @property
    def feature_dim(self) -> int:
        return self.pos_dim + self.ner_dim + self.rule_dim

    @property
    def word_component_dim(self) -> int:
        return self.word_dim + self.feature_dim

    @property
    def selected_dim(self) -> int:
        """Width after the top-3 granularity selection (3 stacked levels)."""
        return 3 * self.d

    @property
    def fused_dim(self) -> int:
        return 4 * self.selected_dim

    def validate(self) -> None:
        caps = self.capsules
        if self.d % self.num_heads:
            raise ConfigError(
                f"width d={self.d} not divisible by num_heads={self.num_heads}")
        if caps.primary_count * caps.primary_dim != self.d:
            raise ConfigError(
                f"primary capsules {caps.primary_count}x{caps.primary_dim} "
                f"do not tile width d={self.d}")
        if caps.digit_count * caps.digit_dim != self.d:
            raise ConfigError(
                f"digit capsules {caps.digit_count}x{caps.digit_dim} "
                f"do not tile width d={self.d}")
        if caps.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        for name, enc in (("embedding_encoder", self.embedding_encoder),
                          ("model_encoder", self.model_encoder)):
            if enc.kernel % 2 == 0:
                raise ConfigError(f"{name}.kernel must be odd, got {enc.kernel}")
            if enc.num_conv_layers < 0 or enc.num_blocks < 0:
                raise ConfigError(f"{name} sizes must be nonnegative")
        if not 0.0 < self.survival_end <= 1.0:
            raise ConfigError(
                f"survival_end must be in (0, 1], got {self.survival_end}")
        for name in ("dropout_word", "dropout_char", "dropout_layer"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.lambda_init not in ("identity", "paper"):
            raise ConfigError(
                f"lambda_init must be 'identity' or 'paper', got {self.lambda_init!r}")
        if self.char_kernel % 2 == 0 or self.char_kernel > self.max_word_len:
            raise ConfigError(
                f"char_kernel={self.char_kernel} must be odd and fit within "
                f"max_word_len={self.max_word_len}")
        if self.max_span_len < 1:
            raise ConfigError("max_span_len must be >= 1")
        if self.d % 2:
            raise ConfigError("width d must be even for positional encoding")


@dataclass
class RunConfig:
    """ModelConfig plus everything a CLI run needs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    profile: str = "paper"
    data: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    out_dir: str = "."
    seed: int = 0
    epochs: int = 10
    steps: int | None = None
    task: str = "copy-locate"
    synthetic_size: int = 50
    dump_attention: bool = False


def paper_profile() -> ModelConfig:
    return ModelConfig()


def mini_profile() -> ModelConfig:
    return ModelConfig(
        d=8,
        num_heads=2,
        ffn_hidden=8,
        embedding_encoder=EncoderBlockConfig(1, 3, 1),
        model_encoder=EncoderBlockConfig(1, 3, 1),
        capsules=CapsuleConfig(2, 4, 2, 4, 1),
        word_dim=16,
        char_emb_dim=4,
        char_out_dim=8,
        char_kernel=3,
        max_word_len=8,
        pos_dim=4,
        ner_dim=2,
        rule_dim=2,
        pos_vocab=20,
        ner_vocab=10,
        rule_vocab=5,
        provider_layers=4,
        provider_width=8,
        lstm_hidden=4,
        batch_size=10,
        learning_rate=5e-3,
        warmup_steps=20,
    )


PROFILES = {"paper": paper_profile, "mini": mini_profile}


# ---------------------------------------------------------------------------
# Flat key=value plumbing
# ---------------------------------------------------------------------------

def _flatten_fields(cls, prefix: str = "") -> dict[str, type]:
    """Map dotted key -> declared field type, recursing into dataclasses."""
    out: dict[str, type] = {}
    for f in dataclasses.fields(cls):
        if dataclasses.is_dataclass(f.type) or f.type in (
                "EncoderBlockConfig", "CapsuleConfig"):
            sub = {"EncoderBlockConfig": EncoderBlockConfig,
                   "CapsuleConfig": CapsuleConfig}.get(f.type, f.type)
            out.update(_flatten_fields(sub, prefix + f.name + "."))
        else:
            out[prefix + f.name] = f.type
    return out


_MODEL_KEYS = _flatten_fields(ModelConfig)
_RUN_KEYS = {
    "data": "str | None", "embeddings": "str | None",
    "checkpoint": "str | None", "out_dir": "str", "seed": "int",
    "epochs": "int", "steps": "int | None", "task": "str",
    "synthetic_size": "int", "dump_attention": "bool", "profile": "str",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: str, type_name: str):
    base = type_name.replace(" ", "")
    optional = base.endswith("|None")
    if optional:
        base = base[:-len("|None")]
        if value.lower() in ("", "none"):
            return None
    try:
        if base == "int":
            return int(value)
        if base == "float":
            return float(value)
        if base == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {base}")


def parse_config_file(path: str) -> dict[str, str]:
    """Read a flat ``key=value`` file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def build_run_config(file_values: dict[str, str] | None = None,
                     overrides: dict[str, str] | None = None) -> RunConfig:
    """Layer profile defaults, then config-file values, then CLI flags."""
    merged: dict[str, str] = {}
    merged.update(file_values or {})
    merged.update(overrides or {})

    profile = merged.pop("profile", "paper")
    if profile not in PROFILES:
        raise ConfigError(
            f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    run = RunConfig(model=PROFILES[profile](), profile=profile)

    for key, value in merged.items():
        if key in _RUN_KEYS:
            setattr(run, key, _coerce(key, value, _RUN_KEYS[key]))
        elif key in _MODEL_KEYS:
            obj = run.model
            *path, leaf = key.split(".")
            for part in path:
                obj = getattr(obj, part)
            type_name = _MODEL_KEYS[key]
            type_name = type_name if isinstance(type_name, str) else type_name.__name__
            setattr(obj, leaf, _coerce(key, value, type_name))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    run.model.validate()
    return run


def flatten_model_config(model: ModelConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for key in _MODEL_KEYS:
        obj = model
        for part in key.split("."):
            obj = getattr(obj, part)
        out[key] = obj
    return out


def digest_config(model: ModelConfig, extra: dict[str, object] | None = None) -> str:
    """Stable digest of the architecture plus data-dependent sizes.

    Stored in checkpoints so that loading under a different architecture
    fails loudly instead of silently reinterpreting the buffer.
    """
    items = dict(flatten_model_config(model))
    items.update(extra or {})
    text = "\n".join(f"{k}={items[k]!r}" for k in sorted(items))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
