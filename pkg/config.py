"""
Configuration for the grading toolkit.

Holds the module-level constants, the typed configuration records
(model, training, decoding, pipeline) and the `key = value` config-file
layer the command line merges under explicit flags.
"""

import dataclasses
import hashlib
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Optional

from errors import InvalidConfig

logger = logging.getLogger(__name__)

# ==============================================================================
# CONSTANTS
# ==============================================================================

# Model architecture
DEFAULT_VOCAB_SIZE = 512
DEFAULT_D_MODEL = 64
DEFAULT_N_HEADS = 4
DEFAULT_N_LAYERS = 2
DEFAULT_MAX_SEQ_LEN = 512  # Matches the fine-tuning recipe's maximum sequence length
MLP_EXPANSION = 4  # Hidden width of the block MLP is MLP_EXPANSION * d_model
INIT_STD = 0.02  # Std of the Gaussian used for every weight matrix and embedding
LAYER_NORM_EPS = 1e-5

# Quantized base
QUANT_BITS = 4
QUANT_BLOCK_SIZE = 64  # Elements per absmax block; >= element count gives whole-tensor scaling

# Low-rank adapters
LORA_RANK = 8
LORA_ALPHA = 16.0
LORA_INIT_STD = 0.02  # A ~ N(0, 0.02^2); B starts at exactly zero

# Grading data
MOHLER_MAX_GRADE = 5.0
MOHLER_STEP = 0.5
UPSAMPLE_BINS = 10
MOHLER_CLASSES = 11  # 0.0 .. 5.0 in half steps

# Environment variables
ENV_THREADS = 'QGRADE_THREADS'
ENV_LOG_LEVEL = 'QGRADE_LOG_LEVEL'
ENV_ACCEPTANCE = 'QGRADE_ACCEPTANCE'

HEAD_KINDS = ('lm', 'regression', 'classification')
TUNE_MODES = ('lora', 'heads', 'full')
DECODE_MODES = ('greedy', 'sample')
GRADE_SOURCES = ('gold', 'predicted')

# ==============================================================================
# END CONSTANTS
# ==============================================================================


@dataclass
class ModelConfig:
    """Architecture and fine-tuning mode of the decoder-only model."""
    vocab_size: int = DEFAULT_VOCAB_SIZE
    d_model: int = DEFAULT_D_MODEL
    n_heads: int = DEFAULT_N_HEADS
    n_layers: int = DEFAULT_N_LAYERS
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    head_kind: str = 'regression'
    n_classes: int = MOHLER_CLASSES
    quantize_base: bool = True
    tune: str = 'lora'
    lora_rank: int = LORA_RANK
    lora_alpha: float = LORA_ALPHA
    quant_bits: int = QUANT_BITS
    quant_block_size: int = QUANT_BLOCK_SIZE

    def validate(self):
        if self.vocab_size < 6:
            raise InvalidConfig(f"vocab_size must exceed the 5 reserved ids, got {self.vocab_size}")
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0:
            raise InvalidConfig("d_model and n_heads must be positive, n_layers non-negative")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 1:
            raise InvalidConfig(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.head_kind not in HEAD_KINDS:
            raise InvalidConfig(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.head_kind == 'classification' and self.n_classes < 2:
            raise InvalidConfig(f"classification needs n_classes >= 2, got {self.n_classes}")
        if self.tune not in TUNE_MODES:
            raise InvalidConfig(f"tune must be one of {TUNE_MODES}, got {self.tune!r}")
        if self.tune == 'full' and self.quantize_base:
            raise InvalidConfig("tune=full cannot train a quantized base; use tune=lora or tune=heads")
        if self.quant_bits not in (4, 8):
            raise InvalidConfig(f"quant_bits must be 4 or 8, got {self.quant_bits}")
        if self.quant_block_size < 1:
            raise InvalidConfig(f"quant_block_size must be positive, got {self.quant_block_size}")
        if self.lora_rank < 1 or self.lora_alpha <= 0:
            raise InvalidConfig("lora_rank must be >= 1 and lora_alpha > 0")
        return self


@dataclass
class TrainConfig:
    """Optimizer and loop settings. Defaults are the scorer recipe."""
    batch_size: int = 4
    learning_rate: float = 2e-4  # Constant schedule
    weight_decay: float = 0.05
    epochs: int = 10
    early_stop_patience: int = 10
    seed: int = 0
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: Optional[float] = None

    def validate(self):
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise InvalidConfig("learning_rate and adam_eps must be positive")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.early_stop_patience < 1:
            raise InvalidConfig(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidConfig("adam betas must lie in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise InvalidConfig(f"grad_clip_norm must be positive when set, got {self.grad_clip_norm}")
        return self


# Scorer runs: 10 epochs, weight decay 0.05. Feedback runs: 20 epochs, weight decay 1e-3.
_PRESETS = {
    'scorer': TrainConfig(weight_decay=0.05, epochs=10),
    'feedback': TrainConfig(weight_decay=1e-3, epochs=20),
}


def preset(name):
    """Return a fresh copy of a named training preset ('scorer' or 'feedback')."""
    if name not in _PRESETS:
        raise InvalidConfig(f"Unknown preset {name!r}. Must be one of: {', '.join(sorted(_PRESETS))}")
    return dataclasses.replace(_PRESETS[name])


@dataclass
class DecodeConfig:
    mode: str = 'greedy'
    temperature: float = 1.0
    max_new_tokens: int = 32
    stop_id: int = 3  # eos
    seed: int = 0

    def validate(self):
        if self.mode not in DECODE_MODES:
            raise InvalidConfig(f"decode mode must be one of {DECODE_MODES}, got {self.mode!r}")
        if self.temperature <= 0:
            raise InvalidConfig(f"temperature must be positive, got {self.temperature}")
        if self.max_new_tokens < 0:
            raise InvalidConfig(f"max_new_tokens must be non-negative, got {self.max_new_tokens}")
        return self


@dataclass
class PipelineConfig:
    include_question: bool = True
    train_grade_source: str = 'gold'
    upsample: bool = False
    upsample_bins: int = UPSAMPLE_BINS
    use_rubric: bool = True

    def validate(self):
        if self.train_grade_source not in GRADE_SOURCES:
            raise InvalidConfig(f"train_grade_source must be one of {GRADE_SOURCES}")
        if self.upsample_bins < 2:
            raise InvalidConfig(f"upsample_bins must be >= 2, got {self.upsample_bins}")
        return self


@dataclass
class DataConfig:
    path: Optional[str] = None
    scale: Optional[str] = None  # None: use each record's own scale column
    vocab_max_size: int = DEFAULT_VOCAB_SIZE


@dataclass
class RunConfig:
    """Everything one command needs, addressable as `section.key` in config files."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.decode.validate()
        self.pipeline.validate()
        return self


# ==============================================================================
# CONFIG FILE LAYER
# ==============================================================================

def parse_config_text(text):
    """
    Parse `key = value` lines into an ordered dict of raw strings.

    Blank lines and lines starting with '#' are ignored. Trailing
    '# comment' text after a value is stripped.

    Example:
        >>> parse_config_text("train.epochs = 3  # quick run")
        {'train.epochs': '3'}
    """
    values = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise InvalidConfig(f"config line {line_number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise InvalidConfig(f"config line {line_number}: empty key")
        values[key] = value
    return values


def load_config_file(path):
    with open(path, encoding='utf-8') as handle:
        values = parse_config_text(handle.read())
    logger.info("Loaded %d config values from %s", len(values), path)
    return values


def _coerce(raw, target_type, key):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(target_type)
    if origin is typing.Union:
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if raw.lower() in ('', 'none', 'null'):
            return None
        target_type = args[0]
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise InvalidConfig(f"config key {key!r}: cannot read {raw!r} as {target_type.__name__}") from None


def apply_overrides(run_config, values):
    """
    Return a copy of `run_config` with `section.key` values applied.

    Values may be raw strings (from a config file) or already-typed
    values (from argparse). Unknown sections or keys raise InvalidConfig.
    """
    sections = {f.name: getattr(run_config, f.name) for f in dataclasses.fields(run_config)}
    updates = {name: {} for name in sections}
    for key, raw in values.items():
        section, _, name = key.partition('.')
        if section not in sections or not name:
            raise InvalidConfig(f"Unknown config key {key!r}")
        target = sections[section]
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise InvalidConfig(f"Unknown config key {key!r}")
        updates[section][name] = _coerce(raw, hints[name], key)
    replaced = {name: dataclasses.replace(obj, **updates[name]) for name, obj in sections.items()}
    return dataclasses.replace(run_config, **replaced)


def config_items(run_config):
    """Canonical sorted `section.key=value` lines for a RunConfig."""
    items = []
    for section in dataclasses.fields(run_config):
        obj = getattr(run_config, section.name)
        for f in dataclasses.fields(obj):
            items.append(f"{section.name}.{f.name}={getattr(obj, f.name)!r}")
    return sorted(items)


def config_hash(run_config):
    canonical = '\n'.join(config_items(run_config)).encode('utf-8')
    return hashlib.sha256(canonical).hexdigest()


def evaluation_threads():
    """Thread cap for evaluation fan-out, from QGRADE_THREADS (default 1)."""
    raw = os.environ.get(ENV_THREADS, '1')
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", ENV_THREADS, raw)
        return 1
