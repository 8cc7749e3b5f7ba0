"""Run configuration and its INI-file representation.

Config files are key/value pairs grouped into sections ([run], [scales],
[weights], [temperatures], [masking], [contrastive], [encoder], [data]).
Every key has a default; unknown sections or keys are rejected. The
vocabulary is fixed by the closed grammar and is not configurable.
"""

import configparser
import io
from dataclasses import dataclass, field

from qsvlm.data import VOCAB, DataConfig
from qsvlm.encoders import EncoderConfig
from qsvlm.losses.global_align import TemperatureParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    global_weight: float = 1.0
    local_weight: float = 1.0
    instance_weight: float = 1.0
    modality_weight: float = 1.0

    def __post_init__(self):
        values = (self.global_weight, self.local_weight,
                  self.instance_weight, self.modality_weight)
        if any(w < 0 for w in values):
            raise ConfigError("loss weights must be non-negative")
        if all(w == 0 for w in values):
            raise ConfigError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 900
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    use_local: bool = True
    use_instance: bool = True
    use_modality: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    temperatures: TemperatureParams = field(default_factory=TemperatureParams)
    image_mask_ratio: float = 0.75
    text_mask_ratio: float = 0.15
    norm_pix_targets: bool = True
    symmetric_global: bool = True
    symmetric_local: bool = True
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(vocab_size=len(VOCAB)))
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.use_instance and self.batch_size < 2:
            raise ConfigError("instance matching needs batch_size >= 2 for negatives")
        if not 0.0 < self.image_mask_ratio < 1.0:
            raise ConfigError("image_mask_ratio must lie strictly between 0 and 1")
        if not 0.0 < self.text_mask_ratio < 1.0:
            raise ConfigError("text_mask_ratio must lie strictly between 0 and 1")
        if self.encoder.vocab_size != len(VOCAB):
            raise ConfigError("encoder vocab_size is fixed by the grammar vocabulary")
        if self.encoder.image_size != self.data.image_size:
            raise ConfigError("encoder and data image_size must agree")


# section -> {ini key: (dataclass path, type)}
_SCHEMA = {
    "run": {
        "seed": ("seed", int),
        "steps": ("steps", int),
        "batch_size": ("batch_size", int),
        "learning_rate": ("learning_rate", float),
        "weight_decay": ("weight_decay", float),
    },
    "scales": {
        "local": ("use_local", bool),
        "instance": ("use_instance", bool),
        "modality": ("use_modality", bool),
    },
    "weights": {
        "global": ("weights.global_weight", float),
        "local": ("weights.local_weight", float),
        "instance": ("weights.instance_weight", float),
        "modality": ("weights.modality_weight", float),
    },
    "temperatures": {
        "tau1": ("temperatures.tau1", float),
        "tau2": ("temperatures.tau2", float),
        "tau_att": ("temperatures.tau_att", float),
    },
    "masking": {
        "image_ratio": ("image_mask_ratio", float),
        "text_ratio": ("text_mask_ratio", float),
        "norm_pix_targets": ("norm_pix_targets", bool),
    },
    "contrastive": {
        "symmetric_global": ("symmetric_global", bool),
        "symmetric_local": ("symmetric_local", bool),
    },
    "encoder": {
        "image_size": ("encoder.image_size", int),
        "patch_size": ("encoder.patch_size", int),
        "embed_dim": ("encoder.embed_dim", int),
        "depth": ("encoder.depth", int),
        "heads": ("encoder.heads", int),
        "max_tokens": ("encoder.max_tokens", int),
        "max_sentences": ("encoder.max_sentences", int),
    },
    "data": {
        "image_size": ("data.image_size", int),
        "min_motifs": ("data.min_motifs", int),
        "max_motifs": ("data.max_motifs", int),
        "motif_min_size": ("data.motif_min_size", int),
        "motif_max_size": ("data.motif_max_size", int),
        "noise_level": ("data.noise_level", float),
        "max_distractors": ("data.max_distractors", int),
    },
}


def _coerce(parser, section, key, kind):
    try:
        if kind is bool:
            return parser.getboolean(section, key)
        if kind is int:
            return parser.getint(section, key)
        return parser.getfloat(section, key)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    flat: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            path, kind = _SCHEMA[section][key]
            flat[path] = _coerce(parser, section, key, kind)

    def group(prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in flat.items() if k.startswith(prefix + ".")}

    top = {k: v for k, v in flat.items() if "." not in k}
    # keep encoder/data image_size in sync when only one is given
    enc_kwargs = group("encoder")
    data_kwargs = group("data")
    if "image_size" in enc_kwargs and "image_size" not in data_kwargs:
        data_kwargs["image_size"] = enc_kwargs["image_size"]
    if "image_size" in data_kwargs and "image_size" not in enc_kwargs:
        enc_kwargs["image_size"] = data_kwargs["image_size"]
    try:
        return TrainConfig(
            weights=LossWeights(**group("weights")),
            temperatures=TemperatureParams(**group("temperatures")),
            encoder=EncoderConfig(vocab_size=len(VOCAB), **enc_kwargs),
            data=DataConfig(**data_kwargs),
            **top,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_ini(config: TrainConfig) -> str:
    """Serialize a TrainConfig to its INI form (stable key order)."""
    parser = configparser.ConfigParser()

    def get(path: str):
        obj = config
        for part in path.split("."):
            obj = getattr(obj, part)
        return obj

    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, (path, kind) in keys.items():
            value = get(path)
            parser[section][key] = str(value).lower() if kind is bool else repr(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
