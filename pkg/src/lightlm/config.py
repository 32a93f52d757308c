"""Encoder architecture description, validation, and exact parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import TextIO

from .errors import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    """Full architectural description of one encoder.

    ``share_layers`` makes every layer application reference one physical set
    of layer weights. ``embedding_size < hidden_size`` inserts a learned
    projection after the embeddings (the factorized-embedding scheme); when
    the two are equal no projection exists.
    """

    num_layers: int
    hidden_size: int
    embedding_size: int
    num_heads: int
    intermediate_size: int
    vocab_size: int
    max_positions: int = 512
    share_layers: bool = False
    use_token_type: bool = True
    use_pooler: bool = True
    dropout: float = 0.1

    def validate(self) -> "EncoderConfig":
        problems = []
        if self.num_layers < 1:
            problems.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_size < 1:
            problems.append(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.num_heads < 1:
            problems.append(f"num_heads must be >= 1, got {self.num_heads}")
        elif self.hidden_size % self.num_heads != 0:
            problems.append(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if not 1 <= self.embedding_size <= self.hidden_size:
            problems.append(
                f"embedding_size must be in [1, hidden_size], got {self.embedding_size}"
            )
        if self.intermediate_size < 1:
            problems.append(f"intermediate_size must be >= 1, got {self.intermediate_size}")
        if self.vocab_size < 1:
            problems.append(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.max_positions < 1:
            problems.append(f"max_positions must be >= 1, got {self.max_positions}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def count_parameters(config: EncoderConfig) -> int:
    """Exact number of trainable scalars ``build_model`` allocates.

    Covers embeddings, the (single, when shared) layer stack, the pooler and
    the masked-LM transform. The tied output matrix is counted once, under
    the word embeddings; task heads are not part of the encoder.
    """
    config.validate()
    V, E, H, I = (
        config.vocab_size,
        config.embedding_size,
        config.hidden_size,
        config.intermediate_size,
    )
    n = V * E + config.max_positions * E + 2 * E  # word + position + embedding norm
    if config.use_token_type:
        n += 2 * E
    if E != H:
        n += E * H + H
    layer = 4 * (H * H + H) + 2 * H + (H * I + I) + (I * H + H) + 2 * H
    n += layer * (1 if config.share_layers else config.num_layers)
    if config.use_pooler:
        n += H * H + H
    n += H * E + E + 2 * E + V  # mlm transform + its norm + tied-output bias
    return n


_BOOL_FIELDS = frozenset(("share_layers", "use_token_type", "use_pooler"))


def config_to_text(config: EncoderConfig) -> str:
    """Serialize as a flat key = value document."""
    lines = []
    for f in fields(EncoderConfig):
        value = getattr(config, f.name)
        if f.name in _BOOL_FIELDS:
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def parse_flat_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and #-comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def config_from_text(text: str, source: str = "<config>") -> EncoderConfig:
    entries = parse_flat_kv(text, source)
    known = {f.name for f in fields(EncoderConfig)}
    unknown = set(entries) - known
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    missing = known - set(entries)
    if missing:
        raise ConfigError(f"{source}: missing keys {sorted(missing)}")
    kwargs = {}
    for f in fields(EncoderConfig):
        raw = entries[f.name]
        if f.name in _BOOL_FIELDS:
            if raw not in ("true", "false"):
                raise ConfigError(f"{source}: {f.name} must be true/false, got {raw!r}")
            kwargs[f.name] = raw == "true"
        elif f.name == "dropout":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return EncoderConfig(**kwargs).validate()


def save_encoder_config(config: EncoderConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(config))


def load_encoder_config(path) -> EncoderConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_text(f.read(), source=str(path))
