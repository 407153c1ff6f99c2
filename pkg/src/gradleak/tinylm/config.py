"""Configuration records for the toy causal transformer and its fine-tuning modes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gradleak.errors import InvalidToken, SequenceTooLong, ShapeError

PAD, BOS, PN_OPEN, PN_CLOSE = 0, 1, 2, 3
NUM_RESERVED = 4


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 128
    positional_mode: str = "rotary"
    mlp_hidden: int = 128

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.num_layers, self.num_heads,
               self.max_seq_len, self.mlp_hidden) <= 0:
            raise ShapeError("all model dimensions must be positive")
        if self.embed_dim % self.num_heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 2:
            raise ShapeError("max_seq_len must be at least 2")
        if self.vocab_size < NUM_RESERVED:
            raise ShapeError(f"vocab_size must be >= {NUM_RESERVED}")
        if self.positional_mode not in ("absolute", "rotary"):
            raise ShapeError(f"unknown positional_mode {self.positional_mode!r}")
        if self.positional_mode == "rotary" and (self.embed_dim // self.num_heads) % 2:
            raise ShapeError("rotary mode needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "max_seq_len": self.max_seq_len,
            "positional_mode": self.positional_mode,
            "mlp_hidden": self.mlp_hidden,
        }


@dataclass(frozen=True)
class FullFT:
    name = "full"

    def validate(self, config: ModelConfig):
        pass


@dataclass(frozen=True)
class Lora:
    """Low-rank adapters ``W + A @ B`` on the listed attention projections."""

    rank: int
    layers: tuple[int, ...] = (0, 1)
    targets: tuple[str, ...] = ("wq", "wv")
    name = "lora"

    def validate(self, config: ModelConfig):
        if self.rank <= 0 or self.rank > config.embed_dim // 2:
            raise ShapeError(f"lora rank {self.rank} must be in [1, d/2={config.embed_dim // 2}]")
        _check_layers(self.layers, config)
        bad = set(self.targets) - {"wq", "wk", "wv", "wo"}
        if bad:
            raise ShapeError(f"unknown lora targets {sorted(bad)}")


@dataclass(frozen=True)
class Selective:
    """Only the listed transformer blocks are trainable (0-based indices)."""

    layers: tuple[int, ...] = (0, 1)
    name = "selective"

    def validate(self, config: ModelConfig):
        _check_layers(self.layers, config)


PeftMode = FullFT | Lora | Selective


def _check_layers(layers, config):
    if not layers:
        raise ShapeError("at least one layer index required")
    for k in layers:
        if not 0 <= k < config.num_layers:
            raise ShapeError(f"layer index {k} out of range for {config.num_layers} layers")


def peft_mode_to_dict(mode: PeftMode) -> dict:
    if isinstance(mode, Lora):
        return {"name": "lora", "rank": mode.rank, "layers": list(mode.layers),
                "targets": list(mode.targets)}
    if isinstance(mode, Selective):
        return {"name": "selective", "layers": list(mode.layers)}
    return {"name": "full"}


def peft_mode_from_dict(d: dict) -> PeftMode:
    name = d["name"]
    if name == "lora":
        return Lora(rank=int(d["rank"]), layers=tuple(d.get("layers", (0, 1))),
                    targets=tuple(d.get("targets", ("wq", "wv"))))
    if name == "selective":
        return Selective(layers=tuple(d.get("layers", (0, 1))))
    if name == "full":
        return FullFT()
    raise ValueError(f"unknown peft mode {name!r}")


@dataclass(frozen=True)
class TokenBatch:
    sequences: tuple[tuple[int, ...], ...]
    lengths: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        seqs = tuple(tuple(int(t) for t in s) for s in self.sequences)
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "lengths", tuple(len(s) for s in seqs))

    @classmethod
    def of(cls, sequences: Sequence[Sequence[int]]) -> "TokenBatch":
        return cls(tuple(tuple(s) for s in sequences))

    @property
    def b(self) -> int:
        return len(self.sequences)

    @property
    def b_n(self) -> int:
        return sum(self.lengths)

    def validate(self, config: ModelConfig):
        if not self.sequences:
            raise ShapeError("empty batch")
        for i, seq in enumerate(self.sequences):
            if not seq:
                raise ShapeError(f"sequence {i} is empty")
            if len(seq) > config.max_seq_len:
                raise SequenceTooLong(
                    f"sequence {i} has {len(seq)} tokens, max_seq_len is {config.max_seq_len}")
            for t in seq:
                if not 0 <= t < config.vocab_size:
                    raise InvalidToken(f"token id {t} outside vocabulary of {config.vocab_size}")

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Token matrix (b, n) right-padded with PAD, and the (b, n) validity mask."""
        n = max(self.lengths)
        tokens = np.full((self.b, n), PAD, dtype=np.int64)
        mask = np.zeros((self.b, n), dtype=bool)
        for i, seq in enumerate(self.sequences):
            tokens[i, :len(seq)] = seq
            mask[i, :len(seq)] = True
        return tokens, mask
