"""Event-aligned byte sequence sampling and padding-free batches."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import EVENT_SIZE, EventStream
from .ingest import load_stream
from .model.layers import Segments


class FileTooSmall(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass
class SamplerConfig:
    min_len_bytes: int = 3200
    max_len_bytes: int = 10240
    alignment: int = EVENT_SIZE
    seed: int = 0

    def __post_init__(self):
        a = self.alignment
        if a <= 0 or self.min_len_bytes % a or self.max_len_bytes % a:
            raise ValueError("sequence bounds must be positive multiples of the alignment")
        if not 0 < self.min_len_bytes <= self.max_len_bytes:
            raise ValueError("need 0 < min_len_bytes <= max_len_bytes")

    @classmethod
    def desk(cls, seed: int = 0) -> "SamplerConfig":
        """Short sequences sized for single-core CPU training."""
        return cls(min_len_bytes=256, max_len_bytes=512, seed=seed)


@dataclass
class SequenceSample:
    bytes: np.ndarray  # uint8
    source_offset: int

    @property
    def event_count(self) -> int:
        return len(self.bytes) // EVENT_SIZE

    def __len__(self):
        return len(self.bytes)


class Corpus:
    """Flat byte view over a packed event payload."""

    def __init__(self, payload):
        if isinstance(payload, EventStream):
            payload = payload.events
        if isinstance(payload, np.ndarray) and payload.dtype.names:
            payload = payload.view(np.uint8).reshape(-1)
        elif isinstance(payload, (bytes, bytearray, memoryview)):
            payload = np.frombuffer(bytes(payload), dtype=np.uint8)
        self.data = np.ascontiguousarray(payload, dtype=np.uint8)

    @classmethod
    def open(cls, path) -> "Corpus":
        return cls(load_stream(Path(path)))

    def __len__(self):
        return len(self.data)


def sample_sequence(corpus, cfg: SamplerConfig, rng: np.random.Generator) -> SequenceSample:
    """One aligned window: offset uniform over aligned positions, length uniform over aligned sizes.

    A window running past the end is clipped to the largest aligned length
    that fits; offsets where even ``min_len_bytes`` does not fit are redrawn,
    which is the same as drawing uniformly from the offsets that do fit.
    """
    data = corpus.data if isinstance(corpus, Corpus) else Corpus(corpus).data
    a = cfg.alignment
    n = len(data) - len(data) % a
    if n < cfg.min_len_bytes:
        raise FileTooSmall(f"payload of {len(data)} bytes is below min_len_bytes={cfg.min_len_bytes}")
    n_offsets = (n - cfg.min_len_bytes) // a + 1
    off = int(rng.integers(0, n_offsets)) * a
    length = int(rng.integers(cfg.min_len_bytes // a, cfg.max_len_bytes // a + 1)) * a
    length = min(length, n - off)
    return SequenceSample(data[off:off + length], off)


def make_pair(s) -> tuple[np.ndarray, np.ndarray]:
    b = s.bytes if isinstance(s, SequenceSample) else np.asarray(s, dtype=np.uint8)
    if len(b) == 0:
        raise ValueError("empty sample")
    return b[:-1], b[1:]


@dataclass
class RaggedBatch:
    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    lengths: list[int] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return int(sum(self.lengths))

    def __len__(self):
        return len(self.inputs)

    def packed(self) -> tuple[torch.Tensor, torch.Tensor, Segments]:
        """Concatenated (inputs, targets) with the segment descriptor for the model."""
        x = torch.from_numpy(np.concatenate(self.inputs).astype(np.int64))
        y = torch.from_numpy(np.concatenate(self.targets).astype(np.int64))
        return x, y, Segments.from_lengths(self.lengths)


def build_batch(samples) -> RaggedBatch:
    if not samples:
        raise EmptyBatch("no samples")
    inputs, targets, lengths = [], [], []
    for s in samples:
        if len(s) < 2:
            raise ValueError("each sample needs at least two bytes to form a pair")
        x, y = make_pair(s)
        inputs.append(x)
        targets.append(y)
        lengths.append(len(x))
    return RaggedBatch(inputs, targets, lengths)


class Sampler:
    """Seeded stream of samples and batches from one corpus."""

    def __init__(self, corpus, cfg: SamplerConfig):
        self.corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        if len(self.corpus) < cfg.min_len_bytes:
            raise FileTooSmall(f"payload of {len(self.corpus)} bytes is below min_len_bytes={cfg.min_len_bytes}")

    def sample(self) -> SequenceSample:
        return sample_sequence(self.corpus, self.cfg, self.rng)

    def batch(self, batch_size: int) -> RaggedBatch:
        return build_batch([self.sample() for _ in range(batch_size)])

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state
