"""Flat parameter vectors, clipping and deterministic RNG streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


class Layout(tuple):
    """Ordered, contiguous segments of a flat vector."""

    def __new__(cls, segments: Iterable[Segment]):
        segments = tuple(segments)
        pos = 0
        for seg in segments:
            if seg.offset != pos or seg.length < 0:
                raise ValueError(f"segment {seg.name!r} is not contiguous at offset {pos}")
            pos = seg.stop
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names")
        return super().__new__(cls, segments)

    @classmethod
    def from_sizes(cls, sizes: Sequence[tuple[str, int]]) -> "Layout":
        segs, pos = [], 0
        for name, n in sizes:
            segs.append(Segment(name, pos, int(n)))
            pos += int(n)
        return cls(segs)

    @property
    def size(self) -> int:
        return self[-1].stop if self else 0

    def segment(self, name: str) -> Segment:
        for seg in self:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def index(self, names: Iterable[str]) -> np.ndarray:
        """Flat coordinate indices covered by the named segments, in layout order."""
        wanted = set(names)
        unknown = wanted - {s.name for s in self}
        if unknown:
            raise KeyError(f"unknown segments: {sorted(unknown)}")
        parts = [np.arange(s.offset, s.stop) for s in self if s.name in wanted]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


class ParamVector:
    """Immutable float64 vector with a segment layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout | None = None):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if layout is None:
            layout = Layout.from_sizes([("values", arr.size)])
        if layout.size != arr.size:
            raise ValueError(f"layout covers {layout.size} entries, vector has {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ParamVector entries must be finite")
        arr.flags.writeable = False
        self.values = arr
        self.layout = layout

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        names = ",".join(s.name for s in self.layout)
        return f"ParamVector(dim={len(self)}, segments=[{names}])"

    def get(self, name: str) -> np.ndarray:
        seg = self.layout.segment(name)
        return self.values[seg.offset:seg.stop]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        check_same_layout(self, other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        check_same_layout(self, other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, factor: float) -> "ParamVector":
        return ParamVector(self.values * float(factor), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)


def check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ValueError("parameter layouts differ")


def l2_norm(v: ParamVector | np.ndarray) -> float:
    x = v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(x, x)))


def clip_array(x: np.ndarray, threshold: float) -> np.ndarray:
    if threshold <= 0:
        raise ValueError("clipping threshold must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot clip a non-finite vector")
    norm = float(np.sqrt(np.dot(x, x)))
    if norm <= threshold:
        return x.copy()
    return x * (threshold / norm)


def clip(v: ParamVector, threshold: float) -> ParamVector:
    """Scale ``v`` by ``min(1, threshold / ||v||)``."""
    return ParamVector(clip_array(v.values, threshold), v.layout)


# Fixed codes keep stream keys stable across Python hash seeds.
def _kind_code(kind: str) -> int:
    return zlib.crc32(kind.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, kind, index, round).

    Each call to :meth:`generator` returns a fresh generator positioned at
    the start of the stream, so a stream can be replayed exactly.
    """

    seed: int
    kind: str = "root"
    index: int = 0
    round: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_kind_code(self.kind), int(self.index), int(self.round)),
        )
        return np.random.Generator(np.random.Philox(ss))

    def child(self, kind: str, index: int = 0, round: int = 0) -> "RngStream":
        # Nested kinds keep sub-streams of one entity distinct from top-level ones.
        return RngStream(self.seed, f"{self.kind}/{kind}:{self.index}:{self.round}", index, round)


def noise_array(stream: RngStream, dim: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.zeros(dim)
    return stream.generator().standard_normal(dim) * sigma


def gaussian_noise(stream: RngStream, dim: int, sigma: float, layout: Layout | None = None) -> ParamVector:
    """i.i.d. N(0, sigma^2) per coordinate; all zeros when sigma is 0."""
    return ParamVector(noise_array(stream, dim, sigma), layout)
