"""Server-side stage-2 processing: stacked updates, secure-sum aggregation and rescaling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ClientDataset, FrozenBackbone, cross_entropy, logits
from .numeric import ParamVector, RngStream, check_same_layout, clip_array, l2_norm
from .privacy import SecureSum, noise_share
from .stats import NormalityReport, shapiro_w

NORMALITY_CUTOFF = 0.99
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class ClusterModelSet:
    models: tuple[ParamVector, ...]
    backbone: FrozenBackbone
    round: int = 0

    def __post_init__(self):
        if not self.models:
            raise ValueError("need at least one cluster model")
        for m in self.models[1:]:
            check_same_layout(self.models[0], m)

    def __len__(self) -> int:
        return len(self.models)

    @property
    def layout(self):
        return self.models[0].layout


@dataclass(frozen=True)
class StackedClientUpdate:
    blocks: tuple[ParamVector, ...]
    selected: int

    def flat(self) -> np.ndarray:
        return np.concatenate([b.values for b in self.blocks])


def cluster_losses(backbone: FrozenBackbone, models: ClusterModelSet, data: ClientDataset) -> np.ndarray:
    return np.array([np.mean(cross_entropy(logits(backbone, m, data.X), data.y)) for m in models.models])


def identify_cluster(backbone: FrozenBackbone, models: ClusterModelSet, data: ClientDataset) -> int:
    """Index of the cluster model with the lowest empirical loss; ties go to the lower index."""
    return int(np.argmin(cluster_losses(backbone, models, data)))


def build_stacked_update(selected: int, delta: ParamVector, C: int) -> StackedClientUpdate:
    if not 0 <= selected < C:
        raise ValueError(f"selected cluster {selected} outside [0, {C})")
    zero = delta.zeros_like()
    return StackedClientUpdate(tuple(delta if i == selected else zero for i in range(C)), selected)


def client_share(update: StackedClientUpdate, z: float, S: float, n_parties: int,
                 stream: RngStream, noise_factor: float = 1.0) -> np.ndarray:
    """Client-side: jointly clip the stacked vector and add this client's noise slice."""
    return noise_share(clip_array(update.flat(), S), z * noise_factor, S, n_parties, stream)


def split_blocks(flat: np.ndarray, layout, C: int) -> list[ParamVector]:
    dim = layout.size
    return [ParamVector(flat[i * dim:(i + 1) * dim], layout) for i in range(C)]


def aggregate_round(updates: Sequence[StackedClientUpdate], z: float, S: float,
                    streams: Sequence[RngStream], noise_factor: float = 1.0) -> list[ParamVector]:
    """Per-cluster mean of jointly clipped stacked updates plus distributed noise.

    ``noise_factor`` scales the total noise std (used to emulate a larger
    virtual cohort); the default keeps it at ``z * S``.
    """
    if not updates:
        raise ValueError("empty round")
    if len(streams) != len(updates):
        raise ValueError("need one noise stream per client")
    C = len(updates[0].blocks)
    layout = updates[0].blocks[0].layout
    channel = SecureSum(C * layout.size)
    for u, s in zip(updates, streams):
        channel.submit(client_share(u, z, S, len(updates), s, noise_factor))
    return aggregate_from_sum(channel, layout, C)


def aggregate_from_sum(channel: SecureSum, layout, C: int) -> list[ParamVector]:
    """Server view: the revealed sum divided by the cohort size, one block per cluster."""
    n = channel.count
    return split_blocks(channel.reveal() / n, layout, C)


def normalize_updates(aggregates: Sequence[ParamVector]) -> list[ParamVector]:
    """Rescale every aggregate to the smallest non-zero norm among them.

    Aggregates with norm below 1e-12 are left as they are and excluded from
    the minimum; if all are that small nothing changes.
    """
    norms = [l2_norm(a) for a in aggregates]
    live = [n for n in norms if n >= ZERO_NORM]
    if not live:
        return list(aggregates)
    target = min(live)
    return [a if n < ZERO_NORM else a * (target / n) for a, n in zip(aggregates, norms)]


def normality_reports(aggregates: Sequence[ParamVector], stream: RngStream) -> list[NormalityReport]:
    """W per aggregate; a constant aggregate is reported as W = 1."""
    out = []
    for i, a in enumerate(aggregates):
        try:
            out.append(shapiro_w(a, stream=stream.child("shapiro", i)))
        except ValueError:
            if np.ptp(a.values) > 0 or len(a) < 3:
                raise
            out.append(NormalityReport(W=1.0, n=len(a)))
    return out


def normality_scale(aggregates: Sequence[ParamVector], reports: Sequence[NormalityReport],
                    cutoff: float = NORMALITY_CUTOFF) -> list[ParamVector]:
    """Weight each aggregate by W_i / sum_j W_j, zeroing those with W_i >= cutoff."""
    if len(reports) != len(aggregates):
        raise ValueError("need one normality report per aggregate")
    w = [r.W for r in reports]
    total = math.fsum(w)
    return [a * (wi / total) if wi < cutoff else a.zeros_like() for a, wi in zip(aggregates, w)]


def apply_round(models: ClusterModelSet, scaled: Sequence[ParamVector]) -> ClusterModelSet:
    if len(scaled) != len(models):
        raise ValueError("need one update per cluster model")
    return ClusterModelSet(tuple(m + d for m, d in zip(models.models, scaled)), models.backbone, models.round + 1)


def scale_phase(stage2_round: int, T_no: int) -> str:
    """'normalize' for the first ``T_no`` stage-2 rounds, 'normality' afterwards."""
    return "normalize" if stage2_round <= T_no else "normality"


def rescale(aggregates: Sequence[ParamVector], stage2_round: int, T_no: int, stream: RngStream):
    """Phase-dispatched server rescaling; returns (scaled, phase, reports or None)."""
    phase = scale_phase(stage2_round, T_no)
    if phase == "normalize":
        return normalize_updates(aggregates), phase, None
    reports = normality_reports(aggregates, stream)
    return normality_scale(aggregates, reports), phase, reports
