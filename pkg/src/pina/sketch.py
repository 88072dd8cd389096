"""Stage 1: sparse privatized sketches of adapter updates and k-means prototypes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .aggregation import ClusterModelSet
from .model import STAGE1_SEGMENTS, FrozenBackbone
from .numeric import ParamVector, RngStream, clip_array, noise_array

SKETCH_NONZEROS = 4


@dataclass(frozen=True)
class Sketch:
    dim: int
    indices: tuple[int, ...]
    values: tuple[float, ...]
    client_id: int = -1

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate sketch indices")
        if any(not 0 <= i < self.dim for i in self.indices):
            raise ValueError("sketch index out of range")

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[list(self.indices)] = self.values
        return out

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "dim": self.dim,
                "indices": list(self.indices), "values": list(self.values)}


@dataclass(frozen=True)
class PrototypeSet:
    centroids: np.ndarray  # C x dim
    assignment: dict[int, int]
    inertia: float = 0.0

    @property
    def C(self) -> int:
        return len(self.centroids)


def _top2(idx: np.ndarray, mags: np.ndarray) -> np.ndarray:
    # Largest magnitude first, lower index on ties.
    order = np.lexsort((idx, -mags))
    return idx[order[:2]]


def filter_top2(update: ParamVector | np.ndarray, client_id: int = -1) -> Sketch:
    """Keep the two largest positive and two largest negative coordinates."""
    x = update.values if isinstance(update, ParamVector) else np.asarray(update, dtype=np.float64).ravel()
    pos = np.flatnonzero(x > 0)
    neg = np.flatnonzero(x < 0)
    keep = np.sort(np.concatenate([_top2(pos, x[pos]), _top2(neg, -x[neg])]))
    return Sketch(x.size, tuple(int(i) for i in keep), tuple(float(x[i]) for i in keep), client_id)


def stage1_threshold(S: float, n: int, h: int) -> float:
    """Clip bound for an n-sparse sketch over h coordinates: sqrt(n / h) * S."""
    if not 1 <= n <= h:
        raise ValueError(f"need 1 <= n <= h, got n={n}, h={h}")
    return math.sqrt(n / h) * S


def privatize_sketch(sk: Sketch, z: float, S_in: float, stream: RngStream) -> Sketch:
    """Clip the retained values to ``S_in`` and add N(0, (z S_in)^2) to each of them."""
    if not sk.values:
        return sk
    vals = clip_array(np.array(sk.values), S_in) + noise_array(stream, len(sk.values), z * S_in)
    return Sketch(sk.dim, sk.indices, tuple(float(v) for v in vals), sk.client_id)


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, C):
        d = _sq_dists(X, np.array(centers)).min(1)
        total = d.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        centers.append(X[rng.choice(n, p=d / total)])
    return np.array(centers)


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    """Lloyd iterations from ``centers``.

    Returns (centers, labels, objective history); the history holds the
    within-cluster sum of squares after every assignment step and stops at the
    first repeated assignment.
    """
    centers = centers.copy()
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(X, centers)
        new = d.argmin(1)
        history.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(len(centers)):
            members = X[labels == k]
            if len(members):
                centers[k] = members.mean(0)
            else:
                # Re-seed an empty cluster at the point farthest from its centre.
                far = int(d[np.arange(len(X)), labels].argmax())
                centers[k] = X[far]
    return centers, labels, history


def kmeans_cluster(sketches: Sequence[Sketch], C: int, stream: RngStream, n_init: int = 10,
                   max_iter: int = 100) -> PrototypeSet:
    """k-means++ seeded Lloyd on densified sketches; the best of ``n_init`` restarts wins."""
    if len(sketches) < C:
        raise ValueError(f"need at least C={C} sketches, got {len(sketches)}")
    X = np.array([s.dense() for s in sketches])
    best = None
    for r in range(n_init):
        rng = stream.child("kmeans", r).generator()
        centers, labels, history = lloyd(X, kmeans_plusplus(X, C, rng), max_iter)
        inertia = float(_sq_dists(X, centers)[np.arange(len(X)), labels].sum())
        if best is None or inertia < best[2] - 1e-12:
            best = (centers, labels, inertia)
    centers, labels, inertia = best
    assignment = {s.client_id: int(k) for s, k in zip(sketches, labels)}
    return PrototypeSet(centers, assignment, inertia)


def materialize_cluster_models(protos: PrototypeSet, backbone: FrozenBackbone, base: ParamVector,
                               segments: Iterable[str] = STAGE1_SEGMENTS) -> ClusterModelSet:
    """Cluster model i is ``base`` with its stage-1 coordinates shifted by centroid i."""
    idx = base.layout.index(segments)
    if protos.centroids.shape[1] != idx.size:
        raise ValueError(f"centroid dim {protos.centroids.shape[1]} != stage-1 dim {idx.size}")
    models = []
    for c in protos.centroids:
        v = base.values.copy()
        v[idx] += c
        models.append(ParamVector(v, base.layout))
    return ClusterModelSet(tuple(models), backbone)


def dump_sketches(path, sketches: Sequence[Sketch], assignment: dict[int, int] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sketches:
            rec = s.to_json()
            if assignment is not None:
                rec["cluster"] = assignment.get(s.client_id)
            fh.write(json.dumps(rec) + "\n")
