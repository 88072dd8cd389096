"""End-to-end federated simulation: populations, stage 1, stage 2 and baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from . import aggregation as agg
from .config import ExperimentConfig
from .model import (STAGE1_SEGMENTS, ClientDataset, FrozenBackbone, TrainConfig, cross_entropy,
                    init_params, local_train, logits)
from .numeric import ParamVector, RngStream, clip, noise_array
from .privacy import PrivacySpec, calibrate_z, spent_budget
from .sketch import (SKETCH_NONZEROS, PrototypeSet, Sketch, filter_top2, kmeans_cluster,
                     materialize_cluster_models, privatize_sketch, stage1_threshold)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Population


@dataclass
class Population:
    clients: list[ClientDataset]
    d: int
    L: int
    C_true: int

    @property
    def truth(self) -> np.ndarray:
        return np.array([c.cluster for c in self.clients])

    def __len__(self) -> int:
        return len(self.clients)


def rotation_matrix(d: int, degrees: float, rotated: int | None = None) -> np.ndarray:
    """The same planar rotation applied to coordinate pairs (0,1), (2,3), ... within the first
    ``rotated`` coordinates (default all); the remaining axes are left unchanged."""
    R = np.eye(d)
    rotated = d if rotated is None else rotated
    if not 0 <= rotated <= d:
        raise ValueError(f"rotated must lie in [0, {d}]")
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # Snap to exact values at multiples of 90 degrees.
    c, s = round(c, 15) + 0.0, round(s, 15) + 0.0
    for p in range(0, rotated - 1, 2):
        R[p:p + 2, p:p + 2] = [[c, -s], [s, c]]
    return R


def class_means(d: int, L: int, stream: RngStream, class_sep: float = 3.0) -> np.ndarray:
    means = stream.child("means").generator().standard_normal((L, d))
    return means * (class_sep / np.linalg.norm(means, axis=1, keepdims=True))


def public_dataset(d: int, L: int, n: int, stream: RngStream, class_sep: float = 3.0,
                   noise_std: float = 1.0) -> ClientDataset:
    """Pooled unrotated draws from the population's base mixture (``stream`` is the population stream)."""
    means = class_means(d, L, stream, class_sep)
    rng = stream.child("public").generator()
    y = rng.integers(L, size=n)
    return ClientDataset(means[y] + noise_std * rng.standard_normal((n, d)), y, L)


def generate_population(d: int, L: int, C_true: int, clients_per_cluster: int, samples_per_client: int,
                        stream: RngStream, test_samples: int = 50, class_sep: float = 3.0,
                        noise_std: float = 1.0, invariant_dims: int = 0) -> Population:
    """Gaussian class mixture shared by all clients; cluster c rotates every feature by 360 c / C_true degrees."""
    if min(d, L, C_true, clients_per_cluster, samples_per_client) < 1:
        raise ValueError("all population counts must be at least 1")
    if not 0 <= invariant_dims < d:
        raise ValueError("invariant_dims must lie in [0, d)")
    means = class_means(d, L, stream, class_sep)
    clients = []
    for c in range(C_true):
        R = rotation_matrix(d, 360.0 * c / C_true, d - invariant_dims)
        for j in range(clients_per_cluster):
            k = len(clients)
            rng = stream.child("client", k).generator()

            def draw(n):
                y = rng.integers(L, size=n)
                return (means[y] + noise_std * rng.standard_normal((n, d))) @ R.T, y

            X, y = draw(samples_per_client)
            Xt, yt = draw(test_samples) if test_samples else (None, None)
            clients.append(ClientDataset(X, y, L, cluster=c, X_test=Xt, y_test=yt))
    return Population(clients, d, L, C_true)


def sample_round(n_clients: int, q: float, stream: RngStream, eligible: np.ndarray | None = None,
                 allow_empty: bool = False) -> np.ndarray:
    """Poisson sampling: each eligible client joins independently with probability ``q``.

    An empty draw is redrawn from a fresh sub-stream unless ``allow_empty``.
    """
    if not 0 < q <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    pool = np.arange(n_clients) if eligible is None else np.asarray(eligible)
    if pool.size == 0:
        return pool
    attempt = 0
    while True:
        s = stream if attempt == 0 else stream.child("resample", attempt)
        chosen = pool[s.generator().random(pool.size) < q]
        if chosen.size or allow_empty:
            return np.sort(chosen)
        attempt += 1
        log.info("empty client draw in %s, resampling (attempt %d)", stream, attempt)


# ---------------------------------------------------------------------------
# Metrics


def best_match_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of agreements under the best one-to-one relabelling of ``pred``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    P, T = pred.max() + 1, truth.max() + 1
    conf = np.zeros((T, P), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    r, c = linear_sum_assignment(conf, maximize=True)
    return float(conf[r, c].sum() / len(truth))


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_comb = comb(table, 2).sum()
    sa, sb = comb(table.sum(1), 2).sum(), comb(table.sum(0), 2).sum()
    expected = sa * sb / comb(len(a), 2)
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return float((sum_comb - expected) / (maximum - expected))


@dataclass
class RoundMetrics:
    round: int  # stage-2 round; 0 is the initial state
    t: int  # global round including stage 1
    algorithm: str
    seed: int
    n_sampled: int
    phase: str
    clustering_accuracy: float
    mean_test_accuracy: float
    cluster_test_accuracy: list
    norms_pre: list
    norms_post: list
    shapiro_w: list | None
    epsilon: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stage1Result:
    protos: PrototypeSet
    models: agg.ClusterModelSet
    sketches: list[Sketch]
    sketch_ari: float
    sketch_accuracy: float
    clustering_accuracy: float
    test_accuracy: float

    def summary(self) -> dict:
        return {"n_sketches": len(self.sketches), "sketch_ari": self.sketch_ari,
                "sketch_accuracy": self.sketch_accuracy,
                "clustering_accuracy": self.clustering_accuracy,
                "mean_test_accuracy": self.test_accuracy}


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    stage1: Stage1Result | None
    z: float
    models: agg.ClusterModelSet
    initial: RoundMetrics | None = None

    @property
    def series(self) -> list[RoundMetrics]:
        """Round-0 record (when present) followed by the per-round metrics."""
        return ([self.initial] if self.initial is not None else []) + list(self.metrics)


# ---------------------------------------------------------------------------
# Simulator


def resolve_z(cfg: ExperimentConfig) -> float:
    """Noise multiplier: explicit ``privacy.z``, else calibrated from ``privacy.epsilon``, else 0."""
    p = cfg.privacy
    if p.z is not None:
        return float(p.z)
    if p.epsilon is None or math.isinf(p.epsilon):
        return 0.0
    stage1 = 1 if cfg.algorithm == "pina" else 0
    return calibrate_z(p.epsilon, cfg.delta, p.q, cfg.T_tr, stage1_participations=stage1)


class Simulator:
    """Runs one configured algorithm on one seeded population.

    Every random draw comes from an :class:`RngStream` keyed by
    (seed, purpose, entity, round), so results do not depend on ``workers``.
    """

    def __init__(self, cfg: ExperimentConfig, workers: int = 1, population: Population | None = None):
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.root = RngStream(cfg.seed)
        pc, mc = cfg.population, cfg.model
        self.population = population or generate_population(
            pc.d, pc.L, pc.C_true, pc.clients_per_cluster, pc.samples_per_client,
            RngStream(cfg.seed, "population"), pc.test_samples, pc.class_sep, pc.noise_std,
            pc.invariant_dims)
        self.backbone = FrozenBackbone.sample(self.population.d, mc.h, RngStream(cfg.seed, "backbone"),
                                             bias_scale=mc.bias_scale, activation=mc.activation)
        self.base = init_params(self.backbone, self.population.L, mc.rank, RngStream(cfg.seed, "init"),
                                head_scale=mc.head_scale)
        if mc.warmup_epochs:
            self.base = self._warm_up(self.base)
        self.z = resolve_z(cfg)
        self.stage1_idx = self.base.layout.index(STAGE1_SEGMENTS)
        self.trainable = tuple(s.name for s in self.base.layout)
        self._Xall = np.concatenate([c.X for c in self.population.clients])
        self._owner = np.repeat(np.arange(len(self.population)), [len(c) for c in self.population.clients])
        self._yall = np.concatenate([c.y for c in self.population.clients])

    # -- helpers ----------------------------------------------------------

    def _warm_up(self, params: ParamVector) -> ParamVector:
        """Fit the head on pooled public data before federation; the adapter is left at its init."""
        pc, mc = self.cfg.population, self.cfg.model
        public = public_dataset(pc.d, pc.L, mc.warmup_samples, RngStream(self.cfg.seed, "population"),
                                pc.class_sep, pc.noise_std)
        tc = TrainConfig(mc.warmup_epochs, self.cfg.train.batch_size, mc.warmup_lr)
        return local_train(self.backbone, params, ("head.weight", "head.bias"), public, tc,
                           RngStream(self.cfg.seed, "warmup"))

    def _map(self, fn: Callable, items):
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def stream(self, kind: str, index: int = 0, round: int = 0) -> RngStream:
        return RngStream(self.cfg.seed, kind, index, round)

    def privacy_spec(self) -> PrivacySpec | None:
        if self.z <= 0:
            return None
        p = self.cfg.privacy
        return PrivacySpec(epsilon=p.epsilon if p.epsilon is not None else math.inf, delta=self.cfg.delta,
                           q=p.q, T_in=self.cfg.T_in, T_tr=self.cfg.T_tr, S=p.S,
                           S_in=self.s_in, z=self.z)

    @property
    def s_in(self) -> float:
        return stage1_threshold(self.cfg.privacy.S, SKETCH_NONZEROS, self.stage1_idx.size)

    def identify_all(self, models: agg.ClusterModelSet) -> np.ndarray:
        """Loss-based cluster choice of every client (evaluation only)."""
        n = len(self.population)
        losses = np.empty((n, len(models)))
        counts = np.bincount(self._owner, minlength=n)
        for i, m in enumerate(models.models):
            per_sample = cross_entropy(logits(self.backbone, m, self._Xall), self._yall)
            losses[:, i] = np.bincount(self._owner, weights=per_sample, minlength=n) / counts
        return losses.argmin(1)

    def evaluate(self, models: agg.ClusterModelSet):
        choice = self.identify_all(models)
        acc = best_match_accuracy(choice, self.population.truth)
        per_client = np.full(len(self.population), np.nan)
        for i, m in enumerate(models.models):
            members = np.flatnonzero(choice == i)
            for k in members:
                c = self.population.clients[k]
                if c.X_test is not None:
                    per_client[k] = np.mean(np.argmax(logits(self.backbone, m, c.X_test), 1) == c.y_test)
        cluster_acc = [None if not np.any(choice == i) or np.all(np.isnan(per_client[choice == i]))
                       else float(np.nanmean(per_client[choice == i])) for i in range(len(models))]
        mean_acc = float(np.nanmean(per_client)) if not np.all(np.isnan(per_client)) else None
        return acc, mean_acc, cluster_acc, choice

    def epsilon_after(self, stage1_participations: int, rounds: int) -> float | None:
        spec = self.privacy_spec()
        if spec is None:
            return None
        return spent_budget(spec, stage1_participations, rounds)

    # -- stage 1 ----------------------------------------------------------

    def _sketch_client(self, k: int, t: int) -> Sketch:
        data = self.population.clients[k]
        after = local_train(self.backbone, self.base, STAGE1_SEGMENTS, data, self.cfg.train,
                            self.stream("train1", k, t))
        update = after.values[self.stage1_idx] - self.base.values[self.stage1_idx]
        return privatize_sketch(filter_top2(update, client_id=k), self.z, self.s_in,
                                self.stream("sketch_noise", k, t))

    def run_stage1(self) -> Stage1Result:
        cfg = self.cfg
        if cfg.T_in < 1:
            raise ValueError("stage 1 needs T_in >= 1")
        n = len(self.population)
        done = np.zeros(n, dtype=bool)
        sketches: list[Sketch] = []
        for t in range(1, cfg.T_in + 1):
            chosen = sample_round(n, cfg.privacy.q, self.stream("sample1", 0, t), np.flatnonzero(~done),
                                  allow_empty=True)
            done[chosen] = True
            sketches += self._map(lambda k: self._sketch_client(int(k), t), chosen)
        if len(sketches) < cfg.C:
            raise ValueError(f"stage 1 produced {len(sketches)} sketches, fewer than C={cfg.C}")
        protos = kmeans_cluster(sketches, cfg.C, self.stream("kmeans"), n_init=cfg.kmeans_restarts)
        models = materialize_cluster_models(protos, self.backbone, self.base)
        ids = [s.client_id for s in sketches]
        labels = [protos.assignment[k] for k in ids]
        truth = self.population.truth[ids]
        acc, test_acc, _, _ = self.evaluate(models)
        return Stage1Result(protos, models, sketches, adjusted_rand_index(labels, truth),
                            best_match_accuracy(np.array(labels), truth), acc, test_acc)

    # -- initial models for the baselines ---------------------------------

    def random_init_models(self, C: int) -> agg.ClusterModelSet:
        scale = self.cfg.random_init_scale
        if scale is None:
            scale = self.cfg.privacy.S / math.sqrt(self.stage1_idx.size)
        models = []
        for i in range(C):
            v = self.base.values.copy()
            v[self.stage1_idx] += noise_array(self.stream("random_init", i), self.stage1_idx.size, scale)
            models.append(ParamVector(v, self.base.layout))
        return agg.ClusterModelSet(tuple(models), self.backbone)

    def single_model(self) -> agg.ClusterModelSet:
        return agg.ClusterModelSet((self.base,), self.backbone)

    # -- stage 2 ----------------------------------------------------------

    def _noise_factor(self, n_sampled: int) -> float:
        v = self.cfg.privacy.virtual_cohort
        return 1.0 if not v else n_sampled / v

    def _train_client(self, models: agg.ClusterModelSet, k: int, s: int):
        data = self.population.clients[k]
        i = agg.identify_cluster(self.backbone, models, data)
        start = models.models[i]
        after = local_train(self.backbone, start, self.trainable, data, self.cfg.train, self.stream("train2", k, s))
        return i, after - start

    def _secure_round(self, models: agg.ClusterModelSet, chosen: np.ndarray, s: int) -> list[ParamVector]:
        """Clients train and submit noised stacked shares; the server sees only the revealed sum."""
        C, S, K = len(models), self.cfg.privacy.S, len(chosen)
        factor = self._noise_factor(K)

        def client(k):
            i, delta = self._train_client(models, int(k), s)
            update = agg.build_stacked_update(i, delta, C)
            return agg.client_share(update, self.z, S, K, self.stream("noise2", int(k), s), factor)

        channel = agg.SecureSum(C * models.layout.size)
        for share in self._map(client, chosen):
            channel.submit(share)
        return agg.aggregate_from_sum(channel, models.layout, C)

    def _ldp_round(self, models: agg.ClusterModelSet, chosen: np.ndarray, s: int) -> list[ParamVector]:
        """IFCA with local DP: each client reveals its cluster id and a noised clipped delta."""
        S = self.cfg.privacy.S

        def client(k):
            i, delta = self._train_client(models, int(k), s)
            noisy = clip(delta, S).values + noise_array(self.stream("noise2", int(k), s), len(delta), self.z * S)
            return i, noisy

        sums = [np.zeros(models.layout.size) for _ in range(len(models))]
        counts = [0] * len(models)
        for i, noisy in self._map(client, chosen):
            sums[i] = sums[i] + noisy
            counts[i] += 1
        return [ParamVector(sums[i] / counts[i] if counts[i] else sums[i], models.layout)
                for i in range(len(models))]

    def run_stage2(self, models: agg.ClusterModelSet, mode: str = "pina", stage1_participations: int = 0,
                   t_offset: int = 0) -> tuple[list[RoundMetrics], agg.ClusterModelSet]:
        """Stage-2 rounds. ``mode`` is 'pina' (secure sum + rescaling), 'fedavg' (secure sum only)
        or 'ifca-ldp' (per-client local DP, per-cluster averaging)."""
        cfg = self.cfg
        n = len(self.population)
        metrics = []
        for s in range(1, cfg.T_tr + 1):
            chosen = sample_round(n, cfg.privacy.q, self.stream("sample2", 0, s))
            if mode == "ifca-ldp":
                aggregates = self._ldp_round(models, chosen, s)
            else:
                aggregates = self._secure_round(models, chosen, s)
            norms_pre = [float(np.linalg.norm(a.values)) for a in aggregates]
            reports = None
            phase = "none"
            if mode == "pina":
                aggregates, phase, reports = agg.rescale(aggregates, s, cfg.T_no, self.stream("shapiro", 0, s))
            models = agg.apply_round(models, aggregates)
            acc, test_acc, cluster_acc, _ = self.evaluate(models)
            metrics.append(RoundMetrics(
                round=s, t=t_offset + s, algorithm=cfg.algorithm, seed=cfg.seed, n_sampled=int(len(chosen)),
                phase=phase, clustering_accuracy=acc, mean_test_accuracy=test_acc,
                cluster_test_accuracy=cluster_acc, norms_pre=norms_pre,
                norms_post=[float(np.linalg.norm(a.values)) for a in aggregates],
                shapiro_w=None if reports is None else [r.W for r in reports],
                epsilon=self.epsilon_after(stage1_participations, s)))
        return metrics, models

    def initial_metrics(self, models: agg.ClusterModelSet, stage1_participations: int = 0,
                        t_offset: int = 0) -> RoundMetrics:
        """Round-0 record: the starting models, before any stage-2 update."""
        acc, test_acc, cluster_acc, _ = self.evaluate(models)
        return RoundMetrics(
            round=0, t=t_offset, algorithm=self.cfg.algorithm, seed=self.cfg.seed, n_sampled=0, phase="init",
            clustering_accuracy=acc, mean_test_accuracy=test_acc, cluster_test_accuracy=cluster_acc,
            norms_pre=[], norms_post=[], shapiro_w=None,
            epsilon=self.epsilon_after(stage1_participations, 0) if stage1_participations else None)

    # -- drivers ----------------------------------------------------------

    def run_baseline(self) -> RunResult:
        algo = self.cfg.algorithm
        if algo == "fedavg":
            start, mode = self.single_model(), "fedavg"
        elif algo == "ifca-ldp":
            start, mode = self.random_init_models(self.cfg.C), "ifca-ldp"
        elif algo == "pina-random-init":
            start, mode = self.random_init_models(self.cfg.C), "pina"
        else:
            raise ValueError(f"unknown baseline {algo!r}")
        initial = self.initial_metrics(start)
        metrics, models = self.run_stage2(start, mode=mode)
        return RunResult(metrics, None, self.z, models, initial)

    def run(self) -> RunResult:
        if self.cfg.algorithm != "pina":
            return self.run_baseline()
        stage1 = self.run_stage1()
        initial = self.initial_metrics(stage1.models, 1, self.cfg.T_in)
        metrics, models = self.run_stage2(stage1.models, mode="pina", stage1_participations=1,
                                          t_offset=self.cfg.T_in)
        return RunResult(metrics, stage1, self.z, models, initial)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunResult:
    return Simulator(cfg, workers=workers).run()


def rounds_to_reach(metrics: Sequence[RoundMetrics], threshold: float) -> int | None:
    """First recorded round whose clustering accuracy is at least ``threshold``; None if never."""
    for m in metrics:
        if m.clustering_accuracy >= threshold:
            return m.round
    return None
