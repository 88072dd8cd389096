"""Gaussian mechanisms and a Renyi-DP accountant for the subsampled Gaussian.

Noise multipliers ``z`` are ratios of noise std to the l2 sensitivity, so
all accountant functions work at unit sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .numeric import ParamVector, RngStream, check_same_layout, clip, noise_array

DEFAULT_ORDERS: tuple[float, ...] = (1.5,) + tuple(float(a) for a in range(2, 257))
Z_UPPER = 1e3


class CalibrationError(ValueError):
    """No noise multiplier below the search bound meets the target budget."""


def default_delta(n_clients: int) -> float:
    return 1.0 / n_clients ** 1.1


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    q: float
    T_in: int
    T_tr: int
    S: float
    S_in: float
    z: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.q <= 1:
            raise ValueError("sampling rate must lie in (0, 1]")
        if self.z <= 0 or self.S <= 0 or self.S_in <= 0:
            raise ValueError("z, S and S_in must be positive")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    eps: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.eps):
            raise ValueError("orders and eps differ in length")
        if any(a <= 1 for a in self.orders):
            raise ValueError("RDP orders must exceed 1")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ValueError("cannot add curves over different orders")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.eps, other.eps)))

    def __len__(self) -> int:
        return len(self.orders)


def gaussian_rdp(z: float, alpha: float) -> float:
    if z <= 0:
        raise ValueError("noise multiplier must be positive")
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    return alpha / (2.0 * z * z)


def _log_a_int(q: float, z: float, alpha: int) -> float:
    # log sum_i C(a,i) (1-q)^(a-i) q^i exp((i^2 - i) / (2 z^2))
    i = np.arange(alpha + 1, dtype=np.float64)
    terms = (gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
             + i * math.log(q) + (alpha - i) * math.log1p(-q)
             + (i * i - i) / (2.0 * z * z))
    m = terms.max()
    return float(m + math.log(np.exp(terms - m).sum()))


def subsampled_gaussian_rdp(z: float, q: float, alpha: float) -> float:
    """RDP of the Poisson-subsampled Gaussian mechanism at order ``alpha``.

    Integer orders use the binomial expansion of Mironov, Talwar and Zhang
    (2019), evaluated in the log domain. A fractional order is bounded by the
    next integer order, since Renyi divergence is non-decreasing in the order.
    """
    if z <= 0:
        raise ValueError("noise multiplier must be positive")
    if not 0 < q <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    if q == 1.0:
        return gaussian_rdp(z, alpha)
    a = int(math.ceil(alpha))
    return max(_log_a_int(q, z, a) / (a - 1), 0.0)


def gaussian_curve(z: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), tuple(gaussian_rdp(z, a) for a in orders))


def subsampled_curve(z: float, q: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), tuple(subsampled_gaussian_rdp(z, q, a) for a in orders))


def compose(curve: RdpCurve, rounds: int) -> RdpCurve:
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    return RdpCurve(curve.orders, tuple(e * rounds for e in curve.eps))


def rdp_to_dp_order(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """(epsilon, best order) for the conversion minimised over the curve."""
    if len(curve) == 0:
        raise ValueError("empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    a = np.asarray(curve.orders, dtype=np.float64)
    e = np.asarray(curve.eps, dtype=np.float64)
    eps = e + np.log((a - 1) / a) - (np.log(a) + math.log(delta)) / (a - 1)
    k = int(np.argmin(eps))
    return max(float(eps[k]), 0.0), float(a[k])


def rdp_to_dp(curve: RdpCurve, delta: float) -> float:
    return rdp_to_dp_order(curve, delta)[0]


def protocol_curve(z: float, q: float, rounds: int, stage1_participations: int = 0,
                   orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Composed curve: full-rate releases for stage-1 sketches plus subsampled rounds."""
    curve = compose(subsampled_curve(z, q, orders), rounds)
    if stage1_participations:
        curve = curve + compose(gaussian_curve(z, orders), stage1_participations)
    return curve


def epsilon_for(z: float, delta: float, q: float, rounds: int, stage1_participations: int = 0) -> float:
    return rdp_to_dp(protocol_curve(z, q, rounds, stage1_participations), delta)


def calibrate_z(epsilon: float, delta: float, q: float, total_rounds: int,
                stage1_participations: int = 0, rel_tol: float = 1e-3) -> float:
    """Smallest noise multiplier whose spent budget does not exceed ``epsilon``.

    Bisection on ``log z``. The bracket is shrunk to ``rel_tol / 1000`` so the
    returned ``z`` spends within a hair of the target, well inside ``rel_tol``.
    """
    if epsilon <= 0:
        raise ValueError("target epsilon must be positive")
    if total_rounds < 0 or stage1_participations < 0 or total_rounds + stage1_participations == 0:
        raise ValueError("need at least one release to calibrate against")

    def spent(z):
        return epsilon_for(z, delta, q, total_rounds, stage1_participations)

    hi = 1.0
    while spent(hi) > epsilon:
        hi *= 2.0
        if hi > Z_UPPER:
            raise CalibrationError(
                f"no noise multiplier below {Z_UPPER:g} reaches epsilon={epsilon:g} at delta={delta:g}")
    lo = hi / 2.0
    while spent(lo) <= epsilon:
        hi, lo = lo, lo / 2.0
        if lo < 1e-6:
            return hi
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if spent(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
        if hi / lo - 1 < rel_tol * 1e-3:
            break
    return hi


def spent_budget(spec: PrivacySpec, participations_stage1: int, rounds_stage2: int) -> float:
    if participations_stage1 < 0 or rounds_stage2 < 0:
        raise ValueError("counts must be non-negative")
    if participations_stage1 == 0 and rounds_stage2 == 0:
        return 0.0  # nothing released; skip the conversion's order-dependent floor
    curve = protocol_curve(spec.z, spec.q, rounds_stage2, participations_stage1)
    return rdp_to_dp(curve, spec.delta)


def local_dp(delta_k: ParamVector, z: float, S: float, stream: RngStream) -> ParamVector:
    """Clip to ``S`` and add N(0, (zS)^2) to every coordinate."""
    if z < 0:
        raise ValueError("noise multiplier must be non-negative")
    clipped = clip(delta_k, S)
    return ParamVector(clipped.values + noise_array(stream, len(clipped), z * S), delta_k.layout)


def noise_share(clipped: np.ndarray, z: float, S: float, n_parties: int, stream: RngStream) -> np.ndarray:
    """One client's distributed-DP contribution: its clipped vector plus N(0, (zS)^2 / n)."""
    return clipped + noise_array(stream, clipped.size, z * S / math.sqrt(n_parties))


class SecureSum:
    """Black-box secure-sum channel.

    Clients push already-noised shares; the only thing ever readable is the
    total, once, via :meth:`reveal`.
    """

    __slots__ = ("_total", "_count", "_revealed")

    def __init__(self, dim: int):
        self._total = np.zeros(dim)
        self._count = 0
        self._revealed = False

    def submit(self, share: np.ndarray) -> None:
        if self._revealed:
            raise RuntimeError("secure sum already revealed")
        self._total = self._total + share
        self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def reveal(self) -> np.ndarray:
        if self._count == 0:
            raise ValueError("no client contributions")
        self._revealed = True
        out = self._total.copy()
        out.flags.writeable = False
        return out


def secure_sum_dp(deltas: Sequence[ParamVector], z: float, S: float,
                  streams: Sequence[RngStream]) -> ParamVector:
    """Sum of clipped deltas plus total noise N(0, (zS)^2), split across clients."""
    if not deltas:
        raise ValueError("no client deltas")
    if len(streams) != len(deltas):
        raise ValueError("need one noise stream per client")
    for d in deltas[1:]:
        check_same_layout(deltas[0], d)
    channel = SecureSum(len(deltas[0]))
    for d, s in zip(deltas, streams):
        channel.submit(noise_share(clip(d, S).values, z, S, len(deltas), s))
    return ParamVector(channel.reveal(), deltas[0].layout)
