"""Closed-form availability and hourly cost models, plus oracles.

Availability: a pool of N instances suffers r simultaneous reclamations per
maintenance interval, r drawn from a pmf p_d. An object striped over n
distinct instances dies when at least m of them are hit in one interval; the
per-interval loss probability and its per-hour compounding are computed
exactly from hypergeometric terms, with a simulation-based Monte-Carlo
estimator as an independent check.

Cost: per-invocation fee plus GB-seconds at 100 ms billing granularity,
split into serving / keep-warm / backup components, and a crossover search
against a fixed hourly price.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace

import numpy as np

EXACT_COMB_LIMIT = 2000  # exact big-int binomials up to this pool size


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def ceil_100(ms: float) -> int:
    """Round a duration up to the next 100 ms billing quantum."""
    if ms <= 0:
        return 0
    return 100 * math.ceil(ms / 100.0)


# --------------------------------------------------------------------------
# reclamation pmfs
# --------------------------------------------------------------------------


def pmf_zipf(s: float, n_max: int, n_lambda: int) -> list[float]:
    """Zipf(s) over r in [1, n_max], zero elsewhere, support capped at the
    pool size. A draw of 0 has no Zipf mass; the caller mixes in idle
    intervals via the table form if needed."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    n_max = min(n_max, n_lambda)
    w = [0.0] * (n_lambda + 1)
    for r in range(1, n_max + 1):
        w[r] = r ** -s
    z = sum(w)
    return [x / z for x in w]


def pmf_poisson(lam: float, n_lambda: int) -> list[float]:
    """Poisson(lam) truncated to [0, n_lambda] and renormalized."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    w = [math.exp(-lam + r * math.log(lam) - math.lgamma(r + 1)) if lam > 0 else (1.0 if r == 0 else 0.0)
         for r in range(n_lambda + 1)]
    z = sum(w)
    return [x / z for x in w]


def pmf_table(probs, n_lambda: int) -> list[float]:
    """Explicit pmf, index = r. Accepts any non-negative weight vector of
    length <= n_lambda+1; renormalizes."""
    w = list(probs) + [0.0] * (n_lambda + 1 - len(probs))
    if len(w) != n_lambda + 1:
        raise ValueError("pmf longer than pool size + 1")
    if any(x < 0 for x in w):
        raise ValueError("negative pmf entry")
    z = sum(w)
    if z <= 0:
        raise ValueError("pmf sums to zero")
    return [x / z for x in w]


class DiscreteSampler:
    """Inverse-CDF sampler over a pmf table; deterministic given the caller's
    random.Random stream."""

    def __init__(self, pmf):
        self._cdf = []
        acc = 0.0
        for p in pmf:
            acc += p
            self._cdf.append(acc)
        self._cdf[-1] = 1.0

    def sample(self, rng) -> int:
        return bisect.bisect_left(self._cdf, rng.random())


# --------------------------------------------------------------------------
# availability model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AvailabilityQuery:
    n_lambda: int
    n: int          # chunks per object (d+p)
    m: int          # minimum chunk losses that destroy the object (p+1)
    p_d: tuple      # pmf over r in [0, n_lambda]

    def __post_init__(self):
        if not (1 <= self.m <= self.n <= self.n_lambda):
            raise ValueError("need 1 <= m <= n <= n_lambda")
        if len(self.p_d) != self.n_lambda + 1:
            raise ValueError("p_d must have n_lambda+1 entries")
        if abs(sum(self.p_d) - 1.0) > 1e-9:
            raise ValueError("p_d must sum to 1")

    @classmethod
    def zipf(cls, n_lambda, n, m, s, n_max=None):
        return cls(n_lambda, n, m, tuple(pmf_zipf(s, n_max or n_lambda, n_lambda)))

    @classmethod
    def poisson(cls, n_lambda, n, m, lam):
        return cls(n_lambda, n, m, tuple(pmf_poisson(lam, n_lambda)))

    @classmethod
    def table(cls, n_lambda, n, m, probs):
        return cls(n_lambda, n, m, tuple(pmf_table(probs, n_lambda)))


def p_i(q: AvailabilityQuery, r: int, i: int) -> float:
    """Probability that exactly i of the object's n instances fall in a
    uniformly random r-subset of the pool: C(r,i) C(N-r,n-i) / C(N,n)."""
    n_l, n = q.n_lambda, q.n
    if not (0 <= i <= n and 0 <= r <= n_l):
        raise ValueError("i or r out of range")
    if i > r or n - i > n_l - r:
        return 0.0
    if n_l <= EXACT_COMB_LIMIT:
        return math.comb(r, i) * math.comb(n_l - r, n - i) / math.comb(n_l, n)
    return math.exp(
        _log_comb(r, i) + _log_comb(n_l - r, n - i) - _log_comb(n_l, n)
    )


def _tail(q: AvailabilityQuery, r: int) -> float:
    """P(object lost | r reclaimed) = sum_{i=m..n} p_i."""
    return sum(p_i(q, r, i) for i in range(q.m, q.n + 1))


def loss_exact(q: AvailabilityQuery) -> float:
    """Per-interval object loss probability, full hypergeometric tail."""
    return sum(
        _tail(q, r) * q.p_d[r]
        for r in range(q.m, q.n_lambda + 1)
        if q.p_d[r] > 0.0
    )


def loss_approx(q: AvailabilityQuery) -> float:
    """First-term approximation: only the i = m term is kept."""
    return sum(
        p_i(q, r, q.m) * q.p_d[r]
        for r in range(q.m, q.n_lambda + 1)
        if q.p_d[r] > 0.0
    )


def availability_hour(p_l_per_interval: float, intervals_per_hour: int = 60) -> float:
    """Probability an object survives an hour of independent intervals."""
    return (1.0 - p_l_per_interval) ** intervals_per_hour


def monte_carlo_loss(q: AvailabilityQuery, trials: int, seed: int):
    """Simulation oracle for loss_exact.

    Per trial: draw r ~ p_d, pick r distinct reclaimed instances uniformly,
    count how many of the object's n fixed instances were hit; lost iff
    >= m. Samples real subsets (argpartition of uniform keys), so it shares
    no math with p_i. Returns (mean, stderr).
    """
    rng = np.random.default_rng(seed)
    n_l, n, m = q.n_lambda, q.n, q.m
    draws = rng.choice(n_l + 1, size=trials, p=np.asarray(q.p_d))
    lost = 0
    # by symmetry the object's instances are taken as {0..n-1}
    counts = np.bincount(draws, minlength=n_l + 1)
    chunk_rows = max(1, 4_000_000 // max(n_l, 1))
    for r in range(m, n_l + 1):
        k = int(counts[r])
        if k == 0:
            continue
        done = 0
        while done < k:
            rows = min(chunk_rows, k - done)
            keys = rng.random((rows, n_l))
            hit = np.argpartition(keys, r - 1, axis=1)[:, :r] < n
            lost += int((hit.sum(axis=1) >= m).sum())
            done += rows
    mean = lost / trials
    stderr = math.sqrt(max(mean * (1.0 - mean), 1e-300) / trials)
    return mean, stderr


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------

# public pricing defaults: $0.02 per million invocations, $0.0000166667/GB-s
C_REQ_DEFAULT = 2e-8
C_DUR_DEFAULT = 1.6667e-5


@dataclass(frozen=True)
class CostModelInputs:
    n_lambda: int
    memory_gb: float
    c_req: float = C_REQ_DEFAULT
    c_dur: float = C_DUR_DEFAULT
    f_w: float = 60.0       # warm-ups per node per hour (60 / T_warm minutes)
    f_bak: float = 12.0     # backups per node per hour (60 / T_bak minutes)
    n_ser: float = 0.0      # chunk invocations per hour
    t_ser_ms: float = 100.0
    t_w_ms: float = 100.0   # informational; the warm-up term bills one cycle
    t_bak_s: float = 2.0    # seconds per backup invocation

    def __post_init__(self):
        for name in ("n_lambda", "memory_gb", "c_req", "c_dur", "f_w",
                     "f_bak", "n_ser", "t_ser_ms", "t_w_ms", "t_bak_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class CostBreakdown:
    c_ser: float
    c_w: float
    c_bak: float

    @property
    def total(self) -> float:
        return self.c_ser + self.c_w + self.c_bak


def cost_hour(inp: CostModelInputs) -> CostBreakdown:
    n_l, m_gb = inp.n_lambda, inp.memory_gb
    c_ser = (
        inp.n_ser * inp.c_req
        + inp.n_ser * ceil_100(inp.t_ser_ms) / 1000.0 * m_gb * inp.c_dur
    )
    # a warm-up runs under one billing cycle: 0.1 s billed
    c_w = n_l * inp.f_w * inp.c_req + n_l * inp.f_w * 0.1 * m_gb * inp.c_dur
    c_bak = (
        n_l * inp.f_bak * inp.c_req
        + n_l * inp.f_bak * inp.t_bak_s * m_gb * inp.c_dur
    )
    return CostBreakdown(c_ser, c_w, c_bak)


def crossover_rate(inp: CostModelInputs, chunks_per_object: int,
                   fixed_hourly: float) -> int:
    """Smallest object-request rate per hour at which the pay-per-use cost
    reaches a fixed hourly price. Each object request costs n chunk
    invocations. Monotone bisection over integer rates."""
    if chunks_per_object < 1:
        raise ValueError("chunks_per_object must be >= 1")

    def cost(rate: int) -> float:
        return cost_hour(replace(inp, n_ser=rate * chunks_per_object)).total

    if cost(0) >= fixed_hourly:
        return 0
    per_req = cost(1) - cost(0)
    if per_req <= 0.0:
        raise ValueError("per-request cost is zero; no crossover exists")
    hi = 1
    while cost(hi) < fixed_hourly:
        hi *= 2
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if cost(mid) >= fixed_hourly:
            hi = mid
        else:
            lo = mid
    return hi
