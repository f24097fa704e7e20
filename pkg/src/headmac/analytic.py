"""Markov-chain model of the realtime subsystem.

A realtime sender is in one of five states per realtime beacon:

1. call on, not in the demand table (contends for a slot)
2. call on, in the table
3. call just went off, in the table, still holding a packet
4. call off, in the table, nothing to send
5. call off, not in the table

The system state counts senders in states 1-4; state 5 is the remainder.
Transitions per beacon (x1..x8):

    x1: 3 -> 5  scheduled, sends its last packet and leaves the table
    x2: 3 -> 4  not scheduled, its packet expires
    x3: 4 -> 5  scheduled, reports the call is off and leaves the table
    x4: 1 -> 2  successful request in the contention period
    x5: 2 -> 3  call on -> off while in the table
    x6: 4 -> 2  call off -> on while in the table
    x7: 1 -> 5  contender's call on -> off
    x8: 5 -> 1  call off -> on

All durations here are in mini-slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .contention import contention_pmf_exact, contention_pmf_formula
from .core import (
    InfeasibleParameters,
    ProtocolParams,
    aggregate_tx_time_tv,
    request_tx_time_tq,
    us_to_minislots,
)

FLUSH = 1e-300
DIRECT_SOLVE_LIMIT = 5000


class NumericalError(RuntimeError):
    pass


class CapacityExceeded(RuntimeError):
    """No realtime frame shorter than the beacon meets the loss target."""


class InfeasibleQoS(ValueError):
    pass


class SystemState(NamedTuple):
    n1: int
    n2: int
    n3: int
    n4: int

    def n5(self, N: int) -> int:
        return N - (self.n1 + self.n2 + self.n3 + self.n4)

    def check(self, N: int):
        if min(self) < 0 or sum(self) > N:
            raise InfeasibleParameters(f"state {tuple(self)} infeasible for N={N}")
        return self


class TransitionCount(NamedTuple):
    x1: int
    x2: int
    x3: int
    x4: int
    x5: int
    x6: int
    x7: int
    x8: int


def balance_holds(x: TransitionCount, s: SystemState, s2: SystemState) -> bool:
    """Flow-balance constraints linking two consecutive states."""
    return (x.x8 - x.x7 - x.x4 == s2.n1 - s.n1
            and x.x4 - x.x5 + x.x6 == s2.n2 - s.n2
            and x.x5 == s2.n3
            and x.x1 + x.x2 == s.n3
            and x.x2 - x.x3 - x.x6 == s2.n4 - s.n4)


def apply_transitions(s: SystemState, x: TransitionCount) -> SystemState:
    return SystemState(
        s.n1 - x.x4 - x.x7 + x.x8,
        s.n2 + x.x4 - x.x5 + x.x6,
        x.x5,
        s.n4 + x.x2 - x.x3 - x.x6,
    )


def enumerate_states(N: int) -> list:
    """Feasible states in lexicographic order of (n1, n2, n3, n4)."""
    out = []
    for n1 in range(N + 1):
        for n2 in range(N + 1 - n1):
            for n3 in range(N + 1 - n1 - n2):
                for n4 in range(N + 1 - n1 - n2 - n3):
                    out.append(SystemState(n1, n2, n3, n4))
    return out


# ---------------------------------------------------------------------------
# per-beacon quantities


def max_scheduled_M(T_rf: int, t_v: int) -> int:
    if t_v <= 0:
        raise InfeasibleParameters("t_v must be positive")
    return T_rf // t_v


def scheduled_count_m(s, M: int) -> int:
    return min(s[1] + s[2] + s[3], M)


def period_durations(s, T_rf: int, t_v: int, M: int | None = None):
    """(contention-free, contention) durations for state ``s``."""
    if M is None:
        M = max_scheduled_M(T_rf, t_v)
    T_cf = scheduled_count_m(s, M) * t_v
    T_cp = T_rf - T_cf
    if T_cp < 0:
        raise InfeasibleParameters(f"T_rf={T_rf} cannot hold {T_cf // t_v} slots of {t_v}")
    return T_cf, T_cp


def switch_probs(T_rb, t_on, t_off):
    """Per-beacon probabilities (off->on, on->off); same time unit for all three."""
    if t_on <= 0 or t_off <= 0:
        raise InfeasibleParameters("mean on/off durations must be positive")
    p = -math.expm1(-T_rb / t_off)
    q = -math.expm1(-T_rb / t_on)
    return p, q


def binom_pmf(k: int, n: int, p: float) -> float:
    if n < 0:
        raise InfeasibleParameters(f"negative population {n}")
    if k < 0 or k > n:
        return 0.0
    return math.comb(n, k) * p ** k * (1 - p) ** (n - k)


def binom_vec(n: int, p: float) -> np.ndarray:
    if n < 0:
        raise InfeasibleParameters(f"negative population {n}")
    k = np.arange(n + 1)
    coef = np.array([math.comb(n, i) for i in k], dtype=float)
    with np.errstate(under="ignore"):
        v = coef * p ** k * (1 - p) ** (n - k)
    v[v < FLUSH] = 0.0
    return v


def cf_support(s, M: int) -> list:
    """[((x1, x2, x3), prob)] for the contention-free period.

    Nodes in states 2-4 are equally likely to be scheduled. When they all fit,
    everyone is scheduled.
    """
    n1, n2, n3, n4 = s
    total = n2 + n3 + n4
    if total <= M:
        return [((n3, 0, n4), 1.0)]
    denom = math.comb(total, M)
    out = []
    for x1 in range(min(n3, M) + 1):
        for x3 in range(min(n4, M - x1) + 1):
            from_2 = M - x1 - x3
            if from_2 > n2:
                continue
            pr = math.comb(n3, x1) * math.comb(n4, x3) * math.comb(n2, from_2) / denom
            out.append(((x1, n3 - x1, x3), pr))
    return out


def cf_pmf(x1, x2, x3, s, M: int, N: int | None = None) -> float:
    if N is not None:
        SystemState(*s).check(N)
    elif min(s) < 0:
        raise InfeasibleParameters(f"state {tuple(s)} infeasible")
    for key, pr in cf_support(s, M):
        if key == (x1, x2, x3):
            return pr
    return 0.0


def status_change_pmf(x5, x6, x7, x8, x1, x2, x3, x4, s, p, q, N) -> float:
    """Product of the four independent binomials for call status changes."""
    n1, n2, n3, n4 = s
    n5 = N - (n1 + n2 + n3 + n4)
    pops = (n2 + x4, n4 + x2 - x3, n1 - x4, n5 + x1 + x3)
    if min(pops) < 0:
        raise InfeasibleParameters(f"negative population in transition: {pops}")
    return (binom_pmf(x5, pops[0], q) * binom_pmf(x6, pops[1], p)
            * binom_pmf(x7, pops[2], q) * binom_pmf(x8, pops[3], p))


# ---------------------------------------------------------------------------
# chain


@dataclass(frozen=True)
class ChainParams:
    N: int
    T_rf: int
    t_v: int
    t_q: int
    W: int
    p: float
    q: float
    contention: str = "formula"

    @property
    def M(self) -> int:
        return max_scheduled_M(self.T_rf, self.t_v)

    @classmethod
    def from_protocol(cls, params: ProtocolParams, N: int, T_rf: int, contention="formula"):
        t_v = us_to_minislots(aggregate_tx_time_tv(params), params)
        t_q = us_to_minislots(request_tx_time_tq(params), params)
        p, q = switch_probs(params.T_rb_ms / 1000, params.t_on_s, params.t_off_s)
        return cls(N=N, T_rf=T_rf, t_v=t_v, t_q=t_q, W=params.contention_window_W,
                   p=p, q=q, contention=contention)


@lru_cache(maxsize=4096)
def _contention(n1, T_cp, W, t_q, model):
    if model == "formula":
        v = contention_pmf_formula(n1, T_cp, W, t_q)
    elif model == "exact":
        v = contention_pmf_exact(n1, T_cp, W, t_q)
    elif model == "ideal":
        # every contender gets through, whatever the period length
        v = np.zeros(n1 + 1)
        v[n1] = 1.0
    else:
        raise ValueError(f"unknown contention model {model!r}")
    v = np.asarray(v, dtype=float)
    v.setflags(write=False)
    return v


def contention_vector(cp: ChainParams, s) -> np.ndarray:
    _, T_cp = period_durations(s, cp.T_rf, cp.t_v, cp.M)
    return _contention(s[0], T_cp, cp.W, cp.t_q, cp.contention)


@dataclass
class MarkovChain:
    cp: ChainParams
    states: list = field(default_factory=list)
    index: dict = field(default_factory=dict)
    P: sp.csr_matrix | None = None

    @property
    def N(self):
        return self.cp.N

    @property
    def M(self):
        return self.cp.M

    def __len__(self):
        return len(self.states)


def build_chain(cp: ChainParams) -> MarkovChain:
    if cp.p <= 0 or cp.q <= 0 or cp.p >= 1 or cp.q >= 1:
        raise InfeasibleParameters("switching probabilities must lie strictly in (0, 1)")
    N = cp.N
    M = cp.M
    states = enumerate_states(N)
    S = len(states)
    index = {s: i for i, s in enumerate(states)}
    lookup = np.full((N + 1,) * 4, -1, dtype=np.int64)
    for i, s in enumerate(states):
        lookup[s] = i

    rows, cols, vals = [], [], []
    for i, s in enumerate(states):
        n1, n2, n3, n4 = s
        n5 = N - sum(s)
        c4 = contention_vector(cp, s)
        cf = cf_support(s, M)
        row = np.zeros(S)
        for x4 in range(n1 + 1):
            w4 = c4[x4]
            if w4 == 0.0:
                continue
            pmf5 = binom_vec(n2 + x4, cp.q)          # x5
            pmf7 = binom_vec(n1 - x4, cp.q)          # x7
            x5 = np.arange(pmf5.size)
            for (x1, x2, x3), wcf in cf:
                pop6 = n4 + x2 - x3
                pmf6 = binom_vec(pop6, cp.p)         # x6
                pmf8 = binom_vec(n5 + x1 + x3, cp.p)  # x8
                # d = x8 - x7, offset by -(n1 - x4)
                pmfd = np.convolve(pmf8, pmf7[::-1])
                d = np.arange(pmfd.size) - (n1 - x4)
                x6 = np.arange(pmf6.size)
                n1p = (n1 - x4 + d)[:, None, None]
                n2p = (n2 + x4 - x5)[None, :, None] + x6[None, None, :]
                n3p = x5[None, :, None]
                n4p = (pop6 - x6)[None, None, :]
                n1p, n2p, n3p, n4p = np.broadcast_arrays(n1p, n2p, n3p, n4p)
                idx = lookup[n1p, n2p, n3p, n4p]
                w = (w4 * wcf) * pmfd[:, None, None] * pmf5[None, :, None] * pmf6[None, None, :]
                row += np.bincount(idx.ravel(), weights=w.ravel(), minlength=S)
        row[row < FLUSH] = 0.0
        nz = np.nonzero(row)[0]
        rows.append(np.full(nz.size, i))
        cols.append(nz)
        vals.append(row[nz])
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(S, S))
    return MarkovChain(cp=cp, states=states, index=index, P=P)


def enumerate_transitions(s, s2, cp: ChainParams):
    """Every transition vector consistent with moving from ``s`` to ``s2``."""
    n1, n2, n3, n4 = s
    N = cp.N
    n5 = N - sum(s)
    m1, m2, m3, m4 = s2
    x5 = m3
    for x4 in range(n1 + 1):
        for x1 in range(n3 + 1):
            x2 = n3 - x1
            for x3 in range(n4 + 1):
                x6 = x2 - x3 - (m4 - n4)
                if x6 < 0 or x4 - x5 + x6 != m2 - n2:
                    continue
                for x7 in range(n1 - x4 + 1):
                    x8 = m1 - n1 + x7 + x4
                    if x8 < 0 or x8 > n5 + x1 + x3:
                        continue
                    x = TransitionCount(x1, x2, x3, x4, x5, x6, x7, x8)
                    if x5 > n2 + x4 or x6 > n4 + x2 - x3:
                        continue
                    assert balance_holds(x, SystemState(*s), SystemState(*s2))
                    yield x


def transition_probability(s, s2, cp_or_chain) -> float:
    """P(s -> s2) by summing the factorised pmf over every consistent x vector."""
    cp = cp_or_chain.cp if isinstance(cp_or_chain, MarkovChain) else cp_or_chain
    s = SystemState(*s).check(cp.N)
    s2 = SystemState(*s2).check(cp.N)
    M = cp.M
    c4 = contention_vector(cp, s)
    total = 0.0
    for x in enumerate_transitions(s, s2, cp):
        a = cf_pmf(x.x1, x.x2, x.x3, s, M)
        if a == 0.0:
            continue
        b = c4[x.x4]
        c = status_change_pmf(x.x5, x.x6, x.x7, x.x8, x.x1, x.x2, x.x3, x.x4, s, cp.p, cp.q, cp.N)
        total += a * b * c
    return total


# ---------------------------------------------------------------------------
# stationary distribution


def _residual(P, pi):
    return float(np.max(np.abs(P.T @ pi - pi)))


def stationary_distribution(P, tol=1e-10, max_iter=200_000) -> np.ndarray:
    """Solve pi P = pi, sum(pi) = 1.

    Direct sparse solve (one balance equation replaced by normalisation) up to
    ``DIRECT_SOLVE_LIMIT`` states, power iteration beyond that. Singular or
    reducible systems raise ``NumericalError``.
    """
    P = sp.csr_matrix(P, dtype=float)
    S = P.shape[0]
    if S == 1:
        return np.ones(1)
    if S <= DIRECT_SOLVE_LIMIT:
        A = (P.T - sp.identity(S, format="csr")).tolil()
        A[S - 1, :] = np.ones(S)
        b = np.zeros(S)
        b[-1] = 1.0
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                pi = spla.spsolve(A.tocsc(), b)
            except (spla.MatrixRankWarning, RuntimeError) as exc:
                raise NumericalError(f"balance equations are singular: {exc}") from None
        if not np.all(np.isfinite(pi)):
            raise NumericalError("balance equations are singular")
        if pi.min() < -1e-9:
            raise NumericalError(f"negative stationary mass {pi.min():.3e}; chain likely reducible")
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
        # one refinement pass of power iteration tightens the residual
        for _ in range(50):
            if _residual(P, pi) < tol * 1e-2:
                break
            pi = P.T @ pi
            pi /= pi.sum()
        res = _residual(P, pi)
        if res >= tol:
            raise NumericalError(f"residual {res:.3e} above {tol:.1e}")
        return pi
    pi = np.full(S, 1.0 / S)
    for _ in range(max_iter):
        nxt = P.T @ pi
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < 1e-12 and _residual(P, nxt) < 1e-12:
            return nxt
        pi = nxt
    raise NumericalError(f"power iteration did not converge; residual {_residual(P, pi):.3e}")


def steady_state(chain: MarkovChain) -> np.ndarray:
    return stationary_distribution(chain.P)


def simulate_chain(P, n_samples, rng, n_chains=1000, burn_in=500) -> np.ndarray:
    """Empirical state frequencies from many independent chain walks.

    ``n_chains`` walkers start uniformly at random, discard ``burn_in`` steps,
    then each contributes ``n_samples // n_chains`` visits.
    """
    P = sp.csr_matrix(P).toarray()
    S = P.shape[0]
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    cur = rng.integers(0, S, size=n_chains)
    counts = np.zeros(S, dtype=np.int64)
    steps = n_samples // n_chains
    for t in range(burn_in + steps):
        u = rng.random(n_chains)
        cur = (cum[cur] < u[:, None]).sum(axis=1)
        if t >= burn_in:
            counts += np.bincount(cur, minlength=S)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# loss


def delivered_over_generated(s, M: int) -> float:
    """Per-state ratio of packets sent to packets generated (rho cancels).

    States where nothing is generated count as lossless.
    """
    n1, n2, n3, n4 = s
    gen = n1 + n2
    if gen == 0:
        return 1.0
    active = n2 + n3 + n4
    if active == 0:
        return 0.0
    return min(active, M) * (n2 + n3) / active / gen


def loss_rate_pointwise(chain: MarkovChain, pi=None) -> float:
    """One minus the stationary average of the per-state delivered/generated
    ratio. States holding only call-off nodes with pending packets deliver
    more than they generate, so this can dip below zero; kept for comparison."""
    if pi is None:
        pi = steady_state(chain)
    ratios = np.array([delivered_over_generated(s, chain.M) for s in chain.states])
    return float(1.0 - pi @ ratios)


def loss_rate_delta_mac(chain: MarkovChain, pi=None) -> float:
    """Realtime loss due to MAC contention as the long-run lost fraction,
    1 - E[delivered] / E[generated] under the stationary distribution."""
    if pi is None:
        pi = steady_state(chain)
    M = chain.M
    sent = np.zeros(len(chain))
    gen = np.zeros(len(chain))
    for i, (n1, n2, n3, n4) in enumerate(chain.states):
        active = n2 + n3 + n4
        sent[i] = min(active, M) * (n2 + n3) / active if active else 0.0
        gen[i] = n1 + n2
    g = pi @ gen
    if g == 0:
        return 0.0
    return float(1.0 - (pi @ sent) / g)


loss_rate_ratio_of_means = loss_rate_delta_mac

LOSS_METRICS = {"ratio": loss_rate_delta_mac, "pointwise": loss_rate_pointwise}


def max_allowable_mac_loss(delta_star, delta_ch) -> float:
    if not (0 <= delta_ch < 1):
        raise InfeasibleQoS("channel loss must lie in [0, 1)")
    if not (0 <= delta_star < 1):
        raise InfeasibleQoS("target loss must lie in [0, 1)")
    if delta_ch > delta_star:
        raise InfeasibleQoS(f"channel loss {delta_ch} already exceeds the target {delta_star}")
    return 1.0 - (1.0 - delta_star) / (1.0 - delta_ch)


def total_loss(delta_mac, delta_ch) -> float:
    """Compose MAC and channel loss into the end-to-end loss."""
    return 1.0 - (1.0 - delta_mac) * (1.0 - delta_ch)


# ---------------------------------------------------------------------------
# minimum realtime frame


class LossCurve:
    """Memoised loss as a function of the realtime frame length (mini-slots)."""

    def __init__(self, params: ProtocolParams, N: int, contention="formula", metric="ratio"):
        self.params = params
        self.N = N
        self.contention = contention
        self.metric = LOSS_METRICS[metric]
        self._cache = {}

    def chain(self, T_rf):
        return build_chain(ChainParams.from_protocol(self.params, self.N, T_rf, self.contention))

    def __call__(self, T_rf: int) -> float:
        if self.N == 0:
            return 0.0
        if T_rf not in self._cache:
            ch = self.chain(T_rf)
            self._cache[T_rf] = self.metric(ch, steady_state(ch))
        return self._cache[T_rf]


def frame_search_limit(params: ProtocolParams) -> int:
    """Largest realtime frame (mini-slots) leaving the minimum contention period."""
    return (params.T_rb_us - params.min_contention_us) // params.mini_slot_us


def min_frame_duration(params: ProtocolParams, N: int, delta_mac_star: float,
                       contention="formula", metric="ratio", curve=None) -> int:
    """Smallest realtime frame (mini-slots) whose MAC loss meets the target.

    Binary search over whole mini-slots in ``[0, frame_search_limit]``; the
    answer is checked so that one slot less violates the target.
    """
    if not (0 < delta_mac_star < 1):
        raise InfeasibleQoS("loss target must lie in (0, 1)")
    if N == 0:
        return 0
    f = curve or LossCurve(params, N, contention, metric)
    hi = frame_search_limit(params)
    if f(hi) > delta_mac_star:
        raise CapacityExceeded(
            f"{N} realtime calls need more than {hi} mini-slots (loss {f(hi):.4g} at the limit)")
    lo = 0
    if f(lo) <= delta_mac_star:
        return 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if f(mid) <= delta_mac_star:
            hi = mid
        else:
            lo = mid
    if not f(hi - 1) > delta_mac_star:
        raise NumericalError(f"loss is not monotone around T_rf={hi}")
    return hi
