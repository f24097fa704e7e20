"""Distribution of successful transmission requests in one contention period.

Three routes to the same quantity, all in mini-slot units:

* ``contention_counts`` / ``contention_pmf_formula`` -- the closed-form
  counting expression over events (successes, collisions, last backoff).
* ``contention_pmf_exact`` -- a dynamic program over backoff values that
  follows the CSMA rules exactly.
* ``contention_pmf_oracle`` -- brute-force enumeration of every backoff
  vector, used only for verification.

Contention rules shared by the exact routes: every contender draws a backoff
uniformly from ``[0, W-1]``; counters freeze while a request is on the air;
nodes whose counters expire together collide; a request (success or
collision) occupies ``t_q`` slots; nobody starts a request unless at least
``t_q`` slots remain in the period.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

ORACLE_MAX_N1 = 6
ORACLE_MAX_W = 16


class OracleSizeError(ValueError):
    pass


def _check(n1, W, t_q):
    if n1 < 0:
        raise ValueError("number of contenders must be >= 0")
    if W < 1:
        raise ValueError("W must be >= 1")
    if t_q <= 0:
        raise ValueError("request duration t_q must be positive")


def contention_counts(n1: int, T_cp: int, W: int, t_q: int) -> dict:
    """Size of the backoff-vector set leading to each success count.

    Returns ``{x4: count}`` where counts are exact integers summed over every
    feasible (collision count, last backoff) pair. The denominator is
    ``W ** n1``. The expression counts collisions as exactly two nodes and lets
    the remaining nodes either pick a backoff past the cut-off or join one of
    the collisions, so the counts need not add up to ``W ** n1``.
    """
    _check(n1, W, t_q)
    counts = dict.fromkeys(range(n1 + 1), 0)

    # no request at all: every backoff lies beyond the last usable slot
    w_x0 = max(min(T_cp - t_q, W - 1), -1)
    counts[0] += (W - 1 - w_x0) ** n1

    for x4 in range(n1 + 1):
        for x4c in range((n1 - x4) // 2 + 1):
            k = x4 + x4c
            if k == 0:
                continue
            idle = T_cp - k * t_q
            w_x = min(idle - t_q, W - 1)
            if w_x < k - 1:
                continue
            rest = n1 - x4 - 2 * x4c
            assign = math.factorial(n1) // (math.factorial(rest) * 2 ** x4c)
            tail = (W - 1 - w_x + x4c) ** rest
            order = math.comb(k, x4)
            lead = sum(math.comb(w_l, k - 1) for w_l in range(k - 1, w_x + 1))
            counts[x4] += lead * order * assign * tail
    return counts


def contention_raw_mass(n1, T_cp, W, t_q) -> Fraction:
    """Total probability mass of the counting expression (1 when it is exact)."""
    return Fraction(sum(contention_counts(n1, T_cp, W, t_q).values()), W ** n1)


def contention_pmf_raw(n1, T_cp, W, t_q) -> np.ndarray:
    """Counting expression divided by ``W ** n1``, without renormalisation."""
    c = contention_counts(n1, T_cp, W, t_q)
    denom = W ** n1
    return np.array([float(Fraction(c[x], denom)) for x in range(n1 + 1)])


def contention_pmf_formula(n1, T_cp, W, t_q) -> np.ndarray:
    """pmf over x4 = 0..n1 from the counting expression.

    The counts are renormalised by their own total so the result is a proper
    distribution; ``contention_raw_mass`` exposes the pre-normalisation mass.
    """
    c = contention_counts(n1, T_cp, W, t_q)
    total = sum(c.values())
    if total == 0:
        # no feasible event at all; only "nobody got through" is consistent
        out = np.zeros(n1 + 1)
        out[0] = 1.0
        return out
    return np.array([float(Fraction(c[x], total)) for x in range(n1 + 1)])


def contention_probability(x4, n1, T_cp, W, t_q) -> float:
    if x4 < 0 or x4 > n1:
        return 0.0
    return float(contention_pmf_formula(n1, T_cp, W, t_q)[x4])


def contention_pmf_exact(n1, T_cp, W, t_q) -> np.ndarray:
    """Exact pmf of the success count, by dynamic programming over backoff values.

    Walks the backoff values 0..W-1 in order. Given ``r`` nodes whose backoff
    is still undecided (each uniform on the values not yet visited), the number
    choosing the current value is binomial. ``k`` requests so far shift the
    start time of the next one by ``k * t_q``.
    """
    _check(n1, W, t_q)
    # dist[(r, k, x4)] -> probability
    dist = {(n1, 0, 0): 1.0}
    out = np.zeros(n1 + 1)
    for w in range(W):
        nxt = {}
        remaining_values = W - w
        for (r, k, x4), pr in dist.items():
            if r == 0:
                out[x4] += pr
                continue
            if w + (k + 1) * t_q > T_cp:
                # no further request fits; all later values are worse
                out[x4] += pr
                continue
            ps = 1.0 / remaining_values
            for j in range(r + 1):
                pj = math.comb(r, j) * ps ** j * (1 - ps) ** (r - j)
                if pj == 0.0:
                    continue
                if j == 0:
                    key = (r, k, x4)
                else:
                    key = (r - j, k + 1, x4 + (j == 1))
                nxt[key] = nxt.get(key, 0.0) + pr * pj
        dist = nxt
    for (r, k, x4), pr in dist.items():
        out[x4] += pr
    return out


def successes_for_vector(backoffs, T_cp, t_q) -> int:
    """Number of successful requests produced by one backoff vector."""
    k = 0
    ok = 0
    for w, grp in itertools.groupby(sorted(backoffs)):
        c = len(list(grp))
        if w + k * t_q + t_q > T_cp:
            break
        k += 1
        if c == 1:
            ok += 1
    return ok


def contention_pmf_oracle(n1, T_cp, W, t_q) -> list:
    """Exhaustive enumeration of all ``W ** n1`` backoff vectors.

    Returns a list of exact ``Fraction`` probabilities indexed by x4.
    """
    _check(n1, W, t_q)
    if n1 > ORACLE_MAX_N1 or W > ORACLE_MAX_W:
        raise OracleSizeError(
            f"enumeration limited to n1 <= {ORACLE_MAX_N1}, W <= {ORACLE_MAX_W}")
    tally = [0] * (n1 + 1)
    for vec in itertools.product(range(W), repeat=n1):
        tally[successes_for_vector(vec, T_cp, t_q)] += 1
    denom = W ** n1
    return [Fraction(c, denom) for c in tally]


def oracle_diff_table(n1_values=range(0, 5), W_values=(1, 2, 4, 8), t_q=3, regimes=None):
    """Compare the counting expression against enumeration.

    ``regimes`` maps a label to a function ``(n1, W, t_q) -> T_cp``. Every row
    is returned, with ``flagged`` set when the renormalised expression differs
    from the oracle by more than 1e-12.
    """
    if regimes is None:
        regimes = {
            "short": lambda n1, W, tq: tq - 1,
            "moderate": lambda n1, W, tq: tq + W // 2 + tq * max(n1 - 1, 0) // 2,
            "long": lambda n1, W, tq: W + (n1 + 1) * tq,
        }
    rows = []
    for n1 in n1_values:
        for W in W_values:
            for label, fn in regimes.items():
                T_cp = fn(n1, W, t_q)
                oracle = np.array([float(v) for v in contention_pmf_oracle(n1, T_cp, W, t_q)])
                formula = contention_pmf_formula(n1, T_cp, W, t_q)
                raw = contention_pmf_raw(n1, T_cp, W, t_q)
                exact = contention_pmf_exact(n1, T_cp, W, t_q)
                diff = float(np.max(np.abs(formula - oracle)))
                rows.append({
                    "n1": n1, "W": W, "t_q": t_q, "regime": label, "T_cp": T_cp,
                    "raw_mass": float(contention_raw_mass(n1, T_cp, W, t_q)),
                    "max_abs_diff": diff,
                    "max_abs_diff_raw": float(np.max(np.abs(raw - oracle))),
                    "max_abs_diff_exact": float(np.max(np.abs(exact - oracle))),
                    "flagged": diff > 1e-12,
                    "oracle": oracle.tolist(),
                    "formula": formula.tolist(),
                })
    return rows
