"""Method of Moving Asymptotes for box-bounded problems with one constraint.

Both optimization stages minimize an objective under a single inequality
constraint, so the convex separable subproblem is solved through its dual:
a one-dimensional concave maximization over the constraint multiplier,
handled by bracketed bisection. A slack penalty c bounds the multiplier,
which reproduces the standard behaviour on temporarily infeasible iterates.

The objective gradient is normalized internally before the subproblem is
built. By dual exactness this leaves the subproblem minimizer unchanged and
makes the update invariant under positive rescaling of the objective, while
keeping the multiplier search bracket well-scaled.
"""

from dataclasses import dataclass, field

import numpy as np

ASY_INIT = 0.5  # initial asymptote offset, fraction of box width
ASY_DECR = 0.7  # shrink factor on oscillation
ASY_INCR = 1.2  # growth factor on monotone progress
ASY_CLAMP = 0.6  # maximum asymptote distance, fraction of box width
ALBEFA = 0.1  # bound offset from asymptotes
RAA0 = 1e-5  # convexity floor, scaled by the mean gradient magnitude
SLACK_PENALTY = 1000.0
DUAL_TOL = 1e-10


@dataclass
class MmaState:
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    iteration: int = 0
    move: float = 0.2  # move limit, fraction of box width


def mma_update(state: MmaState, x, f0, df0, g, dg, xmin, xmax):
    """One MMA iteration; returns (x_next, state).

    f0/df0: objective value and gradient. g/dg: constraint value and
    gradient for g <= 0. xmin/xmax: box bounds (arrays or scalars).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    xmin = np.broadcast_to(np.asarray(xmin, dtype=float), x.shape).copy()
    xmax = np.broadcast_to(np.asarray(xmax, dtype=float), x.shape).copy()
    df0 = np.asarray(df0, dtype=float)
    dg = np.asarray(dg, dtype=float)
    for name, arr in (("x", x), ("df0", df0), ("dg", dg)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entries in {name}")
    if not (np.isfinite(f0) and np.isfinite(g)):
        raise ValueError("non-finite objective or constraint value")
    if np.any(xmin > xmax):
        raise ValueError("box bounds out of order")

    box = np.maximum(xmax - xmin, 1e-12)
    state.iteration += 1

    # asymptote update (Svanberg's adaptive rule)
    if state.iteration <= 2 or state.xold2 is None:
        low = x - ASY_INIT * box
        upp = x + ASY_INIT * box
    else:
        osc = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.ones(n)
        factor[osc > 0] = ASY_INCR
        factor[osc < 0] = ASY_DECR
        low = x - factor * (state.xold1 - state.lower)
        upp = x + factor * (state.upper - state.xold1)
        # the cap keeps late-iteration steps conservative enough that
        # compliance histories stay monotone; Svanberg's 10x cap lets
        # boundary elements ping-pong at the move limit
        low = np.clip(low, x - ASY_CLAMP * box, x - 0.01 * box)
        upp = np.clip(upp, x + 0.01 * box, x + ASY_CLAMP * box)

    alpha = np.maximum.reduce([xmin, low + ALBEFA * (x - low), x - state.move * box])
    beta = np.minimum.reduce([xmax, upp - ALBEFA * (upp - x), x + state.move * box])

    # normalize the objective; the argmin is invariant (the multiplier rescales)
    scale = np.mean(np.abs(df0) * box)
    if scale <= 0.0:
        scale = 1.0
    df0n = df0 / scale

    p0, q0 = _convex_coeffs(df0n, x, low, upp, box)
    p1, q1 = _convex_coeffs(dg, x, low, upp, box)
    ux, xl = upp - x, x - low
    b = float(p1 @ (1.0 / ux) + q1 @ (1.0 / xl) - g)

    def primal(lam):
        P = p0 + lam * p1
        Q = q0 + lam * q1
        sp, sq = np.sqrt(P), np.sqrt(Q)
        xs = (low * sp + upp * sq) / (sp + sq)
        return np.clip(xs, alpha, beta)

    def constraint(lam):
        xs = primal(lam)
        return float(p1 @ (1.0 / (upp - xs)) + q1 @ (1.0 / (xs - low)) - b)

    if constraint(0.0) <= 0.0:
        lam_star = 0.0
    else:
        lo, hi = 0.0, SLACK_PENALTY
        if constraint(hi) > 0.0:
            lam_star = hi  # subproblem infeasible within move limits; slack active
        else:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if constraint(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= DUAL_TOL * max(1.0, hi):
                    break
            else:
                raise RuntimeError(
                    f"MMA dual bisection stalled, residual {constraint(hi):.3e}")
            lam_star = hi

    x_next = primal(lam_star)

    state.lower, state.upper = low, upp
    state.xold2 = state.xold1
    state.xold1 = x.copy()
    return x_next, state


def _convex_coeffs(grad, x, low, upp, box):
    """Svanberg p/q coefficients; the symmetric terms keep the gradient exact."""
    gp = np.maximum(grad, 0.0)
    gm = np.maximum(-grad, 0.0)
    raa = RAA0 * max(np.mean(np.abs(grad) * box), 1e-10) / box
    common = 0.001 * (gp + gm) + raa
    p = (gp + common) * (upp - x) ** 2
    q = (gm + common) * (x - low) ** 2
    return p, q
