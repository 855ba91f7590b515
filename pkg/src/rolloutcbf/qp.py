"""Exact solver for box-constrained QPs with one affine inequality.

    minimize    0.5 u^T Q u - q^T u
    subject to  lo <= u <= hi,   a^T u <= b

with Q symmetric positive definite. The filter's per-step problem reduces
to this form after the per-channel velocity intervals are intersected into
the box. Dimensions are tiny (m inputs), so the optimal active set is
found by direct KKT enumeration over all box pin patterns crossed with the
affine constraint being active or not: exact, deterministic, and free of
iterative-solver failure modes. Cost grows as 2 * 3^m subproblems, which
is the intended regime (m <= 5 or so).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Optional

import numpy as np

FREE, AT_LO, AT_HI = 0, 1, 2


@lru_cache(maxsize=16)
def _patterns(m: int):
    """All box pin patterns, fewest pinned coordinates first (common case)."""
    pats = list(product((FREE, AT_LO, AT_HI), repeat=m))
    pats.sort(key=lambda p: sum(1 for s in p if s != FREE))
    return tuple(pats)


@dataclass
class QPSolution:
    u: np.ndarray
    objective: float
    affine_active: bool
    lo_active: np.ndarray   # bool per coordinate
    hi_active: np.ndarray
    subproblems: int


def _objective(Q, q, u):
    return float(0.5 * u @ Q @ u - q @ u)


def solve_box_affine_qp(Q: np.ndarray, q: np.ndarray, lo: np.ndarray,
                        hi: np.ndarray, a: Optional[np.ndarray] = None,
                        b: float = 0.0, tol: float = 1e-9,
                        max_subproblems: Optional[int] = None
                        ) -> Optional[QPSolution]:
    """Solve the QP exactly, or return None when it is infeasible (or the
    subproblem cap was exhausted without a KKT-consistent pattern).

    Feasibility requires lo <= hi and, when the affine row is present,
    min_{box} a^T u <= b. The affine row is normalized by its sup-norm so
    the tolerance is scale free. The first pattern (in the deterministic
    enumeration order) whose KKT conditions hold within ``tol`` is
    returned; strict convexity makes the minimizer unique.
    """
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    m = Q.shape[0]
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    if np.any(lo > hi + tol):
        return None
    lo = np.minimum(lo, hi)

    have_affine = a is not None and bool(np.any(np.asarray(a) != 0.0))
    if have_affine:
        a = np.asarray(a, dtype=float)
        scale = float(np.abs(a).max())
        a = a / scale
        b = float(b) / scale
        box_min = float(np.where(a > 0, lo, hi) @ a)
        if box_min > b + tol:
            return None
    else:
        a = np.zeros(m)

    affine_options = (False, True) if have_affine else (False,)
    count = 0
    for pat in _patterns(m):
        pinned = np.array(pat, dtype=int)
        base = np.where(pinned == AT_LO, lo, np.where(pinned == AT_HI, hi, 0.0))
        free = pinned == FREE
        nf = int(np.sum(free))
        for affine_active in affine_options:
            count += 1
            if max_subproblems is not None and count > max_subproblems:
                return None
            u = base.copy()
            lam = 0.0
            if nf > 0:
                rhs = q[free] - Q[np.ix_(free, ~free)] @ u[~free]
                if affine_active:
                    kkt = np.zeros((nf + 1, nf + 1))
                    kkt[:nf, :nf] = Q[np.ix_(free, free)]
                    kkt[:nf, nf] = a[free]
                    kkt[nf, :nf] = a[free]
                    vec = np.empty(nf + 1)
                    vec[:nf] = rhs
                    vec[nf] = b - a[~free] @ u[~free]
                    try:
                        sol = np.linalg.solve(kkt, vec)
                    except np.linalg.LinAlgError:
                        continue
                    u[free] = sol[:nf]
                    lam = float(sol[nf])
                else:
                    try:
                        u[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
                    except np.linalg.LinAlgError:
                        continue
            elif affine_active:
                # all coordinates pinned: the affine row must hold by itself
                if abs(float(a @ u) - b) > tol:
                    continue

            # primal feasibility
            if np.any(u < lo - tol) or np.any(u > hi + tol):
                continue
            if have_affine and not affine_active and float(a @ u) > b + tol:
                continue
            # dual feasibility
            if affine_active and lam < -tol:
                continue
            grad = Q @ u - q + lam * a
            ok = True
            for j in range(m):
                if pat[j] == AT_LO and grad[j] < -tol:
                    ok = False
                    break
                if pat[j] == AT_HI and grad[j] > tol:
                    ok = False
                    break
            if not ok:
                continue
            u = np.clip(u, lo, hi)
            return QPSolution(
                u=u,
                objective=_objective(Q, q, u),
                affine_active=bool(affine_active and have_affine),
                lo_active=np.abs(u - lo) <= tol * np.maximum(1.0, np.abs(lo)),
                hi_active=np.abs(u - hi) <= tol * np.maximum(1.0, np.abs(hi)),
                subproblems=count,
            )
    return None
