"""Comparison compressors at matched parameter budgets.

Magnitude pruning of a dense matrix, low-rank factorization, and
small-baseline sizing, each exposing the same gate-adapter interface as the
doped layer so they can slot into the LSTM cell unchanged.  ``budget_match``
converts a target compression factor into each method's discrete knob.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kron import require_matrix
from .overlay import PruneSchedule, SparseOverlay


@dataclass
class LowRankPair:
    """W approximated as u @ v with u: (m, r) and v: (r, n)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = require_matrix(self.u, "u factor")
        self.v = require_matrix(self.v, "v factor")
        if self.u.shape[1] != self.v.shape[0]:
            raise ValueError("inner dimensions of u and v must agree")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def param_count(self) -> int:
        return self.u.size + self.v.size


def lmf_from_svd(w: np.ndarray, rank: int) -> LowRankPair:
    """Initialize the pair from the truncated SVD of a dense matrix."""
    w = require_matrix(w, "w")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    root = np.sqrt(s[:rank])
    return LowRankPair(u=u[:, :rank] * root, v=vt[:rank] * root[:, None])


def lmf_matvec(pair: LowRankPair, x: np.ndarray) -> np.ndarray:
    """o = u @ (v @ x); accepts a vector or a stack of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != pair.v.shape[1]:
        raise ValueError(f"x must have length {pair.v.shape[1]}, got {x.shape}")
    return (x @ pair.v.T) @ pair.u.T


def lmf_backward(pair: LowRankPair, x: np.ndarray, g_out: np.ndarray):
    """Gradients (g_u, g_v, g_x) of a loss with upstream gradient g_out."""
    x = np.asarray(x, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    g2 = g_out[None, :] if single else g_out
    t = x2 @ pair.v.T  # (k, r)
    g_u = g2.T @ t
    g_v = (g2 @ pair.u).T @ x2
    g_x = (g2 @ pair.u) @ pair.v
    return g_u, g_v, (g_x[0] if single else g_x)


@dataclass
class PrunedDense:
    """Dense matrix under the same mask semantics as the sparse overlay."""

    weights: SparseOverlay
    schedule: PruneSchedule | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def nnz(self) -> int:
        return self.weights.nnz


# ---------------------------------------------------------------------------
# Gate adapters
# ---------------------------------------------------------------------------


class LowRankGate:
    def __init__(self, pair: LowRankPair):
        self.pair = pair

    @property
    def out_dim(self) -> int:
        return self.pair.u.shape[0]

    @property
    def in_dim(self) -> int:
        return self.pair.v.shape[1]

    def forward(self, z, training=False, rng=None, replay=None):
        return lmf_matvec(self.pair, z), z

    def backward(self, cache, da):
        g_u, g_v, dz = lmf_backward(self.pair, cache, da)
        return dz, {"u": g_u, "v": g_v}

    def params(self):
        return {"u": self.pair.u, "v": self.pair.v}

    def masks(self):
        return {}

    def param_count(self) -> int:
        return self.pair.param_count


class PrunedGate:
    def __init__(self, pd: PrunedDense):
        self.pd = pd

    @property
    def out_dim(self) -> int:
        return self.pd.shape[0]

    @property
    def in_dim(self) -> int:
        return self.pd.shape[1]

    def forward(self, z, training=False, rng=None, replay=None):
        return z @ self.pd.weights.values.T, z

    def backward(self, cache, da):
        z = cache
        g_w = (da.T @ z) * self.pd.weights.mask
        return da @ self.pd.weights.values, {"w": g_w}

    def params(self):
        return {"w": self.pd.weights.values}

    def masks(self):
        return {"w": self.pd.weights.mask}

    def param_count(self) -> int:
        return self.pd.nnz


# ---------------------------------------------------------------------------
# Budget matching
# ---------------------------------------------------------------------------


@dataclass
class BudgetMatch:
    """A method's knob setting for a target compression factor."""

    method: str
    factor: float
    settings: dict
    target_params: float
    achieved_params: int
    feasible: bool
    note: str = ""

    @property
    def within(self) -> float:
        """Achieved / target parameter ratio."""
        return self.achieved_params / self.target_params if self.target_params else math.inf


def budget_match(target_factor: float, shape: tuple[int, int], method: str,
                 kp_params: int | None = None) -> BudgetMatch:
    """Pick the discrete knob putting a method at ~dense/factor parameters.

    Returns the rank (lmf), sparsity (prune / dkp overlay) or shrunk hidden
    size (small baseline, where ``shape`` is the 4h x 2h gate matrix).  The
    achieved count lands within one unit of the knob; infeasible factors are
    reported, not raised.
    """
    if target_factor < 1.0:
        raise ValueError("compression factor must be >= 1")
    m, n = shape
    dense = m * n
    budget = dense / target_factor

    if method == "dense":
        if target_factor != 1.0:
            return BudgetMatch(method, target_factor, {}, budget, dense, False,
                               "dense supports factor 1 only")
        return BudgetMatch(method, 1.0, {}, budget, dense, True)

    if method == "prune":
        keep = max(0, round(budget))
        return BudgetMatch(method, target_factor,
                           {"sparsity": 1.0 - keep / dense},
                           budget, keep, keep > 0,
                           "" if keep > 0 else "budget below one weight")

    if method == "dkp":
        if kp_params is None:
            raise ValueError("dkp budget requires the factor-pair parameter count")
        nnz = round(budget) - kp_params
        if nnz < 0:
            return BudgetMatch(method, target_factor,
                               {"sparsity": 1.0, "kp_params": kp_params},
                               budget, kp_params, False,
                               "factor pair alone exceeds the budget")
        return BudgetMatch(method, target_factor,
                           {"sparsity": 1.0 - nnz / dense, "kp_params": kp_params},
                           budget, kp_params + nnz, True)

    if method == "lmf":
        rank = math.floor(budget / (m + n))
        if rank < 1:
            return BudgetMatch(method, target_factor, {"rank": 1}, budget,
                               m + n, False, "rank rounds below 1")
        return BudgetMatch(method, target_factor, {"rank": rank},
                           budget, rank * (m + n), True)

    if method == "small":
        # shape is the 4h x 2h gate matrix; shrink h to the largest h' whose
        # gate matrix 8 h'^2 still fits the per-layer budget.
        h = n // 2
        if m != 4 * h or n != 2 * h:
            raise ValueError("small-baseline budget needs a 4h x 2h gate shape")
        h_small = math.floor(h / math.sqrt(target_factor))
        if h_small < 1:
            return BudgetMatch(method, target_factor, {"hidden": 1}, budget,
                               8, False, "hidden size rounds below 1")
        return BudgetMatch(method, target_factor, {"hidden": h_small},
                           budget, 8 * h_small * h_small, True)

    raise ValueError(f"unknown compression method: {method}")
