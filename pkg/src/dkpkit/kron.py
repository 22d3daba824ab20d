"""Kronecker-product algebra on dense float64 matrices.

Dense matrices are plain row-major ``numpy.ndarray`` values of dtype float64.
A weight matrix expressed as a Kronecker product is held as a pair of small
factors; products with vectors are computed through a reshape identity so the
full matrix is never allocated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Refuse to materialize products with more elements than this (~8 GiB of f64).
MAX_MATERIALIZE_ELEMENTS = 1 << 30


def require_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate and return a nonempty, finite, 2-D float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(a)


@dataclass
class KronFactorPair:
    """A matrix represented as the Kronecker product of two dense factors.

    ``b`` has shape (m1, n1) and ``c`` shape (m2, n2); the implied product
    has shape (m1*m2, n1*n2) and costs m1*n1 + m2*n2 stored parameters.
    """

    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.b = require_matrix(self.b, "b factor")
        self.c = require_matrix(self.c, "c factor")

    @property
    def out_dim(self) -> int:
        return self.b.shape[0] * self.c.shape[0]

    @property
    def in_dim(self) -> int:
        return self.b.shape[1] * self.c.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @property
    def param_count(self) -> int:
        return self.b.size + self.c.size


def factor_param_count(b_shape: tuple[int, int], c_shape: tuple[int, int]) -> int:
    """Stored parameters for a factor pair of the given shapes."""
    return b_shape[0] * b_shape[1] + c_shape[0] * c_shape[1]


def choose_factor_shapes(rows: int, cols: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Pick factor shapes for a rows x cols target minimizing stored parameters.

    Enumerates all splits rows = m1*m2, cols = n1*n2 and returns the pair
    ((m1, n1), (m2, n2)) with the fewest parameters.  Splits where every
    factor dimension is >= 2 are preferred when any exist; ties break toward
    the smallest (m1, n1) for determinism.
    """
    if rows < 1 or cols < 1:
        raise ValueError("target shape must be positive")
    row_splits = [(d, rows // d) for d in range(1, rows + 1) if rows % d == 0]
    col_splits = [(d, cols // d) for d in range(1, cols + 1) if cols % d == 0]
    candidates = []
    for m1, m2 in row_splits:
        for n1, n2 in col_splits:
            cost = m1 * n1 + m2 * n2
            proper = min(m1, m2, n1, n2) >= 2
            candidates.append((not proper, cost, m1, n1, ((m1, n1), (m2, n2))))
    candidates.sort()
    return candidates[0][4]


def kron_materialize(kp: KronFactorPair) -> np.ndarray:
    """Expand the factor pair into its full (m1*m2) x (n1*n2) matrix.

    Entry [i1*m2 + i2, j1*n2 + j2] equals b[i1, j1] * c[i2, j2].
    """
    m1, n1 = kp.b.shape
    m2, n2 = kp.c.shape
    if m1 * m2 * n1 * n2 > MAX_MATERIALIZE_ELEMENTS:
        raise ValueError(
            f"materialized shape ({m1 * m2}, {n1 * n2}) exceeds the element limit"
        )
    out = kp.b[:, None, :, None] * kp.c[None, :, None, :]
    return out.reshape(m1 * m2, n1 * n2)


def _as_rows(x: np.ndarray, width: int, name: str) -> tuple[np.ndarray, bool]:
    """Coerce a vector or a stack of row vectors to 2-D, checking the width."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{name} must have length {width}, got shape {x.shape}")
    return x, single


def kron_matvec(kp: KronFactorPair, x: np.ndarray) -> np.ndarray:
    """Multiply the implied Kronecker matrix by ``x`` without materializing it.

    Uses the row-major reshape identity (B kron C) x = vec(B @ X @ C.T) with
    X = x reshaped to (n1, n2) in row-major order.  ``x`` may be a single
    vector of length n1*n2 or a stack of such vectors with shape (k, n1*n2);
    the result has the matching shape over length m1*m2.
    """
    m1, n1 = kp.b.shape
    m2, n2 = kp.c.shape
    x2, single = _as_rows(x, n1 * n2, "x")
    xt = x2.reshape(-1, n1, n2)
    out = np.matmul(np.matmul(kp.b, xt), kp.c.T)  # (k, m1, m2)
    out = out.reshape(-1, m1 * m2)
    return out[0] if single else out


def kron_matvec_grad(
    kp: KronFactorPair, x: np.ndarray, g_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a loss through ``kron_matvec``.

    Given upstream gradient ``g_out`` = dL/d(output), returns
    (g_b, g_c, g_x).  With G and X the (m1, m2) / (n1, n2) reshapes of
    g_out and x:

        g_b = G @ C @ X.T      g_c = G.T @ B @ X      g_x = vec(B.T @ G @ C)

    Batched inputs (stacks of rows) accumulate g_b and g_c over the batch.
    """
    m1, n1 = kp.b.shape
    m2, n2 = kp.c.shape
    x2, single = _as_rows(x, n1 * n2, "x")
    g2, g_single = _as_rows(g_out, m1 * m2, "g_out")
    if x2.shape[0] != g2.shape[0]:
        raise ValueError("x and g_out have mismatched batch sizes")
    xt = x2.reshape(-1, n1, n2)
    gt = g2.reshape(-1, m1, m2)

    gc_x = np.matmul(gt, kp.c)  # (k, m1, n2)
    g_b = np.einsum("sik,slk->il", gc_x, xt)
    gt_b = np.matmul(gt.transpose(0, 2, 1), kp.b)  # (k, m2, n1)
    g_c = np.einsum("sij,sjk->ik", gt_b, xt)
    bt_g = np.matmul(kp.b.T, gt)  # (k, n1, m2) via broadcasting over s
    g_x = np.matmul(bt_g, kp.c).reshape(-1, n1 * n2)  # (k, n1, n2) flattened
    if single and g_single:
        g_x = g_x[0]
    return g_b, g_c, g_x
