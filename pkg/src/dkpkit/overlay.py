"""Sparse overlay matrices: dense-to-sparse lifecycle via gradual magnitude pruning.

An overlay starts dense (or zero) and is pruned down to a target sparsity over
a step schedule.  Training-time storage is dense-with-mask so pruning can rank
the magnitudes of every live entry; a packed coordinate list exists only in
checkpoints.  Pruned positions are zeroed, masked out, and never regrow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kron import require_matrix


@dataclass
class SparseOverlay:
    """Dense buffer plus binary mask; inactive positions hold exactly 0.

    ``version`` increments on every mutation so forward caches taken before a
    prune or update can be detected as stale.
    """

    values: np.ndarray
    mask: np.ndarray
    version: int = 0
    _nnz: int = field(default=-1, repr=False)

    def __post_init__(self):
        self.values = require_matrix(self.values, "overlay values")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValueError("mask shape must match values shape")
        self.values[~self.mask] = 0.0
        self._nnz = int(self.mask.sum())

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "SparseOverlay":
        return cls(values=np.zeros((rows, cols)), mask=np.ones((rows, cols), dtype=bool))

    @classmethod
    def from_dense(cls, values: np.ndarray) -> "SparseOverlay":
        values = require_matrix(values, "overlay values")
        return cls(values=values, mask=np.ones(values.shape, dtype=bool))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def nnz(self) -> int:
        return self._nnz

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.values.size

    def check_invariants(self):
        assert self._nnz == int(self.mask.sum())
        assert not self.values[~self.mask].any(), "inactive positions must be exactly 0"


@dataclass
class PruneSchedule:
    """Sparsity ramp from 0 at ``start_step`` to ``target_sparsity`` at ``end_step``."""

    target_sparsity: float
    start_step: int
    end_step: int
    exponent: int = 3

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity <= 1.0:
            raise ValueError("target_sparsity must lie in [0, 1]")
        if self.start_step >= self.end_step:
            raise ValueError("start_step must precede end_step")
        if self.exponent < 1:
            raise ValueError("exponent must be >= 1")


def schedule_sparsity(sched: PruneSchedule, step: int) -> float:
    """Scheduled sparsity at ``step``: a monotone polynomial ramp.

    0 at or before start_step; exactly target_sparsity at or after end_step;
    in between, s(t) = target * (1 - (1 - u)^exponent) with
    u = (t - start) / (end - start).
    """
    if step <= sched.start_step:
        return 0.0
    if step >= sched.end_step:
        return sched.target_sparsity
    u = (step - sched.start_step) / (sched.end_step - sched.start_step)
    return sched.target_sparsity * (1.0 - (1.0 - u) ** sched.exponent)


def active_count(size: int, sparsity: float) -> int:
    """Entries left active by a sparsity level: ceil((1 - sparsity) * size).

    Rounds away float noise (e.g. (1 - 0.95) * 400 = 20.000000000000018)
    before taking the ceiling, so exact targets keep exact counts.
    """
    return math.ceil(round((1.0 - sparsity) * size, 9))


def prune_to_sparsity(m: SparseOverlay, s: float) -> SparseOverlay:
    """Prune the overlay in place so only the largest-magnitude entries survive.

    Exactly ceil((1-s) * rows * cols) entries stay active; pruning is
    permanent (the mask only shrinks) and survivors are chosen among the
    currently active entries by global magnitude, ties broken by position for
    determinism.  Returns the same object.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    keep = active_count(m.values.size, s)
    if keep > m.nnz:
        raise ValueError(
            f"cannot decrease sparsity: {keep} entries requested, {m.nnz} active"
        )
    if keep == m.nnz:
        return m
    flat_mag = np.abs(m.values.reshape(-1))
    flat_mag[~m.mask.reshape(-1)] = -1.0  # already-pruned entries never compete
    # argsort ascending, stable: the last `keep` indices are the survivors,
    # with ties resolved toward lower flat index surviving last (deterministic).
    order = np.argsort(flat_mag, kind="stable")
    new_mask = np.zeros(m.values.size, dtype=bool)
    if keep > 0:
        new_mask[order[-keep:]] = True
    m.mask = new_mask.reshape(m.values.shape)
    m.values[~m.mask] = 0.0
    m._nnz = keep
    m.version += 1
    return m


def overlay_matvec(m: SparseOverlay, x: np.ndarray) -> np.ndarray:
    """Multiply the masked overlay by ``x`` (a vector or stack of row vectors)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.cols:
        raise ValueError(f"x must have length {m.cols}, got shape {x.shape}")
    # Inactive positions are exactly 0, so the raw buffer is the masked matrix.
    return x @ m.values.T


def overlay_apply_grad(m: SparseOverlay, g: np.ndarray, lr: float) -> SparseOverlay:
    """Plain gradient step on the active entries: values -= lr * g, masked.

    Masked positions stay exactly 0 regardless of ``g``.  Returns the same
    object, mutated in place.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != m.values.shape:
        raise ValueError(f"gradient shape {g.shape} != overlay shape {m.values.shape}")
    m.values -= lr * np.where(m.mask, g, 0.0)
    m.values[~m.mask] = 0.0
    m.version += 1
    return m
