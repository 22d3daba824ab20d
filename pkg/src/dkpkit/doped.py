"""Doped layers: a Kronecker-factored matrix plus a sparse overlay.

The layer computes o = alpha * (B kron C) x + beta * M_sp x.  Three scaling
modes control which of alpha/beta are trainable, an optional per-output-row
Bernoulli dropout (applied independently to each branch's contribution)
breaks co-adaptation between the two branches during training, and a block
coordinate descent gate alternates which branch receives gradient updates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kron import KronFactorPair, kron_materialize, kron_matvec, kron_matvec_grad
from .overlay import SparseOverlay, overlay_matvec


class DopedMode(enum.Enum):
    PLAIN = "plain"                      # alpha and beta fixed at 1
    BETA_SCALED = "beta_scaled"          # trainable beta, |beta| regularized
    ALPHA_BETA_SCALED = "alpha_beta_scaled"  # trainable alpha and beta


class BcdPhase(enum.Enum):
    TRAIN_KP_ONLY = "kp"
    TRAIN_SP_ONLY = "sp"


class StaleCacheError(RuntimeError):
    """A backward pass was attempted after the layer mutated."""


@dataclass
class CmrMaskDraw:
    """One recorded pair of Bernoulli row masks, replayable in backward.

    ``bern1`` gates the Kronecker branch and ``bern2`` the overlay branch.
    Masks cover output rows; in batched calls they carry one row-mask per
    input vector, shape (batch, out_dim).
    """

    bern1: np.ndarray
    bern2: np.ndarray
    draw_id: int


@dataclass
class DopedLayer:
    kp: KronFactorPair
    overlay: SparseOverlay
    mode: DopedMode = DopedMode.PLAIN
    alpha: np.ndarray = field(default_factory=lambda: np.ones(1))
    beta: np.ndarray = field(default_factory=lambda: np.ones(1))
    cmr_keep_prob: float = 1.0
    _draw_counter: int = field(default=0, repr=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(1)
        if self.kp.shape != self.overlay.shape:
            raise ValueError(
                f"factor product shape {self.kp.shape} != overlay shape {self.overlay.shape}"
            )
        if not 0.0 < self.cmr_keep_prob <= 1.0:
            raise ValueError("keep probability must lie in (0, 1]")
        if self.mode is DopedMode.ALPHA_BETA_SCALED and self.alpha[0] == 0.0:
            raise ValueError("alpha must be nonzero in alpha/beta scaled mode")

    @property
    def out_dim(self) -> int:
        return self.kp.out_dim

    @property
    def in_dim(self) -> int:
        return self.kp.in_dim

    def trainable_scalars(self) -> tuple[bool, bool]:
        """(alpha trainable, beta trainable) for the current mode."""
        if self.mode is DopedMode.ALPHA_BETA_SCALED:
            return True, True
        if self.mode is DopedMode.BETA_SCALED:
            return False, True
        return False, False


@dataclass
class DkpCache:
    layer: DopedLayer
    x: np.ndarray
    kron_out: np.ndarray
    overlay_out: np.ndarray
    draw: CmrMaskDraw | None
    overlay_version: int
    single: bool


def dkp_forward(
    layer: DopedLayer,
    x: np.ndarray,
    training: bool,
    rng: np.random.Generator | None = None,
    mask_draw: CmrMaskDraw | None = None,
) -> tuple[np.ndarray, DkpCache]:
    """Forward pass through the doped layer.

    In training with keep probability p < 1, each output row's branch
    contributions are kept with probability p and scaled by 1/p (inverted
    dropout), so the evaluation pass needs no rescaling and equals the
    training pass in expectation.  With p = 1 or outside training the output
    is exactly alpha * (B kron C) x + beta * M_sp x.

    ``x`` may be one vector or a stack of row vectors; masks are drawn
    independently per row of the stack.  Pass ``mask_draw`` to replay a
    recorded draw instead of consuming ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    u = kron_matvec(layer.kp, x)
    v = overlay_matvec(layer.overlay, x)
    alpha = layer.alpha[0]
    beta = layer.beta[0]
    p = layer.cmr_keep_prob

    draw = None
    if training and (p < 1.0 or mask_draw is not None):
        if mask_draw is not None:
            draw = mask_draw
        else:
            if rng is None:
                raise ValueError("training with keep probability < 1 needs an rng")
            layer._draw_counter += 1
            shape = u.shape
            draw = CmrMaskDraw(
                bern1=(rng.random(shape) < p).astype(np.float64),
                bern2=(rng.random(shape) < p).astype(np.float64),
                draw_id=layer._draw_counter,
            )
        o = (alpha / p) * (u * draw.bern1) + (beta / p) * (v * draw.bern2)
    else:
        o = alpha * u + beta * v

    cache = DkpCache(
        layer=layer,
        x=x,
        kron_out=u,
        overlay_out=v,
        draw=draw,
        overlay_version=layer.overlay.version,
        single=single,
    )
    return o, cache


def dkp_backward(cache: DkpCache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the (possibly masked) forward pass.

    Returns a dict with keys b, c, overlay, alpha, beta, x.  Rows whose
    branch mask was 0 contribute nothing to that branch's gradients, and
    masked-out overlay positions always receive gradient 0.
    """
    layer = cache.layer
    if layer.overlay.version != cache.overlay_version:
        raise StaleCacheError("layer was pruned or updated after the cached forward")
    g_out = np.asarray(g_out, dtype=np.float64)
    alpha = layer.alpha[0]
    beta = layer.beta[0]
    p = layer.cmr_keep_prob

    if cache.draw is not None:
        g1 = g_out * cache.draw.bern1 / p  # upstream into the kron branch
        g2 = g_out * cache.draw.bern2 / p  # upstream into the overlay branch
    else:
        g1 = g_out
        g2 = g_out

    g_alpha = float(np.sum(g1 * cache.kron_out))
    g_beta = float(np.sum(g2 * cache.overlay_out))

    g_b, g_c, g_x = kron_matvec_grad(layer.kp, cache.x, alpha * g1)

    x2 = cache.x[None, :] if cache.single else cache.x
    gv = beta * (g2[None, :] if cache.single else g2)
    g_overlay = (gv.T @ x2) * layer.overlay.mask
    g_x = g_x + (gv @ layer.overlay.values).reshape(cache.x.shape)

    return {
        "b": g_b,
        "c": g_c,
        "overlay": g_overlay,
        "alpha": np.array([g_alpha]),
        "beta": np.array([g_beta]),
        "x": g_x,
    }


def regularization_loss(
    layer: DopedLayer, lambda_beta: float, lambda_alpha: float
) -> tuple[float, float, float]:
    """Scale regularizer for the current mode: (loss, g_alpha, g_beta).

    BETA_SCALED penalizes |beta|; ALPHA_BETA_SCALED additionally penalizes
    |1/alpha|, pushing the layer to lean on the Kronecker branch.  Uses the
    subgradient 0 at beta = 0.
    """
    if layer.mode is DopedMode.PLAIN:
        return 0.0, 0.0, 0.0
    beta = layer.beta[0]
    loss = lambda_beta * abs(beta)
    g_beta = lambda_beta * float(np.sign(beta))
    g_alpha = 0.0
    if layer.mode is DopedMode.ALPHA_BETA_SCALED:
        alpha = layer.alpha[0]
        if alpha == 0.0:
            raise ValueError("alpha must be nonzero in alpha/beta scaled mode")
        loss += lambda_alpha * abs(1.0 / alpha)
        g_alpha = -lambda_alpha * float(np.sign(alpha)) / alpha**2
    return loss, g_alpha, g_beta


def bcd_gate(step: int, period: int) -> BcdPhase:
    """Deterministic alternation: the first ``period`` steps train the
    Kronecker branch only, the next ``period`` the overlay branch only."""
    if period < 1:
        raise ValueError("period must be >= 1")
    return BcdPhase.TRAIN_KP_ONLY if (step // period) % 2 == 0 else BcdPhase.TRAIN_SP_ONLY


def cmr_keep_prob_schedule(
    base_p: float, current_sparsity: float, target_sparsity: float
) -> float:
    """Keep probability ramp: base_p while the overlay is dense, 1.0 once it
    reaches the target sparsity (row dropout fully disabled), linear between."""
    if not 0.0 < base_p <= 1.0:
        raise ValueError("base keep probability must lie in (0, 1]")
    if target_sparsity <= 0.0:
        return 1.0
    frac = min(max(current_sparsity / target_sparsity, 0.0), 1.0)
    if frac >= 1.0:
        return 1.0
    return base_p + (1.0 - base_p) * frac


def materialize_dense(layer: DopedLayer) -> np.ndarray:
    """Dense matrix the layer is equivalent to in evaluation mode."""
    return layer.alpha[0] * kron_materialize(layer.kp) + layer.beta[0] * layer.overlay.values
