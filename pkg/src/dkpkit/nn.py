"""Hand-differentiated language-model stack.

Embedding, LSTM cells whose stacked gate matrix is routed through a pluggable
compressed layer, output projection, softmax cross-entropy, SGD/momentum and
Adam optimizers with global-norm clipping, and a central finite-difference
gradient checker.  Backpropagation is derived per operation; there is no
autograd tape.  All training math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .doped import CmrMaskDraw, DopedLayer, dkp_backward, dkp_forward


class NumericError(RuntimeError):
    """Non-finite values reached the optimizer; the run cannot continue."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_xent(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Cross-entropy of a softmax distribution against an index target.

    Accepts one logits vector with an int target, or a (batch, vocab) stack
    with an index array; the batched form returns the summed loss.  Gradient
    is softmax(logits) - one_hot(target), computed in log-sum-exp form.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if np.any(t < 0) or np.any(t >= z.shape[1]):
        raise ValueError("target index out of range")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(np.sum(lse.ravel() - shifted[np.arange(z.shape[0]), t]))
    g = np.exp(shifted - lse)
    g[np.arange(z.shape[0]), t] -= 1.0
    return loss, (g[0] if single else g)


# ---------------------------------------------------------------------------
# Gate adapters: uniform forward/backward interface over compressed layers.
# ---------------------------------------------------------------------------


class DenseGate:
    """Uncompressed gate matrix; the reference path every variant must match."""

    def __init__(self, w: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    def forward(self, z, training=False, rng=None, replay=None):
        return z @ self.w.T, z

    def backward(self, cache, da):
        z = cache
        return da @ self.w, {"w": da.T @ z}

    def params(self):
        return {"w": self.w}

    def masks(self):
        return {}

    def param_count(self) -> int:
        return self.w.size


class DopedGate:
    """Kronecker-plus-overlay gate; thin adapter over the doped layer ops."""

    def __init__(self, layer: DopedLayer):
        self.layer = layer

    @property
    def out_dim(self) -> int:
        return self.layer.out_dim

    @property
    def in_dim(self) -> int:
        return self.layer.in_dim

    def forward(self, z, training=False, rng=None, replay=None):
        return dkp_forward(self.layer, z, training=training, rng=rng, mask_draw=replay)

    def backward(self, cache, da):
        grads = dkp_backward(cache, da)
        dz = grads.pop("x")
        train_alpha, train_beta = self.layer.trainable_scalars()
        if not train_alpha:
            grads.pop("alpha")
        if not train_beta:
            grads.pop("beta")
        return dz, grads

    def params(self):
        out = {"b": self.layer.kp.b, "c": self.layer.kp.c, "overlay": self.layer.overlay.values}
        train_alpha, train_beta = self.layer.trainable_scalars()
        if train_alpha:
            out["alpha"] = self.layer.alpha
        if train_beta:
            out["beta"] = self.layer.beta
        return out

    def masks(self):
        return {"overlay": self.layer.overlay.mask}

    def param_count(self) -> int:
        return self.layer.kp.param_count + self.layer.overlay.nnz


# ---------------------------------------------------------------------------
# LSTM cell and model
# ---------------------------------------------------------------------------


@dataclass
class LstmCell:
    """One LSTM layer: a 4h x 2h gate matrix (any adapter) plus bias.

    Gate order in the stacked preactivation is [input, forget, cell, output];
    the forget-gate bias block is initialized to 1.
    """

    gate: object
    bias: np.ndarray
    hidden: int

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.gate.out_dim != 4 * self.hidden or self.gate.in_dim != 2 * self.hidden:
            raise ValueError(
                f"gate must map 2h -> 4h for h={self.hidden}, got "
                f"{self.gate.in_dim} -> {self.gate.out_dim}"
            )
        if self.bias.shape != (4 * self.hidden,):
            raise ValueError("bias must have length 4h")


def lstm_step(cell: LstmCell, z: np.ndarray, c_prev: np.ndarray,
              training=False, rng=None, replay=None):
    """One LSTM step on the concatenated input z = [x_t, h_prev].

    Returns (h_t, c_t, cache).  Standard gate equations with the 4h x 2h
    multiply routed through the cell's gate adapter:

        i = sig(a_i)  f = sig(a_f)  g = tanh(a_g)  o = sig(a_o)
        c_t = f * c_prev + i * g    h_t = o * tanh(c_t)
    """
    h = cell.hidden
    a, gate_cache = cell.gate.forward(z, training=training, rng=rng, replay=replay)
    a = a + cell.bias
    i = sigmoid(a[..., 0 * h:1 * h])
    f = sigmoid(a[..., 1 * h:2 * h])
    g = np.tanh(a[..., 2 * h:3 * h])
    o = sigmoid(a[..., 3 * h:4 * h])
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = (gate_cache, i, f, g, o, c_prev, tanh_c)
    return h_t, c_t, cache


def lstm_step_backward(cell: LstmCell, cache, dh, dc):
    """Backward through one LSTM step.

    ``dh``/``dc`` are the gradients flowing into h_t and c_t.  Returns
    (dz, dc_prev, gate_grads, dbias).
    """
    gate_cache, i, f, g, o, c_prev, tanh_c = cache
    dc = dc + dh * o * (1.0 - tanh_c**2)
    da_o = dh * tanh_c * o * (1.0 - o)
    da_f = dc * c_prev * f * (1.0 - f)
    da_i = dc * g * i * (1.0 - i)
    da_g = dc * i * (1.0 - g**2)
    dc_prev = dc * f
    da = np.concatenate([da_i, da_f, da_g, da_o], axis=-1)
    dbias = da.sum(axis=0) if da.ndim == 2 else da
    dz, gate_grads = cell.gate.backward(gate_cache, da)
    return dz, dc_prev, gate_grads, dbias


@dataclass
class LmModel:
    """Embedding + stacked LSTM cells + output projection.

    Compression applies to the LSTM gate matrices only; embedding and
    projection stay dense.  With ``tie`` set the projection weight is the
    embedding matrix itself.
    """

    embedding: np.ndarray
    cells: list[LstmCell]
    out_w: np.ndarray
    out_b: np.ndarray
    tie: bool = False
    act_dropout: float = 0.0

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden(self) -> int:
        return self.embedding.shape[1]

    def projection(self) -> np.ndarray:
        return self.embedding if self.tie else self.out_w

    def params(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for idx, cell in enumerate(self.cells):
            for name, arr in cell.gate.params().items():
                out[f"lstm{idx}.gate.{name}"] = arr
            out[f"lstm{idx}.bias"] = cell.bias
        if not self.tie:
            out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        return out

    def masks(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, cell in enumerate(self.cells):
            for name, mask in cell.gate.masks().items():
                out[f"lstm{idx}.gate.{name}"] = mask
        return out

    def init_state(self, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        h = self.hidden
        return [(np.zeros((batch, h)), np.zeros((batch, h))) for _ in self.cells]

    def forward_loss(self, inputs, targets, state, training=False, rng=None, replay=None):
        """Mean cross-entropy over a (batch, steps) window of token ids.

        Returns (mean_loss, n_tokens, new_state, cache).  ``state`` carries
        (h, c) per layer between windows; gradients never flow across window
        boundaries.  ``replay`` re-applies the dropout and branch-mask draws
        recorded in a previous cache, for deterministic re-evaluation.
        """
        inputs = np.asarray(inputs, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        batch, steps = inputs.shape
        n_tokens = batch * steps
        proj = self.projection()
        hs = [h for h, _ in state]
        cs = [c for _, c in state]
        use_drop = training and self.act_dropout > 0.0
        keep = 1.0 - self.act_dropout

        step_caches = []
        total_loss = 0.0
        for t in range(steps):
            x = self.embedding[inputs[:, t]]
            drop_masks = []
            gate_replays = replay.draws[t] if replay is not None else [None] * len(self.cells)
            if use_drop:
                if replay is not None:
                    mask = replay.drop_masks[t][0]
                else:
                    mask = (rng.random(x.shape) < keep) / keep
                x = x * mask
                drop_masks.append(mask)
            layer_caches = []
            inp = x
            for idx, cell in enumerate(self.cells):
                z = np.concatenate([inp, hs[idx]], axis=1)
                h_t, c_t, cache = lstm_step(
                    cell, z, cs[idx], training=training, rng=rng, replay=gate_replays[idx]
                )
                hs[idx] = h_t
                cs[idx] = c_t
                out = h_t
                if use_drop:
                    if replay is not None:
                        mask = replay.drop_masks[t][idx + 1]
                    else:
                        mask = (rng.random(out.shape) < keep) / keep
                    out = out * mask
                    drop_masks.append(mask)
                layer_caches.append((cache, z))
                inp = out
            logits = inp @ proj.T + self.out_b
            loss, dlogits = softmax_xent(logits, targets[:, t])
            total_loss += loss
            step_caches.append(_StepCache(
                token_ids=inputs[:, t],
                layer_caches=layer_caches,
                top=inp,
                dlogits=dlogits / n_tokens,
                drop_masks=drop_masks,
                draws=[lc[0][0].draw if isinstance(cell.gate, DopedGate) else None
                       for lc, cell in zip(layer_caches, self.cells)],
            ))
        new_state = list(zip(hs, cs))
        cache = _WindowCache(
            steps=steps,
            batch=batch,
            step_caches=step_caches,
            draws=[sc.draws for sc in step_caches],
            drop_masks=[sc.drop_masks for sc in step_caches],
        )
        return total_loss / n_tokens, n_tokens, new_state, cache

    def backward(self, cache) -> dict[str, np.ndarray]:
        """Gradients of the window's mean loss for every trainable tensor."""
        params = self.params()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        proj = self.projection()
        proj_key = "embedding" if self.tie else "out.w"
        L = len(self.cells)
        h = self.hidden
        dh_next = [np.zeros((cache.batch, h)) for _ in range(L)]
        dc_next = [np.zeros((cache.batch, h)) for _ in range(L)]

        for sc in reversed(cache.step_caches):
            dlogits = sc.dlogits
            grads[proj_key] += dlogits.T @ sc.top
            grads["out.b"] += dlogits.sum(axis=0)
            carry = dlogits @ proj
            for idx in range(L - 1, -1, -1):
                if sc.drop_masks:
                    carry = carry * sc.drop_masks[idx + 1]
                step_cache, z = sc.layer_caches[idx]
                dh = dh_next[idx] + carry
                dz, dc_prev, gate_grads, dbias = lstm_step_backward(
                    self.cells[idx], step_cache, dh, dc_next[idx]
                )
                for name, g in gate_grads.items():
                    grads[f"lstm{idx}.gate.{name}"] += g
                grads[f"lstm{idx}.bias"] += dbias
                dh_next[idx] = dz[:, h:]
                dc_next[idx] = dc_prev
                carry = dz[:, :h]
            if sc.drop_masks:
                carry = carry * sc.drop_masks[0]
            np.add.at(grads["embedding"], sc.token_ids, carry)
        for name, mask in self.masks().items():
            grads[name] *= mask
        return grads

    def param_count_breakdown(self) -> dict[str, int]:
        """Logical (nonzero) parameter counts per component."""
        out = {"embedding": self.embedding.size}
        for idx, cell in enumerate(self.cells):
            out[f"lstm{idx}.gate"] = cell.gate.param_count()
            out[f"lstm{idx}.bias"] = cell.bias.size
        out["out.w"] = 0 if self.tie else self.out_w.size
        out["out.b"] = self.out_b.size
        return out


@dataclass
class _StepCache:
    token_ids: np.ndarray
    layer_caches: list
    top: np.ndarray
    dlogits: np.ndarray
    drop_masks: list
    draws: list


@dataclass
class _WindowCache:
    steps: int
    batch: int
    step_caches: list
    draws: list
    drop_masks: list


def init_lm_model(vocab: int, hidden: int, n_layers: int, gate_factory,
                  rng: np.random.Generator, tie: bool = False,
                  act_dropout: float = 0.0, init_scale: float = 0.05) -> LmModel:
    """Build a model with uniform(-init_scale, init_scale) dense weights.

    ``gate_factory(out_dim, in_dim, rng)`` supplies the per-layer gate
    adapter.  Biases start at zero except the forget-gate block at 1.
    """
    def uni(shape):
        return rng.uniform(-init_scale, init_scale, size=shape)

    embedding = uni((vocab, hidden))
    cells = []
    for _ in range(n_layers):
        gate = gate_factory(4 * hidden, 2 * hidden, rng)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        cells.append(LstmCell(gate=gate, bias=bias, hidden=hidden))
    out_w = embedding if tie else uni((vocab, hidden))
    out_b = np.zeros(vocab)
    return LmModel(embedding=embedding, cells=cells, out_w=out_w, out_b=out_b,
                   tie=tie, act_dropout=act_dropout)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Mutable per-run training state; (seed, config) determine it fully."""

    step: int = 0
    sparsity: float = 0.0
    keep_prob: float = 1.0
    rng: np.random.Generator | None = None


class Optimizer:
    """SGD, SGD-with-momentum or Adam over named parameter tensors.

    Gradients are clipped to a global norm first; non-finite gradients abort
    with NumericError.  Frozen tensors are skipped entirely (no moment decay,
    no step-count advance), so a gated branch stays bit-identical.  Tensors
    with a mask have their updates and moments masked so dead entries remain
    exactly zero.
    """

    def __init__(self, kind: str = "sgd", lr: float = 0.1, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float = 0.0):
        if kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer kind: {kind}")
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.slots: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def _slot(self, name: str, like: np.ndarray) -> np.ndarray:
        if name not in self.slots:
            self.slots[name] = np.zeros_like(like)
        return self.slots[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             masks: dict[str, np.ndarray] | None = None,
             frozen: set[str] | frozenset[str] = frozenset()) -> float:
        masks = masks or {}
        active = [k for k in params if k in grads and k not in frozen]
        sq = 0.0
        for k in active:
            g = grads[k]
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in tensor '{k}'")
            sq += float(np.sum(g * g))
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.clip > 0.0 and norm > self.clip:
            scale = self.clip / norm

        for k in active:
            p = params[k]
            g = grads[k] * scale
            mask = masks.get(k)
            if mask is not None:
                g = g * mask
            if self.kind == "sgd":
                upd = self.lr * g
            elif self.kind == "momentum":
                buf = self._slot(k + ".m", p)
                buf *= self.momentum
                buf += g
                if mask is not None:
                    buf *= mask
                upd = self.lr * buf
            else:
                m = self._slot(k + ".m", p)
                v = self._slot(k + ".v", p)
                t = self.counts.get(k, 0) + 1
                self.counts[k] = t
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                if mask is not None:
                    m *= mask
                    v *= mask
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                upd = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if mask is not None:
                upd = upd * mask
            p -= upd
            if mask is not None:
                p[~mask] = 0.0
        return norm


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_tensor: dict[str, tuple[float, float]]  # name -> (max rel err, mean rel err)

    @property
    def max_rel(self) -> float:
        return max((v[0] for v in self.per_tensor.values()), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.per_tensor, key=lambda k: self.per_tensor[k][0])
        return name, self.per_tensor[name][0]

    def render(self) -> str:
        lines = [f"{'tensor':24s} {'max rel err':>14s} {'mean rel err':>14s}"]
        for name, (mx, mean) in self.per_tensor.items():
            lines.append(f"{name:24s} {mx:14.3e} {mean:14.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, params: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], eps: float = 1e-6,
               masks: dict[str, np.ndarray] | None = None,
               floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must re-evaluate the loss deterministically (any stochastic
    masks frozen).  Entries of masked tensors that are masked out are
    structurally dead and skipped.  Relative error per entry is
    |a - n| / max(|a|, |n|, floor); the floor turns the comparison into an
    absolute one for gradients far below the loss scale, where central
    differences at 64-bit precision cannot resolve a relative error (their
    roundoff noise is about |loss| * 1e-16 / eps).
    """
    masks = masks or {}
    report = {}
    for name, p in params.items():
        ana = analytic[name].reshape(-1)
        flat = p.reshape(-1)
        live = masks[name].reshape(-1) if name in masks else None
        errs = []
        for i in range(flat.size):
            if live is not None and not live[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn()
            flat[i] = orig - eps
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(num), floor)
            errs.append(abs(ana[i] - num) / denom)
        errs = np.asarray(errs) if errs else np.zeros(1)
        report[name] = (float(errs.max()), float(errs.mean()))
    return GradCheckReport(per_tensor=report)
