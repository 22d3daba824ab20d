"""Experiment orchestration: build, train, evaluate, checkpoint, sweep.

A run is fully determined by (config, seed): corpus order is contiguous,
weight init and branch-mask draws come from two seeded generator streams, and
no artifact contains a timestamp.  Aborts on non-finite numbers keep the last
good checkpoints on disk.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import LowRankGate, LowRankPair, PrunedDense, PrunedGate, budget_match
from .checkpoint import Checkpoint, OverlayRecord, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, serialize_config
from .data import BatchIterator, Vocab, build_vocab, load_text
from .doped import (
    BcdPhase,
    DopedLayer,
    DopedMode,
    bcd_gate,
    cmr_keep_prob_schedule,
    regularization_loss,
)
from .kron import KronFactorPair, choose_factor_shapes, factor_param_count
from .nn import DenseGate, DopedGate, LmModel, NumericError, Optimizer, grad_check, init_lm_model
from .overlay import (
    PruneSchedule,
    SparseOverlay,
    active_count,
    prune_to_sparsity,
    schedule_sparsity,
)
from .report import CompressionReport, CurvePoint, gate_report, write_curves

GRADCHECK_GATE = 1e-5


@dataclass
class CompressionPlan:
    """Resolved per-run compression settings."""

    method: str
    hidden: int
    target_sparsity: float = 0.0
    kp_shapes: tuple | None = None
    rank: int = 0
    feasible: bool = True
    note: str = ""


def resolve_compression(cfg: TrainConfig) -> CompressionPlan:
    """Turn (method, factor, overrides) into concrete knob settings."""
    h = cfg.hidden_size
    gate_shape = (4 * h, 2 * h)
    method = cfg.method

    if method == "dense":
        if cfg.factor != 1.0:
            raise ConfigError("dense method supports factor = 1 only")
        return CompressionPlan(method=method, hidden=h)

    if method == "dkp":
        shapes = cfg.kp_shapes() or choose_factor_shapes(*gate_shape)
        b_shape, c_shape = shapes
        if (b_shape[0] * c_shape[0], b_shape[1] * c_shape[1]) != gate_shape:
            raise ConfigError(
                f"factor shapes {shapes} do not multiply to the gate shape {gate_shape}")
        kp_params = factor_param_count(b_shape, c_shape)
        if cfg.target_sparsity > 0.0:
            return CompressionPlan(method=method, hidden=h, kp_shapes=shapes,
                                   target_sparsity=cfg.target_sparsity)
        if cfg.factor == 1.0:
            return CompressionPlan(method=method, hidden=h, kp_shapes=shapes,
                                   target_sparsity=0.0)
        bm = budget_match(cfg.factor, gate_shape, "dkp", kp_params=kp_params)
        return CompressionPlan(method=method, hidden=h, kp_shapes=shapes,
                               target_sparsity=bm.settings["sparsity"],
                               feasible=bm.feasible, note=bm.note)

    if method == "prune":
        if cfg.target_sparsity > 0.0:
            return CompressionPlan(method=method, hidden=h,
                                   target_sparsity=cfg.target_sparsity)
        bm = budget_match(cfg.factor, gate_shape, "prune")
        return CompressionPlan(method=method, hidden=h,
                               target_sparsity=bm.settings["sparsity"],
                               feasible=bm.feasible, note=bm.note)

    if method == "lmf":
        bm = budget_match(cfg.factor, gate_shape, "lmf")
        return CompressionPlan(method=method, hidden=h, rank=bm.settings["rank"],
                               feasible=bm.feasible, note=bm.note)

    if method == "small":
        bm = budget_match(cfg.factor, gate_shape, "small")
        return CompressionPlan(method=method, hidden=bm.settings["hidden"],
                               feasible=bm.feasible, note=bm.note)

    raise ConfigError(f"unknown method {method!r}")


def make_gate_factory(cfg: TrainConfig, plan: CompressionPlan):
    """Gate constructor for the resolved plan; pruning happens during training."""
    preset = cfg.preset_spec()

    def factory(out_dim, in_dim, rng):
        if plan.method in ("dense", "small"):
            return DenseGate(rng.uniform(-0.05, 0.05, (out_dim, in_dim)))
        if plan.method == "dkp":
            b_shape, c_shape = plan.kp_shapes
            kp = KronFactorPair(b=rng.uniform(-0.05, 0.05, b_shape),
                                c=rng.uniform(-0.05, 0.05, c_shape))
            if cfg.overlay_init == "zeros":
                overlay = SparseOverlay.zeros(out_dim, in_dim)
            else:
                overlay = SparseOverlay.from_dense(
                    rng.uniform(-0.05, 0.05, (out_dim, in_dim)))
            return DopedGate(DopedLayer(kp=kp, overlay=overlay, mode=preset.mode))
        if plan.method == "prune":
            weights = SparseOverlay.from_dense(
                rng.uniform(-0.05, 0.05, (out_dim, in_dim)))
            return PrunedGate(PrunedDense(weights=weights))
        if plan.method == "lmf":
            pair = LowRankPair(u=rng.uniform(-0.05, 0.05, (out_dim, plan.rank)),
                               v=rng.uniform(-0.05, 0.05, (plan.rank, in_dim)))
            return LowRankGate(pair)
        raise ConfigError(f"unknown method {plan.method!r}")

    return factory


def build_model(cfg: TrainConfig, vocab_size: int, rng: np.random.Generator
                ) -> tuple[LmModel, CompressionPlan]:
    plan = resolve_compression(cfg)
    model = init_lm_model(
        vocab=vocab_size, hidden=plan.hidden, n_layers=cfg.num_layers,
        gate_factory=make_gate_factory(cfg, plan), rng=rng,
        tie=cfg.tie_embeddings, act_dropout=cfg.act_dropout)
    return model, plan


def doped_layers(model: LmModel) -> list[tuple[int, DopedLayer]]:
    return [(i, c.gate.layer) for i, c in enumerate(model.cells)
            if isinstance(c.gate, DopedGate)]


def masked_structures(model: LmModel) -> list[SparseOverlay]:
    """The prunable matrices: doped overlays and pruned-dense weights."""
    out = []
    for cell in model.cells:
        if isinstance(cell.gate, DopedGate):
            out.append(cell.gate.layer.overlay)
        elif isinstance(cell.gate, PrunedGate):
            out.append(cell.gate.pd.weights)
    return out


def branch_param_names(model: LmModel) -> tuple[set[str], set[str]]:
    """(kron-branch names, overlay-branch names) for gradient gating."""
    kp, sp = set(), set()
    for i, _ in doped_layers(model):
        kp.update({f"lstm{i}.gate.b", f"lstm{i}.gate.c", f"lstm{i}.gate.alpha"})
        sp.update({f"lstm{i}.gate.overlay", f"lstm{i}.gate.beta"})
    return kp, sp


def evaluate_ppl(model: LmModel, ids: np.ndarray, batch_size: int, bptt: int) -> float:
    it = BatchIterator(ids, batch_size=batch_size, bptt=bptt)
    state = model.init_state(it.batch_size)
    total, count = 0.0, 0
    for inputs, targets in it:
        loss, n, state, _ = model.forward_loss(inputs, targets, state, training=False)
        total += loss * n
        count += n
    return math.exp(total / count)


@dataclass
class RunResult:
    test_ppl: float
    report: CompressionReport
    curves: list[CurvePoint]
    out_dir: Path
    exit_code: int = 0
    plan: CompressionPlan | None = None


def _model_checkpoint(cfg: TrainConfig, model: LmModel, opt: Optimizer,
                      meta: dict) -> Checkpoint:
    masks = model.masks()
    tensors = {}
    overlays = {}
    for name, arr in model.params().items():
        if name in masks:
            overlays[name] = OverlayRecord.from_dense(arr, masks[name])
        else:
            tensors[name] = arr
    opt_slots = dict(opt.slots)
    meta = dict(meta)
    meta["opt_counts"] = {k: v for k, v in sorted(opt.counts.items())}
    return Checkpoint(config_text=serialize_config(cfg), meta=meta,
                      tensors=tensors, overlays=overlays, opt_slots=opt_slots)


def restore_model_params(model: LmModel, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors and overlays into a freshly built model."""
    params = model.params()
    for name, arr in ckpt.tensors.items():
        if name not in params:
            raise CheckpointMismatch(f"checkpoint tensor {name!r} not in model")
        if params[name].shape != arr.shape:
            raise CheckpointMismatch(
                f"shape mismatch for {name}: {params[name].shape} vs {arr.shape}")
        params[name][...] = arr
    masks = model.masks()
    for name, rec in ckpt.overlays.items():
        if name not in masks:
            raise CheckpointMismatch(f"checkpoint overlay {name!r} not in model")
        values, mask = rec.to_dense()
        target = _overlay_for_param(model, name)
        target.values[...] = values
        target.mask[...] = mask
        target._nnz = int(mask.sum())
        target.version += 1


class CheckpointMismatch(Exception):
    pass


def _overlay_for_param(model: LmModel, name: str) -> SparseOverlay:
    idx = int(name.split(".")[0].removeprefix("lstm"))
    gate = model.cells[idx].gate
    if isinstance(gate, DopedGate):
        return gate.layer.overlay
    if isinstance(gate, PrunedGate):
        return gate.pd.weights
    raise CheckpointMismatch(f"parameter {name!r} is not a masked matrix")


def load_corpora(cfg: TrainConfig) -> tuple[Vocab, np.ndarray, np.ndarray, np.ndarray]:
    for key in ("train_path", "valid_path", "test_path"):
        if not getattr(cfg, key):
            raise ConfigError(f"{key} is required")
    from .data import tokenize

    train_text = load_text(cfg.train_path)
    vocab = build_vocab(train_text, mode=cfg.vocab_mode, min_count=cfg.min_count)
    train_ids = vocab.encode(tokenize(train_text, cfg.vocab_mode))
    valid_ids = vocab.encode(tokenize(load_text(cfg.valid_path), cfg.vocab_mode))
    test_ids = vocab.encode(tokenize(load_text(cfg.test_path), cfg.vocab_mode))
    return vocab, train_ids, valid_ids, test_ids


def run_experiment(cfg: TrainConfig, out_dir) -> RunResult:
    """Train to the configured epochs, writing curves, report and checkpoints.

    Emits curves.csv, report.txt, final.ckpt and best.ckpt (by validation
    perplexity) under ``out_dir`` and returns the test perplexity of the best
    model.  A non-finite loss or gradient aborts with exit code 2, keeping
    the checkpoints already on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab, train_ids, valid_ids, test_ids = load_corpora(cfg)

    seed_root = np.random.SeedSequence(cfg.seed)
    init_seq, train_seq = seed_root.spawn(2)
    init_rng = np.random.default_rng(init_seq)
    train_rng = np.random.default_rng(train_seq)

    model, plan = build_model(cfg, vocab.size, init_rng)
    preset = cfg.preset_spec()
    opt = Optimizer(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum,
                    clip=cfg.clip)

    train_it = BatchIterator(train_ids, cfg.batch_size, cfg.bptt)
    spe = train_it.batches_per_epoch()
    total_steps = spe * cfg.epochs
    eval_every = max(spe // cfg.eval_per_epoch, 1)

    sched = None
    if plan.target_sparsity > 0.0 and cfg.epochs > 0:
        start = round(cfg.prune_start_epoch * spe)
        end = (round(cfg.prune_end_epoch * spe) if cfg.prune_end_epoch > 0
               else round(0.75 * total_steps))
        end = max(end, start + 1)
        sched = PruneSchedule(target_sparsity=plan.target_sparsity,
                              start_step=start, end_step=end,
                              exponent=cfg.prune_exponent)
    bcd_period = cfg.bcd_period if cfg.bcd_period > 0 else max(spe, 1)
    use_bcd = preset.bcd and plan.method == "dkp"
    use_cmr = preset.cmr and plan.method == "dkp"
    kp_names, sp_names = branch_param_names(model)
    structures = masked_structures(model)
    layers = doped_layers(model)

    points: list[CurvePoint] = []
    best_valid = math.inf
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    window_loss, window_tokens = 0.0, 0
    step = 0
    exit_code = 0
    cur_sparsity = structures[0].sparsity if structures else 0.0
    keep_prob = 1.0
    phase_name = ""

    def meta_now():
        return {"step": step, "sparsity": cur_sparsity, "keep_prob": keep_prob,
                "best_valid_ppl": None if math.isinf(best_valid) else best_valid,
                "rng_state": train_rng.bit_generator.state}

    try:
        for epoch in range(cfg.epochs):
            train_it.reset()
            state = model.init_state(train_it.batch_size)
            while (batch := train_it.next_batch()) is not None:
                if sched is not None:
                    s_t = schedule_sparsity(sched, step)
                    for st in structures:
                        if active_count(st.values.size, s_t) < st.nnz:
                            prune_to_sparsity(st, s_t)
                    cur_sparsity = structures[0].sparsity
                if use_cmr:
                    keep_prob = cmr_keep_prob_schedule(
                        cfg.base_keep_prob, cur_sparsity, plan.target_sparsity)
                    for _, layer in layers:
                        layer.cmr_keep_prob = keep_prob
                frozen: set[str] = set()
                phase_name = ""
                if use_bcd:
                    phase = bcd_gate(step, bcd_period)
                    frozen = sp_names if phase is BcdPhase.TRAIN_KP_ONLY else kp_names
                    phase_name = phase.value

                inputs, targets = batch
                loss, n, state, cache = model.forward_loss(
                    inputs, targets, state, training=True, rng=train_rng)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at step {step}")
                grads = model.backward(cache)
                for i, layer in layers:
                    _, g_alpha, g_beta = regularization_loss(
                        layer, cfg.lambda_beta, cfg.lambda_alpha)
                    a_key, b_key = f"lstm{i}.gate.alpha", f"lstm{i}.gate.beta"
                    if a_key in grads:
                        grads[a_key] = grads[a_key] + g_alpha
                    if b_key in grads:
                        grads[b_key] = grads[b_key] + g_beta
                opt.step(model.params(), grads, masks=model.masks(), frozen=frozen)
                window_loss += loss * n
                window_tokens += n
                step += 1

                if step % eval_every == 0 or step == total_steps:
                    train_ppl = math.exp(window_loss / window_tokens)
                    window_loss, window_tokens = 0.0, 0
                    valid_ppl = evaluate_ppl(model, valid_ids, cfg.batch_size, cfg.bptt)
                    points.append(CurvePoint(
                        epoch=epoch, step=step, train_ppl=train_ppl,
                        valid_ppl=valid_ppl, sparsity=cur_sparsity,
                        keep_prob=keep_prob, bcd_phase=phase_name))
                    if valid_ppl < best_valid:
                        best_valid = valid_ppl
                        save_checkpoint(best_path, _model_checkpoint(
                            cfg, model, opt, meta_now()))
            opt.lr *= cfg.lr_decay
    except NumericError as exc:
        exit_code = 2
        print(f"aborted: {exc}")

    save_checkpoint(final_path, _model_checkpoint(cfg, model, opt, meta_now()))
    write_curves(points, out_dir / "curves.csv")
    rep = gate_report(model)
    (out_dir / "report.txt").write_text(rep.render() + "\n", encoding="utf-8")

    if exit_code == 0:
        if best_path.exists():
            restore_model_params(model, load_checkpoint(best_path))
        test_ppl = evaluate_ppl(model, test_ids, cfg.batch_size, cfg.bptt)
    else:
        test_ppl = math.nan
    return RunResult(test_ppl=test_ppl, report=rep, curves=points,
                     out_dir=out_dir, exit_code=exit_code, plan=plan)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("method", "preset", "factor", "dense_params", "target_params",
                 "compressed_params", "within_pct", "test_ppl")


def sweep(cfg: TrainConfig, out_dir) -> Path:
    """Run the method x factor matrix and write a comparison CSV.

    Parallelism is capped by the DKPKIT_THREADS environment variable (each
    job is fully isolated: own seed streams, own output directory).  Rows
    are ordered by (method, factor) regardless of completion order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for method in cfg.sweep_method_list():
        for factor in cfg.sweep_factor_list():
            if method == "dense" and factor != 1.0:
                continue
            jobs.append((method, factor))

    def run_job(job):
        method, factor = job
        job_cfg = dataclasses.replace(cfg, method=method, factor=factor,
                                      target_sparsity=0.0)
        job_dir = out_dir / f"{method}_f{factor:g}"
        result = run_experiment(job_cfg, job_dir)
        dense = result.report.dense_params
        compressed = result.report.total_params
        target = dense / factor
        within = 100.0 * (compressed - target) / target
        return (method, cfg.preset if method == "dkp" else "", factor, dense,
                target, compressed, within, result.test_ppl)

    env = os.environ.get("DKPKIT_THREADS", "")
    workers = int(env) if env.strip() else min(len(jobs), os.cpu_count() or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        rows = [run_job(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_job, jobs))
    rows.sort(key=lambda r: (r[0], r[2]))

    path = out_dir / "sweep.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for method, preset, factor, dense, target, compressed, within, ppl in rows:
            fh.write(f"{method},{preset},{factor:g},{dense},{repr(float(target))},"
                     f"{compressed},{repr(float(within))},{repr(float(ppl))}\n")
    return path


# ---------------------------------------------------------------------------
# Gradient-check probe
# ---------------------------------------------------------------------------


def gradcheck_probe(cfg: TrainConfig, vocab: int = 11, hidden: int = 8,
                    bptt: int = 3, batch: int = 2, eps: float = 1e-6):
    """End-to-end finite-difference check on a small probe model.

    Uses the configured compression method at probe scale with the richest
    trainable surface (scaled mode, branch dropout active, masks frozen), so
    every gradient path is exercised: factors, overlay, scales, biases,
    embedding and projection.
    """
    probe_cfg = dataclasses.replace(
        cfg, hidden_size=hidden, factor=1.0, target_sparsity=0.0,
        preset="2b", kp_b_shape="", kp_c_shape="")
    if probe_cfg.method == "lmf":
        probe_cfg = dataclasses.replace(probe_cfg, factor=2.0)
    rng = np.random.default_rng(cfg.seed)
    model, plan = build_model(probe_cfg, vocab, rng)
    for _, layer in doped_layers(model):
        prune_to_sparsity(layer.overlay, 0.5)
        layer.cmr_keep_prob = 0.7
    inputs = rng.integers(0, vocab, size=(batch, bptt))
    targets = rng.integers(0, vocab, size=(batch, bptt))
    state = model.init_state(batch)
    _, _, _, cache = model.forward_loss(inputs, targets, state, training=True, rng=rng)
    analytic = model.backward(cache)
    for i, layer in doped_layers(model):
        _, g_alpha, g_beta = regularization_loss(layer, cfg.lambda_beta, cfg.lambda_alpha)
        analytic[f"lstm{i}.gate.alpha"] = analytic[f"lstm{i}.gate.alpha"] + g_alpha
        analytic[f"lstm{i}.gate.beta"] = analytic[f"lstm{i}.gate.beta"] + g_beta

    def loss_fn():
        st = model.init_state(batch)
        data_loss, _, _, _ = model.forward_loss(inputs, targets, st,
                                                training=True, replay=cache)
        reg = sum(regularization_loss(layer, cfg.lambda_beta, cfg.lambda_alpha)[0]
                  for _, layer in doped_layers(model))
        return data_loss + reg

    return grad_check(loss_fn, model.params(), analytic, eps=eps,
                      masks=model.masks())
