import numpy as np
import pytest

from dkpkit.doped import DopedLayer, DopedMode
from dkpkit.kron import KronFactorPair, kron_materialize
from dkpkit.nn import (
    DenseGate,
    DopedGate,
    GradCheckReport,
    LstmCell,
    NumericError,
    Optimizer,
    grad_check,
    init_lm_model,
    lstm_step,
    softmax_xent,
)
from dkpkit.overlay import SparseOverlay
from oracles import central_diff, rel_err


def doped_gate_factory(mode=DopedMode.PLAIN, p=1.0, overlay_scale=0.05):
    def factory(out_dim, in_dim, rng):
        kp = KronFactorPair(
            b=rng.uniform(-0.05, 0.05, (out_dim // 2, in_dim // 2)),
            c=rng.uniform(-0.05, 0.05, (2, 2)),
        )
        values = rng.uniform(-overlay_scale, overlay_scale, (out_dim, in_dim))
        return DopedGate(DopedLayer(
            kp=kp, overlay=SparseOverlay.from_dense(values), mode=mode, cmr_keep_prob=p
        ))
    return factory


def dense_gate_factory(out_dim, in_dim, rng):
    return DenseGate(rng.uniform(-0.05, 0.05, (out_dim, in_dim)))


# -- softmax cross entropy ---------------------------------------------------


def test_softmax_uniform_logits():
    loss, _ = softmax_xent(np.zeros(7), 3)
    assert loss == pytest.approx(np.log(7))


def test_softmax_saturated():
    logits = np.zeros(5)
    logits[2] = 1e6
    loss, _ = softmax_xent(logits, 2)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_gradient_matches_fd():
    rng = np.random.default_rng(40)
    logits = rng.standard_normal(9)
    _, g = softmax_xent(logits, 4)

    def loss():
        return softmax_xent(logits, 4)[0]

    fd = central_diff(loss, logits)
    assert rel_err(g, fd, floor=1e-6).max() < 1e-6


def test_softmax_target_out_of_range():
    with pytest.raises(ValueError):
        softmax_xent(np.zeros(3), 5)


def test_softmax_batch_sums_vector_losses():
    rng = np.random.default_rng(41)
    logits = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    total, g = softmax_xent(logits, targets)
    singles = [softmax_xent(logits[i], targets[i]) for i in range(4)]
    assert total == pytest.approx(sum(s[0] for s in singles))
    for i in range(4):
        np.testing.assert_allclose(g[i], singles[i][1], atol=1e-15)


# -- LSTM cell ---------------------------------------------------------------


def test_lstm_step_zero_weights_closed_form():
    h = 3
    cell = LstmCell(gate=DenseGate(np.zeros((4 * h, 2 * h))), bias=np.zeros(4 * h), hidden=h)
    z = np.ones(2 * h)
    c_prev = np.array([0.0, 1.0, -2.0])
    h_t, c_t, _ = lstm_step(cell, z, c_prev)
    np.testing.assert_allclose(c_t, c_prev / 2)
    np.testing.assert_allclose(h_t, 0.5 * np.tanh(c_prev / 2))
    h_t0, c_t0, _ = lstm_step(cell, z, np.zeros(h))
    np.testing.assert_array_equal(h_t0, np.zeros(h))
    np.testing.assert_array_equal(c_t0, np.zeros(h))


def test_lstm_dense_vs_doped_p1_identical():
    rng = np.random.default_rng(42)
    h = 4
    w = rng.uniform(-0.3, 0.3, (4 * h, 2 * h))
    kp = KronFactorPair(b=rng.uniform(-0.2, 0.2, (8, 4)), c=rng.uniform(-0.2, 0.2, (2, 2)))
    overlay = SparseOverlay.from_dense(w - kron_materialize(kp))
    bias = rng.uniform(-0.1, 0.1, 4 * h)
    dense_cell = LstmCell(gate=DenseGate(w), bias=bias.copy(), hidden=h)
    doped_cell = LstmCell(gate=DopedGate(DopedLayer(kp=kp, overlay=overlay)),
                          bias=bias.copy(), hidden=h)
    z = rng.standard_normal((5, 2 * h))
    c_prev = rng.standard_normal((5, h))
    h_a, c_a, _ = lstm_step(dense_cell, z, c_prev)
    h_b, c_b, _ = lstm_step(doped_cell, z, c_prev)
    assert np.max(np.abs(h_a - h_b)) < 1e-12
    assert np.max(np.abs(c_a - c_b)) < 1e-12


def model_loss_closure(model, inputs, targets, training=False, replay=None):
    def loss():
        state = model.init_state(inputs.shape[0])
        l, _, _, _ = model.forward_loss(inputs, targets, state,
                                        training=training, replay=replay)
        return l
    return loss


def test_unrolled_sequence_gradient_check():
    rng = np.random.default_rng(43)
    model = init_lm_model(vocab=7, hidden=4, n_layers=2,
                          gate_factory=doped_gate_factory(), rng=rng)
    inputs = rng.integers(0, 7, size=(2, 3))
    targets = rng.integers(0, 7, size=(2, 3))
    state = model.init_state(2)
    _, _, _, cache = model.forward_loss(inputs, targets, state, training=True)
    analytic = model.backward(cache)
    report = grad_check(model_loss_closure(model, inputs, targets, training=True),
                        model.params(), analytic, eps=1e-6, masks=model.masks())
    assert report.max_rel < 1e-5, report.render()


def test_gradient_check_with_frozen_cmr_and_dropout():
    rng = np.random.default_rng(44)
    model = init_lm_model(vocab=6, hidden=4, n_layers=1,
                          gate_factory=doped_gate_factory(mode=DopedMode.ALPHA_BETA_SCALED, p=0.6),
                          rng=rng, act_dropout=0.3)
    inputs = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 6, size=(2, 3))
    state = model.init_state(2)
    _, _, _, cache = model.forward_loss(inputs, targets, state, training=True, rng=rng)
    analytic = model.backward(cache)
    report = grad_check(
        model_loss_closure(model, inputs, targets, training=True, replay=cache),
        model.params(), analytic, eps=1e-6, masks=model.masks())
    assert report.max_rel < 1e-5, report.render()


def test_gradient_check_tied_embeddings():
    rng = np.random.default_rng(45)
    model = init_lm_model(vocab=6, hidden=4, n_layers=1,
                          gate_factory=dense_gate_factory, rng=rng, tie=True)
    assert model.out_w is model.embedding
    inputs = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 6, size=(2, 3))
    state = model.init_state(2)
    _, _, _, cache = model.forward_loss(inputs, targets, state)
    analytic = model.backward(cache)
    report = grad_check(model_loss_closure(model, inputs, targets),
                        model.params(), analytic, eps=1e-6)
    assert report.max_rel < 1e-5, report.render()
    assert "out.w" not in model.params()


def test_model_forward_matches_dense_swap():
    # A doped gate with p=1, dense overlay and unit scales must be swappable
    # for its materialized dense matrix without changing any forward output.
    rng = np.random.default_rng(46)
    model = init_lm_model(vocab=9, hidden=6, n_layers=2,
                          gate_factory=doped_gate_factory(), rng=rng)
    dense_model = init_lm_model(vocab=9, hidden=6, n_layers=2,
                                gate_factory=dense_gate_factory,
                                rng=np.random.default_rng(0))
    dense_model.embedding[...] = model.embedding
    dense_model.out_w[...] = model.out_w
    dense_model.out_b[...] = model.out_b
    for cell_d, cell_k in zip(dense_model.cells, model.cells):
        layer = cell_k.gate.layer
        cell_d.gate.w[...] = kron_materialize(layer.kp) + layer.overlay.values
        cell_d.bias[...] = cell_k.bias
    inputs = rng.integers(0, 9, size=(3, 5))
    targets = rng.integers(0, 9, size=(3, 5))
    la, _, state_a, _ = model.forward_loss(inputs, targets, model.init_state(3))
    lb, _, state_b, _ = dense_model.forward_loss(inputs, targets, dense_model.init_state(3))
    assert abs(la - lb) < 1e-10
    for (ha, ca), (hb, cb) in zip(state_a, state_b):
        assert np.max(np.abs(ha - hb)) < 1e-10
        assert np.max(np.abs(ca - cb)) < 1e-10


def test_forward_determinism():
    rng_data = np.random.default_rng(47)
    inputs = rng_data.integers(0, 8, size=(2, 4))
    targets = rng_data.integers(0, 8, size=(2, 4))
    losses = []
    for _ in range(2):
        rng = np.random.default_rng(123)
        model = init_lm_model(vocab=8, hidden=4, n_layers=1,
                              gate_factory=doped_gate_factory(p=0.7), rng=rng)
        opt = Optimizer(kind="adam", lr=1e-2, clip=1.0)
        stream = []
        state = model.init_state(2)
        for _step in range(5):
            loss, _, state, cache = model.forward_loss(
                inputs, targets, state, training=True, rng=rng)
            grads = model.backward(cache)
            opt.step(model.params(), grads, masks=model.masks())
            stream.append(loss)
        losses.append(stream)
    assert losses[0] == losses[1]


# -- optimizers ----------------------------------------------------------------


def test_optimizer_zero_lr_keeps_params():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, 0.5, 0.5])}
    Optimizer(kind="sgd", lr=0.0).step(p, g)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])


def test_optimizer_plain_sgd_exact():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.25, -0.5])}
    Optimizer(kind="sgd", lr=0.1).step(p, g)
    np.testing.assert_array_equal(p["w"], [1.0 - 0.1 * 0.25, 2.0 + 0.1 * 0.5])


def test_optimizer_adam_first_step_closed_form():
    g0 = np.array([0.3, -0.7, 2.0])
    p = {"w": np.zeros(3)}
    opt = Optimizer(kind="adam", lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step(p, {"w": g0.copy()})
    # After bias correction the first update is lr * g / (|g| + eps).
    want = -0.01 * g0 / (np.abs(g0) + 1e-8)
    np.testing.assert_allclose(p["w"], want, rtol=1e-12)


def test_optimizer_momentum_accumulates():
    p = {"w": np.zeros(1)}
    opt = Optimizer(kind="momentum", lr=1.0, momentum=0.5)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-1.0)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-1.0 - 1.5)


def test_optimizer_clips_global_norm():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    opt = Optimizer(kind="sgd", lr=1.0, clip=1.0)
    norm = opt.step(p, g)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(p["a"], [-3.0 / 5.0])
    np.testing.assert_allclose(p["b"], [-4.0 / 5.0])


def test_optimizer_rejects_nan():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericError, match="w"):
        Optimizer().step(p, {"w": np.array([1.0, np.nan])})


def test_optimizer_frozen_tensors_bit_identical():
    rng = np.random.default_rng(48)
    p = {"kp": rng.standard_normal(4), "sp": rng.standard_normal(4)}
    before = p["sp"].copy()
    opt = Optimizer(kind="adam", lr=0.1)
    for _ in range(3):
        g = {"kp": rng.standard_normal(4), "sp": rng.standard_normal(4)}
        opt.step(p, g, frozen={"sp"})
    assert p["sp"].tobytes() == before.tobytes()
    assert "sp.m" not in opt.slots


def test_optimizer_masked_entries_stay_zero():
    mask = np.array([[True, False], [False, True]])
    p = {"w": np.where(mask, 1.0, 0.0)}
    opt = Optimizer(kind="adam", lr=0.5)
    for _ in range(4):
        opt.step(p, {"w": np.ones((2, 2))}, masks={"w": mask})
    assert not p["w"][~mask].any()
    assert p["w"][mask].all()


# -- gradient checker ----------------------------------------------------------


def test_grad_check_linear_quadratic_exact():
    rng = np.random.default_rng(49)
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal(4)

    def loss():
        y = w @ x
        return 0.5 * float(y @ y)

    analytic = {"w": np.outer(w @ x, x)}
    report = grad_check(loss, {"w": w}, analytic, eps=1e-6)
    assert report.max_rel < 1e-8


def test_grad_check_flags_corrupted_gradient():
    rng = np.random.default_rng(50)
    w = rng.standard_normal((2, 2))
    x = rng.standard_normal(2)

    def loss():
        y = w @ x
        return 0.5 * float(y @ y)

    bad = np.outer(w @ x, x)
    bad[0, 0] *= 2.0
    report = grad_check(loss, {"w": w}, {"w": bad}, eps=1e-6)
    assert report.max_rel > 1e-3
    name, _ = report.worst()
    assert name == "w"


def test_grad_check_report_render():
    report = GradCheckReport(per_tensor={"w": (1e-7, 1e-8)})
    text = report.render()
    assert "w" in text and "1.000e-07" in text
