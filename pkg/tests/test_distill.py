import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_distill.distill.losses import (
    cosine_loss, cosine_loss_grad, distill_loss, distill_loss_grad, entropy, mse_loss_grad, softmax,
)
from splat_distill.distill.model import EncoderConfig, HeadConfig, ModelParams, encode, head_logits, init_params
from splat_distill.distill.optim import adam_update, ema_update
from splat_distill.distill.train import TrainSettings, TrainState, loss_and_grad, sgd_adam_step

FD_STEP = 1e-5


def small_setup(rng, loss_kind):
    p = int(rng.integers(1, 4))
    enc = EncoderConfig(image_size=2 * p, patch_size=p, channels_in=int(rng.integers(1, 4)),
                        embed_dim=int(rng.integers(2, 6)), hidden_dim=int(rng.integers(2, 7)),
                        pos_embed=bool(rng.integers(2)))
    head = HeadConfig(hidden=int(rng.integers(2, 7)), bottleneck=int(rng.integers(2, 5)),
                      prototypes=int(rng.integers(4, 9)))
    s = TrainSettings(encoder=enc, head=head, loss=loss_kind, head_mode="ema")
    student = init_params(enc, head, rng)
    student.vector[...] += 0.1 * rng.standard_normal(student.size)  # nonzero biases
    teacher = student.like(student.vector + 0.3 * rng.standard_normal(student.size))
    state = TrainState(student, teacher, 0, np.zeros(student.size), np.zeros(student.size), 0)
    image = rng.uniform(0, 1, (enc.image_size, enc.image_size, enc.channels_in))
    target = rng.normal(size=(enc.grid, enc.grid, enc.embed_dim))
    return state, s, image, target


def fd_check(state, s, image, target):
    _, grad, _ = loss_and_grad(state, image, target, s.loss, s)
    base = state.student.vector
    worst = 0.0
    for k in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[k] += FD_STEP
        minus[k] -= FD_STEP
        lp = loss_and_grad(TrainState(state.student.like(plus), state.teacher, 0, state.m, state.v, 0),
                           image, target, s.loss, s)[0]
        lm = loss_and_grad(TrainState(state.student.like(minus), state.teacher, 0, state.m, state.v, 0),
                           image, target, s.loss, s)[0]
        num = (lp - lm) / (2 * FD_STEP)
        err = abs(num - grad[k])
        if err > 1e-8:
            rel = err / max(abs(num), abs(grad[k]))
            worst = max(worst, rel)
            assert rel < 1e-4, f"{state.student.segment_of(k)}[{k}]: analytic {grad[k]} vs numeric {num}"
    return worst


@pytest.mark.parametrize("loss_kind", ["distill", "cosine", "mse"])
def test_gradient_matches_finite_differences(loss_kind):
    rng = np.random.default_rng({"distill": 0, "cosine": 1, "mse": 2}[loss_kind])
    for _ in range(5):
        fd_check(*small_setup(rng, loss_kind))


def test_shared_head_gradient_equals_fixed_target_gradient():
    rng = np.random.default_rng(3)
    state, s, image, target = small_setup(rng, "distill")
    # shared head: teacher logits come from the student's head, but only as a constant
    teacher = state.teacher.copy()
    for name in state.student.names():
        if name.startswith("head."):
            teacher[name][...] = state.student[name]
    shared = TrainSettings(encoder=s.encoder, head=s.head, head_mode="shared")
    g_shared = loss_and_grad(state, image, target, "distill", shared)[1]
    g_ema = loss_and_grad(TrainState(state.student, teacher, 0, state.m, state.v, 0), image, target, "distill", s)[1]
    np.testing.assert_array_equal(g_shared, g_ema)


def test_zero_loss_stationary_point():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 8))
    # equal temperatures and equal logits give q == p, so the gradient is (q - p) = 0
    _, g = distill_loss_grad(logits, logits, 0.1, 0.1)
    assert np.linalg.norm(g) < 1e-8


def test_distill_loss_uniform():
    K = 8
    loss = distill_loss(np.zeros((3, K)), np.zeros((3, K)))
    assert loss == pytest.approx(np.log(K), abs=1e-12)
    assert entropy(np.zeros((3, K)), 0.07) == pytest.approx(np.log(K), abs=1e-12)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(5)
    p = softmax(rng.normal(size=(50, 256)) / 0.07)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_cosine_loss_2d_rotation():
    theta = 0.7
    s = np.array([[np.cos(theta), np.sin(theta)]])
    t = np.array([[1.0, 0.0]])
    loss, g = cosine_loss_grad(s, t)
    assert loss == pytest.approx(1 - np.cos(theta), abs=1e-15)
    # d(1 - cos)/d theta along the unit-circle tangent
    tangent = np.array([-np.sin(theta), np.cos(theta)])
    assert g[0] @ tangent == pytest.approx(np.sin(theta), abs=1e-12)


def test_cosine_zero_tokens_count_zero():
    s = np.array([[0.0, 0.0], [1.0, 0.0]])
    t = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss, g = cosine_loss_grad(s, t)
    assert loss == 0.0
    np.testing.assert_array_equal(g[0], 0.0)
    assert cosine_loss(s, np.zeros_like(s)) == 0.0


def test_mse_grad():
    s, t = np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
    loss, g = mse_loss_grad(s, t)
    assert loss == 5.0
    np.testing.assert_array_equal(g, [[2.0, 4.0]])


def test_adam_hand_step():
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    new, m, v = adam_update(np.array([1.0]), np.array([0.5]), np.zeros(1), np.zeros(1), 1, 0.1)
    assert new[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    assert m[0] == pytest.approx(0.05) and v[0] == pytest.approx(0.00025)


def test_adam_zero_grad_and_decay():
    p = np.array([2.0, -3.0])
    new, _, _ = adam_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.01)
    np.testing.assert_array_equal(new, p)
    new, _, _ = adam_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.01, weight_decay=0.1)
    np.testing.assert_allclose(new, p * (1 - 0.01 * 0.1), atol=1e-15)


def test_sgd_adam_step_leaves_teacher():
    rng = np.random.default_rng(6)
    state, s, _, _ = small_setup(rng, "mse")
    new = sgd_adam_step(state, rng.normal(size=state.student.size), 1e-2)
    assert new.teacher is state.teacher
    assert new.step == 1
    assert not np.array_equal(new.student.vector, state.student.vector)


def test_ema_endpoints():
    rng = np.random.default_rng(7)
    enc, head = EncoderConfig(image_size=8, patch_size=4), HeadConfig(hidden=4, bottleneck=2, prototypes=4)
    t, s = init_params(enc, head, rng), init_params(enc, head, rng)
    np.testing.assert_array_equal(ema_update(t, s, 1.0).vector, t.vector)
    np.testing.assert_array_equal(ema_update(t, s, 0.0).vector, s.vector)
    other = init_params(EncoderConfig(image_size=8, patch_size=4, pos_embed=False), head, rng)
    with pytest.raises(ValueError):
        ema_update(t, other, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_ema_contraction(seed, lam):
    rng = np.random.default_rng(seed)
    enc, head = EncoderConfig(image_size=8, patch_size=4), HeadConfig(hidden=4, bottleneck=2, prototypes=4)
    t, s = init_params(enc, head, rng), init_params(enc, head, rng)
    gap = np.linalg.norm(t.vector - s.vector)
    # rounding leaves an absolute residual on the order of eps * |theta|
    floor = 1e-14 * np.linalg.norm(s.vector)
    for k in range(1, 4):
        t = ema_update(t, s, lam)
        np.testing.assert_allclose(np.linalg.norm(t.vector - s.vector), lam ** k * gap, rtol=1e-9, atol=floor)


def test_stop_gradient_teacher_invariance():
    rng = np.random.default_rng(8)
    for kind in ("distill", "cosine", "mse"):
        state, s, image, target = small_setup(rng, kind)
        # in ema head mode the teacher's head maps the target to logits; in shared mode nothing of the
        # teacher is read. Either way, with the target held fixed the encoder-side teacher is invisible.
        perturbed = state.teacher.copy()
        for name in perturbed.names():
            if not name.startswith("head."):
                perturbed[name][...] += rng.normal(size=perturbed[name].shape)
        g0 = loss_and_grad(state, image, target, kind, s)[1]
        g1 = loss_and_grad(TrainState(state.student, perturbed, 0, state.m, state.v, 0), image, target, kind, s)[1]
        np.testing.assert_array_equal(g0, g1)
        shared = TrainSettings(encoder=s.encoder, head=s.head, loss=kind, head_mode="shared")
        full = state.teacher.like(state.teacher.vector + rng.normal(size=state.teacher.size))
        g0 = loss_and_grad(state, image, target, kind, shared)[1]
        g1 = loss_and_grad(TrainState(state.student, full, 0, state.m, state.v, 0), image, target, kind, shared)[1]
        np.testing.assert_array_equal(g0, g1)


def test_params_layout_and_views():
    enc, head = EncoderConfig(), HeadConfig()
    p = init_params(enc, head, np.random.default_rng(0))
    assert p["head.proto"].shape == (16, 256)
    assert p["embed.w"].shape == (enc.patch_dim, enc.embed_dim)
    p["embed.b"][...] = 7.0
    assert np.all(p.vector[p.offsets["embed.b"][0]:p.offsets["embed.b"][1]] == 7.0)
    assert encode(p, np.zeros((64, 64, 3)), enc).shape == (8, 8, 32)
    assert head_logits(p, np.ones((4, 32))).shape == (4, 256)


def test_encode_rejects_bad_image():
    enc = EncoderConfig()
    p = init_params(enc, HeadConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        encode(p, np.zeros((32, 32, 3)), enc)


def test_nonfinite_gradient_names_segment():
    rng = np.random.default_rng(9)
    state, s, image, target = small_setup(rng, "mse")
    state.student["mlp.w2"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite gradient in segment"):
        loss_and_grad(state, image, target, "mse", s)
