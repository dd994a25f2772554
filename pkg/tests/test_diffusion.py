import math

import numpy as np
import pytest

from herdsynth.diffusion import (
    AdamState,
    DenoiserConfig,
    DenoiserParams,
    NoiseSchedule,
    adam_update,
    forward_sample,
    init_params,
    load_checkpoint,
    loss_and_grads,
    make_schedule,
    predict_noise,
    reverse_sample,
    reverse_step,
    save_checkpoint,
    sprite_to_tensor,
    tensor_to_image,
    tensor_to_sprite,
    train,
    train_step,
)
from herdsynth.diffusion import engine
from herdsynth.errors import (
    SamplingDiverged,
    ScheduleError,
    ShapeError,
    SpriteRejected,
    TimestepError,
    TrainingDiverged,
)
from herdsynth.geometry import AxisBox
from herdsynth.sprites import Sprite

TOY = DenoiserConfig(resolution=4, channels=(2, 3, 4), temb_dim=4)
SMALL = DenoiserConfig(resolution=8, channels=(4, 6, 8), temb_dim=8)


def _linear_product(T, b0, b1):
    prod = 1.0
    for t in range(1, T + 1):
        beta = b0 + (b1 - b0) * (t - 1) / (T - 1) if T > 1 else b0
        prod *= 1.0 - beta
    return prod


def test_schedule_examples():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bar[0] == 0.5
    s = make_schedule(1000, 1e-4, 0.02)
    oracle = _linear_product(1000, 1e-4, 0.02)
    assert s.alpha_bar[-1] == pytest.approx(oracle, rel=1e-9)
    assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)
    assert s.alpha_bar[-1] < 0.01
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.beta) >= 0)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.02, 1e-4)
    with pytest.raises(ScheduleError):
        make_schedule(0)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.0, 0.1)


def test_forward_sample_limits():
    ones = np.zeros(3)
    trivial = NoiseSchedule(ones, ones + 1, ones + 1, 0.0, 0.0)
    x0 = np.random.default_rng(0).normal(size=(4, 4, 3))
    eps = np.random.default_rng(1).normal(size=(4, 4, 3))
    assert np.array_equal(forward_sample(x0, 2, eps, trivial), x0)
    s = make_schedule(100)
    out = forward_sample(np.zeros_like(x0), 40, eps, s)
    assert np.allclose(out, math.sqrt(1 - s.alpha_bar[39]) * eps, atol=0, rtol=1e-15)
    with pytest.raises(TimestepError):
        forward_sample(x0, 0, eps, s)
    with pytest.raises(TimestepError):
        forward_sample(x0, 101, eps, s)


def test_forward_sample_per_sample_timesteps():
    s = make_schedule(50)
    x0 = np.ones((3, 2, 2, 3))
    eps = np.zeros_like(x0)
    out = forward_sample(x0, np.array([1, 25, 50]), eps, s)
    for i, t in enumerate([1, 25, 50]):
        assert np.allclose(out[i], math.sqrt(s.alpha_bar[t - 1]))


def test_forward_statistics_small():
    s = make_schedule(1000)
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, size=(2, 2, 3))
    n = 10_000
    for t in (1, 500):
        eps = rng.standard_normal((n,) + x0.shape)
        xt = forward_sample(x0, t, eps, s)
        ab = s.alpha_bar[t - 1]
        var = 1 - ab
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2 / (n - 1))
        assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * x0) <= 3 * se_mean)
        assert np.all(np.abs(xt.var(0, ddof=1) - var) <= 3 * se_var)


def test_zero_final_layer_predicts_zero_and_is_deterministic():
    p = init_params(SMALL, seed=0)
    x = np.random.default_rng(0).normal(size=(8, 8, 3))
    assert np.array_equal(predict_noise(p, x, 5), np.zeros((8, 8, 3)))
    q = init_params(SMALL, seed=0, zero_final=False)
    a, b = predict_noise(q, x, 5), predict_noise(q, x, 5)
    assert np.array_equal(a, b)
    assert a.shape == x.shape
    assert not np.array_equal(predict_noise(q, x, 6), a)


def test_shape_errors():
    p = init_params(SMALL, seed=0)
    with pytest.raises(ShapeError):
        predict_noise(p, np.zeros((4, 4, 3)), 1)
    bad = dict(p.weights)
    bad["mid.w"] = np.zeros((3, 3, 1, 1))
    with pytest.raises(ShapeError):
        DenoiserParams(SMALL, bad)
    with pytest.raises(ValueError):
        DenoiserConfig(resolution=6, channels=(2, 3, 4))


def test_default_parameter_count_near_1e5():
    n = init_params(DenoiserConfig(64), 0).count
    assert 5e4 <= n <= 2e5


def _numeric_grad(p, x, t, eps, h=1e-4):
    out = {}
    for k, w in p.weights.items():
        g = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            old = w[i]
            w[i] = old + h
            lp, _ = loss_and_grads(p, x, t, eps)
            w[i] = old - h
            lm, _ = loss_and_grads(p, x, t, eps)
            w[i] = old
            g[i] = (lp - lm) / (2 * h)
        out[k] = g
    return out


def gradient_check_errors(seed=0):
    p = init_params(TOY, seed=seed, zero_final=False)
    rng = np.random.default_rng(seed)
    for k in p.weights:
        p.weights[k] = rng.normal(0, 0.5, p.weights[k].shape)
    sched = make_schedule(10)
    x0 = rng.uniform(-1, 1, (3, 4, 4, 3))
    t = rng.integers(1, 11, 3)
    eps = rng.standard_normal(x0.shape)
    xt = forward_sample(x0, t, eps, sched)
    _, analytic = loss_and_grads(p, xt, t, eps)
    numeric = _numeric_grad(p, xt, t, eps)
    errs = {}
    for k in analytic:
        a, n = analytic[k], numeric[k]
        errs[k] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
    return errs


def test_gradients_match_finite_differences():
    errs = gradient_check_errors(seed=1)
    assert set(errs) == set(TOY.shapes())
    assert max(errs.values()) <= 1e-3, errs


def test_first_adam_step_is_lr_times_sign():
    w = {"p": np.array([1.0])}
    state = AdamState.zeros_like(w, lr=2e-4)
    new, state = adam_update(w, {"p": np.array([0.5])}, state)
    assert new["p"][0] - 1.0 == pytest.approx(-2e-4, rel=1e-6)
    assert state.step == 1
    new2, _ = adam_update(w, {"p": np.array([-3.0])}, AdamState.zeros_like(w, lr=2e-4))
    assert new2["p"][0] - 1.0 == pytest.approx(2e-4, rel=1e-6)


def _batch(n=6, r=8, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, r, r, 3))


def test_train_step_zero_lr_keeps_params():
    p = init_params(SMALL, seed=3, zero_final=False)
    adam = AdamState.zeros_like(p.weights, lr=0.0)
    out = train_step(p, adam, _batch(), make_schedule(20), seed=9)
    for k in p.weights:
        assert np.array_equal(out.params.weights[k], p.weights[k])
    assert out.adam.step == 1


def test_train_step_is_pure_and_deterministic():
    p = init_params(SMALL, seed=3)
    before = {k: v.copy() for k, v in p.weights.items()}
    adam = AdamState.zeros_like(p.weights)
    sched = make_schedule(20)
    a = train_step(p, adam, _batch(), sched, seed=4)
    b = train_step(p, adam, _batch(), sched, seed=4)
    assert a.loss == b.loss
    for k in p.weights:
        assert np.array_equal(a.params.weights[k], b.params.weights[k])
        assert np.array_equal(p.weights[k], before[k])
    assert adam.step == 0


def test_train_step_oracle_network_gives_zero_loss(monkeypatch):
    data = _batch()
    sched = make_schedule(20)

    def oracle(params, xt, t, eps_unused):
        ab = sched.alpha_bar[np.asarray(t) - 1].reshape(-1, 1, 1, 1)
        pred = (xt - np.sqrt(ab) * data) / np.sqrt(1 - ab)
        true_eps = eps_unused
        return float(np.mean((pred - true_eps) ** 2)), {k: np.zeros_like(v) for k, v in params.weights.items()}

    monkeypatch.setattr(engine, "loss_and_grads", oracle)
    p = init_params(SMALL, 0)
    out = train_step(p, AdamState.zeros_like(p.weights), data, sched, seed=1)
    assert out.loss == pytest.approx(0.0, abs=1e-20)


def test_train_step_nan_aborts_with_diagnostics():
    p = init_params(SMALL, seed=3, zero_final=False)
    data = _batch()
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train_step(p, AdamState.zeros_like(p.weights, lr=1e-3), data, make_schedule(20), seed=0)
    assert exc.value.lr == 1e-3


def test_reverse_sample_contract():
    p = init_params(SMALL, seed=2, zero_final=False)
    sched = make_schedule(15)
    a = reverse_sample(p, sched, seed=77)
    b = reverse_sample(p, sched, seed=77)
    assert a.shape == (8, 8, 3)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    assert not np.array_equal(a, reverse_sample(p, sched, seed=78))


def test_final_reverse_step_adds_no_noise():
    p = init_params(SMALL, seed=2, zero_final=False)
    sched = make_schedule(15)
    x1 = np.random.default_rng(0).normal(size=(8, 8, 3))
    z1 = np.random.default_rng(1).normal(size=(8, 8, 3))
    assert np.array_equal(reverse_step(p, sched, x1, 1, z1), reverse_step(p, sched, x1, 1, None))
    assert not np.array_equal(reverse_step(p, sched, x1, 2, z1), reverse_step(p, sched, x1, 2, z1 * 0))


def test_reverse_sample_divergence_reports_timestep():
    p = init_params(SMALL, seed=2)
    p.weights["out.b"][:] = np.inf
    with pytest.raises(SamplingDiverged) as exc:
        reverse_sample(p, make_schedule(5), seed=0)
    assert exc.value.t == 5


def test_tensor_image_endpoints():
    x = np.array([[[-1.0, 1.0, 0.0]]])
    assert tensor_to_image(x).tolist() == [[[0, 255, 128]]]


def test_tensor_to_sprite_constant_rejected():
    with pytest.raises(SpriteRejected):
        tensor_to_sprite(np.full((16, 16, 3), 0.3))


def test_tensor_to_sprite_recovers_blob():
    x = np.full((16, 16, 3), -0.8)
    yy, xx = np.mgrid[0:16, 0:16] + 0.5
    blob = (xx - 8) ** 2 + (yy - 8) ** 2 <= 4.5 ** 2
    x[blob] = 0.7
    s = tensor_to_sprite(x)
    iou = (s.mask & blob).sum() / (s.mask | blob).sum()
    assert iou >= 0.9
    assert s.mask_source == "diffusion"


def test_sprite_to_tensor_letterbox():
    patch = np.full((10, 20, 3), 200, np.uint8)
    mask = np.zeros((10, 20), bool)
    mask[2:8, 4:16] = True
    s = Sprite(patch, mask, "a", AxisBox(0, 0, 20, 10))
    x = sprite_to_tensor(s, 16)
    assert x.shape == (16, 16, 3)
    assert x.min() >= -1 and x.max() <= 1
    img = tensor_to_image(x)
    # letterbox bands and masked-out pixels are mid-gray
    assert (img[0] == 128).all() and (img[-1] == 128).all()
    assert img[8, 8, 0] == 200


def test_checkpoint_resume_is_bit_reproducible(tmp_path):
    p = init_params(SMALL, seed=5)
    sched = make_schedule(20)
    data = _batch(12)
    adam = AdamState.zeros_like(p.weights)
    full_p, full_a, _ = train(p, adam, data, sched, steps=6, batch_size=4, seed=3)

    half_p, half_a, _ = train(p, adam, data, sched, steps=3, batch_size=4, seed=3)
    save_checkpoint(tmp_path / "c.zip", half_p, half_a, sched)
    save_checkpoint(tmp_path / "d.zip", half_p, half_a, sched)
    assert (tmp_path / "c.zip").read_bytes() == (tmp_path / "d.zip").read_bytes()
    lp, la, ls, _ = load_checkpoint(tmp_path / "c.zip")
    assert la.step == 3 and ls.T == 20
    res_p, res_a, _ = train(lp, la, data, sched, steps=3, batch_size=4, seed=3)
    for k in full_p.weights:
        assert np.array_equal(res_p.weights[k], full_p.weights[k])
        assert np.array_equal(res_a.m[k], full_a.m[k])


def test_train_log_lines(tmp_path):
    import io
    p = init_params(SMALL, seed=5)
    buf = io.StringIO()
    train(p, AdamState.zeros_like(p.weights), _batch(), make_schedule(10), 3, 2, 0, log_file=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 3
    assert [len(line.split()) for line in lines] == [4, 4, 4]
    assert lines[0].split()[0] == "1"
