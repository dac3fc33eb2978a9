import numpy as np
import pytest

from trajdiff.context import NULL_TOKEN
from trajdiff.denoiser import MLPDenoiser, TrainConfig, VelocityDraw, sample_controls, train, velocity_loss
from trajdiff.guidance import GuidanceConfig
from trajdiff.io import ConfigError, DataError
from trajdiff.schedules import build_linear_schedule


class ZeroDenoiser:
    def predict_v(self, x_t, t, cond):
        return np.zeros_like(x_t)


class OracleDenoiser:
    """Knows the clean signal, so it can invert the forward process exactly."""

    def __init__(self, s, x0):
        self.s, self.x0 = s, x0

    def predict_v(self, x_t, t, cond):
        a = self.s.a[t][:, None, None]
        sig = self.s.sigma[t][:, None, None]
        return (a * x_t - self.x0) / sig


def small(seed=0, T_pred=4, Q=3, T=50, **kw):
    return MLPDenoiser(T_pred, Q, T, np.random.default_rng(seed), **kw)


def test_zero_predictor_loss_matches_expectation():
    s = build_linear_schedule(100)
    rng = np.random.default_rng(11)
    x0 = np.broadcast_to(np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]), (10_000, 2, 3))
    draw = VelocityDraw.sample(s, x0, 1, rng, 0.1)
    loss = velocity_loss(ZeroDenoiser(), s, x0, None, draw=draw)
    # direct Monte-Carlo average of ||v||^2 over the same draws
    v = s.a[draw.t][:, None, None] * draw.eps - s.sigma[draw.t][:, None, None] * x0
    per = np.sum(v.reshape(len(v), -1) ** 2, axis=1)
    assert loss == pytest.approx(per.mean(), rel=1e-12)
    # and the closed-form expectation E_t[a^2 D + sigma^2 ||x0||^2]
    D, nx = 6, float(np.sum(x0[0] ** 2))
    expect = np.mean(s.alpha_bar[1:] * D + (1 - s.alpha_bar[1:]) * nx)
    assert abs(loss - expect) < 3 * per.std() / np.sqrt(len(per))


def test_perfect_predictor_has_zero_loss():
    s = build_linear_schedule(100)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((64, 2, 5))
    loss = velocity_loss(OracleDenoiser(s, x0), s, x0, 2, rng)
    assert loss == pytest.approx(0.0, abs=1e-18)


def test_condition_dropout_rate():
    s = build_linear_schedule(10)
    x0 = np.zeros((100_000, 1, 1))
    draw = VelocityDraw.sample(s, x0, 5, np.random.default_rng(0), 0.10)
    frac = np.mean(draw.cond == NULL_TOKEN)
    assert 0.09 <= frac <= 0.11
    assert set(np.unique(draw.cond)) == {0, 5}
    assert draw.t.min() >= 1 and draw.t.max() <= 10


def test_empty_batch_rejected():
    s = build_linear_schedule(10)
    with pytest.raises(ValueError):
        velocity_loss(ZeroDenoiser(), s, np.zeros((0, 2, 3)), 1, np.random.default_rng(0))


def test_gradient_check_against_finite_differences():
    s = build_linear_schedule(50)
    den = small(hidden=8, depth=3, t_dim=4, cond_dim=3)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((6, 2, 4))
    draw = VelocityDraw.sample(s, x0, np.array([1, 2, 3, 1, 2, 3]), rng, 0.3)
    _, grads = velocity_loss(den, s, x0, None, draw=draw, with_grad=True)
    h = 1e-5
    worst = 0.0
    for p, g in zip(den.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = velocity_loss(den, s, x0, None, draw=draw)
            p[idx] = old - h
            down = velocity_loss(den, s, x0, None, draw=draw)
            p[idx] = old
            fd = (up - down) / (2 * h)
            denom = max(abs(fd) + abs(g[idx]), 1e-7)
            worst = max(worst, abs(fd - g[idx]) / denom)
    assert worst < 1e-4


def test_training_reduces_loss_on_constant_controls():
    s = build_linear_schedule(100)
    x0 = np.tile(np.array([[0.5, 0.5, 0.5, 0.5], [-0.1, -0.1, -0.1, -0.1]]), (256, 1, 1))
    den = small(T=100, hidden=32)
    _, trace = train(den, x0, np.ones(256, dtype=np.int64), s,
                     TrainConfig(batch_size=64, learning_rate=1e-3, epochs=40, probe_size=128))
    assert len(trace) == 41
    assert trace[-1] < 0.5 * trace[0]
    assert all(np.all(np.isfinite(p)) for p in den.params)


def test_zero_learning_rate_keeps_trace_constant():
    s = build_linear_schedule(20)
    x0 = np.random.default_rng(1).standard_normal((40, 2, 4))
    _, trace = train(small(T=20), x0, np.ones(40, dtype=np.int64), s,
                     TrainConfig(batch_size=16, learning_rate=0.0, epochs=3, probe_size=16))
    assert len(set(trace)) == 1


def test_training_is_deterministic():
    s = build_linear_schedule(20)
    x0 = np.random.default_rng(1).standard_normal((40, 2, 4))
    tok = np.arange(40) % 3 + 1
    cfg = TrainConfig(batch_size=16, learning_rate=1e-3, epochs=3, probe_size=16)
    a, ta = train(small(T=20), x0, tok, s, cfg)
    b, tb = train(small(T=20), x0, tok, s, cfg)
    assert ta == tb
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(cond_dropout=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lbfgs")
    assert TrainConfig().cond_dropout == 0.10


def test_sampling_counts_and_determinism():
    s = build_linear_schedule(100)
    den = small(T=100)
    g = GuidanceConfig()
    for S, n in ((1, 1), (10, 9), (100, 3)):
        den.n_evals = 0
        out = sample_controls(den, s, 2, 3.0, g, S, n, np.random.default_rng(4))
        assert den.n_evals == 2 * S * n
        assert out.shape == (n, 2, 4)
    a = sample_controls(den, s, 2, 3.0, g, 10, 5, np.random.default_rng(9))
    b = sample_controls(den, s, 2, 3.0, g, 10, 5, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    eta = sample_controls(den, s, 2, 3.0, g, 10, 5, np.random.default_rng(9), eta=1.0)
    assert np.all(np.isfinite(eta)) and not np.array_equal(eta, a)


def test_samples_do_not_depend_on_batch_size():
    s = build_linear_schedule(100)
    den = small(T=100)
    g = GuidanceConfig()
    many = sample_controls(den, s, 1, 0.0, g, 10, 4, np.random.default_rng(3))
    few = sample_controls(den, s, 1, 0.0, g, 10, 2, np.random.default_rng(3))
    assert np.allclose(many[:2], few, atol=1e-12)


def test_sampling_rejects_bad_arguments():
    s = build_linear_schedule(100)
    den = small(T=100)
    for tok in (0, 4):
        with pytest.raises(ValueError):
            sample_controls(den, s, tok, 0.0, GuidanceConfig(), 10, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_controls(den, s, 1, 0.0, GuidanceConfig(), 101, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_controls(den, s, 1, 0.0, GuidanceConfig(), 10, 0, np.random.default_rng(0))


def test_predict_v_shape_and_null_branch():
    den = small()
    x = np.random.default_rng(0).standard_normal((5, 2, 4))
    v = den.predict_v(x, np.full(5, 10), np.array([0, 1, 2, 3, 0]))
    assert v.shape == x.shape and np.all(np.isfinite(v))
    assert den.predict_v(x[0], 10, 0).shape == (2, 4)
    with pytest.raises(ValueError):
        den.predict_v(np.zeros((2, 5)), 3, 1)
    assert den.n_params() == sum(p.size for p in den.params)


def test_checkpoint_round_trip(tmp_path):
    den = small()
    den.fit_scaler(np.random.default_rng(1).standard_normal((10, 2, 4)))
    den.meta = {"tau": 0.2}
    path = tmp_path / "den.ckpt"
    den.save(path)
    back = MLPDenoiser.load(path)
    x = np.random.default_rng(2).standard_normal((3, 2, 4))
    assert np.array_equal(den.predict_v(x, 7, 2), back.predict_v(x, 7, 2))
    assert np.array_equal(den.x_scale, back.x_scale) and back.meta == {"tau": 0.2}
    back.save(tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        MLPDenoiser.load(bad)
