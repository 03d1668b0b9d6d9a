import math

import numpy as np
import pytest

from maskdiff.data import gaussian_ring, sample_points
from maskdiff.denoiser import DenoiserConfig, DenoiserModel
from maskdiff.diffusion import (
    NoiseSchedule,
    add_noise,
    cfg_combine,
    ddim_step,
    diffusion_loss,
    make_schedule,
    predict_x0,
    spaced_timesteps,
)
from maskdiff.errors import ConfigError, NumericError
from maskdiff.tensor import Tensor


def test_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    assert np.allclose(s.alpha_bars, [0.5])


def test_schedule_two_step_product():
    s = make_schedule(2, 0.1, 0.2)
    assert np.max(np.abs(s.alpha_bars - [0.9, 0.72])) <= 1e-15


def test_schedule_direct_product_oracle():
    s = make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    prod = 1.0
    for b in s.betas:
        prod *= 1.0 - b
    assert abs(s.alpha_bars[-1] - prod) <= 1e-12


def test_schedule_invalid_range():
    with pytest.raises(ConfigError):
        make_schedule(10, 0.0, 0.5)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.5, 0.1)
    with pytest.raises(ConfigError):
        make_schedule(0, 0.1, 0.2)


def test_spaced_timesteps_contract():
    seq = spaced_timesteps(1000, 50)
    assert len(seq) == 50
    assert seq[0] == 999 and seq[-1] == 0
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert spaced_timesteps(1000, 1000) == list(range(999, -1, -1))


def test_add_noise_noiseless_limit():
    s = make_schedule(10, 0.1, 0.2)
    z0 = np.random.default_rng(0).normal(size=(4, 2))
    out = add_noise(Tensor(z0), Tensor(np.zeros_like(z0)), 3, s)
    assert np.max(np.abs(out.data - math.sqrt(s.alpha_bars[3]) * z0)) <= 1e-15


def test_add_noise_early_time_identity():
    s = make_schedule(10, 1e-8, 1e-8)
    z0 = np.random.default_rng(1).normal(size=(4, 2))
    eps = np.random.default_rng(2).normal(size=(4, 2))
    out = add_noise(Tensor(z0), Tensor(eps), 0, s)
    assert np.max(np.abs(out.data - z0)) <= 1e-3


def test_add_noise_scalar_loop_oracle():
    s = make_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(3)
    z0, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t = 57
    got = add_noise(Tensor(z0), Tensor(eps), t, s).data
    for i in range(3):
        for j in range(2):
            ref = math.sqrt(s.alpha_bars[t]) * z0[i, j] + math.sqrt(
                1 - s.alpha_bars[t]
            ) * eps[i, j]
            assert abs(got[i, j] - ref) <= 1e-12


def test_add_noise_t_out_of_range():
    s = make_schedule(10, 0.1, 0.2)
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        add_noise(z, z, 10, s)


def test_predict_x0_inverts_add_noise():
    s = make_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(4)
    z0, eps = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    for t in (0, 123, 999):
        z_t = add_noise(Tensor(z0), Tensor(eps), t, s)
        rec = predict_x0(z_t, Tensor(eps), t, s)
        assert np.max(np.abs(rec.data - z0)) <= 1e-10


def test_predict_x0_zero_noise_prediction():
    s = make_schedule(100, 1e-3, 0.05)
    z = np.random.default_rng(5).normal(size=(2, 2))
    out = predict_x0(Tensor(z), Tensor(np.zeros_like(z)), 40, s)
    assert np.max(np.abs(out.data - z / math.sqrt(s.alpha_bars[40]))) <= 1e-12


def test_predict_x0_scalar_loop_oracle():
    s = make_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(6)
    z, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t = 70
    got = predict_x0(Tensor(z), Tensor(eps), t, s).data
    for i in range(3):
        for j in range(2):
            ref = (z[i, j] - math.sqrt(1 - s.alpha_bars[t]) * eps[i, j]) / math.sqrt(
                s.alpha_bars[t]
            )
            assert abs(got[i, j] - ref) <= 1e-12


def test_predict_x0_rejects_zero_alpha_bar():
    s = NoiseSchedule(2, np.array([0.5, 0.5]), np.array([0.5, 0.5]),
                      np.array([0.5, 0.0]))
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(NumericError):
        predict_x0(z, z, 1, s)


def test_ddim_step_deterministic_at_eta_zero():
    s = make_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(7)
    z, eps = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2)))
    a = ddim_step(z, eps, 50, 30, s, eta=0.0)
    b = ddim_step(z, eps, 50, 30, s, eta=0.0)
    assert np.array_equal(a.data, b.data)


def test_ddim_step_terminal_returns_x0():
    s = make_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(8)
    z, eps = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2)))
    out = ddim_step(z, eps, 5, -1, s, eta=0.0)
    x0 = predict_x0(z, eps, 5, s)
    assert np.max(np.abs(out.data - x0.data)) <= 1e-12


def test_ddim_step_eta_one_scalar_oracle():
    s = make_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(9)
    z, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t, t_prev = 80, 60
    got = ddim_step(Tensor(z), Tensor(eps), t, t_prev, s, eta=1.0,
                    rng=np.random.default_rng(99)).data
    xi = np.random.default_rng(99).standard_normal(z.shape)
    ab_t, ab_p = s.alpha_bars[t], s.alpha_bars[t_prev]
    sigma = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    for i in range(3):
        for j in range(2):
            x0 = (z[i, j] - math.sqrt(1 - ab_t) * eps[i, j]) / math.sqrt(ab_t)
            ref = (
                math.sqrt(ab_p) * x0
                + math.sqrt(1 - ab_p - sigma**2) * eps[i, j]
                + sigma * xi[i, j]
            )
            assert abs(got[i, j] - ref) <= 1e-12


def test_ddim_step_negative_radicand():
    # alpha_bar above 1 at the target step: the direction radicand goes negative.
    s = NoiseSchedule(2, np.array([0.5, 0.5]), np.array([0.5, 0.5]),
                      np.array([1.5, 0.2]))
    z = Tensor(np.ones((1, 2)))
    with pytest.raises(NumericError):
        ddim_step(z, z, 1, 0, s, eta=0.0)
    with pytest.raises(NumericError):
        ddim_step(z, z, 1, 0, s, eta=1.0, rng=np.random.default_rng(0))


def test_cfg_combine():
    u = Tensor(np.zeros((1, 2)))
    c = Tensor(np.ones((1, 2)))
    assert np.array_equal(cfg_combine(u, c, 1.0).data, c.data)
    assert np.array_equal(cfg_combine(u, c, 0.0).data, u.data)
    assert np.array_equal(cfg_combine(u, c, 7.5).data, np.full((1, 2), 7.5))


def _model(seed=0):
    return DenoiserModel(DenoiserConfig(hidden_dim=8, temb_dim=4),
                         np.random.default_rng(seed))


class _StubModel:
    def __init__(self, config, ret):
        self.config = config
        self._ret = ret

    def forward(self, z_t, t, cond, masks=None):
        return Tensor(self._ret(z_t.data))


def test_diffusion_loss_perfect_predictor():
    sched = make_schedule(100, 1e-3, 0.05)
    z0 = np.random.default_rng(10).normal(size=(6, 2))
    cond = np.zeros(6, dtype=np.int64)
    # Replicate the documented draw order to learn the noise in advance.
    probe = np.random.default_rng(77)
    probe.integers(0, sched.timesteps, size=6)
    eps = probe.standard_normal(z0.shape)
    model = _StubModel(DenoiserConfig(), lambda _: eps)
    loss = diffusion_loss(model, z0, cond, sched, np.random.default_rng(77))
    assert loss.item() <= 1e-30


def test_diffusion_loss_zero_predictor():
    sched = make_schedule(100, 1e-3, 0.05)
    z0 = np.random.default_rng(11).normal(size=(6, 2))
    cond = np.zeros(6, dtype=np.int64)
    probe = np.random.default_rng(78)
    probe.integers(0, sched.timesteps, size=6)
    eps = probe.standard_normal(z0.shape)
    model = _StubModel(DenoiserConfig(), lambda z: np.zeros_like(z))
    loss = diffusion_loss(model, z0, cond, sched, np.random.default_rng(78))
    assert abs(loss.item() - np.mean(eps**2)) <= 1e-12


def test_diffusion_loss_per_example_loop_oracle():
    sched = make_schedule(50, 1e-3, 0.05)
    model = _model(3)
    rng = np.random.default_rng(12)
    z0 = rng.normal(size=(5, 2))
    cond = rng.integers(0, 8, size=5)

    loss = diffusion_loss(model, z0, cond, sched, np.random.default_rng(13))

    probe = np.random.default_rng(13)
    t = probe.integers(0, sched.timesteps, size=5)
    eps = probe.standard_normal(z0.shape)
    total = 0.0
    for i in range(5):
        ab = sched.alpha_bars[t[i]]
        z_t = math.sqrt(ab) * z0[i] + math.sqrt(1 - ab) * eps[i]
        eps_hat = model.forward(Tensor(z_t[None, :]), int(t[i]), [int(cond[i])])
        total += np.mean((eps_hat.data[0] - eps[i]) ** 2)
    assert abs(loss.item() - total / 5) <= 1e-12


def test_diffusion_loss_empty_batch():
    sched = make_schedule(10, 1e-3, 0.05)
    with pytest.raises(ValueError):
        diffusion_loss(_model(), np.zeros((0, 2)), np.zeros(0), sched,
                       np.random.default_rng(0))


def test_variance_preservation():
    s = make_schedule(1000, 1e-4, 0.02)
    for t in (0, 250, 999):
        assert abs(
            math.sqrt(s.alpha_bars[t]) ** 2 + math.sqrt(1 - s.alpha_bars[t]) ** 2 - 1
        ) <= 1e-12


def test_terminal_noising_statistics():
    spec = gaussian_ring()
    pts, _ = sample_points(spec, 10_000, np.random.default_rng(14))
    s = make_schedule(1000, 1e-4, 0.02)
    eps = np.random.default_rng(15).standard_normal(pts.shape)
    z_T = add_noise(Tensor(pts), Tensor(eps), 999, s).data
    assert np.all(np.abs(z_T.mean(axis=0)) <= 0.05)
    assert np.all((z_T.var(axis=0) >= 0.9) & (z_T.var(axis=0) <= 1.1))
