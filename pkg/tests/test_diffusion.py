import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from typhoon_cddpm import diffusion as df
from typhoon_cddpm.errors import DomainError, NumericalFailure, ScheduleError


class ZeroModel(torch.nn.Module):
    def forward(self, x, y_t, g):
        return torch.zeros_like(y_t)


class AlgebraicOracle(torch.nn.Module):
    """Recovers eps from y_t given the clean target."""

    def __init__(self, y0):
        super().__init__()
        self.y0 = y0

    def forward(self, x, y_t, g):
        g = g.reshape(-1, 1, 1, 1).to(y_t.dtype)
        return (y_t - torch.sqrt(g) * self.y0) / torch.sqrt(1 - g)


class ReplayOracle(torch.nn.Module):
    """Replays the generator that training_step consumes, returning its eps bit for bit."""

    def __init__(self, seed, shape, T, dtype):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        torch.randint(1, T + 1, (shape[0],), generator=gen)
        self.eps = torch.randn(shape, generator=gen, dtype=dtype)

    def forward(self, x, y_t, g):
        return self.eps


class Explode(torch.nn.Module):
    def forward(self, x, y_t, g):
        return torch.full_like(y_t, float("inf"))


def batch(n=3, size=8, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand((n, 1, size, size), generator=gen, dtype=dtype)
    y0 = torch.rand((n, 4, size, size), generator=gen, dtype=dtype)
    return x, y0


# ----------------------------------------------------------------- schedule

def test_single_step_schedule():
    s = df.build_schedule(1, beta_start=0.3, beta_end=0.3)
    np.testing.assert_array_equal(s.gamma_bar, [0.7])
    np.testing.assert_array_equal(s.alpha, [0.7])


def test_linear_default_endpoints():
    s = df.build_schedule(1000)
    # direct product, independent of cumprod
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert math.isclose(s.gamma_bar[-1], prod, rel_tol=1e-9)
    assert s.gamma_bar[-1] < 0.05
    assert s.gamma_bar[0] > 0.99


def test_scaled_short_schedule_reaches_noise():
    lo, hi = df.linear_beta_range(50)
    assert (lo, hi) == pytest.approx((0.002, 0.4))
    s = df.build_schedule(50, beta_start=lo, beta_end=hi)
    assert s.gamma_bar[-1] < 0.05 and s.gamma_bar[0] > 0.99


def test_cosine_schedule():
    s = df.build_schedule(1000, "cosine")
    assert s.gamma_bar[-1] < 0.05 and s.gamma_bar[0] > 0.99
    assert np.all(s.beta <= 0.999)


@pytest.mark.parametrize("kwargs", [dict(T=0), dict(T=10, kind="quadratic"),
                                    dict(T=10, beta_start=0.2, beta_end=0.1),
                                    dict(T=10, beta_start=0.0, beta_end=0.1)])
def test_build_schedule_domain_errors(kwargs):
    with pytest.raises(DomainError):
        df.build_schedule(**kwargs)


def test_schedule_check_rejects_bad_betas():
    with pytest.raises(ScheduleError):
        df.NoiseSchedule(np.array([0.2, 0.1])).check()
    with pytest.raises(ScheduleError):
        df.NoiseSchedule(np.array([0.1, 1.0])).check()


def test_schedule_dict_round_trip():
    s = df.build_schedule(20, "cosine")
    back = df.NoiseSchedule.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.beta, s.beta)
    assert back.kind == "cosine"


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.floats(1e-5, 0.3), st.floats(0.0, 0.5))
def test_linear_schedule_invariants(T, b0, extra):
    b1 = min(b0 + extra, 0.9)
    s = df.build_schedule(T, beta_start=b0, beta_end=b1)
    assert np.all((s.beta > 0) & (s.beta < 1)) and np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.gamma_bar) < 0) and np.all((s.gamma_bar > 0) & (s.gamma_bar <= 1))


# ----------------------------------------------------------------- forward

def test_forward_per_item_gamma():
    _, y0 = batch(2)
    eps = torch.randn_like(y0)
    g = torch.tensor([1.0, 0.25], dtype=y0.dtype)
    y = df.forward_diffuse(y0, eps, g)
    torch.testing.assert_close(y[0], y0[0], rtol=0, atol=0)
    torch.testing.assert_close(y[1], 0.5 * y0[1] + math.sqrt(0.75) * eps[1])


def test_forward_numpy():
    y0 = np.ones((4, 3, 3))
    eps = np.full((4, 3, 3), 2.0)
    np.testing.assert_allclose(df.forward_diffuse(y0, eps, 0.64), 0.8 + 0.6 * 2.0)


def test_forward_errors():
    with pytest.raises(TypeError):
        df.forward_diffuse(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 3, 3), 0.5)
    with pytest.raises(DomainError):
        df.forward_diffuse(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), 0.0)
    with pytest.raises(DomainError):
        df.forward_diffuse(np.zeros(3), np.zeros(3), 1.5)


# ----------------------------------------------------------------- training_step

def test_training_step_oracle_loss_is_zero():
    x, y0 = batch(4)
    s = df.build_schedule(50)
    model = ReplayOracle(11, y0.shape, s.T, y0.dtype)
    loss = df.training_step(model, x, y0, s, torch.Generator().manual_seed(11))
    assert loss.item() == 0.0


def test_training_step_zero_model_loss_near_one():
    gen = torch.Generator().manual_seed(0)
    y0 = torch.rand((625, 4, 2, 2), generator=gen, dtype=torch.float64)
    x = torch.zeros((625, 1, 2, 2), dtype=torch.float64)
    loss = df.training_step(ZeroModel(), x, y0, df.build_schedule(50), gen)
    assert abs(loss.item() - 1.0) < 0.05


def test_training_step_has_gradients():
    x, y0 = batch(2)
    model = torch.nn.Conv2d(4, 4, 1).double()
    wrapped = lambda x, y, g: model(y)
    loss = df.training_step(wrapped, x, y0, df.build_schedule(10))
    loss.backward()
    assert model.weight.grad is not None and loss.item() >= 0


def test_training_step_nonfinite_reports_t():
    x, y0 = batch(2)
    with pytest.raises(NumericalFailure) as err:
        df.training_step(Explode(), x, y0, df.build_schedule(10), t=torch.tensor([3, 7]))
    assert err.value.step == [3, 7]


def test_training_step_rejects_bad_t():
    x, y0 = batch(1)
    with pytest.raises(DomainError):
        df.training_step(ZeroModel(), x, y0, df.build_schedule(10), t=torch.tensor([11]))


# ----------------------------------------------------------------- reverse_step

def test_reverse_step_t1_ignores_z():
    x, y = batch(2)
    s = df.build_schedule(10)
    a = df.reverse_step(ZeroModel(), x, y, 1, torch.randn_like(y), s)
    b = df.reverse_step(ZeroModel(), x, y, 1, None, s)
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_reverse_step_zero_model_pure_scaling():
    x, y = batch(2)
    s = df.build_schedule(10)
    for t in (1, 5, 10):
        out = df.reverse_step(ZeroModel(), x, y, t, torch.zeros_like(y), s)
        torch.testing.assert_close(out, y / math.sqrt(s.alpha[t - 1]), rtol=1e-15, atol=0)


def test_reverse_step_adds_sigma_z():
    x, y = batch(1)
    s = df.build_schedule(10)
    z = torch.randn_like(y)
    base = df.reverse_step(ZeroModel(), x, y, 4, torch.zeros_like(y), s)
    noisy = df.reverse_step(ZeroModel(), x, y, 4, z, s)
    torch.testing.assert_close(noisy - base, math.sqrt(s.beta[3]) * z)
    post = df.reverse_step(ZeroModel(), x, y, 4, z, s, variance="posterior")
    var = s.beta[3] * (1 - s.gamma_bar[2]) / (1 - s.gamma_bar[3])
    torch.testing.assert_close(post - base, math.sqrt(var) * z)


def test_clipped_mean_agrees_when_estimate_in_range():
    _, y0 = batch(2)
    s = df.build_schedule(20)
    eps = torch.randn_like(y0)
    t = 12
    y_t = df.forward_diffuse(y0, eps, s.gamma_bar[t - 1])
    model = AlgebraicOracle(y0)
    z = torch.randn_like(y0)
    a = df.reverse_step(model, None, y_t, t, z, s, clip_denoised=False)
    b = df.reverse_step(model, None, y_t, t, z, s, clip_denoised=True)
    torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-10)


def test_reverse_step_errors():
    x, y = batch(1)
    s = df.build_schedule(10)
    for t in (0, 11):
        with pytest.raises(DomainError):
            df.reverse_step(ZeroModel(), x, y, t, torch.zeros_like(y), s)
    with pytest.raises(NumericalFailure) as err:
        df.reverse_step(Explode(), x, y, 6, torch.zeros_like(y), s)
    assert err.value.step == 6
    with pytest.raises(ValueError):
        df.reverse_step(ZeroModel(), x, y, 3, None, s)


# ----------------------------------------------------------------- sample

class TinyDenoiser(torch.nn.Module):
    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.conv = torch.nn.Conv2d(5, 4, 3, padding=1).double()

    def forward(self, x, y_t, g):
        return self.conv(torch.cat([x, y_t], 1)) * g.reshape(-1, 1, 1, 1)


def test_sample_deterministic_and_clipped():
    x, _ = batch(2)
    s = df.build_schedule(15)
    model = TinyDenoiser()
    a = df.sample(model, x, s, torch.Generator().manual_seed(3))
    b = df.sample(model, x, s, torch.Generator().manual_seed(3))
    c = df.sample(model, x, s, torch.Generator().manual_seed(4))
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert not torch.equal(a, c)
    assert a.shape == (2, 4, 8, 8) and a.min() >= 0 and a.max() <= 1
    raw = df.sample(model, x, s, torch.Generator().manual_seed(3), clip=False, clip_denoised=False)
    assert raw.min() < 0 or raw.max() > 1


def test_sample_error_propagates_step():
    x, _ = batch(1)
    with pytest.raises(NumericalFailure) as err:
        df.sample(Explode(), x, df.build_schedule(5), torch.Generator().manual_seed(0))
    assert err.value.step == 5
