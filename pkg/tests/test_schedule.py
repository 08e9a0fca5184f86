import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from agridiff.schedule import (NoiseSchedule, default_schedule, forward_sample, forward_step, make_linear_schedule,
                               reverse_step)


def oracle_alpha_bars(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_three_step_schedule_matches_product_loop():
    s = make_linear_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, oracle_alpha_bars([0.1, 0.2, 0.3]), rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504], atol=1e-15)


@pytest.mark.parametrize("args", [(2, 0.0, 0.1), (0, 0.1, 0.2), (3, 0.2, 0.1), (3, 0.1, 1.0)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_arrays_are_read_only_and_float64():
    s = default_schedule()
    assert s.betas.dtype == np.float64
    with pytest.raises(ValueError):
        s.betas[0] = 0.3


def test_default_schedule_endpoints():
    s = default_schedule(50)
    assert s.beta_start == pytest.approx(2e-3)
    assert s.beta_end == pytest.approx(0.4)


def test_descriptor_round_trip():
    s = default_schedule(30)
    r = NoiseSchedule.from_descriptor(s.descriptor())
    assert r == s
    np.testing.assert_array_equal(r.alpha_bars, s.alpha_bars)


@given(T=st.integers(1, 200), lo=st.floats(1e-5, 0.5), span=st.floats(0.0, 0.49))
def test_schedule_invariants(T, lo, span):
    s = make_linear_schedule(T, lo, lo + span)
    assert np.all((s.betas > 0) & (s.betas < 1))
    np.testing.assert_array_equal(s.alphas, 1.0 - s.betas)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(np.diff(s.snr()) < 0)


def test_forward_sample_examples():
    s = make_linear_schedule(1, 0.5, 0.5)
    x = forward_sample(torch.ones(1, dtype=torch.float64), 1, torch.zeros(1, dtype=torch.float64), s)
    assert float(x) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    s3 = make_linear_schedule(3, 0.1, 0.3)
    e = torch.randn(5, dtype=torch.float64)
    for t in (1, 2, 3):
        np.testing.assert_allclose(forward_sample(torch.zeros(5, dtype=torch.float64), t, e, s3),
                                   math.sqrt(1 - s3.alpha_bars[t - 1]) * e, atol=1e-15)


def test_forward_step_examples():
    assert float(forward_step(torch.ones(1), 1, torch.zeros(1), make_linear_schedule(1, 0.5, 0.5))) == \
        pytest.approx(math.sqrt(0.5))
    assert float(forward_step(torch.zeros(1), 1, torch.ones(1), make_linear_schedule(1, 0.25, 0.25))) == \
        pytest.approx(0.5)


def test_forward_errors():
    s = make_linear_schedule(3, 0.1, 0.3)
    with pytest.raises(ValueError):
        forward_sample(torch.zeros(2), 1, torch.zeros(3), s)
    with pytest.raises(IndexError):
        forward_sample(torch.zeros(2), 4, torch.zeros(2), s)
    with pytest.raises(IndexError):
        forward_sample(torch.zeros(2), 0, torch.zeros(2), s)


def test_per_item_timesteps_broadcast():
    s = make_linear_schedule(10, 1e-3, 0.2)
    x0 = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    e = torch.randn_like(x0)
    t = torch.tensor([1, 5, 10])
    out = forward_sample(x0, t, e, s)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(out[i], forward_sample(x0[i:i + 1], ti, e[i:i + 1], s)[0])


def test_iterated_chain_matches_closed_form_moments():
    s = make_linear_schedule(3, 0.1, 0.3)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    n = 10_000
    x = x0.expand(n, -1, -1, -1).clone()
    for t in (1, 2, 3):
        x = forward_step(x, t, torch.randn(x.shape, generator=g, dtype=torch.float64), s)
    ab = s.alpha_bars[2]
    mean, var = x.mean(0), x.var(0)
    # standardized errors of the 256 per-element sample means; their average has sd 1/16
    z = (mean - math.sqrt(ab) * x0) / math.sqrt((1 - ab) / n)
    assert abs(float(z.mean())) < 3 / 16
    assert float((z.abs() > 3).double().mean()) < 0.02
    assert abs(float(var.mean()) - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / (n - 1)) / 16
    closed = forward_sample(x0.expand(n, -1, -1, -1), 3, torch.randn(x.shape, generator=g, dtype=torch.float64), s)
    zc = (closed.mean(0) - mean) / math.sqrt(2 * (1 - ab) / n)
    assert abs(float(zc.mean())) < 3 / 16
    assert abs(float(closed.var(0).mean() - var.mean())) < 3 * (1 - ab) * math.sqrt(4 / (n - 1)) / 16


def test_reverse_step_exact_inversion_at_t1():
    s = default_schedule(50)
    x0 = torch.randn(4, 8, 8, dtype=torch.float64)
    e = torch.randn_like(x0)
    xt = forward_sample(x0, 1, e, s)
    torch.testing.assert_close(reverse_step(xt, 1, e, s), x0, atol=1e-6, rtol=0)


def test_reverse_step_fixed_point_and_noise_rule():
    s = make_linear_schedule(10, 1e-3, 0.2)
    z = torch.zeros(4, 2, 2)
    assert torch.equal(reverse_step(z, 5, z, s, torch.zeros_like(z)), z)
    with pytest.raises(ValueError):
        reverse_step(z, 1, z, s, torch.ones_like(z))
    with pytest.raises(IndexError):
        reverse_step(z, 11, z, s)
    with pytest.raises(ValueError):
        reverse_step(z, 2, torch.zeros(3), s)


def test_reverse_chain_with_oracle_noise_recovers_x0():
    """Ancestral chain whose denoiser returns the noise that relates x_t to x0; mean lands on x0."""
    s = make_linear_schedule(10, 1e-3, 0.2)
    n = 10_000
    g = torch.Generator().manual_seed(1)
    x0 = torch.full((n, 1), 0.7, dtype=torch.float64)
    x = torch.randn(n, 1, generator=g, dtype=torch.float64)
    for t in range(s.T, 0, -1):
        ab = s.alpha_bars[t - 1]
        eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        noise = torch.randn(n, 1, generator=g, dtype=torch.float64) if t > 1 else torch.zeros(n, 1, dtype=torch.float64)
        x = reverse_step(x, t, eps, s, noise)
    assert abs(float(x.mean()) - 0.7) < 3 * float(x.std()) / math.sqrt(n) + 1e-9
