"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vcm3d.data import degrade_axial
from vcm3d.metrics.frechet import frechet_distance
from vcm3d.metrics.overlap import assd, dice, hd95
from vcm3d.metrics.similarity import ssim
from vcm3d.schedule import SamplerConfig, ddim_step, forward_noise, inference_timesteps, linear_beta_schedule, predict_x0
from vcm3d.training import LossConfig, vcm_loss
from vcm3d.vcm import DropConfig, modulate, sample_drop_mask
from vcm3d.volio import Volume3D, axial_downsample, axial_flip, decode_array, encode_array

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

shapes3 = st.tuples(*[st.integers(1, 6)] * 3)
finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@st.composite
def schedules(draw):
    T = draw(st.integers(1, 300))
    lo = draw(st.floats(1e-5, 0.05))
    hi = draw(st.floats(lo, 0.2))
    return linear_beta_schedule(T, lo, hi)


@st.composite
def mask_pairs(draw, lo=2, hi=7):
    shape = draw(st.tuples(*[st.integers(lo, hi)] * 3))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    a = rng.random(shape) < draw(st.floats(0.05, 0.8))
    b = rng.random(shape) < draw(st.floats(0.05, 0.8))
    a.flat[0] = b.flat[-1] = True
    return a, b


@given(arrays(np.float32, shapes3, elements=finite), st.tuples(*[st.floats(0.1, 10)] * 3))
def test_container_roundtrip(data, spacing):
    back, sp = decode_array(encode_array(data, spacing))
    assert back.tobytes() == data.tobytes() and back.shape == data.shape
    assert sp == tuple(float(s) for s in spacing)


@given(schedules(), st.data())
def test_schedule_roundtrip_and_monotone(s, data):
    assert np.all(np.diff(s.alpha_bar) < 0) or s.T == 1
    t = data.draw(st.integers(1, s.T))
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    z0, eps = rng.standard_normal(5), rng.standard_normal(5)
    back = predict_x0(forward_noise(z0, t, eps, s), eps, t, s)
    np.testing.assert_allclose(back, z0, rtol=1e-6, atol=1e-6)


@given(schedules(), st.data())
def test_ddim_with_true_noise_lands_on_forward_marginal(s, data):
    # with eta = 0 and the true eps, one step maps q(z_t | z0, eps) to q(z_prev | z0, eps)
    t = data.draw(st.integers(1, s.T))
    tp = data.draw(st.integers(0, t - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    z0, eps = rng.standard_normal(4), rng.standard_normal(4)
    zt = forward_noise(z0, t, eps, s)
    out = ddim_step(zt, eps, t, tp, SamplerConfig(0.0), s)
    expect = z0 if tp == 0 else forward_noise(z0, tp, eps, s)
    np.testing.assert_allclose(out, expect, rtol=1e-6, atol=1e-6)


@given(st.integers(1, 2000), st.data())
def test_inference_timesteps_strictly_decreasing(T, data):
    n = data.draw(st.integers(1, T))
    ts = inference_timesteps(T, n)
    assert len(ts) == n and ts[0] == T
    assert all(a > b for a, b in zip(ts, ts[1:])) and ts[-1] >= 1


@given(st.integers(0, 0), st.floats(0.0, 1.0))
def test_sigma_bounded(_, eta):
    s = linear_beta_schedule()
    for t, tp in ((1000, 995), (50, 10), (2, 1)):
        assert 0.0 <= s.sigma(t, tp, eta) ** 2 <= 1 - s.alpha_bar_at(tp) + 1e-15


@given(mask_pairs())
def test_overlap_metric_ranges(pair):
    a, b = pair
    d = dice(a, b)
    assert 0.0 <= d <= 1.0 and d == dice(b, a)
    assert dice(a, a) == 1.0
    h, s = hd95(a, b), assd(a, b)
    assert h >= 0 and s >= 0 and h == hd95(b, a)
    assert s <= max(np.sqrt(sum((n - 1) ** 2 for n in a.shape)), 0)


@given(st.integers(0, 10_000), st.integers(3, 5))
def test_ssim_bounds_and_symmetry(seed, w):
    rng = np.random.default_rng(seed)
    a = rng.random((7, 7, 7))
    b = rng.random((7, 7, 7))
    v = ssim(a, b, window=w)
    assert -1.0 <= v <= 1.0
    assert math.isclose(v, ssim(b, a, window=w), abs_tol=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 20), st.integers(1, 6))
def test_frechet_nonnegative_and_symmetric(seed, n, d):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d)) * rng.uniform(0.5, 2)
    fab = frechet_distance(a, b)
    assert fab >= 0.0 and math.isclose(fab, frechet_distance(b, a), rel_tol=1e-6, abs_tol=1e-8)
    assert frechet_distance(a, a) <= 1e-8


@given(arrays(np.float32, st.tuples(st.integers(1, 24), st.integers(1, 4), st.integers(1, 4)), elements=st.floats(0, 1, width=32)),
       st.integers(1, 8))
def test_downsample_flip_properties(data, f):
    v = Volume3D(data)
    assert np.array_equal(axial_flip(axial_flip(v)).data, data)
    if data.shape[0] >= f:
        out = axial_downsample(v, f).data
        assert out.shape[0] == data.shape[0] // f
        assert out.min() >= data.min() - 1e-6 and out.max() <= data.max() + 1e-6


@given(st.integers(1, 8), st.integers(0, 1000))
def test_degrade_preserves_shape_and_constant(f, seed):
    x = torch.full((1, 1, 16, 3, 3), float(seed % 7) / 7)
    out = degrade_axial(x, f)
    assert out.shape == x.shape and torch.allclose(out, x)


@given(st.integers(0, 10_000))
def test_modulation_zero_is_identity(seed):
    e = torch.randn(2, 3, 2, 2, 2, generator=torch.Generator().manual_seed(seed))
    z = torch.zeros_like(e)
    assert torch.equal(modulate(e, z, z), e)


@given(st.integers(1, 64), st.tuples(*[st.integers(1, 32)] * 4))
def test_auto_lambda(b, lat):
    assert math.isclose(LossConfig().lam(b, lat) * b * math.prod(lat), 1.0, rel_tol=1e-15)


@given(st.integers(0, 10_000), st.floats(1e-6, 1.0))
def test_loss_nonnegative_and_decomposes(seed, lam):
    g = torch.Generator().manual_seed(seed)
    e, m, ga, be = (torch.randn(1, 2, 2, 2, 2, generator=g, dtype=torch.float64) for _ in range(4))
    p = vcm_loss(e, m, ga, be, lam)
    assert p["total"].item() >= 0.0
    assert abs(p["total"].item() - p["mse"].item() - lam * (p["l1_gamma"].item() + p["l1_beta"].item())) <= 1e-9


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_drop_mask_never_empty(n, seed):
    rng = np.random.default_rng(seed)
    dc = DropConfig() if n == 2 else DropConfig(scheme="independent", drop_probs=[0.5] * n)
    for _ in range(20):
        m = sample_drop_mask(dc, n, rng)
        assert m.shape == (n,) and m.any()
