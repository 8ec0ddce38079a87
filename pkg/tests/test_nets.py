import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowdistill.diffcore import Graph, ShapeError, Tensor, finite_diff_check, ops, precision
from flowdistill.nets import (
    NetConfig,
    StudentNet,
    TeacherNet,
    draw_mask,
    is_time_parameter,
    mask_noise_embedding,
    mask_probability,
    parameter_manifest,
    sinusoidal_embed,
)

TINY = NetConfig(horizon=8, channels=(8, 12), embed_dim=8, obs_dim=6)


def test_sinusoidal_embed_matches_direct_formula():
    t = np.array([0.0, 0.3, 1.0])
    out = sinusoidal_embed(t, dim=8, max_period=1000.0)
    freqs = [1000.0 ** (k / 3) for k in range(4)]
    for i, ti in enumerate(t):
        for k, f in enumerate(freqs):
            assert out[i, 2 * k] == pytest.approx(math.sin(f * ti), abs=1e-9)
            assert out[i, 2 * k + 1] == pytest.approx(math.cos(f * ti), abs=1e-9)
    assert sinusoidal_embed(0.5, dim=8).shape == (8,)


@pytest.mark.parametrize("bad", [-0.1, 1.5, float("nan")])
def test_sinusoidal_embed_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        sinusoidal_embed(bad)


def test_mask_probability_schedule():
    t = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(mask_probability(t), [0, 0, 0, 0.5, 1.0])


@pytest.mark.parametrize("t", [0.2, 0.6, 0.75, 0.9])
def test_mask_rate_monte_carlo(t):
    # empirical suppression frequency matches p(t) within 4 standard errors
    rng = np.random.default_rng(1)
    n = 20000
    keep = draw_mask(np.full(n, t), rng)
    p = float(mask_probability(t))
    se = math.sqrt(max(p * (1 - p), 1e-12) / n)
    assert abs((1 - keep.mean()) - p) <= 4 * se + 1e-12


def test_masking_zeroes_whole_samples():
    x = np.ones((3, 4, 5))
    out = mask_noise_embedding(x, None, None, keep=np.array([1.0, 0.0, 1.0])).data
    assert np.all(out[1] == 0) and np.all(out[0] == 1) and np.all(out[2] == 1)


def test_student_is_teacher_minus_time_pathway():
    t, s = TeacherNet(TINY, seed=0), StudentNet(TINY, seed=0)
    tm, sm = parameter_manifest(t.net), parameter_manifest(s.net)
    assert set(sm) == {k for k in tm if not is_time_parameter(k)}
    assert all(tm[k] == sm[k] for k in sm)
    assert any(is_time_parameter(k) for k in tm)
    assert not any(is_time_parameter(k) for k in sm)


def test_default_parameter_counts_are_modest():
    t, s = TeacherNet(), StudentNet()
    assert s.num_parameters() < t.num_parameters() < 1_000_000


def test_forward_shapes_and_nfe_counting(rng):
    t, s = TeacherNet(TINY, seed=0), StudentNet(TINY, seed=1)
    x = rng.standard_normal((5, 8, 2)).astype(np.float32)
    e = rng.standard_normal((5, 6)).astype(np.float32)
    assert t.forward(x, np.full(5, 0.3), e).shape == (5, 8, 2)
    assert t.nfe == 5
    assert t.forward(x[0], 0.3, e[0]).shape == (8, 2)
    assert t.nfe == 6
    assert s.forward(x, e).shape == (5, 8, 2)
    # one observation embedding broadcast over a batch
    assert s.forward(x, e[:1]).shape == (5, 8, 2)
    assert s.nfe == 10


def test_forward_shape_errors(rng):
    t, s = TeacherNet(TINY), StudentNet(TINY)
    with pytest.raises(ShapeError):
        s.forward(np.zeros((2, 7, 2), np.float32), np.zeros((2, 6), np.float32))
    with pytest.raises(ShapeError):
        s.forward(np.zeros((2, 8, 2), np.float32), np.zeros((3, 6), np.float32))
    with pytest.raises(ValueError):
        t.forward(np.zeros((1, 8, 2), np.float32), 1.5, np.zeros((1, 6), np.float32))
    with pytest.raises(ValueError):
        t.net(np.zeros((1, 8, 2), np.float32), np.zeros((1, 6), np.float32))


def test_teacher_depends_on_time_student_on_noise(rng):
    t, s = TeacherNet(TINY, seed=0), StudentNet(TINY, seed=0)
    for p in list(t.parameters().values()) + list(s.parameters().values()):
        p.data = p.data + 0.3 * rng.standard_normal(p.shape).astype(p.dtype)
    x = rng.standard_normal((1, 8, 2)).astype(np.float32) * 0.06
    e = rng.standard_normal((1, 6)).astype(np.float32)
    assert not np.allclose(t.forward(x, 0.1, e).data, t.forward(x, 0.9, e).data)
    z1, z2 = rng.standard_normal((2, 1, 8, 2)).astype(np.float32)
    assert not np.allclose(s.forward(z1, e).data, s.forward(z2, e).data)


def test_from_teacher_copies_shared_weights():
    t = TeacherNet(TINY, seed=3)
    s = StudentNet.from_teacher(t, seed=9)
    ts = t.state_dict()
    for k, v in s.state_dict().items():
        assert np.array_equal(v, ts[k])


def _f64(policy):
    policy.net.astype(np.float64)
    return policy


@pytest.mark.parametrize("seed", range(3))
def test_teacher_and_student_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        t = _f64(TeacherNet(TINY, seed=seed))
        s = _f64(StudentNet(TINY, seed=seed))
        x = rng.standard_normal((2, 8, 2)) * 0.06
        e = rng.standard_normal((2, 6))
        tt = rng.uniform(0.05, 0.95, 2)
        target = Tensor(rng.standard_normal((2, 8, 2)) * 0.06)
        err_t = finite_diff_check(lambda: ops.squared_error(t.forward(x, tt, e), target), t.parameters(), eps=1e-4, seed=seed)
        err_s = finite_diff_check(lambda: ops.squared_error(s.forward(x, e), target), s.parameters(), eps=1e-4, seed=seed)
    assert err_t < 1e-3 and err_s < 1e-3


@given(st.integers(1, 4))
def test_batch_items_are_independent(b):
    # every sample's output depends only on its own inputs
    rng = np.random.default_rng(b)
    s = StudentNet(TINY, seed=0)
    z = rng.standard_normal((b, 8, 2)).astype(np.float32)
    e = rng.standard_normal((b, 6)).astype(np.float32)
    full = s.forward(z, e).data
    for i in range(b):
        np.testing.assert_allclose(s.forward(z[i : i + 1], e[i : i + 1]).data[0], full[i], rtol=1e-5, atol=1e-7)


def test_backward_reaches_every_parameter(rng):
    t = TeacherNet(TINY, seed=0)
    params = t.parameters()
    with Graph() as g:
        loss = ops.squared_error(
            t.forward(rng.standard_normal((3, 8, 2)).astype(np.float32), np.full(3, 0.4), rng.standard_normal((3, 6)).astype(np.float32)),
            Tensor(np.ones((3, 8, 2), np.float32)),
        )
    grads = g.backward(loss, params)
    dead = [k for k, v in grads.items() if not np.any(v) and not k.endswith("bias")]
    assert not dead
