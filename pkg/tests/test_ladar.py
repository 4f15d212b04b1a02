import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solar import autodiff as ad
from solar.anchors import GaussianAttributeNet, decode_anchors
from solar.btc import BtcPair
from solar.ladar import (GradientStatistic, RecalConfig, count_triggers, grad_norm_btc_f, recalibrate,
                         should_recalibrate, update_ema)
from solar.losses import rendering_loss
from solar.render import Camera, render_tensor


def run_ema(trace, alpha=0.3):
    s = GradientStatistic(alpha)
    for g in trace:
        s = update_ema(s, g)
    return s


def test_grad_norm_cases(rng):
    pair = BtcPair(3, 4)
    pair.btc_f.layers[0].latent_w.grad = None
    with pytest.raises(RuntimeError):
        grad_norm_btc_f(pair)
    for p in pair.btc_f.params():
        p.grad = np.zeros(p.shape)
    assert grad_norm_btc_f(pair) == 0
    pair.btc_f.layers[1].bias.grad[2] = 3.0
    assert grad_norm_btc_f(pair) == 3.0
    for p in pair.btc_f.params():
        p.grad = rng.normal(size=p.shape)
    for p in pair.btc_x.params():  # BTC_x gradients do not count
        p.grad = rng.normal(size=p.shape)
    ref = np.sqrt(sum(np.sum(p.grad ** 2) for p in pair.btc_f.params()))
    assert abs(grad_norm_btc_f(pair) - ref) < 1e-12


def test_ema_examples():
    assert abs(run_ema([1.0]).ema - 0.7) < 1e-15
    c = 2.5
    assert abs(run_ema([c] * 20).ema - c) < c * 0.3 ** 20 * 1.0000001
    # hand recursion: 0.3 * (0.3 * 0.7 + 1.4) + 2.1
    s = run_ema([1, 2, 3])
    assert abs(s.ema - (0.3 * (0.3 * 0.7 + 1.4) + 2.1)) < 1e-12
    assert abs(s.ema - 2.583) < 1e-12
    assert s.step == 3 and s.g_current == 3
    with pytest.raises(ValueError):
        update_ema(GradientStatistic(), -1.0)


@pytest.mark.parametrize("seed", range(5))
def test_ema_closed_form(seed):
    rng = np.random.default_rng(seed)
    g = rng.exponential(size=500)
    a = 0.3
    closed = (1 - a) * np.sum(a ** np.arange(499, -1, -1) * g)
    assert abs(run_ema(g, a).ema - closed) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.lists(st.floats(0, 10), min_size=1, max_size=40))
def test_ema_linearity(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    assert abs(run_ema(a + b).ema - (run_ema(a).ema + run_ema(b).ema)) < 1e-9


def test_threshold_is_strict():
    cfg = RecalConfig(eps_d=0.002)
    assert not should_recalibrate(GradientStatistic(ema=0.002), cfg)
    assert should_recalibrate(GradientStatistic(ema=0.0021), cfg)


def test_trigger_count_monotone(rng):
    trace = rng.exponential(0.002, size=300)
    counts = [count_triggers(trace, e) for e in (0.0015, 0.002, 0.003)]
    assert counts[0] >= counts[1] >= counts[2]
    assert counts[1] == sum(should_recalibrate(GradientStatistic(ema=v), RecalConfig(0.002)) for v in trace)


def test_config_validation():
    with pytest.raises(ValueError):
        RecalConfig(eps_d=0)
    with pytest.raises(ValueError):
        RecalConfig(t_recal=-1)


def scene(rng):
    cam = Camera.look_at([0.3, -3, 0.4], [0, 0, 0], [0, 0, 1], 24, 24, 12, 12)
    x, f = rng.uniform(-0.4, 0.4, (4, 3)), rng.normal(size=(4, 3))
    l = np.full((4, 3), 0.4)
    dc = cam.view_dir([0, 0, 0])
    return cam, x, f, l, dc


def make_loss(cam, x, f, l, dc, target):
    def loss_fn(net, step):
        g = decode_anchors(x, f, l, net, dc, trainable=True)
        return rendering_loss(render_tensor(g, cam), target)
    return loss_fn


def test_zero_steps_is_a_no_op(rng):
    ng = GaussianAttributeNet(3, k=2, hidden=8, rng=rng)
    out, changed = recalibrate(ng, lambda n, s: 1 / 0, RecalConfig(t_recal=0))
    assert out is ng and not changed


def test_perfect_frame_keeps_weights(rng):
    cam, x, f, l, dc = scene(rng)
    ng = GaussianAttributeNet(3, k=2, hidden=8, rng=rng)
    target = render_tensor(decode_anchors(x, f, l, ng, dc), cam).value
    loss_fn = make_loss(cam, x, f, l, dc, target)
    # L1 has a kink at zero; use the squared error so a perfect frame has zero gradient
    sq = lambda net, step: ((render_tensor(decode_anchors(x, f, l, net, dc, True), cam) - target) ** 2).sum()  # noqa
    out, changed = recalibrate(ng, sq, RecalConfig(t_recal=20))
    assert changed
    for a, b in zip(out.params(), ng.params()):
        assert np.max(np.abs(a.value - b.value)) < 1e-9
    assert float(loss_fn(out, 0).value) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_recal_reduces_loss_under_mismatch(seed):
    rng = np.random.default_rng(seed)
    cam, x, f, l, dc = scene(rng)
    ng = GaussianAttributeNet(3, k=2, hidden=8, rng=rng)
    target = render_tensor(decode_anchors(x, f, l, ng, dc), cam).value
    bad = ng.copy()
    for p in bad.params():
        p.value = p.value + rng.normal(size=p.shape) * 0.3
    loss_fn = make_loss(cam, x, f, l, dc, target)
    anchors_before = (x.tobytes(), f.tobytes(), l.tobytes())
    before = float(loss_fn(bad, 0).value)
    out, changed = recalibrate(bad, loss_fn, RecalConfig(t_recal=40, lr_recal=5e-3))
    assert changed and out is not bad
    assert float(loss_fn(out, 0).value) < before
    assert anchors_before == (x.tobytes(), f.tobytes(), l.tobytes())
    assert float(loss_fn(bad, 0).value) == before  # input net untouched


def test_divergent_recal_keeps_previous(rng):
    ng = GaussianAttributeNet(3, k=1, hidden=4, rng=rng)

    def loss_fn(net, step):
        if step == 3:
            raise ad.NonFiniteError("boom")
        return (net.weights[0] * 1.0).sum()

    out, changed = recalibrate(ng, loss_fn, RecalConfig(t_recal=10))
    assert out is ng and not changed
