import math

import numpy as np
import pytest

from xmodal_vit import tensor as T
from xmodal_vit.alignment import (
    ResponseMap, cga_loss, local_loss, response_maps, spatial_attention, total_loss,
)
from xmodal_vit.gradcheck import numeric_grad, rel_error
from xmodal_vit.vit import ModelConfig, forward, init_params


def t(x, grad=False):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_cga_examples():
    v = np.random.default_rng(0).normal(size=8)
    assert abs(cga_loss(t(v), t(v)).data) < 1e-6
    assert abs(cga_loss(t(v), t(-v)).data - 2) < 1e-6
    assert abs(cga_loss(t([1.0, 0.0]), t([0.0, 1.0])).data - 1) < 1e-12


def test_cga_scale_invariant_and_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    base = float(cga_loss(t(a), t(b)).data)
    assert abs(float(cga_loss(t(3.5 * a), t(0.2 * b)).data) - base) < 1e-6
    assert abs(float(cga_loss(t(b), t(a)).data) - base) < 1e-12
    assert 0.0 <= base <= 2.0


def test_spatial_attention_zero_weights_uniform():
    f = np.random.default_rng(2).normal(size=(64, 96))
    r = spatial_attention(t(f), t(f[0]), t(np.zeros((96, 96))), t(np.zeros((96, 96)))).data
    assert r.shape == (64,)
    np.testing.assert_allclose(r, 1 / 64)


def test_spatial_attention_permutation():
    rng = np.random.default_rng(3)
    f, c = rng.normal(size=(2, 64, 16)), rng.normal(size=(2, 16))
    wq, wk = rng.normal(size=(16, 16)) * 0.3, rng.normal(size=(16, 16)) * 0.3
    perm = rng.permutation(64)
    r = spatial_attention(t(f), t(c), t(wq), t(wk)).data
    rp = spatial_attention(t(f[:, perm]), t(c), t(wq), t(wk)).data
    np.testing.assert_allclose(rp, r[:, perm], atol=1e-6)


def test_local_loss_examples():
    r = np.full(10, 0.1)
    assert float(local_loss(t(r), t(r)).data) == pytest.approx(0.0, abs=1e-6)
    a, b = np.eye(4)[0], np.eye(4)[2]
    assert float(local_loss(t(a), t(b), lam=0.3).data) == pytest.approx(0.3)


def test_local_loss_range():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b = rng.dirichlet(np.ones(16) * 0.3, size=3), rng.dirichlet(np.ones(16) * 0.3, size=3)
        v = float(local_loss(t(a), t(b), lam=0.3).data)
        assert -1e-12 <= v <= 0.3 + 1e-12


def test_local_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        local_loss(t(np.ones(4) / 4), t(np.ones(5) / 5))


def test_response_map_text_round_trip():
    vals = np.random.default_rng(5).dirichlet(np.ones(64))
    back = ResponseMap.from_text(ResponseMap(vals, "n").to_text(), "n")
    np.testing.assert_allclose(back.values, vals, rtol=1e-8)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig.desk(depth=1)
    params = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    return cfg, params


def test_zero_head_identical_inputs(model):
    cfg, params = model
    p = dict(params)
    p["head.weight"] = t(np.zeros((96, 2)))
    p["head.bias"] = t(np.zeros(2))
    x = np.random.default_rng(6).uniform(size=(3, 64, 64, 3))
    out = forward(p, cfg, x)
    br = total_loss(p, cfg, out, forward(p, cfg, x, "n"), [0, 1, 0], lam=0.7).as_floats()
    assert br["total"] == pytest.approx(2 * math.log(2), abs=1e-6)
    assert abs(br["global_align"]) < 1e-6 and abs(br["local_align"]) < 1e-6


def test_breakdown_sums_and_mode_wiring(model):
    cfg, params = model
    rng = np.random.default_rng(7)
    w, n = rng.uniform(size=(2, 64, 64, 3)), rng.uniform(size=(2, 64, 64, 3))
    ow, on = forward(params, cfg, w), forward(params, cfg, n, "n")
    live = {}
    for mode in ("wl_only", "cga", "cga_sam"):
        br = total_loss(params, cfg, ow, on, [1, 0], mode=mode).as_floats()
        parts = br["cls_wl"] + br["cls_nbi"] + br["global_align"] + br["local_align"]
        assert abs(parts - br["total"]) < 1e-9
        live[mode] = {k for k in ("cls_wl", "cls_nbi", "global_align", "local_align") if br[k] != 0.0}
    assert live["wl_only"] == {"cls_wl"}
    assert live["wl_only"] < live["cga"] < live["cga_sam"]
    with pytest.raises(ValueError):
        total_loss(params, cfg, ow, on, [1, 0], mode="bogus")
    with pytest.raises(ValueError):
        total_loss(params, cfg, ow, None, [1, 0], mode="cga")


def test_total_loss_grad_wrt_sam_query(model):
    cfg, params = model
    rng = np.random.default_rng(8)
    w, n = rng.uniform(size=(2, 64, 64, 3)), rng.uniform(size=(2, 64, 64, 3))
    wq = params["sam.0.wq"]
    # moderate logits: a saturated softmax would leave nothing to check
    wq.data += rng.normal(0, 0.05, size=wq.shape)
    params["sam.0.wk"].data += rng.normal(0, 0.05, size=wq.shape)

    def value():
        return float(total_loss(params, cfg, forward(params, cfg, w), forward(params, cfg, n, "n"), [0, 1]).total.data)

    for p in params.values():
        p.grad = None
    total_loss(params, cfg, forward(params, cfg, w), forward(params, cfg, n, "n"), [0, 1]).total.backward()
    coords = list(rng.choice(wq.size, size=15, replace=False))
    with T.no_grad():
        numeric = numeric_grad(value, wq.data, coords=coords)
    assert rel_error(wq.grad.reshape(-1)[coords], numeric) < 1e-3


def test_response_maps_are_distributions(model):
    cfg, params = model
    out = forward(params, cfg, np.random.default_rng(9).uniform(size=(2, 64, 64, 3)))
    maps = response_maps(params, cfg, out)
    assert len(maps) == 2
    for m in maps:
        assert m.values.shape == (64,) and abs(m.values.sum() - 1) < 1e-9 and m.values.min() >= 0
