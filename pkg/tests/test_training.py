import math

import numpy as np
import pytest
from sklearn.base import clone

from xmodal_vit import checkpoint
from xmodal_vit.data import SyntheticGenConfig, generate_synthetic, stack_images, subject_kfold
from xmodal_vit.estimator import CrossModalViTClassifier
from xmodal_vit.experiment import run_experiment
from xmodal_vit.optim import SGD, cosine_lr, sgd_step
from xmodal_vit.tensor import Tensor
from xmodal_vit.training import (
    NumericalError, TrainConfig, compute_loss, evaluate, iterate_batches, train_step,
)
from xmodal_vit.vit import ModelConfig, init_params, strip_sam, trainable


# -- schedule and optimiser ----------------------------------------------

def test_cosine_schedule_points():
    assert cosine_lr(0, 500, 1e-3) == 1e-3
    assert cosine_lr(500, 500, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(250, 500, 1e-3) == pytest.approx(5e-4)


def test_cosine_clamps_past_end():
    with pytest.warns(UserWarning):
        assert cosine_lr(600, 500, 1.0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)


def test_sgd_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_weight_decay_only():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9, weight_decay=0.5)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_sgd_momentum_recurrence():
    p, state = {"w": np.array([0.0])}, {}
    for _ in range(3):
        sgd_step(p, {"w": np.array([1.0])}, state, lr=1.0, momentum=0.5, weight_decay=0.0)
    # v: 1, 1.5, 1.75
    np.testing.assert_allclose(p["w"], [-4.25])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1, 0.9, 0.0)


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig.desk(depth=1)
    samples = generate_synthetic(SyntheticGenConfig(samples_per_class=16, n_subjects=8))
    return cfg, samples


def _batch(samples, n=8):
    return stack_images(samples[:n], "wl").astype(np.float32), stack_images(samples[:n], "nbi").astype(np.float32), \
        np.array([s.label for s in samples[:n]])


def test_sgd_runs_are_bit_identical(tiny):
    cfg, samples = tiny
    wl, nbi, y = _batch(samples)

    def run():
        params = init_params(cfg, np.random.default_rng(0))
        opt = SGD(trainable(params), 1e-2)
        for step in range(5):
            train_step(params, cfg, opt, wl, nbi, y, "cga_sam", 0.3, 1e-2, step)
        return params

    a, b = run(), run()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


# -- loss and steps -------------------------------------------------------

def test_wl_only_breakdown_zeros(tiny):
    cfg, samples = tiny
    wl, nbi, y = _batch(samples)
    params = init_params(cfg, np.random.default_rng(1))
    br = compute_loss(params, cfg, wl, None, y, "wl_only").as_floats()
    assert br["cls_nbi"] == br["global_align"] == br["local_align"] == 0.0


def test_first_batch_loss_near_ln2(tiny):
    cfg, samples = tiny
    balanced = [s for s in samples if s.label == 0][:4] + [s for s in samples if s.label == 1][:4]
    wl, nbi, y = _batch(balanced)
    params = init_params(cfg, np.random.default_rng(2))
    assert abs(compute_loss(params, cfg, wl, nbi, y, "cga_sam").as_floats()["cls_wl"] - math.log(2)) < 0.15


def test_single_step_decreases_loss_on_that_pair():
    cfg = ModelConfig.desk()
    s = generate_synthetic(SyntheticGenConfig(samples_per_class=1, n_subjects=1))[0]
    for rep in range(10):
        params = init_params(cfg, np.random.default_rng(rep))
        wl, nbi, y = s.wl[None].astype(np.float32), s.nbi[None].astype(np.float32), [s.label]
        before = compute_loss(params, cfg, wl, nbi, y, "cga_sam").as_floats()["total"]
        train_step(params, cfg, SGD(trainable(params), 1e-3), wl, nbi, y, "cga_sam", 0.3, 1e-3)
        after = compute_loss(params, cfg, wl, nbi, y, "cga_sam").as_floats()["total"]
        assert after < before


def test_nan_aborts_with_step(tiny):
    cfg, samples = tiny
    wl, nbi, y = _batch(samples)
    params = init_params(cfg, np.random.default_rng(3))
    params["head.bias"].data[0] = np.nan
    with pytest.raises(NumericalError) as exc:
        train_step(params, cfg, SGD(trainable(params)), wl, nbi, y, "cga", 0.3, 1e-3, step=17)
    assert exc.value.step == 17


def test_iterate_batches_drop_last():
    assert [len(b) for b in iterate_batches(10, 4, None, drop_last=True)] == [4, 4]
    assert [len(b) for b in iterate_batches(10, 4, None, drop_last=False)] == [4, 4, 2]


# -- evaluation -----------------------------------------------------------

def _constant_model(cfg, cls):
    params = init_params(cfg, np.random.default_rng(0), with_sam=False)
    params["head.weight"].data[...] = 0
    params["head.bias"].data[...] = [1.0, 0.0] if cls == 0 else [0.0, 1.0]
    return params


def test_constant_prediction_accuracy(tiny):
    cfg, samples = tiny
    imgs = stack_images(samples[:10], "wl")
    labels = np.array([0] * 6 + [1] * 4)
    assert evaluate(_constant_model(cfg, 0), cfg, imgs, labels) == pytest.approx(0.6)
    assert evaluate(_constant_model(cfg, 1), cfg, imgs, labels) == pytest.approx(0.4)


def test_accuracy_order_invariant(tiny):
    cfg, samples = tiny
    params = init_params(cfg, np.random.default_rng(4))
    imgs, labels = stack_images(samples, "wl"), np.array([s.label for s in samples])
    perm = np.random.default_rng(5).permutation(len(samples))
    assert evaluate(params, cfg, imgs, labels) == evaluate(params, cfg, imgs[perm], labels[perm])


def test_evaluate_full_equals_stripped(tiny):
    cfg, samples = tiny
    params = init_params(cfg, np.random.default_rng(6))
    imgs, labels = stack_images(samples, "wl"), [s.label for s in samples]
    assert evaluate(params, cfg, imgs, labels) == evaluate(strip_sam(params), cfg, imgs, labels)


def test_evaluate_empty(tiny):
    cfg, _ = tiny
    with pytest.raises(ValueError):
        evaluate(init_params(cfg, np.random.default_rng(0)), cfg, np.zeros((0, 64, 64, 3)), [])


# -- checkpoint -----------------------------------------------------------

def test_checkpoint_round_trip_and_prune(tmp_path, tiny):
    cfg, samples = tiny
    params = init_params(cfg, np.random.default_rng(7))
    checkpoint.save(tmp_path / "full.ckpt", cfg, params)
    checkpoint.save(tmp_path / "pruned.ckpt", cfg, params, prune=True)
    cfg2, full = checkpoint.load(tmp_path / "full.ckpt")
    _, pruned = checkpoint.load(tmp_path / "pruned.ckpt")
    assert cfg2 == cfg
    assert set(full) - set(pruned) == {"sam.0.wq", "sam.0.wk"}
    assert all(np.array_equal(full[k].data, params[k].data) for k in full)
    assert not full["input.mean"].requires_grad
    imgs, labels = stack_images(samples, "wl"), [s.label for s in samples]
    assert evaluate(strip_sam(full), cfg, imgs, labels) == evaluate(pruned, cfg, imgs, labels)
    manifest = checkpoint.manifest_path(tmp_path / "full.ckpt").read_text()
    assert "sam.0.wq" in manifest and "input.mean" in manifest


def test_checkpoint_corruption(tmp_path, tiny):
    cfg, _ = tiny
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, cfg, init_params(cfg, np.random.default_rng(0)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)
    path.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)


# -- estimator ------------------------------------------------------------

def test_estimator_sklearn_contract(tiny):
    est = CrossModalViTClassifier(depth=1, max_epochs=2, lr=0.01)
    assert clone(est).get_params() == est.get_params()
    est.set_params(mode="cga")
    assert est.get_params()["mode"] == "cga"


def test_estimator_fit_predict(tiny, tmp_path):
    cfg, samples = tiny
    X, Xn = stack_images(samples, "wl"), stack_images(samples, "nbi")
    y = np.array([s.label for s in samples])
    est = CrossModalViTClassifier(depth=1, max_epochs=2, lr=0.01, batch_size=8)
    est.fit(X, y, X_nbi=Xn, eval_set=(X, y))
    assert len(est.history_) == 2 and est.has_alignment_params
    proba = est.predict_proba(X)
    assert proba.shape == (len(y), 2) and np.allclose(proba.sum(1), 1)
    assert est.transform(X).shape == (len(y), 96)
    assert est.score(X, y) == est.best_score_
    est.save(tmp_path / "e.ckpt", prune=True)
    back = CrossModalViTClassifier.load(tmp_path / "e.ckpt")
    assert not back.has_alignment_params
    assert np.array_equal(back.decision_function(X), est.decision_function(X))


def test_estimator_input_validation(tiny):
    cfg, samples = tiny
    X = stack_images(samples, "wl")
    y = np.array([s.label for s in samples])
    with pytest.raises(ValueError, match="X_nbi"):
        CrossModalViTClassifier(depth=1, max_epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        CrossModalViTClassifier(depth=1, max_epochs=1, mode="wl_only").fit(X * 2, y)
    with pytest.raises(ValueError):
        CrossModalViTClassifier(depth=1, max_epochs=1, mode="wl_only").fit(X, y[:-1])
    with pytest.raises(ValueError):
        CrossModalViTClassifier(depth=1, max_epochs=501, mode="wl_only").fit(X, y)


# -- experiment -----------------------------------------------------------

def test_single_fold_report_and_repeatability(tiny):
    cfg, samples = tiny
    tcfg = TrainConfig(lr0=0.01, max_epochs=1, batch_size=8, mode="wl_only")
    split = subject_kfold(samples, 1, 0)
    r1 = run_experiment(tcfg, cfg, samples, split)
    r2 = run_experiment(tcfg, cfg, samples, split)
    assert r1.header() == ["method", "fold1", "mean"]
    assert len(r1.table_rows()) == 1
    assert r1.to_csv() == r2.to_csv()


def test_report_table_shape(tiny):
    cfg, samples = tiny
    tcfg = TrainConfig(lr0=0.01, max_epochs=1, batch_size=8)
    rep = run_experiment(tcfg, cfg, samples, subject_kfold(samples, 2, 0), modes=["wl_only", "cga"])
    assert rep.header() == ["method", "fold1", "fold2", "mean"]
    assert [r[0] for r in rep.table_rows()] == ["Trans with WL-only", "Trans + CGA"]
