import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pfnet import (
    GCNRegressor, MLPRegressor, PerturbSpec, PowerFlowNetRegressor, TrainingError, generate_dataset,
)
from pfnet.dataset import compute_norm
from pfnet.estimator import GraphRegressor, pooled_norm


@pytest.fixture(scope="module")
def fitted(small_ds):
    return PowerFlowNetRegressor(epochs=200, seed=0).fit(small_ds)


@pytest.fixture(scope="module")
def ds118(case118):
    return generate_dataset(case118, PerturbSpec(seed=3), 20)


def test_params_round_trip():
    est = PowerFlowNetRegressor(model="medium", loss="mixed", w=0.3)
    params = est.get_params()
    assert params["model"] == "medium" and params["w"] == 0.3 and params["batch_size"] == 128
    assert clone(est).get_params() == params
    est.set_params(hidden=32)
    assert est.model_config().hidden == 32 and est.model_config().n_layers == 4


def test_training_reduces_loss(fitted):
    h = fitted.history_
    assert len(h) == 200
    assert h[-1]["train_loss"] < h[0]["train_loss"]
    assert fitted.best_epoch_ == int(np.argmin([r["val_masked_l2"] for r in h])) + 1


def test_identical_runs_identical_curves(small_ds):
    a = PowerFlowNetRegressor(epochs=8, seed=4).fit(small_ds)
    b = PowerFlowNetRegressor(epochs=8, seed=4).fit(small_ds)
    keys = ("train_loss", "val_masked_l2", "val_mse")
    assert [[r[k] for k in keys] for r in a.history_] == [[r[k] for k in keys] for r in b.history_]
    assert all(np.array_equal(a.model_.params[k].data, b.model_.params[k].data) for k in a.model_.params)


def test_predict_shapes(fitted, small_ds):
    out = fitted.predict(small_ds)
    assert out.shape == (200, 14, 4) and np.all(np.isfinite(out))
    one = fitted.predict(small_ds.graph(3))
    np.testing.assert_allclose(one, out[3], atol=1e-12)
    many = fitted.predict([small_ds.graph(0), small_ds.graph(1)])
    assert len(many) == 2 and many[1].shape == (14, 4)
    np.testing.assert_allclose(fitted.predict(small_ds, [5, 6]), out[5:7], atol=1e-12)


def test_score_is_negative_masked_l2(fitted, small_ds):
    s = fitted.score(small_ds)
    assert s < 0
    idx = small_ds.indices("test")
    pred = fitted.predict_normalized(small_ds, idx)
    _, y, _ = small_ds.normalized_arrays(fitted.norm_)
    m = np.broadcast_to(small_ds.mask, pred.shape)
    assert s == pytest.approx(-np.sum(((pred - y[idx]) * m) ** 2) / m.sum(), rel=1e-12)


def test_unfitted_predict_raises(small_ds):
    with pytest.raises(NotFittedError):
        PowerFlowNetRegressor().predict(small_ds)


@pytest.mark.parametrize("kw", [dict(loss="l1"), dict(epochs=0), dict(w=2.0), dict(model="huge")])
def test_bad_params_rejected(kw, small_ds):
    with pytest.raises(ValueError):
        PowerFlowNetRegressor(**kw).fit(small_ds)


def test_non_dataset_rejected():
    with pytest.raises(TypeError):
        PowerFlowNetRegressor(epochs=1).fit(np.zeros((3, 4)))


def test_nan_loss_reports_diagnostics(small_ds):
    est = PowerFlowNetRegressor(epochs=5, lr=1e200, weight_decay=0.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as exc:
        est.fit(small_ds)
    msg = str(exc.value)
    assert "epoch" in msg and "batch" in msg and "mask.0.W" in msg


def test_early_stopping(small_ds):
    est = PowerFlowNetRegressor(epochs=50, lr=0.0, weight_decay=0.0, patience=3).fit(small_ds)
    assert est.n_epochs_ == 4 and est.best_epoch_ == 1


@pytest.mark.parametrize("loss", ["physical", "mixed"])
def test_physics_losses_train(loss, small_ds):
    est = PowerFlowNetRegressor(epochs=3, loss=loss).fit(small_ds)
    assert all(np.isfinite(r["train_loss"]) for r in est.history_)


def test_multi_topology_training(small_ds, ds118):
    est = PowerFlowNetRegressor(epochs=2, hidden=16).fit([small_ds, ds118])
    assert est.fingerprints_ == [small_ds.fingerprint, ds118.fingerprint]
    assert est.predict(ds118).shape == (20, 118, 4)
    with pytest.raises(ValueError, match="single graph size"):
        MLPRegressor(epochs=1).fit([small_ds, ds118])


def test_pooled_norm_uses_both_training_splits(small_ds, ds118):
    norm = pooled_norm([small_ds, ds118])
    a = small_ds.x[small_ds.indices("train")]
    b = ds118.x[ds118.indices("train")]
    vm = np.concatenate([a[..., 0][:, small_ds.mask[:, 0] == 0].ravel(),
                         b[..., 0][:, ds118.mask[:, 0] == 0].ravel()])
    assert norm.mean[0] == pytest.approx(vm.mean(), rel=1e-12)
    assert pooled_norm([small_ds]) == small_ds.norm
    assert compute_norm(a, small_ds.mask, small_ds.edge_attr[small_ds.indices("train")]) == small_ds.norm


@pytest.mark.parametrize("cls", [GCNRegressor, MLPRegressor])
def test_baselines_fit(cls, small_ds):
    est = cls(epochs=3).fit(small_ds)
    assert est.predict(small_ds).shape == (200, 14, 4)
    assert est.model_.cfg.arch == cls.arch


def test_checkpoint_round_trip_estimator(fitted, small_ds):
    again = GraphRegressor.from_checkpoint(fitted.to_checkpoint())
    assert isinstance(again, PowerFlowNetRegressor)
    assert again.get_params() == fitted.get_params()
    np.testing.assert_array_equal(again.predict(small_ds), fitted.predict(small_ds))
