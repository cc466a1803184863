import numpy as np
import pytest

from radiotwin.features import build_features
from radiotwin.solver import SolverConfig
from radiotwin.surrogate import (
    SurrogateConfig, SurrogateError, SurrogateModel, gradient_check, surrogate_calibrate, surrogate_train,
    surrogate_train_arrays,
)
from radiotwin.synthetic import geometry_to_scene, planted_scene


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(0)
    model = SurrogateModel.initial(seed=3)
    xn = rng.normal(size=(64, 7))
    yn = rng.normal(size=64)
    errors = gradient_check(model, xn, yn, n_points=20, seed=1)
    assert errors.size == 20 and errors.max() < 1e-4


def test_fits_a_linear_target():
    # 8000 cells is about 60 minibatches per epoch; far fewer steps do not converge in 200 epochs
    rng = np.random.default_rng(1)
    X = rng.normal(size=(8000, 7))
    y = X @ rng.normal(size=7) + 0.5
    model = surrogate_train_arrays(X, y, SurrogateConfig(epochs=200, seed=0))
    assert np.mean((model.predict(X) - y) ** 2) < 1e-3
    assert model.history["best_val_loss"] == min(model.history["val_loss"])


def test_same_seed_same_model():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 7))
    y = np.sin(X[:, 0]) + X[:, 1]
    a = surrogate_train_arrays(X, y, SurrogateConfig(epochs=5, seed=4))
    b = surrogate_train_arrays(X, y, SurrogateConfig(epochs=5, seed=4))
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()


def test_json_round_trip(tmp_path):
    m = SurrogateModel.initial(seed=5, x_mean=np.arange(7.0), x_std=np.ones(7) * 2, y_mean=-90, y_std=10)
    m.save(tmp_path / "m.json")
    q = SurrogateModel.load(tmp_path / "m.json")
    X = np.random.default_rng(0).normal(size=(10, 7))
    np.testing.assert_array_equal(m.predict(X), q.predict(X))


def test_empty_training_set_rejected():
    with pytest.raises(SurrogateError):
        surrogate_train_arrays(np.zeros((0, 7)), np.zeros(0))


def _stack(ps):
    scene = geometry_to_scene(ps.geometry, ps.clean.transform)
    return build_features(scene, ps.antenna, ps.clean.transform, None)


@pytest.fixture(scope="module")
def two_scenes():
    cfg = SolverConfig(n_rays=8192, resolution=2.0)
    out = []
    for seed in (21, 22):
        ps = planted_scene(seed, n_buildings=10, n_cells=400, solver_config=cfg)
        out.append((ps, _stack(ps)))
    return out


def test_fine_tuning_never_worse_than_frozen(two_scenes):
    (ps_a, st_a), (ps_b, st_b) = two_scenes
    model = surrogate_train([st_a], [ps_a.truth], SurrogateConfig(epochs=30, seed=0))
    cal = surrogate_calibrate(model, st_b, ps_b.truth, epochs=20)
    assert cal.best_validation_mae <= cal.validation_mae[0]
    assert cal.best_validation_mae == min(cal.validation_mae)
    assert cal.n_train_cells + cal.n_validation_cells == ps_b.truth.n_valid
    # best-so-far is monotone by construction
    running = np.minimum.accumulate(cal.validation_mae)
    assert np.all(np.diff(running) <= 0)


def test_prediction_map_covers_grid(two_scenes):
    ps, stack = two_scenes[0]
    model = SurrogateModel.initial(seed=0)
    m = model.predict_map(stack)
    assert m.values.shape == (512, 512) and m.valid.all()
