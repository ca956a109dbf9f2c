import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deqbilevel import EquilibriumReconstructor
from deqbilevel.data_io import synth_dataset


@pytest.fixture(scope="module")
def data():
    return synth_dataset(0, 6, 6, 6)


@pytest.fixture(scope="module")
def fitted(data):
    est = EquilibriumReconstructor(task="inpaint", epochs=5, lr=1e-2)
    return est.fit(data.images[:4], X_val=data.images[4:])


def test_get_params_and_clone():
    est = EquilibriumReconstructor(tau=0.3, activation="softshrink")
    params = est.get_params()
    assert params["tau"] == 0.3 and params["activation"] == "softshrink"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(gamma=0.7)
    assert est.gamma == 0.7 and twin.gamma == 0.1


def test_fit_sets_attributes(fitted):
    assert fitted.image_shape_ == (6, 6)
    assert fitted.n_features_in_ == 36
    assert len(fitted.records_) == 6
    assert fitted.tau_ == 0.5


def test_transform_shapes(fitted, data):
    F = fitted.measure(data.images[4:])
    U = fitted.transform(F)
    assert U.shape == (2, 36)
    np.testing.assert_array_equal(fitted.predict(F), U)


def test_score_matches_last_record(fitted, data):
    assert fitted.score(data.images[4:]) == pytest.approx(-fitted.records_[-1].test_loss, rel=1e-12)


def test_accepts_image_arrays(data):
    imgs = data.as_images()
    est = EquilibriumReconstructor(epochs=1).fit(imgs[:2])
    assert est.image_shape_ == (6, 6)
    assert est.measure(imgs[2:]).shape == (4, 36)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        EquilibriumReconstructor().transform(np.zeros((1, 4)))


def test_validation_errors(fitted):
    with pytest.raises(ValueError):
        EquilibriumReconstructor(epochs=1).fit(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        EquilibriumReconstructor(image_shape=(3, 3), epochs=1).fit(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        fitted.transform(np.full((1, 36), np.nan))
    with pytest.raises(ValueError):
        EquilibriumReconstructor(mode="gan", epochs=1).fit(np.zeros((2, 4)))


def test_non_square_with_shape():
    X = synth_dataset(0, 3, 4, 6).images
    est = EquilibriumReconstructor(image_shape=(4, 6), epochs=2).fit(X)
    assert est.transform(est.measure(X)).shape == (3, 24)


def test_aborted_training_raises():
    X = synth_dataset(0, 2, 4, 4).images
    with pytest.raises(RuntimeError):
        EquilibriumReconstructor(tau=100.0, max_iter=50, epochs=2).fit(X)
