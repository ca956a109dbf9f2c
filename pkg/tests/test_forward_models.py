import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deqbilevel.forward_models import (
    NoiseSpec,
    ProblemKind,
    build_operator,
    default_blur_kernel,
    default_mask,
    measure,
    noise,
)
from deqbilevel.linops import ConvKernelBank, Identity, RowMask, image_to_vector, vector_to_image


def test_default_mask_examples():
    assert default_mask(28) == tuple(range(10))
    assert default_mask(3) == (0,)
    assert default_mask(10) == (0, 1, 2, 3)
    with pytest.raises(ValueError):
        default_mask(0)


def test_denoise_is_identity(rng):
    K = build_operator("denoise", (4, 5))
    assert isinstance(K, Identity)
    u = rng.standard_normal(20)
    np.testing.assert_array_equal(K.apply(u), u)


def test_inpaint_masks_top_third_of_28_rows():
    K = build_operator("inpaint", (28, 28))
    img = vector_to_image(K.apply(np.ones(784)), (28, 28))
    assert np.all(img[:10] == 0) and np.all(img[10:] == 1)


def test_inpaint_is_a_projection(rng):
    K = build_operator(ProblemKind("inpaint", mask_rows=(1, 3)), (5, 4))
    u = rng.standard_normal(20)
    np.testing.assert_array_equal(K.apply(K.apply(u)), K.apply(u))
    np.testing.assert_array_equal(K.to_dense(), K.to_dense().T)


def test_blur_kernel():
    k = default_blur_kernel()
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(k, np.eye(5) / 5)


def test_blur_on_constant_image_interior():
    K = build_operator("deblur", (12, 12))
    out = vector_to_image(K.apply(np.full(144, -0.4)), (12, 12))
    np.testing.assert_allclose(out[4:-4, 4:-4], -0.4, atol=1e-15)


def test_blur_impulse_is_diagonal_streak():
    K = build_operator("deblur", (9, 9))
    delta = np.zeros((9, 9))
    delta[4, 4] = 1.0
    out = vector_to_image(K.apply(image_to_vector(delta)), (9, 9))
    expected = np.zeros((9, 9))
    for i in range(-2, 3):
        expected[4 + i, 4 + i] = 0.2
    np.testing.assert_allclose(out, expected, atol=1e-16)


def test_blur_is_not_idempotent(rng):
    K = build_operator("deblur", (8, 8))
    u = rng.standard_normal(64)
    assert not np.allclose(K.apply(K.apply(u)), K.apply(u))


def test_invalid_kinds():
    with pytest.raises(ValueError):
        ProblemKind("superres")
    with pytest.raises(ValueError):
        ProblemKind("deblur", kernel=np.ones((3, 3)))
    with pytest.raises(ValueError):
        build_operator(ProblemKind("inpaint", mask_rows=(7,)), (4, 4))
    with pytest.raises(ValueError):
        NoiseSpec(alpha=-0.1)


def test_noise_free_measurement(rng):
    K = build_operator("deblur", (6, 6))
    u = rng.standard_normal(36)
    np.testing.assert_array_equal(measure(K, u, NoiseSpec(0.0)), K.apply(u))


def test_noise_replays_bit_identically():
    a = noise(50, 0.1, seed=3, sample_id=7, epoch=2)
    b = noise(50, 0.1, seed=3, sample_id=7, epoch=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, noise(50, 0.1, seed=3, sample_id=7, epoch=3))
    assert not np.array_equal(a, noise(50, 0.1, seed=3, sample_id=8, epoch=2))
    assert not np.array_equal(a, noise(50, 0.1, seed=4, sample_id=7, epoch=2))


def test_noise_standard_deviation():
    d = noise(100_000, 0.05, seed=0, sample_id=0)
    assert np.std(d) == pytest.approx(0.05, rel=0.01)
    assert abs(np.mean(d)) < 0.05 * 0.01


def test_noise_independent_of_batch_order(rng):
    K = Identity(10)
    U = rng.standard_normal((3, 10))
    spec = NoiseSpec(0.1, seed=1)
    F = measure(K, U, spec, epoch=4, sample_ids=[5, 6, 7])
    G = measure(K, U[::-1], spec, epoch=4, sample_ids=[7, 6, 5])
    np.testing.assert_array_equal(F, G[::-1])


def test_fixed_noise_ignores_epoch(rng):
    u = rng.standard_normal(10)
    spec = NoiseSpec(0.1, seed=1, regenerate_per_epoch=False)
    np.testing.assert_array_equal(measure(Identity(10), u, spec, epoch=1), measure(Identity(10), u, spec, epoch=9))


def test_masked_rows_carry_noise_unless_disabled(rng):
    K = RowMask((3, 3), [0])
    u = rng.standard_normal(9)
    spec = NoiseSpec(0.1, seed=1)
    f = measure(K, u, spec)
    assert np.all(f[~K.observed] != 0)
    f0 = measure(K, u, spec, noise_on_masked=False)
    np.testing.assert_array_equal(f0[~K.observed], 0)
    np.testing.assert_array_equal(f0[K.observed], f[K.observed])


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from(["denoise", "inpaint", "deblur"]))
def test_operators_are_adjoint(rows, cols, kind):
    K = build_operator(kind, (rows, cols))
    rng = np.random.default_rng(rows * 10 + cols)
    u, v = rng.standard_normal((2, rows * cols))
    lhs = K.apply(u) @ v
    assert abs(lhs - u @ K.adjoint(v)) <= 1e-10 * (1 + abs(lhs))
    if kind == "deblur":
        assert isinstance(K, ConvKernelBank)
