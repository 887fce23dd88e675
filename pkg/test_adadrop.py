import numpy as np
import pytest

from stadb.adadrop import (
    AttentionMap,
    DropMask,
    apply_drop,
    attention_map,
    drop_fraction,
    drop_mask,
    random_block_drop,
    random_block_mask,
)
from stadb.errors import ContractError, DimensionError
from stadb.tensor import Tensor


def amap(values):
    return AttentionMap(Tensor(np.asarray(values, dtype=float).reshape(1, 1, *np.shape(values))))


# --- attention_map ---

def test_attention_map_examples(rng):
    two = np.stack([np.full((3, 3), 2.0), np.full((3, 3), 4.0)])[None]
    np.testing.assert_array_equal(attention_map(Tensor(two)).values.data, 3.0)

    one = rng.normal(size=(2, 1, 3, 4))
    np.testing.assert_array_equal(attention_map(Tensor(one)).values.data, one)

    F = rng.normal(size=(1, 4, 2, 2))
    expected = np.array([[sum(F[0, c, y, x] for c in range(4)) / 4 for x in range(2)] for y in range(2)])
    np.testing.assert_allclose(attention_map(Tensor(F)).values.data[0, 0], expected, rtol=0, atol=1e-12)


def test_attention_map_max_pooling(rng):
    F = rng.normal(size=(1, 3, 2, 2))
    np.testing.assert_array_equal(attention_map(Tensor(F), "max").values.data[0, 0], F[0].max(axis=0))
    with pytest.raises(ContractError):
        attention_map(Tensor(F), "median")


# --- drop_mask ---

def test_drop_mask_threshold_example():
    mask = drop_mask(amap([[1.0, 0.5], [0.2, 0.9]]), alpha=0.8)
    np.testing.assert_array_equal(mask.values.data[0, 0], [[0, 1], [1, 0]])
    assert mask.alpha == 0.8


def test_drop_mask_boundaries(rng):
    A = amap(rng.uniform(0.1, 1.0, size=(4, 4)))
    np.testing.assert_array_equal(drop_mask(A, 1.0).values.data, 1.0)
    np.testing.assert_array_equal(drop_mask(A, 1.5).values.data, 1.0)
    np.testing.assert_array_equal(drop_mask(amap(np.zeros((3, 3))), 0.5).values.data, 1.0)
    np.testing.assert_array_equal(drop_mask(A, 1e-9).values.data, 0.0)


def test_value_equal_to_threshold_survives():
    mask = drop_mask(amap([[1.0, 0.5]]), alpha=0.5)
    np.testing.assert_array_equal(mask.values.data[0, 0], [[0, 1]])


def test_maximum_is_erased_whenever_alpha_below_one(rng):
    for _ in range(1000):
        values = rng.uniform(0.01, 1.0, size=(2, 1, 3, 4))
        alpha = rng.uniform(0.05, 0.95)
        mask = drop_mask(AttentionMap(Tensor(values)), alpha).values.data
        assert set(np.unique(mask)) <= {0.0, 1.0}
        for n in range(2):
            y, x = np.unravel_index(np.argmax(values[n, 0]), (3, 4))
            assert mask[n, 0, y, x] == 0.0


def test_drop_fraction_shrinks_as_alpha_grows(rng):
    A = AttentionMap(Tensor(rng.uniform(size=(3, 1, 6, 5))))
    fractions = [drop_fraction(drop_mask(A, a)) for a in np.linspace(0.05, 1.0, 20)]
    for lower, higher in zip(fractions, fractions[1:]):
        assert (higher <= lower).all()


def test_drop_mask_is_per_sample():
    values = np.array([[[[1.0, 0.1]]], [[[10.0, 9.5]]]])
    mask = drop_mask(AttentionMap(Tensor(values)), 0.9).values.data
    np.testing.assert_array_equal(mask[:, 0, 0], [[0, 1], [0, 0]])


def test_quantile_mode(rng):
    A = amap([[0.3, 0.9, 0.1, 0.9], [0.5, 0.2, 0.8, 0.0]])
    mask = drop_mask(A, 1.0, mode="quantile", quantile=0.25).values.data[0, 0]
    np.testing.assert_array_equal(mask, [[1, 0, 1, 0], [1, 1, 1, 1]])
    assert drop_fraction(drop_mask(A, 1.0, mode="quantile", quantile=0.5))[0] == 0.5


def test_drop_mask_errors():
    A = amap([[1.0]])
    with pytest.raises(ContractError):
        drop_mask(A, 0.0)
    with pytest.raises(ContractError):
        drop_mask(A, 0.5, mode="random_block")
    with pytest.raises(ContractError):
        drop_mask(A, 0.5, mode="quantile", quantile=0.0)
    with pytest.raises(DimensionError):
        drop_mask(AttentionMap(Tensor(np.ones((1, 2, 2, 2)))), 0.5)


# --- apply_drop ---

def test_apply_drop(rng):
    F = rng.normal(size=(1, 3, 2, 2))
    ones = DropMask(Tensor(np.ones((1, 1, 2, 2))), 0.5)
    np.testing.assert_array_equal(apply_drop(Tensor(F), ones).data, F)

    corner = np.ones((1, 1, 2, 2))
    corner[0, 0, 0, 0] = 0.0
    out = apply_drop(Tensor(F), DropMask(Tensor(corner), 0.5)).data
    np.testing.assert_array_equal(out[0, :, 0, 0], 0.0)
    np.testing.assert_array_equal(out[0, :, 1, 1], F[0, :, 1, 1])

    with pytest.raises(DimensionError):
        apply_drop(Tensor(F), DropMask(Tensor(np.ones((1, 1, 3, 2))), 0.5))


def test_gradient_skips_erased_positions(rng):
    from stadb import tensor as T

    F = Tensor(rng.uniform(size=(1, 2, 2, 2)), requires_grad=True)
    mask = drop_mask(attention_map(F), 0.5)
    T.backward(T.sum_all(apply_drop(F, mask)))
    np.testing.assert_array_equal(F.grad, np.broadcast_to(mask.values.data, F.shape))


# --- random_block_drop ---

def test_random_block_examples(rng):
    F = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(random_block_drop(F, 1.0, 1.0, np.random.default_rng(1)).data, 0.0)

    mask = random_block_mask(F.shape, 0.5, 0.5, np.random.default_rng(1))
    np.testing.assert_array_equal(drop_fraction(mask), 0.25)
    rows, cols = np.nonzero(mask.values.data[0, 0] == 0.0)
    assert rows.max() - rows.min() == 1 and cols.max() - cols.min() == 1
    assert np.isnan(mask.alpha)

    first = random_block_drop(F, 0.5, 0.5, np.random.default_rng(7)).data
    second = random_block_drop(F, 0.5, 0.5, np.random.default_rng(7)).data
    np.testing.assert_array_equal(first, second)


def test_random_block_errors():
    with pytest.raises(ContractError):
        random_block_mask((1, 1, 4, 4), 0.0, 0.5, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        random_block_drop(Tensor(np.ones((4, 4))), 0.5, 0.5, np.random.default_rng(0))


# --- drop_fraction ---

def test_drop_fraction_examples():
    assert drop_fraction(DropMask(Tensor(np.ones((1, 1, 3, 3))), 0.5))[0] == 0.0
    assert drop_fraction(DropMask(Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]])), 0.5))[0] == 0.5
