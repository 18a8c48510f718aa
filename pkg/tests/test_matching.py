import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from slotforge.matching import brute_force_assignment, dice, hungarian, matching_cost


def test_identity_cost_picks_diagonal():
    m = hungarian(1 - np.eye(4))
    assert m.assignment == {0: 0, 1: 1, 2: 2, 3: 3}
    assert m.total_cost == 0.0


def test_rectangular_more_predictions():
    cost = np.array([[5.0, 1.0], [1.0, 5.0], [0.0, 0.0]])
    m = hungarian(cost)
    assert m.total_cost == pytest.approx(brute_force_assignment(cost).total_cost)
    assert len(m.assignment) == 2


def test_rectangular_more_targets():
    cost = np.array([[3.0, 1.0, 2.0]])
    m = hungarian(cost)
    assert m.assignment == {1: 0}
    assert m.total_cost == 1.0


def test_empty():
    assert hungarian(np.zeros((0, 3))).assignment == {}


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian(np.array([[np.nan, 1.0], [1.0, 0.0]]))


def test_pairs_sorted_by_target():
    m = hungarian(np.array([[0.0, 1.0], [1.0, 0.0]])[::-1])
    preds, targets = m.pairs
    assert list(targets) == [0, 1] and list(preds) == [1, 0]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_hungarian_matches_brute_force(n, m, seed):
    cost = np.random.default_rng(seed).integers(0, 6, (n, m)).astype(float)
    assert hungarian(cost).total_cost == brute_force_assignment(cost).total_cost


def test_hungarian_assignment_is_injective(rng):
    for _ in range(50):
        cost = rng.normal(size=(rng.integers(1, 7), rng.integers(1, 7)))
        a = hungarian(cost).assignment
        assert len(set(a.values())) == len(a) == min(cost.shape)


def test_brute_force_refuses_large():
    with pytest.raises(ValueError):
        brute_force_assignment(np.zeros((10, 10)))


def test_dice_values():
    a = np.array([1.0, 1.0, 0.0])
    assert dice(a, a) == pytest.approx(1.0)
    assert dice(a, 1 - a) == 0.0


def test_matching_cost_numpy_and_torch_agree(rng):
    alphas = rng.dirichlet(np.ones(3), size=(4, 5)).transpose(2, 0, 1)
    labels = rng.integers(0, 3, (4, 5))
    c_np = matching_cost(alphas, labels)
    c_t = matching_cost(torch.from_numpy(alphas), torch.from_numpy(labels))
    assert np.allclose(c_np, c_t.numpy())
    # direct oracle
    for k, j in itertools.product(range(3), range(3)):
        t = (labels == j).astype(float)
        assert c_np[k, j] == pytest.approx(1 - 2 * (alphas[k] * t).sum() / (alphas[k].sum() + t.sum() + 1e-8))
