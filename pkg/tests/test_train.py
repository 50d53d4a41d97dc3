from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfix.layers import FRESH, PRETRAINED, LBCConv, Param, euclidean_loss
from deepfix.netdef import DESK, build_network, init_weights
from deepfix.ops import DimensionError
from deepfix.synthetic import synthetic_dataset
from deepfix.train import (DESK_OPTIMIZER, Dataset, NumericalError, OptimizerState,
                           apply_explicit_cb, compute_mean_map, optimizer_for, plateau_schedule,
                           pool_maps, sgd_step, train, validation_loss)


def state(lr=0.1, momentum=0.0, weight_decay=0.0, **kw):
    return OptimizerState(lr={PRETRAINED: lr, FRESH: lr}, momentum=momentum,
                          weight_decay=weight_decay, **kw)


def test_default_hyperparameters():
    s = OptimizerState()
    assert s.lr == {PRETRAINED: 2e-4, FRESH: 2e-3}
    assert (s.momentum, s.weight_decay, s.decay_factor) == (0.9, 0.0005, 5.0)


def test_zero_step_leaves_weights():
    p = Param(np.array([1.5, -2.0]))
    sgd_step([p], state(momentum=0.9))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_scalar_step():
    p = Param(np.array([1.0]))
    p.grad[...] = 1.0
    sgd_step([p], state(lr=0.1))
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)


def test_momentum_geometric_accumulation():
    lr, m, g = 0.05, 0.9, 0.7
    p = Param(np.array([2.0]))
    for _ in range(3):
        p.grad[...] = g
        sgd_step([p], state(lr=lr, momentum=m))
    assert p.data[0] == pytest.approx(2.0 - lr * g * (3 + 2 * m + m * m), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-6), min_size=1, max_size=8),
       st.floats(1e-4, 1.0), st.floats(1e-4, 0.1))
def test_weight_decay_only_shrinks(values, lr, wd):
    p = Param(np.array(values))
    before = np.abs(p.data).copy()
    for _ in range(5):
        sgd_step([p], state(lr=lr, weight_decay=wd))
        now = np.abs(p.data)
        assert np.all(now < before)
        before = now


def test_groups_use_their_own_rates():
    a, b = Param(np.zeros(1), PRETRAINED), Param(np.zeros(1), FRESH)
    a.grad[...] = b.grad[...] = 1.0
    sgd_step([a, b], OptimizerState(momentum=0.0, weight_decay=0.0))
    assert (a.data[0], b.data[0]) == (-2e-4, -2e-3)


def test_non_finite_gradient_aborts_with_name():
    p = Param(np.ones(2), name="conv1_1.weight")
    p.grad[1] = np.nan
    with pytest.raises(NumericalError, match="conv1_1.weight"):
        sgd_step([p], state())
    np.testing.assert_array_equal(p.data, 1.0)


# --- plateau schedule ------------------------------------------------------

def test_decreasing_losses_keep_rates():
    s = OptimizerState()
    assert plateau_schedule([1.0, 0.9, 0.8, 0.7, 0.6, 0.5], s) is s


def test_flat_losses_divide_both_rates():
    s = plateau_schedule([1.0, 1.0, 1.0, 1.0], OptimizerState())
    assert s.lr[PRETRAINED] == pytest.approx(2e-4 / 5)
    assert s.lr[FRESH] == pytest.approx(2e-3 / 5)
    assert s.lr[FRESH] / s.lr[PRETRAINED] == pytest.approx(10.0)
    assert s.n_decays == 1


def test_two_plateaus_divide_by_twenty_five():
    losses, s = [], OptimizerState()
    for _ in range(8):
        losses.append(1.0)
        s = plateau_schedule(losses, s)
    assert s.n_decays == 2
    assert s.lr[FRESH] == pytest.approx(2e-3 / 25)


def test_small_improvement_counts_as_plateau():
    s = plateau_schedule([1.0, 0.999, 0.998, 0.997], OptimizerState())
    assert s.n_decays == 1
    s = plateau_schedule([1.0, 0.99, 0.98, 0.97], OptimizerState())
    assert s.n_decays == 0


def test_plateau_needs_a_measurement():
    with pytest.raises(ValueError):
        plateau_schedule([], OptimizerState())


# --- training driver -------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    return synthetic_dataset(6, seed=3)


def fresh_net(seed=0, variant="lbc"):
    net = build_network(replace(DESK, variant=variant))
    init_weights(net, seed)
    return net


def test_zero_learning_rate_leaves_loss(tiny):
    net = fresh_net()
    before = validation_loss(net, tiny)
    train(net, tiny, state(lr=0.0, momentum=0.9, weight_decay=0.0005), iters=1, batch=2)
    assert validation_loss(net, tiny) == before


def test_training_is_deterministic(tiny):
    logs = []
    for _ in range(2):
        net = fresh_net()
        run, _ = train(net, tiny, optimizer_for(DESK), iters=6, batch=2, seed=4, val_data=tiny,
                       eval_every=3)
        logs.append(run.to_lines())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == "iteration\ttrain_loss\tval_loss\tlr_pretrained\tlr_fresh"
    assert len(logs[0].splitlines()) == 7


def test_two_stage_training_continues_the_run(tiny):
    net = fresh_net()
    run, s = train(net, tiny, optimizer_for(DESK), iters=3, batch=2)
    run, s = train(net, synthetic_dataset(4, seed=9), s, iters=2, batch=2, run=run)
    assert run.iteration == 5
    assert [i for i, _ in run.train_losses] == [1, 2, 3, 4, 5]


def test_non_finite_loss_names_sample(tiny):
    bad = Dataset(tiny.images.copy(), tiny.maps, tiny.fixations, list(tiny.ids))
    bad.images[:] = np.nan
    with pytest.raises(NumericalError, match="non-finite loss"):
        train(fresh_net(), bad, optimizer_for(DESK), iters=1, batch=1)


def test_empty_dataset_rejected(tiny):
    with pytest.raises(ValueError):
        train(fresh_net(), tiny.subset([]), optimizer_for(DESK), iters=1)


def test_early_stop_after_fruitless_decays(tiny):
    run, s = train(fresh_net(), tiny, state(lr=0.0), iters=200, batch=2, val_data=tiny,
                   eval_every=1)
    assert s.n_decays == 3  # first decay sets the reference, two more without improvement
    assert run.iteration < 200


def test_bank_is_constant_through_training(tiny):
    net = fresh_net()
    lbc = next(l for l in net.layers if isinstance(l, LBCConv))
    snapshot = lbc.bank(6, 8).maps.copy()
    train(net, tiny, optimizer_for(DESK), iters=3, batch=2)
    np.testing.assert_array_equal(lbc.bank(6, 8).maps, snapshot)


def test_desk_profile():
    assert optimizer_for(DESK) is DESK_OPTIMIZER
    assert optimizer_for(replace(DESK, name="full")) == OptimizerState()


# --- mean map and explicit centre bias -------------------------------------

def test_mean_of_identical_maps():
    m = np.random.default_rng(0).random((4, 5))
    np.testing.assert_allclose(compute_mean_map([m, m, m]), m, rtol=0, atol=1e-15)


def test_mean_of_zero_and_one():
    np.testing.assert_array_equal(compute_mean_map([np.zeros((3, 3)), np.ones((3, 3))]), 0.5)


def test_mean_map_resolution_mismatch():
    with pytest.raises(DimensionError):
        compute_mean_map([np.zeros((3, 3)), np.zeros((3, 4))])
    with pytest.raises(ValueError):
        compute_mean_map([])


def test_synthetic_mean_map_peaks_at_centre():
    data = synthetic_dataset(200, seed=5, center_bias_strength=0.7)
    mean = compute_mean_map(data.maps)
    y, x = np.unravel_index(np.argmax(mean), mean.shape)
    assert abs(y - 23.5) <= 2 and abs(x - 31.5) <= 2


def test_explicit_cb():
    pred = np.array([[0.0, 1.0], [0.5, 0.5]])
    mean = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(apply_explicit_cb(pred, mean, 1.0, renormalize=False), pred + mean)
    out = apply_explicit_cb(pred, mean, 2.0)
    assert out.min() == 0.0 and out.max() == 1.0
    with pytest.raises(DimensionError):
        apply_explicit_cb(pred, np.zeros((3, 3)))


def test_pool_maps_is_block_mean():
    m = np.random.default_rng(1).random((2, 16, 24))
    pooled = pool_maps(m)
    assert pooled.shape == (2, 2, 3)
    for n in range(2):
        for i in range(2):
            for j in range(3):
                assert pooled[n, i, j] == pytest.approx(m[n, 8 * i:8 * i + 8, 8 * j:8 * j + 8].mean(),
                                                        abs=1e-15)
    with pytest.raises(DimensionError):
        pool_maps(np.zeros((1, 12, 16)))
