import itertools

import numpy as np
import pytest

from rana_compress.decomposition import CalibrationSet, ContributionStats, decompose, rank_contributions
from rana_compress.errors import CalibrationError, MaskerTrainingError
from rana_compress.maskers import (
    BMasker,
    OracleTopKMasker,
    SigmoidMlpMasker,
    bce_loss_and_gradients,
    calibrate_b_masker,
    calibrate_cutoff,
    calibrate_neuron_masker,
    default_inner_dim,
    fit_sigmoid_masker,
    mean_active,
    oracle_topk,
    sigmoid_inner_dim,
    train_sigmoid_masker,
)


def _stats(contributions):
    contributions = np.asarray(contributions, dtype=np.float64)
    return ContributionStats(
        contributions=contributions,
        rank_energy=contributions.mean(axis=1),
        output_energy=contributions.sum(axis=0),
    )


def test_b_masker_single_sample_keeps_top_two():
    masker = calibrate_b_masker(_stats([[4.0], [3.0], [2.0], [1.0]]), 2)

    assert masker.threshold == 3.0
    assert np.array_equal(masker.mask(np.array([2.0, -2.0, 1.0, 1.5])), [1, 1, 0, 0])


def test_b_masker_equal_contributions_keep_everything():
    masker = calibrate_b_masker(_stats(np.full((3, 5), 2.0)), 3)

    assert masker.threshold <= 2.0
    assert masker.calibrated_mean_active == 3.0


def test_b_masker_mask_cases():
    assert np.array_equal(BMasker(0.0, 1.0, 1.0).mask(np.array([0.0, -1.0])), [1, 1])
    assert np.array_equal(BMasker(2.0, 1.0, 1.0).mask(np.array([2.0, -1.0])), [1, 0])


def test_b_masker_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    bx = rng.standard_normal((8, 50))
    masker = BMasker(0.7, 1.0, 1.0)

    expected = np.array([[1.0 if v * v >= 0.7 else 0.0 for v in row] for row in bx])

    assert np.array_equal(masker.mask(bx), expected)


def test_b_masker_calibration_hits_target():
    rng = np.random.default_rng(1)
    weight = rng.standard_normal((24, 16))
    calib = CalibrationSet(rng.standard_normal((16, 2000)))
    dec = decompose(weight, calib)

    masker = calibrate_b_masker(rank_contributions(dec, calib), 5.5)

    assert masker.calibrated_mean_active == pytest.approx(5.5, rel=0.02)


def test_b_masker_target_out_of_range():
    with pytest.raises(CalibrationError):
        calibrate_b_masker(_stats(np.ones((3, 4))), 4)


def test_neuron_masker_two_neurons():
    masker = calibrate_neuron_masker(np.eye(2), np.array([[5.0], [0.1]]), 1)

    assert 0.1 < masker.threshold <= 5.0
    assert np.array_equal(masker.mask(np.array([5.0, 0.1])), [1, 0])
    assert np.array_equal(masker.mask(np.zeros(2)), [0, 0])


def test_neuron_masker_uniform_norms_match_sort_oracle():
    rng = np.random.default_rng(2)
    hidden = rng.standard_normal((10, 40))
    w_down = np.eye(10)

    masker = calibrate_neuron_masker(w_down, hidden, 3)
    pooled = np.sort(np.abs(hidden).ravel())[::-1]

    assert masker.threshold == pooled[3 * 40 - 1]
    assert masker.calibrated_mean_active == 3.0


def test_neuron_masker_rejects_zero_weights():
    with pytest.raises(CalibrationError):
        calibrate_neuron_masker(np.zeros((2, 3)), np.ones((3, 4)), 1)


def test_oracle_topk_cases():
    assert np.array_equal(oracle_topk(np.array([1.0, -3.0, 2.0]), 2), [0, 1, 1])
    assert np.array_equal(oracle_topk(np.array([1.0, -1.0, 0.5]), 1), [1, 0, 0])
    assert np.array_equal(oracle_topk(np.array([1.0, 2.0]), 2), [1, 1])


def test_oracle_topk_beats_every_other_mask():
    rng = np.random.default_rng(3)
    bx = rng.standard_normal(8)
    best = np.sum(oracle_topk(bx, 3) * bx**2)

    for subset in itertools.combinations(range(8), 3):
        assert best >= np.sum(bx[list(subset)] ** 2)


def test_oracle_batch_masks_each_column():
    bx = np.array([[1.0, 0.1], [0.2, 2.0]])
    assert np.array_equal(OracleTopKMasker(1).mask(bx), [[1, 0], [0, 1]])


def test_sigmoid_masker_boundaries():
    zero = SigmoidMlpMasker(c=np.zeros((3, 2)), d=np.ones((2, 4)))
    assert np.array_equal(zero.mask(np.ones(4)), np.ones(3))

    negative = SigmoidMlpMasker(c=-np.ones((3, 1)), d=np.ones((1, 4)) * 100)
    assert np.array_equal(negative.mask(np.ones(4)), np.zeros(3))


def test_bce_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((3, 2))
    d = rng.standard_normal((2, 2))
    x = rng.standard_normal((2, 5))
    labels = (rng.random((3, 5)) < 0.5).astype(np.float64)
    _, grad_c, grad_d = bce_loss_and_gradients(c, d, x, labels)
    eps = 1e-6

    for param, grad in ((c, grad_c), (d, grad_d)):
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + eps
            plus, _, _ = bce_loss_and_gradients(c, d, x, labels)
            param[index] = original - eps
            minus, _, _ = bce_loss_and_gradients(c, d, x, labels)
            param[index] = original
            numeric = (plus - minus) / (2 * eps)
            assert numeric == pytest.approx(grad[index], rel=1e-4, abs=1e-8)


def test_sigmoid_training_learns_constant_labels():
    # no bias term, so a constant label needs inputs on one side of a hyperplane
    x = 1.0 + np.abs(np.random.default_rng(5).standard_normal((4, 64)))
    labels = np.ones((3, 64))

    masker = fit_sigmoid_masker(x, labels, inner_dim=2, epochs=200, seed=0)

    assert masker.loss_history[-1] < masker.loss_history[0]
    assert np.all(masker.probabilities(x) >= 0.5)


def test_sigmoid_training_separable_labels():
    rng = np.random.default_rng(6)
    direction = rng.standard_normal(6)
    x = rng.standard_normal((6, 600))
    labels = (direction @ x >= 0).astype(np.float64)[None, :]
    train, held = slice(0, 500), slice(500, 600)

    masker = fit_sigmoid_masker(x[:, train], labels[:, train], inner_dim=4, epochs=50, seed=1)
    agreement = np.mean(masker.mask(x[:, held]) == labels[:, held])

    assert agreement >= 0.95


def test_train_sigmoid_masker_imitates_b_masker():
    rng = np.random.default_rng(7)
    weight = rng.standard_normal((12, 8))
    calib = CalibrationSet(rng.standard_normal((8, 400)))
    dec = decompose(weight, calib)
    label_masker = calibrate_b_masker(rank_contributions(dec, calib), 4)

    masker = train_sigmoid_masker(label_masker, dec, calib, inner_dim=4, epochs=20)

    assert masker.output_dim == dec.kept_ranks
    assert min(masker.loss_history) < masker.loss_history[0]


def test_calibrate_cutoff_meets_active_target():
    rng = np.random.default_rng(8)
    masker = SigmoidMlpMasker(c=rng.standard_normal((10, 3)), d=rng.standard_normal((3, 6)))
    x = rng.standard_normal((6, 500))

    tuned = calibrate_cutoff(masker, x, 4.0)

    assert mean_active(tuned.mask(x)) == pytest.approx(4.0, rel=0.02)


def test_sigmoid_inner_dim_fits_budget():
    inner = sigmoid_inner_dim(1000.0, out_dim=10, in_dim=20)
    assert 2 * inner * 20 + 2 * 10 * inner + 10 <= 1000.0
    assert 2 * (inner + 1) * 20 + 2 * 10 * (inner + 1) + 10 > 1000.0
    assert sigmoid_inner_dim(0.0, 10, 20) == 1


def test_sigmoid_training_without_progress_raises():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 64))
    labels = (rng.random((3, 64)) < 0.5).astype(np.float64)

    with pytest.raises(MaskerTrainingError):
        fit_sigmoid_masker(x, labels, inner_dim=2, epochs=5, lr=0.0)
    with pytest.raises(MaskerTrainingError):
        fit_sigmoid_masker(x, labels, inner_dim=2, epochs=0)


def test_default_inner_dim_is_a_quarter_of_the_narrow_side():
    assert default_inner_dim(48, 16) == 4
    assert default_inner_dim(3, 100) == 1
    assert default_inner_dim(48, 16, inner_dim=7) == 7
