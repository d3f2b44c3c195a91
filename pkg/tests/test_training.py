import numpy as np
import pytest

from bubbleattack.data import Dataset, DatasetError
from bubbleattack.models import DenoiserModel, LinearSvmModel, SimpleCnnModel, denoise
from bubbleattack.tensor import Tensor
from bubbleattack.training import (DENOISER_RECIPE, SIMPLECNN_RECIPE, Loss, TrainConfig, TrainingDivergence,
                                   evaluate, train_classifier, train_denoiser, train_svm)


def test_recipes():
    r = SIMPLECNN_RECIPE
    assert (r.learning_rate, r.dropout_rate, r.epochs, r.weight_decay, r.batch_size) == (0.01, 0.9, 20, 0.0, 512)
    d = DENOISER_RECIPE
    assert (d.epochs, d.learning_rate, d.loss) == (100, 0.001, Loss.MSE)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)


def test_zero_epochs_leave_parameters(split):
    m = SimpleCnnModel(seed=1)
    before = m.flat().copy()
    res = train_classifier(m, split[0], TrainConfig(epochs=0))
    assert res.metrics == [] and np.array_equal(m.flat(), before)


def test_cnn_reaches_high_validation_accuracy(cnn_model, split):
    assert evaluate(cnn_model, split[1]).accuracy >= 0.99


def test_svm_separates_two_points():
    x = np.stack([np.zeros((40, 50)), np.ones((40, 50))])
    ds = Dataset(np.rint(x * 255), [0, 1], [0, 0])
    m = LinearSvmModel()
    res = train_svm(m, ds, TrainConfig(learning_rate=0.01, epochs=50, weight_decay=0.0))
    assert res.metrics[-1].train_acc == 1.0
    assert evaluate(m, ds).accuracy == 1.0


def test_single_class_training_rejected():
    ds = Dataset(np.zeros((3, 40, 50)), [1, 1, 1], [0, 0, 0])
    with pytest.raises(DatasetError, match="both"):
        train_svm(LinearSvmModel(), ds, TrainConfig())
    with pytest.raises(DatasetError):
        train_classifier(SimpleCnnModel(), ds, TrainConfig())


def test_huge_regularisation_shrinks_weights(split):
    m = LinearSvmModel()
    m.params["weights"] = np.random.default_rng(0).normal(size=2000) * 0.01
    norms = []
    train_svm(m, split[0], TrainConfig(learning_rate=1e-3, epochs=20, weight_decay=100.0),
              log=lambda e: norms.append(np.linalg.norm(m.params["weights"])))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_divergence_is_reported(split):
    m = SimpleCnnModel(seed=0)
    m.params["fc.w"] *= 1e300
    tr = split[0]
    idx = np.concatenate([np.flatnonzero(tr.labels == c)[:32] for c in (0, 1)])
    with pytest.raises(TrainingDivergence):
        train_classifier(m, tr.subset(idx), TrainConfig(epochs=1, precision="f64"))


def test_identity_denoiser_fits_plain_tones():
    rng = np.random.default_rng(0)
    x = np.ones((200, 40, 50)) * rng.uniform(0.2, 1.0, size=(200, 1, 1))
    held = np.ones((50, 40, 50)) * rng.uniform(0.2, 1.0, size=(50, 1, 1))
    m = DenoiserModel(seed=0)
    train_denoiser(m, x, x, TrainConfig(learning_rate=0.003, epochs=25, loss="mse", batch_size=16))
    assert np.mean((denoise(m, held) - held) ** 2) < 1e-3


def test_denoiser_rejects_unpaired():
    with pytest.raises(DatasetError):
        train_denoiser(DenoiserModel(), np.zeros((2, 40, 50)), np.zeros((3, 40, 50)), TrainConfig(loss="mse"))


def test_evaluate_perfect_model(svm_model, split):
    ev = evaluate(svm_model, split[0])
    assert ev.accuracy == 1.0
    assert np.sum(ev.confusion) == len(split[0])


class _CoinFlip:
    tag = "coin"

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def logits(self, x):
        return Tensor(self.rng.normal(size=(x.shape[0], 2)), mode=x.mode)


def test_evaluate_coin_flip_is_near_half():
    n = 2000
    ds = Dataset(np.zeros((n, 40, 50)), np.arange(n) % 2, np.zeros(n))
    ev = evaluate(_CoinFlip(1), ds)
    assert abs(ev.accuracy - 0.5) <= 3 * np.sqrt(0.25 / n)
    assert np.sum(ev.confusion) == n
