"""Optimizers and training loops."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ops
from .data import Dataset, DatasetError, balanced_batches
from .models import (IMAGE_SHAPE, DenoiserModel, LinearSvmModel, Model, SimpleCnnModel,
                     denoise, predict)
from .tensor import PrecisionMode, Tape, Tensor


class Optimizer(str, enum.Enum):
    SGDMomentum = "sgd"
    Adam = "adam"


class Loss(str, enum.Enum):
    CE = "ce"
    Hinge = "hinge"
    MSE = "mse"


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    dropout_rate: float | None = None  # None keeps the architecture default
    epochs: int = 20
    weight_decay: float = 0.0
    batch_size: int = 512
    optimizer: Optimizer = Optimizer.Adam
    loss: Loss = Loss.CE
    seed: int = 0
    precision: str = "f32"
    flush_to_zero: bool = False
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        self.loss = Loss(self.loss)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def mode(self) -> PrecisionMode:
        return PrecisionMode.parse(self.precision, self.flush_to_zero)

    def to_dict(self):
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        d["loss"] = self.loss.value
        d["betas"] = list(self.betas)
        return d


# Reference recipe for SimpleCNN on the grayscale bubble+swatch set.
SIMPLECNN_RECIPE = TrainConfig(learning_rate=0.01, dropout_rate=0.9, epochs=20, weight_decay=0.0, batch_size=512)
DENOISER_RECIPE = TrainConfig(learning_rate=0.001, epochs=100, loss=Loss.MSE, batch_size=64)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params, self.lr, self.betas, self.eps, self.wd = params, lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            g = g + self.wd * self.params[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SgdMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.mu, self.wd = params, lr, momentum, weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        for k, g in grads.items():
            g = g + self.wd * self.params[k]
            self.buf[k] = self.mu * self.buf[k] + g
            self.params[k] -= self.lr * self.buf[k]


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer is Optimizer.Adam:
        return Adam(params, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    return SgdMomentum(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)


@dataclass
class EpochMetrics:
    epoch: int
    train_acc: float
    val_acc: float
    loss: float


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics] = field(default_factory=list)

    def write_csv(self, path):
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_acc", "val_acc", "loss"])
        for m in metrics:
            wr.writerow([m.epoch, repr(m.train_acc), repr(m.val_acc), repr(m.loss)])


def _check_classes(ds: Dataset):
    if len(ds) == 0:
        raise DatasetError("training set is empty")
    if np.unique(ds.labels).size < 2:
        raise DatasetError("training set must contain both Mark and NonMark samples")


def _accuracy(model, ds: Dataset | None, mode) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(model, ds.pixels, mode) == ds.labels))


def train_classifier(model: Model, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
                     log=None) -> TrainResult:
    """Minibatch training with class-balanced batches; updates ``model`` in place."""
    if isinstance(model, LinearSvmModel) and cfg.loss is Loss.Hinge:
        return train_svm(model, train, cfg, val)
    if cfg.loss is not Loss.CE:
        raise ValueError(f"classifier training supports CE (or Hinge for the SVM), not {cfg.loss.value}")
    _check_classes(train)
    if cfg.dropout_rate is not None and hasattr(model, "dropout"):
        model.dropout = cfg.dropout_rate
    mode = cfg.mode
    opt = make_optimizer(model.params, cfg)
    pixels = train.pixels
    onehot = np.eye(2)[train.labels]
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        seq = np.random.SeedSequence([cfg.seed, epoch])
        batch_seed, drop_seed = (int(s) for s in seq.generate_state(2))
        drop_rng = np.random.default_rng(drop_seed)
        total, count = 0.0, 0
        for idx in balanced_batches(train, cfg.batch_size, batch_seed):
            leaves = model.leaves(mode, requires_grad=True)
            with Tape() as tape:
                x = Tensor(pixels[idx], mode=mode)
                z = model.logits(x, leaves, training=True, rng=drop_rng)
                loss = ops.cross_entropy(ops.softmax(z, stabilized=True), onehot[idx], reduction="mean")
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, value)
            grads = tape.backward(loss)
            opt.step({k: grads[t].astype(np.float64) for k, t in leaves.items()})
            total += value * idx.size
            count += idx.size
        m = EpochMetrics(epoch, _accuracy(model, train, mode), _accuracy(model, val, mode), total / max(count, 1))
        result.metrics.append(m)
        if log:
            log(m)
    return result


SATURATION_RECIPE = TrainConfig(learning_rate=0.003, dropout_rate=0.0, epochs=60, batch_size=64,
                                precision="f64", adam_eps=1e-100)
LOGIT_TOP = 80.0  # below float32 exp overflow at 88.72


@dataclass
class SaturationResult:
    model: Model
    epochs: int
    saturated_fraction: float
    finite: bool
    reached: bool


def center_head(model: Model, key: str = "fc"):
    """Make a two-logit head antisymmetric; every logit difference is unchanged."""
    for name in (f"{key}.w", f"{key}.b"):
        p = model.params[name]
        half = (p[0] - p[1]) / 2.0
        p[0], p[1] = half, -half


def _logits(model: Model, ds: Dataset, mode: PrecisionMode) -> np.ndarray:
    return model.logits(Tensor(ds.pixels, mode=mode), model.leaves(mode)).data


def shift_head(model: Model, ds: Dataset, mode: PrecisionMode, top: float = LOGIT_TOP, key: str = "fc"):
    """Add one constant to both biases so the largest logit on ``ds`` equals ``top``."""
    z = _logits(model, ds, mode)
    model.params[f"{key}.b"] += top - float(z.max())


def saturation_stats(model: Model, ds: Dataset, label: int, probe_mode: PrecisionMode):
    """(fraction of ``label`` samples whose plain softmax is exactly one-hot, all outputs finite)."""
    conf = ops.softmax(Tensor(_logits(model, ds, probe_mode), mode=probe_mode)).data
    rows = ds.labels == label
    frac = float(np.mean(conf[rows, 1 - label] == 0.0)) if rows.any() else 0.0
    return frac, bool(np.isfinite(conf).all())


def overtrain_to_saturation(model: Model, easy: Dataset, probe_mode: PrecisionMode, label: int = 0,
                            target: float = 0.95, cfg: TrainConfig = SATURATION_RECIPE, log=None) -> SaturationResult:
    """Keep minimizing CE until the softmax of ``label`` samples saturates.

    Adam with a vanishing epsilon keeps taking full-size steps after the
    float64 loss gradient has become tiny, so logit gaps keep growing. After
    each epoch the head is recentered and shifted (softmax is invariant to
    both) so the largest logit sits at LOGIT_TOP, inside the float32 exp
    range. Stops at the first epoch where ``target`` of the ``label``
    samples saturate in ``probe_mode`` and every softmax output is finite.
    """
    frac, finite = saturation_stats(model, easy, label, probe_mode)
    for epoch in range(cfg.epochs):
        train_classifier(model, easy, TrainConfig(**{**cfg.to_dict(), "epochs": 1, "seed": cfg.seed + epoch}))
        center_head(model)
        shift_head(model, easy, probe_mode)
        frac, finite = saturation_stats(model, easy, label, probe_mode)
        if log:
            log(epoch, frac, finite)
        if frac >= target and finite:
            return SaturationResult(model, epoch + 1, frac, finite, True)
    return SaturationResult(model, cfg.epochs, frac, finite, False)


def svm_objective(model: LinearSvmModel, x: np.ndarray, labels: np.ndarray, lam: float) -> float:
    """Class-balanced hinge loss on ``f = 2p - 1`` plus ``lam/2 ||w_f||^2``."""
    t = np.where(labels == 1, 1.0, -1.0)
    f = 2.0 * model.score(x) - 1.0
    hinge = np.maximum(0.0, 1.0 - t * f)
    w_f = 2.0 * model.params["weights"]
    loss = sum(hinge[labels == c].mean() for c in (0, 1)) / 2.0
    return float(loss + 0.5 * lam * w_f @ w_f)


def train_svm(model: LinearSvmModel, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
              log=None) -> TrainResult:
    """Full-batch subgradient descent on the balanced hinge + L2 objective.

    The hinge is taken on ``f = 2p - 1`` so the decision boundary p = 1/2
    sits at f = 0 with the usual unit margin. ``weight_decay`` is lambda.
    """
    _check_classes(train)
    x = train.pixels.reshape(len(train), -1)
    y = train.labels
    t = np.where(y == 1, 1.0, -1.0)
    cw = np.where(y == 1, 0.5 / np.sum(y == 1), 0.5 / np.sum(y == 0))
    # centred features decouple the intercept from the weights
    mu = x.mean(axis=0)
    xc = x - mu
    w = 2.0 * model.params["weights"].copy()
    b = 2.0 * model.params["bias"][0] - 1.0 + w @ mu
    lam = cfg.weight_decay
    val_x = val.pixels.reshape(len(val), -1) if val is not None and len(val) else None
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        f = xc @ w + b
        active = (t * f) < 1.0
        coef = -(cw * t * active)
        gw = xc.T @ coef + lam * w
        gb = coef.sum()
        w = w - cfg.learning_rate * gw
        b = b - cfg.learning_rate * gb
        model.params["weights"] = w / 2.0
        model.params["bias"] = np.array([(b - w @ mu + 1.0) / 2.0])
        obj = svm_objective(model, x, y, lam)
        if not math.isfinite(obj):
            raise TrainingDivergence(epoch, obj)
        train_acc = float(np.mean((model.score(x) > 0.5) == (y == 1)))
        val_acc = float("nan") if val_x is None else float(np.mean((model.score(val_x) > 0.5) == (val.labels == 1)))
        m = EpochMetrics(epoch, train_acc, val_acc, obj)
        result.metrics.append(m)
        if log:
            log(m)
    return result


def train_denoiser(model: DenoiserModel, noisy: np.ndarray, clean: np.ndarray, cfg: TrainConfig,
                   identity: np.ndarray | None = None, log=None) -> TrainResult:
    """MSE training on (post-channel, clean) pairs plus clean->clean identity pairs."""
    noisy = np.asarray(noisy, dtype=np.float64).reshape((-1,) + IMAGE_SHAPE)
    clean = np.asarray(clean, dtype=np.float64).reshape((-1,) + IMAGE_SHAPE)
    if noisy.shape != clean.shape:
        raise DatasetError("noisy and clean arrays must pair up")
    if identity is not None:
        identity = np.asarray(identity, dtype=np.float64).reshape((-1,) + IMAGE_SHAPE)
        noisy = np.concatenate([noisy, identity])
        clean = np.concatenate([clean, identity])
    if len(noisy) == 0:
        raise DatasetError("denoiser training set is empty")
    mode = cfg.mode
    opt = make_optimizer(model.params, cfg)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(len(noisy))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            leaves = model.leaves(mode, requires_grad=True)
            with Tape() as tape:
                out = model.forward(Tensor(noisy[idx], mode=mode), leaves)
                loss = ops.mse(out, clean[idx])
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, value)
            grads = tape.backward(loss)
            opt.step({k: grads[t].astype(np.float64) for k, t in leaves.items()})
            total += value * idx.size
        m = EpochMetrics(epoch, float("nan"), float("nan"), total / len(order))
        result.metrics.append(m)
        if log:
            log(m)
    return result


@dataclass
class Evaluation:
    accuracy: float
    per_class: dict[str, float]
    confusion: list[list[int]]  # rows: true label, cols: predicted label

    def to_dict(self):
        return asdict(self)


def evaluate(model: Model, ds: Dataset, denoiser: DenoiserModel | None = None,
             mode: PrecisionMode | None = None) -> Evaluation:
    """Accuracy and confusion counts; the denoiser, if any, runs first."""
    mode = mode or PrecisionMode.parse("f64")
    px = ds.pixels
    if denoiser is not None and len(ds):
        px = denoise(denoiser, px)
    pred = predict(model, px, mode) if len(ds) else np.zeros(0, dtype=np.int64)
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (ds.labels.astype(np.int64), pred), 1)
    per = {}
    for c, name in ((0, "Mark"), (1, "NonMark")):
        n = conf[c].sum()
        per[name] = float(conf[c, c] / n) if n else float("nan")
    acc = float(np.trace(conf) / len(ds)) if len(ds) else float("nan")
    return Evaluation(acc, per, conf.tolist())
