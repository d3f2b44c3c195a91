"""L-infinity white-box attacks: FGSM, PGD, MIM and APGD.

Perturbation bookkeeping is float64. Only the model forward/backward runs
in the configured precision mode, which is where gradient masking lives.
A non-finite input gradient (NaN from an overflowed softmax) is treated as
zero for the update and reported as-is in the trace.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ops
from .models import IMAGE_SHAPE, MARK, NONMARK, Model, predict
from .tensor import PrecisionMode, Tape, Tensor

EPSILON_GRID = tuple(k / 255 for k in (4, 8, 16, 32, 64, 255))


class AttackLoss(str, enum.Enum):
    CE = "ce"
    BinaryDLR = "dlr"


class Direction(str, enum.Enum):
    Over = "over"    # NonMark read as Mark
    Under = "under"  # Mark read as NonMark


def direction_of(label: int) -> Direction:
    return Direction.Under if label == MARK else Direction.Over


@dataclass
class AttackConfig:
    epsilon: float = 0.031
    steps: int = 20
    step_size: float | None = None  # default 2.5 * epsilon / steps
    momentum_decay: float = 1.0
    apgd_alpha: float = 0.75
    apgd_rho: float = 0.75
    loss: AttackLoss = AttackLoss.CE
    random_start: bool = False
    kappa: float = 0.0  # carried for provenance; not used by the binary losses
    direction: Direction | None = None
    seed: int = 0
    precision: str = "f32"
    flush_to_zero: bool = False

    def __post_init__(self):
        self.loss = AttackLoss(self.loss)
        if self.direction is not None:
            self.direction = Direction(self.direction)
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")

    @property
    def mode(self) -> PrecisionMode:
        return PrecisionMode.parse(self.precision, self.flush_to_zero)

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps

    def with_(self, **kw) -> "AttackConfig":
        d = asdict(self)
        d.update(kw)
        return AttackConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.value
        d["direction"] = None if self.direction is None else self.direction.value
        return d


# Reference probe configuration: eps 0.031, step 0.00155, 20 steps.
PROBE_CONFIG = AttackConfig(epsilon=0.031, step_size=0.00155, steps=20)


@dataclass
class StepRecord:
    loss: float
    grad_max: float
    confidence: tuple[float, float]


@dataclass
class AttackResult:
    adversarial: np.ndarray
    label: int
    success: bool
    linf: float
    best_loss: float
    trace: list[StepRecord] = field(default_factory=list)

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps({"step": i, **asdict(r)}) for i, r in enumerate(self.trace))


# ---------------------------------------------------------------- losses and gradients

def binary_dlr_loss(logits, label: int) -> float:
    """Numerator-only DLR for two classes: ``-(z_y - z_{1-y})``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] != 2:
        raise ValueError("binary DLR needs exactly two logits")
    return float(-(z[label] - z[1 - label]))


class _Objective:
    """Batched loss/gradient oracle; each row's gradient is its own."""

    def __init__(self, model: Model, labels: np.ndarray, cfg: AttackConfig):
        self.model, self.labels, self.cfg, self.mode = model, labels, cfg, cfg.mode
        self.onehot = np.eye(2)[labels]
        self.leaves = model.leaves(self.mode)
        self.evals = 0

    def __call__(self, x: np.ndarray):
        self.evals += 1
        xt = Tensor(x, requires_grad=True, mode=self.mode)
        with Tape() as tape:
            z = self.model.logits(xt, self.leaves)
            conf = ops.softmax(z)
            if self.cfg.loss is AttackLoss.CE:
                rows = ops.cross_entropy(conf, self.onehot, reduction="none")
            else:
                rows = ops.binary_dlr(z, self.labels, reduction="none")
            total = ops.tsum(rows)
        g = tape.backward(total)[xt].astype(np.float64).reshape(x.shape)
        return (rows.data.astype(np.float64), g, conf.data.astype(np.float64),
                np.argmax(z.data, axis=-1) != self.labels)


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _as_batch(images, labels):
    x = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    single = x.ndim == 2
    x = x.reshape((-1,) + IMAGE_SHAPE)
    y = np.asarray(labels if labels is not None else images.labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {y.size} labels")
    return x, y, single


def _check_direction(y, cfg):
    if cfg.direction is None:
        return
    want = MARK if cfg.direction is Direction.Under else NONMARK
    if np.any(y != want):
        raise ValueError(f"direction {cfg.direction.value} only applies to label {want}")


def _finish(kind, x0, y, best, best_loss, traces, single, model, cfg):
    pred = predict(model, best, cfg.mode)
    out = []
    for i in range(len(y)):
        tr = [StepRecord(float(l[i]), float(gm[i]), (float(c[i, 0]), float(c[i, 1]))) for l, gm, c in traces]
        linf = float(np.max(np.abs(best[i] - x0[i]))) if best[i].size else 0.0
        out.append(AttackResult(best[i], int(y[i]), bool(pred[i] != y[i]), linf, float(best_loss[i]), tr))
    return out[0] if single else out


def _grad_max(g):
    with np.errstate(invalid="ignore"):
        return np.abs(g).reshape(len(g), -1).max(axis=1)


def _clean(g):
    return np.where(np.isfinite(g), g, 0.0)


def _start(x0, cfg):
    if not cfg.random_start or cfg.epsilon == 0:
        return x0.copy()
    rng = np.random.default_rng(cfg.seed)
    return _project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape), x0, cfg.epsilon)


# ---------------------------------------------------------------- attacks

def fgsm(model: Model, images, labels=None, cfg: AttackConfig = AttackConfig()):
    """Single signed-gradient step of size epsilon."""
    x0, y, single = _as_batch(images, labels)
    _check_direction(y, cfg)
    obj = _Objective(model, y, cfg)
    loss, g, conf, _ = obj(x0)
    adv = np.clip(x0 + cfg.epsilon * np.sign(_clean(g)), 0.0, 1.0)
    if cfg.epsilon == 0:
        adv = x0.copy()
    traces = [(loss, _grad_max(g), conf)]
    return _finish("fgsm", x0, y, adv, loss, traces, single, model, cfg)


def pgd(model: Model, images, labels=None, cfg: AttackConfig = AttackConfig()):
    """Iterated signed steps with projection; returns the final iterate."""
    x0, y, single = _as_batch(images, labels)
    _check_direction(y, cfg)
    obj = _Objective(model, y, cfg)
    x = _start(x0, cfg)
    traces = []
    loss = None
    for _ in range(cfg.steps):
        loss, g, conf, _ = obj(x)
        traces.append((loss, _grad_max(g), conf))
        x = _project(x + cfg.alpha * np.sign(_clean(g)), x0, cfg.epsilon)
    return _finish("pgd", x0, y, x, loss, traces, single, model, cfg)


def mim(model: Model, images, labels=None, cfg: AttackConfig = AttackConfig()):
    """Momentum iterative method with L1-normalised gradient accumulation."""
    x0, y, single = _as_batch(images, labels)
    _check_direction(y, cfg)
    obj = _Objective(model, y, cfg)
    x = _start(x0, cfg)
    acc = np.zeros_like(x0)
    traces = []
    loss = None
    for _ in range(cfg.steps):
        loss, g, conf, _ = obj(x)
        traces.append((loss, _grad_max(g), conf))
        g = _clean(g)
        l1 = np.abs(g).reshape(len(g), -1).sum(axis=1)
        scale = np.where(l1 > 0, 1.0 / np.where(l1 > 0, l1, 1.0), 1.0)
        acc = cfg.momentum_decay * acc + g * scale[:, None, None]
        x = _project(x + cfg.alpha * np.sign(acc), x0, cfg.epsilon)
    return _finish("mim", x0, y, x, loss, traces, single, model, cfg)


def apgd_checkpoints(steps: int) -> list[int]:
    p = [0.0, 0.22]
    while p[-1] < 1.0:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(math.ceil(q * steps)) for q in p if q <= 1.0})


def apgd(model: Model, images, labels=None, cfg: AttackConfig = AttackConfig(steps=50)):
    """Auto-PGD with momentum, best-point tracking and step-size halving.

    The returned image is the highest-loss point visited. Among equal-loss
    points a misclassified one is preferred.
    """
    x0, y, single = _as_batch(images, labels)
    _check_direction(y, cfg)
    if cfg.steps < 2:
        raise ValueError("apgd needs at least 2 steps")
    n = len(y)
    eps, alpha, rho = cfg.epsilon, cfg.apgd_alpha, cfg.apgd_rho
    obj = _Objective(model, y, cfg)
    checks = set(apgd_checkpoints(cfg.steps)[1:])

    x = _start(x0, cfg)
    loss, g, conf, wrong = obj(x)
    traces = [(loss, _grad_max(g), conf)]
    best, best_loss, best_wrong, best_g = x.copy(), loss.copy(), wrong.copy(), g.copy()
    eta = np.full(n, 2.0 * eps)
    x_prev = x.copy()
    last_check = 0
    increases = np.zeros(n)
    reduced_last = np.zeros(n, dtype=bool)
    best_at_check = best_loss.copy()
    prev_loss = loss
    for k in range(1, cfg.steps):
        a = alpha if k > 1 else 1.0
        z = _project(x + eta[:, None, None] * np.sign(_clean(g)), x0, eps)
        x, x_prev = _project(x + a * (z - x) + (1 - a) * (x - x_prev), x0, eps), x

        loss, g, conf, wrong = obj(x)
        traces.append((loss, _grad_max(g), conf))
        increases += loss > prev_loss
        prev_loss = loss
        better = (loss > best_loss) | ((loss == best_loss) & wrong & ~best_wrong)
        best[better], best_loss[better] = x[better], loss[better]
        best_wrong[better], best_g[better] = wrong[better], g[better]

        if k in checks:
            stalled = increases < rho * (k - last_check)
            flat = ~reduced_last & (best_loss <= best_at_check)
            restart = stalled | flat
            eta = np.where(restart, eta / 2.0, eta)
            x[restart], g[restart] = best[restart], best_g[restart]
            reduced_last, best_at_check = restart, best_loss.copy()
            last_check, increases = k, np.zeros(n)
    return _finish("apgd", x0, y, best, best_loss, traces, single, model, cfg)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "mim": mim, "apgd": apgd}


# ---------------------------------------------------------------- robust accuracy

class EmptyPoolError(ValueError):
    pass


@dataclass
class RobustRow:
    model: str
    dataset: str
    attack: str
    loss: str
    epsilon: float
    direction: str
    robust_acc: float
    n: int


def correctly_classified(model: Model, x: np.ndarray, y: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    return np.flatnonzero(predict(model, x, mode) == y)


def robust_accuracy(model: Model, images, labels=None, cfg: AttackConfig = AttackConfig(steps=50),
                    epsilons=EPSILON_GRID, attack: str = "apgd", dataset: str = "",
                    batch: int = 100) -> list[RobustRow]:
    """Per-epsilon robust accuracy over the correctly classified pool.

    Rows are emitted for all samples and split by direction (Over attacks
    NonMark samples, Under attacks Mark samples).
    """
    x, y, _ = _as_batch(images, labels)
    keep = correctly_classified(model, x, y, cfg.mode)
    if keep.size == 0:
        raise EmptyPoolError("no correctly classified samples to attack")
    x, y = x[keep], y[keep]
    fn = ATTACKS[attack]
    rows = []
    for eps in epsilons:
        c = cfg.with_(epsilon=float(eps), direction=None)
        ok = np.empty(len(y), dtype=bool)
        for s in range(0, len(y), batch):
            res = fn(model, x[s:s + batch], y[s:s + batch], c)
            ok[s:s + batch] = [not r.success for r in res]
        for name, sel in (("all", np.ones(len(y), bool)), (Direction.Over.value, y == NONMARK),
                          (Direction.Under.value, y == MARK)):
            if sel.any():
                rows.append(RobustRow(model.tag, dataset, attack, c.loss.value, float(eps), name,
                                      float(ok[sel].mean()), int(sel.sum())))
    return rows


def write_robust_csv(rows: list[RobustRow], path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model", "dataset", "attack", "loss", "epsilon", "direction", "robust_acc", "n"])
        for r in rows:
            wr.writerow([r.model, r.dataset, r.attack, r.loss, repr(r.epsilon), r.direction, repr(r.robust_acc), r.n])


def write_robust_json(rows: list[RobustRow], path, extra: dict | None = None):
    Path(path).write_text(json.dumps({**(extra or {}), "rows": [asdict(r) for r in rows]}, indent=2, sort_keys=True))


def robust_markdown(rows: list[RobustRow], direction: str = "all") -> str:
    """One row per (model, dataset, attack, loss); epsilon in /255 units across."""
    eps = sorted({r.epsilon for r in rows})
    keys = []
    for r in rows:
        k = (r.model, r.dataset, r.attack, r.loss)
        if r.direction == direction and k not in keys:
            keys.append(k)
    head = "| model | dataset | attack | loss | " + " | ".join(f"{round(e * 255)}/255" for e in eps) + " |"
    lines = [head, "|" + "---|" * (4 + len(eps))]
    for k in keys:
        vals = {r.epsilon: r.robust_acc for r in rows
                if (r.model, r.dataset, r.attack, r.loss) == k and r.direction == direction}
        lines.append(f"| {k[0]} | {k[1]} | {k[2].upper()} | {k[3].upper()} | " +
                     " | ".join(f"{vals[e]:.3f}" if e in vals else "-" for e in eps) + " |")
    return "\n".join(lines)
