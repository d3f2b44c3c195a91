"""Zero-gradient probes, the last-layer gradient oracle and masking checks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .attacks import PROBE_CONFIG, AttackConfig, RobustRow, correctly_classified, pgd
from .models import MARK, NONMARK, Model
from .tensor import FULL64, PrecisionMode

CLASS_NAMES = {MARK: "Mark", NONMARK: "NonMark"}


# ---------------------------------------------------------------- zero-gradient probe

@dataclass
class ClassProbe:
    samples: int
    first_step_zero: int
    mean_zero_steps: float
    # Mean confidence at the first step over examples, and over every
    # (example, step) pair; both readings of "average confidence".
    conf_first_step: tuple[float, float]
    conf_all_steps: tuple[float, float]


@dataclass
class ZeroGradReport:
    model: str
    precision: str
    steps: int
    classes: dict[str, ClassProbe] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def zero_grad_probe(model: Model, images, labels, cfg: AttackConfig = PROBE_CONFIG,
                    batch: int = 100) -> ZeroGradReport:
    """Run PGD and count steps whose input gradient is exactly zero.

    Only correctly classified samples are probed. A step counts as zero
    when ``max |dL/dx| == 0.0`` with no tolerance.
    """
    x = np.asarray(getattr(images, "pixels", images), dtype=np.float64).reshape(-1, 40, 50)
    y = np.asarray(labels, dtype=np.int64)
    keep = correctly_classified(model, x, y, cfg.mode)
    x, y = x[keep], y[keep]
    results = []
    for s in range(0, len(y), batch):
        results.extend(pgd(model, x[s:s + batch], y[s:s + batch], cfg))
    report = ZeroGradReport(model.tag, cfg.mode.name, cfg.steps)
    for c, name in CLASS_NAMES.items():
        rs = [r for r, lab in zip(results, y) if lab == c]
        if not rs:
            report.classes[name] = ClassProbe(0, 0, 0.0, (math.nan, math.nan), (math.nan, math.nan))
            continue
        zero = np.array([[st.grad_max == 0.0 for st in r.trace] for r in rs])
        conf = np.array([[st.confidence for st in r.trace] for r in rs])  # (n, k, 2)
        report.classes[name] = ClassProbe(
            samples=len(rs),
            first_step_zero=int(zero[:, 0].sum()),
            mean_zero_steps=float(zero.sum(axis=1).mean()),
            conf_first_step=tuple(float(v) for v in conf[:, 0].mean(axis=0)),
            conf_all_steps=tuple(float(v) for v in conf.reshape(-1, 2).mean(axis=0)),
        )
    return report


def precision_sweep(model: Model, images, labels, modes, cfg: AttackConfig = PROBE_CONFIG) -> dict[str, ZeroGradReport]:
    """The same probe under each precision mode, keyed by mode name."""
    modes = list(modes)
    if not modes:
        raise ValueError("precision_sweep needs at least one mode")
    out = {}
    for m in modes:
        c = cfg.with_(precision=m.kind.value, flush_to_zero=m.flush_to_zero)
        out[m.name] = zero_grad_probe(model, images, labels, c)
    return out


def table2_text(reports) -> str:
    """Aligned text in the shape of the zero-gradient table."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    head = ("Model", "Precision", "Class", "N", "1st-step zero", "Avg zero steps", "Conf (1st step)", "Conf (all steps)")
    rows = [head]
    for r in reports:
        for name, p in r.classes.items():
            rows.append((r.model, r.precision, name, str(p.samples), str(p.first_step_zero),
                         f"{p.mean_zero_steps:.2f}/{r.steps}",
                         f"[{p.conf_first_step[0]:.4g}, {p.conf_first_step[1]:.4g}]",
                         f"[{p.conf_all_steps[0]:.4g}, {p.conf_all_steps[1]:.4g}]"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(rows[0]), fmt(tuple("-" * w for w in widths))] + [fmt(r) for r in rows[1:]])


# ---------------------------------------------------------------- last layer

@dataclass
class LastLayerTrace:
    z: np.ndarray
    exp_z: np.ndarray
    confidence: np.ndarray
    grad_z: np.ndarray
    grad_h: np.ndarray


def last_layer_oracle(W, b, h, label: int, mode: PrecisionMode = FULL64) -> LastLayerTrace:
    """Hand-written backprop through linear -> softmax -> CE.

    Uses the closed-form ``dL/dz = conf - y`` and ``dL/dh = dL/dz . W``,
    evaluated step by step in ``mode`` without the tape.
    """
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if W.ndim != 2 or h.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dimension mismatch: W {W.shape}, b {b.shape}, h {h.shape}")
    dt = mode.dtype
    z = mode.finish(mode.matmul(mode.finish(h), mode.finish(W).T) + mode.finish(b))
    with np.errstate(over="ignore", under="ignore"):
        e = mode.finish(np.exp(z))
        s = mode.finish(e.sum(axis=-1, keepdims=True))
        conf = mode.finish(e / s)
    y = np.zeros(W.shape[0], dtype=dt)
    y[label] = 1
    gz = mode.finish(conf - y)
    gh = mode.matmul(gz, mode.finish(W))
    return LastLayerTrace(z, e, conf, gz, gh)


def log2_ratio(z) -> tuple[float, int]:
    """Second softmax component of a logit pair as ``mantissa * 2**exponent``.

    Worked in the log domain so nothing underflows: log(conf_2) is
    ``d - log1p(e^d)`` with ``d = z_2 - z_1``.
    """
    z1, z2 = (float(v) for v in z)
    d = z2 - z1
    log_c = d - math.log1p(math.exp(d)) if d < 0 else -math.log1p(math.exp(-d))
    l2 = log_c / math.log(2.0)
    exponent = math.floor(l2)
    return 2.0 ** (l2 - exponent), int(exponent)


@dataclass
class AbsorptionReport:
    sum_absorbed: bool
    underflowed_ratio: bool
    exp_z: list[float]
    ratio: float


def absorption_check(z, mode: PrecisionMode) -> AbsorptionReport:
    """Does the small exponential vanish in the sum, and does the ratio hit 0?"""
    zz = mode.finish(np.asarray(z, dtype=np.float64))
    if zz.shape != (2,):
        raise ValueError("absorption_check takes a logit pair")
    with np.errstate(over="ignore", under="ignore"):
        e = mode.finish(np.exp(zz))
        s = mode.finish(e[0] + e[1])
        small = int(np.argmin(zz))
        ratio = mode.finish(e[small] / s)
    return AbsorptionReport(bool(s == e[1 - small]), bool(ratio == 0), [float(v) for v in e], float(ratio))


# ---------------------------------------------------------------- masking report

class MalformedTableError(ValueError):
    pass


@dataclass
class MaskingFinding:
    model: str
    loss: str
    unbounded_nonzero: bool
    non_monotone: bool
    rises: list[tuple[float, float, float, float]]
    verdict: str


def _series(table) -> dict[tuple[str, str], list[tuple[float, float]]]:
    series: dict = {}
    if isinstance(table, dict):
        for key, pts in table.items():
            series[tuple(key)] = [(float(e), float(a)) for e, a in pts]
        return series
    for r in table:
        if isinstance(r, RobustRow):
            if r.direction != "all":
                continue
            series.setdefault((r.model, r.loss), []).append((r.epsilon, r.robust_acc))
        else:
            raise MalformedTableError(f"unexpected table entry {r!r}")
    return series


def masking_report(table) -> list[MaskingFinding]:
    """Flag nonzero accuracy at eps = 1 and any rise of accuracy with eps.

    ``table`` is a list of RobustRow or a mapping ``(model, loss) -> [(eps, acc), ...]``.
    """
    series = _series(table)
    if not series:
        raise MalformedTableError("empty robust-accuracy table")
    out = []
    for (model, loss), pts in series.items():
        pts = sorted(pts)
        eps = [e for e, _ in pts]
        if len(set(eps)) != len(eps):
            raise MalformedTableError(f"{model}/{loss}: duplicate epsilon values")
        if len(pts) < 3 or not any(e == 1.0 for e in eps):
            raise MalformedTableError(f"{model}/{loss}: need >= 3 epsilons including 1.0")
        if any(not 0.0 <= a <= 1.0 for _, a in pts):
            raise MalformedTableError(f"{model}/{loss}: accuracy outside [0, 1]")
        unbounded = dict(pts)[1.0] > 0.0
        rises = [(e0, a0, e1, a1) for (e0, a0), (e1, a1) in zip(pts, pts[1:]) if a1 > a0]
        flags = [n for n, f in (("unbounded attack leaves accuracy above 0", unbounded),
                                ("accuracy rises with epsilon", bool(rises))) if f]
        verdict = "gradient masking suspected: " + "; ".join(flags) if flags else "no masking signature"
        out.append(MaskingFinding(model, loss, unbounded, bool(rises), rises, verdict))
    return out
