"""Command-line entry point.

Every subcommand reads one resolved configuration, writes its artifacts
under ``--out`` and stamps each of them with the config hash and seed.
Wall-clock times go only to the sidecar ``run.log``.

Exit codes: 1 usage, 2 config, 3 data, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AttackConfig, AttackLoss, Direction, EmptyPoolError, RobustRow, apgd,
                      correctly_classified, robust_accuracy, robust_markdown)
from .channel import ChannelConfig, channel_roundtrip, export_page
from .config import ConfigError, config_hash, dataset_counts, experiment, load_config
from .data import (Dataset, DatasetError, DatasetFormatError, Label, Provenance, export_directory,
                   load_dataset, make_bubbles, make_swatches, save_dataset, train_val_split)
from .diagnostics import (absorption_check, last_layer_oracle, log2_ratio, masking_report,
                          precision_sweep, table2_text, zero_grad_probe)
from .impact import (PUBLISHED_REPEAT_FRACTION, RaceCsvError, RaceParamError, RaceParams,
                     closed_form_outcome, expected_repeat_fraction, min_success_to_flip,
                     monte_carlo_outcome, race_table_report)
from .models import (CheckpointCompatibilityError, CheckpointFormatError, CheckpointMeta, DenoiserModel,
                     LinearSvmModel, NONMARK, ShapeError, SimpleCnnModel, denoise, load_checkpoint,
                     predict, save_checkpoint)
from .tensor import PrecisionMode
from .training import TrainConfig, TrainingDivergence, evaluate, train_classifier, train_denoiser

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4


class MissingInputError(FileNotFoundError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def sub_seed(seed: int, stream: int) -> int:
    """Independent child seed for one named stream of a run."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# streams; fixed numbering keeps old artifacts reproducible
S_BUBBLES, S_SWATCHES, S_SPLIT, S_TRAIN, S_MODEL, S_ATTACK, S_PICK, S_CHAN_TRAIN, S_CHAN_EVAL, \
    S_CHANNEL, S_DENOISER, S_IMPACT = range(12)


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("bubbleattack") / "fixtures" / name))


# ---------------------------------------------------------------- run context

class Run:
    def __init__(self, command: str, cfg: dict, out: Path):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.out = out
        self.artifacts: list[Path] = []
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> str:
        return f"config_hash={self.hash} seed={self.seed}"

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "version": __version__, "config": experiment(self.cfg)}

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def json(self, name: str, payload: dict):
        doc = {"provenance": self.provenance(), **payload}
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        buf.write(f"# {self.stamp}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self.path(name).write_text(buf.getvalue())

    def markdown(self, name: str, text: str):
        self.path(name).write_text(f"<!-- {self.stamp} -->\n\n{text.rstrip()}\n")

    def text(self, name: str, text: str):
        self.path(name).write_text(f"# {self.stamp}\n{text.rstrip()}\n")

    def checkpoint(self, name: str, model, dataset: str, epoch: int):
        save_checkpoint(model, self.path(name), CheckpointMeta(
            dataset=dataset, seed=self.seed, epoch=epoch, extra={"config_hash": self.hash}))

    def close(self, status: str = "ok"):
        entry = {"time": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                 "command": self.command, "status": status, "out": str(self.out), "config_hash": self.hash, "seed": self.seed,
                 "elapsed_s": round(time.time() - self.started, 3),
                 "artifacts": [str(p.relative_to(self.out)) for p in self.artifacts]}
        with open(self.out / "run.log", "a") as fh:
            fh.write(json.dumps(entry) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _need(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {what}: {path} ({hint})")
    return path


def _dataset(run: Run, args, default: str) -> Dataset:
    p = Path(args.dataset) if getattr(args, "dataset", None) else run.out / "data" / default
    return load_dataset(_need(p, "dataset", "run gen-data first or pass --dataset"))


def _model(run: Run, args, arch: str | None = None):
    arch = arch or run.cfg["model"]["arch"]
    p = Path(args.model) if getattr(args, "model", None) else run.out / "models" / f"{arch}.bblm"
    model, _ = load_checkpoint(_need(p, "checkpoint", "run train first or pass --model"))
    return model


def _attack_mode(cfg: dict) -> PrecisionMode:
    return PrecisionMode.parse(cfg["attack"]["precision"], cfg["attack"]["flush_to_zero"])


def _pick(model, ds: Dataset, per_class: int, mode: PrecisionMode, seed: int, provenance=None):
    """Up to ``per_class`` correctly classified samples of each class, seeded order."""
    rng = np.random.default_rng(seed)
    keep = np.ones(len(ds), bool) if provenance is None else ds.provenance == provenance
    idx = np.flatnonzero(keep)
    x, y = ds.pixels[idx], ds.labels[idx].astype(np.int64)
    ok = idx[correctly_classified(model, x, y, mode)]
    chosen = []
    for c in (Label.Mark, Label.NonMark):
        pool = ok[ds.labels[ok] == c]
        chosen.append(rng.permutation(pool)[:per_class])
    sel = np.sort(np.concatenate(chosen))
    return ds.pixels[sel], ds.labels[sel].astype(np.int64)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(run: Run, args) -> int:
    cfg, d = run.cfg, run.cfg["data"]
    counts = dataset_counts(cfg)
    print(f"target: {counts['bubbles']} bubbles + {counts['swatches']} swatches ({d['scale']} scale)")
    if args.dry_run:
        return 0
    bub = make_bubbles(counts["bubbles"], sub_seed(run.seed, S_BUBBLES), d["mark_fraction"])
    sw = make_swatches(counts["swatches"], sub_seed(run.seed, S_SWATCHES), d["swatch_threshold"], d["dead_band"])
    full = bub.concat(sw)
    full.tag = "synthetic"
    tr, va = train_val_split(full, d["train_fraction"], sub_seed(run.seed, S_SPLIT))
    files = {}
    for name, ds in (("train", tr), ("val", va)):
        p = run.path(f"data/{name}.bbld")
        save_dataset(ds, p)
        files[name] = {"path": f"data/{name}.bbld", "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                       "count": len(ds), "classes": ds.class_counts()}
    stats = []
    mass = (1.0 - full.pixels).sum(axis=(1, 2))
    for prov in (Provenance.Bubble, Provenance.Swatch):
        for lab in Label:
            sel = (full.provenance == prov) & (full.labels == lab)
            if sel.any():
                stats.append([prov.name, lab.name, int(sel.sum()), float(mass[sel].mean()),
                              float(mass[sel].min()), float(mass[sel].max())])
    run.json("data/manifest.json", {"counts": counts, "files": files, "mass_stats": [
        dict(zip(("provenance", "label", "n", "mean", "min", "max"), s)) for s in stats]})
    lines = ["| provenance | label | n | mean mass | min | max |", "|---|---|---|---|---|---|"]
    lines += [f"| {p} | {l} | {n} | {m:.1f} | {lo:.1f} | {hi:.1f} |" for p, l, n, m, lo, hi in stats]
    run.markdown("data/data.md", "## Dataset\n\n" + "\n".join(lines))
    print(f"train {len(tr)} {tr.class_counts()}  val {len(va)} {va.class_counts()}")
    for p, l, n, m, lo, hi in stats:
        print(f"  {p:<7} {l:<8} n={n:<6} mass mean {m:8.1f}  min {lo:8.1f}  max {hi:8.1f}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(**{**t, "betas": tuple(t["betas"]), "seed": sub_seed(cfg["seed"], S_TRAIN)})


def cmd_train(run: Run, args) -> int:
    cfg = run.cfg
    arch = cfg["model"]["arch"]
    tr = load_dataset(_need(run.out / "data" / "train.bbld", "dataset", "run gen-data first"))
    va = load_dataset(_need(run.out / "data" / "val.bbld", "dataset", "run gen-data first"))
    if arch == "svm":
        s = cfg["svm"]
        model = LinearSvmModel()
        tc = TrainConfig(learning_rate=s["learning_rate"], epochs=s["epochs"], weight_decay=s["weight_decay"],
                         loss="hinge", seed=sub_seed(run.seed, S_TRAIN), precision="f64")
    else:
        model = SimpleCnnModel(dropout=cfg["model"]["dropout"], seed=sub_seed(run.seed, S_MODEL))
        tc = _train_config(cfg)
    result = train_classifier(model, tr, tc, va)
    mode = tc.mode
    final = {"train": evaluate(model, tr, mode=mode).to_dict(), "val": evaluate(model, va, mode=mode).to_dict()}
    run.checkpoint(f"models/{arch}.bblm", model, "synthetic", len(result.metrics))
    run.csv(f"train/{arch}_metrics.csv", ["epoch", "train_acc", "val_acc", "loss"],
            [[m.epoch, m.train_acc, m.val_acc, m.loss] for m in result.metrics])
    run.json(f"train/{arch}.json", {"model": arch, "parameters": model.parameter_count(),
                                    "train_config": tc.to_dict(), "final": final})
    run.markdown(f"train/{arch}.md", "\n".join([
        "## Clean accuracy", "",
        "| model | dataset | train acc | val acc |", "|---|---|---|---|",
        f"| {arch} | synthetic | {final['train']['accuracy']:.4f} | {final['val']['accuracy']:.4f} |"]))
    print(f"{arch}: train {final['train']['accuracy']:.4f}  val {final['val']['accuracy']:.4f}")
    return 0


def _attack_config(cfg: dict, **kw) -> AttackConfig:
    a = cfg["attack"]
    base = {k: a[k] for k in ("steps", "step_size", "momentum_decay", "apgd_alpha", "apgd_rho",
                              "random_start", "kappa", "precision", "flush_to_zero")}
    return AttackConfig(seed=sub_seed(cfg["seed"], S_ATTACK), **{**base, **kw})


def cmd_attack(run: Run, args) -> int:
    cfg = run.cfg
    model = _model(run, args)
    ds = _dataset(run, args, "val.bbld")
    mode = _attack_mode(cfg)
    x, y = _pick(model, ds, cfg["attack"]["samples_per_class"], mode, sub_seed(run.seed, S_PICK))
    if len(y) == 0:
        raise EmptyPoolError("no correctly classified samples to attack")
    rows: list[RobustRow] = []
    for attack in cfg["attack"]["attacks"]:
        for loss in cfg["attack"]["losses"]:
            ac = _attack_config(cfg, loss=loss)
            rows += robust_accuracy(model, x, y, ac, cfg["attack"]["epsilons"], attack, "synthetic")
            print(f"{model.tag} {attack}-{loss}: " + " ".join(
                f"{r.robust_acc:.3f}" for r in rows if r.direction == "all" and r.attack == attack and r.loss == loss))
    tag = model.tag
    run.csv(f"attack/{tag}.csv", ["model", "dataset", "attack", "loss", "epsilon", "direction", "robust_acc", "n"],
            [[r.model, r.dataset, r.attack, r.loss, r.epsilon, r.direction, r.robust_acc, r.n] for r in rows])
    findings = []
    eps = set(cfg["attack"]["epsilons"])
    if 1.0 in eps and len(eps) >= 3:
        for attack in cfg["attack"]["attacks"]:
            findings += [{"attack": attack, **f.__dict__} for f in
                         masking_report([r for r in rows if r.attack == attack])]
    run.json(f"attack/{tag}.json", {"rows": [r.__dict__ for r in rows], "masking": findings})
    parts = ["## Robust accuracy", "", robust_markdown(rows, "all")]
    for d in (Direction.Over.value, Direction.Under.value):
        if any(r.direction == d for r in rows):
            parts += ["", f"### {d.capitalize()}", "", robust_markdown(rows, d)]
    if findings:
        parts += ["", "### Masking checks", ""] + [f"- {f['attack']}/{f['loss']}: {f['verdict']}" for f in findings]
    run.markdown(f"attack/{tag}.md", "\n".join(parts))
    return 0


def _modes(cfg: dict) -> list[PrecisionMode]:
    ftz = cfg["attack"]["flush_to_zero"]
    return [PrecisionMode.parse(m, ftz and m != "f64") for m in cfg["diagnose"]["modes"]]


def last_layer_report() -> dict:
    fx = json.loads(fixture_path("last_layer.json").read_text())
    out = {}
    modes = [PrecisionMode.parse("f64"), PrecisionMode.parse("f32"), PrecisionMode.parse("f32", True),
             PrecisionMode.parse("tf32", True)]
    for name, case in fx["cases"].items():
        rows = {}
        for m in modes:
            tr = last_layer_oracle(fx["W"], fx["b"], case["h"], case["label"], m)
            ab = absorption_check(tr.z, m)
            rows[m.name] = {"z": tr.z.tolist(), "exp_z": tr.exp_z.tolist(), "confidence": tr.confidence.tolist(),
                            "grad_h": tr.grad_h.tolist(), "zero_gradient": bool(np.all(tr.grad_h == 0)),
                            "sum_absorbed": ab.sum_absorbed, "underflowed_ratio": ab.underflowed_ratio}
        mant, exp2 = log2_ratio(case["h"])
        out[name] = {"modes": rows, "log2_confidence": {"mantissa": mant, "exponent": exp2}}
    return out


def cmd_diagnose(run: Run, args) -> int:
    cfg = run.cfg
    model = _model(run, args)
    ds = _dataset(run, args, "val.bbld")
    dg = cfg["diagnose"]
    probe = AttackConfig(epsilon=dg["epsilon"], step_size=dg["step_size"], steps=dg["steps"],
                         precision=cfg["attack"]["precision"], flush_to_zero=cfg["attack"]["flush_to_zero"])
    x, y = _pick(model, ds, dg["samples_per_class"], probe.mode, sub_seed(run.seed, S_PICK))
    modes = _modes(cfg)
    sweep = precision_sweep(model, x, y, modes, probe)
    ll = last_layer_report()
    run.json(f"diagnose/{model.tag}.json", {"zero_gradient": {k: v.to_dict() for k, v in sweep.items()},
                                            "last_layer": ll})
    table = table2_text(sweep)
    run.text(f"diagnose/{model.tag}_table.txt", table)
    ll_lines = ["| case | mode | confidence | zero gradient | sum absorbed |", "|---|---|---|---|---|"]
    for case, rep in ll.items():
        for mname, r in rep["modes"].items():
            c = ", ".join(f"{v:.7g}" for v in r["confidence"])
            ll_lines.append(f"| {case} | {mname} | [{c}] | {r['zero_gradient']} | {r['sum_absorbed']} |")
    run.markdown(f"diagnose/{model.tag}.md", "\n".join(
        ["## Zero-gradient probe", "", "```", table, "```", "", "### Last-layer fixture", ""] + ll_lines))
    print(table)
    return 0


def _channel_config(cfg: dict, seed_stream: int) -> ChannelConfig:
    c = cfg["channel"]
    return ChannelConfig(dither=c["dither"], dot_gain=c["dot_gain"], noise_sigma=c["noise_sigma"],
                         jitter_px=c["jitter_px"], seed=sub_seed(cfg["seed"], seed_stream))


def cmd_channel(run: Run, args) -> int:
    cfg, c = run.cfg, run.cfg["channel"]
    n_pairs, n_eval = c["pairs"], c["eval_samples"]
    pairs = make_bubbles(n_pairs, sub_seed(run.seed, S_CHAN_TRAIN)).concat(
        make_swatches(n_pairs, sub_seed(run.seed, S_CHAN_TRAIN) + 1, cfg["data"]["swatch_threshold"],
                      cfg["data"]["dead_band"]))
    noisy = channel_roundtrip(pairs.pixels, _channel_config(cfg, S_CHANNEL))
    den = DenoiserModel(seed=sub_seed(run.seed, S_DENOISER))
    dc = TrainConfig(learning_rate=c["denoiser_lr"], epochs=c["denoiser_epochs"], loss="mse",
                     batch_size=c["denoiser_batch"], seed=sub_seed(run.seed, S_DENOISER))
    train_denoiser(den, noisy, pairs.pixels, dc)
    run.checkpoint("models/denoiser.bblm", den, "post-channel pairs", dc.epochs)

    clean = make_bubbles(n_eval, sub_seed(run.seed, S_CHAN_EVAL))
    pages = []
    hook = None
    if c["export_pages"]:
        def hook(k, canvas, raster, page):
            if k < c["export_pages"]:
                export_page(run.out / "channel" / "pages", k, canvas, raster, page, bitmap=True,
                            comment=run.stamp, provenance={"config_hash": run.hash, "seed": run.seed})
                pages.append(k)
    phys = channel_roundtrip(clean.pixels, _channel_config(cfg, S_CHAN_EVAL), page_hook=hook)
    for k in pages:
        for suffix in ("scan.pgm", "layout.pgm", "manifest.json", "print.pbm"):
            p = run.out / "channel" / "pages" / f"page{k:03d}_{suffix}"
            if p.exists():
                run.artifacts.append(p)
    phys_ds = Dataset(np.clip(np.rint(phys * 255), 0, 255), clean.labels, np.full(len(clean), Provenance.PostChannel))
    mode = PrecisionMode.parse("f64")
    table12, table5 = [], []
    for arch in ("svm", "simplecnn"):
        p = run.out / "models" / f"{arch}.bblm"
        if not p.exists() and not (args.model and arch == cfg["model"]["arch"]):
            continue
        model = _model(run, args if arch == cfg["model"]["arch"] else argparse.Namespace(model=None), arch)
        row = {"model": arch,
               "digital": evaluate(model, clean, mode=mode).accuracy,
               "physical": evaluate(model, phys_ds, mode=mode).accuracy,
               "digital_denoised": evaluate(model, clean, den, mode).accuracy,
               "physical_denoised": evaluate(model, phys_ds, den, mode).accuracy}
        table12.append(row)
        table5.append(_over_rows(run, model, den, clean))
    if not table12:
        raise MissingInputError(f"missing checkpoint: no models under {run.out / 'models'} (run train first)")
    run.json("channel/channel.json", {"channel": c, "accuracy": table12, "over": table5})
    lines = ["## Print-scan channel", "", "| model | digital | physical | denoised digital | denoised physical |",
             "|---|---|---|---|---|"]
    lines += [f"| {r['model']} | {r['digital']:.3f} | {r['physical']:.3f} | {r['digital_denoised']:.3f} "
              f"| {r['physical_denoised']:.3f} |" for r in table12]
    eps = [0.0] + list(c["over_epsilons"])
    lines += ["", "### Over attacks through the channel", "",
              "| model | domain | " + " | ".join(f"{round(e * 255)}/255" for e in eps) + " |",
              "|" + "---|" * (2 + len(eps))]
    for r in table5:
        for dom in ("digital", "physical"):
            lines.append(f"| {r['model']} | {dom} | " + " | ".join(f"{v:.3f}" for v in r[dom]) + " |")
    run.markdown("channel/channel.md", "\n".join(lines))
    for r in table12:
        print(f"{r['model']}: digital {r['digital']:.3f} physical {r['physical']:.3f} "
              f"denoised {r['physical_denoised']:.3f}")
    return 0


def _over_rows(run: Run, model, den, clean: Dataset) -> dict:
    """Robustness of NonMark bubbles to Over attacks, digital and after print-scan + denoise."""
    cfg, c = run.cfg, run.cfg["channel"]
    mode = _attack_mode(cfg)
    nm = clean.subset(np.flatnonzero(clean.labels == NONMARK))
    x = nm.pixels
    keep = correctly_classified(model, x, nm.labels.astype(np.int64), mode)[:c["over_samples"]]
    x = x[keep]
    y = np.full(len(x), NONMARK)
    digital = [1.0]
    physical = [float(np.mean(predict(model, denoise(den, channel_roundtrip(x, _channel_config(cfg, S_CHANNEL))),
                                      mode) == NONMARK))] if len(x) else [float("nan")]
    for e in c["over_epsilons"]:
        ac = _attack_config(cfg, loss="dlr", epsilon=float(e), direction="over")
        res = [r for s in range(0, len(x), 100) for r in apgd(model, x[s:s + 100], y[s:s + 100], ac)]
        adv = np.stack([r.adversarial for r in res]) if res else x
        digital.append(float(np.mean([not r.success for r in res])) if res else float("nan"))
        printed = denoise(den, channel_roundtrip(adv, _channel_config(cfg, S_CHANNEL)))
        physical.append(float(np.mean(predict(model, printed, mode) == NONMARK)) if res else float("nan"))
    return {"model": model.tag, "samples": int(len(x)), "epsilons": [0.0] + list(c["over_epsilons"]),
            "digital": digital, "physical": physical}


def cmd_impact(run: Run, args) -> int:
    im = run.cfg["impact"]
    p = RaceParams(**{k: im[k] for k in ("win_share", "lose_share", "blank_rate", "deploy", "success",
                                        "recast", "target_margin")})
    cf = closed_form_outcome(p)
    mc = monte_carlo_outcome(p, im["ballots"], sub_seed(run.seed, S_IMPACT))
    flip = min_success_to_flip(p)
    src = im["races_csv"] or fixture_path("nevada_2020.csv")
    state = im["state"] or ("Nevada" if im["races_csv"] is None else "")
    races = race_table_report(Path(src), state=state, deploy=p.deploy, recast=p.recast,
                              target_margin=p.target_margin)
    payload = {"closed_form": {"lose_final": cf.lose_final, "win_final": cf.win_final},
               "monte_carlo": mc.to_dict(),
               "expected_repeat_fraction": expected_repeat_fraction(p),
               "published_repeat_fraction": PUBLISHED_REPEAT_FRACTION, "repeat_fraction_reconciled": False,
               "flip": {"status": flip.status, "success": flip.success, "algebraic": flip.algebraic},
               "races": json.loads(races.to_json())}
    run.json("impact/impact.json", payload)
    lines = ["## Election impact", "",
             "| quantity | Lose | Win |", "|---|---|---|",
             f"| closed form | {cf.lose_final:.4f} | {cf.win_final:.4f} |",
             f"| Monte Carlo (N={mc.ballots}) | {mc.lose_final:.4f} | {mc.win_final:.4f} |", "",
             f"Repeat ballot requests: simulated {mc.repeat_request_fraction:.5f}, expected "
             f"{expected_repeat_fraction(p):.5f}, published {PUBLISHED_REPEAT_FRACTION} (unreconciled).", "",
             f"Minimum success rate to flip: {flip.success if flip.success is not None else 'infeasible'}", "",
             "### Close races", "", races.markdown()]
    run.markdown("impact/impact.md", "\n".join(lines))
    print(f"closed form: lose {cf.lose_final:.4f} win {cf.win_final:.4f}")
    print(f"monte carlo: lose {mc.lose_final:.6f} win {mc.win_final:.6f}")
    return 0


REPORT_ORDER = ("data", "train", "diagnose", "attack", "channel", "impact")


def cmd_report(run: Run, args) -> int:
    parts, index = [f"# Run report", ""], []
    for sec in REPORT_ORDER:
        for p in sorted((run.out / sec).glob("*.md")) if (run.out / sec).is_dir() else []:
            body = p.read_text().split("\n", 2)[-1] if p.read_text().startswith("<!--") else p.read_text()
            parts += [body.strip(), ""]
            index.append(str(p.relative_to(run.out)))
    if not index:
        raise MissingInputError(f"missing inputs: no markdown artifacts under {run.out}")
    run.markdown("report.md", "\n".join(parts))
    hashes = {}
    for sec in REPORT_ORDER:
        d = run.out / sec
        if d.is_dir():
            for p in sorted(d.rglob("*")):
                if p.is_file():
                    hashes[str(p.relative_to(run.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    run.json("report.json", {"sections": index, "sha256": hashes})
    print(f"merged {len(index)} sections into {run.out / 'report.md'}")
    return 0


def cmd_export(run: Run, args) -> int:
    ds = _dataset(run, args, "val.bbld")
    name = Path(args.dataset).stem if args.dataset else "val"
    out = export_directory(ds, run.out / "export" / name, comment=run.stamp)
    run.artifacts.append(out / "labels.csv")
    print(f"wrote {len(ds)} images to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "diagnose": cmd_diagnose,
    "channel": cmd_channel, "impact": cmd_impact, "report": cmd_report, "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--precision", choices=("f64", "f32", "tf32"), help="compute precision for train/attack")
    common.add_argument("--flush-to-zero", action="store_true", help="flush float32 subnormals to zero")
    parser = _Parser(prog="bubbleattack", description="Adversarial bubble experiments at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic bubbles and swatches")
    p.add_argument("--dry-run", action="store_true", help="print target counts without writing")
    sub.add_parser("train", parents=[common], help="train the configured classifier")
    for name, desc in (("attack", "robust accuracy sweep"), ("diagnose", "zero-gradient probe and precision sweep"),
                       ("channel", "print-scan channel, denoiser and Over transfer"),
                       ("export", "export a dataset as graymaps")):
        p = sub.add_parser(name, parents=[common], help=desc)
        p.add_argument("--model", metavar="PATH", help="checkpoint (default: OUT/models/<arch>.bblm)")
        p.add_argument("--dataset", metavar="PATH", help="dataset file (default: OUT/data/val.bbld)")
    sub.add_parser("impact", parents=[common], help="election impact model")
    sub.add_parser("report", parents=[common], help="merge markdown artifacts into one report")
    return parser


def resolve(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("/seed", "must be >= 0")
        over["seed"] = args.seed
    if args.out:
        over["output"] = {"dir": args.out}
    if args.precision:
        over["train"] = {"precision": args.precision}
        over["attack"] = {"precision": args.precision}
    if args.flush_to_zero:
        over.setdefault("train", {})["flush_to_zero"] = True
        over.setdefault("attack", {})["flush_to_zero"] = True
    if args.config and not Path(args.config).is_file():
        raise ConfigError("", f"config file not found: {args.config}")
    return load_config(args.config, over)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    run = None
    try:
        cfg = resolve(args)
        run = Run(args.command, cfg, Path(cfg["output"]["dir"]))
        code = COMMANDS[args.command](run, args)
        run.close()
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, DatasetFormatError, DatasetError, CheckpointFormatError,
            CheckpointCompatibilityError, ShapeError, RaceCsvError, RaceParamError, EmptyPoolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        if run:
            run.close("data error")
        return EXIT_DATA
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        if run:
            run.close("divergence")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
