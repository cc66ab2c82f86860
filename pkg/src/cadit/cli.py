"""Command-line experiment runner.

Spec files are flat ``key = value`` lines; ``#`` starts a comment. Example::

    dataset = glyph
    lambda1 = 5
    lambda2 = 0.1
    lambda3 = 1e-4
    seeds = 0, 1, 2, 3, 4
    out = results/glyph

See the README for every key and its default.
"""
import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evaluate
from .losses import TERMS
from .nn import lr_schedule, save_checkpoint
from .synthdata import IMAGE_SIZE, GlyphStyle, gen_gaussian_pair, gen_glyph_pair, save_pair
from .train import TERM_SWITCHES, TrainConfig, TrainingAborted, prediction_path, run_training, train_source_only

log = logging.getLogger("cadit")

EXIT_OK, EXIT_SPEC, EXIT_ABORT = 0, 2, 3


class SpecError(ValueError):
    pass


# ------------------------------------------------------------------- spec

def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _terms(s):
    t = frozenset(v.strip() for v in s.split(",") if v.strip())
    bad = t - set(TERM_SWITCHES)
    if bad:
        raise ValueError(f"unknown term(s) {sorted(bad)}; allowed: {', '.join(TERM_SWITCHES)}")
    return t


def _choice(*allowed):
    def parse(s):
        if s not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {s!r}")
        return s
    return parse


# key -> (parser, default); a default of REQUIRED means the key must appear
REQUIRED = object()
KEYS = {
    "dataset": (_choice("glyph", "gaussian"), REQUIRED),
    "lambda1": (float, REQUIRED),
    "lambda2": (float, REQUIRED),
    "lambda3": (float, REQUIRED),
    "seeds": (_ints, REQUIRED),
    "out": (str, None),
    "n_classes": (int, None),
    "n_per_class": (int, 200),
    "data_seed": (int, None),
    "source_stroke": (float, 1.0),
    "source_invert": (_bool, False),
    "source_noise": (float, 0.0),
    "target_stroke": (float, 2.0),
    "target_invert": (_bool, True),
    "target_noise": (float, 0.1),
    "rotation": (float, 0.0),
    "translation": (_floats, (0.0, 0.0)),
    "scale": (float, 1.0),
    "noise_sd": (float, 0.1),
    "radius": (float, 0.5),
    "epochs": (int, 30),
    "batch": (int, 64),
    "warmup_epochs": (int, 5),
    "adv_mode": (_choice("mse", "log"), "mse"),
    "dsp_mode": (_choice("literal", "margin"), "literal"),
    "dsp_margin": (float, 1.0),
    "dsp_space": (_choice("raw", "trunk"), "raw"),
    "gamma_mode": (_choice("entropy", "constant-one"), "entropy"),
    "pseudo_label": (_choice("soft", "onehot"), "soft"),
    "terms": (_terms, frozenset(TERM_SWITCHES)),
    "lr_start": (float, 0.002),
    "lr_end": (float, 0.0002),
    "beta1": (float, 0.5),
    "beta2": (float, 0.999),
    "widths": (_ints, (8, 16)),
    "hidden": (int, 32),
    "features": (int, 64),
    "epoch_eval": (_bool, True),
}


@dataclass
class ExperimentSpec:
    values: dict
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seeds(self):
        return list(self.values["seeds"])

    def config(self, seed, **overrides):
        v = self.values
        kw = dict(
            lambda1=v["lambda1"], lambda2=v["lambda2"], lambda3=v["lambda3"], epochs=v["epochs"],
            batch=v["batch"], adv_mode=v["adv_mode"], dsp_mode=v["dsp_mode"], dsp_margin=v["dsp_margin"],
            dsp_space=v["dsp_space"], warmup_epochs=v["warmup_epochs"], lr_start=v["lr_start"],
            lr_end=v["lr_end"], beta1=v["beta1"], beta2=v["beta2"], seed=seed,
            enabled_terms=v["terms"], gamma_mode=v["gamma_mode"], pseudo_label=v["pseudo_label"],
            widths=v["widths"], hidden=v["hidden"], features=v["features"],
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def make_pair(self, seed):
        v = self.values
        data_seed = seed if v["data_seed"] is None else v["data_seed"]
        if v["dataset"] == "glyph":
            return gen_glyph_pair(
                v["n_classes"] or 10, v["n_per_class"],
                GlyphStyle(v["source_stroke"], v["source_invert"], v["source_noise"]),
                GlyphStyle(v["target_stroke"], v["target_invert"], v["target_noise"]),
                seed=data_seed)
        return gen_gaussian_pair(
            v["n_classes"] or 2, v["n_per_class"], rotation=v["rotation"], translation=v["translation"],
            scale=v["scale"], noise_sd=v["noise_sd"], seed=data_seed, radius=v["radius"])

    def as_dict(self):
        out = {}
        for k, val in self.values.items():
            out[k] = sorted(val) if isinstance(val, frozenset) else (list(val) if isinstance(val, tuple) else val)
        return out


def parse_spec_text(text, source="<spec>"):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in KEYS:
            raise SpecError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise SpecError(f"{source}:{lineno}: key {key!r} repeated (first set on line {lines[key]})")
        if not val:
            raise SpecError(f"{source}:{lineno}: key {key!r} has no value")
        try:
            values[key] = KEYS[key][0](val)
        except ValueError as exc:
            raise SpecError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        lines[key] = lineno
    for key, (_, default) in KEYS.items():
        if key in values:
            continue
        if default is REQUIRED:
            raise SpecError(f"{source}: missing required key {key!r}")
        values[key] = default
    seeds = values["seeds"]
    if not seeds:
        raise SpecError(f"{source}:{lines['seeds']}: seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise SpecError(f"{source}:{lines['seeds']}: seeds must be distinct")
    spec = ExperimentSpec(values, lines)
    try:
        spec.config(seeds[0])
    except ValueError as exc:
        raise SpecError(f"{source}: invalid training settings: {exc}") from None
    return spec


def load_spec(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from None
    return parse_spec_text(text, path)


# ---------------------------------------------------------------- outputs

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_loss_csv(path, state, cfg, total_steps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", *TERMS, "total"])
        for i, b in enumerate(state.history):
            lr = lr_schedule(i, total_steps, cfg.lr_start, cfg.lr_end)
            w.writerow([i, repr(lr), *(repr(getattr(b, t)) for t in TERMS), repr(b.total)])


def _oracle(pair, seed):
    try:
        return evaluate.train_target_oracle(pair, seed)
    except evaluate.OracleUnusable as exc:
        log.warning("label-flip oracle unusable: %s", exc)
        return None


def run_one(spec, seed, out_dir):
    """Train one seed and write its four artifacts; returns the metrics dict."""
    os.makedirs(out_dir, exist_ok=True)
    pair = spec.make_pair(seed)
    cfg = spec.config(seed)
    save_pair(os.path.join(out_dir, "dataset.bin"), pair)
    state, history = run_training(pair, cfg, evaluate_epochs=spec["epoch_eval"],
                                  progress=lambda r: log.info("seed %d epoch %d %s", seed, r["epoch"], r))
    path = prediction_path(cfg)
    metrics = evaluate.evaluate_run(state, pair, path, seed, _oracle(pair, seed))
    metrics.extra["epochs"] = history
    metrics.extra["prediction_path"] = path
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        fh.write(metrics.to_json() + "\n")
    write_loss_csv(os.path.join(out_dir, "loss.csv"), state, cfg, len(state.history))
    evaluate.export_embedding(state, pair, os.path.join(out_dir, "embedding.csv"), seed=seed)
    size = IMAGE_SIZE if pair.kind == "glyph" else 0
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), state.model.named_arrays(), pair.n_classes, size)
    return json.loads(metrics.to_json())


# ------------------------------------------------------------ ablation grid

# (row, enabled terms, gamma mode); rows 5, 6 and 8 fix every gamma at 1
_BASE = frozenset({"dgan_t", "dgan_s", "cyc"})
ABLATION_ROWS = (
    (1, frozenset({"dgan_t"}), "entropy"),
    (2, frozenset({"dgan_s"}), "entropy"),
    (3, _BASE, "entropy"),
    (4, _BASE | {"clc"}, "entropy"),
    (5, _BASE | {"jgan"}, "constant-one"),
    (6, _BASE | {"clc", "jgan"}, "constant-one"),
    (7, _BASE | {"clc", "jgan"}, "entropy"),
    (8, _BASE | {"clc", "jgan", "dsp"}, "constant-one"),
    (9, _BASE | {"clc", "jgan", "dsp"}, "entropy"),
)


def _row_label(terms, gamma):
    order = [t for t in TERM_SWITCHES if t in terms]
    label = "+".join(order)
    if "jgan" in terms:
        label += " (gamma=1)" if gamma == "constant-one" else " (gamma<=1)"
    return label


def ablation_seed(spec, seed):
    """All nine rows plus the source-only baseline for one seed."""
    pair = spec.make_pair(seed)
    oracle = _oracle(pair, seed)
    rows = {}
    for row, terms, gamma in ABLATION_ROWS:
        cfg = spec.config(seed, enabled_terms=terms, gamma_mode=gamma)
        state, _ = run_training(pair, cfg, evaluate_epochs=False)
        m = evaluate.evaluate_run(state, pair, prediction_path(cfg), seed, oracle)
        rows[row] = json.loads(m.to_json())
        log.info("seed %d row %d accuracy %.4f", seed, row, m.target_accuracy)
    base = train_source_only(pair, spec.config(seed))
    return rows, evaluate.classifier_accuracy(base, pair)


def _sd(xs):
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def write_ablation(out, seeds, results, baseline):
    with open(os.path.join(out, "ablation_accuracy.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "terms", *(f"seed_{s}" for s in seeds)])
        for row, terms, gamma in ABLATION_ROWS:
            w.writerow([row, _row_label(terms, gamma),
                        *(repr(results[s][row]["target_accuracy"]) for s in seeds)])
    with open(os.path.join(out, "ablation_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "terms", "mean", "sd"])
        for row, terms, gamma in ABLATION_ROWS:
            acc = [results[s][row]["target_accuracy"] for s in seeds]
            w.writerow([row, _row_label(terms, gamma), repr(float(np.mean(acc))), repr(_sd(acc))])
        acc = [baseline[s] for s in seeds]
        w.writerow(["source_only", "source classifier, no adaptation", repr(float(np.mean(acc))), repr(_sd(acc))])
    _write_json(os.path.join(out, "ablation_metrics.json"),
                {"rows": {str(s): {str(r): m for r, m in results[s].items()} for s in seeds},
                 "source_only": {str(s): baseline[s] for s in seeds}})


# ------------------------------------------------------------------ report

def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def report(directory, out=None):
    runs = sorted(d for d in (os.listdir(directory) if os.path.isdir(directory) else [])
                  if d.startswith("seed_") and os.path.isfile(os.path.join(directory, d, "metrics.json"))
                  and os.path.isfile(os.path.join(directory, d, "loss.csv")))
    has_ablation = os.path.isfile(os.path.join(directory, "ablation_metrics.json"))
    if not runs and not has_ablation:
        raise SpecError(f"{directory}: no run or ablation artifacts found")
    out = out or os.path.join(directory, "report")
    os.makedirs(out, exist_ok=True)
    lines = [f"report for {os.path.abspath(directory)}", ""]
    bars = []

    if runs:
        lines.append("loss terms (mean over the last 10% of steps):")
        lines.append("  " + "seed".ljust(10) + "".join(t.rjust(11) for t in (*TERMS, "total")))
        with open(os.path.join(out, "loss_curves.dat"), "w") as fh:
            for d in runs:
                rows = _read_csv(os.path.join(directory, d, "loss.csv"))
                fh.write(f"# {d}\n# step lr {' '.join(TERMS)} total\n")
                for r in rows:
                    fh.write(" ".join(r[k] for k in ("step", "lr", *TERMS, "total")) + "\n")
                fh.write("\n\n")
                tail = rows[-max(1, len(rows) // 10):]
                means = [float(np.mean([float(r[k]) for r in tail])) if tail else math.nan for k in (*TERMS, "total")]
                lines.append("  " + d.ljust(10) + "".join(f"{m:11.4f}" for m in means))
        lines.append("")
        lines.append("metrics:")
        for d in runs:
            with open(os.path.join(directory, d, "metrics.json")) as fh:
                m = json.load(fh)
            lines.append(f"  {d}: target accuracy {_fmt(m['target_accuracy'])}, "
                         f"A-distance {_fmt(m['a_distance_before'])} -> {_fmt(m['a_distance_after'])}, "
                         f"label-flip rate {_fmt(m['label_flip_rate'])}")
            bars.append((d, m["a_distance_before"], m["a_distance_after"]))
        lines.append("")

    if has_ablation:
        with open(os.path.join(directory, "ablation_metrics.json")) as fh:
            ab = json.load(fh)
        seeds = sorted(ab["rows"], key=int)
        lines.append("ablation (target accuracy, mean and sd over seeds " + ", ".join(seeds) + "):")
        with open(os.path.join(out, "accuracy_vs_row.dat"), "w") as fh:
            fh.write("# row mean sd\n")
            for row, terms, gamma in ABLATION_ROWS:
                acc = [ab["rows"][s][str(row)]["target_accuracy"] for s in seeds]
                mean, sd = float(np.mean(acc)), _sd(acc)
                fh.write(f"{row} {mean!r} {sd!r}\n")
                lines.append(f"  row {row} {_row_label(terms, gamma):42s} {mean:.4f} +- {sd:.4f}")
        base = [ab["source_only"][s] for s in seeds]
        lines.append(f"  source only {'':38s} {np.mean(base):.4f} +- {_sd(base):.4f}")
        lines.append("")
        for s in seeds:
            m = ab["rows"][s]["9"]
            bars.append((f"row9_seed_{s}", m["a_distance_before"], m["a_distance_after"]))

    with open(os.path.join(out, "a_distance.dat"), "w") as fh:
        fh.write("# task before after\n")
        for task, before, after in bars:
            fh.write(f"{task} {before!r} {after!r}\n")
    with open(os.path.join(out, "plots.gp"), "w") as fh:
        fh.write(_GNUPLOT)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return out


_GNUPLOT = """\
# gnuplot plots.gp  (run inside this directory)
set terminal pngcairo size 900,600
set key outside
if (system("test -f loss_curves.dat && echo 1") eq "1") {
  set output "loss_curves.png"
  set xlabel "step"; set ylabel "loss"
  plot for [c=3:10] "loss_curves.dat" index 0 using 1:c with lines title columnhead(c)
}
if (system("test -f accuracy_vs_row.dat && echo 1") eq "1") {
  set output "accuracy_vs_row.png"
  set xlabel "ablation row"; set ylabel "target accuracy"; set yrange [0:1]
  plot "accuracy_vs_row.dat" using 1:2:3 with yerrorbars title "mean +- sd"
}
set output "a_distance.png"
set style data histograms; set style fill solid 0.6
set ylabel "proxy A-distance"; set yrange [0:2]; set xtics rotate by -45
plot "a_distance.dat" using 2:xtic(1) title "raw source", "" using 3 title "translated source"
"""


# -------------------------------------------------------------------- main

def _threads():
    try:
        return max(1, int(os.environ.get("CADIT_THREADS", "1")))
    except ValueError:
        return 1


def _map_seeds(fn, seeds):
    workers = min(_threads(), len(seeds))
    if workers == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def _resolve(args):
    spec = load_spec(args.spec)
    if args.seed_override is not None:
        spec.values["seeds"] = tuple(args.seed_override)
    out = args.out or spec["out"]
    if not out:
        raise SpecError(f"{args.spec}: no output directory (set 'out' or pass --out)")
    return spec, out


def cmd_run(args):
    spec, out = _resolve(args)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "spec.json"), spec.as_dict())
    results = _map_seeds(lambda s: run_one(spec, s, os.path.join(out, f"seed_{s}")), spec.seeds)
    for s, m in zip(spec.seeds, results):
        print(f"seed {s}: target accuracy {m['target_accuracy']:.4f}")
    return EXIT_OK


def cmd_ablation(args):
    spec, out = _resolve(args)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "spec.json"), spec.as_dict())
    t0 = time.process_time()
    outs = _map_seeds(lambda s: ablation_seed(spec, s), spec.seeds)
    results = {s: r for s, (r, _) in zip(spec.seeds, outs)}
    baseline = {s: b for s, (_, b) in zip(spec.seeds, outs)}
    write_ablation(out, spec.seeds, results, baseline)
    _write_json(os.path.join(out, "ablation_timing.json"), {"cpu_seconds": time.process_time() - t0})
    with open(os.path.join(out, "ablation_summary.csv")) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_report(args):
    path = report(args.dir, args.out)
    with open(os.path.join(path, "summary.txt")) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cadit", description="Adversarial domain adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (("run", cmd_run, "train each seed of a spec and write artifacts"),
                               ("ablation", cmd_ablation, "run the nine-row ablation grid per seed")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("spec")
        sp.add_argument("--seed-override", type=_ints, default=None, metavar="SEEDS",
                        help="comma-separated seeds replacing the spec's list")
        sp.add_argument("--out", default=None, help="output directory (overrides the spec)")
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("report", help="summarise a run/ablation directory")
    sp.add_argument("dir")
    sp.add_argument("--out", default=None, help="report directory (default DIR/report)")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_SPEC
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
