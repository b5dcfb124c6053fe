"""Command-line entry point: ``graspinfer <command> [flags]``.

Settings resolve as flags > ``--config`` file (flat ``key=value``) >
built-in defaults; the resolved values and their origin are echoed to
stderr before each run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import evaluation, models, planner, trainer, world

log = logging.getLogger("graspinfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Option:
    name: str
    type: type = str
    default: object = None
    help: str = ""
    choices: tuple | None = None


def _flag(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CALIB = [Option(f"calib.{f.name}", float, f.default, "toy-world calibration") for f in fields(world.Calibration)]
_PLANNER = [
    Option("max-iters", int, 100, "ascent iterations per init"),
    Option("step0", float, 0.001, "initial line-search step"),
    Option("acceptance", str, "armijo", "line-search acceptance rule", ("armijo", "increase")),
    Option("opening-radius", float, 0.05, "opening box half-width around each init"),
    Option("heuristic-opening", _flag, True, "also keep the opening within the heuristic's range"),
]

COMMANDS = {
    "gen-data": [
        Option("n", int, 1500, "number of grasp trials"),
        Option("seed", int, 0),
        Option("families", int, 24, "size of the object family pool"),
        Option("out", str, None, "dataset file to write"),
    ]
    + _CALIB,
    "train": [
        Option("data", str, None, "dataset file"),
        Option("arch", str, "config-net", choices=tuple(models.MODEL_TYPES)),
        Option("iters", int, None, "iterations (default depends on --arch)"),
        Option("seed", int, 0),
        Option("patch-mode", str, "fixed", "config-net object patch", ("fixed", "palm-tracked")),
        Option("mirror", _flag, True, "add left-right mirrored copies"),
        Option("out", str, None, "checkpoint to write"),
        Option("loss-out", str, None, "loss trace file (default: <out>.loss)"),
    ],
    "eval": [
        Option("data", str, None, "dataset file"),
        Option("model", str, None, "checkpoint giving architecture and seed"),
        Option("mode", str, "seen", choices=("seen", "unseen")),
        Option("folds", int, 5),
        Option("seed", int, 0),
        Option("iters", int, None, "per-fold training iterations"),
        Option("out", str, None, "report file (default: stdout only)"),
        Option("scores-out", str, None, "per-sample fold scores for plot-data"),
    ],
    "plan": [
        Option("model", str, None, "classifier checkpoint"),
        Option("scene-seed", int, 0),
        Option("inits", str, "heuristic", "heuristic or a file of theta rows"),
        Option("mode", str, "config-only", choices=("config-only", "full-chain")),
    ]
    + _PLANNER,
    "bench": [
        Option("model", str, None, "classifier checkpoint"),
        Option("regression", str, None, "optional regression checkpoint"),
        Option("scenes", int, 200),
        Option("seed", int, 0),
        Option("methods", str, "all", "comma list of " + ",".join(evaluation.METHODS + ("regression",))),
        Option("samples", int, 150, "draws for the sampling baseline"),
        Option("mode", str, "config-only", choices=("config-only", "full-chain")),
        Option("timing", _flag, False, "record wall times in the trial log (not reproducible)"),
        Option("out", str, None, "report file"),
        Option("log", str, None, "per-trial log file"),
    ]
    + _PLANNER,
    "plot-data": [
        Option("scores", str, None, "comma list of eval --scores-out files"),
        Option("bench-log", str, None, "bench per-trial log"),
        Option("out", str, None, "output file (default: stdout)"),
    ],
}
GLOBAL = [Option("workers", int, 1, "worker processes"), Option("verbose", _flag, False)]
REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "model"),
    "plan": ("model",),
    "bench": ("model",),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class RunConfig:
    """Resolved settings with the origin of every value."""

    def __init__(self, options):
        self.options = {o.name: o for o in options}
        self.values = {o.name: o.default for o in options}
        self.source = {o.name: "default" for o in options}

    def set(self, key, raw, source):
        if key not in self.options:
            raise UsageError(f"unknown config key {key!r}")
        opt = self.options[key]
        typed = isinstance(opt.type, type) and isinstance(raw, opt.type)
        try:
            val = raw if raw is None or typed else opt.type(raw)
        except ValueError as exc:
            raise UsageError(f"{key}: {exc}") from None
        if opt.choices and val not in opt.choices:
            raise UsageError(f"{key}: {val!r} is not one of {', '.join(opt.choices)}")
        self.values[key] = val
        self.source[key] = source

    def load_file(self, path):
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        for no, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{no}: expected key=value")
            try:
                self.set(key.strip(), val.strip(), f"file:{path}")
            except UsageError as exc:
                raise UsageError(f"{path}:{no}: {exc}") from None

    def __getitem__(self, key):
        return self.values[key]

    def echo(self, stream):
        for key in sorted(self.values):
            stream.write(f"config {key}={self.values[key]} ({self.source[key]})\n")

    def calibration(self):
        kw = {k[6:]: v for k, v in self.values.items() if k.startswith("calib.")}
        return world.Calibration(**kw)

    def planner_config(self):
        return planner.PlannerConfig(
            max_iterations=self["max-iters"],
            step0=self["step0"],
            acceptance=self["acceptance"],
            gradient_mode=self["mode"],
            opening=self["opening-radius"],
            heuristic_opening=self["heuristic-opening"],
        )


def build_parser():
    parser = argparse.ArgumentParser(prog="graspinfer", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key=value settings file")
    for o in GLOBAL:
        parser.add_argument(f"--{o.name}", default=None, help=o.help)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for o in opts:
            p.add_argument(f"--{o.name}", dest=o.name, default=None, choices=o.choices, help=o.help)
    return parser


def resolve(args):
    cfg = RunConfig(GLOBAL + COMMANDS[args.command])
    if args.config:
        cfg.load_file(args.config)
    for key in cfg.options:
        raw = getattr(args, key, None)
        if raw is not None:
            cfg.set(key, raw, "flag")
    for key in REQUIRED.get(args.command, ()):
        if cfg[key] is None:
            raise UsageError(f"--{key} is required")
    if cfg["workers"] < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _write_text(path, text):
    world.atomic_write(path, text.encode())


def cmd_gen_data(cfg, out):
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    if cfg["families"] < 1:
        raise UsageError("--families must be at least 1")
    ds = world.collect_dataset(
        cfg["n"], cfg["seed"], world.default_families(cfg["families"]), cfg.calibration(), cfg["workers"]
    )
    world.save_dataset(ds, cfg["out"])
    out.write(
        f"wrote {cfg['out']}: {len(ds)} trials, {int(ds.labels.sum())} positive "
        f"({100 * ds.positive_rate:.1f}%)\n"
    )


def cmd_train(cfg, out):
    ds = world.load_dataset(cfg["data"])
    arch = cfg["arch"]
    tc = trainer.TrainConfig.for_arch(arch, seed=cfg["seed"], mirror_augment=cfg["mirror"])
    if cfg["iters"] is not None:
        if cfg["iters"] < 1:
            raise UsageError("--iters must be positive")
        tc = replace(tc, iterations=cfg["iters"])
    model = models.build_model(arch, seed=cfg["seed"], patch_mode=cfg["patch-mode"])
    out.write(f"{arch}: {model.graph.n_params()} parameters\n")
    if arch == "regression":
        res = trainer.train_regression(model, ds, tc)
        out.write(f"regression trained on {res.n_samples} positive samples of {len(ds)}\n")
    else:
        res = trainer.train(model, ds, tc, progress=500)
    models.save_checkpoint(model, cfg["out"])
    _write_text(cfg["loss-out"] or cfg["out"] + ".loss", res.loss_trace())
    tail = res.losses[-min(len(res.losses), 100) :].mean()
    out.write(f"wrote {cfg['out']} after {tc.iterations} iterations, final loss {tail:.4f}\n")


def cmd_eval(cfg, out):
    if cfg["folds"] < 2:
        raise UsageError("--folds must be at least 2")
    ref = models.load_checkpoint(cfg["model"])
    if not getattr(ref, "classifier", False):
        raise UsageError(f"{cfg['model']} is a {ref.arch} checkpoint; classification metrics need a classifier")
    ds = world.load_dataset(cfg["data"])
    tc = trainer.TrainConfig.for_arch(ref.arch, seed=cfg["seed"])
    if cfg["iters"] is not None:
        tc = replace(tc, iterations=cfg["iters"])
    report = evaluation.cross_validate(
        ds, cfg["mode"], cfg["folds"], cfg["seed"], ref.arch, tc, patch_mode=ref.patch_mode
    )
    text = report.table()
    out.write(text)
    for i, f in enumerate(report.folds):
        out.write(f"fold {i}: auc {f.auc:.3f} accuracy {f.accuracy:.3f} f1 {f.f1:.3f}\n")
    if cfg["out"]:
        _write_text(cfg["out"], text)
    if cfg["scores-out"]:
        lines = [f"# mode={report.mode}"]
        for i, f in enumerate(report.folds):
            lines.extend(f"{i} {s:.9g} {int(y)}" for s, y in zip(f.scores, f.labels))
        _write_text(cfg["scores-out"], "\n".join(lines) + "\n")


def read_inits(path):
    """Grasp configurations, one whitespace- or comma-separated row per line."""
    rows = []
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.replace(",", " ").split()]
            except ValueError:
                raise world.FormatError(f"{path}:{no}: not a list of numbers") from None
            if len(row) != world.THETA_DIM or not np.all(np.isfinite(row)):
                raise world.FormatError(f"{path}:{no}: expected {world.THETA_DIM} finite values")
            rows.append(np.array(row))
    if not rows:
        raise world.FormatError(f"{path}: no initializations")
    return rows


def _classifier(path):
    model = models.load_checkpoint(path)
    if not getattr(model, "classifier", False):
        raise UsageError(f"{path} is a {model.arch} checkpoint, not a classifier")
    return model


def cmd_plan(cfg, out):
    model = _classifier(cfg["model"])
    rng = np.random.default_rng(cfg["scene-seed"])
    shape, grid = world.generate_scene(rng)
    if cfg["inits"] == "heuristic":
        inits = world.heuristic_inits(grid, rng)
    else:
        inits = [planner.project(t, planner.WORLD_BOUNDS) for t in read_inits(cfg["inits"])]
    pc = cfg.planner_config()
    if pc.gradient_mode == "full-chain" and model.arch == "config-net" and model.patch_mode == "fixed":
        log.warning("fixed object patch: full-chain gradient equals config-only")
    best, results = planner.plan_multi_init(model, grid, inits, pc, workers=cfg["workers"])
    for r in results:
        outcome = world.oracle_execute(shape, r.theta)
        out.write(f"{r.record()} oracle={'success' if outcome.success else outcome.reason}\n")
    out.write(f"chosen={best.init_index}\n")


def cmd_bench(cfg, out):
    model = _classifier(cfg["model"])
    methods = evaluation.METHODS if cfg["methods"] == "all" else tuple(cfg["methods"].split(","))
    known = evaluation.METHODS + ("regression",)
    bad = [m for m in methods if m not in known]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}")
    regression = None
    if cfg["regression"]:
        regression = models.load_checkpoint(cfg["regression"])
        if regression.arch != "regression":
            raise UsageError(f"{cfg['regression']} is not a regression checkpoint")
        if "regression" not in methods:
            methods = methods + ("regression",)
    elif "regression" in methods:
        raise UsageError("method regression needs --regression")
    if cfg["scenes"] < 1:
        raise UsageError("--scenes must be at least 1")
    report = evaluation.run_benchmark(
        model, cfg["scenes"], seed=cfg["seed"], methods=methods, planner_cfg=cfg.planner_config(),
        n_samples=cfg["samples"], regression=regression, timing=cfg["timing"], workers=cfg["workers"],
    )
    text = report.table()
    out.write(text)
    if cfg["out"]:
        _write_text(cfg["out"], text)
    if cfg["log"]:
        _write_text(cfg["log"], report.log_lines())


def _read_scores(path):
    mode, folds = None, {}
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.strip()
            if line.startswith("# mode="):
                mode = line[7:]
                continue
            if not line:
                continue
            try:
                fold, score, label = line.split()
                folds.setdefault(int(fold), []).append((float(score), int(label)))
            except ValueError:
                raise world.FormatError(f"{path}:{no}: expected 'fold score label'") from None
    report = evaluation.ClassifierReport(mode or path)
    for k in sorted(folds):
        arr = np.array(folds[k])
        roc, auc = evaluation.roc_auc(arr[:, 0], arr[:, 1])
        acc, f1 = evaluation.accuracy_f1(arr[:, 0], arr[:, 1])
        report.folds.append(evaluation.FoldResult(auc, acc, f1, roc, arr[:, 0], arr[:, 1].astype(int)))
    return report


def cmd_plot_data(cfg, out):
    if not cfg["scores"] and not cfg["bench-log"]:
        raise UsageError("give --scores and/or --bench-log")
    parts = []
    if cfg["scores"]:
        parts.append(evaluation.roc_plot_data([_read_scores(p) for p in cfg["scores"].split(",")]))
    if cfg["bench-log"]:
        with open(cfg["bench-log"]) as fh:
            text = fh.read()
        try:
            report = evaluation.BenchmarkReport.from_log(text)
        except (KeyError, ValueError) as exc:
            raise world.FormatError(f"{cfg['bench-log']}: malformed trial log ({exc})") from None
        parts.append(evaluation.bar_plot_data(report))
    text = "".join(parts)
    if cfg["out"]:
        _write_text(cfg["out"], text)
    else:
        out.write(text)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "bench": cmd_bench,
    "plot-data": cmd_plot_data,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    handler = logging.StreamHandler(err)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("graspinfer")
    pkg_log.addHandler(handler)
    try:
        cfg = resolve(args)
        pkg_log.setLevel(logging.INFO if cfg["verbose"] else logging.WARNING)
        cfg.echo(err)
        HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (world.FormatError, OSError, evaluation.EvaluationError) as exc:
        err.write(f"data error: {exc}\n")
        return EXIT_DATA
    except (trainer.TrainingError, planner.PlanningError, FloatingPointError) as exc:
        err.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except ValueError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    finally:
        pkg_log.removeHandler(handler)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
