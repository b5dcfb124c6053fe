"""Classifier cross-validation and the grasp-planning benchmark."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import models, planner, trainer, world

log = logging.getLogger(__name__)

DECISION_THRESHOLD = 0.4


class EvaluationError(ValueError):
    """Raised for infeasible splits or degenerate label sets."""


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    mode: str
    k: int
    folds: list  # [(train_idx, test_idx), ...]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


def make_folds(ds, mode="seen", k=5, seed=0):
    """Partition sample indices of ``ds`` into ``k`` train/test folds.

    ``seen`` stratifies by label; ``unseen`` keeps every family on one side
    of each split, assigning families greedily to the smallest fold.
    """
    labels = np.asarray(ds.labels)
    family_ids = np.asarray(ds.family_ids)
    n = len(labels)
    if k < 2:
        raise EvaluationError("need at least two folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=np.int64)
    if mode == "seen":
        for cls in (0, 1):
            idx = np.flatnonzero(labels == cls)
            if cls == 1 and 0 < len(idx) < k:
                raise EvaluationError(f"only {len(idx)} positives for {k} folds")
            idx = rng.permutation(idx)
            # continue the round-robin across classes so fold sizes stay level
            offset = 0 if cls == 0 else (np.sum(labels == 0) % k)
            assign[idx] = (np.arange(len(idx)) + offset) % k
    elif mode == "unseen":
        fams = np.unique(family_ids)
        if len(fams) < k:
            raise EvaluationError(f"{len(fams)} families cannot fill {k} unseen folds")
        fams = rng.permutation(fams)
        sizes = {f: int(np.sum(family_ids == f)) for f in fams}
        fams = sorted(fams, key=lambda f: -sizes[f])  # stable: ties keep shuffled order
        load = np.zeros(k, dtype=np.int64)
        for f in fams:
            target = int(np.argmin(load))
            assign[family_ids == f] = target
            load[target] += sizes[f]
    else:
        raise EvaluationError(f"unknown fold mode {mode!r}")
    folds = []
    for i in range(k):
        test = np.flatnonzero(assign == i)
        train = np.flatnonzero(assign != i)
        folds.append((train, test))
    return FoldSplit(mode, k, folds)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_labels(labels):
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise EvaluationError("ROC needs at least one positive and one negative")
    return labels


def roc_curve(scores, labels):
    """ROC points over every distinct threshold, tied scores grouped.

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0).
    """
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (len(y) - y.sum())]
    return fpr, tpr, np.r_[np.inf, s[last]]


def roc_auc(scores, labels):
    fpr, tpr, _ = roc_curve(scores, labels)
    return (fpr, tpr), float(np.trapezoid(tpr, fpr))


def accuracy_f1(scores, labels, threshold=DECISION_THRESHOLD):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (scores > threshold).astype(int)
    acc = float(np.mean(pred == labels))
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    if tp + fp == 0:
        return acc, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return acc, float(f1)


def vertical_average(curves, grid=None):
    """Mean TPR over folds at fixed FPR values."""
    grid = np.linspace(0.0, 1.0, 101) if grid is None else grid
    tprs = [np.interp(grid, fpr, tpr) for fpr, tpr in curves]
    return grid, np.mean(tprs, axis=0)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    auc: float
    accuracy: float
    f1: float
    roc: tuple
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class ClassifierReport:
    mode: str
    folds: list = field(default_factory=list)

    def _stat(self, name):
        vals = np.array([getattr(f, name) for f in self.folds])
        return float(vals.mean()), float(vals.std())

    @property
    def auc(self):
        return self._stat("auc")

    @property
    def accuracy(self):
        return self._stat("accuracy")

    @property
    def f1(self):
        return self._stat("f1")

    def pooled_roc(self):
        scores = np.concatenate([f.scores for f in self.folds])
        labels = np.concatenate([f.labels for f in self.folds])
        return roc_auc(scores, labels)

    def averaged_roc(self):
        return vertical_average([f.roc for f in self.folds])

    def table(self):
        (am, asd), (fm, fsd), (um, usd) = self.accuracy, self.f1, self.auc
        return (
            f"{'Experiment':<12}{'Accuracy':<18}{'F1':<18}{'AUC':<18}\n"
            f"{self.mode.capitalize():<12}{f'{am:.3f} ({asd:.3f})':<18}"
            f"{f'{fm:.3f} ({fsd:.3f})':<18}{f'{um:.3f} ({usd:.3f})':<18}\n"
        )


def evaluate_fold(model, test):
    scores = np.concatenate(
        [model.predict(test.grids[i], test.thetas[i : i + 1]) for i in range(len(test))]
    )
    roc, auc = roc_auc(scores, test.labels)
    acc, f1 = accuracy_f1(scores, test.labels)
    return FoldResult(auc, acc, f1, roc, scores, test.labels.copy())


def cross_validate(
    ds, mode="seen", k=5, seed=0, arch="config-net", train_cfg=None, progress=None, patch_mode="fixed"
):
    """Train and score one fresh model per fold."""
    split = make_folds(ds, mode, k, seed)
    report = ClassifierReport(mode)
    cfg = train_cfg or trainer.TrainConfig.for_arch(arch, seed=seed)
    for i, (tr, te) in enumerate(split):
        model = models.build_model(arch, seed=seed + i, patch_mode=patch_mode)
        trainer.train(model, ds.subset(tr), cfg)
        res = evaluate_fold(model, ds.subset(te))
        log.info("%s fold %d: auc %.3f acc %.3f f1 %.3f", mode, i, res.auc, res.accuracy, res.f1)
        if progress:
            progress(i, res)
        report.folds.append(res)
    return report


# ---------------------------------------------------------------------------
# Planning benchmark
# ---------------------------------------------------------------------------

METHODS = ("heuristic", "max-eval", "sampling", "inference")


@dataclass(frozen=True)
class TrialRecord:
    scene: int
    family: int
    method: str
    init: int
    p_init: float
    p_final: float
    outcome: int
    reason: str
    theta: tuple
    ms: float | None = None

    def line(self):
        theta = ",".join(f"{v:.6f}" for v in self.theta)
        ms = "-" if self.ms is None else f"{self.ms:.1f}"
        return (
            f"scene={self.scene} family={self.family} method={self.method} init={self.init} "
            f"p_init={self.p_init:.6f} p_final={self.p_final:.6f} outcome={self.outcome} "
            f"reason={self.reason} ms={ms} theta={theta}"
        )

    @classmethod
    def parse(cls, line):
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(
            int(kv["scene"]),
            int(kv["family"]),
            kv["method"],
            int(kv["init"]),
            float(kv["p_init"]),
            float(kv["p_final"]),
            int(kv["outcome"]),
            kv["reason"],
            tuple(float(v) for v in kv["theta"].split(",")),
            None if kv["ms"] == "-" else float(kv["ms"]),
        )


@dataclass
class BenchmarkReport:
    records: list
    n_scenes: int

    def rows(self, method):
        return [r for r in self.records if r.method == method]

    @property
    def methods(self):
        seen = []
        for r in self.records:
            if r.method not in seen and r.method != "inference-init":
                seen.append(r.method)
        return seen

    def success_rate(self, method, family=None):
        rows = [r for r in self.rows(method) if family is None or r.family == family]
        if not rows:
            return float("nan")
        return 100.0 * sum(r.outcome for r in rows) / len(rows)

    def families(self):
        return sorted({r.family for r in self.records})

    def mean_probabilities(self):
        """Mean predicted probability at the heuristic inits and after ascent."""
        rows = self.rows("inference-init")
        if not rows:
            return float("nan"), float("nan")
        return float(np.mean([r.p_init for r in rows])), float(np.mean([r.p_final for r in rows]))

    def table(self):
        methods = self.methods
        lines = [
            "# heuristic rate is per attempt (every init executed); other methods per scene",
            f"{'family':<8}" + "".join(f"{m:>12}" for m in methods),
        ]
        for fam in self.families():
            lines.append(
                f"{fam:<8}" + "".join(f"{self.success_rate(m, fam):>12.1f}" for m in methods)
            )
        lines.append(f"{'all':<8}" + "".join(f"{self.success_rate(m):>12.1f}" for m in methods))
        p0, p1 = self.mean_probabilities()
        if not np.isnan(p0):
            lines.append(f"mean predicted probability: init {p0:.3f} -> inference {p1:.3f}")
            frac = improvement_analysis(self)
            text = "undefined (no failing inits)" if frac is None else f"{frac:.3f}"
            lines.append(f"failing inits refined to success: {text}")
        return "\n".join(lines) + "\n"

    def log_lines(self):
        return "".join(r.line() + "\n" for r in self.records)

    @classmethod
    def from_log(cls, text, n_scenes=None):
        records = [TrialRecord.parse(ln) for ln in text.splitlines() if ln.strip()]
        n = n_scenes if n_scenes is not None else len({r.scene for r in records})
        return cls(records, n)


def _execute(shape, theta):
    return world.oracle_execute(shape, theta)


def benchmark_scene(
    model, index, seed, families, methods=METHODS, planner_cfg=planner.PlannerConfig(),
    n_samples=150, regression=None, timing=False,
):
    import time

    rng = world.trial_rng(seed, index)
    shape, grid = world.generate_scene(rng, families)
    inits = world.heuristic_inits(grid, rng)
    sample_rng = np.random.default_rng([seed, index, 1])
    fam = shape.family_id
    obj = planner.make_objective(model, grid)
    p_inits = obj.values(np.stack(inits))
    out = []

    def rec(method, init, p0, p1, theta, t0):
        o = _execute(shape, theta)
        ms = 1000.0 * (time.perf_counter() - t0) if timing else None
        out.append(
            TrialRecord(index, fam, method, init, float(p0), float(p1), o.success,
                        o.reason or "-", tuple(float(v) for v in theta), ms)
        )

    for m in methods:
        t0 = time.perf_counter()
        if m == "heuristic":
            for i, th in enumerate(inits):
                rec(m, i, p_inits[i], p_inits[i], th, t0)
        elif m == "max-eval":
            i, th, p = planner.max_eval(model, grid, inits)
            rec(m, i, p, p, th, t0)
        elif m == "sampling":
            bounds = planner.scene_bounds(inits, planner_cfg, grid)
            th, p, _ = planner.sample_and_rank(model, grid, bounds, n_samples, sample_rng)
            rec(m, -1, p, p, th, t0)
        elif m == "inference":
            best, results = planner.plan_multi_init(model, grid, inits, planner_cfg)
            for r in results:
                o = _execute(shape, r.theta)
                out.append(
                    TrialRecord(index, fam, "inference-init", r.init_index, r.p0, r.p, o.success,
                                o.reason or "-", tuple(float(v) for v in r.theta),
                                r.ms if timing else None)
                )
            rec(m, best.init_index, best.p0, best.p, best.theta, t0)
        elif m == "regression":
            if regression is None:
                raise ValueError("the regression method needs a regression model")
            th = planner.project(regression.predict_theta(grid), planner.WORLD_BOUNDS)
            p = float(obj.values(th[None])[0])
            rec(m, -1, p, p, th, t0)
        else:
            raise ValueError(f"unknown method {m!r}")
    return out


def run_benchmark(
    model, n_scenes=200, families=None, seed=0, methods=METHODS,
    planner_cfg=planner.PlannerConfig(), n_samples=150, regression=None, timing=False,
    workers=1,
):
    """Evaluate every method on the same ``n_scenes`` generated scenes."""
    families = families or world.default_families()
    job = partial(
        benchmark_scene, model, seed=seed, families=families, methods=methods,
        planner_cfg=planner_cfg, n_samples=n_samples, regression=regression, timing=timing,
    )
    records = []
    for rows in world.ordered_map(job, range(n_scenes), workers):
        records.extend(rows)
    return BenchmarkReport(records, n_scenes)


def improvement_analysis(report):
    """Fraction of failing heuristic inits that succeed after ascent.

    Returns None when no init failed.
    """
    before = {(r.scene, r.init): r.outcome for r in report.rows("heuristic")}
    after = {(r.scene, r.init): r.outcome for r in report.rows("inference-init")}
    failing = [key for key, ok in before.items() if not ok and key in after]
    if not failing:
        return None
    return sum(after[key] for key in failing) / len(failing)


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def roc_plot_data(reports):
    """Two-column ``fpr tpr`` blocks: per-mode vertical average and pooled curves."""
    blocks = []
    for rep in reports:
        fpr, tpr = rep.averaged_roc()
        blocks.append(f"# roc {rep.mode} vertical-average auc_mean={rep.auc[0]:.4f}")
        blocks.extend(f"{x:.4f} {y:.6f}" for x, y in zip(fpr, tpr))
        (pf, pt), pauc = rep.pooled_roc()
        blocks.append(f"# roc {rep.mode} pooled auc={pauc:.4f}")
        blocks.extend(f"{x:.6f} {y:.6f}" for x, y in zip(pf, pt))
    blocks.append("# roc chance")
    blocks.extend(["0 0", "1 1"])
    return "\n".join(blocks) + "\n"


def bar_plot_data(report):
    """Success-rate bars per family and method, then predicted-probability bars."""
    lines = ["# success-rate family method rate"]
    for fam in report.families() + ["all"]:
        for m in report.methods:
            rate = report.success_rate(m, None if fam == "all" else fam)
            lines.append(f"{fam} {m} {rate:.2f}")
    lines.append("# predicted-probability family heuristic inference")
    by_fam = defaultdict(list)
    for r in report.rows("inference-init"):
        by_fam[r.family].append((r.p_init, r.p_final))
    for fam in sorted(by_fam):
        arr = np.array(by_fam[fam])
        lines.append(f"{fam} {arr[:, 0].mean():.4f} {arr[:, 1].mean():.4f}")
    p0, p1 = report.mean_probabilities()
    lines.append(f"all {p0:.4f} {p1:.4f}")
    return "\n".join(lines) + "\n"
