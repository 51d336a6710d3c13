"""Grid search over model/training settings with IID-validation selection, multi-seed runs and reports.

Config is one JSON document::

    {
      "dataset": {"generator": "concept", "seed": 0, "config": {...},
                  "spurious_corr_train": 0.9, "spurious_corr_ood": 0.1},
      "models": {"kind": ["GCN", "DGAT"], "layers": [2], "hidden": [100], ...},
      "train": {"strategy": ["ERM"], "lr": [0.005], "epochs": [100], ...},
      "seeds": [0, 1, 2],
      "baseline": "GCN",
      "output": "report.json"
    }

``dataset`` may instead be ``{"path": "graph.txt"}``. Every grid field is a list;
scalars are accepted as one-element lists.
"""

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import ConfigError, GnnOodError, NumericalError, ProtocolError
from .evaluation import MetricsReport, RunResult, accuracy, paired_t_test, significance_color
from .graph import GeneratorConfig, gen_concept_shift, gen_covariate_shift, load_graph
from .models import ModelSpec, forward
from .strategies import TrainPlan, train

# published hyperparameter search space (union of its tabulated and prose listings)
PAPER_GRID = {
    "lr": {5e-3, 1e-3, 5e-2},
    "dropout": {0.0, 0.1, 0.2, 0.5},
    "hidden": {100, 200, 300},
    "layers": {1, 2, 3},
    "gamma": {0.0, 0.2, 0.5},
    "beta": {0.0, 0.1, 0.2, 0.5},
    "heads": {2, 4},
}

# per-dataset settings chosen on the GOOD datasets; shipped as presets only
GOOD_PRESETS = {
    "GOODCora-degree-covariate": {"lr": 1e-3, "dropout": 0.5, "hidden": 200, "layers": 2},
    "GOODCora-degree-concept": {"lr": 1e-3, "dropout": 0.5, "hidden": 200, "layers": 2},
    "GOODCora-word-covariate": {"lr": 1e-3, "dropout": 0.5, "hidden": 300, "layers": 2},
    "GOODCora-word-concept": {"lr": 1e-3, "dropout": 0.5, "hidden": 300, "layers": 1},
    "GOODArxiv-degree-covariate": {"lr": 1e-3, "dropout": 0.2, "hidden": 300, "layers": 3},
    "GOODArxiv-degree-concept": {"lr": 1e-3, "dropout": 0.2, "hidden": 300, "layers": 3},
    "GOODArxiv-time-covariate": {"lr": 1e-3, "dropout": 0.2, "hidden": 300, "layers": 3},
    "GOODArxiv-time-concept": {"lr": 1e-3, "dropout": 0.2, "hidden": 300, "layers": 3},
    "GOODTwitch-language-covariate": {"lr": 1e-3, "dropout": 0.5, "hidden": 200, "layers": 2},
    "GOODTwitch-language-concept": {"lr": 1e-3, "dropout": 0.5, "hidden": 300, "layers": 3},
    "GOODWebKB-university-concept": {"lr": 5e-3, "dropout": 0.5, "hidden": 300, "layers": 1},
}

ABLATION_VARIANTS = (
    "DGat",
    "DGat w/o self-attention",
    "DGat w/o decouple",
    "DGat w/o remove linear classifier",
)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    dataset: dict
    models: dict
    train: dict
    seeds: list
    baseline: str | None = None
    output: str | None = None
    paper_grid: bool = False
    threads: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d, paper_grid=None):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {"dataset", "models", "train", "seeds", "baseline", "output", "paper_grid", "threads"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "models", "seeds"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        cfg = cls(
            dataset=dict(d["dataset"]),
            models={k: _as_list(v) for k, v in d["models"].items()},
            train={k: _as_list(v) for k, v in d.get("train", {}).items()},
            seeds=[int(s) for s in _as_list(d["seeds"])],
            baseline=d.get("baseline"),
            output=d.get("output"),
            paper_grid=bool(d.get("paper_grid", False) if paper_grid is None else paper_grid),
            threads=int(d.get("threads", 1)),
            raw=d,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, paper_grid=None):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, paper_grid)

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if "kind" not in self.models or not self.models["kind"]:
            raise ConfigError("models.kind must list at least one architecture")
        for name, values in itertools.chain(self.models.items(), self.train.items()):
            if not values:
                raise ConfigError(f"grid field {name!r} is empty")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        points = self.grid()
        if self.paper_grid:
            self._check_paper_grid()
        if self.baseline is not None and self.baseline not in {p[0].kind for p in points}:
            raise ConfigError(f"baseline {self.baseline!r} is not among the model kinds")

    def _check_paper_grid(self):
        for name, allowed in PAPER_GRID.items():
            values = self.models.get(name, []) + self.train.get(name, [])
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"paper-grid mode: {name} values {bad} outside {sorted(allowed)}")

    def grid(self):
        """Distinct (ModelSpec, TrainPlan-without-seed) pairs in declaration order."""
        try:
            specs = _expand(ModelSpec, self.models)
            plans = _expand(TrainPlan, self.train) if self.train else [TrainPlan()]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        out, seen = [], set()
        for spec in specs:
            canon = spec.canonical()
            for plan in plans:
                p = _canonical_plan(plan)
                if (canon, p) not in seen:
                    seen.add((canon, p))
                    out.append((canon, p))
        return out


def _expand(cls, grid):
    names = list(grid)
    return [cls(**dict(zip(names, combo))) for combo in itertools.product(*(grid[n] for n in names))]


def _canonical_plan(plan):
    changes = {"seed": 0}
    if plan.strategy not in ("IRM", "VREX"):
        changes["penalty_weight"] = 1.0
    if plan.strategy != "GROUPDRO":
        changes["group_step"] = 0.01
    if plan.strategy != "GRAPH_MIXUP":
        changes["mixup_alpha"] = 1.0
    return replace(plan, **changes)


def build_dataset(spec):
    """Load or generate the graph described by a config's ``dataset`` block."""
    if "path" in spec:
        return load_graph(spec["path"])
    kind = spec.get("generator")
    try:
        gen_cfg = GeneratorConfig.from_dict(spec.get("config", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    seed = int(spec.get("seed", 0))
    if kind == "covariate":
        return gen_covariate_shift(gen_cfg, seed)
    if kind == "concept":
        return gen_concept_shift(gen_cfg, float(spec.get("spurious_corr_train", 0.9)),
                                 float(spec.get("spurious_corr_ood", 0.1)), seed)
    raise ConfigError(f"dataset needs 'path' or generator 'covariate'|'concept', got {kind!r}")


# ---------------------------------------------------------------------------
# single runs


def run_once(spec, plan, g, seed):
    """Train with ``seed`` and score the selected parameters on every split."""
    plan = replace(plan, seed=seed)
    try:
        result = train(spec, plan, g)
    except NumericalError as exc:
        nan = float("nan")
        return RunResult(seed, nan, nan, nan, nan, aborted=True, diagnostic=str(exc))
    logits = forward(spec, result.params, g, "eval")
    s = g.splits

    def acc(ids):
        return accuracy(logits, g.labels, ids) if ids.size else float("nan")

    return RunResult(
        seed=seed,
        iid_test_acc=acc(s.iid_test),
        ood_test_acc=acc(s.ood_test),
        iid_val_acc=acc(s.iid_val),
        ood_val_acc=acc(s.ood_val),
        train_acc=acc(s.train),
        best_epoch=result.best_epoch,
    )


_WORKER_GRAPH = None


def _init_worker(dataset):
    global _WORKER_GRAPH
    _WORKER_GRAPH = build_dataset(dataset)


def _job(args):
    spec, plan, seed = args
    return run_once(spec, plan, _WORKER_GRAPH, seed)


def resolve_threads(threads):
    env = os.environ.get("GNNOOD_THREADS")
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"GNNOOD_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return threads


def run_grid(points, seeds, g, dataset=None, threads=1):
    """``[[RunResult per seed] per grid point]``; ordering is independent of ``threads``."""
    jobs = [(spec, plan, seed) for spec, plan in points for seed in seeds]
    if threads > 1 and dataset is not None and len(jobs) > 1:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(dataset,)) as pool:
            flat = list(pool.map(_job, jobs))
    else:
        flat = [run_once(spec, plan, g, seed) for spec, plan, seed in jobs]
    k = len(seeds)
    return [flat[i * k:(i + 1) * k] for i in range(len(points))]


def select_best(reports):
    """Index of the report with the highest mean IID-validation accuracy (first wins ties).

    Only ``iid_val_acc`` is read, so OOD numbers can never influence selection.
    """
    best, best_val = 0, -math.inf
    for i, rep in enumerate(reports):
        v = rep.iid_val_mean()
        if v > best_val:
            best, best_val = i, v
    return best


def _point_dict(spec, plan):
    return {"model": spec.to_dict(), "train": {k: v for k, v in plan.to_dict().items() if k != "seed"}}


# ---------------------------------------------------------------------------
# experiments


def run_experiment(config, g=None, threads=None):
    """Run every grid point over every seed and assemble the report dictionary."""
    g = build_dataset(config.dataset) if g is None else g
    threads = resolve_threads(config.threads if threads is None else threads)
    points = config.grid()
    results = run_grid(points, config.seeds, g, config.dataset, threads)
    reports = [MetricsReport(runs) for runs in results]

    by_kind = {}
    for i, (spec, _) in enumerate(points):
        by_kind.setdefault(spec.kind, []).append(i)
    selected_by_model = {kind: idx[select_best([reports[i] for i in idx])] for kind, idx in by_kind.items()}

    grid_out = []
    for i, ((spec, plan), rep) in enumerate(zip(points, reports)):
        entry = {"index": i, **_point_dict(spec, plan), **rep.to_dict()}
        flagged = [r.seed for r in rep.runs if r.aborted]
        if flagged:
            entry["aborted_seeds"] = flagged
        grid_out.append(entry)

    report = {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "config": config.raw,
        "seeds": list(config.seeds),
        "grid": grid_out,
        "selected": select_best(reports),
        "selected_by_model": selected_by_model,
    }
    baseline = config.baseline
    if baseline is not None:
        base = reports[selected_by_model[baseline]]
        report["baseline"] = baseline
        report["significance"] = {
            kind: _significance(reports[i], base) for kind, i in selected_by_model.items() if kind != baseline
        }
    return report


def _paired_ood(rep_a, rep_b):
    ok = {r.seed for r in rep_a.completed} & {r.seed for r in rep_b.completed}
    a = [r.ood_test_acc for r in rep_a.runs if r.seed in ok]
    b = [r.ood_test_acc for r in rep_b.runs if r.seed in ok]
    return a, b


def _significance(rep, base):
    if [r.seed for r in rep.runs] != [r.seed for r in base.runs]:
        raise ProtocolError("compared reports must use the same seeds in the same order")
    a, b = _paired_ood(rep, base)
    test = paired_t_test(a, b)
    return {"t_value": test.t_value, "p_value": test.p_value, "df": test.df,
            "verdict": significance_color(test.t_value, test.p_value)}


def runs_from_report(report, index=None):
    """The selected (or ``index``-th) grid point of a report as a :class:`MetricsReport`."""
    i = report["selected"] if index is None else index
    return MetricsReport([RunResult(**r) for r in report["grid"][i]["runs"]])


def compare_models(report_a, report_b):
    """Paired t-test of A's selected OOD accuracies against B's, with the significance verdict."""
    if report_a.get("seeds") != report_b.get("seeds"):
        raise ProtocolError(f"seed mismatch: {report_a.get('seeds')} vs {report_b.get('seeds')}")
    if report_a.get("config", {}).get("dataset") != report_b.get("config", {}).get("dataset"):
        raise ProtocolError("reports were produced on different datasets")
    return _significance(runs_from_report(report_a), runs_from_report(report_b))


def ablation_variants(spec):
    """The four DGat ablation specs in table order."""
    if spec.kind != "DGAT":
        raise ConfigError(f"ablation needs a DGAT base spec, got {spec.kind}")
    gat = ModelSpec("GAT", layers=spec.layers, hidden=spec.hidden, heads=spec.heads,
                    dropout=spec.dropout, leaky_slope=spec.leaky_slope)
    return [
        spec,
        replace(spec, gamma=1.0),
        gat,
        replace(spec, linear_head=True),
    ]


def ablation_suite(config, g=None, threads=None):
    """OOD/GAP rows for full DGat and its three ablations, each tuned on IID validation."""
    g = build_dataset(config.dataset) if g is None else g
    threads = resolve_threads(config.threads if threads is None else threads)
    points = [(s, p) for s, p in config.grid() if s.kind == "DGAT"]
    if not points:
        raise ConfigError("ablation needs at least one DGAT grid point")
    variant_points = []
    for v in range(len(ABLATION_VARIANTS)):
        pts = []
        for s, p in points:
            pt = (ablation_variants(s)[v].canonical(), p)
            if pt not in pts:
                pts.append(pt)
        variant_points.append(pts)
    flat_points = [pt for vp in variant_points for pt in vp]
    results = run_grid(flat_points, config.seeds, g, config.dataset, threads)
    rows, start = [], 0
    for name, pts in zip(ABLATION_VARIANTS, variant_points):
        reports = [MetricsReport(r) for r in results[start:start + len(pts)]]
        start += len(pts)
        best = select_best(reports)
        spec, plan = pts[best]
        rows.append({"variant": name, **_point_dict(spec, plan),
                     "summary": reports[best].summary(),
                     "runs": [r.to_dict() for r in reports[best].runs]})
    return {"generated_at": datetime.now(timezone.utc).isoformat(), "config": config.raw,
            "seeds": list(config.seeds), "rows": rows}


def format_table(report):
    """Human-readable percentages (two decimals) for a run or ablation report."""
    lines = [f"{'model':<36} {'IID':>7} {'OOD':>7} {'GAP':>7}"]
    if "rows" in report:
        entries = [(r["variant"], r["summary"]) for r in report["rows"]]
    else:
        entries = [(report["grid"][i]["model"]["kind"], report["grid"][i]["summary"])
                   for i in report["selected_by_model"].values()]
    for name, s in entries:
        lines.append(f"{name:<36} {100 * s['iid_test_mean']:7.2f} {100 * s['ood_test_mean']:7.2f} "
                     f"{100 * s['gap_mean']:7.2f}")
    for kind, sig in report.get("significance", {}).items():
        lines.append(f"{kind} vs {report['baseline']}: t={sig['t_value']:.3f} p={sig['p_value']:.4f} "
                     f"-> {sig['verdict']}")
    return "\n".join(lines)


def strip_volatile(report):
    """Copy of a report without the timestamp (what determinism checks compare)."""
    return {k: v for k, v in report.items() if k != "generated_at"}


__all__ = [
    "ExperimentConfig", "run_experiment", "compare_models", "ablation_suite", "ablation_variants",
    "select_best", "run_once", "build_dataset", "format_table", "strip_volatile", "PAPER_GRID",
    "GOOD_PRESETS", "GnnOodError",
]
