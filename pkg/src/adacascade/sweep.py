"""Trade-off sweeps over lambda, Pareto filtering, operating point selection
and report emission."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import myopic_threshold, single_stage, soft_oracle, uniform_mix
from .exceptions import IoFailure, NoFeasiblePoint, ValidationError
from .learners import TrainConfig
from .policy import OverheadSpec, train_bottom_up
from .runtime import SystemMetrics, compare_terminal_only, evaluate_dataset
from .traces import Topology, TraceDataset, agreement_statistics, split

# cost of the large reference model in seconds; lambda grids are expressed
# relative to it so that they carry over to any time unit
REFERENCE_TERMINAL_COST = 0.00286


def default_lambda_grid(topology: Topology, n_points: int = 30) -> tuple:
    """Zero plus ``n_points - 1`` log-spaced values covering (0, 0.1], in units
    where the terminal stage costs ``REFERENCE_TERMINAL_COST``."""
    scale = topology.stage_cost[topology.terminal] / REFERENCE_TERMINAL_COST
    grid = np.concatenate([[0.0], np.geomspace(1e-4, 1e-1, n_points - 1)]) * scale
    return tuple(float(v) for v in grid)


@dataclass(frozen=True)
class SweepConfig:
    lambda_values: tuple | None = None
    budget: float | None = None
    tolerance: float | None = None
    seed: int = 0
    split: float = 0.5
    overhead: OverheadSpec = field(default_factory=OverheadSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    myopic_points: int = 21
    uniform_points: int = 11

    def __post_init__(self):
        if self.lambda_values is not None:
            vals = tuple(float(v) for v in self.lambda_values)
            if not vals or any(not (v >= 0) or not np.isfinite(v) for v in vals):
                raise ValidationError("lambda_values must be a nonempty list of finite reals >= 0")
            object.__setattr__(self, "lambda_values", vals)
        if self.budget is not None and not self.budget > 0:
            raise ValidationError("budget must be > 0")
        if self.tolerance is not None and not self.tolerance >= 0:
            raise ValidationError("tolerance must be >= 0")

    def lambdas(self, topology: Topology) -> tuple:
        return self.lambda_values if self.lambda_values is not None else default_lambda_grid(topology)

    def to_dict(self):
        return {
            "lambda_values": None if self.lambda_values is None else list(self.lambda_values),
            "budget": self.budget,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "split": self.split,
            "overhead": self.overhead.to_dict(),
            "train": self.train.to_dict(),
            "myopic_points": self.myopic_points,
            "uniform_points": self.uniform_points,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "overhead" in d:
            d["overhead"] = OverheadSpec(**d["overhead"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    digest: str
    policy: dict
    train: SystemMetrics
    test: SystemMetrics


@dataclass(frozen=True)
class BaselinePoint:
    system: str
    param: float | str | None
    metrics: SystemMetrics


@dataclass(frozen=True)
class OperatingPoint:
    system: str
    lam: float | None
    digest: str | None
    metrics: SystemMetrics

    def to_dict(self):
        return {"system": self.system, "lambda": self.lam, "digest": self.digest,
                "mean_time": self.metrics.mean_time, "topk_error": self.metrics.topk_error,
                "excess_error": self.metrics.excess_error, "speedup": self.metrics.speedup}


@dataclass(frozen=True, eq=False)
class SweepResult:
    config: SweepConfig
    topology: Topology
    loss_k: int
    n_train: int
    n_test: int
    points: tuple
    baselines: tuple
    agreement: tuple = ()

    def baseline(self, system) -> list:
        return [b for b in self.baselines if b.system == system]

    @property
    def terminal(self) -> SystemMetrics:
        return self.baseline("terminal")[0].metrics

    @property
    def pareto(self) -> list:
        """Indices of non-dominated test points among the lambda points plus
        the terminal-only system (index ``len(points)``), sorted by time."""
        pts = [(p.test.mean_time, p.test.topk_error) for p in self.points]
        pts.append((self.terminal.mean_time, self.terminal.topk_error))
        return pareto_filter(pts)

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "topology": self.topology.to_dict(),
            "loss_k": self.loss_k,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "points": [{"lambda": p.lam, "digest": p.digest, "policy": p.policy,
                        "train": p.train.to_dict(), "test": p.test.to_dict()} for p in self.points],
            "baselines": [{"system": b.system, "param": b.param, "metrics": b.metrics.to_dict()}
                          for b in self.baselines],
            "agreement": list(self.agreement),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=SweepConfig.from_dict(d["config"]),
            topology=Topology.from_dict(d["topology"]),
            loss_k=int(d["loss_k"]),
            n_train=int(d["n_train"]),
            n_test=int(d["n_test"]),
            points=tuple(SweepPoint(float(p["lambda"]), p["digest"], p["policy"],
                                    SystemMetrics.from_dict(p["train"]), SystemMetrics.from_dict(p["test"]))
                         for p in d["points"]),
            baselines=tuple(BaselinePoint(b["system"], b["param"], SystemMetrics.from_dict(b["metrics"]))
                            for b in d["baselines"]),
            agreement=tuple(d.get("agreement", ())),
        )

    def save(self, path):
        _write(path, json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: malformed sweep file ({exc!r})") from exc


def baseline_points(train: TraceDataset, test: TraceDataset, config: SweepConfig) -> tuple:
    topo = test.topology
    out = [BaselinePoint("terminal", None, compare_terminal_only(test)),
           BaselinePoint("oracle", None, soft_oracle(test, topo, config.overhead).metrics)]
    for s in topo.stages:
        out.append(BaselinePoint("single", s, single_stage(test, s)))
    qs = np.quantile(train.arrays.entropy[topo.root], np.linspace(0, 1, config.myopic_points))
    for t in sorted(set(float(q) for q in qs)):
        out.append(BaselinePoint("myopic", t, myopic_threshold(test, t, config.overhead)))
    for p in np.linspace(0, 1, config.uniform_points):
        out.append(BaselinePoint("uniform", float(p), uniform_mix(test, float(p), config.seed)))
    return tuple(out)


def run_sweep(dataset: TraceDataset, topology: Topology | None = None, config: SweepConfig = SweepConfig()) -> SweepResult:
    """Train one policy per lambda on the training split, evaluate on both
    splits, and attach baselines measured on the held-out split."""
    topo = dataset.topology if topology is None else topology
    if topo.digest != dataset.topology.digest:
        raise ValidationError("dataset was built for a different topology")
    train, test = split(dataset, config.split, config.seed)
    points = []
    for lam in config.lambdas(topo):
        policy = train_bottom_up(train, lam, config.overhead, config.train)
        points.append(SweepPoint(lam, policy.digest, policy.to_dict(),
                                 evaluate_dataset(policy, train), evaluate_dataset(policy, test)))
    return SweepResult(config, topo, dataset.loss_spec.k, len(train), len(test), tuple(points),
                       baseline_points(train, test, config), tuple(agreement_statistics(dataset)))


def pareto_filter(points) -> list:
    """Indices of the non-dominated ``(time, error)`` points, sorted by time.

    Exact duplicates keep their first occurrence.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1], i))
    kept, best = [], np.inf
    for i in order:
        if points[i][1] < best:
            kept.append(i)
            best = points[i][1]
    return kept


def select_operating_point(sweep: SweepResult, budget: float | None = None,
                           tolerance: float | None = None) -> OperatingPoint:
    """Pick a point from the held-out curve (the terminal-only system included).

    With ``budget``: lowest top-k error among points with mean time <= budget.
    With ``tolerance``: lowest mean time among points with excess error <= tolerance.
    """
    if (budget is None) == (tolerance is None):
        raise ValidationError("give exactly one of budget or tolerance")
    cands = [OperatingPoint("policy", p.lam, p.digest, p.test) for p in sweep.points]
    cands.append(OperatingPoint("terminal", None, None, sweep.terminal))
    if budget is not None:
        feas = [c for c in cands if c.metrics.mean_time <= budget]
        key = lambda c: (c.metrics.topk_error, c.metrics.mean_time)  # noqa: E731
    else:
        feas = [c for c in cands if c.metrics.excess_error <= tolerance]
        key = lambda c: (c.metrics.mean_time, c.metrics.topk_error)  # noqa: E731
    if not feas:
        raise NoFeasiblePoint("no sweep point satisfies the constraint")
    return min(feas, key=key)


# ---------------------------------------------------------------------------
# reports

CURVE_FIELDS = ["system", "param", "lambda", "split", "mean_time", "top1_error", "topk_error",
                "excess", "signed_excess", "speedup"]
USAGE_FIELDS = ["system", "param", "split", "stage", "exit_fraction", "time_share"]


def _write(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _rows(sweep: SweepResult):
    for p in sweep.points:
        for split_name, m in (("train", p.train), ("test", p.test)):
            yield "policy", p.lam, p.lam, split_name, m
    for b in sweep.baselines:
        yield b.system, b.param, None, "test", b.metrics


def _cell(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path, fields, rows):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in rows:
                w.writerow([_cell(v) for v in r])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def emit_report(sweep: SweepResult, out_dir) -> dict:
    """Write ``curve.csv``, ``usage.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    paths = {"curve": out / "curve.csv", "usage": out / "usage.csv", "summary": out / "summary.json"}
    curve, usage = [], []
    for system, param, lam, split_name, m in _rows(sweep):
        curve.append([system, param, lam, split_name, m.mean_time, m.top1_error, m.topk_error,
                      m.excess_error, m.signed_excess, m.speedup])
        for s in sweep.topology.stages:
            usage.append([system, param, split_name, s, m.exit_fractions[s], m.time_shares[s]])
    _write_csv(paths["curve"], CURVE_FIELDS, curve)
    _write_csv(paths["usage"], USAGE_FIELDS, usage)

    selections = {}
    for name, kw in (("budget", {"budget": sweep.config.budget}), ("tolerance", {"tolerance": sweep.config.tolerance})):
        if next(iter(kw.values())) is None or not sweep.points:
            continue
        try:
            selections[name] = select_operating_point(sweep, **kw).to_dict()
        except NoFeasiblePoint as exc:
            selections[name] = {"error": str(exc)}
    n_pts = len(sweep.points)
    summary = {
        "topology": sweep.topology.to_dict(),
        "loss_k": sweep.loss_k,
        "n_train": sweep.n_train,
        "n_test": sweep.n_test,
        "config": sweep.config.to_dict(),
        "terminal_only": sweep.terminal.to_dict(),
        "oracle": sweep.baseline("oracle")[0].metrics.to_dict(),
        "operating_points": selections,
        "pareto": [{"system": "terminal"} if i == n_pts else
                   {"system": "policy", "lambda": sweep.points[i].lam, "digest": sweep.points[i].digest}
                   for i in sweep.pareto],
        "points": [{"lambda": p.lam, "digest": p.digest, "test": p.test.to_dict()} for p in sweep.points],
        "agreement": list(sweep.agreement),
    }
    _write(paths["summary"], json.dumps(summary, indent=2, allow_nan=False) + "\n")
    return paths


def read_curve(path) -> list:
    """Parse a curve CSV back into dicts with float columns restored."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in CURVE_FIELDS[4:]:
            r[k] = float(r[k])
        r["lambda"] = float(r["lambda"]) if r["lambda"] else None
    return rows
