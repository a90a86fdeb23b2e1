"""Trace data model: topology, per-example stage records, losses, I/O and
a synthetic trace generator.

A trace records, for one example, what every stage of the cascade predicted
(its ordered top-k label list), the confidence meta-features a routing
policy may look at, and the entropy of the stage's predictive distribution.
Stage costs live on the :class:`Topology`; they are abstract time units.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .exceptions import (
    CyclicTopology,
    EmptyDataset,
    FractionOutOfRange,
    InvalidProbabilityTable,
    InvalidTopology,
    IoFailure,
    MalformedLine,
    MissingStageRecord,
    NotAProbabilityVector,
    UnknownStageId,
    ValidationError,
)

EXIT = "exit"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True, eq=False)
class Topology:
    """DAG of prediction stages.

    ``stages[0]`` is the root, evaluated for every example. ``edges`` maps each
    decision node to its ordered actions, each either :data:`EXIT` or the id
    of a downstream stage. The terminal stage has no actions; routing always
    stops there.
    """

    stages: tuple
    edges: Mapping[str, tuple]
    stage_cost: Mapping[str, float]
    terminal: str

    def __post_init__(self):
        stages = tuple(str(s) for s in self.stages)
        edges = {str(k): tuple(str(a) for a in v) for k, v in dict(self.edges).items() if len(v)}
        costs = {str(k): float(v) for k, v in dict(self.stage_cost).items()}
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "stage_cost", costs)
        object.__setattr__(self, "terminal", str(self.terminal))
        self._validate()

    def _validate(self):
        stages = self.stages
        if not stages:
            raise InvalidTopology("topology has no stages")
        if len(set(stages)) != len(stages):
            raise InvalidTopology("duplicate stage ids")
        if EXIT in stages:
            raise InvalidTopology(f"{EXIT!r} is reserved and cannot name a stage")
        known = set(stages)
        if self.terminal not in known:
            raise InvalidTopology(f"terminal {self.terminal!r} is not a stage")
        if self.terminal in self.edges:
            raise InvalidTopology("terminal stage must not have outgoing actions")
        for node, actions in self.edges.items():
            if node not in known:
                raise UnknownStageId(f"edges reference unknown stage {node!r}")
            if len(set(actions)) != len(actions):
                raise InvalidTopology(f"duplicate actions at {node!r}")
            for a in actions:
                if a != EXIT and a not in known:
                    raise UnknownStageId(f"action at {node!r} targets unknown stage {a!r}")
                if a == node:
                    raise CyclicTopology(f"self loop at {node!r}")
        for s in stages:
            if s != self.terminal and s not in self.edges:
                raise InvalidTopology(f"non-terminal stage {s!r} has no actions")
        for s in stages:
            if s not in self.stage_cost:
                raise InvalidTopology(f"missing cost for stage {s!r}")
            c = self.stage_cost[s]
            if not math.isfinite(c) or c < 0:
                raise InvalidTopology(f"cost of {s!r} must be finite and >= 0")
        extra = set(self.stage_cost) - known
        if extra:
            raise UnknownStageId(f"costs given for unknown stages {sorted(extra)}")

        # acyclicity, then reachability in both directions
        _ = self.topological_order
        reach = {self.stages[0]}
        for s in self.topological_order:
            if s in reach:
                reach.update(self.targets(s))
        if reach != known:
            raise InvalidTopology(f"stages unreachable from root: {sorted(known - reach)}")
        if any(self.stages[0] in self.targets(s) for s in stages):
            raise InvalidTopology("root stage must not have incoming edges")
        for s in stages:
            if self.terminal not in self.descendants(s) and s != self.terminal:
                raise InvalidTopology(f"terminal not reachable from {s!r}")
        if self.cheapest_path(self.root)[1] <= 0:
            raise InvalidTopology("cost of reaching the terminal stage must be > 0")

    @property
    def root(self) -> str:
        return self.stages[0]

    @property
    def decision_nodes(self) -> tuple:
        return tuple(s for s in self.stages if s in self.edges)

    def actions(self, node) -> tuple:
        return self.edges.get(node, ())

    def targets(self, node) -> tuple:
        return tuple(a for a in self.actions(node) if a != EXIT)

    def can_exit(self, node) -> bool:
        return node == self.terminal or EXIT in self.actions(node)

    @cached_property
    def topological_order(self) -> tuple:
        indeg = {s: 0 for s in self.stages}
        for s in self.stages:
            for t in self.targets(s):
                indeg[t] += 1
        order, ready = [], [s for s in self.stages if indeg[s] == 0]
        while ready:
            s = ready.pop(0)
            order.append(s)
            for t in self.targets(s):
                indeg[t] -= 1
                if indeg[t] == 0:
                    ready.append(t)
            ready.sort(key=self.stages.index)
        if len(order) != len(self.stages):
            raise CyclicTopology("stage graph contains a cycle")
        return tuple(order)

    def descendants(self, node) -> frozenset:
        seen, stack = set(), list(self.targets(node))
        while stack:
            s = stack.pop()
            if s not in seen:
                seen.add(s)
                stack.extend(self.targets(s))
        return frozenset(seen)

    @cached_property
    def depth(self) -> dict:
        """Longest hop distance from the root."""
        d = {s: 0 for s in self.stages}
        for s in self.topological_order:
            for t in self.targets(s):
                d[t] = max(d[t], d[s] + 1)
        return d

    def cheapest_path(self, node) -> tuple:
        """Cheapest forward-only path from ``node`` (inclusive) to the terminal.

        Returns ``(path, cost)``; ties go to the earlier action.
        """
        best = {self.terminal: ((self.terminal,), self.stage_cost[self.terminal])}
        for s in reversed(self.topological_order):
            if s == self.terminal:
                continue
            cands = [best[t] for t in self.targets(s) if t in best]
            if not cands:
                continue
            path, cost = min(cands, key=lambda pc: pc[1])
            best[s] = ((s,) + path, self.stage_cost[s] + cost)
        path = best[node][0]
        return path, self.path_cost(path)

    def path_cost(self, path) -> float:
        # left fold, matching the order in which the router accumulates time
        total = 0.0
        for s in path:
            total += self.stage_cost[s]
        return total

    def root_paths(self) -> list:
        """Every forward path starting at the root, including the root alone."""
        out = []

        def walk(path):
            out.append(path)
            for t in self.targets(path[-1]):
                walk(path + (t,))

        walk((self.root,))
        return out

    def to_dict(self) -> dict:
        return {
            "stages": list(self.stages),
            "costs": {s: self.stage_cost[s] for s in self.stages},
            "edges": {s: list(self.edges[s]) for s in self.decision_nodes},
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d) -> "Topology":
        try:
            return cls(
                stages=tuple(d["stages"]),
                edges=d["edges"],
                stage_cost=d["costs"],
                terminal=d["terminal"],
            )
        except (KeyError, TypeError) as exc:
            raise InvalidTopology(f"malformed topology document: {exc!r}") from exc

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StageRecord:
    topk: tuple
    mf: tuple
    entropy: float

    def __post_init__(self):
        topk = tuple(int(v) for v in self.topk)
        mf = tuple(float(v) for v in self.mf)
        object.__setattr__(self, "topk", topk)
        object.__setattr__(self, "mf", mf)
        object.__setattr__(self, "entropy", float(self.entropy))
        if not topk:
            raise ValidationError("topk label list is empty")
        if len(set(topk)) != len(topk):
            raise ValidationError(f"duplicate labels in topk {list(topk)}")
        if not all(math.isfinite(v) for v in mf):
            raise ValidationError("meta-features must be finite")
        if not (math.isfinite(self.entropy) and self.entropy >= 0):
            raise ValidationError("entropy must be finite and >= 0")


@dataclass(frozen=True)
class ExampleTrace:
    example_id: str
    true_label: int
    stages: Mapping[str, StageRecord]

    def to_dict(self) -> dict:
        return {
            "id": self.example_id,
            "y": self.true_label,
            "stages": {
                s: {"topk": list(r.topk), "mf": list(r.mf), "entropy": r.entropy}
                for s, r in self.stages.items()
            },
        }

    @classmethod
    def from_dict(cls, d) -> "ExampleTrace":
        y = d["y"]
        if isinstance(y, bool) or not isinstance(y, int):
            raise ValidationError("'y' must be an integer")
        stages = {}
        for s, rec in d["stages"].items():
            stages[s] = StageRecord(topk=tuple(rec["topk"]), mf=tuple(rec["mf"]), entropy=rec["entropy"])
        return cls(example_id=str(d["id"]), true_label=y, stages=stages)


@dataclass(frozen=True)
class LossSpec:
    """Top-k indicator loss: 0 iff the true label is among the first k predictions."""

    k: int = 1

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError("loss top-k must be a positive integer")


def stage_loss(trace: ExampleTrace, stage: str, loss_spec: LossSpec) -> int:
    return 0 if trace.true_label in trace.stages[stage].topk[: loss_spec.k] else 1


def compute_entropy(probs) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(probs, dtype=float).ravel()
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise NotAProbabilityVector("expected a nonnegative vector summing to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def check_example(ex: ExampleTrace, topology: Topology):
    for s in ex.stages:
        if s not in topology.stage_cost:
            raise UnknownStageId(f"example {ex.example_id!r} has record for unknown stage {s!r}")
    for s in topology.stages:
        if s not in ex.stages:
            raise MissingStageRecord(f"example {ex.example_id!r} lacks a record for stage {s!r}")


class TraceArrays:
    """Column view of a dataset used by the vectorized trainer and runtime."""

    def __init__(self, dataset: "TraceDataset"):
        topo, exs, k = dataset.topology, dataset.examples, dataset.loss_spec.k
        self.n = len(exs)
        self.y = np.array([e.true_label for e in exs], dtype=np.int64)
        self.loss, self.top1_loss, self.mf, self.entropy = {}, {}, {}, {}
        for s in topo.stages:
            recs = [e.stages[s] for e in exs]
            self.loss[s] = np.array(
                [0 if e.true_label in r.topk[:k] else 1 for e, r in zip(exs, recs)], dtype=np.int64
            )
            self.top1_loss[s] = np.array(
                [0 if e.true_label == r.topk[0] else 1 for e, r in zip(exs, recs)], dtype=np.int64
            )
            self.mf[s] = np.array([r.mf for r in recs], dtype=float).reshape(self.n, -1)
            self.entropy[s] = np.array([r.entropy for r in recs], dtype=float)


@dataclass(frozen=True, eq=False)
class TraceDataset:
    topology: Topology
    examples: tuple
    loss_spec: LossSpec = LossSpec()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.examples:
            raise EmptyDataset("dataset has no examples")
        dims = {}
        for ex in self.examples:
            check_example(ex, self.topology)
            for s, r in ex.stages.items():
                if dims.setdefault(s, len(r.mf)) != len(r.mf):
                    raise ValidationError(
                        f"example {ex.example_id!r}: stage {s!r} meta-feature length "
                        f"{len(r.mf)} differs from {dims[s]}"
                    )

    def __len__(self):
        return len(self.examples)

    @property
    def arrays(self) -> TraceArrays:
        if "arrays" not in self._cache:
            self._cache["arrays"] = TraceArrays(self)
        return self._cache["arrays"]

    def subset(self, indices: Iterable[int]) -> "TraceDataset":
        return TraceDataset(self.topology, tuple(self.examples[i] for i in indices), self.loss_spec)

    def with_loss(self, loss_spec: LossSpec) -> "TraceDataset":
        return TraceDataset(self.topology, self.examples, loss_spec)


def split(dataset: TraceDataset, fraction: float, seed: int = 0):
    """Random disjoint partition; the first part gets ``floor(n * fraction)`` examples.

    Both parts keep the original example order.
    """
    if not (0.0 < fraction < 1.0):
        raise FractionOutOfRange(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    m = int(math.floor(n * fraction))
    perm = np.random.default_rng(seed).permutation(n)
    first, second = np.sort(perm[:m]), np.sort(perm[m:])
    return dataset.subset(first.tolist()), dataset.subset(second.tolist())


# ---------------------------------------------------------------------------
# file I/O


def load_topology(path) -> Topology:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidTopology(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return Topology.from_dict(doc)


def save_topology(topology: Topology, path):
    _write_text(path, json.dumps(topology.to_dict(), indent=2) + "\n")


def _write_text(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def save_traces(dataset: TraceDataset, path):
    _write_text(path, "".join(json.dumps(ex.to_dict(), allow_nan=False) + "\n" for ex in dataset.examples))


def load_traces(path, topology: Topology, loss_spec: LossSpec = LossSpec()) -> TraceDataset:
    examples, dims = [], {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                ex = ExampleTrace.from_dict(doc)
            except (MissingStageRecord, UnknownStageId):
                raise
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValueError) as exc:
                raise MalformedLine(lineno, str(exc) or type(exc).__name__) from exc
            try:
                check_example(ex, topology)
            except (MissingStageRecord, UnknownStageId) as exc:
                raise type(exc)(f"line {lineno}: {exc}") from None
            for s, r in ex.stages.items():
                if dims.setdefault(s, len(r.mf)) != len(r.mf):
                    raise MalformedLine(lineno, f"stage {s!r} meta-feature length changed")
            examples.append(ex)
    if not examples:
        raise EmptyDataset(f"{path}: no examples")
    return TraceDataset(topology, tuple(examples), loss_spec)


# ---------------------------------------------------------------------------
# synthetic traces


@dataclass(frozen=True, eq=False)
class SynthConfig:
    """Parameters for :func:`generate_synthetic`.

    ``agreement`` maps each set of stages to the probability that exactly
    those stages classify an example correctly (at ``loss_k``).
    Meta-features per stage are ``(entropy score, max-prob score)``; the
    entropy score is centred at 1.0 for correctly classified examples and at
    ``1.0 + separation`` otherwise, with Gaussian noise of scale ``noise``.
    """

    topology: Topology
    agreement: Mapping[frozenset, float]
    n: int = 1000
    seed: int = 0
    noise: float = 0.35
    separation: float = 1.0
    n_classes: int = 1000
    topk_len: int = 5
    loss_k: int = 5
    top1_rate: float = 0.7

    def __post_init__(self):
        table = {frozenset(k): float(v) for k, v in dict(self.agreement).items()}
        object.__setattr__(self, "agreement", table)
        known = set(self.topology.stages)
        for subset, p in table.items():
            if not subset <= known:
                raise InvalidProbabilityTable(f"unknown stages in subset {sorted(subset - known)}")
            if not (math.isfinite(p) and p >= 0):
                raise InvalidProbabilityTable("probabilities must be finite and >= 0")
        if not table or abs(sum(table.values()) - 1.0) > 1e-9:
            raise InvalidProbabilityTable("agreement probabilities must sum to 1")
        if any(self.topology.stage_cost[s] <= 0 for s in self.topology.stages):
            raise ValidationError("synthetic stage costs must be > 0")
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if not (1 <= self.loss_k <= self.topk_len < self.n_classes):
            raise ValidationError("need 1 <= loss_k <= topk_len < n_classes")
        if self.noise < 0 or not (0 <= self.top1_rate <= 1):
            raise ValidationError("noise must be >= 0 and top1_rate in [0, 1]")

    def ordered_table(self) -> list:
        """Table entries in a canonical order (by stage bitmask)."""
        pos = {s: i for i, s in enumerate(self.topology.stages)}
        items = sorted(self.agreement.items(), key=lambda kv: sum(1 << pos[s] for s in kv[0]))
        return items

    def to_dict(self) -> dict:
        order = self.topology.stages
        return {
            "topology": self.topology.to_dict(),
            "agreement": [
                {"correct": [s for s in order if s in subset], "p": p}
                for subset, p in self.ordered_table()
            ],
            "n": self.n,
            "seed": self.seed,
            "noise": self.noise,
            "separation": self.separation,
            "n_classes": self.n_classes,
            "topk_len": self.topk_len,
            "loss_k": self.loss_k,
            "top1_rate": self.top1_rate,
        }

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        try:
            topo = Topology.from_dict(d["topology"])
            table = {}
            for entry in d["agreement"]:
                key = frozenset(entry["correct"])
                if key in table:
                    raise InvalidProbabilityTable(f"subset {sorted(key)} listed twice")
                table[key] = entry["p"]
            kwargs = {k: d[k] for k in ("n", "seed", "noise", "separation", "n_classes",
                                        "topk_len", "loss_k", "top1_rate") if k in d}
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed synth config: {exc!r}") from exc
        return cls(topology=topo, agreement=table, **kwargs)


def load_synth_config(path) -> SynthConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return SynthConfig.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def generate_synthetic(config: SynthConfig) -> TraceDataset:
    topo = config.topology
    rng = np.random.default_rng(config.seed)
    n, k, L = config.n, config.loss_k, config.topk_len
    table = config.ordered_table()
    probs = np.array([p for _, p in table])
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    subset_idx = np.searchsorted(cum, rng.random(n), side="right")
    subset_idx = np.minimum(subset_idx, len(table) - 1)
    y = rng.integers(config.n_classes, size=n)

    per_stage = {}
    for s in topo.stages:
        correct = np.array([s in table[j][0] for j in subset_idx])
        # L distinct wrong labels: a contiguous run of offsets from the true label
        start = rng.integers(1, config.n_classes - L + 1, size=n)
        labels = (y[:, None] + start[:, None] + np.arange(L)[None, :]) % config.n_classes
        at_top = rng.random(n) < config.top1_rate
        pos = np.where(at_top, 0, rng.integers(1, k, size=n) if k > 1 else 0)
        rows = np.flatnonzero(correct)
        labels[rows, pos[rows]] = y[rows]
        ent = np.abs(1.0 + config.separation * (~correct) + config.noise * rng.standard_normal(n))
        maxp = np.clip(np.exp(-ent) + 0.05 * rng.standard_normal(n), 0.0, 1.0)
        per_stage[s] = (labels, ent, maxp)

    examples = []
    for i in range(n):
        recs = {}
        for s in topo.stages:
            labels, ent, maxp = per_stage[s]
            recs[s] = StageRecord(
                topk=tuple(labels[i].tolist()), mf=(float(ent[i]), float(maxp[i])), entropy=float(ent[i])
            )
        examples.append(ExampleTrace(example_id=f"ex{i:06d}", true_label=int(y[i]), stages=recs))
    return TraceDataset(topo, tuple(examples), LossSpec(k))


def agreement_statistics(dataset: TraceDataset) -> list:
    """Fraction of examples per set of correctly-classifying stages.

    Stages are listed in increasing cost order; rows are sorted by that
    ordering's bitmask.
    """
    topo, arr = dataset.topology, dataset.arrays
    order = sorted(topo.stages, key=lambda s: (topo.stage_cost[s], topo.stages.index(s)))
    mask = np.zeros(arr.n, dtype=np.int64)
    for i, s in enumerate(order):
        mask |= (arr.loss[s] == 0).astype(np.int64) << i
    counts = np.bincount(mask, minlength=1 << len(order))
    rows = []
    for m in range(len(counts)):
        if counts[m]:
            rows.append({
                "correct": [s for i, s in enumerate(order) if m >> i & 1],
                "fraction": float(counts[m] / arr.n),
            })
    return rows


# ---------------------------------------------------------------------------
# reference instance


def reference_topology(full_tree: bool = True) -> Topology:
    """Three-stage small/medium/large cascade with costs 0.25, 0.70, 2.86.

    With ``full_tree`` the root may also jump directly to the large stage.
    """
    edges = {
        "small": (EXIT, "medium", "large") if full_tree else (EXIT, "medium"),
        "medium": (EXIT, "large"),
    }
    return Topology(
        stages=("small", "medium", "large"),
        edges=edges,
        stage_cost={"small": 0.25, "medium": 0.70, "large": 2.86},
        terminal="large",
    )


def reference_agreement() -> dict:
    """Top-5-style agreement table: 77% correct everywhere, 5% wrong everywhere,
    the rest correct only at later stages."""
    return {
        frozenset({"small", "medium", "large"}): 0.77,
        frozenset(): 0.05,
        frozenset({"medium", "large"}): 0.10,
        frozenset({"large"}): 0.05,
        frozenset({"medium"}): 0.03,
    }


def reference_config(n: int = 10000, seed: int = 0, full_tree: bool = True) -> SynthConfig:
    return SynthConfig(topology=reference_topology(full_tree), agreement=reference_agreement(), n=n, seed=seed)

