"""Execute a routing policy over traces and aggregate system metrics.

Two routers exist on purpose. :func:`route_example` walks one example
through the DAG step by step (and, via :class:`StageEvaluator`, can front
real models). :func:`simulate` routes a whole dataset with array
operations; it performs the same floating point additions in the same
order, so both give bit-identical times.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .exceptions import MissingPolicyNode, MissingStageRecord, ValidationError
from .traces import EXIT, ExampleTrace, TraceDataset, Topology


@dataclass(frozen=True)
class RoutingOutcome:
    example_id: str
    path: tuple
    exit_stage: str
    predicted_topk: tuple
    total_time: float
    loss: int | None


@dataclass(frozen=True)
class SystemMetrics:
    n: int
    mean_time: float
    top1_error: float
    topk_error: float
    excess_error: float
    signed_excess: float
    exit_fractions: Mapping[str, float]
    time_shares: Mapping[str, float]
    terminal_time: float
    terminal_topk_error: float

    @property
    def speedup(self) -> float:
        return self.terminal_time / self.mean_time if self.mean_time > 0 else float("inf")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_time": self.mean_time,
            "top1_error": self.top1_error,
            "topk_error": self.topk_error,
            "excess_error": self.excess_error,
            "signed_excess": self.signed_excess,
            "exit_fractions": dict(self.exit_fractions),
            "time_shares": dict(self.time_shares),
            "terminal_time": self.terminal_time,
            "terminal_topk_error": self.terminal_topk_error,
        }

    @classmethod
    def from_dict(cls, d) -> "SystemMetrics":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


class StageOutput(NamedTuple):
    topk: tuple
    mf: tuple
    entropy: float
    cost: float


class StageEvaluator(abc.ABC):
    """Source of stage outputs for routing.

    Implementations must be deterministic per ``(stage, handle)`` within a
    run. Only the trace-backed evaluator ships here; a live evaluator would
    run the stage's model on the example and time it.
    """

    @abc.abstractmethod
    def evaluate(self, stage: str, handle) -> StageOutput:
        ...


class TraceEvaluator(StageEvaluator):
    """Replays recorded stage outputs; handles are :class:`ExampleTrace` objects."""

    def __init__(self, topology: Topology):
        self.topology = topology

    def evaluate(self, stage, handle: ExampleTrace) -> StageOutput:
        try:
            rec = handle.stages[stage]
        except KeyError:
            raise MissingStageRecord(f"example {handle.example_id!r} lacks stage {stage!r}") from None
        return StageOutput(rec.topk, rec.mf, rec.entropy, self.topology.stage_cost[stage])


def route_with_evaluator(policy, evaluator: StageEvaluator, handle, example_id="", true_label=None, loss_k=1):
    topo = policy.topology
    node = topo.root
    out = evaluator.evaluate(node, handle)
    time = out.cost
    path = [node]
    while node != topo.terminal:
        pn = policy.nodes.get(node)
        if pn is None:
            raise MissingPolicyNode(f"no policy at decision node {node!r}")
        time += pn.overhead
        idx = pn.decide(np.asarray([out.mf], dtype=float), np.asarray([out.entropy]), policy.live_mask(node))[0]
        action = pn.actions[idx]
        if action == EXIT:
            break
        node = action
        out = evaluator.evaluate(node, handle)
        time += out.cost
        path.append(node)
    loss = None if true_label is None else (0 if true_label in out.topk[:loss_k] else 1)
    return RoutingOutcome(example_id, tuple(path), node, tuple(out.topk), time, loss)


def route_example(policy, trace: ExampleTrace) -> RoutingOutcome:
    """Route one recorded example: pay the root's cost, then at every decision
    node pay the policy overhead and follow its action until an exit or the
    terminal stage."""
    return route_with_evaluator(
        policy, TraceEvaluator(policy.topology), trace, trace.example_id, trace.true_label, policy.loss_spec.k
    )


@dataclass(frozen=True, eq=False)
class Simulation:
    """Array form of routing outcomes for a whole dataset.

    ``exit_index`` indexes ``topology.stages``; ``charge[i, s]`` is the time
    example ``i`` spent on stage ``s`` (its cost plus its decision overhead).
    """

    topology: Topology
    exit_index: np.ndarray
    time: np.ndarray
    charge: np.ndarray
    visits: np.ndarray = field(repr=False)


def simulate(policy, dataset: TraceDataset) -> Simulation:
    topo, arr = policy.topology, dataset.arrays
    n = arr.n
    pos = {s: i for i, s in enumerate(topo.stages)}
    root = topo.root
    time = np.full(n, topo.stage_cost[root])
    charge = np.zeros((n, len(topo.stages)))
    charge[:, pos[root]] = topo.stage_cost[root]
    exit_index = np.full(n, -1, dtype=np.int64)
    visits = np.zeros(len(topo.stages), dtype=np.int64)
    arriving = {root: [np.arange(n)]}
    for s in topo.topological_order:
        parts = arriving.pop(s, None)
        if not parts:
            continue
        idx = np.sort(np.concatenate(parts))
        if idx.size == 0:
            continue
        visits[pos[s]] = idx.size
        if s == topo.terminal:
            exit_index[idx] = pos[s]
            continue
        pn = policy.nodes.get(s)
        if pn is None:
            raise MissingPolicyNode(f"no policy at decision node {s!r}")
        time[idx] += pn.overhead
        charge[idx, pos[s]] += pn.overhead
        dec = pn.decide(arr.mf[s][idx], arr.entropy[s][idx], policy.live_mask(s))
        for j, a in enumerate(pn.actions):
            sel = idx[dec == j]
            if sel.size == 0:
                continue
            if a == EXIT:
                exit_index[sel] = pos[s]
            else:
                time[sel] += topo.stage_cost[a]
                charge[sel, pos[a]] += topo.stage_cost[a]
                arriving.setdefault(a, []).append(sel)
    assert np.all(exit_index >= 0)
    return Simulation(topo, exit_index, time, charge, visits)


def metrics_from_arrays(dataset: TraceDataset, exit_index, time, charge) -> SystemMetrics:
    """Aggregate per-example exits, times and per-stage time charges."""
    topo, arr = dataset.topology, dataset.arrays
    n = arr.n
    if n == 0:
        raise ValidationError("cannot aggregate an empty dataset")
    loss = np.stack([arr.loss[s] for s in topo.stages], axis=1)
    top1 = np.stack([arr.top1_loss[s] for s in topo.stages], axis=1)
    rows = np.arange(n)
    sys_loss = loss[rows, exit_index]
    sys_top1 = top1[rows, exit_index]
    term_loss = arr.loss[topo.terminal]
    counts = np.bincount(exit_index, minlength=len(topo.stages))
    per_stage = charge.sum(axis=0)
    total = per_stage.sum()
    return SystemMetrics(
        n=n,
        mean_time=float(np.mean(time)),
        top1_error=float(sys_top1.sum() / n),
        topk_error=float(sys_loss.sum() / n),
        excess_error=float(np.maximum(sys_loss - term_loss, 0).sum() / n),
        signed_excess=float((sys_loss - term_loss).sum() / n),
        exit_fractions={s: float(counts[i] / n) for i, s in enumerate(topo.stages)},
        time_shares={s: float(per_stage[i] / total) if total > 0 else 0.0 for i, s in enumerate(topo.stages)},
        terminal_time=float(np.mean(np.full(n, topo.cheapest_path(topo.root)[1]))),
        terminal_topk_error=float(term_loss.sum() / n),
    )


def evaluate_dataset(policy, dataset: TraceDataset) -> SystemMetrics:
    sim = simulate(policy, dataset)
    return metrics_from_arrays(dataset, sim.exit_index, sim.time, sim.charge)


def compare_terminal_only(dataset: TraceDataset) -> SystemMetrics:
    """Metrics of always running the cheapest root-to-terminal path, no policy overhead."""
    from .policy import terminal_only_policy

    return evaluate_dataset(terminal_only_policy(dataset.topology, dataset.loss_spec), dataset)

