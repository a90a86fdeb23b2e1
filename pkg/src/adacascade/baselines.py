"""Reference systems: soft oracle, myopic entropy threshold, uniform mixing,
and an exhaustive threshold search used to check the reduction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyGrid, POutOfRange, ValidationError
from .policy import (
    ConstantAction,
    EntropyThreshold,
    OverheadSpec,
    TrainedPolicy,
    future_label,
    future_time,
)
from .runtime import SystemMetrics, evaluate_dataset, metrics_from_arrays
from .traces import EXIT, Topology, TraceDataset


def _decision_overhead(topo: Topology, node, overhead_spec: OverheadSpec) -> float:
    if node == topo.terminal or len(topo.actions(node)) < 2:
        return 0.0
    return overhead_spec.linear_overhead(node, topo)


@dataclass(frozen=True, eq=False)
class OracleOutcome:
    exit_stages: tuple
    time: np.ndarray
    loss: np.ndarray
    metrics: SystemMetrics


def soft_oracle(dataset: TraceDataset, topology: Topology | None = None,
                overhead_spec: OverheadSpec = OverheadSpec()) -> OracleOutcome:
    """Label-aware router restricted to the topology and its overheads.

    An example may exit at a non-terminal stage only if that stage and every
    stage downstream of it are correct; among the eligible (path, exit)
    pairs the cheapest wins, ties broken by stage order. Every decision node
    on the way, including the exit node, charges the linear-policy overhead.
    """
    topo = dataset.topology if topology is None else topology
    arr = dataset.arrays
    pos = {s: i for i, s in enumerate(topo.stages)}
    candidates = []
    for order, path in enumerate(topo.root_paths()):
        end = path[-1]
        if not topo.can_exit(end):
            continue
        t = 0.0
        charge = np.zeros(len(topo.stages))
        for s in path:
            t += topo.stage_cost[s]
            oh = _decision_overhead(topo, s, overhead_spec)
            t += oh
            charge[pos[s]] += topo.stage_cost[s] + oh
        candidates.append((t, pos[end], order, path, charge))
    candidates.sort(key=lambda c: c[:3])

    n = arr.n
    chosen = np.full(n, -1, dtype=np.int64)
    for ci, (_, _, _, path, _) in enumerate(candidates):
        end = path[-1]
        if end == topo.terminal:
            ok = np.ones(n, dtype=bool)
        else:
            ok = arr.loss[end] == 0
            for d in topo.descendants(end):
                ok &= arr.loss[d] == 0
        chosen[(chosen < 0) & ok] = ci
    assert np.all(chosen >= 0)

    exit_index = np.array([pos[candidates[c][3][-1]] for c in chosen], dtype=np.int64)
    time = np.array([candidates[c][0] for c in chosen])
    charge = np.stack([candidates[c][4] for c in chosen])
    metrics = metrics_from_arrays(dataset, exit_index, time, charge)
    loss = np.stack([arr.loss[s] for s in topo.stages], axis=1)[np.arange(n), exit_index]
    return OracleOutcome(tuple(topo.stages[i] for i in exit_index), time, loss, metrics)


def _cheapest_forward(topo: Topology, node):
    targets = topo.targets(node)
    return min(targets, key=lambda t: (topo.stage_cost[t], targets.index(t)))


def myopic_policy(topology: Topology, threshold: float, overhead_spec: OverheadSpec = OverheadSpec(),
                  loss_spec=None) -> TrainedPolicy:
    """Forward to the cheapest next stage iff the current entropy exceeds ``threshold``.

    Infinite thresholds (and nodes without a choice) become constant
    policies without overhead.
    """
    nodes = {}
    for s in topology.decision_nodes:
        acts = topology.actions(s)
        if EXIT not in acts or len(acts) == 1 or threshold == -np.inf:
            fwd = _cheapest_forward(topology, s) if topology.targets(s) else EXIT
            nodes[s] = ConstantAction(node=s, actions=acts, action=fwd)
        elif threshold == np.inf:
            nodes[s] = ConstantAction(node=s, actions=acts, action=EXIT)
        else:
            nodes[s] = EntropyThreshold(node=s, actions=acts, overhead=overhead_spec.linear_overhead(s, topology),
                                        threshold=float(threshold), forward=_cheapest_forward(topology, s))
    kw = {} if loss_spec is None else {"loss_spec": loss_spec}
    return TrainedPolicy(topology, nodes, **kw)


def myopic_threshold(dataset: TraceDataset, threshold: float, overhead_spec: OverheadSpec = OverheadSpec()) -> SystemMetrics:
    if np.isnan(threshold):
        raise ValidationError("threshold must not be NaN")
    return evaluate_dataset(myopic_policy(dataset.topology, threshold, overhead_spec, dataset.loss_spec), dataset)


def uniform_mix(dataset: TraceDataset, p: float, seed: int = 0) -> SystemMetrics:
    """Each example independently runs the terminal path with probability ``p``
    and otherwise exits at the root."""
    if not (0.0 <= p <= 1.0):
        raise POutOfRange(f"p must lie in [0, 1], got {p}")
    topo = dataset.topology
    if EXIT not in topo.actions(topo.root):
        raise ValidationError("uniform mixing needs an exit at the root stage")
    n = len(dataset)
    pos = {s: i for i, s in enumerate(topo.stages)}
    path, path_time = topo.cheapest_path(topo.root)
    full = np.random.default_rng(seed).random(n) < p
    time = np.where(full, path_time, topo.stage_cost[topo.root])
    exit_index = np.where(full, pos[topo.terminal], pos[topo.root])
    charge = np.zeros((n, len(topo.stages)))
    charge[:, pos[topo.root]] = topo.stage_cost[topo.root]
    for s in path[1:]:
        charge[full, pos[s]] = topo.stage_cost[s]
    return metrics_from_arrays(dataset, exit_index, time, charge)


def single_stage(dataset: TraceDataset, stage: str) -> SystemMetrics:
    """Metrics of running ``stage`` alone, outside the cascade."""
    topo = dataset.topology
    n = len(dataset)
    i = topo.stages.index(stage)
    charge = np.zeros((n, len(topo.stages)))
    charge[:, i] = topo.stage_cost[stage]
    return metrics_from_arrays(dataset, np.full(n, i), np.full(n, topo.stage_cost[stage]), charge)


@dataclass(frozen=True)
class BruteForceResult:
    threshold: float
    risk: float
    index: int
    risks: tuple


def brute_force_policy(dataset: TraceDataset, node, threshold_grid, lam: float,
                       policy: TrainedPolicy | None = None, feature: int = 0) -> BruteForceResult:
    """Exhaustive search over threshold rules at one binary node.

    The rule takes ``actions[1]`` iff meta-feature ``feature`` exceeds the
    threshold. Its risk is the direct routed cost
    ``mean(time after the decision + lam * excess loss)``, computed per
    example from the recursions; downstream nodes follow ``policy``.
    Ties go to the earliest grid point.
    """
    grid = np.asarray(list(threshold_grid), dtype=float)
    if grid.size == 0:
        raise EmptyGrid("threshold grid is empty")
    topo = dataset.topology
    acts = topo.actions(node)
    if len(acts) != 2:
        raise ValidationError(f"{node!r} is not a binary decision node")
    policy = policy or TrainedPolicy(topo, {}, lam, dataset.loss_spec)
    k = dataset.loss_spec.k
    direct = np.empty((len(dataset), 2))
    x = np.empty(len(dataset))
    for i, ex in enumerate(dataset.examples):
        base = 0 if ex.true_label in ex.stages[topo.terminal].topk[:k] else 1
        for j, a in enumerate(acts):
            labels = future_label(policy, node, ex, a)
            loss = 0 if ex.true_label in labels[:k] else 1
            direct[i, j] = future_time(policy, node, ex, a) + lam * max(loss - base, 0)
        x[i] = ex.stages[node].mf[feature]
    take1 = x[None, :] > grid[:, None]
    risks = np.where(take1, direct[:, 1][None, :], direct[:, 0][None, :]).mean(axis=1)
    best = int(np.argmin(risks))
    return BruteForceResult(float(grid[best]), float(risks[best]), best, tuple(risks.tolist()))
