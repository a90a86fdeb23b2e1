"""Policy training by reduction to weighted classification.

Every decision node sees, for each training example, the cost of each of its
actions given that all downstream nodes are already fixed::

    cost(a) = time after the decision under a + lam * (loss under a - terminal loss)_+

Nodes are trained deepest first. Each node picks, among every constant
action and a linear policy on the stage's meta-features, the family with
the lowest mean routed cost plus evaluation overhead. Constants cost no
overhead, so a trained system is never slower than always running the
terminal stage on its training data.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import ClassVar, Mapping

import numpy as np

from .exceptions import AllZeroImportance, CyclicTopology, MissingPolicyNode, UntrainedDownstream, ValidationError
from .learners import (
    ActionCostVector,
    LinearModel,
    MultiActionModel,
    TrainConfig,
    fit_cost_sensitive,
    fit_weighted_binary,
)
from .runtime import simulate
from .traces import EXIT, ExampleTrace, LossSpec, Topology, TraceDataset, canonical_json, stage_loss


# ---------------------------------------------------------------------------
# policy node families


@dataclass(frozen=True, eq=False, kw_only=True)
class PolicyNode:
    node: str
    actions: tuple
    overhead: float = 0.0

    family: ClassVar[str] = ""

    def scores(self, mf, entropy) -> np.ndarray:
        raise NotImplementedError

    def decide(self, mf, entropy, live=None) -> np.ndarray:
        """Action index per row; the highest score wins, lower index on ties.

        ``live`` masks out actions whose target stage was pruned.
        """
        S = self.scores(np.asarray(mf, dtype=float), np.asarray(entropy, dtype=float))
        if live is not None and not live.all():
            S = np.where(live[None, :], S, -np.inf)
        return np.argmax(S, axis=1)

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"family": self.family, "actions": list(self.actions), "overhead": self.overhead,
                "params": self.params()}


@dataclass(frozen=True, eq=False, kw_only=True)
class ConstantAction(PolicyNode):
    action: str
    family: ClassVar[str] = "constant"

    def __post_init__(self):
        if self.action not in self.actions:
            raise ValidationError(f"{self.action!r} is not an action of {self.node!r}")
        if self.overhead != 0:
            raise ValidationError("constant policies have zero overhead")

    def scores(self, mf, entropy):
        S = np.full((len(entropy), len(self.actions)), -np.inf)
        S[:, self.actions.index(self.action)] = 0.0
        return S

    def params(self):
        return {"action": self.action}


@dataclass(frozen=True, eq=False, kw_only=True)
class LinearBinary(PolicyNode):
    """Two-action node; a positive score selects ``actions[1]``."""

    model: LinearModel
    family: ClassVar[str] = "linear_binary"

    def scores(self, mf, entropy):
        s = self.model.score(mf)
        return np.column_stack([np.zeros_like(s), s])

    def params(self):
        return self.model.to_dict()


@dataclass(frozen=True, eq=False, kw_only=True)
class LinearMultiAction(PolicyNode):
    model: MultiActionModel
    family: ClassVar[str] = "linear_multi"

    def scores(self, mf, entropy):
        return self.model.scores(mf)

    def params(self):
        return self.model.to_dict()


@dataclass(frozen=True, eq=False, kw_only=True)
class EntropyThreshold(PolicyNode):
    """Forward to ``forward`` iff the stage's entropy exceeds ``threshold``, else exit."""

    threshold: float
    forward: str
    family: ClassVar[str] = "threshold"

    def scores(self, mf, entropy):
        S = np.full((len(entropy), len(self.actions)), -np.inf)
        S[:, self.actions.index(EXIT)] = 0.0
        S[:, self.actions.index(self.forward)] = entropy - self.threshold
        return S

    def params(self):
        return {"threshold": self.threshold, "forward": self.forward}


def node_from_dict(node, d) -> PolicyNode:
    fam, actions, overhead, p = d["family"], tuple(d["actions"]), float(d["overhead"]), d["params"]
    if fam == "constant":
        return ConstantAction(node=node, actions=actions, action=p["action"])
    if fam == "linear_binary":
        return LinearBinary(node=node, actions=actions, overhead=overhead, model=LinearModel.from_dict(p))
    if fam == "linear_multi":
        return LinearMultiAction(node=node, actions=actions, overhead=overhead, model=MultiActionModel.from_dict(p))
    if fam == "threshold":
        return EntropyThreshold(node=node, actions=actions, overhead=overhead,
                                threshold=float(p["threshold"]), forward=p["forward"])
    raise ValidationError(f"unknown policy family {fam!r}")


# ---------------------------------------------------------------------------
# overhead and trained policy


@dataclass(frozen=True)
class OverheadSpec:
    """Evaluation overhead charged for non-constant policy families.

    Per-node values in ``linear`` win; otherwise ``default`` if given, else
    ``fraction`` times the cheapest stage cost.
    """

    linear: Mapping[str, float] = field(default_factory=dict)
    default: float | None = None
    fraction: float = 0.08

    def __post_init__(self):
        vals = list(self.linear.values()) + ([self.default] if self.default is not None else [])
        if any(not (v >= 0) for v in vals) or self.fraction < 0:
            raise ValidationError("overheads must be >= 0")

    def linear_overhead(self, node, topology: Topology) -> float:
        if node in self.linear:
            return float(self.linear[node])
        if self.default is not None:
            return float(self.default)
        return self.fraction * min(topology.stage_cost.values())

    def to_dict(self):
        return {"linear": dict(self.linear), "default": self.default, "fraction": self.fraction}


@dataclass(frozen=True, eq=False)
class TrainedPolicy:
    topology: Topology
    nodes: Mapping[str, PolicyNode]
    lam: float = 0.0
    loss_spec: LossSpec = LossSpec()
    pruned: frozenset = frozenset()
    training_order: tuple = ()

    def live_mask(self, node):
        if not self.pruned:
            return None
        return np.array([a == EXIT or a not in self.pruned for a in self.topology.actions(node)])

    @property
    def live_stages(self) -> tuple:
        return tuple(s for s in self.topology.stages if s not in self.pruned)

    def with_node(self, pn: PolicyNode) -> "TrainedPolicy":
        nodes = dict(self.nodes)
        nodes[pn.node] = pn
        return TrainedPolicy(self.topology, nodes, self.lam, self.loss_spec, self.pruned,
                             self.training_order + (pn.node,))

    def action_at(self, node, trace: ExampleTrace) -> str:
        pn = self.nodes.get(node)
        if pn is None:
            raise UntrainedDownstream(f"decision node {node!r} is not trained")
        rec = trace.stages[node]
        idx = pn.decide(np.asarray([rec.mf]), np.asarray([rec.entropy]), self.live_mask(node))[0]
        return pn.actions[idx]

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "loss_k": self.loss_spec.k,
            "topology_digest": self.topology.digest,
            "pruned": [s for s in self.topology.stages if s in self.pruned],
            "training_order": list(self.training_order),
            "nodes": {s: self.nodes[s].to_dict() for s in self.topology.stages if s in self.nodes},
        }

    @classmethod
    def from_dict(cls, d, topology: Topology) -> "TrainedPolicy":
        if d.get("topology_digest") != topology.digest:
            raise ValidationError("policy was trained for a different topology")
        nodes = {s: node_from_dict(s, nd) for s, nd in d["nodes"].items()}
        for s, pn in nodes.items():
            if pn.actions != topology.actions(s):
                raise ValidationError(f"policy actions at {s!r} do not match the topology")
        return cls(topology, nodes, float(d["lambda"]), LossSpec(int(d.get("loss_k", 1))),
                   frozenset(d.get("pruned", ())), tuple(d.get("training_order", ())))

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    def save(self, path):
        from .traces import _write_text

        _write_text(path, json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n")

    @classmethod
    def load(cls, path, topology: Topology) -> "TrainedPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), topology)


def constant_policy(topology: Topology, choose, loss_spec: LossSpec = LossSpec(), lam: float = 0.0) -> TrainedPolicy:
    """Policy with a constant action at every node, ``choose(node) -> action``."""
    nodes = {s: ConstantAction(node=s, actions=topology.actions(s), action=choose(s)) for s in topology.decision_nodes}
    return TrainedPolicy(topology, nodes, lam, loss_spec)


def terminal_only_policy(topology: Topology, loss_spec: LossSpec = LossSpec()) -> TrainedPolicy:
    def nxt(s):
        return topology.cheapest_path(s)[0][1]

    return constant_policy(topology, nxt, loss_spec)


# ---------------------------------------------------------------------------
# scalar recursions (per example)


def future_time(policy: TrainedPolicy, node, trace: ExampleTrace, action=None) -> float:
    """Time incurred after the decision at ``node``: zero for an exit, else the
    next stage's cost, its policy overhead and what its trained policy does."""
    if action is None:
        action = policy.action_at(node, trace)
    if action == EXIT:
        return 0.0
    topo = policy.topology
    cost = topo.stage_cost[action]
    if action == topo.terminal:
        return cost
    pn = policy.nodes.get(action)
    if pn is None:
        raise UntrainedDownstream(f"decision node {action!r} is not trained")
    return cost + (pn.overhead + future_time(policy, action, trace))


def future_label(policy: TrainedPolicy, node, trace: ExampleTrace, action=None) -> tuple:
    """Top-k labels the system returns if ``node`` takes ``action``."""
    if action is None:
        action = policy.action_at(node, trace)
    if action == EXIT:
        return trace.stages[node].topk
    if action == policy.topology.terminal:
        return trace.stages[action].topk
    return future_label(policy, action, trace)


def _future_stage(policy, node, trace, action):
    while action != EXIT:
        if action == policy.topology.terminal:
            return action
        node, action = action, policy.action_at(action, trace)
    return node


def action_costs(policy: TrainedPolicy, node, trace: ExampleTrace, lam: float, loss_spec: LossSpec | None = None) -> ActionCostVector:
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    loss_spec = loss_spec or policy.loss_spec
    topo = policy.topology
    base = stage_loss(trace, topo.terminal, loss_spec)
    costs = {}
    for a in topo.actions(node):
        t = future_time(policy, node, trace, a)
        loss = stage_loss(trace, _future_stage(policy, node, trace, a), loss_spec)
        costs[a] = t + lam * max(loss - base, 0)
    return ActionCostVector(features=trace.stages[node].mf, costs=costs)


# ---------------------------------------------------------------------------
# vectorized reduction


def _continuations(policy: TrainedPolicy, arrays) -> dict:
    """Per trained node: (time from arriving there on, loss of the label returned)."""
    topo = policy.topology
    cont = {topo.terminal: (np.zeros(arrays.n), arrays.loss[topo.terminal])}
    for s in reversed(topo.topological_order):
        if s in policy.nodes and all(t in cont for t in topo.targets(s)):
            cont[s] = _node_continuation(policy, policy.nodes[s], arrays, cont)
    return cont


def _action_arrays(topo: Topology, node, arrays, cont):
    acts = topo.actions(node)
    T = np.empty((arrays.n, len(acts)))
    Ls = np.empty((arrays.n, len(acts)), dtype=np.int64)
    for j, a in enumerate(acts):
        if a == EXIT:
            T[:, j] = 0.0
            Ls[:, j] = arrays.loss[node]
        else:
            if a not in cont:
                raise UntrainedDownstream(f"decision node {a!r} is not trained")
            T[:, j] = topo.stage_cost[a] + cont[a][0]
            Ls[:, j] = cont[a][1]
    return T, Ls


def _node_continuation(policy, pn, arrays, cont):
    T, Ls = _action_arrays(policy.topology, pn.node, arrays, cont)
    dec = pn.decide(arrays.mf[pn.node], arrays.entropy[pn.node], policy.live_mask(pn.node))
    rows = np.arange(arrays.n)
    return pn.overhead + T[rows, dec], Ls[rows, dec]


def cost_matrix(policy: TrainedPolicy, node, dataset: TraceDataset, lam: float):
    """``(costs, times)`` arrays of shape (n, n_actions) for every example at ``node``."""
    arrays = dataset.arrays
    T, Ls = _action_arrays(policy.topology, node, arrays, _continuations(policy, arrays))
    return _costs(T, Ls, arrays.loss[policy.topology.terminal], lam), T


def _costs(T, Ls, terminal_loss, lam):
    return T + lam * np.maximum(Ls - terminal_loss[:, None], 0)


def routed_cost(pn: PolicyNode, policy: TrainedPolicy, dataset: TraceDataset, lam: float) -> float:
    """Mean cost of the actions ``pn`` picks on ``dataset``, plus its overhead."""
    C, _ = cost_matrix(policy, pn.node, dataset, lam)
    arrays = dataset.arrays
    dec = pn.decide(arrays.mf[pn.node], arrays.entropy[pn.node], policy.live_mask(pn.node))
    return float(C[np.arange(arrays.n), dec].mean()) + pn.overhead


def candidate_nodes(policy, node, dataset, lam, overhead_spec=OverheadSpec(), train_config=TrainConfig(), _cont=None):
    """All candidate policies for ``node`` with their training objective.

    Returns a list of ``(objective, PolicyNode)`` in preference order for
    ties: constants by increasing mean time, then the linear policy.
    """
    topo, arrays = policy.topology, dataset.arrays
    acts = topo.actions(node)
    cont = _continuations(policy, arrays) if _cont is None else _cont
    T, Ls = _action_arrays(topo, node, arrays, cont)
    C = _costs(T, Ls, arrays.loss[topo.terminal], lam)
    out = []
    mean_T = T.mean(axis=0)
    for j in sorted(range(len(acts)), key=lambda j: (mean_T[j], j)):
        out.append((float(C[:, j].mean()), ConstantAction(node=node, actions=acts, action=acts[j])))
    if len(acts) < 2:
        return out
    X = arrays.mf[node]
    overhead = overhead_spec.linear_overhead(node, topo)
    try:
        if len(acts) == 2:
            # pseudo-label: cheaper action; equal cost goes to the faster one
            pick1 = (C[:, 1] < C[:, 0]) | ((C[:, 1] == C[:, 0]) & (T[:, 1] < T[:, 0]))
            y = np.where(pick1, 1.0, -1.0)
            model = fit_weighted_binary(X, y, np.abs(C[:, 1] - C[:, 0]), train_config, acts)
            pn = LinearBinary(node=node, actions=acts, overhead=overhead, model=model)
        else:
            model = fit_cost_sensitive(X, C, train_config, acts)
            pn = LinearMultiAction(node=node, actions=acts, overhead=overhead, model=model)
    except AllZeroImportance:
        return out
    dec = pn.decide(X, arrays.entropy[node])
    out.append((float(C[np.arange(arrays.n), dec].mean()) + overhead, pn))
    return out


def train_node(policy, node, dataset, lam, overhead_spec=OverheadSpec(), train_config=TrainConfig(), _cont=None) -> PolicyNode:
    cands = candidate_nodes(policy, node, dataset, lam, overhead_spec, train_config, _cont)
    best = min(range(len(cands)), key=lambda i: (cands[i][0], i))
    return cands[best][1]


def train_bottom_up(dataset: TraceDataset, lam: float, overhead_spec: OverheadSpec = OverheadSpec(),
                    train_config: TrainConfig = TrainConfig(), topology: Topology | None = None) -> TrainedPolicy:
    """Train every decision node, deepest first, then prune unused stages."""
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    topo = dataset.topology if topology is None else topology
    if topo is not dataset.topology and topo.digest != dataset.topology.digest:
        raise ValidationError("dataset was built for a different topology")
    policy = TrainedPolicy(topo, {}, float(lam), dataset.loss_spec)
    arrays = dataset.arrays
    cont = {topo.terminal: (np.zeros(arrays.n), arrays.loss[topo.terminal])}
    remaining = set(topo.decision_nodes)
    while remaining:
        ready = [s for s in remaining if all(t in cont for t in topo.targets(s))]
        if not ready:
            raise CyclicTopology("no trainable decision node; is the graph cyclic?")
        node = max(ready, key=lambda s: (topo.depth[s], topo.stages.index(s)))
        pn = train_node(policy, node, dataset, lam, overhead_spec, train_config, _cont=cont)
        policy = policy.with_node(pn)
        cont[node] = _node_continuation(policy, pn, arrays, cont)
        remaining.discard(node)
    return prune_unused(policy, dataset)


def prune_unused(policy: TrainedPolicy, dataset: TraceDataset) -> TrainedPolicy:
    """Drop stages no example of ``dataset`` is routed to from the live set."""
    missing = [s for s in policy.topology.decision_nodes if s not in policy.nodes]
    if missing:
        raise MissingPolicyNode(f"untrained decision nodes {missing}")
    sim = simulate(policy, dataset)
    unused = {s for s, v in zip(policy.topology.stages, sim.visits) if v == 0}
    return TrainedPolicy(policy.topology, policy.nodes, policy.lam, policy.loss_spec,
                         frozenset(policy.pruned | unused), policy.training_order)
