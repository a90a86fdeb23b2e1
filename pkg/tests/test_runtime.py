import math

import numpy as np
import pytest

from adacascade.exceptions import MissingPolicyNode, MissingStageRecord
from adacascade.policy import ConstantAction, EntropyThreshold, TrainedPolicy, constant_policy, train_bottom_up
from adacascade.runtime import (
    StageEvaluator,
    StageOutput,
    compare_terminal_only,
    evaluate_dataset,
    route_example,
    route_with_evaluator,
    simulate,
)
from adacascade.traces import EXIT, SynthConfig, generate_synthetic, reference_topology

from conftest import chain, dataset, trace


def always_forward(node, actions, target, overhead):
    return EntropyThreshold(node=node, actions=actions, overhead=overhead, threshold=-1.0, forward=target)


@pytest.fixture(scope="module")
def trained(small_reference):
    return train_bottom_up(small_reference, 25.0)


class TestRouteExample:
    def test_root_exit(self):
        topo = chain([1.0, 10.0])
        pol = constant_policy(topo, lambda s: EXIT)
        out = route_example(pol, trace("a", 1, {"s0": ([1], 0.0, 0.2), "s1": ([2], 0.0, 0.2)}))
        assert out.path == ("s0",) and out.total_time == 1.0 and out.exit_stage == "s0" and out.loss == 0

    def test_forward_with_overhead(self):
        topo = chain([1.0, 10.0])
        pol = TrainedPolicy(topo, {"s0": always_forward("s0", (EXIT, "s1"), "s1", 0.1)})
        out = route_example(pol, trace("a", 1, {"s0": ([1], 0.0, 0.2), "s1": ([2], 0.0, 0.2)}))
        assert out.path == ("s0", "s1") and out.total_time == pytest.approx(11.1) and out.loss == 1

    def test_dag_skip(self, small_reference):
        topo = small_reference.topology
        pol = constant_policy(topo, {"small": "large", "medium": EXIT}.get)
        out = route_example(pol, small_reference.examples[0])
        assert out.path == ("small", "large")
        assert out.total_time == 0.25 + 2.86

    def test_errors(self):
        topo = chain([1.0, 10.0])
        with pytest.raises(MissingPolicyNode):
            route_example(TrainedPolicy(topo, {}), trace("a", 1, {"s0": ([1], 0.0, 0.2), "s1": ([2], 0.0, 0.2)}))
        pol = constant_policy(topo, lambda s: "s1")
        with pytest.raises(MissingStageRecord):
            route_example(pol, trace("a", 1, {"s0": ([1], 0.0, 0.2)}))

    def test_additivity(self, trained, small_reference):
        topo = trained.topology
        for ex in small_reference.examples[:300]:
            out = route_example(trained, ex)
            expected = math.fsum(topo.stage_cost[s] for s in out.path)
            expected += math.fsum(trained.nodes[s].overhead for s in out.path if s != topo.terminal)
            assert out.total_time == pytest.approx(expected, rel=1e-12, abs=0)
            assert out.total_time >= topo.stage_cost[topo.root]
            assert out.exit_stage == out.path[-1]

    def test_deterministic(self, trained, small_reference):
        ex = small_reference.examples[7]
        assert route_example(trained, ex) == route_example(trained, ex)

    def test_custom_evaluator(self, trained, small_reference):
        class DictEvaluator(StageEvaluator):
            def __init__(self, table):
                self.table = table

            def evaluate(self, stage, handle):
                rec = self.table[handle][stage]
                return StageOutput(rec.topk, rec.mf, rec.entropy, trained.topology.stage_cost[stage])

        table = {ex.example_id: ex.stages for ex in small_reference.examples[:100]}
        ev = DictEvaluator(table)
        for ex in small_reference.examples[:100]:
            live = route_with_evaluator(trained, ev, ex.example_id, ex.example_id, ex.true_label, 5)
            assert live == route_example(trained, ex)


class TestSimulate:
    def test_matches_scalar_router(self, trained, small_reference):
        sim = simulate(trained, small_reference)
        stages = trained.topology.stages
        for i, ex in enumerate(small_reference.examples):
            out = route_example(trained, ex)
            assert sim.time[i] == out.total_time
            assert stages[sim.exit_index[i]] == out.exit_stage

    def test_charge_rows_sum_to_time(self, trained, small_reference):
        sim = simulate(trained, small_reference)
        assert np.allclose(sim.charge.sum(axis=1), sim.time, rtol=1e-12)


class TestMetrics:
    def test_terminal_only(self, small_reference):
        m = compare_terminal_only(small_reference)
        assert m.mean_time == 0.25 + 2.86
        assert m.excess_error == 0.0 and m.signed_excess == 0.0
        assert m.exit_fractions["large"] == 1.0 and m.speedup == 1.0

    def test_chain_terminal_time(self):
        topo = chain([1.0, 10.0])
        ds = dataset(topo, [(1, {"s0": ([1], 0.0, 0.1), "s1": ([1], 0.0, 0.1)})] * 3)
        m = compare_terminal_only(ds)
        assert m.mean_time == 11.0 and m.topk_error == 0.0

    def test_root_exit_on_all_correct(self):
        topo = reference_topology()
        ds = generate_synthetic(SynthConfig(topology=topo, agreement={frozenset(topo.stages): 1.0}, n=200, seed=4))
        m = evaluate_dataset(constant_policy(topo, lambda s: EXIT, ds.loss_spec), ds)
        assert m.topk_error == 0.0 and m.mean_time == 0.25
        assert compare_terminal_only(ds).topk_error == 0.0

    def test_mid_lambda_uses_several_stages(self, reference_halves):
        train, test = reference_halves
        m = evaluate_dataset(train_bottom_up(train, 25.0), test)
        assert sum(f > 0 for f in m.exit_fractions.values()) >= 2

    def test_invariants(self, trained, small_reference):
        m = evaluate_dataset(trained, small_reference)
        assert sum(m.exit_fractions.values()) == pytest.approx(1.0, abs=1e-12)
        assert sum(m.time_shares.values()) == pytest.approx(1.0, abs=1e-12)
        for e in (m.top1_error, m.topk_error, m.excess_error):
            assert 0.0 <= e <= 1.0
        assert m.excess_error >= m.signed_excess
        assert m.signed_excess == pytest.approx(m.topk_error - m.terminal_topk_error, abs=1e-12)
        assert m.mean_time <= compare_terminal_only(small_reference).mean_time

    def test_dict_round_trip(self, trained, small_reference):
        m = evaluate_dataset(trained, small_reference)
        assert type(m).from_dict(m.to_dict()) == m
