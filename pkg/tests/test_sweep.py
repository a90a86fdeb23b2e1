import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adacascade.exceptions import IoFailure, NoFeasiblePoint, ValidationError
from adacascade.sweep import (
    REFERENCE_TERMINAL_COST,
    SweepConfig,
    SweepResult,
    default_lambda_grid,
    emit_report,
    pareto_filter,
    read_curve,
    run_sweep,
    select_operating_point,
)
from adacascade.traces import reference_topology

TEN = tuple(float(v) for v in np.geomspace(0.5, 300, 10))


@pytest.fixture(scope="module")
def small_sweep(small_reference):
    return run_sweep(small_reference, config=SweepConfig(lambda_values=TEN, tolerance=0.02, budget=1.0))


@pytest.fixture(scope="module")
def reference_sweep(reference):
    return run_sweep(reference)


def _dominates(a, b):
    return a[0] <= b[0] and a[1] <= b[1] and a != b


class TestGrid:
    def test_default_grid(self):
        g = default_lambda_grid(reference_topology())
        assert len(g) == 30 and g[0] == 0.0
        scale = 2.86 / REFERENCE_TERMINAL_COST
        assert g[1] == pytest.approx(1e-4 * scale) and g[-1] == pytest.approx(0.1 * scale)
        assert all(a < b for a, b in zip(g, g[1:]))

    @pytest.mark.parametrize("kw", [{"lambda_values": []}, {"lambda_values": [-1.0]}, {"budget": 0.0},
                                    {"tolerance": -0.1}, {"lambda_values": [float("inf")]}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValidationError):
            SweepConfig(**kw)


class TestRunSweep:
    def test_lambda_zero_only(self, small_reference):
        res = run_sweep(small_reference, config=SweepConfig(lambda_values=[0.0]))
        assert len(res.points) == 1
        assert res.points[0].test.exit_fractions["small"] == 1.0

    def test_huge_lambda(self, small_reference):
        scale = 2.86 / REFERENCE_TERMINAL_COST
        res = run_sweep(small_reference, config=SweepConfig(lambda_values=[1e6 * scale]))
        assert res.points[0].train.excess_error <= 1 / res.n_train

    def test_no_harm_every_point(self, small_sweep):
        for p in small_sweep.points:
            assert p.train.mean_time <= small_sweep.points[0].train.terminal_time

    def test_pareto_trend_in_lambda(self, reference):
        res = run_sweep(reference, config=SweepConfig(lambda_values=TEN))
        idx = [i for i in res.pareto if i < len(res.points)]
        by_lam = sorted(idx, key=lambda i: res.points[i].lam)
        times = [res.points[i].test.mean_time for i in by_lam]
        errors = [res.points[i].test.topk_error for i in by_lam]
        assert len(by_lam) >= 3
        assert all(a <= b for a, b in zip(times, times[1:]))
        assert all(a >= b for a, b in zip(errors, errors[1:]))

    def test_baselines_attached(self, small_sweep):
        systems = {b.system for b in small_sweep.baselines}
        assert systems == {"terminal", "oracle", "single", "myopic", "uniform"}
        assert len(small_sweep.baseline("single")) == 3

    def test_pareto_contains_terminal_when_undominated(self, small_sweep):
        pts = [(p.test.mean_time, p.test.topk_error) for p in small_sweep.points]
        term = (small_sweep.terminal.mean_time, small_sweep.terminal.topk_error)
        undominated = not any(_dominates(p, term) for p in pts)
        assert (len(pts) in small_sweep.pareto) == undominated

    def test_save_load(self, small_sweep, tmp_path):
        small_sweep.save(tmp_path / "s.json")
        back = SweepResult.load(tmp_path / "s.json")
        assert back.to_dict() == small_sweep.to_dict()

    def test_load_errors(self, tmp_path):
        with pytest.raises(IoFailure):
            SweepResult.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{}", encoding="utf-8")
        with pytest.raises(ValidationError):
            SweepResult.load(tmp_path / "bad.json")


class TestPareto:
    def test_examples(self):
        assert pareto_filter([(1, 0.5), (2, 0.4), (3, 0.45)]) == [0, 1]
        assert pareto_filter([(1, 0.5)]) == [0]
        assert pareto_filter([(1, 0.5), (1, 0.5)]) == [0]

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=30))
    def test_maximal_nondominated(self, pts):
        kept = pareto_filter(pts)
        chosen = [pts[i] for i in kept]
        assert [p[0] for p in chosen] == sorted(p[0] for p in chosen)
        for a in chosen:
            assert not any(_dominates(b, a) for b in pts)
        for i, p in enumerate(pts):
            if i not in kept:
                assert any(_dominates(c, p) or c == p for c in chosen)
        assert pareto_filter(pts) == kept


class TestOperatingPoint:
    def test_tolerance_one_percent(self, reference_sweep):
        op = select_operating_point(reference_sweep, tolerance=0.01)
        assert op.metrics.excess_error <= 0.01
        assert op.metrics.speedup >= 1.8

    def test_budget_at_terminal_time(self, small_sweep):
        op = select_operating_point(small_sweep, budget=small_sweep.terminal.mean_time)
        assert op.metrics.mean_time <= small_sweep.terminal.mean_time
        feas = [p.test for p in small_sweep.points if p.test.mean_time <= small_sweep.terminal.mean_time]
        assert op.metrics.topk_error == min([m.topk_error for m in feas] + [small_sweep.terminal.topk_error])

    def test_budget_below_cheapest(self, small_sweep):
        with pytest.raises(NoFeasiblePoint):
            select_operating_point(small_sweep, budget=0.2)

    def test_needs_exactly_one_constraint(self, small_sweep):
        with pytest.raises(ValidationError):
            select_operating_point(small_sweep)
        with pytest.raises(ValidationError):
            select_operating_point(small_sweep, budget=1.0, tolerance=0.01)


class TestReport:
    def test_files_and_round_trip(self, small_sweep, tmp_path):
        paths = emit_report(small_sweep, tmp_path)
        rows = read_curve(paths["curve"])
        assert len(rows) == 2 * len(small_sweep.points) + len(small_sweep.baselines)
        first = small_sweep.points[0]
        assert rows[0]["lambda"] == first.lam and rows[0]["split"] == "train"
        assert rows[0]["mean_time"] == first.train.mean_time
        assert rows[1]["excess"] == first.test.excess_error
        assert rows[1]["speedup"] == first.test.speedup
        summary = json.loads(paths["summary"].read_text(encoding="utf-8"))
        assert set(summary["operating_points"]) == {"budget", "tolerance"}
        assert summary["agreement"] and abs(sum(r["fraction"] for r in summary["agreement"]) - 1) < 1e-12

    def test_usage_sums(self, small_sweep, tmp_path):
        paths = emit_report(small_sweep, tmp_path)
        groups = {}
        with open(paths["usage"], encoding="utf-8", newline="") as fh:
            for r in csv.DictReader(fh):
                g = groups.setdefault((r["system"], r["param"], r["split"]), [0.0, 0.0])
                g[0] += float(r["exit_fraction"])
                g[1] += float(r["time_share"])
        for ef, ts in groups.values():
            assert abs(ef - 1) <= 1e-9 and abs(ts - 1) <= 1e-9

    def test_baseline_only(self, small_sweep, tmp_path):
        empty = SweepResult(small_sweep.config, small_sweep.topology, small_sweep.loss_k, small_sweep.n_train,
                            small_sweep.n_test, (), small_sweep.baselines, small_sweep.agreement)
        rows = read_curve(emit_report(empty, tmp_path)["curve"])
        assert len(rows) == len(small_sweep.baselines)
        assert all(r["system"] != "policy" for r in rows)

    def test_unwritable(self, small_sweep, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(IoFailure):
            emit_report(small_sweep, blocker / "sub")
