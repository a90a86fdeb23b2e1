import pytest

from adacascade.traces import (
    EXIT,
    ExampleTrace,
    LossSpec,
    StageRecord,
    Topology,
    TraceDataset,
    generate_synthetic,
    reference_config,
    split,
)


def chain(costs, names=None):
    names = names or [f"s{i}" for i in range(len(costs))]
    edges = {a: (EXIT, b) for a, b in zip(names, names[1:])}
    return Topology(tuple(names), edges, dict(zip(names, costs)), names[-1])


def trace(example_id, y, records):
    """records: stage -> (topk, mf, entropy); mf may be a scalar."""
    stages = {}
    for s, (topk, mf, ent) in records.items():
        mf = (mf,) if isinstance(mf, (int, float)) else tuple(mf)
        stages[s] = StageRecord(tuple(topk), mf, ent)
    return ExampleTrace(example_id, y, stages)


def dataset(topology, rows, k=1):
    """rows: list of (y, {stage: (topk, mf, entropy)})."""
    return TraceDataset(topology, tuple(trace(f"e{i}", y, r) for i, (y, r) in enumerate(rows)), LossSpec(k))


@pytest.fixture(scope="session")
def reference():
    return generate_synthetic(reference_config())


@pytest.fixture(scope="session")
def reference_halves(reference):
    return split(reference, 0.5, 0)


@pytest.fixture(scope="session")
def small_reference():
    return generate_synthetic(reference_config(n=1000, seed=3))


ACCEPTANCE_LINES = []


def record_verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
