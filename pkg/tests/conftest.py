import numpy as np
import pytest

from lemflow.grid import Topology

# 10-node worked example, labels 1..10. Solid edges are the D8 receiver
# links (length 1); dashed edges are longer (length 3), so routing along
# them is never steepest.
SOLID = [(1, 2), (3, 2), (2, 5), (6, 5), (8, 5), (4, 7), (9, 7), (7, 6), (10, 8)]
DASHED = [(3, 6), (7, 8), (4, 1), (4, 3), (9, 10), (4, 9), (9, 8), (3, 7), (1, 3), (2, 6), (6, 8)]
EXAMPLE_ELEV = np.array([3, 2, 3, 4, 1, 2, 3, 2, 4, 3], dtype=np.float64)


def example_topology() -> Topology:
    adj = {c: {} for c in range(10)}
    for edges, length in ((SOLID, 1.0), (DASHED, 3.0)):
        for a, b in edges:
            adj[a - 1][b - 1] = length
            adj[b - 1][a - 1] = length
    nbrs = [sorted(adj[c]) for c in range(10)]
    dists = [[adj[c][m] for m in nbrs[c]] for c in range(10)]
    return Topology.from_adjacency(nbrs, dists, boundary=[4])


@pytest.fixture
def example():
    return example_topology(), EXAMPLE_ELEV.copy()


def to_labels(idx):
    return [int(i) + 1 for i in idx]


def random_elev(rng, width, height):
    return rng.random(width * height)


def pytest_terminal_summary(terminalreporter):
    """Print measured values recorded by the acceptance suite."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            props = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
            lines.append(f"{outcome.upper():6} {rep.nodeid.split('::')[-1]}: {props}")
    if lines:
        terminalreporter.section("acceptance measurements")
        for line in sorted(lines, key=lambda l: l.split()[1]):
            terminalreporter.write_line(line)
