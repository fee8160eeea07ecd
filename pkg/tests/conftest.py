import numpy as np
import pytest
from hypothesis import settings

from ceql.complexmath import OperatorKind as Op
from ceql.graph import LayerSpec, build_network, default_library

settings.register_profile("ceql", deadline=None, max_examples=60)
settings.load_profile("ceql")


def affine_network(a: float, b: float):
    """Default-library network hand-wired to ``a*x1 + b``."""
    net = build_network(1, default_library(), True, seed=0)
    net.clear()
    bias1 = net.source_index(0, "bias")
    net.set_edge(0, bias1, 0, b)                      # layer-1 const column
    net.set_edge(1, net.source_index(1, "act", 0), 0, 1.0)
    net.set_edge(1, net.source_index(1, "input", 0), 0, a)
    net.set_edge(2, net.source_index(2, "act", 0), 0, 1.0)
    return net


def identity_network(w_in=1.0, w_out=1.0, input_dim=1):
    net = build_network(input_dim, [LayerSpec((Op.IDENTITY,))], skip_inputs=False, seed=0)
    net.clear()
    net.set_edge(0, 0, 0, w_in)
    net.set_edge(1, 0, 0, w_out)
    return net


def division_network(a: complex):
    """Const/identity feeders and one Divide node computing ``Re(1 / (x + a))``."""
    feed = LayerSpec((Op.CONSTANT, Op.CONSTANT, Op.IDENTITY))
    net = build_network(1, [feed, LayerSpec((), (Op.DIVIDE,))], skip_inputs=False, seed=0)
    net.clear()
    bias = net.source_index(0, "bias")
    net.set_edge(0, bias, 0, 1.0)      # constant 1
    net.set_edge(0, bias, 1, a)        # constant a
    net.set_edge(0, 0, 2, 1.0)         # x
    net.set_edge(1, 0, 0, 1.0)         # numerator 1
    net.set_edge(1, 2, 1, 1.0)         # denominator x ...
    net.set_edge(1, 1, 1, 1.0)         # ... + a
    net.set_edge(2, 0, 0, 1.0)
    return net


A_EDGE = (0, 1, 1)  # (block, row, column) of the weight holding ``a``


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
