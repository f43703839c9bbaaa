import os
import subprocess
import sys
from array import array

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lsmaudit import kernels

py = kernels.python_backend
compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="extension not built")


@st.composite
def graphs(draw, acyclic=True):
    n = draw(st.integers(1, 40))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=120))
    if acyclic:
        edges = [(min(a, b), max(a, b)) for a, b in edges if a != b]
    src = array("q", [a for a, _ in edges])
    dst = array("q", [b for _, b in edges])
    return n, src, dst


def is_topological(n, src, dst, order):
    pos = {v: i for i, v in enumerate(order)}
    return sorted(order) == list(range(n)) and all(pos[a] < pos[b] for a, b in zip(src, dst))


@given(graphs())
def test_topo_order_python(g):
    assert is_topological(*g, py.topo_order(*g))


@needs_compiled
@given(graphs(acyclic=False))
def test_backends_agree_on_topo_order(g):
    a, b = py.topo_order(*g), compiled.topo_order(*g)
    assert (a is None) == (b is None)
    if a is not None:
        assert is_topological(*g, b)


@needs_compiled
@given(graphs(acyclic=False), st.integers(1, 8), st.data())
def test_backends_agree_on_flow_pairs(g, objects, data):
    n, src, dst = g
    node_obj = array("q", [data.draw(st.integers(0, objects - 1)) for _ in range(n)])
    latest = array("q", [-1] * objects)
    for v in range(n):
        latest[node_obj[v]] = v
    assert py.flow_pairs(n, src, dst, node_obj, latest) == compiled.flow_pairs(n, src, dst, node_obj, latest)


@pytest.mark.parametrize("backend", [py] + ([compiled] if compiled else []), ids=lambda b: b.__name__)
def test_bad_edges(backend):
    with pytest.raises((IndexError, ValueError)):
        backend.topo_order(2, array("q", [0]), array("q", [5]))
    with pytest.raises(ValueError):
        backend.topo_order(2, array("q", [0, 1]), array("q", [1]))


def test_cycle_detected():
    assert py.topo_order(2, array("q", [0, 1]), array("q", [1, 0])) is None


def test_pure_fallback_selected_by_environment():
    env = dict(os.environ, LSMAUDIT_PURE="1")
    out = subprocess.run(
        [sys.executable, "-c", "from lsmaudit import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_is_default():
    assert kernels.BACKEND == "compiled"
