"""File formats."""

import numpy as np
import pytest

from vreml import io
from vreml.errors import DimensionMismatch, InputError, InvalidGraph
from vreml.graph import AdjacencyGraph, lattice_graph
from vreml.model import load_model

from conftest import LATTICE5, random_connected_graph


def test_adjacency_round_trip(tmp_path, rng):
    g = AdjacencyGraph.from_edges(30, random_connected_graph(rng, 30))
    io.write_adjacency(tmp_path / "a.mtx", g)
    back = io.read_adjacency(tmp_path / "a.mtx")
    assert back.n == g.n and np.array_equal(back.edges, g.edges)


def test_adjacency_file_is_canonical(tmp_path):
    io.write_adjacency(tmp_path / "a.mtx", lattice_graph(2))
    assert (tmp_path / "a.mtx").read_text().splitlines() == [
        "%%MatrixMarket matrix coordinate pattern symmetric", "4 4 4", "2 1", "3 1", "4 2", "4 3"]


def test_edge_list_csv(tmp_path):
    (tmp_path / "e.csv").write_text("i,j\n0,1\n1,2\n2,0\n")
    g = io.read_adjacency(tmp_path / "e.csv")
    assert g.n == 3 and g.num_edges == 3
    (tmp_path / "f.csv").write_text("# n=5\ni,j\n0,1\n1,2\n")
    assert io.read_adjacency(tmp_path / "f.csv").n == 5


@pytest.mark.parametrize("body, err", [
    ("%%MatrixMarket matrix coordinate real general\n2 3 1\n1 2 1\n", InvalidGraph),
    ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 2 2.5\n2 1 2.5\n", InvalidGraph),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 1\n", InvalidGraph),
    ("%%MatrixMarket matrix coordinate real general\n3 3 1\n1 2 1\n", InvalidGraph),
    ("not a matrix market file\n", InputError),
])
def test_bad_matrix_market(tmp_path, body, err):
    (tmp_path / "bad.mtx").write_text(body)
    with pytest.raises(err):
        io.read_adjacency(tmp_path / "bad.mtx")


def test_bad_edge_list(tmp_path):
    (tmp_path / "e.csv").write_text("a,b\n0,1\n")
    with pytest.raises(InputError, match="'i'"):
        io.read_adjacency(tmp_path / "e.csv")
    (tmp_path / "e.csv").write_text("i,j\n0,1.5\n")
    with pytest.raises(InvalidGraph):
        io.read_adjacency(tmp_path / "e.csv")


def test_model_round_trip(tmp_path, rng):
    x = np.column_stack([np.ones(12), rng.standard_normal(12)])
    m = load_model(rng.standard_normal(12), x, ("intercept", "z"))
    io.write_model(tmp_path / "y.csv", tmp_path / "x.csv", m)
    back = io.read_model(tmp_path / "y.csv", tmp_path / "x.csv")
    assert back.columns == m.columns
    assert np.array_equal(back.y, m.y) and np.array_equal(back.x, m.x)


def test_model_file_errors(tmp_path):
    (tmp_path / "y.csv").write_text("value\n1\n2\n")
    with pytest.raises(InputError, match="missing required column 'y'"):
        io.read_response(tmp_path / "y.csv")
    (tmp_path / "y.csv").write_text("y\n1\nabc\n")
    with pytest.raises(InputError, match="non-numeric"):
        io.read_response(tmp_path / "y.csv")
    (tmp_path / "x.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(InputError, match="line 3"):
        io.read_design(tmp_path / "x.csv")
    (tmp_path / "y.csv").write_text("y\n1\n2\n3\n")
    (tmp_path / "x.csv").write_text("a\n1\n2\n")
    with pytest.raises(DimensionMismatch):
        io.read_model(tmp_path / "y.csv", tmp_path / "x.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(InputError, match="empty"):
        io.read_response(tmp_path / "empty.csv")


def test_cells_table(tmp_path):
    (tmp_path / "c.csv").write_text("x,y,count,library_size\n0,0,1,10\n1,0,2,20\n")
    cells = io.read_cells(tmp_path / "c.csv")
    assert len(cells) == 2 and np.array_equal(cells.count, [1, 2])
    (tmp_path / "c.csv").write_text("x,y,counts,library_size\n0,0,1,10\n")
    with pytest.raises(InputError, match="'count'"):
        io.read_cells(tmp_path / "c.csv")


def test_bundled_fixture_loads():
    g = io.read_adjacency(LATTICE5 / "adjacency.mtx")
    m = io.read_model(LATTICE5 / "response.csv", LATTICE5 / "design.csv")
    assert g.n == m.n == 25 and g.num_edges == 40
    assert m.columns == ("intercept", "row", "col")


def test_sha256_is_stable(tmp_path):
    (tmp_path / "f").write_bytes(b"abc")
    assert io.sha256(tmp_path / "f") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
