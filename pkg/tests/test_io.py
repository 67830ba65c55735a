import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kochobstacle.config import ConfigError, parse_config
from kochobstacle.expressions import ExpressionError, parse_expression
from kochobstacle.fileio import (FileFormatError, read_mesh, read_solution, svg_domain, svg_mesh,
                                 write_mesh, write_solution, write_trace, write_vertices)
from kochobstacle.fibers import build_fibers


# ----------------------------------------------------------- expressions

@pytest.mark.parametrize("text,fn", [
    ("0.3*x1", lambda x, y: 0.3 * x),
    ("x1^2 + 2*x2", lambda x, y: x ** 2 + 2 * y),
    ("-x1**3", lambda x, y: -x ** 3),
    ("sin(pi*x1)*cos(x2) - abs(x1 - 0.5)", lambda x, y: math.sin(math.pi * x) * math.cos(y) - abs(x - 0.5)),
    ("min(x1, x2, 0.2) + max(x1, e)", lambda x, y: min(x, y, 0.2) + max(x, math.e)),
    ("1/(1 + x1)", lambda x, y: 1 / (1 + x)),
    ("0.2 - 0.5*((x1-0.5)^2 + (x2-0.3)^2)^0.5", lambda x, y: 0.2 - 0.5 * math.hypot(x - 0.5, y - 0.3)),
])
def test_expression_values(text, fn, rng):
    pts = rng.uniform(-1, 1, size=(20, 2))
    got = parse_expression(text)(pts)
    want = np.array([fn(x, y) for x, y in pts])
    assert np.allclose(got, want, rtol=1e-14, atol=1e-15)


def test_constant_expression_broadcasts():
    assert np.array_equal(parse_expression("2.5")(np.zeros((4, 2))), np.full(4, 2.5))


@pytest.mark.parametrize("text", ["__import__('os')", "x1.real", "lambda: 1", "x1 // 2",
                                  "1 if x1 else 2", "sin(x1, x2)", "min(x1)", "foo(x1)", "x3",
                                  "'a'", "", "x1 +", "True", "[x1]", "sin(x=1)", "x1 % 2"])
def test_expression_rejects(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


# -------------------------------------------------------------- fileio

def test_mesh_round_trip(tmp_path, mesh_n2):
    path = tmp_path / "mesh.txt"
    write_mesh(path, mesh_n2)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, mesh_n2.vertices)
    assert np.array_equal(back.triangles, mesh_n2.triangles)
    assert np.array_equal(back.boundary_nodes, mesh_n2.boundary_nodes)
    assert back.h_max == mesh_n2.h_max


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=40))
def test_solution_round_trip_bitwise(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("s") / "u.txt"
    v = np.array(vals)
    write_solution(path, v)
    assert read_solution(path).tobytes() == v.tobytes()


def test_combined_mesh_and_values(tmp_path, mesh_n2, rng):
    u = rng.normal(size=mesh_n2.n_nodes)
    path = tmp_path / "m.txt"
    write_mesh(path, mesh_n2, u)
    assert np.array_equal(read_mesh(path).triangles, mesh_n2.triangles)
    assert np.array_equal(read_solution(path, mesh_n2.n_nodes), u)


def test_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("v 0 0\nz 1\n")
    with pytest.raises(FileFormatError, match="unknown record"):
        read_mesh(p)
    p.write_text("v 0\n")
    with pytest.raises(FileFormatError, match="malformed"):
        read_mesh(p)
    p.write_text("u 0 1.0\nu 2 3.0\n")
    with pytest.raises(FileFormatError, match="outside"):
        read_solution(p)
    with pytest.raises(FileFormatError, match="missing"):
        read_solution(p, 3)
    p.write_text("v 0 0\nv 1 0\nv 0 1\nt 0 1 2\nb 0\n")
    with pytest.raises(FileFormatError, match="boundary"):
        read_mesh(p)


def test_svg_and_text_outputs(tmp_path, domain_n2, mesh_n2):
    svg_domain(tmp_path / "d.svg", domain_n2.boundary, build_fibers(domain_n2))
    svg_mesh(tmp_path / "m.svg", mesh_n2)
    svg_mesh(tmp_path / "u.svg", mesh_n2, mesh_n2.vertices[:, 0])
    for name in ("d.svg", "m.svg", "u.svg"):
        text = (tmp_path / name).read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert (tmp_path / "d.svg").read_text().count("<polygon") == 1 + 2 * 48
    write_vertices(tmp_path / "v.txt", domain_n2.boundary)
    assert np.array_equal(np.loadtxt(tmp_path / "v.txt"), domain_n2.boundary)
    write_trace(tmp_path / "t.csv", [(0, 1.0, 0.5, 0.0, 2.0), (1, 0.5, 0.1, 0.25, 1.5)])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,energy,projected_gradient,step,max_element_gradient"
    assert lines[2] == "1,0.5,0.10000000000000001,0.25,1.5"


# -------------------------------------------------------------- config

BASIC = """
[geometry]
base = triangle
alpha = 3
n = 2
h_max = 0.05

[problem]
mode = solve
p = 3
q = 2
k = 0
f = 80*sin(2*pi*x1)
g = 0.3*x1
phi1 = 0.2 - 0.5*((x1-0.5)^2 + (x2-0.288675134594813)^2)^0.5
phi2 = 0.4
L = 0.3

[solver]
tol = 1e-8

[output]
directory = out
formats = csv, solution
"""


def test_parse_basic(tmp_path):
    cfg = parse_config(BASIC, tmp_path / "run.ini")
    assert cfg.geometry.levels == (2,) and cfg.geometry.alpha == 3.0
    assert cfg.problem.mode == "solve" and cfg.problem.L == 0.3
    assert cfg.output.directory == Path("out")
    assert parse_config(BASIC, overrides={"out": "elsewhere"}).output.directory == Path("elsewhere")
    assert cfg.output.formats == ("csv", "solution")
    inst = cfg.problem.instance()
    assert inst.p == 3 and inst.g(np.array([[1.0, 0.0]]))[0] == pytest.approx(0.3)
    assert cfg.problem.instance(p=8).p == 8


@pytest.mark.parametrize("edit,key,fragment", [
    (("p = 3", "p = 2"), "p", "p > q"),
    (("q = 2", "q = 1.5"), "q", "q >= 2"),
    (("mode = solve", "mode = explode"), "mode", "mode must be"),
    (("g = 0.3*x1", "g = 0.3*y"), "g", "unknown name"),
    (("tol = 1e-8", "tol = -1"), "", "tol"),
    (("tol = 1e-8", "speed = 3"), "speed", "unknown solver option"),
    (("alpha = 3", "alpha = 5"), "alpha", ""),
    (("n = 2", "levels = 1-3"), "levels", "single level"),
    (("h_max = 0.05", "h_max = 0"), "h_max", "positive"),
    (("formats = csv, solution", "formats = csv, pdf"), "formats", ""),
])
def test_config_errors(edit, key, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(BASIC.replace(*edit))
    err = info.value
    assert fragment in str(err)
    if key:
        assert err.key == key
        assert err.line is not None and BASIC.replace(*edit).splitlines()[err.line - 1].startswith(key)


def test_config_unknown_section_and_syntax():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(BASIC + "\n[extra]\na = 1\n")
    with pytest.raises(ConfigError, match="parse error"):
        parse_config("no section header\n")


def test_config_levels_and_bases():
    cfg = parse_config(BASIC.replace("mode = solve", "mode = n-sweep").replace("n = 2", "levels = 1-3"))
    assert cfg.geometry.levels == (1, 2, 3)
    cfg = parse_config(BASIC.replace("mode = solve", "mode = n-sweep").replace("n = 2", "levels = 3, 1"))
    assert cfg.geometry.levels == (1, 3)
    for text, m in (("square", 4), ("hexagon", 6), ("polygon:5", 5)):
        assert len(parse_config(BASIC.replace("base = triangle", f"base = {text}")).geometry.base) == m
    cfg = parse_config(BASIC.replace("base = triangle", "base = 0,0; 2,0; 2,2; 0,2"))
    assert np.array_equal(cfg.geometry.base, [[0, 0], [2, 0], [2, 2], [0, 2]])
    cfg = parse_config(BASIC.replace("phi2 = 0.4", "phi2 = none"))
    assert cfg.problem.phi2 is None
