import numpy as np
import pytest

from degen.problem import ProblemError, fixture_path, list_fixtures, load_problem, parse_problem

GOOD = """\
# a comment
dim = 2
[fields]
X0 = "0", "0"
X1 = "1", "0"
X2 = "0", "x"
[coeff]
c = "-1"
[data]
f = "1"
g = "x*y"
[domain]
phi = "1 - x^2 - y^2"
"""


def test_parse_minimal():
    P = parse_problem(GOOD)
    assert P.dim == 2 and P.n == 2
    assert P.surface is None
    assert P.inside(np.array([[0.0, 0.0], [2.0, 0.0]])).tolist() == [True, False]
    box = P.bounding_box()
    # ray-marched fallback: encloses the disk with a modest pad
    assert np.all(box[:, 0] <= -1) and np.all(box[:, 1] >= 1)
    assert np.all(np.abs(box) <= 1.25)


def test_dotted_keys_equal_sections():
    dotted = GOOD.replace("[fields]\n", "").replace("X0", "fields.X0").replace("X1 =", "fields.X1 =")
    dotted = dotted.replace("X2 =", "fields.X2 =")
    P, Q = parse_problem(GOOD), parse_problem(dotted)
    assert P.fields == Q.fields


def test_dimension_mismatch_reports_line():
    bad = GOOD.replace('X2 = "0", "x"', 'X2 = "0", "x", "y"')
    with pytest.raises(ProblemError) as info:
        parse_problem(bad)
    assert info.value.line == 6
    assert "dimension mismatch" in str(info.value)


def test_expression_error_reports_column():
    bad = GOOD.replace('c = "-1"', 'c = "-1 *"')
    with pytest.raises(ProblemError) as info:
        parse_problem(bad)
    assert info.value.line == 8 and info.value.column == 10


@pytest.mark.parametrize("edit", [
    ('dim = 2', 'dim = two'),
    ('[domain]\nphi = "1 - x^2 - y^2"\n', ''),
    ('X2 = "0", "x"', 'X3 = "0", "x"'),
    ('X0 = "0", "0"', 'X0 = 0, 0'),
    ('dim = 2', 'dim = 2\ndim = 2'),
])
def test_rejects_malformed(edit):
    with pytest.raises(ProblemError):
        parse_problem(GOOD.replace(*edit))


def test_missing_file():
    with pytest.raises(ProblemError):
        load_problem("/nonexistent/problem.prob")


def test_all_fixtures_load():
    names = list_fixtures()
    assert {"poisson_disk", "kusuoka_stroock_p05", "grushin_disk", "disk_radial"} <= set(names)
    for name in names:
        P = load_problem(fixture_path(name))
        assert P.name == name
        assert P.inside(P.interior_center()[None])[0]


def test_boundary_samples_on_boundary():
    P = load_problem(fixture_path("poisson_disk"))
    pts = P.boundary_samples(50)
    assert len(pts) == 50
    assert np.all(np.abs(P.phi_values(pts)) <= 1e-12)
    grid = P.closure_grid(9)
    assert np.all(P.in_closure(grid))
