import csv
import warnings

import numpy as np
import numpy.testing as npt
import pytest

from amps.cutting import (
    Constrain,
    CutPlane,
    Force,
    ScriptError,
    advance_cut,
    count_components,
    cut_front,
    default_load,
    default_script,
    format_script,
    generate_beam,
    generate_brick,
    load_script,
    parse_script,
    run_script,
    save_script,
    summary_line,
    write_breakdown_csv,
    write_records_csv,
)
from amps.fem import build_dofmap

SKIP_WARN = "ignore:cut reached constrained node"


def full_cut(mesh, plane):
    front = cut_front(mesh, plane)
    events = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in range(front.shape[0]):
            mesh, ev = advance_cut(mesh, plane, t, front=front)
            events.append(ev)
    return mesh, events


def test_generate_beam_counts(beam4):
    assert beam4.n_vertices == 100
    assert beam4.n_tets == 288
    assert beam4.dirichlet.size == 75
    assert beam4.n_free == 225
    beam4.validate()
    with pytest.raises(ValueError):
        generate_beam(1)


def test_generate_brick_counts(brick0):
    assert brick0.n_vertices == 225
    assert brick0.n_free == 600
    npt.assert_allclose(brick0.coords.max(axis=0), [1.0, 1.0, 2.0])
    brick0.validate()
    assert generate_brick(4).n_vertices == 18081
    with pytest.raises(ValueError):
        generate_brick(-1)


def test_meshes_are_connected(beam4, brick0):
    assert count_components(beam4) == 1
    assert count_components(brick0) == 1


def test_cut_front_order(beam4):
    front = cut_front(beam4, CutPlane((1.0, 0.0, 0.0), 2.0))
    assert front.shape == (20,)
    c = beam4.coords[front]
    npt.assert_allclose(c[:, 0], 2.0)
    npt.assert_allclose(c[0], [2.0, 0.0, 3.0])  # tip first
    npt.assert_allclose(c[1], [2.0, 1.0, 3.0])
    npt.assert_allclose(c[-1], [2.0, 4.0, 0.0])
    assert (np.diff(c[:, 2]) <= 0).all()


def test_cut_front_misses_raises(beam4):
    with pytest.raises(ValueError):
        cut_front(beam4, CutPlane((1.0, 0.0, 0.0), 2.5))


def test_advance_cut_duplicates_and_rewires():
    mesh = generate_beam(4)
    plane = CutPlane((1.0, 0.0, 0.0), 2.0)
    front = cut_front(mesh, plane)
    mesh, ev = advance_cut(mesh, plane, 0, front=front)
    assert ev.new_vertex == 100
    assert ev.k_delta == 3
    assert mesh.n_vertices == 101
    npt.assert_allclose(mesh.coords[100], mesh.coords[ev.duplicated_vertex])
    # rewired elements reference the copy, and only positive-side ones do
    assert (mesh.tets[ev.affected_elements] == ev.new_vertex).any(axis=1).all()
    assert not (mesh.tets[ev.affected_elements] == ev.duplicated_vertex).any()
    others = np.setdiff1d(np.arange(mesh.n_tets), ev.affected_elements)
    assert not (mesh.tets[others] == ev.new_vertex).any()
    mesh.validate()


def test_advance_cut_h_delta_respects_prior():
    mesh = generate_beam(4)
    plane = CutPlane((1.0, 0.0, 0.0), 2.0)
    front = cut_front(mesh, plane)
    mesh, ev0 = advance_cut(mesh, plane, 0, front=front)
    # the tracked set carries the previous delta plus the copy's new DOFs
    prior = np.concatenate([ev0.h_delta, 225 + np.arange(3)])
    mesh, ev1 = advance_cut(mesh, plane, 1, front=front, h_prior=prior)
    assert ev0.h_delta.size > 0 and ev1.h_delta.size > 0
    assert set(ev0.h_delta.tolist()).isdisjoint(ev1.h_delta.tolist())
    assert (np.diff(ev0.h_delta) > 0).all()
    assert not np.isin(225 + np.arange(3), ev1.h_delta).any()


def test_advance_cut_skips_constrained_node():
    mesh = generate_beam(4)
    plane = CutPlane((1.0, 0.0, 0.0), 2.0)
    front = cut_front(mesh, plane)
    t = 15  # first z=0 node in front order
    assert mesh.coords[front[t], 2] == 0.0
    with pytest.warns(UserWarning, match="constrained node"):
        mesh2, ev = advance_cut(mesh, plane, t, front=front)
    assert ev.new_vertex is None
    assert ev.k_delta == 0
    assert mesh2.n_vertices == 100


def test_advance_cut_one_sided_noop():
    mesh = generate_beam(4)
    plane = CutPlane((1.0, 0.0, 0.0), 4.0)  # boundary face
    front = cut_front(mesh, plane)
    mesh, ev = advance_cut(mesh, plane, 0, front=front)
    assert ev.new_vertex is None
    assert mesh.n_vertices == 100


def test_advance_cut_straddling_elements_rejected():
    mesh = generate_beam(4)
    plane = CutPlane((1.0, 1.0, 0.0), 4.0)  # diagonal plane crosses elements
    front = cut_front(mesh, plane)
    mid = np.nonzero((mesh.coords[:, 0] == 2.0) & (mesh.coords[:, 1] == 2.0)
                     & (mesh.coords[:, 2] == 3.0))[0][0]
    t = int(np.nonzero(front == mid)[0][0])
    with pytest.raises(ValueError, match="straddle"):
        advance_cut(mesh, plane, t, front=front)


def test_through_cut_severs_mesh():
    mesh = generate_beam(3)
    mesh, events = full_cut(mesh, CutPlane((0.0, 0.0, 1.0), 1.0))
    dups = sum(1 for e in events if e.new_vertex is not None)
    assert dups == 25
    assert count_components(mesh) == 2
    mesh.validate()


def test_partial_cut_stays_connected():
    mesh = generate_beam(4)
    mesh, events = full_cut(mesh, CutPlane((1.0, 0.0, 0.0), 2.0))
    assert sum(e.k_delta for e in events) == 45
    assert count_components(mesh) == 1


def test_script_round_trip(tmp_path):
    actions = [
        CutPlane((1.0, 0.0, 0.0), 2.5, steps=7),
        Constrain(12, (0.01, 0.005, -0.0025)),
        Force(3, (0.0, 0.0, -1.5)),
    ]
    text = format_script(actions)
    back = parse_script(text)
    assert back == actions
    p = tmp_path / "s.script"
    save_script(actions, p)
    assert load_script(p) == actions


def test_parse_script_comments_and_errors():
    acts = parse_script("# header\n\n  force 2 0 0 -1  # trailing\n")
    assert acts == [Force(2, (0.0, 0.0, -1.0))]
    with pytest.raises(ValueError, match="line 1"):
        parse_script("cut plane 1 0 0\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_script("force 1 0 0 0\nwobble 3\n")


def test_default_script_deform(beam4):
    acts = default_script(beam4, "deform")
    assert len(acts) == 50
    assert all(isinstance(a, Constrain) for a in acts)
    assert acts[0].vertex == 75  # tip corner, free layer closest to z max
    assert acts[0].values == (0.01, 0.005, -0.0025)
    assert len(default_script(beam4, "deform", steps=7)) == 7
    with pytest.raises(ValueError):
        default_script(beam4, "wiggle")


def test_default_script_cut(beam4):
    (plane,) = default_script(beam4, "cut")
    assert plane.normal == (1.0, 0.0, 0.0)
    assert plane.offset == 2.0
    assert plane.steps == 20


def test_default_load(beam4):
    f = default_load(build_dofmap(beam4), magnitude=2.0)
    assert f.shape == (225,)
    npt.assert_allclose(np.unique(f), [-2.0, 0.0])
    assert (f < 0).sum() == 75


FROZEN_BEAM2_CUT = [
    # step, n, m, k after each front node (5 duplications, then 5 skips)
    (0, 78, 12, 3), (1, 81, 18, 6), (2, 84, 24, 9), (3, 87, 30, 12),
    (4, 90, 30, 15), (5, 90, 30, 15), (6, 90, 30, 15), (7, 90, 30, 15),
    (8, 90, 30, 15), (9, 90, 30, 15),
]


@pytest.mark.filterwarnings(SKIP_WARN)
def test_run_script_cut_bookkeeping(beam2):
    res = run_script(beam2, default_script(beam2, "cut"), solver="amps",
                     compare_oracle=True)
    got = [(r.step, r.n, r.m, r.k) for r in res.records]
    assert got == FROZEN_BEAM2_CUT
    for r in res.records:
        assert r.n == 75 + r.k  # order tracks the duplications exactly
        assert r.rel_residual < 1e-12
        assert r.inf_diff_vs_oracle < 1e-12
        assert r.t_oracle_us > 0
    assert res.mesh.n_vertices == 55
    assert len(res.solutions) == 10
    assert res.solutions[-1].shape == (90,)
    assert res.summary["n_final"] == 90
    assert res.summary["geomean_speedup_vs_oracle"] is not None
    # the input mesh is untouched
    assert beam2.n_vertices == 50


def test_run_script_deform_bookkeeping(beam2):
    res = run_script(beam2, default_script(beam2, "deform", steps=4),
                     solver="amps", compare_oracle=True)
    for t, r in enumerate(res.records):
        assert (r.n, r.m, r.k) == (75 - 3 * (t + 1), 3 * (t + 1), 0)
        assert r.rel_residual < 1e-12
        assert r.inf_diff_vs_oracle < 1e-11
        assert r.reactions.shape == (3 * (t + 1),)
    assert res.solutions[-1].shape == (75,)


@pytest.mark.filterwarnings(SKIP_WARN)
def test_run_script_alt_solver_matches(beam2):
    script = default_script(beam2, "cut")
    a = run_script(beam2, script, solver="amps")
    b = run_script(beam2, script, solver="amps-alt")
    for x, y in zip(a.solutions, b.solutions):
        npt.assert_allclose(x, y, rtol=1e-10, atol=1e-14)


@pytest.mark.filterwarnings(SKIP_WARN)
def test_run_script_cg_and_oracle_solvers(beam2):
    script = default_script(beam2, "cut")
    amps = run_script(beam2, script, solver="amps")
    cg = run_script(beam2, script, solver="cg", cg_rel_tol=1e-10)
    for r in cg.records:
        assert r.cg_iterations > 0
        assert r.cg_converged
    for x, y in zip(cg.solutions, amps.solutions):
        assert np.max(np.abs(x - y)) / np.max(np.abs(y)) < 1e-8
    oracle = run_script(beam2, script, solver="oracle")
    assert oracle.summary["worst_residual"] < 1e-12
    for x, y in zip(oracle.solutions, amps.solutions):
        assert np.max(np.abs(x - y)) / np.max(np.abs(y)) < 1e-8


def test_run_script_force_action(beam2):
    acts = [Force(30, (0.0, 0.0, -2.5))] + default_script(beam2, "deform", steps=3)
    res = run_script(beam2, acts, solver="amps", compare_oracle=True)
    assert len(res.records) == 3  # force steps produce no record
    assert max(r.inf_diff_vs_oracle for r in res.records) < 1e-11


@pytest.mark.filterwarnings(SKIP_WARN)
def test_run_script_general_forces(beam2):
    script = default_script(beam2, "cut")
    plain = run_script(beam2, script, solver="amps")
    gen = run_script(beam2, script, solver="amps", general_forces=True,
                     compare_oracle=True)
    assert max(r.inf_diff_vs_oracle for r in gen.records) < 1e-10
    assert gen.summary["worst_residual"] < 1e-10
    # opposing forces change the answer relative to one-sided loading
    assert np.max(np.abs(gen.solutions[0] - plain.solutions[0])) > 1e-6


def test_run_script_rejects_mixing(beam2):
    with pytest.raises(ValueError):
        run_script(beam2, [Constrain(30, (0.0, 0.0, 0.0)),
                           CutPlane((1.0, 0.0, 0.0), 2.0, 1)], solver="amps")
    with pytest.raises(ValueError):
        run_script(beam2, [], solver="sor")
    with pytest.raises(ValueError):
        run_script(beam2, [], solver="amps", reps=0)


def test_severing_cut_raises_script_error():
    mesh = generate_beam(3)
    plane = CutPlane((0.0, 0.0, 1.0), 1.0, steps=25)
    with pytest.raises(ScriptError) as ei:
        run_script(mesh, [plane], solver="amps")
    assert ei.value.step > 0
    assert "singular" in str(ei.value.cause)


@pytest.mark.filterwarnings(SKIP_WARN)
def test_records_csv_schema(tmp_path, beam2):
    res = run_script(beam2, default_script(beam2, "cut"), solver="amps",
                     compare_oracle=True)
    p = tmp_path / "records.csv"
    write_records_csv(res.records, p)
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "n", "m", "k", "t_memo_us", "t_s2_us", "t_rhs_us",
                       "t_a2_us", "t_ahat_us", "t_total_us", "rel_residual",
                       "inf_diff_vs_oracle"]
    assert len(rows) == 11
    got = [tuple(int(v) for v in row[:4]) for row in rows[1:]]
    assert got == FROZEN_BEAM2_CUT
    assert all(float(row[10]) < 1e-12 for row in rows[1:])


def test_records_csv_omits_compare_column_without_oracle(tmp_path, beam2):
    res = run_script(beam2, default_script(beam2, "deform", steps=2), solver="amps")
    p = tmp_path / "records.csv"
    write_records_csv(res.records, p)
    with open(p, newline="") as fh:
        header = next(csv.reader(fh))
    assert header[-1] == "rel_residual"


@pytest.mark.filterwarnings(SKIP_WARN)
def test_breakdown_csv_shares(tmp_path, beam2):
    res = run_script(beam2, default_script(beam2, "cut"), solver="amps")
    p = tmp_path / "breakdown.csv"
    write_breakdown_csv(res.records, p)
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "memo_share", "s2_share", "rhs_share", "a2_share",
                       "ahat_share"]
    for row in rows[1:]:
        shares = [float(v) for v in row[1:]]
        assert abs(sum(shares) - 1.0) < 1e-3
        assert all(s >= 0.0 for s in shares)


@pytest.mark.filterwarnings(SKIP_WARN)
def test_reps_average_timings(beam2):
    res = run_script(beam2, default_script(beam2, "cut"), solver="amps", reps=3)
    assert res.summary["reps"] == 3
    assert all(r.t_total_us > 0 for r in res.records)
    line = summary_line(res.summary)
    assert "solver=amps" in line
    assert "worst_residual=" in line
    assert "threads=" in line
