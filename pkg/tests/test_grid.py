"""Topology model, CCRC enumeration, feasibility rules, serialization."""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccrc_sched.grid import (
    CCRC,
    ACSubgrid,
    Branch,
    Bus,
    ControlRole,
    DCSubgrid,
    Generator,
    GridTopology,
    IPC,
    Load,
    OperatingPoint,
    OperatingRanges,
    TheveninSource,
    ccr_distance,
    default_topology,
    enumerate_all_ccrcs,
    feasible_ccrcs,
    is_feasible,
    load_grid_file,
    save_grid_file,
    topology_from_dict,
    topology_to_dict,
)

TOP = default_topology()

roles_st = st.tuples(*[st.sampled_from(list(ControlRole))] * 6)


# ---------------------------------------------------------------------------
# enumeration and feasibility
# ---------------------------------------------------------------------------

def test_enumeration_count_and_order():
    all_ccrcs = enumerate_all_ccrcs(TOP)
    assert len(all_ccrcs) == 3 ** 6 == 729
    ids = [c.id for c in all_ccrcs]
    assert ids == sorted(ids) == list(range(729))


def test_feasible_count():
    assert len(feasible_ccrcs(TOP)) == 95


def test_feasible_count_combinatorial_oracle():
    # Independent recount: classify each CCRC by direct rule evaluation on
    # the known terminal layout (a,b,c on Thevenin-backed AC subgrids and
    # DC-1; d on a Thevenin-backed subgrid, e alone on the Thevenin-less
    # AC-3, f on AC-2; d,e,f on DC-2).  AC-3 forces role(e) = AC_GFM, each
    # DC subgrid needs at least one DC_GFM among its own terminals.
    count = 0
    for roles in itertools.product(list(ControlRole), repeat=6):
        a, b, c, d, e, f = roles
        ok_ac3 = e == ControlRole.AC_GFM
        ok_dc1 = ControlRole.DC_GFM in (a, b, c)
        ok_dc2 = ControlRole.DC_GFM in (d, e, f)
        if ok_ac3 and ok_dc1 and ok_dc2:
            count += 1
    assert count == 95
    assert count == (3 ** 3 - 2 ** 3) * (3 ** 2 - 2 ** 2)
    mine = {cc.id for cc in feasible_ccrcs(TOP)}
    theirs = {
        CCRC(roles).id
        for roles in itertools.product(list(ControlRole), repeat=6)
        if roles[4] == ControlRole.AC_GFM
        and ControlRole.DC_GFM in roles[:3]
        and ControlRole.DC_GFM in roles[3:]
    }
    assert mine == theirs


def test_feasibility_specific_cases():
    GFL, ACG, DCG = ControlRole.GFL, ControlRole.AC_GFM, ControlRole.DC_GFM
    assert not is_feasible(TOP, CCRC((GFL,) * 6))          # no DC forming at all
    assert not is_feasible(TOP, CCRC((DCG, GFL, GFL, DCG, GFL, GFL)))  # AC-3 dark
    assert not is_feasible(TOP, CCRC((GFL, GFL, GFL, DCG, ACG, GFL)))  # DC-1 dark
    assert is_feasible(TOP, CCRC((DCG, GFL, GFL, DCG, ACG, GFL)))
    assert is_feasible(TOP, CCRC((GFL, GFL, DCG, GFL, ACG, DCG)))


def test_ccrc_id_roundtrip_exhaustive():
    for c in enumerate_all_ccrcs(TOP):
        assert CCRC.from_id(c.id, 6) == c


@given(roles_st)
def test_ccrc_id_roundtrip_random(roles):
    c = CCRC(roles)
    assert CCRC.from_id(c.id, len(roles)).roles == roles


def test_ccrc_label():
    c = CCRC((ControlRole.GFL, ControlRole.AC_GFM, ControlRole.DC_GFM,
              ControlRole.GFL, ControlRole.AC_GFM, ControlRole.DC_GFM))
    assert c.label() == "GFL-ACGFM-DCGFM-GFL-ACGFM-DCGFM"


# ---------------------------------------------------------------------------
# ccr_distance is a metric
# ---------------------------------------------------------------------------

@given(roles_st, roles_st, roles_st)
def test_ccr_distance_metric_axioms(r1, r2, r3):
    a, b, c = CCRC(r1), CCRC(r2), CCRC(r3)
    dab = ccr_distance(a, b)
    assert dab >= 0
    assert (dab == 0) == (a == b)
    assert dab == ccr_distance(b, a)
    assert ccr_distance(a, c) <= dab + ccr_distance(b, c)


def test_ccr_distance_counts_changed_terminals():
    a = CCRC.from_id(59, 6)
    b = CCRC(a.roles[:1] + (ControlRole.AC_GFM,) + a.roles[2:])
    assert a.roles[1] != ControlRole.AC_GFM
    assert ccr_distance(a, b) == 1
    assert ccr_distance(a, a) == 0


def test_ccr_distance_length_mismatch_rejected():
    with pytest.raises(ValueError):
        ccr_distance(CCRC((ControlRole.GFL,)), CCRC((ControlRole.GFL,) * 2))


# ---------------------------------------------------------------------------
# operating ranges and points
# ---------------------------------------------------------------------------

def test_operating_ranges_dimensions():
    rng = TOP.operating_ranges
    names = rng.dimension_names()
    assert names == ["p_g1", "p_g2", "p_g3", "cosphi_g1", "cosphi_g2",
                     "cosphi_g3", "p_demand"]
    bounds = rng.dimension_bounds()
    assert list(bounds) == names
    assert all(lo < hi for lo, hi in bounds.values())


def _mid_op():
    rng = TOP.operating_ranges
    return OperatingPoint(
        gen_p_mw={g: (lo + hi) / 2 for g, (lo, hi) in rng.gen_p_mw.items()},
        gen_cosphi={g: (lo + hi) / 2 for g, (lo, hi) in rng.gen_cosphi.items()},
        p_demand_mw=sum(rng.p_demand_mw) / 2,
        load_shares=dict(rng.load_share_base),
    )


def test_operating_point_validate_accepts_interior():
    _mid_op().validate(TOP.operating_ranges)


def test_operating_point_validate_rejects_out_of_range():
    op = _mid_op()
    bad = OperatingPoint(gen_p_mw={**op.gen_p_mw, "g1": 1e6},
                         gen_cosphi=op.gen_cosphi,
                         p_demand_mw=op.p_demand_mw,
                         load_shares=op.load_shares)
    with pytest.raises(ValueError):
        bad.validate(TOP.operating_ranges)


def test_operating_point_validate_rejects_bad_shares():
    op = _mid_op()
    shares = dict(op.load_shares)
    shares["l1"] += 0.2
    shares["l2"] -= 0.2  # sums to 1 but l2 leaves its band (0.2 * [0.7, 1.3])
    bad = OperatingPoint(gen_p_mw=op.gen_p_mw, gen_cosphi=op.gen_cosphi,
                         p_demand_mw=op.p_demand_mw, load_shares=shares)
    with pytest.raises(ValueError):
        bad.validate(TOP.operating_ranges)
    shares = {k: v * 1.1 for k, v in op.load_shares.items()}  # sum != 1
    bad = OperatingPoint(gen_p_mw=op.gen_p_mw, gen_cosphi=op.gen_cosphi,
                         p_demand_mw=op.p_demand_mw, load_shares=shares)
    with pytest.raises(ValueError):
        bad.validate(TOP.operating_ranges)


def test_load_power_split():
    op = _mid_op()
    total = sum(op.load_p_mw(l.name) for l in TOP.loads)
    assert abs(total - op.p_demand_mw) < 1e-9


def test_operating_point_dict_roundtrip():
    op = _mid_op()
    assert OperatingPoint.from_dict(op.to_dict()) == op


# ---------------------------------------------------------------------------
# topology validation and serialization
# ---------------------------------------------------------------------------

def test_default_topology_shape():
    assert [c.name for c in TOP.ipcs] == ["a", "b", "c", "d", "e", "f"]
    assert len(TOP.ac_subgrids) == 3
    assert len(TOP.dc_subgrids) == 2
    assert len(TOP.generators) == 3
    assert len(TOP.loads) == 4
    assert len(TOP.thevenins) == 2
    assert sum(1 for g in TOP.generators if g.is_wind) == 1


def test_topology_dict_roundtrip(tmp_path):
    d = topology_to_dict(TOP)
    assert d["schema"] == 1
    top2 = topology_from_dict(d)
    assert [c.name for c in top2.ipcs] == [c.name for c in TOP.ipcs]
    assert len(feasible_ccrcs(top2)) == 95
    p = tmp_path / "grid.json"
    save_grid_file(TOP, p)
    top3 = load_grid_file(p)
    assert topology_to_dict(top3) == d


def test_load_grid_file_default_keyword():
    top = load_grid_file("default")
    assert len(enumerate_all_ccrcs(top)) == 729


def test_topology_rejects_cross_subgrid_branch():
    with pytest.raises(ValueError):
        GridTopology(
            ac_subgrids=(ACSubgrid("s1", (Bus("b1", 220.0, "s1"),)),
                         ACSubgrid("s2", (Bus("b2", 220.0, "s2"),))),
            dc_subgrids=(),
            generators=(),
            loads=(Load("ld", "b1", 1.0),),
            thevenins=(TheveninSource("t", "b1"), TheveninSource("t2", "b2")),
            ipcs=(),
            branches=(Branch("br", "b1", "b2", r=0.01, x=0.1),),
            operating_ranges=_tiny_ranges(),
        )


def test_topology_rejects_disconnected_subgrid():
    with pytest.raises(ValueError):
        GridTopology(
            ac_subgrids=(ACSubgrid("s1", (Bus("b1", 220.0, "s1"),
                                          Bus("b2", 220.0, "s1"))),),
            dc_subgrids=(),
            generators=(),
            loads=(Load("ld", "b1", 1.0),),
            thevenins=(TheveninSource("t", "b1"),),
            ipcs=(),
            branches=(),
            operating_ranges=_tiny_ranges(),
        )


def test_wind_cannot_be_forming():
    with pytest.raises(ValueError):
        Generator("g", "b", 100.0, is_wind=True, forming=True)


def _tiny_ranges():
    return OperatingRanges(
        gen_p_mw={},
        gen_cosphi={},
        p_demand_mw=(10.0, 100.0),
        load_share_base={"ld": 1.0},
    )
