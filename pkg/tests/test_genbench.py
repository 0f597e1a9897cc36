import math

import pytest

from microstack.electrical import Parallel, Series
from microstack.genbench import (
    BenchRecord,
    GenBenchError,
    GenSpec,
    InvalidRatio,
    exponents,
    fit_exponent,
    format_ratio,
    generate,
    parse_ratio,
    run_scaling,
    tree_depth,
)
from microstack.hydraulics import rank_dag, solve_flow


def test_generation_is_reproducible(policy):
    a = generate(GenSpec(16, "sqrt", 0.5, seed=3), policy=policy)
    b = generate(GenSpec(16, "sqrt", 0.5, seed=3), policy=policy)
    c = generate(GenSpec(16, "sqrt", 0.5, seed=4), policy=policy)
    assert a.fingerprint() == b.fingerprint()
    assert a.layers == b.layers
    assert a.fingerprint() != c.fingerprint()


@pytest.mark.parametrize(
    "n, r_dag, widths",
    [
        (4, "sqrt", [2, 2]),
        (16, "sqrt", [4, 4, 4, 4]),
        (5, "sqrt", [2, 3]),
        (6, 0.0, [6]),
        (6, 1.0, [1] * 6),
        (6, 0.5, [2, 2, 2]),
    ],
)
def test_flow_layers(policy, n, r_dag, widths):
    g = generate(GenSpec(n, r_dag, 0.0), policy=policy)
    assert [len(layer) for layer in g.layers] == widths
    assert sorted(c for layer in g.layers for c in layer) == sorted(f"c{i}" for i in range(n))
    assert g.dag_ratio() == pytest.approx(len(widths) / n)


def test_layers_become_flow_ranks(policy):
    g = generate(GenSpec(9, "sqrt", 0.5, seed=1), policy=policy)
    net = g.config.network
    flow = solve_flow(net, policy.viscosity)
    ranks = rank_dag(net, flow)
    assert ranks.depth == 2 * g.height
    for k, layer in enumerate(g.layers):
        assert {ranks.rank[cid] for cid in layer} == {2 * k + 1}
        rates = [flow.flow_rate[cid] for cid in layer]
        assert max(rates) == pytest.approx(min(rates))


def test_layers_are_joined_by_junction_channels(policy):
    g = generate(GenSpec(9, "sqrt", 0.5, seed=1), policy=policy)
    net = g.config.network
    junctions = [ch for ch in net.channels if ch.id not in g.config.cells]
    assert [ch.id for ch in junctions] == [f"f{k}" for k in range(g.height + 1)]
    assert len(net.channels) == 9 + g.height + 1
    flow = solve_flow(net, policy.viscosity)
    for ch in junctions:
        assert ch.cell is None
        assert not ch.geometry.has_electrodes
        assert flow.flow_rate[ch.id] == pytest.approx(net.inflow_rate)


@pytest.mark.parametrize("r_tree", [0.0, 0.5, 1.0])
def test_series_connection_count(policy, r_tree):
    n = 9
    tree = generate(GenSpec(n, "sqrt", r_tree, seed=2), policy=policy).config.tree
    assert tree.count(Series) == int(round(r_tree * (n - 1)))
    assert tree.count(Series) + tree.count(Parallel) == n - 1
    assert sorted(tree.cells()) == sorted(f"c{i}" for i in range(n))


def test_tree_depth(policy):
    single = generate(GenSpec(1, 0.0, 0.5), policy=policy)
    assert tree_depth(single.config.tree) == 1
    chain = generate(GenSpec(8, 0.0, 1.0, seed=5), policy=policy)
    assert 4 <= tree_depth(chain.config.tree) <= 8


def test_every_cell_gets_the_reference_layout(policy):
    cfg = generate(GenSpec(4, 1.0, 0.0), policy=policy).config
    assert set(cfg.cells) == {"c0", "c1", "c2", "c3"}
    cell_channels = [ch for ch in cfg.network.channels if ch.id in cfg.cells]
    assert len(cell_channels) == 4
    for ch in cell_channels:
        assert ch.cell == ch.id
        assert ch.geometry.has_electrodes
    assert len(cfg.sweep.currents) == policy.sweep_points


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n": 4, "r_dag": 1.5, "r_tree": 0.0},
        {"n": 4, "r_dag": "cubic", "r_tree": 0.0},
        {"n": 4, "r_dag": 0.5, "r_tree": -0.1},
    ],
)
def test_invalid_ratios(kwargs):
    with pytest.raises(InvalidRatio):
        GenSpec(**kwargs)


def test_cell_count_must_be_positive():
    with pytest.raises(GenBenchError, match="at least 1"):
        GenSpec(0, 0.0, 0.0)


def test_ratio_text():
    assert parse_ratio("sqrt") == "sqrt"
    assert parse_ratio(" SQRT ") == "sqrt"
    assert parse_ratio("0.25") == 0.25
    with pytest.raises(InvalidRatio):
        parse_ratio("half")
    assert format_ratio(1.0) == "1"
    assert format_ratio(0.5) == "0.5"
    assert format_ratio("sqrt") == "sqrt"


def test_fit_exponent_recovers_power_law():
    sizes = [4, 16, 64, 256]
    assert fit_exponent(sizes, [2e-3 * n ** 1.5 for n in sizes]) == pytest.approx(1.5)
    assert fit_exponent(sizes + [1024], [n ** 2 for n in sizes] + [math.nan]) == pytest.approx(2.0)
    with pytest.raises(GenBenchError, match="two"):
        fit_exponent([4, 16], [1.0, math.nan])


def _record(n, wall_time, error=None):
    return BenchRecord(n, 0.0, 0.0, True, wall_time, 10, 0, "x", error)


def test_exponents_per_ratio_pair():
    fitted = exponents([_record(4, 1.0), _record(16, 4.0), _record(64, 16.0)])
    assert fitted == {"dag=0|tree=0": pytest.approx(1.0)}
    assert math.isnan(exponents([_record(4, math.nan, "boom")])["dag=0|tree=0"])


def test_run_scaling_records_each_grid_point(policy):
    records = run_scaling([2, 3], newton=True, ratios=[(0.0, 0.0), (1.0, 1.0)], repeats=1, policy=policy, iterations=2)
    assert [(r.n, r.label) for r in records] == [
        (2, "dag=0|tree=0"),
        (2, "dag=1|tree=1"),
        (3, "dag=0|tree=0"),
        (3, "dag=1|tree=1"),
    ]
    for r in records:
        assert r.error is None
        assert r.wall_time > 0
        assert r.iterations == 2
        assert r.fingerprint == generate(GenSpec(r.n, r.r_dag, r.r_tree), policy=policy).fingerprint()


def test_run_scaling_needs_repeats(policy):
    with pytest.raises(GenBenchError, match="repeats"):
        run_scaling([2], newton=False, repeats=0, policy=policy)
