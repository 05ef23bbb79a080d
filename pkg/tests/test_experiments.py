import math

import numpy as np
import pytest

from sourceloc.errors import InputError
from sourceloc.experiments import (
    Aggregate,
    CaseResult,
    ExperimentConfig,
    MetricsReport,
    evaluate_case,
    load_experiment_config,
    pick_sources,
    place_observers,
    population_bin,
    r0_bin,
    read_cases_csv,
    run_experiment,
    simulate_bank,
    stratify,
    write_cases_csv,
    write_summary_csv,
)
from sourceloc.inference import hpd_region, posterior_from_scores
from sourceloc.network import gravity_matrix, local_r0_all, pairwise_distances, synthetic_nodes

from conftest import make_nodes


# -- observers and sources ------------------------------------------------------------

def test_place_all_eligible(small_net):
    nodes, _, mob = small_net
    for strategy in ("random", "high_degree"):
        assert sorted(place_observers(strategy, 3, nodes, mob, 0, eligible=[7, 2, 5])) == [2, 5, 7]


def test_high_degree_picks_hub_first():
    nodes = make_nodes([200, 300, 250, 10**6, 150, 220])
    mob = gravity_matrix(nodes, pairwise_distances(nodes), 50)
    assert place_observers("high_degree", 2, nodes, mob)[0] == 3


def test_random_placement_reproducible(small_net):
    nodes, _, mob = small_net
    a = place_observers("random", 4, nodes, mob, seed=1)
    assert a == place_observers("random", 4, nodes, mob, seed=1)
    assert len(set(a)) == 4
    others = {place_observers("random", 4, nodes, mob, seed=s) for s in range(2, 8)}
    assert any(o != a for o in others)


def test_placement_errors(small_net):
    nodes, _, mob = small_net
    with pytest.raises(InputError):
        place_observers("random", 13, nodes, mob)
    with pytest.raises(InputError):
        place_observers("central", 2, nodes, mob)


def test_pick_sources():
    assert pick_sources(ExperimentConfig(sources=(4, 1, 4)), 10) == (1, 4)
    assert pick_sources(ExperimentConfig(), 3) == (0, 1, 2)
    picked = pick_sources(ExperimentConfig(n_random_sources=4, seed=2), 20)
    assert len(set(picked)) == 4 and picked == pick_sources(ExperimentConfig(n_random_sources=4, seed=2), 20)


def test_experiment_config_file(tmp_path):
    p = tmp_path / "e.cfg"
    p.write_text("n_observers = 4\nplacement = random\nsources = random:6\nbaseline = pinto\n"
                 "include_logdet = off\ntime_mode = centered\n")
    c = load_experiment_config(p)
    assert (c.n_observers, c.placement, c.n_random_sources, c.baseline) == (4, "random", 6, "pinto")
    assert c.include_logdet is False and c.time_mode == "centered"
    p.write_text("sources = 3 5,7\n")
    assert load_experiment_config(p).sources == (3, 5, 7)
    p.write_text("n_observer = 4\n")
    with pytest.raises(InputError, match="unknown"):
        load_experiment_config(p)
    p.write_text("placement = central\n")
    with pytest.raises(InputError):
        load_experiment_config(p)


# -- per-case evaluation -----------------------------------------------------------------

def _table(post):
    post = np.asarray(post, float)
    with np.errstate(divide="ignore"):
        return posterior_from_scores(np.arange(len(post)), np.full(len(post), 1 / len(post)), np.log(post))


def test_evaluate_truth_is_map():
    dist = np.array([[0, 5.0], [5.0, 0]])
    t = _table([0.8, 0.2])
    assert evaluate_case(0, t, hpd_region(t, 0.05), dist) == (True, 2, 1, 0.0)
    assert evaluate_case(1, t, hpd_region(t, 0.5), dist) == (False, 1, 2, 5.0)


def test_evaluate_truth_just_outside():
    post = np.concatenate([np.full(10, 0.0955), np.full(5, 0.009)])
    t = _table(post / post.sum())
    region = hpd_region(t, 0.05)
    inside, size, rank, _ = evaluate_case(12, t, region, np.zeros((15, 15)))
    assert (inside, size) == (False, 10)
    assert rank > 10


def test_evaluate_rejects_non_candidate():
    t = _table([0.6, 0.4])
    with pytest.raises(InputError):
        evaluate_case(5, t, hpd_region(t, 0.05), np.zeros((6, 6)))


# -- strata ------------------------------------------------------------------------------

@pytest.mark.parametrize("r0, b", [(0.0, 0), (0.89, 0), (0.9, 1), (1.8, 2), (4.49, 4), (4.5, 5), (18.7, 5)])
def test_r0_bins(r0, b):
    assert r0_bin(r0) == b


@pytest.mark.parametrize("pop, b", [(1000, 0), (3162, 0), (3163, 1), (31622, 1), (10**4.5, 2), (10**6, 2)])
def test_population_bins(pop, b):
    assert population_bin(pop) == b


def _case(s, rep, rank, inside=1, size=3, d=0.0):
    return CaseResult(s, rep, s if rank == 1 else 99, inside, size, rank, d)


def test_empty_strata_absent():
    rep = MetricsReport("proposed", [_case(0, 0, 1), _case(0, 1, 3)], (1,), {0: 2.0}, {0: 5000})
    groups = stratify(rep, {0: 2.0}, {0: 5000})
    assert list(groups) == [(2, 1)]
    assert groups[(2, 1)].n_cases == 2


def test_unscored_cases_excluded():
    unscored = CaseResult(0, 2, -1, -1, -1, -1, -1.0, "censored_observer")
    cases = [_case(0, 0, 1, d=0.0), _case(0, 1, 12, inside=0, size=5, d=40.0), unscored]
    agg = Aggregate.of(cases)
    assert (agg.n_cases, agg.n_scored) == (3, 2)
    assert agg.coverage == 0.5 and agg.top1_rate == 0.5 and agg.top10_rate == 0.5
    assert agg.mean_dist_km == 20.0 and agg.mean_region_size == 4.0
    rep = MetricsReport("proposed", cases, (1,), {0: 2.0}, {0: 5000})
    assert rep.unscored_counts() == {"censored_observer": 1}
    assert math.isnan(Aggregate.of([unscored]).coverage)


def test_top_k_monotone():
    rng = np.random.default_rng(0)
    cases = [_case(0, i, int(r)) for i, r in enumerate(rng.integers(1, 30, 200))]
    rep = MetricsReport("proposed", cases, (1,), {0: 2.0}, {0: 5000})
    rates = [rep.top_k_rate(k) for k in range(1, 31)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 1.0


# -- end to end --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def run30(params):
    nodes = synthetic_nodes(30, seed=4)
    dist = pairwise_distances(nodes)
    mob = gravity_matrix(nodes, dist, params.D)
    config = ExperimentConfig(n_observers=5, n_train=30, n_test=20, seed=1, n_random_sources=10, baseline="pinto")
    return nodes, dist, mob, config, run_experiment(config, nodes, mob, params, dist=dist)


@pytest.fixture(scope="module")
def params():
    from sourceloc.params import EpidemicParams
    return EpidemicParams()


def test_run30_row_counts(run30):
    *_, config, result = run30
    for rep in result.reports.values():
        assert len(rep.cases) == 10 * 20
        assert {c.source for c in rep.cases} == set(result.sources)
        assert sorted({c.replicate for c in rep.cases}) == list(range(30, 50))


def test_run30_aggregates_recomputed(run30, tmp_path):
    nodes, _, _, _, result = run30
    rep = result.reports["proposed"]
    write_cases_csv(rep, tmp_path / "cases.csv")
    rows = [c for c in read_cases_csv(tmp_path / "cases.csv") if c.map != -1]
    agg = rep.overall
    assert agg.n_scored == len(rows)
    assert agg.coverage == pytest.approx(sum(r.in_region for r in rows) / len(rows), abs=1e-15)
    assert agg.top10_rate == pytest.approx(sum(r.rank <= 10 for r in rows) / len(rows), abs=1e-15)
    assert agg.mean_dist_km == pytest.approx(np.mean([r.dist_km for r in rows]), rel=1e-12)
    assert agg.mean_region_size == pytest.approx(np.mean([r.region_size for r in rows]), rel=1e-12)
    # ranks, region membership and distances are self-consistent
    dist = pairwise_distances(nodes)
    for r in rows:
        assert (r.rank == 1) == (r.map == r.source)
        assert r.dist_km == pytest.approx(dist[r.source, r.map], abs=1e-9)
        assert 1 <= r.region_size <= nodes.N


def test_run30_strata_partition_cases(run30, params):
    nodes, *_, result = run30
    rep = result.reports["proposed"]
    groups = stratify(rep, local_r0_all(nodes, params), nodes.population)
    assert sum(g.n_cases for g in groups.values()) == len(rep.cases)


def test_run30_summary_file(run30, params, tmp_path):
    nodes, *_, result = run30
    write_summary_csv(result.reports, local_r0_all(nodes, params), nodes.population, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("estimator,r0_bin,pop_bin,n_cases")
    assert lines[1].startswith("proposed,all,all,200,")
    assert any(line.startswith("pinto,all,all,200,") for line in lines)


def test_run30_reproducible(run30, params):
    nodes, dist, mob, config, result = run30
    again = run_experiment(config, nodes, mob, params, jobs=2, dist=dist)
    for name in result.reports:
        assert again.reports[name].cases == result.reports[name].cases


def test_near_deterministic_separation(params):
    # large well-separated towns, every town observed: the source is the only day-1 arrival
    pop = [100600, 120700, 140800, 160900]
    nodes = make_nodes(pop, lat=np.array([-29.0, -29.5, -30.0, -30.5]), lon=np.full(4, 30.0))
    mob = gravity_matrix(nodes, pairwise_distances(nodes), params.D)
    config = ExperimentConfig(n_observers=4, n_train=20, n_test=5, seed=0)
    rep = run_experiment(config, nodes, mob, params).reports["proposed"]
    assert all(c.scored for c in rep.cases)
    assert all(c.map == c.source and c.dist_km == 0.0 for c in rep.cases)


def test_shared_banks_match_fresh_run(params):
    nodes = synthetic_nodes(10, seed=2)
    dist = pairwise_distances(nodes)
    mob = gravity_matrix(nodes, dist, params.D)
    config = ExperimentConfig(n_observers=3, n_train=10, n_test=4, seed=3, sources=(1, 6))
    fresh = run_experiment(config, nodes, mob, params, dist=dist)
    train = simulate_bank(nodes, mob, params, 3, range(10), range(10))
    test = simulate_bank(nodes, mob, params, 3, (1, 6), range(10, 14))
    shared = run_experiment(config, nodes, mob, params, dist=dist, train_bank=train, test_bank=test)
    assert shared.reports["proposed"].cases == fresh.reports["proposed"].cases
