import numpy as np
import pytest

from densplan.bench import (
    BenchConfig,
    EnvGenConfig,
    gen_envs,
    importance_oracle,
    parse_variant,
    run_variant,
    sample_efficiency_study,
    variant_config,
)
from densplan.errors import GenerationExhausted
from densplan.liouville import Reference
from densplan.planner import PlannerConfig
from densplan.probest import Obstacle, mc_collision_prob
from densplan.scenario import car_template, rare_event_scenario
from densplan.trajopt import DEFAULT_MARGIN, solve_nlp

SMALL = BenchConfig(PlannerConfig(n_samples=200, n_queries=200), n_mc=500)


def test_parse_variant():
    assert parse_variant("density") == ("density", None)
    assert parse_variant("distance(0.2)") == ("distance", 0.2)
    assert parse_variant("distance:1") == ("distance", 1.0)
    for bad in ("distance", "reach(0.1)", "dense", ""):
        with pytest.raises(ValueError):
            parse_variant(bad)


def test_variant_configs():
    base = PlannerConfig()
    assert variant_config("original", base).check == "none"
    assert variant_config("original", base).nlp_margin == DEFAULT_MARGIN
    assert variant_config("reach", base).check == "reach"
    d = variant_config("distance(0.3)", base)
    assert d.check == "distance" and d.distance_m == 0.3


def test_gen_envs_zero_obstacles():
    suite = gen_envs(3, car_template(), 0, EnvGenConfig(n_obstacles=(0, 0)))
    assert len(suite) == 3 and all(not sc.obstacles for sc in suite.scenarios)


def test_gen_envs_deterministic_and_feasible():
    gen = EnvGenConfig(n_obstacles=(2, 4))
    a = gen_envs(3, car_template(), 5, gen)
    b = gen_envs(3, car_template(), 5, gen)
    assert [sc.obstacles for sc in a.scenarios] == [sc.obstacles for sc in b.scenarios]
    c = gen_envs(3, car_template(), 6, gen)
    assert [sc.obstacles for sc in a.scenarios] != [sc.obstacles for sc in c.scenarios]
    for sc in a.scenarios:
        assert 2 <= len(sc.obstacles) <= 4
        assert solve_nlp(sc, raise_on_infeasible=False)[1].feasible
        for o in sc.obstacles:
            for end in (sc.q_origin[:2], sc.q_dest[:2]):
                assert np.linalg.norm(np.asarray(o.center) - end) >= o.radius + gen.endpoint_clearance_m


def test_gen_envs_exhaustion():
    with pytest.raises(GenerationExhausted):
        gen_envs(1, car_template(), 0, EnvGenConfig(n_obstacles=(60, 60), radius_m=(0.8, 0.8), max_place_tries=50))


def test_obstacle_free_suite_all_feasible_and_safe():
    suite = gen_envs(2, car_template(), 0, EnvGenConfig(n_obstacles=(0, 0)))
    for v in ("original", "reach", "density", "distance(0.5)"):
        res = run_variant(v, suite, SMALL)
        assert res.feasibility == 1.0 and res.safety == 0.0


def test_original_is_unsafe_through_obstacle():
    # the plain NLP hugs the obstacle, so tracking noise produces collisions
    sc = car_template(obstacles=(Obstacle((5.0, 5.05), 0.8),))
    res = run_variant("original", [sc], SMALL)
    assert res.records[0].feasible and res.records[0].collision_rate > 0
    d = res.records[0].to_dict()
    assert "runtime_s" not in d and d["repairs"] == 0


def test_sample_efficiency_rows_shape():
    sc = rare_event_scenario()
    rows = sample_efficiency_study(sc, np.array([[2.0, 0.0]] * sc.n_segments), [50, 100], [0, 1], n_queries=200)
    assert [r.size for r in rows] == [50, 100]
    d = rows[0].to_dict()
    assert len(d["density"]) == len(d["monte_carlo"]) == 2 and d["density_iqr"] >= 0


def test_importance_oracle_matches_plain_mc_on_easy_case():
    sc = car_template(obstacles=(Obstacle((5.0, 5.1), 0.1),))
    controls = np.array([[2.0, 0.0]] * sc.n_segments)
    ref = Reference.from_segments(sc.vehicle, sc.q_origin, controls, sc.seg_len, sc.dt)
    weighted = importance_oracle(sc, controls, n=4000, seed=1).any_collision
    plain = mc_collision_prob(sc.loop, ref, sc.init_error, sc.disturbance, sc.obstacles, 4000, seed=1).any_collision
    assert 0.3 < plain < 0.7
    assert abs(weighted - plain) < 0.1
