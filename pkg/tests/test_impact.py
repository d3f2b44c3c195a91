import math

import pytest

from bubbleattack.cli import fixture_path
from bubbleattack.impact import (REFERENCE_RACE, RaceCsvError, RaceParamError, RaceParams, closed_form_outcome,
                                 expected_repeat_fraction, min_success_to_flip, monte_carlo_outcome,
                                 race_table_report, read_races, success_algebraic)

BASE = RaceParams(**REFERENCE_RACE)


def test_closed_form_reference_race():
    o = closed_form_outcome(BASE)
    assert o.lose_final == pytest.approx(0.407, abs=1e-12)
    # 0.415 * (1 - 0.03) = 0.40255; prints as .403 at three places
    assert o.win_final == pytest.approx(0.40255, abs=1e-12)
    assert o.margin > 0


def test_no_deployment_changes_nothing():
    o = closed_form_outcome(BASE.replace(deploy=0.0))
    assert (o.lose_final, o.win_final) == (BASE.lose_share, BASE.win_share)


def test_extreme_race():
    p = RaceParams(0.5, 0.0, 0.5, deploy=1.0, success=1.0, recast=1.0)
    o = closed_form_outcome(p)
    assert (o.lose_final, o.win_final) == (0.5, 0.0)


def test_param_validation():
    with pytest.raises(RaceParamError):
        RaceParams(0.6, 0.5, 0.1)
    with pytest.raises(RaceParamError):
        RaceParams(0.4, 0.4, 0.1, recast=1.5)
    with pytest.raises(RaceParamError):
        RaceParams(math.nan, 0.4, 0.1)


def test_monte_carlo_without_deployment_is_exact():
    mc = monte_carlo_outcome(BASE.replace(deploy=0.0), ballots=10_000, seed=1)
    assert mc.lose_final == BASE.lose_share and mc.win_final == BASE.win_share
    assert mc.repeat_request_fraction == 0.0


def test_monte_carlo_agrees_with_closed_form():
    mc = monte_carlo_outcome(BASE, ballots=200_000, seed=2)
    o = closed_form_outcome(BASE)
    assert abs(mc.lose_final - o.lose_final) <= 3 * mc.lose_sigma + 1e-5
    assert abs(mc.win_final - o.win_final) <= 3 * mc.win_sigma + 1e-5
    assert abs(mc.repeat_request_fraction - expected_repeat_fraction(BASE)) <= 4 * mc.repeat_sigma


def test_monte_carlo_is_seeded():
    a = monte_carlo_outcome(BASE, ballots=50_000, seed=3)
    assert a == monte_carlo_outcome(BASE, ballots=50_000, seed=3)
    with pytest.raises(ValueError):
        monte_carlo_outcome(BASE, ballots=0)


def test_certain_trigger_caps_chains():
    mc = monte_carlo_outcome(BASE.replace(success=1.0, recast=0.0), ballots=1000, seed=0, max_chain=50)
    assert mc.chains_capped == round(0.415 * 1000)


def test_flip_bisection_matches_algebra():
    r = min_success_to_flip(BASE)
    assert r.feasible
    assert r.success == pytest.approx(r.algebraic, abs=1e-8)
    assert r.algebraic == pytest.approx((0.415 - 0.395 + 0.005) / (0.12 + 0.415 * 0.3), rel=1e-12)


def test_flip_already_behind_needs_nothing():
    p = RaceParams(0.39, 0.41, 0.1)
    assert min_success_to_flip(p, goal=0.0).success == 0.0
    assert success_algebraic(p, 0.0) == 0.0


def test_flip_impossible_without_leverage():
    p = RaceParams(0.45, 0.40, 0.0, recast=0.0)
    r = min_success_to_flip(p)
    assert r.status == "infeasible" and r.success is None and r.algebraic is None
    with pytest.raises(RaceParamError):
        min_success_to_flip(p.replace(deploy=0.0))


def test_packaged_race_table():
    rep = race_table_report(fixture_path("nevada_2020.csv"), "Nevada")
    assert rep.races == 52
    assert list(rep.under.values()) == [12, 3, 2]
    assert f"{100 * rep.mean_blank:.1f}" == "11.7"
    assert "| Nevada | 52 | 12 | 3 | 2 | 11.7% |" in rep.markdown()


HEAD = "race_id,total_votes,margin_fraction,blank_fraction\n"


def test_bucket_edges_are_inclusive():
    rep = race_table_report(HEAD + "a,100,0.05,0.1\nb,100,0.0500001,0.1\n", "X")
    assert rep.under == {"5%": 1, "2%": 0, "1%": 0}


def test_empty_table(tmp_path):
    p = tmp_path / "none.csv"
    p.write_text("")
    assert read_races(p) == []
    rep = race_table_report(HEAD, "Empty")
    assert rep.races == 0 and rep.mean_blank == 0.0


@pytest.mark.parametrize("text,needle", [
    ("id,votes\n", "header"),
    (HEAD + "a,100,0.1\n", "line 2"),
    (HEAD + "a,100,0.1,0.1\nb,x,0.1,0.1\n", "line 3"),
    (HEAD + "a,100,0.6,0.6\n", "exceeds"),
])
def test_csv_errors(text, needle):
    with pytest.raises(RaceCsvError, match=needle):
        read_races(text)
