import json

import numpy as np
import pytest

from engine import dists
from engine.control import (
    HALT,
    CostModel,
    best_effort,
    ca_procedure,
    cs_procedure,
    fixed_procedure,
    greedy_controller,
    lookahead2,
    nevr,
    qp_procedure,
    qu_procedure,
    spread,
)
from engine.errors import ControlError
from engine.evr import evr
from engine.model import with_probabilities
from engine.refinements import CASpec, QUSpec, SSpec, make_hypotheses
from schema import load_session


def run(session, **overrides):
    kwargs = dict(
        seed=session.seed,
        lookahead=session.lookahead,
        lookahead_samples=session.lookahead_samples or 64,
    )
    kwargs.update(overrides)
    return greedy_controller(session.model, session.procedures, session.costs, session.max_steps, **kwargs)


def test_spread_schedule():
    assert spread(0.4, 10, 0) == 0.0
    assert spread(0.4, 10, 10) == pytest.approx(0.2)
    widths = [spread(0.4, 10, t) for t in (1, 5, 20, 80)]
    assert widths == sorted(widths) and widths[-1] < 0.4
    with pytest.raises(ControlError):
        spread(-1, 10, 1)


def test_qu_procedure_at_half_life(party2):
    proc = qu_procedure("forecast", "Rain", 0.4, 10, [10])
    spec = proc.spec_at(party2, 10)
    assert isinstance(spec, QUSpec)
    assert dists.support(spec.pi_dists[0]) == pytest.approx((0.3, 0.5))
    assert nevr(party2, proc, 10, CostModel.zero()) == pytest.approx(1 / 44, abs=1e-12)
    assert nevr(party2, proc, 10, CostModel.constant(0.05)) == pytest.approx(1 / 44 - 0.05, abs=1e-12)


def test_qu_procedure_clips_to_probability_range():
    from engine.model import DecisionModel

    m = DecisionModel(("a", "b"), ("x", "y"), [0.05, 0.95], [[0, 1], [1, 0]])
    spec = qu_procedure("q", "x", 0.4, 10, [10]).spec_at(m, 10)
    lo, hi = dists.support(spec.pi_dists[0])
    assert lo >= 0.0 and hi <= 1.0


def test_costs():
    linear = CostModel.linear(0.001)
    assert linear.total(30) == pytest.approx(0.03)
    assert CostModel.constant(0.05).total(0) == 0.0
    cfg = CostModel.from_config({"assessment": {"type": "linear", "per_minute": 0.002},
                                 "compute": {"type": "constant", "value": 0.01}})
    assert cfg.total(10, 1.0) == pytest.approx(0.03)
    with pytest.raises(ControlError):
        CostModel.from_config({"assessment": {"type": "quadratic"}})
    with pytest.raises(ControlError):
        CostModel.from_config({"assessment": {"type": "linear", "per_minute": -1}})
    with pytest.raises(ControlError):
        CostModel.from_config({"budget": {}})


def test_best_effort_prefers_smallest_effort_on_ties(party2):
    proc = qu_procedure("flat", "Rain", 0.0, 10, [5, 10, 20])
    choice = best_effort(party2, proc, CostModel.zero())
    assert choice.t == 5
    assert choice.nevr == 0.0


def test_best_effort_trades_evr_against_cost(party2):
    proc = qu_procedure("forecast", "Rain", 0.4, 10, [1, 10, 40])
    free = best_effort(party2, proc, CostModel.zero())
    assert free.t == 40
    costly = best_effort(party2, proc, CostModel.linear(0.001))
    assert costly.t == 10
    assert costly.nevr == pytest.approx(costly.evr - costly.cost)


def test_procedures_retire_when_inapplicable(party2):
    porch = ca_procedure("porch", "Porch", {"Rain": 0.3, "Sun": 0.8}, 0.4, 10, [10])
    assert isinstance(porch.spec_at(party2, 10), CASpec)
    partial = ca_procedure("porch", "Porch", {"Rain": 0.3}, 0.4, 10, [10])
    assert partial.spec_at(party2, 10) is None
    assert best_effort(party2, partial, CostModel.zero()) is None
    fixed = fixed_procedure("f", {5: QUSpec({0: dists.uniform(0.3, 0.5)})})
    assert fixed.spec_at(party2, 6) is None
    with pytest.raises(ControlError):
        nevr(party2, partial, 10, CostModel.zero())


def test_qp_and_cs_procedures(party2):
    qp = qp_procedure("indoor", [("Indoor", "Rain"), ("Indoor", "Sun")], 0.2, 10, [10])
    spec = qp.spec_at(party2, 10)
    assert dists.support(spec.cell_dists[(1, 0)]) == pytest.approx((0.62, 0.72))
    cs = cs_procedure("split", "Rain", ["Downpour", "Drizzle"], [0.5, 0.5], 0.2, 10, [10])
    assert cs.one_shot
    assert len(cs.spec_at(party2, 10).phi_dists) == 4
    assert nevr(party2, cs, 10, CostModel.zero()) >= -1e-12


def test_greedy_session_applies_the_best_procedure_each_step(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")
    log = run(session)
    applied = log.applied
    assert len(applied) == 2
    assert log.steps[-1].chosen == HALT and log.steps[-1].reason == "max_steps"
    for step in applied:
        positive = {pid: c.nevr for pid, c in step.table.items() if c is not None}
        assert step.nevr == max(positive.values())
        assert positive[step.chosen] == step.nevr
        assert step.nevr > 0
    assert applied[0].chosen == "forecast"
    assert applied[0].nevr == pytest.approx(1 / 44, abs=1e-12)
    assert "Porch" in log.final_model.actions or applied[1].chosen == "forecast"


def test_halting_session(fixtures_dir):
    session = load_session(fixtures_dir / "party_halt.session")
    log = run(session)
    assert len(log.steps) == 1
    (step,) = log.steps
    assert step.chosen == HALT and step.reason == "no positive nevr"
    assert all(c is None or c.nevr <= 0 for c in step.table.values())
    assert log.final_action == "Indoor"
    assert log.final_value == pytest.approx(0.61)


def test_same_seed_same_log(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")
    a = json.dumps(run(session).as_dict(), sort_keys=True)
    b = json.dumps(run(session).as_dict(), sort_keys=True)
    assert a == b


def test_lookahead_finds_a_two_step_plan(fixtures_dir):
    session = load_session(fixtures_dir / "coin_lookahead.session")
    greedy = run(session, lookahead=0)
    assert greedy.steps[0].chosen == HALT
    table = greedy.steps[0].table
    assert table["forecast"].nevr == pytest.approx(-0.001, abs=1e-12)
    assert table["go"].nevr == pytest.approx(0.0625 - 0.08, abs=1e-12)

    plan = lookahead2(session.model, session.procedures, session.costs, samples=64, seed=3)
    assert plan.procedure_id == "forecast"
    assert plan.first_nevr == pytest.approx(-0.001, abs=1e-12)
    assert 0.0 < plan.value < 0.0325

    ahead = run(session, lookahead=2)
    first = ahead.steps[0]
    assert first.chosen == "forecast" and first.via_lookahead


def test_consult_overrides_simulation(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")

    def consult(model, proc, t, spec):
        if proc.id == "forecast":
            return with_probabilities(model, [0.3, 0.7])
        return None

    log = run(session, consult=consult)
    first = log.applied[0]
    assert first.chosen == "forecast"
    assert first.outcome["source"] == "consult"
    assert first.value_after == pytest.approx(0.7)


def test_threaded_table_matches_sequential(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")
    a = json.dumps(run(session).as_dict(), sort_keys=True)
    b = json.dumps(run(session, workers=4).as_dict(), sort_keys=True)
    assert a == b


def test_controller_argument_checks(party2):
    proc = qu_procedure("forecast", "Rain", 0.4, 10, [10])
    with pytest.raises(ControlError):
        greedy_controller(party2, [proc], CostModel.zero(), -1)
    with pytest.raises(ControlError):
        greedy_controller(party2, [proc, proc], CostModel.zero(), 1)
    with pytest.raises(ControlError):
        greedy_controller(party2, [proc], CostModel.zero(), 1, lookahead=1)


def test_zero_steps_halts_immediately(party2):
    proc = qu_procedure("forecast", "Rain", 0.4, 10, [10])
    log = greedy_controller(party2, [proc], CostModel.zero(), 0)
    assert [s.chosen for s in log.steps] == [HALT]
    assert log.steps[0].reason == "max_steps"
    assert np.isclose(log.final_value, 0.61)


def _point_procedures(with_split=True):
    procs = [
        qu_procedure("forecast", "Rain", 0.0, 10, [5, 10]),
        qp_procedure("indoor", [("Indoor", "Rain"), ("Indoor", "Sun")], 0.0, 10, [10]),
        ca_procedure("porch", "Porch", {"Rain": 0.3, "Sun": 0.8}, 0.0, 10, [10]),
    ]
    if with_split:
        procs.append(cs_procedure("split", "Rain", ["Downpour", "Drizzle"], [0.5, 0.5], 0.0, 10, [10]))
        wind = SSpec(("calm", "windy"), make_hypotheses([(1.0, [0.5, 0.5], [[0.2, 0.8], [0.6, 0.4]])]))
        procs.append(fixed_procedure("wind", {1: wind}))
    return procs


def test_point_mass_procedures_at_zero_cost_refine_nothing(party2):
    log = greedy_controller(party2, _point_procedures(), CostModel.zero(), 5)
    assert log.applied == []
    assert [s.reason for s in log.steps] == ["no positive nevr"]
    assert all(c is not None and c.nevr == 0.0 for c in log.steps[0].table.values())
    assert log.final_action == "Indoor"


def test_point_mass_procedures_stay_idle_with_lookahead(party2):
    log = greedy_controller(
        party2, _point_procedures(with_split=False), CostModel.zero(), 5, lookahead=2, lookahead_samples=4
    )
    assert log.applied == []
    assert not log.steps[0].via_lookahead


SINGLE_STEP = [
    ("party2", "qu_rain.spec"),
    ("party2", "qp_indoor.spec"),
    ("party2", "cs_rain.spec"),
    ("party3", "ca_porch.spec"),
    ("party2", "s_wind.spec"),
]


@pytest.mark.slow
@pytest.mark.parametrize("model_name, spec_name", SINGLE_STEP)
def test_single_step_sessions_average_to_evr(request, spec_for, model_name, spec_name):
    model = request.getfixturevalue(model_name)
    spec = spec_for(spec_name, model)
    report = evr(model, spec)
    proc = fixed_procedure("once", {1: spec})
    gains = np.empty(10_000)
    for seed in range(gains.size):
        log = greedy_controller(model, [proc], CostModel.zero(), 1, seed=seed)
        assert [s.chosen for s in log.steps] == ["once", HALT]
        gains[seed] = log.final_value - report.value_without
    sigma = gains.std(ddof=1) / np.sqrt(gains.size)
    assert abs(gains.mean() - report.evr) < 4 * sigma
