import numpy as np
import pytest

from engine import dists
from engine.errors import CapabilityError, SpecError
from engine.evr import (
    ENGINE_BREAKPOINT,
    ENGINE_INDEPENDENT,
    ENGINE_MC,
    ENGINE_MIXTURE,
    INDEPENDENT_BLOCKS,
    SHARED_SCALAR,
    compile_mu,
    evr,
    evr_mu_direct,
    threshold_policy_value,
    value_with,
    value_without,
)
from engine.model import DecisionModel, affine_utilities, evpi, with_probabilities
from engine.refinements import CASpec, QUSpec, SSpec, make_hypotheses


def test_qu_party_rain(party2, spec_for):
    report = evr(party2, spec_for("qu_rain.spec", party2))
    assert report.engine == ENGINE_BREAKPOINT
    assert report.value_without == pytest.approx(0.61, abs=1e-12)
    assert report.default_action == 1
    assert report.value_with == pytest.approx(0.61 + 1 / 44, abs=1e-12)
    assert report.evr == pytest.approx(1 / 44, abs=1e-12)
    assert report.evr == pytest.approx(2.75 * (43 / 110 - 0.3) ** 2, abs=1e-12)
    assert report.evr == report.value_with - report.value_without


def test_qu_rounded_threshold_rule(party2, spec_for):
    spec = spec_for("qu_rain.spec", party2)
    value = threshold_policy_value(party2, spec, [(0.0, 0.38, "Outdoor"), (0.38, 1.0, "Indoor")])
    assert value == pytest.approx(0.6324, abs=5e-5)
    assert value < value_with(party2, spec)


def test_qu_profile_is_shared_scalar(party2, spec_for):
    profile = compile_mu(party2, spec_for("qu_rain.spec", party2))
    assert profile.structure == SHARED_SCALAR
    np.testing.assert_allclose(profile.constants, [1.0, 0.57])
    np.testing.assert_allclose(profile.weights[:, 0], [-1.0, 0.1])


def test_point_mass_qu_has_zero_evr(party2):
    report = evr(party2, QUSpec({0: dists.point(0.4)}))
    assert report.evr == 0.0


def test_qp_indoor_trapezoid(party2, spec_for):
    report = evr(party2, spec_for("qp_indoor.spec", party2))
    assert report.engine == ENGINE_INDEPENDENT
    assert report.value_without == pytest.approx(0.61, abs=1e-12)
    assert report.value_with == pytest.approx(0.6144444, abs=1e-7)
    assert report.evr == pytest.approx(0.0044444, abs=1e-7)


def test_direct_preference_density(party2, spec_for):
    report = evr_mu_direct(spec_for("qp_indoor_paperpdf.spec", party2))
    assert report.value_with == pytest.approx(0.60 + 0.01 + 400 * 0.04 ** 3 / 6, abs=1e-12)
    assert report.evr == pytest.approx(0.0042667, abs=1e-7)


def test_cs_rain_split(party2, spec_for):
    report = evr(party2, spec_for("cs_rain.spec", party2))
    assert report.engine == ENGINE_INDEPENDENT
    assert report.value_without == pytest.approx(0.62, abs=1e-12)
    assert report.default_action == 0
    assert report.value_with == pytest.approx(0.6208333, abs=1e-7)
    assert report.evr == pytest.approx(0.000833333, abs=1e-8)
    direct = evr_mu_direct(spec_for("cs_rain_paperpdf.spec", party2))
    assert direct.value_with == pytest.approx(report.value_with, abs=1e-12)


def test_ca_porch(party3, spec_for):
    report = evr(party3, spec_for("ca_porch.spec", party3))
    assert report.engine == ENGINE_INDEPENDENT
    assert report.value_without == pytest.approx(0.62, abs=1e-12)
    assert report.value_with == pytest.approx(0.6211433, abs=1e-7)
    assert report.evr == pytest.approx(0.0011433, abs=1e-7)
    profile = compile_mu(party3, spec_for("ca_porch.spec", party3))
    assert profile.structure == INDEPENDENT_BLOCKS
    np.testing.assert_allclose(profile.constants, [0.62, 0.61, 0.486])


def test_ca_direct_density(party3, spec_for):
    report = evr_mu_direct(spec_for("ca_porch_paperpdf.spec", party3))
    assert report.value_with == pytest.approx(0.62568, abs=2e-6)
    assert report.evr == pytest.approx(0.00568, abs=2e-6)
    assert report.value_without == 0.62


def test_printed_forecast_figure_needs_the_rounded_switch(party2, spec_for):
    spec = spec_for("qu_rain.spec", party2)
    rounded = threshold_policy_value(party2, spec, [(0.0, 0.38, "Outdoor"), (0.38, 1.0, "Indoor")])
    assert rounded - 0.61 == pytest.approx(0.0224, abs=5e-5)
    assert evr(party2, spec).evr == pytest.approx(0.0227273, abs=1e-7)


@pytest.mark.parametrize("name", ["qp_indoor.spec", "qp_indoor_paperpdf.spec"])
def test_printed_preference_figure_is_not_derivable(party2, spec_for, name):
    spec = spec_for(name, party2)
    report = evr_mu_direct(spec) if name.endswith("paperpdf.spec") else evr(party2, spec)
    assert report.evr == pytest.approx(0.0044444 if name == "qp_indoor.spec" else 0.0042667, abs=1e-7)
    assert abs(report.value_with - 0.63733) > 0.02
    assert abs(report.evr - 0.02733) > 0.02


def test_printed_split_figure_is_not_derivable(party2, spec_for):
    report = evr(party2, spec_for("cs_rain.spec", party2))
    assert report.value_with == pytest.approx(0.620833, abs=1e-6)
    assert report.evr == pytest.approx(0.000833, abs=1e-6)
    assert abs(report.value_with - 0.9208) > 0.29
    assert abs(report.evr - 0.3008) > 0.29
    # the two split-state densities, integrated as printed
    direct = [dists.uniform(0.61, 0.63), dists.triangular(0.59, 0.61, 0.63)]
    assert dists.e_max_indep(direct) == pytest.approx(0.620833, abs=1e-6)


def test_printed_porch_figure_needs_the_printed_density(party3, spec_for):
    printed = evr_mu_direct(spec_for("ca_porch_paperpdf.spec", party3))
    assert printed.value_with == pytest.approx(0.62568, abs=1e-6)
    assert printed.evr == pytest.approx(0.00568, abs=1e-6)
    convolved = evr(party3, spec_for("ca_porch.spec", party3))
    assert convolved.evr == pytest.approx(0.0011433, abs=1e-6)
    assert abs(convolved.evr - 0.00568) > 4e-3
    porch = compile_mu(party3, spec_for("ca_porch.spec", party3)).mu_items()[2]
    assert dists.support(porch) == pytest.approx((0.594, 0.634), abs=1e-9)


def test_mu_direct_default_is_largest_mean():
    report = evr_mu_direct([0.60, dists.triangular(0.56, 0.61, 0.66)])
    assert report.value_without == pytest.approx(0.61)
    assert report.default_action == 1
    with pytest.raises(SpecError):
        evr_mu_direct([])


def test_structural_wind(party2, spec_for):
    spec = spec_for("s_wind.spec", party2)
    report = evr(party2, spec)
    assert report.engine == ENGINE_MIXTURE
    assert report.value_without == pytest.approx(0.6095, abs=1e-12)
    assert report.value_with == pytest.approx(0.7145, abs=1e-12)
    assert report.evr == pytest.approx(0.105, abs=1e-12)
    operative = with_probabilities(party2, spec.operative_marginal())
    assert evpi(operative) == pytest.approx(0.26015, abs=1e-12)
    assert report.evr <= evpi(operative) + 1e-9


def test_single_hypothesis_is_worthless(party2):
    spec = SSpec(("y1", "y2"), make_hypotheses([(1.0, [0.3, 0.7], [[0.9, 0.1], [0.2, 0.8]])]))
    assert evr(party2, spec).evr == 0.0


def test_affine_equivariance(party2, spec_for):
    spec = spec_for("qu_rain.spec", party2)
    base = evr(party2, spec)
    scaled = evr(affine_utilities(party2, 2.5, -1.0), spec)
    assert scaled.evr == pytest.approx(2.5 * base.evr, abs=1e-12)
    assert scaled.default_action == base.default_action


def test_qu_on_three_states_needs_monte_carlo(party3):
    spec = QUSpec({0: dists.uniform(0.1, 0.3), 1: dists.uniform(0.1, 0.3)})
    with pytest.raises(CapabilityError):
        evr(party3, spec, engine="exact")
    report = evr(party3, spec, n=50_000, seed=3)
    assert report.engine == ENGINE_MC
    assert report.mc_stderr is not None and report.mc_stderr > 0
    assert report.value_without == pytest.approx(0.62, abs=1e-12)
    assert report.evr > -4 * report.mc_stderr
    assert report.rejection_rate == 0.0


def test_truncated_qu_uses_accepted_draws_on_both_sides():
    # pi_a + pi_b > 1 about 22% of the time; those draws are redrawn
    model = DecisionModel(("only",), ("a", "b", "c"), [1 / 3] * 3, [[1.0, 1.0, 0.0]])
    spec = QUSpec({0: dists.uniform(0.3, 0.6), 1: dists.uniform(0.3, 0.6)})
    report = evr(model, spec, n=100_000, seed=11)
    assert report.engine == ENGINE_MC
    assert 0.2 < report.rejection_rate < 0.245
    # E[pi_a + pi_b | pi_a + pi_b <= 1], not the untruncated 0.9
    assert report.value_without == pytest.approx(0.662963 / 0.777778, abs=2e-3)
    assert report.evr == pytest.approx(0.0, abs=1e-9)
    again = value_without(model, spec, n=100_000, seed=11)
    assert again.value == report.value_without
    assert again.rejection_rate == report.rejection_rate


def test_truncated_qu_evr_is_not_negative():
    model = DecisionModel(
        ("left", "right"), ("a", "b", "c"), [1 / 3] * 3, [[1.0, 0.0, 0.2], [0.0, 1.0, 0.2]]
    )
    spec = QUSpec({0: dists.uniform(0.2, 0.7), 1: dists.uniform(0.2, 0.7)})
    report = evr(model, spec, n=100_000, seed=12)
    assert report.rejection_rate > 0.1
    # both sides average over the same accepted draws
    assert report.evr >= -1e-12


def test_degree_cap_falls_back_to_monte_carlo():
    states = ("a", "b", "c", "d")
    model = DecisionModel(("stay",), states, [0.25] * 4, [[0.5] * 4])
    tri = dists.triangular(0.3, 0.5, 0.7)
    spec = CASpec("go", {i: tri for i in range(4)})
    with pytest.raises(CapabilityError):
        evr(model, spec, engine="exact")
    report = evr(model, spec, n=50_000, seed=5)
    assert report.engine == ENGINE_MC
    assert report.value_with >= 0.5


def test_forced_monte_carlo_agrees(party2, spec_for):
    spec = spec_for("qu_rain.spec", party2)
    report = evr(party2, spec, engine="mc", n=200_000, seed=7)
    assert report.engine == ENGINE_MC
    assert abs(report.value_with - (0.61 + 1 / 44)) < 4 * report.mc_stderr


def test_unknown_engine(party2, spec_for):
    with pytest.raises(SpecError):
        evr(party2, spec_for("qu_rain.spec", party2), engine="fast")


def test_value_without_reports_operative_action(party2, spec_for):
    op = value_without(party2, spec_for("s_wind.spec", party2))
    assert party2.actions[op.action] == "Indoor"
