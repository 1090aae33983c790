"""Randomized checks over every refinement class (seeded, so failures replay)."""
import numpy as np
import pytest

from engine import dists
from engine.evr import compile_mu, evr
from engine.model import DecisionModel, affine_utilities, evaluate, evpi, with_probabilities
from engine.oracle import mc_value_with, realize, sample_outcome
from engine.refinements import CASpec, CSSpec, QPSpec, QUSpec, SSpec, make_hypotheses

N_INSTANCES = 1000
KINDS = ("qu", "qp", "cs", "ca", "s")


def random_model(rng, m=None, n=None):
    m = int(rng.integers(2, 5)) if m is None else m
    n = int(rng.integers(2, 4)) if n is None else n
    return DecisionModel(
        tuple(f"a{k}" for k in range(m)),
        tuple(f"x{i}" for i in range(n)),
        rng.dirichlet(np.full(n, 2.0)),
        rng.uniform(0.0, 1.0, (m, n)),
    )


def random_density(rng, center, point=False):
    if point:
        return dists.point(center)
    w = rng.uniform(0.01, 0.3)
    lo, hi = center - w, center + w
    if rng.random() < 0.5:
        return dists.uniform(lo, hi)
    return dists.triangular(lo, lo + rng.uniform(0.1, 0.9) * (hi - lo), hi)


def random_instance(kind, rng, point=False):
    if kind == "qu":
        model = random_model(rng, n=2)
        s = int(rng.integers(2))
        if point:
            return model, QUSpec({s: dists.point(rng.uniform())})
        lo = rng.uniform(0.0, 0.8)
        hi = rng.uniform(lo + 0.05, 1.0)
        if rng.random() < 0.5:
            return model, QUSpec({s: dists.uniform(lo, hi)})
        return model, QUSpec({s: dists.triangular(lo, lo + rng.uniform(0.1, 0.9) * (hi - lo), hi)})

    if kind == "qp":
        model = random_model(rng)
        picks = rng.choice(model.m * model.n, size=int(rng.integers(1, 4)), replace=False)
        cells = [divmod(int(c), model.n) for c in picks]
        return model, QPSpec({c: random_density(rng, model.utilities[c], point) for c in cells})

    if kind == "cs":
        model = random_model(rng, m=int(rng.integers(2, 4)))
        state = int(rng.integers(model.n))
        picks = rng.choice(model.m * 2, size=int(rng.integers(1, 3)), replace=False)
        phi = [divmod(int(c), 2) for c in picks]
        return model, CSSpec(
            state,
            ("lo", "hi"),
            tuple(rng.dirichlet(np.full(2, 2.0))),
            {c: random_density(rng, rng.uniform(), point) for c in phi},
        )

    if kind == "ca":
        model = random_model(rng, m=int(rng.integers(2, 4)))
        uncertain = set(rng.choice(model.n, size=min(2, model.n), replace=False).tolist())
        return model, CASpec(
            "new",
            {i: random_density(rng, rng.uniform(), point or i not in uncertain) for i in range(model.n)},
        )

    model = random_model(rng)
    ny = int(rng.integers(2, 4))
    count = 1 if point else int(rng.integers(2, 5))
    weights = rng.dirichlet(np.ones(count))
    entries = [
        (w, rng.dirichlet(np.ones(ny)), rng.dirichlet(np.ones(model.n), size=ny))
        for w in weights
    ]
    return model, SSpec(tuple(f"y{j}" for j in range(ny)), make_hypotheses(entries))


def transform_spec(spec, a, b):
    """The utility-valued parts of a spec under u -> a*u + b."""
    if isinstance(spec, QPSpec):
        return QPSpec({c: dists.affine(d, a, b) for c, d in spec.cell_dists.items()})
    if isinstance(spec, CSSpec):
        return CSSpec(spec.state, spec.sublabels, spec.conditional_probs,
                      {c: dists.affine(d, a, b) for c, d in spec.phi_dists.items()})
    if isinstance(spec, CASpec):
        return CASpec(spec.label, {i: dists.affine(d, a, b) for i, d in spec.phi_dists.items()})
    return spec


def operative_margin(model, spec):
    if isinstance(spec, SSpec):
        eus = model.utilities @ spec.operative_marginal()
    else:
        eus = compile_mu(model, spec).operative()
    top = np.sort(eus)[::-1]
    return top[0] - top[1]


def instances(kind, seed, point=False):
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    for _ in range(N_INSTANCES):
        yield rng, random_instance(kind, rng, point)


@pytest.mark.parametrize("kind", KINDS)
def test_evr_is_nonnegative_and_affine_equivariant(kind):
    for rng, (model, spec) in instances(kind, 101):
        base = evr(model, spec)
        assert base.engine != "monte-carlo"
        assert base.evr >= -1e-9
        assert base.evr == base.value_with - base.value_without

        a, b = rng.uniform(0.5, 4.0), rng.uniform(-3.0, 3.0)
        scaled = evr(affine_utilities(model, a, b), transform_spec(spec, a, b))
        assert abs(scaled.evr - a * base.evr) <= 1e-9 * max(1.0, a)
        if operative_margin(model, spec) > 1e-9:
            assert scaled.default_action == base.default_action


@pytest.mark.parametrize("kind", KINDS)
def test_point_mass_specs_are_worth_nothing(kind):
    for _, (model, spec) in instances(kind, 202, point=True):
        assert evr(model, spec).evr == 0.0


def test_qu_never_beats_perfect_information():
    for _, (model, spec) in instances("qu", 303):
        (s, pi), = spec.pi_dists.items()
        probs = np.zeros(2)
        probs[s] = dists.mean(pi)
        probs[1 - s] = 1.0 - probs[s]
        assert evr(model, spec).evr <= evpi(with_probabilities(model, probs)) + 1e-9


def test_structural_never_beats_perfect_information():
    for _, (model, spec) in instances("s", 404):
        operative = with_probabilities(model, spec.operative_marginal())
        assert evr(model, spec).evr <= evpi(operative) + 1e-9


def test_structural_mixture_matches_monte_carlo():
    rng = np.random.default_rng(505)
    for seed in range(5):
        model, spec = random_instance("s", rng)
        exact = evr(model, spec).value_with
        est = mc_value_with(model, spec, n=100_000, seed=seed)
        assert abs(est.estimate - exact) <= 4 * est.stderr + 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_realized_models_stay_valid(kind):
    rng = np.random.default_rng([606, KINDS.index(kind)])
    for seed in range(200):
        model, spec = random_instance(kind, rng)
        out = realize(model, spec, sample_outcome(model, spec, seed))
        assert out.realized_best_value == evaluate(out.refined_model).value
        assert abs(out.refined_model.probabilities.sum() - 1.0) <= 1e-9
