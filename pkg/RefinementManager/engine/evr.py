"""Expected value of refinement.

Every refinement class except the structural one compiles into a MuProfile:
per-action affine forms mu_k = c_k + sum_j w_kj * theta_j over independent
parameters theta_j. Two shapes have exact paths:

- shared-scalar: every mu_k depends on one theta (QU on a two-state model);
  the upper envelope of the lines is integrated segment by segment.
- independent-blocks: each theta feeds one action (QP, CS, CA); each mu_k
  becomes a Density1D through affine + convolve and E[max] is taken with
  e_max_indep.

Structural refinements are a finite mixture of hypotheses and are summed
directly. Anything without an exact path goes to the Monte Carlo oracle.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as npoly

from engine import dists
from engine.dists import BREAK_TOL, Density1D
from engine.errors import CapabilityError, DegreeCapExceeded, SpecError
from engine.model import PROB_TOL, DecisionModel, check_probability_vector, linear_crossings
from engine.refinements import (
    CASpec,
    CSSpec,
    MuDirectSpec,
    QPSpec,
    QUSpec,
    RefinementSpec,
    SSpec,
    validate_spec,
)

log = logging.getLogger("evr.evr")

SHARED_SCALAR = "shared-scalar"
INDEPENDENT_BLOCKS = "independent-blocks"

ENGINE_BREAKPOINT = "exact-breakpoint"
ENGINE_INDEPENDENT = "exact-independent"
ENGINE_MIXTURE = "exact-mixture"
ENGINE_MC = "monte-carlo"

ENGINE_CHOICES = ("auto", "exact", "mc")


@dataclass(frozen=True, eq=False)
class MuProfile:
    constants: np.ndarray
    weights: np.ndarray
    params: Tuple[Density1D, ...]
    structure: str

    def __post_init__(self) -> None:
        c = np.asarray(self.constants, dtype=float)
        w = np.asarray(self.weights, dtype=float).reshape(c.size, len(self.params))
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(w))):
            raise SpecError("profile constants and weights must be finite")
        if self.structure == SHARED_SCALAR:
            if len(self.params) != 1:
                raise SpecError("a shared-scalar profile has exactly one parameter")
        elif self.structure == INDEPENDENT_BLOCKS:
            if w.size and np.any(np.count_nonzero(w, axis=0) != 1):
                raise SpecError("each independent parameter must feed exactly one action")
        else:
            raise SpecError(f"unknown profile structure {self.structure!r}")
        object.__setattr__(self, "constants", c)
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.constants.size

    def operative(self) -> np.ndarray:
        means = np.array([dists.mean(d) for d in self.params])
        return self.constants + self.weights @ means

    def mu_items(self) -> List[Union[float, Density1D]]:
        """Per-action mu as a constant or a Density1D (independent blocks only)."""
        items: List[Union[float, Density1D]] = []
        for k in range(self.m):
            cols = np.flatnonzero(self.weights[k])
            if cols.size == 0:
                items.append(float(self.constants[k]))
                continue
            total: Optional[Density1D] = None
            for j in cols:
                term = dists.affine(self.params[j], self.weights[k, j], 0.0)
                total = term if total is None else dists.convolve(total, term)
            items.append(dists.affine(total, 1.0, float(self.constants[k])))
        return items


@dataclass(frozen=True)
class OperativeValue:
    value: float
    action: int
    rejection_rate: float = 0.0


@dataclass(frozen=True)
class EVRReport:
    value_with: float
    value_without: float
    evr: float
    default_action: int
    engine: str
    mc_stderr: Optional[float] = None
    kind: str = ""
    # share of qu parameter draws dropped for a negative remainder
    rejection_rate: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


# -- compilation --------------------------------------------------------------

def _blocks(constants: np.ndarray, cells: Sequence[Tuple[int, float, Density1D]]) -> MuProfile:
    """Fold point masses into constants; every random cell becomes one parameter."""
    consts = np.array(constants, dtype=float)
    params: List[Density1D] = []
    owners: List[Tuple[int, float]] = []
    for action, weight, d in cells:
        if weight == 0.0:
            continue
        if d.is_point():
            consts[action] += weight * d.atoms[0][0]
            continue
        params.append(d)
        owners.append((action, weight))
    w = np.zeros((consts.size, len(params)))
    for j, (action, weight) in enumerate(owners):
        w[action, j] = weight
    return MuProfile(consts, w, tuple(params), INDEPENDENT_BLOCKS)


def compile_mu(model: DecisionModel, spec: RefinementSpec) -> MuProfile:
    validate_spec(model, spec)
    p, u = model.probabilities, model.utilities

    if isinstance(spec, QUSpec):
        if model.n != 2:
            raise CapabilityError(
                "qu refinement on more than two states has no exact profile; use the Monte Carlo engine"
            )
        (s, pi), = spec.pi_dists.items()
        o = 1 - s
        return MuProfile(u[:, o].copy(), (u[:, s] - u[:, o])[:, None], (pi,), SHARED_SCALAR)

    if isinstance(spec, QPSpec):
        consts = np.zeros(model.m)
        cells = []
        for k in range(model.m):
            for i in range(model.n):
                d = spec.cell_dists.get((k, i))
                if d is None:
                    consts[k] += p[i] * u[k, i]
                else:
                    cells.append((k, float(p[i]), d))
        return _blocks(consts, cells)

    if isinstance(spec, CSSpec):
        i0 = spec.state
        rest = [i for i in range(model.n) if i != i0]
        consts = u[:, rest] @ p[rest]
        q = p[i0] * check_probability_vector(spec.conditional_probs, "conditional_probs")
        cells = []
        for k in range(model.m):
            for j in range(len(spec.sublabels)):
                d = spec.phi_dists.get((k, j))
                if d is None:
                    consts[k] += q[j] * u[k, i0]
                else:
                    cells.append((k, float(q[j]), d))
        return _blocks(consts, cells)

    if isinstance(spec, CASpec):
        consts = np.append(u @ p, 0.0)
        cells = [(model.m, float(p[i]), spec.phi_dists[i]) for i in range(model.n)]
        return _blocks(consts, cells)

    raise CapabilityError("structural refinements are evaluated as a hypothesis mixture, not a profile")


# -- exact integration --------------------------------------------------------

def _integrate_linear_policy(
    consts: np.ndarray,
    slopes: np.ndarray,
    d: Density1D,
    choose: Callable[[float], int],
    knots: Sequence[float] = (),
) -> float:
    """E[c_a(theta) + w_a(theta) * theta] where a(theta) = choose(theta)."""
    total = 0.0
    for x, mass in d.atoms:
        k = choose(x)
        total += mass * (consts[k] + slopes[k] * x)
    for seg in d.segments:
        cuts = [seg.lo] + [x for x in knots if seg.lo < x < seg.hi] + [seg.hi]
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a <= BREAK_TOL:
                continue
            k = choose(0.5 * (a + b))
            line = [consts[k] + slopes[k] * seg.lo, slopes[k]]
            anti = npoly.polyint(npoly.polymul(seg.coeffs, line))
            total += float(npoly.polyval(b - seg.lo, anti) - npoly.polyval(a - seg.lo, anti))
    return total


def _envelope_value(profile: MuProfile) -> float:
    consts = profile.constants
    slopes = profile.weights[:, 0]
    (theta,) = profile.params
    lo, hi = theta.support()
    knots = linear_crossings(consts, slopes, lo, hi)
    log.debug("envelope breakpoints %s on [%g, %g]", knots, lo, hi)
    return _integrate_linear_policy(consts, slopes, theta, lambda x: int(np.argmax(consts + slopes * x)), knots)


def threshold_policy_value(model: DecisionModel, spec: QUSpec, regions: Sequence[Tuple[float, float, Any]]) -> float:
    """Expected value of following a fixed rule on pi instead of the optimal envelope.

    regions are (lo, hi, action) triples covering the support of pi; the
    first region containing pi decides.
    """
    profile = compile_mu(model, spec)
    if profile.structure != SHARED_SCALAR:
        raise CapabilityError("threshold rules need a two-state qu refinement")
    rules = [(float(lo), float(hi), model.action_index(a)) for lo, hi, a in regions]

    def choose(x: float) -> int:
        for lo, hi, k in rules:
            if lo <= x <= hi:
                return k
        raise SpecError(f"no rule covers pi = {x}")

    knots = sorted({b for lo, hi, _ in rules for b in (lo, hi)})
    (theta,) = profile.params
    return _integrate_linear_policy(profile.constants, profile.weights[:, 0], theta, choose, knots)


def _structural_value(model: DecisionModel, spec: SSpec) -> float:
    # same matrix-vector product as value_without, so one hypothesis gives EVR == 0
    best = np.array([(model.utilities @ marginal).max() for marginal in spec.marginals()])
    return float(spec.weights @ best)


# -- public surface -----------------------------------------------------------

def _qu_may_truncate(spec: QUSpec) -> bool:
    """True when the listed pi supports can add up to more than one."""
    return sum(dists.support(d)[1] for d in spec.pi_dists.values()) > 1.0 + PROB_TOL


def value_without(
    model: DecisionModel,
    spec: RefinementSpec,
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> OperativeValue:
    """Best expected utility under the operative (mean) parameters.

    A qu refinement on more than two states whose supports can overshoot
    one is conditioned on a non-negative remainder. Its operative
    probabilities are then the mean of the accepted Monte Carlo draws,
    taken with the same n and seed as the Monte Carlo engine.
    """
    validate_spec(model, spec)
    rate = 0.0
    if isinstance(spec, SSpec):
        eus = model.utilities @ spec.operative_marginal()
    elif isinstance(spec, QUSpec) and model.n != 2:
        if _qu_may_truncate(spec):
            from engine import oracle

            probs, rate = oracle.qu_operative_probabilities(model, spec, n=n, seed=seed, workers=workers)
        else:
            probs = np.zeros(model.n)
            for i, d in spec.pi_dists.items():
                probs[i] = dists.mean(d)
            probs[spec.remainder_state(model.n)] = 1.0 - probs.sum()
        eus = model.utilities @ probs
    else:
        eus = compile_mu(model, spec).operative()
    best = int(np.argmax(eus))
    return OperativeValue(float(eus[best]), best, rate)


def _value_with(
    model: DecisionModel,
    spec: RefinementSpec,
    engine: str = "auto",
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Tuple[float, str, Optional[float]]:
    if engine not in ENGINE_CHOICES:
        raise SpecError(f"unknown engine {engine!r} (choose from {', '.join(ENGINE_CHOICES)})")

    def monte_carlo(reason: str) -> Tuple[float, str, Optional[float]]:
        from engine import oracle

        if engine == "exact":
            raise CapabilityError(reason)
        if engine == "auto":
            log.warning("%s; falling back to Monte Carlo", reason)
        est = oracle.mc_value_with(model, spec, n=n, seed=seed, workers=workers)
        return est.estimate, ENGINE_MC, est.stderr

    if engine == "mc":
        return monte_carlo("Monte Carlo engine requested")
    if isinstance(spec, SSpec):
        return _structural_value(model, spec), ENGINE_MIXTURE, None
    try:
        profile = compile_mu(model, spec)
    except CapabilityError as exc:
        return monte_carlo(str(exc))
    if profile.structure == SHARED_SCALAR:
        return _envelope_value(profile), ENGINE_BREAKPOINT, None
    try:
        items = profile.mu_items()
    except DegreeCapExceeded as exc:
        return monte_carlo(f"exact convolution unavailable ({exc})")
    return dists.e_max_indep(items), ENGINE_INDEPENDENT, None


def value_with(model: DecisionModel, spec: RefinementSpec, engine: str = "auto", **kwargs: Any) -> float:
    """Expected best value once the refinement has been carried out."""
    validate_spec(model, spec)
    return _value_with(model, spec, engine, **kwargs)[0]


def evr(
    model: DecisionModel,
    spec: RefinementSpec,
    engine: str = "auto",
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> EVRReport:
    validate_spec(model, spec)
    value, used, stderr = _value_with(model, spec, engine, n=n, seed=seed, workers=workers)
    without = value_without(model, spec, n=n, seed=seed, workers=workers)
    report = EVRReport(
        value_with=value,
        value_without=without.value,
        evr=value - without.value,
        default_action=without.action,
        engine=used,
        mc_stderr=stderr,
        kind=spec.kind,
        rejection_rate=without.rejection_rate,
    )
    log.debug("evr %s via %s: %.10g - %.10g = %.10g", spec.kind, used, value, without.value, report.evr)
    return report


def evr_mu_direct(
    mu_inputs: Union[MuDirectSpec, Sequence[Union[float, Density1D]]],
    default_value: Optional[float] = None,
) -> EVRReport:
    """EVR straight from per-action value distributions (independent by contract).

    default_value overrides the value without refinement; by default it is
    the largest mean.
    """
    if isinstance(mu_inputs, MuDirectSpec):
        if default_value is None:
            default_value = mu_inputs.default_value
        mu_inputs = mu_inputs.items
    items = list(mu_inputs)
    if not items:
        raise SpecError("mu-direct refinement needs at least one value")
    means = np.array([dists.mean(x) if isinstance(x, Density1D) else float(x) for x in items])
    action = int(np.argmax(means))
    without = float(means[action]) if default_value is None else float(default_value)
    value = dists.e_max_indep(items)
    return EVRReport(
        value_with=value,
        value_without=without,
        evr=value - without,
        default_action=action,
        engine=ENGINE_INDEPENDENT,
        kind="mu-direct",
    )
