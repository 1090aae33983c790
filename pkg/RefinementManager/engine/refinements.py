"""Refinement specs: what a refinement would tell us, as second-order distributions.

Specs are relative to one DecisionModel and reference actions/states by index.
The file loaders in schema.py resolve labels before building them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from engine.dists import Density1D
from engine.errors import ModelError, SpecError
from engine.model import DecisionModel, PROB_TOL, check_probability_vector


@dataclass(frozen=True)
class QUSpec:
    """Uncertainty about state probabilities.

    pi_dists maps a state index to the distribution of its probability. A
    two-state model lists one state; with n > 2 states the single unlisted
    state takes 1 minus the sum.
    """

    pi_dists: Dict[int, Density1D]
    kind: str = field(default="qu", init=False)

    def remainder_state(self, n: int) -> int:
        return next(i for i in range(n) if i not in self.pi_dists)


@dataclass(frozen=True)
class QPSpec:
    """Uncertainty about utility cells; unlisted cells stay at current values."""

    cell_dists: Dict[Tuple[int, int], Density1D]
    kind: str = field(default="qp", init=False)


@dataclass(frozen=True)
class CSSpec:
    """Split one state into sub-states with (possibly uncertain) utilities.

    phi_dists is keyed by (action, sub-state); unlisted cells are point
    masses at the parent state's utility.
    """

    state: int
    sublabels: Tuple[str, ...]
    conditional_probs: Tuple[float, ...]
    phi_dists: Dict[Tuple[int, int], Density1D]
    kind: str = field(default="cs", init=False)


@dataclass(frozen=True)
class CASpec:
    """Add an action whose utility in every state is uncertain."""

    label: str
    phi_dists: Dict[int, Density1D]
    kind: str = field(default="ca", init=False)


@dataclass(frozen=True, eq=False)
class Hypothesis:
    weight: float
    p_y: np.ndarray
    cpt: np.ndarray

    @property
    def marginal(self) -> np.ndarray:
        return self.p_y @ self.cpt


@dataclass(frozen=True)
class SSpec:
    """Add a conditioning variable Y for the state; finite mixture of (p_y, cpt) hypotheses."""

    y_labels: Tuple[str, ...]
    hypotheses: Tuple[Hypothesis, ...]
    kind: str = field(default="s", init=False)

    @property
    def weights(self) -> np.ndarray:
        return np.array([h.weight for h in self.hypotheses])

    def marginals(self) -> np.ndarray:
        return np.vstack([h.marginal for h in self.hypotheses])

    def operative_marginal(self) -> np.ndarray:
        w = self.weights
        return w @ self.marginals()

    def operative_conditioning(self) -> Tuple[np.ndarray, np.ndarray]:
        """(p_y, cpt) of the weight-averaged joint over (Y, X)."""
        joint = sum(h.weight * (h.p_y[:, None] * h.cpt) for h in self.hypotheses)
        p_y = joint.sum(axis=1)
        cpt = np.where(p_y[:, None] > 0, joint / np.where(p_y > 0, p_y, 1.0)[:, None], 1.0 / joint.shape[1])
        return p_y, cpt


@dataclass(frozen=True)
class MuDirectSpec:
    """Value distributions given straight in the mu domain (independent by contract)."""

    items: Tuple[Union[float, Density1D], ...]
    default_value: Optional[float] = None
    kind: str = field(default="mu-direct", init=False)


RefinementSpec = Union[QUSpec, QPSpec, CSSpec, CASpec, SSpec]


def is_point_mass_spec(spec: RefinementSpec) -> bool:
    if isinstance(spec, QUSpec):
        return all(d.is_point() for d in spec.pi_dists.values())
    if isinstance(spec, QPSpec):
        return all(d.is_point() for d in spec.cell_dists.values())
    if isinstance(spec, (CSSpec, CASpec)):
        return all(d.is_point() for d in spec.phi_dists.values())
    if isinstance(spec, SSpec):
        return len(spec.hypotheses) == 1
    return False


def _check_index(i: int, size: int, what: str) -> None:
    if not isinstance(i, (int, np.integer)) or isinstance(i, bool) or not 0 <= int(i) < size:
        raise SpecError(f"{what} index {i!r} out of range (0..{size - 1})")


def _check_probability(values: Sequence[float], name: str) -> np.ndarray:
    try:
        return check_probability_vector(values, name)
    except ModelError as exc:
        raise SpecError(str(exc)) from None


def validate_spec(model: DecisionModel, spec: RefinementSpec) -> None:
    """Raise SpecError unless spec fits model."""
    if isinstance(spec, QUSpec):
        if not spec.pi_dists:
            raise SpecError("qu spec needs at least one state distribution")
        for i in spec.pi_dists:
            _check_index(i, model.n, "state")
        if len(spec.pi_dists) != model.n - 1:
            raise SpecError(
                f"qu spec must give distributions for n-1 = {model.n - 1} states (got {len(spec.pi_dists)})"
            )
        lo_sum = 0.0
        for i, d in spec.pi_dists.items():
            lo, hi = d.support()
            if lo < -PROB_TOL or hi > 1.0 + PROB_TOL:
                raise SpecError(f"probability distribution for state {model.states[i]!r} leaves [0, 1]")
            lo_sum += lo
        if lo_sum > 1.0 + PROB_TOL:
            raise SpecError("qu distributions cannot leave a non-negative remainder")
    elif isinstance(spec, QPSpec):
        if not spec.cell_dists:
            raise SpecError("qp spec needs at least one cell")
        for a, s in spec.cell_dists:
            _check_index(a, model.m, "action")
            _check_index(s, model.n, "state")
    elif isinstance(spec, CSSpec):
        _check_index(spec.state, model.n, "state")
        s = len(spec.sublabels)
        if s < 2:
            raise SpecError("cs spec needs at least two sub-states")
        if len(set(spec.sublabels)) != s:
            raise SpecError("cs sub-state labels must be unique")
        others = set(model.states) - {model.states[spec.state]}
        clash = others & set(spec.sublabels)
        if clash:
            raise SpecError(f"cs sub-state label(s) already used: {', '.join(sorted(clash))}")
        q = _check_probability(spec.conditional_probs, "conditional_probs")
        if q.size != s:
            raise SpecError(f"conditional_probs has {q.size} entries for {s} sub-states")
        for a, j in spec.phi_dists:
            _check_index(a, model.m, "action")
            _check_index(j, s, "sub-state")
    elif isinstance(spec, CASpec):
        if not spec.label:
            raise SpecError("ca spec needs a label")
        if spec.label in model.actions:
            raise SpecError(f"action {spec.label!r} already exists")
        for i in spec.phi_dists:
            _check_index(i, model.n, "state")
        if set(spec.phi_dists) != set(range(model.n)):
            raise SpecError("ca spec needs a distribution for every state")
    elif isinstance(spec, SSpec):
        ny = len(spec.y_labels)
        if ny < 1:
            raise SpecError("s spec needs at least one y label")
        if not spec.hypotheses:
            raise SpecError("s spec needs at least one hypothesis")
        _check_probability([h.weight for h in spec.hypotheses], "hypothesis weights")
        for k, h in enumerate(spec.hypotheses):
            py = _check_probability(h.p_y, f"hypotheses[{k}].p_y")
            if py.size != ny:
                raise SpecError(f"hypotheses[{k}].p_y has {py.size} entries for {ny} y labels")
            cpt = np.asarray(h.cpt, dtype=float)
            if cpt.shape != (ny, model.n):
                raise SpecError(f"hypotheses[{k}].cpt must be {ny}x{model.n}, got {cpt.shape}")
            for j, row in enumerate(cpt):
                _check_probability(row, f"hypotheses[{k}].cpt[{j}]")
    else:
        raise SpecError(f"unsupported refinement spec {type(spec).__name__}")


def make_hypotheses(entries: Sequence[Tuple[float, Sequence[float], Sequence[Sequence[float]]]]) -> Tuple[Hypothesis, ...]:
    """Hypotheses with weights and rows renormalized (within tolerance)."""
    weights = _check_probability([w for w, _, _ in entries], "hypothesis weights")
    out: List[Hypothesis] = []
    for k, (w, p_y, cpt) in enumerate(entries):
        py = _check_probability(p_y, f"hypotheses[{k}].p_y")
        rows = np.asarray(cpt, dtype=float)
        if rows.ndim != 2 or rows.shape[0] != py.size:
            raise SpecError(f"hypotheses[{k}].cpt needs one row per y label")
        table = np.vstack([_check_probability(r, f"hypotheses[{k}].cpt[{j}]") for j, r in enumerate(rows)])
        out.append(Hypothesis(float(weights[k]), py, table))
    return tuple(out)
