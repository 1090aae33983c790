from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from engine.errors import ModelError

log = logging.getLogger("evr.model")

PROB_TOL = 1e-9
CROSSING_TOL = 1e-12

Ref = Union[int, str]


def check_probability_vector(values: Any, name: str = "probabilities") -> np.ndarray:
    """Validate a probability vector; renormalize only when within PROB_TOL of 1."""
    try:
        p = np.array(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{name} must be a list of numbers") from exc
    if p.ndim != 1 or p.size == 0:
        raise ModelError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)):
        raise ModelError(f"{name} must be finite")
    if np.any(p < -PROB_TOL) or np.any(p > 1.0 + PROB_TOL):
        raise ModelError(f"{name} entries must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ModelError(f"{name} must sum to 1 (got {total:.12g})")
    p = np.clip(p, 0.0, 1.0)
    total = float(p.sum())
    if total != 1.0:
        p = p / total
    return p


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Conditioning:
    """Provenance of a structural refinement: p(Y) and p(X|Y)."""

    y_labels: Tuple[str, ...]
    p_y: np.ndarray
    cpt: np.ndarray


@dataclass(frozen=True, eq=False)
class DecisionModel:
    """Actions x states utility matrix with a state probability vector.

    Immutable after construction: arrays are stored read-only.
    """

    actions: Tuple[str, ...]
    states: Tuple[str, ...]
    probabilities: np.ndarray
    utilities: np.ndarray
    conditioning: Optional[Conditioning] = None

    def __post_init__(self) -> None:
        actions = tuple(str(a) for a in self.actions)
        states = tuple(str(s) for s in self.states)
        if not actions:
            raise ModelError("model needs at least one action")
        if not states:
            raise ModelError("model needs at least one state")
        if len(set(actions)) != len(actions):
            raise ModelError("action labels must be unique")
        if len(set(states)) != len(states):
            raise ModelError("state labels must be unique")

        p = check_probability_vector(self.probabilities, "probabilities")
        if p.size != len(states):
            raise ModelError(f"probabilities has {p.size} entries for {len(states)} states")

        try:
            u = np.array(self.utilities, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ModelError("utilities must be a matrix of numbers") from exc
        if u.shape != (len(actions), len(states)):
            raise ModelError(
                f"utilities must be {len(actions)}x{len(states)} (actions x states), got {u.shape}"
            )
        if not np.all(np.isfinite(u)):
            raise ModelError("utilities must be finite")

        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "probabilities", _frozen(p))
        object.__setattr__(self, "utilities", _frozen(u))

    @property
    def m(self) -> int:
        return len(self.actions)

    @property
    def n(self) -> int:
        return len(self.states)

    def action_index(self, ref: Ref) -> int:
        return _resolve(ref, self.actions, "action")

    def state_index(self, ref: Ref) -> int:
        return _resolve(ref, self.states, "state")

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "actions": list(self.actions),
            "states": list(self.states),
            "probabilities": [float(x) for x in self.probabilities],
            "utilities": [[float(x) for x in row] for row in self.utilities],
        }
        if self.conditioning is not None:
            out["conditioning"] = {
                "y_labels": list(self.conditioning.y_labels),
                "p_y": [float(x) for x in self.conditioning.p_y],
                "cpt": [[float(x) for x in row] for row in self.conditioning.cpt],
            }
        return out


def _resolve(ref: Ref, labels: Sequence[str], what: str) -> int:
    if isinstance(ref, (bool, np.bool_)):
        raise ModelError(f"{what} reference must be a label or an index")
    if isinstance(ref, (int, np.integer)):
        i = int(ref)
        if not 0 <= i < len(labels):
            raise ModelError(f"{what} index {i} out of range (0..{len(labels) - 1})")
        return i
    try:
        return list(labels).index(str(ref))
    except ValueError:
        raise ModelError(f"unknown {what} {ref!r}") from None


@dataclass(frozen=True)
class Evaluation:
    per_action_eu: np.ndarray
    best_action: int
    value: float


@dataclass(frozen=True)
class PolicyRegion:
    lo: float
    hi: float
    action: int
    lo_closed: bool
    hi_closed: bool


def expected_utility(model: DecisionModel, action: Ref) -> float:
    k = model.action_index(action)
    return float(model.probabilities @ model.utilities[k])


def evaluate(model: DecisionModel) -> Evaluation:
    eus = model.utilities @ model.probabilities
    # np.argmax returns the first maximum: ties go to the lowest action index
    best = int(np.argmax(eus))
    return Evaluation(per_action_eu=_frozen(eus), best_action=best, value=float(eus[best]))


def evpi(model: DecisionModel) -> float:
    perfect = float(model.probabilities @ model.utilities.max(axis=0))
    return max(0.0, perfect - evaluate(model).value)


def merge_close(values: Sequence[float], tol: float = CROSSING_TOL) -> List[float]:
    """Sort and collapse values closer than tol (first of each cluster wins)."""
    out: List[float] = []
    for v in sorted(float(x) for x in values):
        if out and v - out[-1] <= tol:
            continue
        out.append(v)
    return out


def linear_crossings(
    consts: np.ndarray, slopes: np.ndarray, lo: float, hi: float, tol: float = CROSSING_TOL
) -> List[float]:
    """Closed-form pairwise crossings of c_k + w_k*x strictly inside (lo, hi)."""
    pts: List[float] = []
    m = len(consts)
    for j in range(m):
        for k in range(j + 1, m):
            dw = slopes[j] - slopes[k]
            if dw == 0.0:
                continue
            x = (consts[k] - consts[j]) / dw
            if lo + tol < x < hi - tol:
                pts.append(float(x))
    return merge_close(pts, tol)


def argmax_with_ties(values: np.ndarray, tol: float = CROSSING_TOL) -> int:
    best = float(np.max(values))
    return int(np.flatnonzero(values >= best - tol)[0])


def two_state_forms(model: DecisionModel, state: Ref) -> Tuple[np.ndarray, np.ndarray]:
    if model.n != 2:
        raise ModelError(f"policy regions need a two-state model (got {model.n} states)")
    s = model.state_index(state)
    o = 1 - s
    u = model.utilities
    return u[:, o].copy(), (u[:, s] - u[:, o])


def policy_regions(model: DecisionModel, state: Ref) -> List[PolicyRegion]:
    """Maximal intervals of pi = p(state) in [0, 1] with a constant best action."""
    consts, slopes = two_state_forms(model, state)
    pts = [0.0] + linear_crossings(consts, slopes, 0.0, 1.0) + [1.0]

    pieces: List[Tuple[float, float, int, bool]] = []
    for i, x in enumerate(pts):
        pieces.append((x, x, argmax_with_ties(consts + slopes * x), True))
        if i + 1 < len(pts):
            mid = 0.5 * (x + pts[i + 1])
            pieces.append((x, pts[i + 1], int(np.argmax(consts + slopes * mid)), False))

    regions: List[PolicyRegion] = []
    for lo, hi, action, is_point in pieces:
        if regions and regions[-1].action == action:
            last = regions[-1]
            regions[-1] = PolicyRegion(last.lo, hi, action, last.lo_closed, is_point)
        else:
            regions.append(PolicyRegion(lo, hi, action, is_point, is_point))
    return regions


def split_state(
    model: DecisionModel,
    state: Ref,
    sublabels: Sequence[str],
    conditional_probs: Sequence[float],
    new_utilities: Any,
) -> DecisionModel:
    i = model.state_index(state)
    s = len(sublabels)
    if s < 2:
        raise ModelError("a state split needs at least two sub-states")
    q = check_probability_vector(conditional_probs, "conditional_probs")
    if q.size != s:
        raise ModelError(f"conditional_probs has {q.size} entries for {s} sub-states")
    sub_u = np.array(new_utilities, dtype=float)
    if sub_u.shape != (model.m, s):
        raise ModelError(f"new_utilities must be {model.m}x{s}, got {sub_u.shape}")

    p = model.probabilities
    states = model.states[:i] + tuple(str(x) for x in sublabels) + model.states[i + 1:]
    probs = np.concatenate([p[:i], p[i] * q, p[i + 1:]])
    utils = np.hstack([model.utilities[:, :i], sub_u, model.utilities[:, i + 1:]])
    return DecisionModel(model.actions, states, probs, utils)


def merge_states(model: DecisionModel, states: Sequence[Ref], label: str) -> DecisionModel:
    """Collapse several states into one column (probability-weighted utilities)."""
    idx = sorted({model.state_index(s) for s in states})
    if len(idx) < 2:
        raise ModelError("merging needs at least two distinct states")
    p = model.probabilities
    w = p[idx]
    mass = float(w.sum())
    merged_u = model.utilities[:, idx] @ (w / mass) if mass > 0 else model.utilities[:, idx].mean(axis=1)

    keep = [j for j in range(model.n) if j not in idx]
    first = idx[0]
    labels: List[str] = []
    probs: List[float] = []
    cols: List[np.ndarray] = []
    for j in range(model.n):
        if j == first:
            labels.append(str(label))
            probs.append(mass)
            cols.append(merged_u)
        elif j in keep:
            labels.append(model.states[j])
            probs.append(float(p[j]))
            cols.append(model.utilities[:, j])
    return DecisionModel(model.actions, tuple(labels), probs, np.column_stack(cols))


def add_action(model: DecisionModel, label: str, utilities: Sequence[float]) -> DecisionModel:
    row = np.array(utilities, dtype=float)
    if row.shape != (model.n,):
        raise ModelError(f"new action needs {model.n} utilities, got {row.shape}")
    if str(label) in model.actions:
        raise ModelError(f"action {label!r} already exists")
    return DecisionModel(
        model.actions + (str(label),),
        model.states,
        model.probabilities,
        np.vstack([model.utilities, row]),
        model.conditioning,
    )


def condition_on(model: DecisionModel, y_labels: Sequence[str], p_y: Any, cpt: Any) -> DecisionModel:
    """Add a conditioning variable Y for X; X keeps its marginal sum_y p(y) p(x|y)."""
    py = check_probability_vector(p_y, "p_y")
    if len(y_labels) != py.size:
        raise ModelError(f"p_y has {py.size} entries for {len(y_labels)} labels")
    table = np.array(cpt, dtype=float)
    if table.shape != (py.size, model.n):
        raise ModelError(f"cpt must be {py.size}x{model.n}, got {table.shape}")
    rows = np.vstack([check_probability_vector(r, f"cpt row {j}") for j, r in enumerate(table)])
    marginal = py @ rows
    cond = Conditioning(tuple(str(y) for y in y_labels), _frozen(py), _frozen(rows))
    return DecisionModel(model.actions, model.states, marginal, model.utilities, cond)


def with_probabilities(model: DecisionModel, probabilities: Any) -> DecisionModel:
    return DecisionModel(model.actions, model.states, probabilities, model.utilities)


def with_utilities(model: DecisionModel, utilities: Any) -> DecisionModel:
    return DecisionModel(model.actions, model.states, model.probabilities, utilities, model.conditioning)


def affine_utilities(model: DecisionModel, a: float, b: float) -> DecisionModel:
    if not a > 0:
        raise ModelError("utility transform needs a > 0")
    return with_utilities(model, a * model.utilities + b)
