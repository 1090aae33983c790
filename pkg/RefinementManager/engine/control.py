from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from engine import dists
from engine.errors import ControlError, RefinementError
from engine.evr import EVRReport, evr
from engine.model import DecisionModel, Ref, evaluate
from engine.oracle import RealizedOutcome, Theta, derive_seed, realize, sample_outcome
from engine.refinements import CASpec, CSSpec, QPSpec, QUSpec, RefinementSpec, validate_spec

log = logging.getLogger("evr.control")

HALT = "HALT"

CostFn = Callable[[float], float]
SpecFamily = Callable[[DecisionModel, float], Optional[RefinementSpec]]
Consult = Callable[[DecisionModel, "Procedure", float, RefinementSpec], Union[Theta, DecisionModel, None]]


def _zero(_: float) -> float:
    return 0.0


@dataclass(frozen=True)
class CostModel:
    """Assessment cost of effort t (minutes) and compute cost of a solve-time delta."""

    assessment: CostFn = _zero
    compute: CostFn = _zero
    description: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(description={"assessment": {"type": "zero"}})

    @classmethod
    def constant(cls, value: float) -> "CostModel":
        return cls(assessment=_cost_fn({"type": "constant", "value": value}),
                   description={"assessment": {"type": "constant", "value": value}})

    @classmethod
    def linear(cls, per_minute: float) -> "CostModel":
        return cls(assessment=_cost_fn({"type": "linear", "per_minute": per_minute}),
                   description={"assessment": {"type": "linear", "per_minute": per_minute}})

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "CostModel":
        """{"assessment": {...}, "compute": {...}}; either may be omitted (zero)."""
        extra = set(cfg) - {"assessment", "compute"}
        if extra:
            raise ControlError(f"unknown cost key(s): {', '.join(sorted(extra))}")
        assessment = _cost_fn(cfg.get("assessment", {"type": "zero"}))
        compute = _cost_fn(cfg.get("compute", {"type": "zero"}))
        return cls(assessment=assessment, compute=compute, description=dict(cfg))

    def total(self, t: float, delta: float = 0.0) -> float:
        return self.assessment(t) + self.compute(delta)


def _cost_fn(spec: Mapping[str, Any]) -> CostFn:
    kind = spec.get("type")
    if kind == "zero":
        keys: Set[str] = set()
        fn: CostFn = _zero
    elif kind == "constant":
        keys = {"value"}
        value = float(spec.get("value", math.nan))
        if not value >= 0:
            raise ControlError("constant cost needs a non-negative value")
        fn = lambda t, v=value: v if t > 0 else 0.0  # noqa: E731
    elif kind == "linear":
        keys = {"per_minute"}
        rate = float(spec.get("per_minute", math.nan))
        if not rate >= 0:
            raise ControlError("linear cost needs a non-negative per_minute")
        fn = lambda t, r=rate: r * max(0.0, t)  # noqa: E731
    else:
        raise ControlError(f"unknown cost type {kind!r} (zero, constant, linear)")
    extra = set(spec) - keys - {"type"}
    if extra:
        raise ControlError(f"unknown key(s) for {kind} cost: {', '.join(sorted(extra))}")
    return fn


@dataclass(frozen=True)
class Procedure:
    """A refinement whose second-order distributions depend on effort t."""

    id: str
    spec_family: SpecFamily
    effort_grid: Tuple[float, ...]
    one_shot: bool = False

    def __post_init__(self) -> None:
        grid = tuple(sorted({float(t) for t in self.effort_grid}))
        if not grid:
            raise ControlError(f"procedure {self.id!r} needs a non-empty effort grid")
        if any(not (math.isfinite(t) and t > 0) for t in grid):
            raise ControlError(f"procedure {self.id!r} effort grid must be positive")
        object.__setattr__(self, "effort_grid", grid)

    def spec_at(self, model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        """The spec at effort t, or None when the procedure no longer applies to model."""
        try:
            spec = self.spec_family(model, t)
            if spec is not None:
                validate_spec(model, spec)
            return spec
        except RefinementError as exc:
            log.debug("procedure %s not applicable at t=%g: %s", self.id, t, exc)
            return None


def spread(width0: float, half_life: float, t: float) -> float:
    """Range the assessed value is expected to move over after effort t."""
    if width0 < 0 or half_life <= 0:
        raise ControlError("width schedule needs width0 >= 0 and half_life > 0")
    return width0 * (1.0 - 2.0 ** (-t / half_life))


def _around(center: float, half: float) -> dists.Density1D:
    if half <= 0:
        return dists.point(center)
    return dists.uniform(center - half, center + half)


def qu_procedure(
    id: str, state: Ref, width0: float, half_life: float, grid: Sequence[float], one_shot: bool = False
) -> Procedure:
    """Uncertainty about p(state) on a two-state model, centred on its current value."""
    spread(width0, half_life, 0.0)

    def family(model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        if model.n != 2:
            return None
        i = model.state_index(state)
        p = float(model.probabilities[i])
        half = min(spread(width0, half_life, t) / 2.0, p, 1.0 - p)
        return QUSpec({i: _around(p, half)})

    return Procedure(id, family, tuple(grid), one_shot)


def qp_procedure(
    id: str,
    cells: Sequence[Tuple[Ref, Ref]],
    width0: float,
    half_life: float,
    grid: Sequence[float],
    one_shot: bool = False,
) -> Procedure:
    """Uncertainty about the listed utility cells."""
    spread(width0, half_life, 0.0)

    def family(model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        half = spread(width0, half_life, t) / 2.0
        out = {}
        for a, s in cells:
            k, i = model.action_index(a), model.state_index(s)
            out[(k, i)] = _around(float(model.utilities[k, i]), half)
        return QPSpec(out)

    return Procedure(id, family, tuple(grid), one_shot)


def cs_procedure(
    id: str,
    state: Ref,
    sublabels: Sequence[str],
    conditional_probs: Sequence[float],
    width0: float,
    half_life: float,
    grid: Sequence[float],
    one_shot: bool = True,
) -> Procedure:
    """Split state; every sub-state utility is uncertain around the parent's utility."""
    spread(width0, half_life, 0.0)

    def family(model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        i = model.state_index(state)
        half = spread(width0, half_life, t) / 2.0
        phi = {
            (k, j): _around(float(model.utilities[k, i]), half)
            for k in range(model.m)
            for j in range(len(sublabels))
        }
        return CSSpec(i, tuple(sublabels), tuple(conditional_probs), phi)

    return Procedure(id, family, tuple(grid), one_shot)


def ca_procedure(
    id: str,
    label: str,
    centers: Mapping[str, float],
    width0: float,
    half_life: float,
    grid: Sequence[float],
    one_shot: bool = True,
) -> Procedure:
    """Add action label with utilities uncertain around the given per-state centers."""
    spread(width0, half_life, 0.0)

    def family(model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        if label in model.actions:
            return None
        half = spread(width0, half_life, t) / 2.0
        phi = {}
        for i, s in enumerate(model.states):
            if s not in centers:
                return None
            phi[i] = _around(float(centers[s]), half)
        return CASpec(label, phi)

    return Procedure(id, family, tuple(grid), one_shot)


SpecEntry = Union[RefinementSpec, Callable[[DecisionModel], Optional[RefinementSpec]]]


def fixed_procedure(id: str, specs: Mapping[float, SpecEntry], one_shot: bool = False) -> Procedure:
    """Explicit spec (or spec builder) per effort level."""
    table = {float(t): s for t, s in specs.items()}

    def family(model: DecisionModel, t: float) -> Optional[RefinementSpec]:
        entry = table.get(float(t))
        if entry is None:
            return None
        return entry(model) if callable(entry) else entry

    return Procedure(id, family, tuple(table), one_shot)


# -- net value ----------------------------------------------------------------

@dataclass(frozen=True)
class EffortChoice:
    t: float
    nevr: float
    evr: float
    cost: float
    engine: str

    def as_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "nevr": self.nevr, "evr": self.evr, "cost": self.cost, "engine": self.engine}


def _nevr_report(
    model: DecisionModel,
    procedure: Procedure,
    t: float,
    costs: CostModel,
    compute_delta: float = 0.0,
    engine: str = "auto",
) -> Tuple[float, EVRReport, float]:
    if not (math.isfinite(t) and t >= 0):
        raise ControlError(f"effort must be a non-negative number (got {t})")
    spec = procedure.spec_at(model, t)
    if spec is None:
        raise ControlError(f"procedure {procedure.id!r} does not apply at t={t}")
    report = evr(model, spec, engine=engine)
    cost = costs.total(t, compute_delta)
    return report.evr - cost, report, cost


def nevr(
    model: DecisionModel,
    procedure: Procedure,
    t: float,
    costs: CostModel,
    compute_delta: float = 0.0,
    engine: str = "auto",
) -> float:
    """EVR of the procedure at effort t minus assessment and compute costs."""
    return _nevr_report(model, procedure, t, costs, compute_delta, engine)[0]


def best_effort(
    model: DecisionModel, procedure: Procedure, costs: CostModel, engine: str = "auto"
) -> Optional[EffortChoice]:
    """Grid maximizer of NEVR over the procedure's efforts; ties go to the smallest t."""
    best: Optional[EffortChoice] = None
    for t in procedure.effort_grid:
        if procedure.spec_at(model, t) is None:
            continue
        value, report, cost = _nevr_report(model, procedure, t, costs, engine=engine)
        if best is None or value > best.nevr:
            best = EffortChoice(t, value, report.evr, cost, report.engine)
    return best


# -- controller ---------------------------------------------------------------

@dataclass(frozen=True)
class LookaheadChoice:
    procedure_id: str
    t: float
    value: float
    first_nevr: float


@dataclass
class SessionStep:
    index: int
    table: Dict[str, Optional[EffortChoice]]
    chosen: str
    t: Optional[float] = None
    nevr: Optional[float] = None
    outcome: Optional[Dict[str, Any]] = None
    value_after: float = 0.0
    via_lookahead: bool = False
    reason: Optional[str] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "step": self.index,
            "table": {pid: (c.as_dict() if c else None) for pid, c in self.table.items()},
            "chosen": self.chosen,
            "t": self.t,
            "nevr": self.nevr,
            "outcome": self.outcome,
            "value_after": self.value_after,
            "via_lookahead": self.via_lookahead,
            "reason": self.reason,
        }


@dataclass
class SessionLog:
    steps: List[SessionStep] = field(default_factory=list)
    final_action: str = ""
    final_value: float = 0.0
    final_model: Optional[DecisionModel] = None

    @property
    def applied(self) -> List[SessionStep]:
        return [s for s in self.steps if s.chosen != HALT]

    def as_dict(self) -> Dict[str, Any]:
        return {
            "steps": [s.as_dict() for s in self.steps],
            "final_action": self.final_action,
            "final_value": self.final_value,
            "final_model": self.final_model.as_dict() if self.final_model is not None else None,
        }


def _active(procedures: Sequence[Procedure], applied: Iterable[str]) -> List[Procedure]:
    done = set(applied)
    return [p for p in procedures if not (p.one_shot and p.id in done)]


def _nevr_table(
    model: DecisionModel,
    procedures: Sequence[Procedure],
    costs: CostModel,
    applied: Iterable[str],
    workers: Optional[int] = None,
    engine: str = "auto",
) -> Dict[str, Optional[EffortChoice]]:
    active = _active(procedures, applied)
    run = lambda p: best_effort(model, p, costs, engine)  # noqa: E731
    if workers and workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            choices = list(pool.map(run, active))
    else:
        choices = [run(p) for p in active]
    return {p.id: c for p, c in zip(active, choices)}


def _argmax_entry(table: Mapping[str, Optional[EffortChoice]]) -> Optional[Tuple[str, EffortChoice]]:
    best: Optional[Tuple[str, EffortChoice]] = None
    for pid, choice in table.items():
        if choice is not None and (best is None or choice.nevr > best[1].nevr):
            best = (pid, choice)
    return best


def lookahead2(
    model: DecisionModel,
    procedures: Sequence[Procedure],
    costs: CostModel,
    samples: int = 64,
    seed: int = 0,
    applied: Iterable[str] = (),
    engine: str = "auto",
) -> Optional[LookaheadChoice]:
    """Best first move judged by its NEVR plus the expected best follow-up NEVR.

    Each first (procedure, t) is applied to `samples` simulated outcomes; the
    follow-up counts max(0, best single-step NEVR) on each refined model.
    """
    if samples < 1:
        raise ControlError("lookahead needs at least one sample")
    done = set(applied)
    best: Optional[LookaheadChoice] = None
    for pi, proc in enumerate(_active(procedures, done)):
        after = done | {proc.id} if proc.one_shot else done
        for ti, t in enumerate(proc.effort_grid):
            spec = proc.spec_at(model, t)
            if spec is None:
                continue
            first = nevr(model, proc, t, costs, engine=engine)
            follow = 0.0
            for s in range(samples):
                theta = sample_outcome(model, spec, derive_seed(seed, pi, ti, s))
                refined = realize(model, spec, theta).refined_model
                top = _argmax_entry(_nevr_table(refined, procedures, costs, after, engine=engine))
                follow += max(0.0, top[1].nevr) if top else 0.0
            value = first + follow / samples
            log.debug("lookahead %s t=%g: first %.6g, two-step %.6g", proc.id, t, first, value)
            if best is None or value > best.value:
                best = LookaheadChoice(proc.id, t, value, first)
    return best


def _apply(
    model: DecisionModel,
    proc: Procedure,
    t: float,
    seed: int,
    consult: Optional[Consult],
) -> Tuple[DecisionModel, Dict[str, Any]]:
    spec = proc.spec_at(model, t)
    if spec is None:
        raise ControlError(f"procedure {proc.id!r} does not apply at t={t}")
    assessed = consult(model, proc, t, spec) if consult else None
    if isinstance(assessed, DecisionModel):
        ev = evaluate(assessed)
        return assessed, {
            "kind": spec.kind,
            "source": "consult",
            "best_action": assessed.actions[ev.best_action],
            "realized_best_value": ev.value,
        }
    theta = assessed if isinstance(assessed, Theta) else sample_outcome(model, spec, seed)
    outcome: RealizedOutcome = realize(model, spec, theta)
    summary = outcome.summary()
    summary["source"] = "consult" if assessed is not None else "simulated"
    return outcome.refined_model, summary


def greedy_controller(
    model: DecisionModel,
    procedures: Sequence[Procedure],
    costs: CostModel,
    max_steps: int,
    seed: int = 0,
    lookahead: int = 0,
    lookahead_samples: int = 64,
    consult: Optional[Consult] = None,
    on_step: Optional[Callable[[SessionStep], None]] = None,
    workers: Optional[int] = None,
    engine: str = "auto",
) -> SessionLog:
    """Apply the refinement with the greatest NEVR until none is worth its cost.

    Halts when every NEVR is <= 0 (ties favour acting now) or after max_steps
    refinements. With lookahead=2, a step that would halt is reconsidered with
    a two-step estimate and may go ahead (flagged via_lookahead).
    """
    if max_steps < 0:
        raise ControlError("max_steps must be >= 0")
    if lookahead not in (0, 2):
        raise ControlError("lookahead must be 0 (greedy) or 2")
    ids = [p.id for p in procedures]
    if len(set(ids)) != len(ids):
        raise ControlError("procedure ids must be unique")

    current = model
    applied: Set[str] = set()
    session = SessionLog()

    def record(step: SessionStep) -> None:
        session.steps.append(step)
        if on_step is not None:
            on_step(step)

    for k in range(max_steps + 1):
        if k == max_steps:
            record(SessionStep(k, {}, HALT, value_after=evaluate(current).value, reason="max_steps"))
            break

        table = _nevr_table(current, procedures, costs, applied, workers, engine)
        top = _argmax_entry(table)
        chosen: Optional[Tuple[str, float, float]] = None
        via_lookahead = False
        if top is not None and top[1].nevr > 0:
            chosen = (top[0], top[1].t, top[1].nevr)
        elif lookahead == 2:
            la = lookahead2(current, procedures, costs, lookahead_samples, derive_seed(seed, k, 1), applied, engine)
            if la is not None and la.value > 0:
                chosen = (la.procedure_id, la.t, la.first_nevr)
                via_lookahead = True

        if chosen is None:
            record(SessionStep(k, table, HALT, value_after=evaluate(current).value, reason="no positive nevr"))
            break

        pid, t, gain = chosen
        proc = next(p for p in procedures if p.id == pid)
        log.info("step %d: apply %s at t=%g (nevr %.6g%s)", k, pid, t, gain, ", via lookahead" if via_lookahead else "")
        current, summary = _apply(current, proc, t, derive_seed(seed, k), consult)
        if proc.one_shot:
            applied.add(pid)
        record(SessionStep(k, table, pid, t, gain, summary, evaluate(current).value, via_lookahead))

    final = evaluate(current)
    session.final_action = current.actions[final.best_action]
    session.final_value = final.value
    session.final_model = current
    log.info("halt after %d refinement(s): %s (%.6g)", len(session.applied), session.final_action, final.value)
    return session
