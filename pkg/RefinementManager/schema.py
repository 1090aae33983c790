"""Model, spec and session files.

All three are UTF-8 JSON objects with a required "version": 1. Unknown keys
are rejected; every error carries a key path such as spec.cells[1].dist.hi
and, where it can be found, the line it came from.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

from engine import dists
from engine.control import (
    CostModel,
    Procedure,
    ca_procedure,
    cs_procedure,
    fixed_procedure,
    qp_procedure,
    qu_procedure,
)
from engine.errors import RefinementError
from engine.model import DecisionModel, check_probability_vector
from engine.refinements import (
    CASpec,
    CSSpec,
    MuDirectSpec,
    QPSpec,
    QUSpec,
    RefinementSpec,
    SSpec,
    make_hypotheses,
    validate_spec,
)

SCHEMA_VERSION = 1

SpecLike = Union[RefinementSpec, MuDirectSpec]


class SchemaError(RefinementError):
    def __init__(self, location: str, message: str, line: Optional[int] = None):
        self.location = location
        self.message = message
        self.line = line
        super().__init__(str(self))

    def __str__(self) -> str:
        where = f"{self.location}: " if self.location else ""
        at = f" (line {self.line})" if self.line else ""
        return f"{where}{self.message}{at}"


_LAST_KEY_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)(?:\[\d+\])*$")


def _line_of(text: str, location: str) -> Optional[int]:
    """Best-effort line of the last key named in location."""
    m = _LAST_KEY_RE.search(location)
    if not m:
        return None
    needle = f'"{m.group(1)}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def read_document(path: Path, root: str) -> Tuple[Dict[str, Any], str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError(root, f"file not found: {p}") from None
    except UnicodeDecodeError:
        raise SchemaError(root, f"{p} is not UTF-8 text") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(root, f"invalid JSON: {e.msg}", e.lineno) from None
    return obj, text


def _with_line(err: SchemaError, text: str) -> SchemaError:
    if err.line is None:
        err.line = _line_of(text, err.location)
    return err


# -- small validators ---------------------------------------------------------

def _object(obj: Any, where: str) -> Mapping[str, Any]:
    if not isinstance(obj, Mapping):
        raise SchemaError(where, "expected an object")
    return obj


def _keys(obj: Mapping[str, Any], where: str, required: Set[str], optional: Set[str] = frozenset()) -> None:
    for k in obj:
        if k not in required and k not in optional:
            raise SchemaError(f"{where}.{k}", "unknown key")
    for k in sorted(required):
        if k not in obj:
            raise SchemaError(f"{where}.{k}", "missing required key")


def _version(obj: Mapping[str, Any], where: str) -> None:
    v = obj.get("version")
    if v != SCHEMA_VERSION or isinstance(v, bool):
        raise SchemaError(f"{where}.version", f"expected {SCHEMA_VERSION}, got {v!r}")


def _number(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(where, "expected a number")
    return float(v)


def _int(v: Any, where: str, minimum: Optional[int] = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(where, "expected an integer")
    if minimum is not None and v < minimum:
        raise SchemaError(where, f"must be >= {minimum}")
    return v


def _list(v: Any, where: str, min_len: int = 0) -> List[Any]:
    if not isinstance(v, list):
        raise SchemaError(where, "expected a list")
    if len(v) < min_len:
        raise SchemaError(where, f"needs at least {min_len} entries")
    return v


def _labels(v: Any, where: str) -> List[str]:
    items = _list(v, where, 1)
    for i, x in enumerate(items):
        if not isinstance(x, str) or not x:
            raise SchemaError(f"{where}[{i}]", "expected a non-empty string")
    if len(set(items)) != len(items):
        raise SchemaError(where, "labels must be unique")
    return list(items)


def _ref(v: Any, labels: Sequence[str], where: str, what: str) -> int:
    if isinstance(v, str):
        if v not in labels:
            raise SchemaError(where, f"unknown {what} {v!r}")
        return list(labels).index(v)
    if isinstance(v, int) and not isinstance(v, bool):
        if not 0 <= v < len(labels):
            raise SchemaError(where, f"{what} index {v} out of range")
        return v
    raise SchemaError(where, f"expected a {what} label or index")


def _probs(v: Any, where: str) -> List[float]:
    items = _list(v, where, 1)
    values = [_number(x, f"{where}[{i}]") for i, x in enumerate(items)]
    try:
        check_probability_vector(values, where.rsplit(".", 1)[-1])
    except RefinementError as e:
        raise SchemaError(where, str(e)) from None
    return values


def parse_density(obj: Any, where: str) -> dists.Density1D:
    try:
        return dists.from_literal(obj)
    except (RefinementError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(where, str(e)) from None


# -- model --------------------------------------------------------------------

def parse_model(obj: Any, where: str = "model", check_version: bool = True) -> DecisionModel:
    obj = _object(obj, where)
    _keys(obj, where, {"actions", "states", "probabilities", "utilities"}, {"version", "description"})
    if check_version:
        _version(obj, where)
    actions = _labels(obj["actions"], f"{where}.actions")
    states = _labels(obj["states"], f"{where}.states")
    probs = _probs(obj["probabilities"], f"{where}.probabilities")
    if len(probs) != len(states):
        raise SchemaError(f"{where}.probabilities", f"has {len(probs)} entries for {len(states)} states")
    rows = _list(obj["utilities"], f"{where}.utilities")
    if len(rows) != len(actions):
        raise SchemaError(f"{where}.utilities", f"needs one row per action ({len(actions)}), got {len(rows)}")
    utils = []
    for k, row in enumerate(rows):
        row = _list(row, f"{where}.utilities[{k}]")
        if len(row) != len(states):
            raise SchemaError(f"{where}.utilities[{k}]", f"needs {len(states)} values, got {len(row)}")
        utils.append([_number(x, f"{where}.utilities[{k}][{i}]") for i, x in enumerate(row)])
    try:
        return DecisionModel(tuple(actions), tuple(states), probs, utils)
    except RefinementError as e:
        raise SchemaError(where, str(e)) from None


def load_model(path: Path) -> DecisionModel:
    obj, text = read_document(path, "model")
    try:
        return parse_model(obj)
    except SchemaError as e:
        raise _with_line(e, text) from None


# -- specs --------------------------------------------------------------------

_SPEC_KEYS: Dict[str, Tuple[Set[str], Set[str]]] = {
    "qu": ({"pi"}, set()),
    "qp": ({"cells"}, set()),
    "cs": ({"state", "sublabels", "conditional_probs", "cells"}, set()),
    "ca": ({"label", "phi"}, set()),
    "s": ({"y_labels", "hypotheses"}, set()),
    "mu-direct": ({"mu"}, {"default_value"}),
}


def parse_spec(obj: Any, model: DecisionModel, where: str = "spec", check_version: bool = True) -> SpecLike:
    obj = _object(obj, where)
    kind = obj.get("kind")
    if kind not in _SPEC_KEYS:
        raise SchemaError(f"{where}.kind", f"expected one of {', '.join(_SPEC_KEYS)}, got {kind!r}")
    required, optional = _SPEC_KEYS[kind]
    _keys(obj, where, required | {"kind"}, optional | {"version", "description"})
    if check_version:
        _version(obj, where)

    spec: SpecLike
    if kind == "qu":
        pi = _object(obj["pi"], f"{where}.pi")
        spec = QUSpec({
            _ref(label, model.states, f"{where}.pi.{label}", "state"): parse_density(d, f"{where}.pi.{label}")
            for label, d in pi.items()
        })
    elif kind == "qp":
        cells = {}
        for i, cell in enumerate(_list(obj["cells"], f"{where}.cells", 1)):
            cw = f"{where}.cells[{i}]"
            cell = _object(cell, cw)
            _keys(cell, cw, {"action", "state", "dist"})
            key = (_ref(cell["action"], model.actions, f"{cw}.action", "action"),
                   _ref(cell["state"], model.states, f"{cw}.state", "state"))
            if key in cells:
                raise SchemaError(cw, "cell listed twice")
            cells[key] = parse_density(cell["dist"], f"{cw}.dist")
        spec = QPSpec(cells)
    elif kind == "cs":
        state = _ref(obj["state"], model.states, f"{where}.state", "state")
        sublabels = _labels(obj["sublabels"], f"{where}.sublabels")
        cond = _probs(obj["conditional_probs"], f"{where}.conditional_probs")
        phi = {}
        for i, cell in enumerate(_list(obj["cells"], f"{where}.cells")):
            cw = f"{where}.cells[{i}]"
            cell = _object(cell, cw)
            _keys(cell, cw, {"action", "substate", "dist"})
            key = (_ref(cell["action"], model.actions, f"{cw}.action", "action"),
                   _ref(cell["substate"], sublabels, f"{cw}.substate", "sub-state"))
            if key in phi:
                raise SchemaError(cw, "cell listed twice")
            phi[key] = parse_density(cell["dist"], f"{cw}.dist")
        spec = CSSpec(state, tuple(sublabels), tuple(cond), phi)
    elif kind == "ca":
        label = obj["label"]
        if not isinstance(label, str) or not label:
            raise SchemaError(f"{where}.label", "expected a non-empty string")
        phi_obj = _object(obj["phi"], f"{where}.phi")
        phi = {
            _ref(s, model.states, f"{where}.phi.{s}", "state"): parse_density(d, f"{where}.phi.{s}")
            for s, d in phi_obj.items()
        }
        spec = CASpec(label, phi)
    elif kind == "s":
        y_labels = _labels(obj["y_labels"], f"{where}.y_labels")
        entries = []
        for i, h in enumerate(_list(obj["hypotheses"], f"{where}.hypotheses", 1)):
            hw = f"{where}.hypotheses[{i}]"
            h = _object(h, hw)
            _keys(h, hw, {"weight", "p_y", "cpt"})
            cpt = [_probs(row, f"{hw}.cpt[{j}]") for j, row in enumerate(_list(h["cpt"], f"{hw}.cpt", 1))]
            entries.append((_number(h["weight"], f"{hw}.weight"), _probs(h["p_y"], f"{hw}.p_y"), cpt))
        try:
            spec = SSpec(tuple(y_labels), make_hypotheses(entries))
        except RefinementError as e:
            raise SchemaError(f"{where}.hypotheses", str(e)) from None
    else:
        items: List[Union[float, dists.Density1D]] = []
        for i, x in enumerate(_list(obj["mu"], f"{where}.mu", 1)):
            if isinstance(x, (int, float)) and not isinstance(x, bool):
                items.append(float(x))
            else:
                items.append(parse_density(x, f"{where}.mu[{i}]"))
        default = obj.get("default_value")
        return MuDirectSpec(tuple(items), None if default is None else _number(default, f"{where}.default_value"))

    try:
        validate_spec(model, spec)
    except RefinementError as e:
        raise SchemaError(where, str(e)) from None
    return spec


def load_spec(path: Path, model: DecisionModel) -> SpecLike:
    obj, text = read_document(path, "spec")
    try:
        return parse_spec(obj, model)
    except SchemaError as e:
        raise _with_line(e, text) from None


# -- sessions -----------------------------------------------------------------

@dataclass
class Session:
    model: DecisionModel
    procedures: List[Procedure]
    costs: CostModel
    max_steps: int
    seed: int
    lookahead: int = 0
    lookahead_samples: Optional[int] = None


_SCHEDULE = {"width0", "half_life"}

_PROC_KEYS: Dict[str, Set[str]] = {
    "qu": {"state"} | _SCHEDULE,
    "qp": {"cells"} | _SCHEDULE,
    "cs": {"state", "sublabels", "conditional_probs"} | _SCHEDULE,
    "ca": {"label", "centers"} | _SCHEDULE,
    "fixed": {"specs"},
}


def _grid(v: Any, where: str) -> List[float]:
    values = [_number(x, f"{where}[{i}]") for i, x in enumerate(_list(v, where, 1))]
    for i, t in enumerate(values):
        if not t > 0:
            raise SchemaError(f"{where}[{i}]", "effort must be positive")
    return values


def parse_procedure(obj: Any, model: DecisionModel, where: str) -> Procedure:
    obj = _object(obj, where)
    kind = obj.get("kind")
    if kind not in _PROC_KEYS:
        raise SchemaError(f"{where}.kind", f"expected one of {', '.join(_PROC_KEYS)}, got {kind!r}")
    base = {"id", "kind"} | _PROC_KEYS[kind]
    if kind != "fixed":
        base |= {"grid"}
    _keys(obj, where, base, {"one_shot", "description"})
    pid = obj["id"]
    if not isinstance(pid, str) or not pid or pid == "HALT":
        raise SchemaError(f"{where}.id", "expected a non-empty string other than HALT")
    one_shot = obj.get("one_shot")
    if one_shot is not None and not isinstance(one_shot, bool):
        raise SchemaError(f"{where}.one_shot", "expected true or false")

    if kind == "fixed":
        table: Dict[float, Any] = {}
        for i, entry in enumerate(_list(obj["specs"], f"{where}.specs", 1)):
            ew = f"{where}.specs[{i}]"
            entry = _object(entry, ew)
            _keys(entry, ew, {"t", "spec"})
            t = _number(entry["t"], f"{ew}.t")
            if not t > 0:
                raise SchemaError(f"{ew}.t", "effort must be positive")
            spec_obj = entry["spec"]
            if isinstance(spec_obj, Mapping) and spec_obj.get("kind") == "mu-direct":
                raise SchemaError(f"{ew}.spec.kind", "mu-direct specs cannot be applied to a model")
            parse_spec(spec_obj, model, f"{ew}.spec", check_version=False)
            table[t] = lambda m, o=spec_obj: parse_spec(o, m, check_version=False)
        return fixed_procedure(pid, table, bool(one_shot))

    grid = _grid(obj["grid"], f"{where}.grid")
    width0 = _number(obj["width0"], f"{where}.width0")
    half_life = _number(obj["half_life"], f"{where}.half_life")
    if width0 < 0:
        raise SchemaError(f"{where}.width0", "must be >= 0")
    if not half_life > 0:
        raise SchemaError(f"{where}.half_life", "must be > 0")

    if kind == "qu":
        state = obj["state"]
        _ref(state, model.states, f"{where}.state", "state")
        return qu_procedure(pid, state, width0, half_life, grid, bool(one_shot))
    if kind == "qp":
        cells = []
        for i, cell in enumerate(_list(obj["cells"], f"{where}.cells", 1)):
            cw = f"{where}.cells[{i}]"
            cell = _object(cell, cw)
            _keys(cell, cw, {"action", "state"})
            _ref(cell["action"], model.actions, f"{cw}.action", "action")
            _ref(cell["state"], model.states, f"{cw}.state", "state")
            cells.append((cell["action"], cell["state"]))
        return qp_procedure(pid, cells, width0, half_life, grid, bool(one_shot))
    if kind == "cs":
        state = obj["state"]
        _ref(state, model.states, f"{where}.state", "state")
        sublabels = _labels(obj["sublabels"], f"{where}.sublabels")
        cond = _probs(obj["conditional_probs"], f"{where}.conditional_probs")
        if len(cond) != len(sublabels):
            raise SchemaError(f"{where}.conditional_probs", "needs one entry per sub-state")
        return cs_procedure(pid, state, sublabels, cond, width0, half_life, grid,
                            True if one_shot is None else one_shot)
    label = obj["label"]
    if not isinstance(label, str) or not label:
        raise SchemaError(f"{where}.label", "expected a non-empty string")
    centers_obj = _object(obj["centers"], f"{where}.centers")
    centers = {s: _number(v, f"{where}.centers.{s}") for s, v in centers_obj.items()}
    return ca_procedure(pid, label, centers, width0, half_life, grid, True if one_shot is None else one_shot)


def parse_session(obj: Any, base_dir: Path, where: str = "session") -> Session:
    obj = _object(obj, where)
    _keys(obj, where, {"model", "procedures", "costs", "max_steps", "seed"},
          {"version", "description", "lookahead", "lookahead_samples"})
    _version(obj, where)

    model_ref = obj["model"]
    if isinstance(model_ref, str):
        model = load_model((base_dir / model_ref).resolve())
    else:
        model = parse_model(model_ref, f"{where}.model", check_version=False)

    procedures = [parse_procedure(p, model, f"{where}.procedures[{i}]")
                  for i, p in enumerate(_list(obj["procedures"], f"{where}.procedures"))]
    ids = [p.id for p in procedures]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise SchemaError(f"{where}.procedures", f"duplicate id(s): {', '.join(dupes)}")

    costs_obj = _object(obj["costs"], f"{where}.costs")
    try:
        costs = CostModel.from_config(costs_obj)
    except RefinementError as e:
        raise SchemaError(f"{where}.costs", str(e)) from None

    lookahead = _int(obj.get("lookahead", 0), f"{where}.lookahead")
    if lookahead not in (0, 2):
        raise SchemaError(f"{where}.lookahead", "expected 0 or 2")
    samples = obj.get("lookahead_samples")
    return Session(
        model=model,
        procedures=procedures,
        costs=costs,
        max_steps=_int(obj["max_steps"], f"{where}.max_steps", 0),
        seed=_int(obj["seed"], f"{where}.seed", 0),
        lookahead=lookahead,
        lookahead_samples=None if samples is None else _int(samples, f"{where}.lookahead_samples", 1),
    )


def load_session(path: Path) -> Session:
    path = Path(path)
    obj, text = read_document(path, "session")
    try:
        return parse_session(obj, path.parent)
    except SchemaError as e:
        raise _with_line(e, text) from None
