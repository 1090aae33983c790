import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from engine import dists
from engine.control import HALT, SessionStep, greedy_controller
from engine.errors import CapabilityError, RefinementError
from engine.evr import ENGINE_CHOICES, EVRReport, evr, evr_mu_direct
from engine.model import DecisionModel, evaluate, evpi
from engine.oracle import McEstimate, mc_value_with, simulate_refinement
from engine.refinements import MuDirectSpec
from figures import DEFAULT_POINTS, FIGURES, mustar_vs_mu, pdf_table, policy_vs_pi, write_csv
from schema import SchemaError, load_model, load_session, load_spec, parse_density
from shared.jsonio import append_jsonl, atomic_write_json, dumps, reset_file
from shared.logging_setup import setup_logging
from shared.settings import APP_DIR, SettingsError, load_settings, resolve_workers

log = logging.getLogger("evr.cli")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CAPABILITY = 3


class Output:
    """Prints reports: `digits` significant digits, or full-precision JSON."""

    def __init__(self, as_json: bool, digits: int, stream=None):
        self.as_json = as_json
        self.digits = digits
        self.stream = stream or sys.stdout

    def num(self, x: Optional[float]) -> str:
        if x is None:
            return "-"
        return f"{x:.{self.digits}g}"

    def line(self, text: str = "") -> None:
        print(text, file=self.stream)

    def json(self, obj: Any) -> None:
        print(dumps(obj), file=self.stream)


# -- eval ---------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace, cfg: Dict[str, Any], out: Output) -> int:
    model = load_model(Path(args.model))
    ev = evaluate(model)
    gap = evpi(model)
    if out.as_json:
        out.json({
            "actions": list(model.actions),
            "states": list(model.states),
            "per_action_eu": {a: float(v) for a, v in zip(model.actions, ev.per_action_eu)},
            "best_action": model.actions[ev.best_action],
            "value": ev.value,
            "evpi": gap,
        })
        return EXIT_OK

    width = max(len(a) for a in model.actions)
    out.line(f"model: {Path(args.model).name} ({model.m} actions, {model.n} states)")
    for a, v in zip(model.actions, ev.per_action_eu):
        out.line(f"  {a:<{width}}  {out.num(float(v))}")
    out.line(f"best:  {model.actions[ev.best_action]}")
    out.line(f"value: {out.num(ev.value)}")
    out.line(f"evpi:  {out.num(gap)}")
    return EXIT_OK


# -- evr ----------------------------------------------------------------------

def _action_label(model: DecisionModel, k: int) -> str:
    return model.actions[k] if 0 <= k < model.m else f"#{k}"


def _print_report(report: EVRReport, model: DecisionModel, out: Output) -> None:
    if out.as_json:
        out.json({
            "kind": report.kind,
            "engine": report.engine,
            "default_action": _action_label(model, report.default_action),
            "value_without": float(report.value_without),
            "value_with": float(report.value_with),
            "evr": float(report.evr),
            "mc_stderr": None if report.mc_stderr is None else float(report.mc_stderr),
            "rejection_rate": float(report.rejection_rate),
        })

        return
    out.line(f"kind:          {report.kind}")
    out.line(f"engine:        {report.engine}")
    out.line(f"default:       {_action_label(model, report.default_action)}")
    out.line(f"value_without: {out.num(report.value_without)}")
    out.line(f"value_with:    {out.num(report.value_with)}")
    out.line(f"evr:           {out.num(report.evr)}")
    if report.mc_stderr is not None:
        out.line(f"stderr:        {out.num(report.mc_stderr)}")
    if report.rejection_rate:
        out.line(f"rejected:      {out.num(report.rejection_rate)}")


def cmd_evr(args: argparse.Namespace, cfg: Dict[str, Any], out: Output) -> int:
    model = load_model(Path(args.model))
    spec = load_spec(Path(args.spec), model)
    if isinstance(spec, MuDirectSpec):
        if args.engine == "mc":
            raise CapabilityError("mu-direct specs are evaluated exactly; there is no Monte Carlo path")
        report = evr_mu_direct(spec)
    else:
        n = args.n if args.n is not None else cfg["oracle"]["samples"]
        report = evr(model, spec, engine=args.engine, n=n, seed=args.seed, workers=resolve_workers(cfg))
    _print_report(report, model, out)
    return EXIT_OK


# -- oracle -------------------------------------------------------------------

def cmd_oracle(args: argparse.Namespace, cfg: Dict[str, Any], out: Output) -> int:
    model = load_model(Path(args.model))
    spec = load_spec(Path(args.spec), model)
    if isinstance(spec, MuDirectSpec):
        raise SchemaError("spec.kind", "mu-direct specs have no model to simulate")
    n = args.n if args.n is not None else cfg["oracle"]["samples"]
    run = mc_value_with if args.mode == "value" else simulate_refinement
    est: McEstimate = run(model, spec, n=n, seed=args.seed, workers=resolve_workers(cfg))
    if out.as_json:
        out.json({"mode": args.mode, **est.as_dict()})
        return EXIT_OK
    out.line(f"mode:     {args.mode}")
    out.line(f"estimate: {out.num(est.estimate)}")
    out.line(f"stderr:   {out.num(est.stderr)}")
    out.line(f"n:        {est.n}")
    out.line(f"seed:     {est.seed}")
    if est.rejection_rate:
        out.line(f"rejected: {out.num(est.rejection_rate)}")
    return EXIT_OK


# -- control ------------------------------------------------------------------

def cmd_control(args: argparse.Namespace, cfg: Dict[str, Any], out: Output) -> int:
    session = load_session(Path(args.session))
    lookahead = session.lookahead if args.lookahead is None else args.lookahead
    samples = session.lookahead_samples or cfg["control"]["lookahead_samples"]

    hooks: List[Callable[[SessionStep], None]] = []
    if args.trace:
        trace = Path(args.trace)
        reset_file(trace)
        hooks.append(lambda step: append_jsonl(trace, step.as_dict()))
    if not out.as_json:
        hooks.append(lambda step: out.line(_step_line(step, out)))

    def on_step(step: SessionStep) -> None:
        for hook in hooks:
            hook(step)

    result = greedy_controller(
        session.model,
        session.procedures,
        session.costs,
        session.max_steps,
        seed=session.seed,
        lookahead=lookahead,
        lookahead_samples=samples,
        on_step=on_step,
        workers=resolve_workers(cfg),
    )
    doc = {
        "seed": session.seed,
        "lookahead": lookahead,
        "max_steps": session.max_steps,
        "costs": session.costs.description,
        **result.as_dict(),
    }
    if args.out:
        atomic_write_json(Path(args.out), doc)
        log.info("session log written to %s", args.out)

    if out.as_json:
        out.json(doc)
    else:
        out.line(f"final: {result.final_action} ({out.num(result.final_value)}) after {len(result.applied)} refinement(s)")
    return EXIT_OK


def _step_line(step: SessionStep, out: Output) -> str:
    if step.chosen == HALT:
        return f"step {step.index}: HALT ({step.reason})"
    via = ", via lookahead" if step.via_lookahead else ""
    best = (step.outcome or {}).get("best_action", "?")
    return (f"step {step.index}: {step.chosen} at t={out.num(step.t)} "
            f"(nevr {out.num(step.nevr)}{via}) -> {best} {out.num(step.value_after)}")


# -- figure -------------------------------------------------------------------

def _load_density(raw: str) -> dists.Density1D:
    """A density literal given inline ("{...}") or as a path to a JSON file."""
    text = raw.strip()
    if not text.startswith("{"):
        try:
            text = Path(raw).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise SchemaError("density", f"file not found: {raw}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("density", f"invalid JSON: {e.msg}", e.lineno) from None
    return parse_density(obj, "density")


def _need(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise SchemaError("figure", f"{args.name} needs {', '.join(missing)}")


def cmd_figure(args: argparse.Namespace, cfg: Dict[str, Any], out: Output) -> int:
    if args.name == "policy-vs-pi":
        _need(args, "model")
        model = load_model(Path(args.model))
        df = policy_vs_pi(model, args.state if args.state is not None else 0, args.points)
    elif args.name == "mustar-vs-mu":
        _need(args, "constants", "lo", "hi")
        df = mustar_vs_mu(args.constants, args.lo, args.hi, args.points)
    else:
        _need(args, "density")
        df = pdf_table(_load_density(args.density), args.points)

    if out.as_json and not args.out:
        out.json(df.to_dict(orient="records"))
    else:
        write_csv(df, args.out, out.stream)
    if args.out:
        log.info("%s: %d rows written to %s", args.name, len(df), args.out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="run_evr.py", description="Expected value of refinement toolkit.")
    ap.add_argument("--config", default=None, help="Settings file (default: RefinementManager/config/settings.json).")
    ap.add_argument("--json", action="store_true", help="Machine-readable output at full precision.")
    ap.add_argument("--log-level", default=None, help="Override logging.level (DEBUG, INFO, WARNING, ...).")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="Expected utilities, best action and EVPI of a model.")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("evr", help="Expected value of a refinement.")
    p.add_argument("--model", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--engine", choices=ENGINE_CHOICES, default="auto")
    p.add_argument("--n", type=int, default=None, help="Monte Carlo samples (default: oracle.samples).")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evr)

    p = sub.add_parser("oracle", help="Monte Carlo estimate of the value with refinement.")
    p.add_argument("--model", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--mode", choices=("value", "simulate"), default="value",
                   help="value: sample per-action values; simulate: sample and solve refined models.")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("control", help="Run the refinement controller on a session file.")
    p.add_argument("--session", required=True)
    p.add_argument("--lookahead", type=int, choices=(0, 2), default=None)
    p.add_argument("--out", default=None, help="Write the session log (JSON).")
    p.add_argument("--trace", default=None, help="Stream one JSON line per step.")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("figure", help="Emit figure data as CSV.")
    p.add_argument("name", choices=FIGURES)
    p.add_argument("--model", default=None)
    p.add_argument("--state", default=None, help="State whose probability is swept (label; default: first).")
    p.add_argument("--constants", type=float, nargs="+", default=None)
    p.add_argument("--lo", type=float, default=None)
    p.add_argument("--hi", type=float, default=None)
    p.add_argument("--density", default=None, help="Density literal (inline JSON or a file).")
    p.add_argument("--points", type=int, default=DEFAULT_POINTS)
    p.add_argument("--out", default=None, help="CSV path (default: stdout).")
    p.set_defaults(func=cmd_figure)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = load_settings(Path(args.config) if args.config else None)
    except SettingsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    setup_logging(f"evr-{args.command}", cfg, APP_DIR, args.log_level)
    out = Output(args.json, int(cfg["output"]["digits"]))

    try:
        return args.func(args, cfg, out)
    except CapabilityError as e:
        log.error("%s", e)
        return EXIT_CAPABILITY
    except (RefinementError, OSError) as e:
        log.error("%s", e)
        return EXIT_INPUT
    except Exception:
        log.exception("unexpected error in %s", args.command)
        return EXIT_INTERNAL
