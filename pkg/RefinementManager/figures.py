"""Figure data as tables (pandas DataFrames); plotting is left to the reader."""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd

from engine import dists
from engine.errors import RefinementError
from engine.model import DecisionModel, Ref, argmax_with_ties, policy_regions, two_state_forms

DEFAULT_POINTS = 1001

FIGURES = ("policy-vs-pi", "mustar-vs-mu", "pdf")


def _grid(lo: float, hi: float, points: int, extra: Sequence[float] = ()) -> np.ndarray:
    if points < 2:
        raise RefinementError("a figure grid needs at least 2 points")
    base = np.linspace(lo, hi, points)
    return np.unique(np.concatenate([base, np.asarray(list(extra), dtype=float)]))


def _flag(grid: np.ndarray, marks: Sequence[float]) -> np.ndarray:
    flags = np.zeros(len(grid), dtype=bool)
    for x in marks:
        flags |= grid == x
    return flags


def policy_vs_pi(model: DecisionModel, state: Ref, points: int = DEFAULT_POINTS) -> pd.DataFrame:
    """Best action and its value as p(state) sweeps [0, 1] on a two-state model.

    The exact switch points are added to the grid and flagged in `breakpoint`.
    """
    consts, slopes = two_state_forms(model, state)
    switches = [r.hi for r in policy_regions(model, state)[:-1]]
    pi = _grid(0.0, 1.0, points, switches)
    best, value = [], []
    for x in pi:
        eus = consts + slopes * x
        k = argmax_with_ties(eus)
        best.append(model.actions[k])
        value.append(float(eus[k]))
    return pd.DataFrame({
        "pi": pi,
        "best_action": best,
        "value": value,
        "breakpoint": _flag(pi, switches),
    })


def mustar_vs_mu(constants: Sequence[float], lo: float, hi: float, points: int = DEFAULT_POINTS) -> pd.DataFrame:
    """max(constants, mu) as one action's value mu varies over [lo, hi]."""
    if len(constants) == 0:
        raise RefinementError("mustar-vs-mu needs at least one constant")
    if not hi > lo:
        raise RefinementError(f"need lo < hi (got {lo}, {hi})")
    top = max(float(c) for c in constants)
    kinks = [top] if lo <= top <= hi else []
    mu = _grid(lo, hi, points, kinks)
    return pd.DataFrame({
        "mu": mu,
        "mustar": np.maximum(mu, top),
        "kink": _flag(mu, kinks),
    })


def pdf_table(d: dists.Density1D, points: int = DEFAULT_POINTS) -> pd.DataFrame:
    lo, hi = d.support()
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    t = _grid(lo, hi, points, [x for x in d.breakpoints() if lo <= x <= hi])
    return pd.DataFrame({
        "t": t,
        "pdf": dists.pdf(d, t),
        "cdf": [dists.cdf(d, x) for x in t],
    })


def write_csv(df: pd.DataFrame, out: Optional[Union[str, Path]] = None, stream: Optional[TextIO] = None) -> None:
    """Comma-separated, header row, LF line endings; to stdout when out is None."""
    if out is None:
        df.to_csv(stream or sys.stdout, index=False, lineterminator="\n")
        return
    p = Path(out)
    p.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(p, index=False, lineterminator="\n")
