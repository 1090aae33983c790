"""Monte Carlo oracle and refinement simulation.

Draws come from numpy's Philox (4x64) counter-based generator. The sample
space is cut into CHUNK-sized blocks; block i always uses
Philox(key=seed).jumped(i), and block results are concatenated in block
order, so a threaded run returns the same bits as a sequential one.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from engine import dists
from engine.errors import CapabilityError, SpecError
from engine.model import (
    PROB_TOL,
    DecisionModel,
    add_action,
    condition_on,
    evaluate,
    split_state,
    with_probabilities,
    with_utilities,
)
from engine.refinements import (
    CASpec,
    CSSpec,
    QPSpec,
    QUSpec,
    RefinementSpec,
    SSpec,
    validate_spec,
)

log = logging.getLogger("evr.oracle")

CHUNK = 65_536
DEFAULT_SAMPLES = 200_000
MAX_REDRAWS = 1_000

Draw = Callable[[np.random.Generator, int], Tuple[np.ndarray, int]]


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    stderr: float
    n: int
    seed: int
    rejection_rate: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n": self.n,
            "seed": self.seed,
            "rejection_rate": self.rejection_rate,
        }


@dataclass(frozen=True, eq=False)
class Theta:
    """One resolved refinement: the refined probability vector and utility matrix."""

    kind: str
    probabilities: np.ndarray
    utilities: np.ndarray
    hypothesis: Optional[int] = None
    rejected: int = 0


@dataclass(frozen=True, eq=False)
class RealizedOutcome:
    theta: Theta
    refined_model: DecisionModel
    realized_best_value: float

    def summary(self) -> Dict[str, Any]:
        best = evaluate(self.refined_model).best_action
        out: Dict[str, Any] = {
            "kind": self.theta.kind,
            "best_action": self.refined_model.actions[best],
            "realized_best_value": self.realized_best_value,
            "states": list(self.refined_model.states),
            "probabilities": [float(x) for x in self.refined_model.probabilities],
        }
        if self.theta.kind in ("qp", "cs", "ca"):
            out["utilities"] = [[float(x) for x in row] for row in self.refined_model.utilities]
        if self.theta.hypothesis is not None:
            out["hypothesis"] = self.theta.hypothesis
        return out


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit sub-seed for (seed, keys...)."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _generator(seed: int, chunk: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=int(seed) % 2**64)
    if chunk:
        bitgen = bitgen.jumped(chunk)
    return np.random.Generator(bitgen)


# -- batched draws -------------------------------------------------------------

@dataclass
class _Batch:
    probabilities: np.ndarray  # (n,) shared or (k, n)
    utilities: np.ndarray  # (m, n) shared or (k, m, n)
    hypotheses: Optional[np.ndarray] = None
    rejected: int = 0

    def best_values(self) -> np.ndarray:
        p, u = self.probabilities, self.utilities
        if u.ndim == 2:
            eus = p @ u.T
        elif p.ndim == 1:
            eus = u @ p
        else:
            eus = np.einsum("kmn,kn->km", u, p)
        return eus.max(axis=1)


def _draw_qu(model: DecisionModel, spec: QUSpec, rng: np.random.Generator, k: int) -> _Batch:
    listed = sorted(spec.pi_dists)
    rest = spec.remainder_state(model.n)
    blocks: List[np.ndarray] = []
    have = 0
    rejected = 0
    for _ in range(MAX_REDRAWS):
        need = k - have
        draws = np.column_stack([dists.sample(spec.pi_dists[i], rng, need) for i in listed])
        remainder = 1.0 - draws.sum(axis=1)
        ok = remainder >= -PROB_TOL
        rejected += int(need - ok.sum())
        block = np.zeros((int(ok.sum()), model.n))
        block[:, listed] = draws[ok]
        block[:, rest] = np.clip(remainder[ok], 0.0, None)
        blocks.append(block)
        have += block.shape[0]
        if have >= k:
            break
    else:
        raise SpecError("qu distributions almost never leave a non-negative remainder")
    return _Batch(np.vstack(blocks)[:k], np.asarray(model.utilities), rejected=rejected)


def _draw_batch(model: DecisionModel, spec: RefinementSpec, rng: np.random.Generator, k: int) -> _Batch:
    p, u = np.asarray(model.probabilities), np.asarray(model.utilities)
    if isinstance(spec, QUSpec):
        return _draw_qu(model, spec, rng, k)
    if isinstance(spec, QPSpec):
        ub = np.repeat(u[None, :, :], k, axis=0)
        for (a, s), d in sorted(spec.cell_dists.items()):
            ub[:, a, s] = dists.sample(d, rng, k)
        return _Batch(p, ub)
    if isinstance(spec, CSSpec):
        s = len(spec.sublabels)
        base = split_state(model, spec.state, spec.sublabels, spec.conditional_probs, np.repeat(u[:, [spec.state]], s, axis=1))
        ub = np.repeat(np.asarray(base.utilities)[None, :, :], k, axis=0)
        for (a, j), d in sorted(spec.phi_dists.items()):
            ub[:, a, spec.state + j] = dists.sample(d, rng, k)
        return _Batch(np.asarray(base.probabilities), ub)
    if isinstance(spec, CASpec):
        means = [dists.mean(spec.phi_dists[i]) for i in range(model.n)]
        base = add_action(model, spec.label, means)
        ub = np.repeat(np.asarray(base.utilities)[None, :, :], k, axis=0)
        for i in range(model.n):
            ub[:, model.m, i] = dists.sample(spec.phi_dists[i], rng, k)
        return _Batch(p, ub)
    if isinstance(spec, SSpec):
        w = spec.weights / spec.weights.sum()
        idx = rng.choice(len(spec.hypotheses), size=k, p=w)
        return _Batch(spec.marginals()[idx], u, hypotheses=idx)
    raise SpecError(f"unsupported refinement spec {type(spec).__name__}")


def _profile_draw(profile: Any) -> Draw:
    def draw(rng: np.random.Generator, k: int) -> Tuple[np.ndarray, int]:
        if profile.params:
            theta = np.column_stack([dists.sample(d, rng, k) for d in profile.params])
        else:
            theta = np.zeros((k, 0))
        mu = profile.constants + theta @ profile.weights.T
        return mu.max(axis=1), 0

    return draw


def _realized_draw(model: DecisionModel, spec: RefinementSpec) -> Draw:
    def draw(rng: np.random.Generator, k: int) -> Tuple[np.ndarray, int]:
        batch = _draw_batch(model, spec, rng, k)
        return batch.best_values(), batch.rejected

    return draw


def _map_chunks(draw: Draw, n: int, seed: int, workers: Optional[int]) -> List[Tuple[np.ndarray, int]]:
    if n < 1:
        raise SpecError("Monte Carlo needs n >= 1")
    sizes = [min(CHUNK, n - i * CHUNK) for i in range(math.ceil(n / CHUNK))]

    def run(i: int) -> Tuple[np.ndarray, int]:
        return draw(_generator(seed, i), sizes[i])

    if workers and workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(sizes))))
    return [run(i) for i in range(len(sizes))]


def _run_chunks(draw: Draw, n: int, seed: int, workers: Optional[int]) -> McEstimate:
    parts = _map_chunks(draw, n, seed, workers)
    values = np.concatenate([v for v, _ in parts])
    rejected = sum(r for _, r in parts)
    if values.min() == values.max():
        estimate, stderr = float(values[0]), 0.0
    else:
        estimate = float(values.mean())
        stderr = float(values.std(ddof=1) / math.sqrt(n))
    rate = rejected / (rejected + n)
    if rejected:
        log.warning("redrew %d of %d parameter draws with a negative remainder (%.2f%%)", rejected, rejected + n, 100 * rate)
    return McEstimate(estimate=estimate, stderr=stderr, n=n, seed=int(seed), rejection_rate=rate)


# -- public surface ------------------------------------------------------------

def mc_value_with(
    model: DecisionModel,
    spec: RefinementSpec,
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> McEstimate:
    """Monte Carlo E[max_k mu_k]; samples the mu profile when there is one."""
    # evr imports this module for its fallback engine
    from engine.evr import compile_mu

    validate_spec(model, spec)
    n = DEFAULT_SAMPLES if n is None else int(n)
    try:
        draw = _profile_draw(compile_mu(model, spec))
    except CapabilityError:
        draw = _realized_draw(model, spec)
    return _run_chunks(draw, n, seed, workers)


def simulate_refinement(
    model: DecisionModel,
    spec: RefinementSpec,
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> McEstimate:
    """Mean realized best value over n simulated refinements."""
    validate_spec(model, spec)
    n = DEFAULT_SAMPLES if n is None else int(n)
    return _run_chunks(_realized_draw(model, spec), n, seed, workers)


def qu_operative_probabilities(
    model: DecisionModel,
    spec: QUSpec,
    n: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Tuple[np.ndarray, float]:
    """Mean of the accepted probability vectors and the rejection rate.

    Uses the same chunks and generators as mc_value_with, so both halves of
    an EVR see the identical truncated sample.
    """
    validate_spec(model, spec)
    if not isinstance(spec, QUSpec):
        raise SpecError(f"expected a qu refinement, got {spec.kind}")
    n = DEFAULT_SAMPLES if n is None else int(n)

    def draw(rng: np.random.Generator, k: int) -> Tuple[np.ndarray, int]:
        batch = _draw_qu(model, spec, rng, k)
        return batch.probabilities.sum(axis=0), batch.rejected

    parts = _map_chunks(draw, n, seed, workers)
    probs = np.sum([s for s, _ in parts], axis=0) / n
    rejected = sum(r for _, r in parts)
    return probs, rejected / (rejected + n)


def sample_outcome(model: DecisionModel, spec: RefinementSpec, seed: int) -> Theta:
    validate_spec(model, spec)
    batch = _draw_batch(model, spec, _generator(seed, 0), 1)
    probs = batch.probabilities if batch.probabilities.ndim == 1 else batch.probabilities[0]
    utils = batch.utilities if batch.utilities.ndim == 2 else batch.utilities[0]
    hyp = None if batch.hypotheses is None else int(batch.hypotheses[0])
    return Theta(spec.kind, probs.copy(), utils.copy(), hyp, batch.rejected)


def realize(model: DecisionModel, spec: RefinementSpec, theta: Theta) -> RealizedOutcome:
    """Apply a resolved refinement to the model."""
    if isinstance(spec, QUSpec):
        refined = with_probabilities(model, theta.probabilities)
    elif isinstance(spec, QPSpec):
        refined = with_utilities(model, theta.utilities)
    elif isinstance(spec, CSSpec):
        s = len(spec.sublabels)
        cols = theta.utilities[:, spec.state:spec.state + s]
        refined = split_state(model, spec.state, spec.sublabels, spec.conditional_probs, cols)
    elif isinstance(spec, CASpec):
        refined = add_action(model, spec.label, theta.utilities[model.m])
    elif isinstance(spec, SSpec):
        if theta.hypothesis is None:
            raise SpecError("structural outcome needs a hypothesis index")
        h = spec.hypotheses[theta.hypothesis]
        refined = condition_on(model, spec.y_labels, h.p_y, h.cpt)
    else:
        raise SpecError(f"unsupported refinement spec {type(spec).__name__}")
    return RealizedOutcome(theta, refined, evaluate(refined).value)
