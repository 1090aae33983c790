"""Exact one-dimensional densities.

A Density1D is a finite list of polynomial segments plus point masses. Segment
coefficients are in ascending powers of the local coordinate (t - lo), which
keeps affine maps, convolution and integration closed-form. Anything that
would push a segment past DEGREE_CAP raises DegreeCapExceeded so callers can
switch to quadrature or Monte Carlo.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import integrate

from engine.errors import DegreeCapExceeded, DensityError
from engine.model import merge_close

log = logging.getLogger("evr.dists")

DEGREE_CAP = 6
MASS_TOL = 1e-9
RENORM_TOL = 1e-6
NEG_TOL = 1e-12
BREAK_TOL = 1e-12
QUAD_TOL = 1e-10
BISECT_STEPS = 60

Piece = Tuple[float, float, np.ndarray]


def _compose_linear(coeffs: Sequence[float], a: float, b: float) -> np.ndarray:
    """Coefficients of p(a + b*s) given the coefficients of p."""
    out = np.zeros(1)
    lin = np.array([a, b], dtype=float)
    for c in reversed(list(coeffs)):
        out = npoly.polyadd(npoly.polymul(out, lin), [c])
    return out


def _shift(coeffs: Sequence[float], w: float) -> np.ndarray:
    return _compose_linear(coeffs, w, 1.0)


@dataclass(frozen=True)
class Segment:
    lo: float
    hi: float
    coeffs: Tuple[float, ...]

    def __post_init__(self) -> None:
        lo, hi = float(self.lo), float(self.hi)
        coeffs = tuple(float(c) for c in np.atleast_1d(np.asarray(self.coeffs, dtype=float)))
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise DensityError("segment bounds must be finite")
        if not hi > lo:
            raise DensityError(f"segment needs lo < hi (got [{lo}, {hi}])")
        if not coeffs or not all(math.isfinite(c) for c in coeffs):
            raise DensityError("segment coefficients must be finite")
        while len(coeffs) > 1 and coeffs[-1] == 0.0:
            coeffs = coeffs[:-1]
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def integral_to(self, s: float) -> float:
        """Mass on [lo, lo + s]."""
        return float(npoly.polyval(s, npoly.polyint(self.coeffs)))

    def mass(self) -> float:
        return self.integral_to(self.width)

    def moment(self, power: int, start: float = 0.0) -> float:
        """Integral of t**power * p over [lo + start, hi]."""
        tpow = np.ones(1)
        for _ in range(power):
            tpow = npoly.polymul(tpow, [self.lo, 1.0])
        anti = npoly.polyint(npoly.polymul(self.coeffs, tpow))
        return float(npoly.polyval(self.width, anti) - npoly.polyval(start, anti))

    def min_value(self) -> float:
        """Minimum of the density polynomial on [0, width]."""
        c = np.asarray(self.coeffs)
        pts = [0.0, self.width]
        if len(c) > 2:
            for r in npoly.polyroots(npoly.polyder(c)):
                if abs(r.imag) < 1e-12 and 0.0 < r.real < self.width:
                    pts.append(float(r.real))
        pts.extend(np.linspace(0.0, self.width, 17)[1:-1])
        return float(np.min(npoly.polyval(np.asarray(pts), c)))


@dataclass(frozen=True)
class Density1D:
    segments: Tuple[Segment, ...] = ()
    atoms: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        segs = tuple(sorted(self.segments, key=lambda s: s.lo))
        atoms = tuple(sorted(((float(x), float(m)) for x, m in self.atoms), key=lambda a: a[0]))
        if not segs and not atoms:
            raise DensityError("a density needs at least one segment or atom")
        for a, b in zip(segs[:-1], segs[1:]):
            if b.lo < a.hi - BREAK_TOL:
                raise DensityError(f"segments [{a.lo}, {a.hi}] and [{b.lo}, {b.hi}] overlap")
        for seg in segs:
            if seg.degree > DEGREE_CAP:
                raise DegreeCapExceeded(f"segment degree {seg.degree} exceeds cap {DEGREE_CAP}")
        for x, w in atoms:
            if not (math.isfinite(x) and math.isfinite(w)) or w < 0.0:
                raise DensityError("atoms need a finite location and a non-negative mass")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "atoms", atoms)
        total = self.mass()
        if abs(total - 1.0) > MASS_TOL:
            raise DensityError(f"total mass must be 1 (got {total:.12g})")

    @property
    def max_degree(self) -> int:
        return max((s.degree for s in self.segments), default=-1)

    def mass(self) -> float:
        return sum(s.mass() for s in self.segments) + sum(m for _, m in self.atoms)

    def is_point(self) -> bool:
        return not self.segments and len(self.atoms) == 1

    def support(self) -> Tuple[float, float]:
        los = [s.lo for s in self.segments] + [x for x, m in self.atoms if m > 0]
        his = [s.hi for s in self.segments] + [x for x, m in self.atoms if m > 0]
        return min(los), max(his)

    def breakpoints(self) -> List[float]:
        pts = [s.lo for s in self.segments] + [s.hi for s in self.segments] + [x for x, _ in self.atoms]
        return sorted(set(pts))

    def validate(self) -> "Density1D":
        """Full non-negativity check for user-supplied densities."""
        for seg in self.segments:
            if seg.min_value() < -NEG_TOL:
                raise DensityError(f"density is negative on [{seg.lo}, {seg.hi}]")
        return self


# -- constructors -------------------------------------------------------------

def point(at: float) -> Density1D:
    return Density1D((), ((float(at), 1.0),))


def uniform(lo: float, hi: float) -> Density1D:
    if not hi > lo:
        raise DensityError(f"uniform needs lo < hi (got {lo}, {hi})")
    return Density1D((Segment(lo, hi, (1.0 / (hi - lo),)),))


def triangular(lo: float, mode: float, hi: float) -> Density1D:
    if not hi > lo:
        raise DensityError(f"triangular needs lo < hi (got {lo}, {hi})")
    if not lo <= mode <= hi:
        raise DensityError(f"triangular mode {mode} outside [{lo}, {hi}]")
    h = 2.0 / (hi - lo)
    segs = []
    if mode > lo:
        segs.append(Segment(lo, mode, (0.0, h / (mode - lo))))
    if hi > mode:
        segs.append(Segment(mode, hi, (h, -h / (hi - mode))))
    return Density1D(tuple(segs))


def piecewise(segments: Iterable[Any], atoms: Iterable[Any] = ()) -> Density1D:
    """Segments as (lo, hi, coeffs) or {"lo", "hi", "coeffs"}; atoms as (at, mass).

    Total mass within RENORM_TOL of 1 is renormalized; anything further off is
    rejected.
    """
    raw_segs = []
    for s in segments:
        if isinstance(s, Mapping):
            raw_segs.append(Segment(s["lo"], s["hi"], tuple(s["coeffs"])))
        elif isinstance(s, Segment):
            raw_segs.append(s)
        else:
            lo, hi, coeffs = s
            raw_segs.append(Segment(lo, hi, tuple(np.atleast_1d(coeffs))))
    raw_atoms = []
    for a in atoms:
        if isinstance(a, Mapping):
            raw_atoms.append((float(a["at"]), float(a["mass"])))
        else:
            raw_atoms.append((float(a[0]), float(a[1])))
    if not raw_segs and not raw_atoms:
        raise DensityError("piecewise density needs at least one segment or atom")
    if any(m < 0.0 for _, m in raw_atoms):
        raise DensityError("atom masses must be non-negative")

    total = sum(s.mass() for s in raw_segs) + sum(m for _, m in raw_atoms)
    if abs(total - 1.0) > RENORM_TOL:
        raise DensityError(f"piecewise density has mass {total:.9g}, expected 1")
    scale = 1.0 / total
    segs = tuple(Segment(s.lo, s.hi, tuple(c * scale for c in s.coeffs)) for s in raw_segs)
    atom_list = tuple((x, m * scale) for x, m in raw_atoms if m > 0.0)
    return Density1D(segs, atom_list).validate()


_KINDS = {
    "point": point,
    "uniform": uniform,
    "triangular": triangular,
    "piecewise": piecewise,
}


def make(kind: str, **params: Any) -> Density1D:
    try:
        ctor = _KINDS[kind]
    except KeyError:
        raise DensityError(f"unknown density kind {kind!r} (known: {', '.join(_KINDS)})") from None
    try:
        return ctor(**params)
    except TypeError as exc:
        raise DensityError(f"bad parameters for {kind}: {exc}") from None


_LITERAL_KEYS = {
    "point": {"at"},
    "uniform": {"lo", "hi"},
    "triangular": {"lo", "mode", "hi"},
    "piecewise": {"segments", "atoms"},
}


def from_literal(obj: Any) -> Density1D:
    """Build a density from its JSON literal, e.g. {"type": "uniform", "lo": 0, "hi": 1}."""
    if isinstance(obj, bool):
        raise DensityError("density literal must be a number or an object")
    if isinstance(obj, (int, float)):
        return point(float(obj))
    if not isinstance(obj, Mapping):
        raise DensityError("density literal must be a number or an object")
    kind = obj.get("type")
    if kind == "mixture":
        extra = set(obj) - {"type", "components"}
        if extra:
            raise DensityError(f"unknown key(s) for mixture: {', '.join(sorted(extra))}")
        comps = []
        for c in obj.get("components", []):
            if not isinstance(c, Mapping) or set(c) != {"weight", "dist"}:
                raise DensityError("mixture components need exactly weight and dist")
            comps.append((float(c["weight"]), from_literal(c["dist"])))
        return mixture(comps)
    if kind not in _LITERAL_KEYS:
        raise DensityError(f"unknown density type {kind!r}")
    extra = set(obj) - _LITERAL_KEYS[kind] - {"type"}
    if extra:
        raise DensityError(f"unknown key(s) for {kind}: {', '.join(sorted(extra))}")
    params = {k: v for k, v in obj.items() if k != "type"}
    if kind == "piecewise":
        params.setdefault("atoms", [])
        for seg in params.get("segments", []):
            if not isinstance(seg, Mapping) or set(seg) != {"lo", "hi", "coeffs"}:
                raise DensityError("piecewise segments need exactly lo, hi and coeffs")
        for atom in params["atoms"]:
            if not isinstance(atom, Mapping) or set(atom) != {"at", "mass"}:
                raise DensityError("piecewise atoms need exactly at and mass")
    return make(kind, **params)


def to_literal(d: Density1D) -> Dict[str, Any]:
    if d.is_point():
        return {"type": "point", "at": d.atoms[0][0]}
    return {
        "type": "piecewise",
        "segments": [{"lo": s.lo, "hi": s.hi, "coeffs": list(s.coeffs)} for s in d.segments],
        "atoms": [{"at": x, "mass": m} for x, m in d.atoms],
    }


# -- arithmetic ---------------------------------------------------------------

def affine(d: Density1D, a: float, b: float) -> Density1D:
    """Distribution of a*X + b."""
    a, b = float(a), float(b)
    if a == 0.0:
        raise DensityError("affine scale must be nonzero (use point(b) for a constant)")
    segs = []
    for seg in d.segments:
        if a > 0:
            lo, hi, offset = a * seg.lo + b, a * seg.hi + b, 0.0
        else:
            lo, hi, offset = a * seg.hi + b, a * seg.lo + b, seg.width
        coeffs = _compose_linear(seg.coeffs, offset, 1.0 / a) / abs(a)
        segs.append(Segment(lo, hi, tuple(coeffs)))
    atoms = tuple((a * x + b, m) for x, m in d.atoms)
    return Density1D(tuple(segs), atoms)


def _merge_atoms(atoms: Iterable[Tuple[float, float]]) -> Tuple[Tuple[float, float], ...]:
    out: List[List[float]] = []
    for x, m in sorted(atoms):
        if m <= 0.0:
            continue
        if out and x - out[-1][0] <= BREAK_TOL:
            out[-1][1] += m
        else:
            out.append([x, m])
    return tuple((x, m) for x, m in out)


def _accumulate(pieces: Sequence[Piece]) -> Tuple[Segment, ...]:
    """Sum overlapping polynomial pieces into non-overlapping segments."""
    if not pieces:
        return ()
    knots = merge_close([p[0] for p in pieces] + [p[1] for p in pieces], BREAK_TOL)
    segs = []
    for k0, k1 in zip(knots[:-1], knots[1:]):
        total = np.zeros(1)
        covered = False
        for lo, hi, c in pieces:
            if lo <= k0 + BREAK_TOL and hi >= k1 - BREAK_TOL:
                total = npoly.polyadd(total, _shift(c, k0 - lo))
                covered = True
        if covered:
            segs.append(Segment(k0, k1, tuple(total)))
    return tuple(segs)


def _bivariate_at(table: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """sum_q sum_p table[q, p] * w**p * (alpha + beta*w)**q as a polynomial in w."""
    out = np.zeros(1)
    lin_pow = np.ones(1)
    for q in range(table.shape[0]):
        row = table[q]
        if np.any(row):
            out = npoly.polyadd(out, npoly.polymul(row, lin_pow))
        lin_pow = npoly.polymul(lin_pow, [alpha, beta])
    return out


def _convolve_segments(f: Segment, g: Segment) -> List[Piece]:
    cf, cg = np.asarray(f.coeffs), np.asarray(g.coeffs)
    l1, l2 = f.width, g.width

    # coefficient of s**q * w**p in f(s) * g(w - s), local coordinates
    table = np.zeros((len(cf) + len(cg), len(cg)))
    for a_pow, fa in enumerate(cf):
        for j, gj in enumerate(cg):
            for i in range(j + 1):
                table[a_pow + i, j - i] += fa * gj * math.comb(j, i) * (-1) ** i
    anti = np.zeros((table.shape[0] + 1, table.shape[1]))
    anti[1:, :] = table / np.arange(1, table.shape[0] + 1)[:, None]

    knots = merge_close([0.0, l1, l2, l1 + l2], BREAK_TOL)
    base = f.lo + g.lo
    pieces: List[Piece] = []
    for w0, w1 in zip(knots[:-1], knots[1:]):
        if w1 - w0 <= BREAK_TOL:
            continue
        mid = 0.5 * (w0 + w1)
        lower = (0.0, 0.0) if mid <= l2 else (-l2, 1.0)
        upper = (0.0, 1.0) if mid <= l1 else (l1, 0.0)
        h = npoly.polysub(_bivariate_at(anti, *upper), _bivariate_at(anti, *lower))
        pieces.append((base + w0, base + w1, _shift(h, w0)))
    return pieces


def convolve(d1: Density1D, d2: Density1D, cap: int = DEGREE_CAP) -> Density1D:
    """Distribution of X + Y for independent X ~ d1, Y ~ d2."""
    if d1.segments and d2.segments and d1.max_degree + d2.max_degree + 1 > cap:
        raise DegreeCapExceeded(
            f"convolution would reach degree {d1.max_degree + d2.max_degree + 1} (cap {cap})"
        )
    pieces: List[Piece] = []
    for f in d1.segments:
        for g in d2.segments:
            pieces.extend(_convolve_segments(f, g))
    for x, m in d1.atoms:
        for g in d2.segments:
            pieces.append((g.lo + x, g.hi + x, m * np.asarray(g.coeffs)))
    for x, m in d2.atoms:
        for f in d1.segments:
            pieces.append((f.lo + x, f.hi + x, m * np.asarray(f.coeffs)))
    atoms = _merge_atoms((x1 + x2, m1 * m2) for x1, m1 in d1.atoms for x2, m2 in d2.atoms)
    return Density1D(_accumulate(pieces), atoms)


def mixture(components: Sequence[Tuple[float, Density1D]]) -> Density1D:
    if not components:
        raise DensityError("mixture needs at least one component")
    weights = np.array([w for w, _ in components], dtype=float)
    if np.any(weights < -NEG_TOL):
        raise DensityError("mixture weights must be non-negative")
    if abs(float(weights.sum()) - 1.0) > MASS_TOL:
        raise DensityError(f"mixture weights must sum to 1 (got {weights.sum():.12g})")
    pieces: List[Piece] = []
    atoms: List[Tuple[float, float]] = []
    for w, (_, d) in zip(weights, components):
        if w <= 0.0:
            continue
        pieces.extend((s.lo, s.hi, w * np.asarray(s.coeffs)) for s in d.segments)
        atoms.extend((x, w * m) for x, m in d.atoms)
    return Density1D(_accumulate(pieces), _merge_atoms(atoms))


# -- functionals --------------------------------------------------------------

def mean(d: Density1D) -> float:
    total = 0.0
    for seg in d.segments:
        total += seg.moment(1)
    for x, m in d.atoms:
        total += x * m
    return total


def variance(d: Density1D) -> float:
    second = sum(seg.moment(2) for seg in d.segments) + sum(x * x * m for x, m in d.atoms)
    return max(0.0, second - mean(d) ** 2)


def support(d: Density1D) -> Tuple[float, float]:
    return d.support()


def cdf(d: Density1D, t: float) -> float:
    """Right-continuous: atoms at t count."""
    t = float(t)
    total = sum(m for x, m in d.atoms if x <= t)
    for seg in d.segments:
        if t >= seg.hi:
            total += seg.mass()
        elif t > seg.lo:
            total += seg.integral_to(t - seg.lo)
    return min(1.0, max(0.0, total))


def pdf(d: Density1D, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Density of the continuous part; atoms are not included."""
    arr = np.asarray(t, dtype=float)
    out = np.zeros_like(arr)
    segs = d.segments
    for i, seg in enumerate(segs):
        last = i == len(segs) - 1 or segs[i + 1].lo > seg.hi + BREAK_TOL
        inside = (arr >= seg.lo) & ((arr < seg.hi) | (last & (arr <= seg.hi)))
        if np.any(inside):
            out[inside] += npoly.polyval(arr[inside] - seg.lo, seg.coeffs)
    if out.ndim == 0:
        return float(out)
    return out


def upper_moment(d: Density1D, c: float) -> float:
    """Integral of t dF over t > c."""
    total = sum(x * m for x, m in d.atoms if x > c)
    for seg in d.segments:
        if seg.hi <= c:
            continue
        total += seg.moment(1, max(0.0, c - seg.lo))
    return total


def e_max_const(d: Density1D, c: float) -> float:
    """E[max(c, X)]."""
    return c * cdf(d, c) + upper_moment(d, c)


def _cdf_poly(d: Density1D, a: float, b: float) -> np.ndarray:
    """CDF on [a, b] as a polynomial in (t - a); [a, b] lies inside one segment or a gap."""
    base = cdf(d, a)
    for seg in d.segments:
        if seg.lo <= a + BREAK_TOL and seg.hi >= b - BREAK_TOL:
            return npoly.polyadd([base], npoly.polyint(_shift(seg.coeffs, a - seg.lo)))
    return np.array([base])


def e_max_indep(
    items: Sequence[Union[float, Density1D]], cap: int = DEGREE_CAP, tol: float = QUAD_TOL
) -> float:
    """E[max_k X_k] for independent items (constants or densities).

    Uses floor + integral of (1 - prod F_k) above floor, where floor is the
    largest constant or support minimum. The product of CDFs is integrated
    exactly while its degree stays within cap, otherwise by adaptive
    Gauss-Kronrod quadrature on each elementary interval.
    """
    if not items:
        raise DensityError("e_max_indep needs at least one item")
    consts: List[float] = []
    dens: List[Density1D] = []
    for item in items:
        if isinstance(item, Density1D):
            if item.is_point():
                consts.append(item.atoms[0][0])
            else:
                dens.append(item)
        else:
            consts.append(float(item))

    floor = max(consts + [d.support()[0] for d in dens])
    if not dens:
        return floor
    top = max(d.support()[1] for d in dens)
    if top <= floor:
        return floor

    cuts = [floor, top]
    for d in dens:
        cuts.extend(x for x in d.breakpoints() if floor < x < top)
    knots = merge_close(cuts, BREAK_TOL)

    exact = sum(d.max_degree + 1 for d in dens) <= cap
    if not exact:
        log.warning("e_max_indep: CDF product degree over cap, using quadrature on %d intervals", len(knots) - 1)

    area = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if exact:
            prod = np.ones(1)
            for d in dens:
                prod = npoly.polymul(prod, _cdf_poly(d, a, b))
            rest = npoly.polysub([1.0], prod)
            area += float(npoly.polyval(b - a, npoly.polyint(rest)))
        else:
            val, _err = integrate.quad(
                lambda t: 1.0 - math.prod(cdf(d, t) for d in dens),
                a,
                b,
                epsabs=tol,
                epsrel=1e-12,
                limit=200,
            )
            area += val
    return floor + area


# -- sampling -----------------------------------------------------------------

def _segment_inverse(seg: Segment, target: np.ndarray) -> np.ndarray:
    """Local coordinate s in [0, width] with integral_0^s p = target."""
    if seg.degree == 0:
        c0 = seg.coeffs[0]
        s = target / c0 if c0 > 0 else np.zeros_like(target)
        return np.clip(s, 0.0, seg.width)
    anti = npoly.polyint(seg.coeffs)
    lo = np.zeros_like(target)
    hi = np.full_like(target, seg.width)
    for _ in range(BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        below = npoly.polyval(mid, anti) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample(d: Density1D, rng: np.random.Generator, size: int) -> np.ndarray:
    """Inverse-CDF draws, one uniform per draw."""
    u = rng.random(size)
    comps: List[Tuple[float, Any, float]] = [(x, None, m) for x, m in d.atoms]
    comps += [(s.lo, s, s.mass()) for s in d.segments]
    comps.sort(key=lambda c: c[0])
    masses = np.array([c[2] for c in comps])
    cum = np.cumsum(masses)
    u = u * cum[-1]
    idx = np.minimum(np.searchsorted(cum, u, side="right"), len(comps) - 1)
    start = cum[idx] - masses[idx]
    out = np.empty(size)
    for i, (loc, seg, _) in enumerate(comps):
        sel = idx == i
        if not np.any(sel):
            continue
        if seg is None:
            out[sel] = loc
        else:
            out[sel] = seg.lo + _segment_inverse(seg, u[sel] - start[sel])
    return out
