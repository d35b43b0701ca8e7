"""Scale functions, speed measures, and diffusion specifications on a star graph.

Each edge carries a strictly increasing scale function s_e with s_e(0) = 0 and
a locally finite positive speed measure m_e on (0, l_e).  The measure is kept
in a three-part decomposition (absolutely continuous density, finite list of
atoms, singular continuous CDF) because natural examples use all three kinds:
a diffusion can be slowed on a Cantor set, carry sticky thresholds (atoms),
and move with a smooth density at the same time.

The module also provides Stieltjes integration against such measures, the
change of scale that reduces any specification to natural scale on every
edge, and the four-way boundary classification (regular / exit / entry /
natural) from the pair of nested scale-speed integrals.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import simpson

from .errors import DomainError, InconclusiveBoundaryError, SpecError
from .graph import VERTEX, GraphPoint, StarGraph

__all__ = [
    "NaturalScale", "LinearScale", "TabulatedScale", "IntegratedScale",
    "cir_scale", "ConstantDensity", "PowerDensity", "BoundaryPowerDensity",
    "TabulatedDensity", "CallableDensity", "cir_density", "CantorCDF",
    "TabulatedCDF", "EdgeMeasure", "ScaleFunction", "SpeedMeasure",
    "DiffusionSpec", "BoundaryKind", "scale_eval", "inverse_scale_eval",
    "measure_integral", "pushforward_spec", "classify_boundary",
    "boundary_integrals", "is_feller_dynkin", "natural_spec",
]

QUAD_TOL = 1e-9           # default absolute quadrature tolerance per integral
_MAX_QUAD_NODES = 2 ** 15 + 1


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------

def _adaptive_quad(fn, a: float, b: float, tol: float) -> float:
    """Composite Simpson with grid doubling and a Richardson-style stop."""
    if b <= a:
        return 0.0
    n = 17
    xs = np.linspace(a, b, n)
    val = simpson(fn(xs), x=xs)
    while n < _MAX_QUAD_NODES:
        n = 2 * (n - 1) + 1
        xs = np.linspace(a, b, n)
        new = simpson(fn(xs), x=xs)
        if not np.isfinite(new):
            return new
        if abs(new - val) <= max(tol, 4e-16 * abs(new)):
            return new
        val = new
    return val


def _stieltjes_quad(g, cdf, a: float, b: float, tol: float) -> float:
    """Riemann-Stieltjes sums of g against a continuous CDF, doubled until stable."""
    if b <= a:
        return 0.0
    n = 65
    val = None
    while n < _MAX_QUAD_NODES:
        xs = np.linspace(a, b, n)
        dF = np.diff(cdf(xs))
        mids = 0.5 * (xs[:-1] + xs[1:])
        new = float(np.dot(g(mids), dF))
        if val is not None and abs(new - val) <= max(tol, 4e-16 * abs(new)):
            return new
        val = new
        n = 2 * (n - 1) + 1
    return val


def _as_array_fn(g):
    """Wrap g so it accepts and returns ndarrays even if written for scalars."""
    def fn(xs):
        out = g(xs)
        out = np.asarray(out, dtype=float)
        if out.shape != np.shape(xs):
            out = np.broadcast_to(out, np.shape(xs)).copy()
        return out
    return fn


# ---------------------------------------------------------------------------
# scale function families
# ---------------------------------------------------------------------------

class NaturalScale:
    """s(x) = x."""

    is_natural = True
    unbounded = True

    def value(self, x):
        return np.asarray(x, dtype=float)

    def inverse(self, y):
        return np.asarray(y, dtype=float)

    def derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    @property
    def deriv0(self) -> float:
        return 1.0

    def describe(self):
        return {"kind": "natural"}


class LinearScale:
    """s(x) = slope * x with slope > 0."""

    def __init__(self, slope: float):
        if not slope > 0:
            raise SpecError(f"scale slope must be > 0, got {slope}")
        self.slope = float(slope)

    is_natural_attr = None
    unbounded = True

    @property
    def is_natural(self) -> bool:
        return self.slope == 1.0

    def value(self, x):
        return self.slope * np.asarray(x, dtype=float)

    def inverse(self, y):
        return np.asarray(y, dtype=float) / self.slope

    def derivative(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.slope)

    @property
    def deriv0(self) -> float:
        return self.slope

    def describe(self):
        return {"kind": "linear", "slope": self.slope}


class TabulatedScale:
    """Strictly increasing table with monotone piecewise-linear interpolation.

    The inverse is evaluated on the same table with the roles of knots and
    values swapped, so round trips are exact at table nodes.
    """

    unbounded = False

    def __init__(self, knots: Sequence[float], values: Sequence[float]):
        k = np.asarray(knots, dtype=float)
        v = np.asarray(values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise SpecError("scale table needs matching 1-d knots/values, >= 2 nodes")
        if k[0] != 0.0 or v[0] != 0.0:
            raise SpecError("scale tables must start at s(0) = 0")
        if np.any(np.diff(k) <= 0) or np.any(np.diff(v) <= 0):
            raise SpecError("scale table must be strictly increasing")
        self.knots = k
        self.values = v

    @property
    def is_natural(self) -> bool:
        return bool(np.array_equal(self.knots, self.values))

    def _check_range(self, x, hi, what):
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-15) or np.any(x > hi * (1 + 1e-12) + 1e-300):
            raise DomainError(f"{what} outside tabulated range [0, {hi}]")
        return np.clip(x, 0.0, hi)

    def value(self, x):
        x = self._check_range(x, self.knots[-1], "radius")
        return np.interp(x, self.knots, self.values)

    def inverse(self, y):
        y = self._check_range(y, self.values[-1], "scaled radius")
        return np.interp(y, self.values, self.knots)

    def derivative(self, x):
        x = self._check_range(x, self.knots[-1], "radius")
        idx = np.clip(np.searchsorted(self.knots, x, side="right"), 1,
                      self.knots.size - 1)
        return ((self.values[idx] - self.values[idx - 1])
                / (self.knots[idx] - self.knots[idx - 1]))

    @property
    def deriv0(self) -> float:
        return float((self.values[1] - self.values[0]) / (self.knots[1] - self.knots[0]))

    def describe(self):
        return {"kind": "tabulated",
                "knots": self.knots.tolist(), "values": self.values.tolist()}


class IntegratedScale:
    """Scale defined through a closed-form right-derivative, s(x) = int_0^x s'.

    The antiderivative is cached on a fine grid that is extended on demand, so
    the scale works on unbounded edges.  Evaluation between cached nodes is
    piecewise linear, the inverse reads the same table backwards.
    """

    unbounded = True
    is_natural = False

    def __init__(self, sprime: Callable, *, nodes_per_unit: int = 512,
                 label: str = "integrated"):
        self._sprime = sprime
        self._step = 1.0 / nodes_per_unit
        self._label = label
        self.knots = np.array([0.0])
        self.values = np.array([0.0])
        self._extend(1.0)

    def _extend(self, upto: float) -> None:
        if upto <= self.knots[-1]:
            return
        upto = max(upto * 1.05, self.knots[-1] + self._step)
        new = np.arange(self.knots[-1] + self._step, upto + self._step, self._step)
        grid = np.concatenate(([self.knots[-1]], new))
        # Simpson on each sub-cell keeps the cumulative table at ~1e-10 accuracy
        mid = 0.5 * (grid[:-1] + grid[1:])
        fa, fm, fb = self._sprime(grid[:-1]), self._sprime(mid), self._sprime(grid[1:])
        inc = np.diff(grid) / 6.0 * (fa + 4.0 * fm + fb)
        vals = self.values[-1] + np.cumsum(inc, dtype=np.longdouble).astype(float)
        self.knots = np.concatenate((self.knots, new))
        self.values = np.concatenate((self.values, vals))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-15):
            raise DomainError("negative radius")
        hi = float(np.max(x, initial=0.0))
        if np.isfinite(hi):
            self._extend(hi)
        return np.interp(np.clip(x, 0.0, None), self.knots, self.values)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < -1e-15):
            raise DomainError("negative scaled radius")
        hi = float(np.max(y, initial=0.0))
        while self.values[-1] < hi:
            self._extend(self.knots[-1] * 2.0)
        return np.interp(np.clip(y, 0.0, None), self.values, self.knots)

    def derivative(self, x):
        return self._sprime(np.asarray(x, dtype=float))

    @property
    def deriv0(self) -> float:
        return float(self._sprime(np.array(0.0)))

    def describe(self):
        return {"kind": self._label}


def cir_scale() -> IntegratedScale:
    """Scale of the translated square-root (CIR-type) edge with drift 1 - x
    and squared noise 1 + x: s'(x) = exp(2x) / (1 + x)^4."""
    def sprime(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            return np.exp(2.0 * x - 4.0 * np.log1p(x))
    return IntegratedScale(sprime, label="cir")


# ---------------------------------------------------------------------------
# density / singular-CDF families
# ---------------------------------------------------------------------------

class ConstantDensity:
    def __init__(self, c: float = 1.0):
        if not c > 0:
            raise SpecError(f"density must be > 0, got {c}")
        self.c = float(c)

    def __call__(self, y):
        return np.full_like(np.asarray(y, dtype=float), self.c)

    def breakpoints(self):
        return ()

    def describe(self):
        return {"kind": "lebesgue" if self.c == 1.0 else "scaled-lebesgue",
                "c": self.c}


class PowerDensity:
    """v(y) = c * y**p; locally finite on compacts of (0, inf) for any p."""

    def __init__(self, c: float, p: float):
        if not c > 0:
            raise SpecError(f"density coefficient must be > 0, got {c}")
        self.c, self.p = float(c), float(p)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return self.c * np.power(y, self.p)

    def breakpoints(self):
        return ()

    def describe(self):
        return {"kind": "power", "c": self.c, "p": self.p}


class BoundaryPowerDensity:
    """v(y) = c * (l - y)**p on an edge of finite length l."""

    def __init__(self, c: float, p: float, length: float):
        if not (c > 0 and math.isfinite(length) and length > 0):
            raise SpecError("boundary-power density needs c > 0 and finite length")
        self.c, self.p, self.length = float(c), float(p), float(length)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return self.c * np.power(np.clip(self.length - y, 1e-300, None), self.p)

    def breakpoints(self):
        return ()

    def describe(self):
        return {"kind": "boundary-power", "c": self.c, "p": self.p,
                "length": self.length}


class TabulatedDensity:
    """Piecewise-linear density table; constant extrapolation beyond the last knot."""

    def __init__(self, knots: Sequence[float], values: Sequence[float]):
        k = np.asarray(knots, dtype=float)
        v = np.asarray(values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise SpecError("density table needs matching 1-d knots/values")
        if np.any(np.diff(k) <= 0):
            raise SpecError("density knots must be strictly increasing")
        if np.any(v < 0):
            raise SpecError("density values must be >= 0")
        self.knots, self.values = k, v

    def __call__(self, y):
        return np.interp(np.asarray(y, dtype=float), self.knots, self.values)

    def breakpoints(self):
        return tuple(self.knots)

    def describe(self):
        return {"kind": "tabulated-density",
                "knots": self.knots.tolist(), "values": self.values.tolist()}


class CallableDensity:
    """Adapter for an arbitrary vectorized density callable."""

    def __init__(self, fn: Callable, label: str = "callable", brk=()):
        self.fn = _as_array_fn(fn)
        self.label = label
        self._brk = tuple(brk)

    def __call__(self, y):
        return self.fn(y)

    def breakpoints(self):
        return self._brk

    def describe(self):
        return {"kind": self.label}


def cir_density() -> CallableDensity:
    """Speed density paired with cir_scale: v(x) = (1 + x)^3 * exp(-2x)."""
    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.exp(3.0 * np.log1p(x) - 2.0 * x)
    return CallableDensity(fn, label="cir")


class _TransformedDensity:
    """Push-forward of a density through a scale: w(y) = v(q(y)) / s'(q(y))."""

    def __init__(self, base, scale):
        self.base, self.scale = base, scale

    def __call__(self, y):
        x = self.scale.inverse(np.asarray(y, dtype=float))
        return self.base(x) / self.scale.derivative(x)

    def breakpoints(self):
        return tuple(float(self.scale.value(np.array(b)))
                     for b in self.base.breakpoints())

    def describe(self):
        return {"kind": "pushforward", "base": self.base.describe(),
                "scale": self.scale.describe()}


class CantorCDF:
    """The Cantor-Lebesgue function on [lo, hi], exact via ternary digits."""

    def __init__(self, lo: float = 0.0, hi: float = 1.0):
        if not hi > lo:
            raise SpecError("cantor-cdf needs hi > lo")
        self.lo, self.hi = float(lo), float(hi)

    def __call__(self, y):
        t = (np.asarray(y, dtype=float) - self.lo) / (self.hi - self.lo)
        t = np.clip(t, 0.0, 1.0)
        out = np.zeros_like(t)
        done = t >= 1.0
        out[done] = 1.0
        frac = t.copy()
        scale = 0.5
        for _ in range(54):
            frac = frac * 3.0
            digit = np.minimum(np.floor(frac), 2.0)
            frac = frac - digit
            hit_one = (digit == 1) & ~done
            out[hit_one] += scale
            done |= hit_one
            out[(digit == 2) & ~done] += scale
            scale *= 0.5
            if done.all():
                break
        return out

    def total_mass(self) -> float:
        return 1.0

    def describe(self):
        return {"kind": "cantor-cdf", "lo": self.lo, "hi": self.hi}


class TabulatedCDF:
    """Nondecreasing continuous CDF given by a piecewise-linear table."""

    def __init__(self, knots: Sequence[float], values: Sequence[float]):
        k = np.asarray(knots, dtype=float)
        v = np.asarray(values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise SpecError("cdf table needs matching 1-d knots/values")
        if np.any(np.diff(k) <= 0):
            raise SpecError("cdf knots must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise SpecError("cdf values must be nondecreasing")
        self.knots, self.values = k, v

    def __call__(self, y):
        return np.interp(np.asarray(y, dtype=float), self.knots, self.values)

    def describe(self):
        return {"kind": "tabulated-cdf",
                "knots": self.knots.tolist(), "values": self.values.tolist()}


class _TransformedCDF:
    def __init__(self, base, scale):
        self.base, self.scale = base, scale

    def __call__(self, y):
        return self.base(self.scale.inverse(np.asarray(y, dtype=float)))

    def describe(self):
        return {"kind": "pushforward", "base": self.base.describe(),
                "scale": self.scale.describe()}


# ---------------------------------------------------------------------------
# one edge's measure
# ---------------------------------------------------------------------------

@dataclass
class EdgeMeasure:
    """Three-part measure on one edge: density + atoms + singular CDF part."""

    density: object | None = None
    atoms: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    singular: object | None = None

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float).reshape(-1, 2)
        if a.shape[0]:
            order = np.argsort(a[:, 0])
            a = a[order]
            if np.any(a[:, 0] <= 0):
                raise SpecError("atom positions must be > 0")
            if np.any(a[:, 1] <= 0):
                raise SpecError("atom masses must be > 0")
            if np.any(np.diff(a[:, 0]) == 0):
                raise SpecError("duplicate atom positions")
        self.atoms = a

    def integral(self, g, a: float, b: float, *, include_left: bool = False,
                 include_right: bool = True, tol: float = QUAD_TOL) -> float:
        """Integral of g over the interval (a, b] (side flags adjustable)."""
        if b < a:
            raise DomainError(f"interval ({a}, {b}] is empty the wrong way")
        g = _as_array_fn(g)
        total = 0.0
        if self.density is not None and b > a:
            cuts = [a, b]
            cuts += [c for c in self.density.breakpoints() if a < c < b]
            cuts += [p for p in self.atoms[:, 0] if a < p < b]
            cuts = sorted(set(cuts))
            dens = self.density
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                total += _adaptive_quad(lambda xs: g(xs) * dens(xs), lo, hi,
                                        tol / max(1, len(cuts) - 1))
        if self.atoms.shape[0]:
            pos, mass = self.atoms[:, 0], self.atoms[:, 1]
            keep = ((pos > a) | (include_left & (pos == a))) \
                & ((pos < b) | (include_right & (pos == b)))
            if np.any(keep):
                total += float(np.dot(g(pos[keep]), mass[keep]))
        if self.singular is not None and b > a:
            total += _stieltjes_quad(g, self.singular, a, b, tol)
        return total

    def mass(self, a: float, b: float, **kw) -> float:
        return self.integral(lambda xs: np.ones_like(xs), a, b, **kw)

    def cell_masses(self, edges: np.ndarray) -> np.ndarray:
        """Masses of the cells [e_j, e_{j+1}) defined by sorted bin edges.

        Cells are left-closed; an atom sitting exactly on a bin edge belongs
        to the cell on its right.
        """
        edges = np.asarray(edges, dtype=float)
        out = np.zeros(edges.size - 1)
        if self.density is not None:
            # fixed 4-panel Simpson per cell; cells are small by construction
            lo, hi = edges[:-1], edges[1:]
            ts = np.linspace(0.0, 1.0, 5)
            xs = lo[:, None] + (hi - lo)[:, None] * ts[None, :]
            vals = self.density(xs.ravel()).reshape(xs.shape)
            w = np.array([1.0, 4.0, 2.0, 4.0, 1.0]) / 12.0
            out += (hi - lo) * (vals @ w)
        if self.atoms.shape[0]:
            idx = np.searchsorted(edges, self.atoms[:, 0], side="right") - 1
            ok = (idx >= 0) & (idx < out.size)
            np.add.at(out, idx[ok], self.atoms[ok, 1])
        if self.singular is not None:
            out += np.diff(self.singular(edges))
        return out

    def pushforward(self, scale) -> "EdgeMeasure":
        """Image measure under x -> s(x); masses are preserved."""
        if getattr(scale, "is_natural", False):
            return self
        atoms = self.atoms.copy()
        if atoms.shape[0]:
            atoms[:, 0] = scale.value(atoms[:, 0])
        return EdgeMeasure(
            density=None if self.density is None
            else _TransformedDensity(self.density, scale),
            atoms=atoms,
            singular=None if self.singular is None
            else _TransformedCDF(self.singular, scale),
        )

    def describe(self):
        return {
            "density": None if self.density is None else self.density.describe(),
            "atoms": self.atoms.tolist(),
            "singular": None if self.singular is None else self.singular.describe(),
        }


# ---------------------------------------------------------------------------
# per-graph containers and the diffusion specification
# ---------------------------------------------------------------------------

@dataclass
class ScaleFunction:
    """Per-edge scale functions; index with the edge id."""

    edges: tuple

    def __getitem__(self, e: int):
        return self.edges[e]

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def is_natural(self) -> bool:
        return all(getattr(s, "is_natural", False) for s in self.edges)

    def describe(self):
        return [s.describe() for s in self.edges]


@dataclass
class SpeedMeasure:
    """Per-edge speed measures; index with the edge id."""

    edges: tuple

    def __getitem__(self, e: int) -> EdgeMeasure:
        return self.edges[e]

    def __len__(self) -> int:
        return len(self.edges)

    def describe(self):
        return [m.describe() for m in self.edges]


_SUPPORT_PROBE_SPAN = 4.0


@dataclass
class DiffusionSpec:
    """The full data (graph, scale, speed, bias weights, stickiness).

    Validated on construction: bias weights positive and summing to one,
    stickiness nonnegative, and every edge density strictly positive on a
    probe grid.  The last check enforces full support of the speed measure,
    which regularity of the diffusion (and strict growth of its clock)
    requires; purely atomic or purely singular edges are rejected.
    """

    graph: StarGraph
    scale: ScaleFunction
    speed: SpeedMeasure
    beta: np.ndarray
    rho: float

    def __post_init__(self):
        n = self.graph.n_edges
        if len(self.scale) != n or len(self.speed) != n:
            raise SpecError("scale/speed must have one entry per edge")
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (n,):
            raise SpecError(f"need {n} bias weights, got shape {self.beta.shape}")
        if np.any(self.beta <= 0):
            raise SpecError("bias weights must be strictly positive")
        if abs(self.beta.sum() - 1.0) > 1e-12:
            raise SpecError(f"bias weights must sum to 1, got {self.beta.sum()!r}")
        if not self.rho >= 0:
            raise SpecError(f"stickiness must be >= 0, got {self.rho}")
        self.rho = float(self.rho)
        for e in self.graph.edges:
            self._probe_full_support(e)

    def _probe_full_support(self, e: int) -> None:
        m = self.speed[e]
        if m.density is None:
            raise SpecError(
                f"edge {e}: speed measure has no density part; atoms or a "
                "singular part must coexist with a strictly positive density "
                "floor for the diffusion to be regular")
        span = min(self.graph.lengths[e], _SUPPORT_PROBE_SPAN)
        grid = np.concatenate((
            np.geomspace(span * 1e-6, span * 0.1, 16),
            np.linspace(span * 0.1, span * (1 - 1e-9), 48),
        ))
        vals = m.density(grid)
        if np.any(~np.isfinite(vals) & (grid > 0)) or np.any(vals <= 0):
            raise SpecError(f"edge {e}: density must be strictly positive on "
                            "(0, l) (full support)")

    @property
    def n_edges(self) -> int:
        return self.graph.n_edges

    @property
    def is_natural_scale(self) -> bool:
        """True when every edge is on natural scale (s_e(x) = x)."""
        return self.scale.is_natural

    def describe(self) -> dict:
        return {
            "lengths": [None if math.isinf(l) else l for l in self.graph.lengths],
            "scale": self.scale.describe(),
            "speed": self.speed.describe(),
            "beta": self.beta.tolist(),
            "rho": self.rho,
        }

    @property
    def spec_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def natural_spec(beta, rho: float = 0.0, lengths=None, density: float = 1.0,
                 atoms=None) -> DiffusionSpec:
    """Convenience builder: natural scale and (scaled) Lebesgue speed.

    With density 1 and no atoms this is the (sticky) Walsh Brownian motion
    of the given bias weights.
    """
    beta = np.asarray(beta, dtype=float)
    n = beta.size
    graph = StarGraph(tuple(lengths) if lengths is not None
                      else tuple([math.inf] * n))
    scale = ScaleFunction(tuple(NaturalScale() for _ in range(n)))
    per_edge = []
    for e in range(n):
        at = np.empty((0, 2)) if atoms is None else np.asarray(
            atoms.get(e, []), dtype=float).reshape(-1, 2)
        per_edge.append(EdgeMeasure(density=ConstantDensity(density), atoms=at))
    return DiffusionSpec(graph, scale, SpeedMeasure(tuple(per_edge)), beta, rho)


# ---------------------------------------------------------------------------
# module operations
# ---------------------------------------------------------------------------

def scale_eval(spec: DiffusionSpec, p: GraphPoint) -> GraphPoint:
    """(e, x) -> (e, s_e(x)); the vertex maps to the vertex."""
    spec.graph.validate_point(p)
    if p.radius == 0.0:
        return VERTEX
    return GraphPoint(p.edge, float(spec.scale[p.edge].value(p.radius)))


def inverse_scale_eval(spec: DiffusionSpec, p: GraphPoint) -> GraphPoint:
    """(e, y) -> (e, q_e(y)) with q_e the inverse of s_e on its range."""
    if p.radius < 0:
        raise DomainError("negative radius")
    if p.radius == 0.0:
        return VERTEX
    return GraphPoint(p.edge, float(spec.scale[p.edge].inverse(p.radius)))


def measure_integral(speed: SpeedMeasure, edge: int, g, interval,
                     *, include_left: bool = False, include_right: bool = True,
                     tol: float = QUAD_TOL) -> float:
    """Stieltjes integral of g against m_edge over (a, b] by default."""
    a, b = interval
    return speed[edge].integral(g, a, b, include_left=include_left,
                                include_right=include_right, tol=tol)


def pushforward_spec(spec: DiffusionSpec) -> DiffusionSpec:
    """Reduce a specification to natural scale on every edge.

    Image of the diffusion under x -> s(x): edge measures become push-forward
    measures, and the vertex parameters renormalize by sum_e beta_e s'_e(0).
    A specification already on natural scale comes back unchanged in value.
    """
    d0 = np.array([spec.scale[e].deriv0 for e in spec.graph.edges])
    if np.any(~np.isfinite(d0)) or np.any(d0 <= 0):
        raise SpecError(f"degenerate scale: s'(0) per edge = {d0}")
    norm = float(np.dot(spec.beta, d0))
    beta_y = spec.beta * d0 / norm
    rho_y = spec.rho / norm
    lengths = []
    measures = []
    scales = []
    for e in spec.graph.edges:
        s = spec.scale[e]
        l = spec.graph.lengths[e]
        if math.isinf(l):
            lengths.append(math.inf if getattr(s, "unbounded", True)
                           else float(s.value(np.array(l))))
        else:
            lengths.append(float(s.value(np.array(l))))
        measures.append(spec.speed[e].pushforward(s))
        scales.append(NaturalScale())
    return DiffusionSpec(StarGraph(tuple(lengths)),
                         ScaleFunction(tuple(scales)),
                         SpeedMeasure(tuple(measures)),
                         beta_y, rho_y)


class BoundaryKind(str, Enum):
    REGULAR = "regular"
    EXIT = "exit"
    ENTRY = "entry"
    NATURAL = "natural"


_DIVERGED = math.inf


def _judge_sequence(values, cap, growth, tol_rel):
    """Decide finite limit vs divergence from a truncation sequence.

    Divergence fires either on the configured cap-and-growth rule or when the
    shell increments stop shrinking (which catches logarithmic divergence,
    where the capped rule would need astronomically many shells).
    Returns the finite limit, _DIVERGED, or None (undecided).
    """
    v = values
    k = len(v) - 1
    if k < 1:
        return None
    if not np.isfinite(v[-1]):
        return _DIVERGED
    if v[-1] > cap and v[-1] >= growth * v[-2]:
        return _DIVERGED
    inc = np.diff(v)
    if abs(inc[-1]) <= max(1e-12, tol_rel * abs(v[-1])):
        return float(v[-1])
    if k >= 4:
        last = inc[-4:]
        if np.all(last > 0):
            ratios = last[1:] / last[:-1]
            if np.all(ratios >= 0.85) and inc[-1] > 1e-9 * (1.0 + abs(v[-1])):
                return _DIVERGED
            if np.all(ratios <= 0.8):
                tail = inc[-1] * ratios[-1] / (1.0 - ratios[-1])
                if tail <= max(1e-12, tol_rel * abs(v[-1])):
                    return float(v[-1] + tail)
    return None


def classify_boundary(spec: DiffusionSpec, edge: int, x0: float | None = None,
                      *, cap: float = 1e9, growth: float = 1.1,
                      max_shells: int = 44, tol_rel: float = 1e-7,
                      quad_tol: float = 1e-10) -> BoundaryKind:
    """Classify the open boundary (edge, l_edge) as regular/exit/entry/natural.

    Evaluates the two nested scale-speed integrals from a probe point x0
    toward the boundary over a dyadic truncation sequence and declares each
    one finite or divergent; an undecidable pair raises
    InconclusiveBoundaryError rather than guessing.
    """
    l = spec.graph.lengths[edge]
    if x0 is None:
        x0 = 0.5 if math.isinf(l) else l / 2.0
    if not 0 < x0 < l:
        raise DomainError(f"probe point {x0} outside (0, {l})")
    s = spec.scale[edge]
    m = spec.speed[edge]
    s_fn = _as_array_fn(lambda xs: s.value(xs))
    sx0 = float(s.value(np.array(x0)))

    # I1 = int (s(z) - s(x0)) m(dz), I2 = s(x)*m((x0,x]) - int s dm, both on
    # (x0, x]; shared cumulative pieces are accumulated shell by shell.
    mass_cum = 0.0
    s_dm_cum = 0.0
    i1_seq: list[float] = []
    i2_seq: list[float] = []
    i1 = i2 = None
    prev = x0
    for k in range(1, max_shells + 1):
        xk = x0 * (2.0 ** k) if math.isinf(l) else l - (l - x0) * 0.5 ** k
        with np.errstate(over="ignore", invalid="ignore"):
            mass_cum += m.mass(prev, xk, tol=quad_tol)
            s_dm_cum += m.integral(s_fn, prev, xk, tol=quad_tol)
            sxk = float(s.value(np.array(xk))) if (math.isfinite(xk)) else math.inf
            i1_val = s_dm_cum - sx0 * mass_cum if np.isfinite(s_dm_cum) else math.inf
            if np.isfinite(sxk) and np.isfinite(s_dm_cum):
                i2_val = sxk * mass_cum - s_dm_cum
            else:
                i2_val = math.inf if mass_cum > 0 else 0.0
        i1_seq.append(abs(i1_val))
        i2_seq.append(abs(i2_val))
        if i1 is None:
            i1 = _judge_sequence(i1_seq, cap, growth, tol_rel)
        if i2 is None:
            i2 = _judge_sequence(i2_seq, cap, growth, tol_rel)
        if i1 is not None and i2 is not None:
            break
        prev = xk
        if not np.isfinite(s_dm_cum) and not np.isfinite(mass_cum):
            break

    if i1 is None or i2 is None:
        raise InconclusiveBoundaryError(
            f"edge {edge}: truncation sequence undecided after {max_shells} "
            f"shells (I1 tail {i1_seq[-3:]}, I2 tail {i2_seq[-3:]})")
    fin1 = i1 is not _DIVERGED and math.isfinite(i1)
    fin2 = i2 is not _DIVERGED and math.isfinite(i2)
    if fin1 and fin2:
        return BoundaryKind.REGULAR
    if fin1:
        return BoundaryKind.EXIT
    if fin2:
        return BoundaryKind.ENTRY
    return BoundaryKind.NATURAL


def boundary_integrals(spec: DiffusionSpec, edge: int, x0: float, x: float,
                       *, tol: float = QUAD_TOL) -> tuple[float, float]:
    """The truncated pair (I1, I2) on (x0, x]; used by tests and the CLI table."""
    s = spec.scale[edge]
    m = spec.speed[edge]
    s_fn = _as_array_fn(lambda xs: s.value(xs))
    sx0 = float(s.value(np.array(x0)))
    sx = float(s.value(np.array(x)))
    mass = m.mass(x0, x, tol=tol)
    s_dm = m.integral(s_fn, x0, x, tol=tol)
    return abs(s_dm - sx0 * mass), abs(sx * mass - s_dm)


def is_feller_dynkin(spec: DiffusionSpec, **kw) -> bool:
    """True iff every open edge boundary classifies as natural."""
    return all(classify_boundary(spec, e, **kw) is BoundaryKind.NATURAL
               for e in spec.graph.edges)
