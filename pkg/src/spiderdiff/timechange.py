"""Additive clocks, their right inverses, and the two synthesis pipelines.

A general diffusion on the star graph is the driving Walsh Brownian motion
read on the right inverse of the additive functional

    A(t) = sum_e int 1{J=e} dL^y  m_e(dy)  +  (rho/2) L^0_t,

then mapped through the inverse scale.  Discretely, a step of duration qv_k
on the driver clock contributes qv_k * m_e(cell(R_k)) / h through the edge
occupied, plus the vertex term (rho/2) qv_k / h while in the cell at zero.

Two representations of the clock are used.  ``build_A`` folds everything
into per-step increments and returns a continuous piecewise-linear clock on
the path grid.  The resampler instead releases accumulated vertex mass as a
jump of A at each declared vertex visit, which makes the inverse clock flat
there: resampled paths then genuinely sit at the junction (radius exactly
zero) for the stretched-out spans, as a sticky diffusion must.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BandwidthError, DomainError, SpecError
from .graph import GraphPoint
from .measure import (DiffusionSpec, SpeedMeasure, inverse_scale_eval,
                      is_feller_dynkin, pushforward_spec, scale_eval)
from .walsh import (Path, _bridge_hits, _check_bias, _draw_edges,
                    _propagate_labels, path_stream)

__all__ = ["AdditiveFunctional", "TimeChange", "build_A", "right_inverse",
           "synthesize_diffusion", "sticky_compose", "realized_qv"]


# ---------------------------------------------------------------------------
# additive functionals and right inverses
# ---------------------------------------------------------------------------

@dataclass
class AdditiveFunctional:
    """A nondecreasing clock on grid times, piecewise linear in between."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise DomainError("times/values must be matching 1-d arrays")
        if self.values[0] != 0.0:
            raise DomainError("additive functional must start at 0")
        if np.any(np.diff(self.values) < 0):
            raise DomainError("additive functional must be nondecreasing")

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self.times, self.values)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.values) > 0))


@dataclass
class TimeChange:
    """Right inverse gamma(u) = inf{s >= 0 : A(s) > u} of a grid clock.

    Same breakpoints transposed; across a flat of A the inverse jumps, which
    the right-open search realizes (right continuity).
    """

    u_knots: np.ndarray
    t_knots: np.ndarray

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self.u_knots, u, side="right")
        idx = np.clip(idx, 1, self.u_knots.size - 1)
        du = self.u_knots[idx] - self.u_knots[idx - 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            lam = np.where(du > 0, (u - self.u_knots[idx - 1]) / du, 1.0)
        lam = np.clip(lam, 0.0, 1.0)
        return self.t_knots[idx - 1] + lam * (self.t_knots[idx]
                                              - self.t_knots[idx - 1])


def right_inverse(a: AdditiveFunctional) -> TimeChange:
    return TimeChange(u_knots=a.values, t_knots=a.times)


# ---------------------------------------------------------------------------
# per-step clock components
# ---------------------------------------------------------------------------

def _cell_rates(speed: SpeedMeasure, n_edges: int, n_cells: int, h: float
                ) -> np.ndarray:
    """rates[e, j] = m_e([j h, (j+1) h)) / h, atoms folded into their cell.

    Raises BandwidthError when two atoms of one edge share a cell; the
    discretization cannot tell them apart then.
    """
    grid = np.arange(n_cells + 1) * h
    rates = np.empty((n_edges, n_cells))
    for e in range(n_edges):
        m = speed[e]
        if m.atoms.shape[0] >= 2:
            occupied = np.floor_divide(m.atoms[:, 0], h).astype(np.int64)
            if np.unique(occupied).size < occupied.size:
                gap = float(np.min(np.diff(np.sort(m.atoms[:, 0]))))
                raise BandwidthError(
                    f"edge {e}: two atoms share one cell at h={h}; "
                    f"use h < {gap / 2:.3g}")
        rates[e] = m.cell_masses(grid) / h
    return rates


def _clock_components(path: Path, speed: SpeedMeasure, rho_y: float,
                      h: float, rates: np.ndarray | None = None):
    """Per-step (moving, vertex) clock masses for the additive functional."""
    if not h > 0:
        raise DomainError(f"bandwidth must be > 0, got {h}")
    cells = np.floor_divide(path.radii[:-1], h).astype(np.int64)
    n_cells = int(cells.max(initial=0)) + 1
    n_edges = len(speed)
    if rates is None or rates.shape[1] < n_cells:
        rates = _cell_rates(speed, n_edges, n_cells, h)
    lab_out = path.labels[1:]
    mov = path.qv * rates[lab_out, cells]
    if rho_y > 0:
        vm = np.where(cells == 0, 0.5 * rho_y * path.qv / h, 0.0)
    else:
        vm = np.zeros_like(mov)
    return mov, vm


def build_A(path: Path, speed: SpeedMeasure, rho_y: float,
            h: float | None = None) -> AdditiveFunctional:
    """The additive clock on the path grid (continuous piecewise linear).

    Increments are accumulated compensated (extended precision) so millions
    of tiny steps cannot lose monotonicity to rounding.
    """
    if h is None:
        h = float(np.sqrt(path.dt))
    mov, vm = _clock_components(path, speed, rho_y, h)
    vals = np.concatenate(
        ([0.0], np.cumsum(mov + vm, dtype=np.longdouble).astype(float)))
    return AdditiveFunctional(times=path.times, values=vals)


# ---------------------------------------------------------------------------
# the jump-aware resampler
# ---------------------------------------------------------------------------

def _resample_by_clock(dt, radii, labels, vertex, qv, mov, vm, T, out_dt):
    """Read a path on the right inverse of its clock, on a uniform new grid.

    Vertex mass accumulated since the previous declared visit is released as
    a jump of the clock at the visit, where the radius path is modeled as a
    wedge down to the junction and back.  New-grid samples falling into such
    a jump sit at the vertex exactly.  Within all other segments the value
    snaps to a knot of the driver skeleton (the left sample, or the matching
    side of a wedge) instead of interpolating: interpolation would smooth
    away sub-step fluctuations and systematically halve the realized
    quadratic variation whenever the new grid is finer than the image of the
    driver grid.  Returns (radii, labels, vertex, consumed-qv) arrays.
    """
    n = qv.size
    times = np.arange(n + 1) * dt
    hit_step = vertex[1:].copy()
    release = np.zeros(n)
    if vm.any():
        hs = np.flatnonzero(hit_step)
        if hs.size:
            cum_vm = np.cumsum(vm)
            release[hs] = np.diff(np.concatenate(([0.0], cum_vm[hs])))
            # vertex mass after the last declared visit has no event to
            # carry it; it is dropped (vanishes under refinement).
            # Releases are rounded to whole output steps: sitting spans then
            # cover complete new-grid cells and the moving spans stay phase
            # aligned with the driver grid, which keeps the occupation
            # estimators of the resampled path consistent with the driver's.
            release[hs] = np.round(release[hs] / out_dt) * out_dt
    a_cum = np.concatenate(
        ([0.0], np.cumsum(mov + release, dtype=np.longdouble).astype(float)))
    if a_cum[-1] < T * (1.0 - 1e-12):
        raise DomainError(f"clock reaches {a_cum[-1]:.6g} < horizon {T}")

    # knot skeleton: base samples, plus a pair of vertex knots at the right
    # boundary of every step with a declared visit, between which the clock
    # jumps by the released vertex mass
    hs = np.flatnonzero(hit_step)
    base = np.arange(n + 1) + 2 * np.concatenate(
        ([0], np.cumsum(hit_step.astype(np.int64))))
    n_knots = n + 1 + 2 * hs.size
    kt = np.empty(n_knots)
    ka = np.empty(n_knots)
    kr = np.empty(n_knots)
    klab = np.empty(n_knots, dtype=np.int32)
    kt[base] = times
    ka[base] = a_cum
    kr[base] = radii
    klab[base] = labels
    if hs.size:
        p1 = base[hs + 1] - 2          # just before the right base sample
        kt[p1] = kt[p1 + 1] = times[hs + 1]
        ka[p1] = a_cum[hs] + mov[hs]
        ka[p1 + 1] = a_cum[hs + 1]     # = previous + release
        kr[p1] = kr[p1 + 1] = 0.0
        klab[p1] = klab[p1 + 1] = labels[hs + 1]

    m_out = int(round(T / out_dt))
    tau = np.arange(m_out + 1) * out_dt
    idx = np.clip(np.searchsorted(ka, tau, side="right"), 1, n_knots - 1)
    da = ka[idx] - ka[idx - 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(da > 0, (tau - ka[idx - 1]) / da, 1.0)
    lam = np.clip(lam, 0.0, 1.0)
    u = kt[idx - 1] + lam * (kt[idx] - kt[idx - 1])
    # values snap to the left knot of the segment: a sample inside a moving
    # span shows the driver state at its left endpoint (as the occupation
    # estimators assume) and a sample inside a jump sits at the junction
    rad = kr[idx - 1]
    out_lab = klab[idx - 1]
    # flag samples at the junction, plus the first sample after each vertex
    # event so crossings stay visible to the graph-aware increments even
    # when no sample lands inside the (possibly zero-length) jump
    out_vert = rad == 0.0
    if hs.size:
        ev = np.searchsorted(tau, ka[base[hs + 1] - 2], side="left")
        out_vert[ev[ev <= m_out]] = True
    cum_qv = np.concatenate(([0.0], np.cumsum(qv)))
    out_qv = np.diff(np.interp(u, times, cum_qv))
    return rad, out_lab, out_vert, np.maximum(out_qv, 0.0)


def sticky_compose(path: Path, rho_y: float, *, h: float | None = None,
                   T: float | None = None, out_dt: float | None = None
                   ) -> Path:
    """Turn a non-sticky path into its sticky companion.

    Builds A = t + (rho/2) L^0 from the path's own vertex local time and
    reads the path on the inverted clock.  rho = 0 returns the input.
    The input must be on natural scale per edge, so its radial process is
    the one whose vertex local time enters the clock.
    """
    if not rho_y >= 0:
        raise DomainError(f"stickiness must be >= 0, got {rho_y}")
    if rho_y == 0.0:
        return path
    if h is None:
        h = float(np.sqrt(path.dt))
    T = path.horizon if T is None else T
    out_dt = path.dt if out_dt is None else out_dt
    n = path.n_steps
    cells0 = path.radii[:-1] < h
    vm = np.where(cells0, 0.5 * rho_y * path.qv / h, 0.0)
    mov = np.full(n, path.dt)
    rad, lab, vert, qv = _resample_by_clock(
        path.dt, path.radii, path.labels, path.vertex, path.qv,
        mov, vm, T, out_dt)
    meta = dict(path.meta)
    meta.update({"kind": "sticky-compose", "rho": rho_y, "h": h})
    return Path(dt=out_dt, radii=rad, labels=lab, vertex=vert, qv=qv,
                meta=meta)


# ---------------------------------------------------------------------------
# full synthesis pipeline
# ---------------------------------------------------------------------------

_MAX_DRIVER_STEPS = 50_000_000


class _DriverState:
    """Chunked Walsh driver with one persistent stream per synthesized path."""

    def __init__(self, seed, path_index, y0: GraphPoint, cum_bias, dt):
        self.rng = path_stream(seed, path_index)
        self.dt = dt
        self.cum_bias = cum_bias
        self.z = float(y0.radius)
        u0 = self.rng.random()
        self.lab = np.int32(y0.edge) if y0.radius > 0 else int(_draw_edges(
            cum_bias, np.array([u0]))[0])

    def extend(self, n_steps: int):
        """Append n_steps; returns (radii, labels, flags) of length n_steps+1
        starting from the current state."""
        sdt = np.sqrt(self.dt)
        w = self.rng.standard_normal(n_steps)
        u = self.rng.random(n_steps)
        v = self.rng.random(n_steps)
        z = self.z + sdt * np.cumsum(w)
        zp = np.concatenate(([self.z], z[:-1]))
        hit = _bridge_hits(zp, z, u, self.dt)
        lab = _propagate_labels(hit[None, :], _draw_edges(self.cum_bias,
                                                          v[None, :]),
                                np.asarray(self.lab))[0]
        radii = np.concatenate(([abs(self.z)], np.abs(z)))
        labels = np.concatenate(([self.lab], lab)).astype(np.int32)
        flags = np.concatenate(([False], hit))
        self.z = float(z[-1])
        self.lab = np.int32(lab[-1])
        return radii, labels, flags


def synthesize_diffusion(spec: DiffusionSpec, x0: GraphPoint, T: float,
                         dt: float, seed: int, *, h: float | None = None,
                         out_dt: float | None = None, path_index: int = 0,
                         check_boundaries: bool = True) -> Path:
    """Simulate the diffusion of a specification as a rescaled time change.

    Pipeline: reduce the spec to natural scale per edge, drive a Walsh
    Brownian motion with the transformed bias from the scaled start point,
    build the additive clock from the transformed speed measures and
    stickiness, invert, resample on the user clock, and map radii through
    the inverse scale.  The driver is extended in chunks until the clock
    covers the horizon.  Only specifications with all-natural boundaries
    are accepted.
    """
    if check_boundaries and not is_feller_dynkin(spec):
        raise SpecError("simulation requires all open boundaries natural")
    spec_y = pushforward_spec(spec)
    return _synthesize_core(spec, spec_y, x0, T, dt, seed, h=h, out_dt=out_dt,
                            path_index=path_index)


def _synthesize_core(spec, spec_y, x0, T, dt, seed, *, h=None, out_dt=None,
                     path_index=0) -> Path:
    """Synthesis without the boundary gate; spec_y is the natural-scale spec."""
    if not dt > 0 or not T >= dt:
        raise DomainError("need dt > 0 and T >= dt")
    if h is None:
        h = float(np.sqrt(dt))
    out_dt = dt if out_dt is None else out_dt
    y0 = scale_eval(spec, x0)
    cum = np.cumsum(_check_bias(spec_y.beta))
    driver = _DriverState(seed, path_index, y0, cum, dt)

    n_first = max(64, int(round(T / dt)))
    radii, labels, flags = driver.extend(n_first)
    rates = None
    while True:
        qv = np.full(radii.size - 1, dt)
        tmp = Path(dt=dt, radii=radii, labels=labels, vertex=flags, qv=qv)
        mov, vm = _clock_components(tmp, spec_y.speed, spec_y.rho, h, rates)
        a_end = float(np.sum(mov) + np.sum(vm))
        if a_end >= T * (1.0 + 1e-9) or radii.size - 1 >= _MAX_DRIVER_STEPS:
            break
        grow = radii.size - 1
        r2, l2, f2 = driver.extend(grow)
        radii = np.concatenate((radii, r2[1:]))
        labels = np.concatenate((labels, l2[1:]))
        flags = np.concatenate((flags, f2[1:]))
    if a_end < T:
        raise DomainError(f"driver budget exhausted at clock {a_end} < {T}")

    rad, lab, vert, out_qv = _resample_by_clock(
        dt, radii, labels, flags, np.full(radii.size - 1, dt), mov, vm,
        T, out_dt)
    # back to the original scale through the inverse scale, edge by edge
    out_rad = np.zeros_like(rad)
    for e in range(spec.n_edges):
        mask = (lab == e) & (rad > 0)
        if mask.any():
            out_rad[mask] = spec.scale[e].inverse(rad[mask])
    return Path(dt=out_dt, radii=out_rad, labels=lab, vertex=vert, qv=out_qv,
                meta={"kind": "synthesized", "spec_hash": spec.spec_hash,
                      "seed": seed, "path_index": path_index,
                      "driver_dt": dt, "h": h})


# ---------------------------------------------------------------------------
# realized quadratic variation
# ---------------------------------------------------------------------------

def realized_qv(path: Path, stride: int = 1) -> AdditiveFunctional:
    """Sum of squared radial increments, graph-aware across the junction.

    When a window changes edge the traversed distance is x_prev + x_next.
    A window that touches the junction but stays on one edge may or may not
    have crossed (the radial data has no sign); it is booked as the two legs
    x_prev^2 + x_next^2, whose under-count on actual crossings cancels the
    over-count on mere touches exactly in expectation.  Booking touches as
    full crossings instead would bias the clock upward at order sqrt(dt).
    """
    if stride < 1:
        raise DomainError("stride must be >= 1")
    r = path.radii[::stride]
    lab = path.labels[::stride]
    if stride == 1:
        visited = path.vertex[1:]
    else:
        cv = np.concatenate(([0], np.cumsum(path.vertex[1:])))
        full = np.arange(0, path.radii.size, stride)
        visited = np.diff(cv[np.minimum(full, cv.size - 1)]) > 0
    changed = lab[1:] != lab[:-1]
    touched = visited & ~changed
    dx2 = np.where(changed, (r[:-1] + r[1:]) ** 2,
                   (r[1:] - r[:-1]) ** 2)
    dx2 = np.where(touched, r[:-1] ** 2 + r[1:] ** 2, dx2)
    vals = np.concatenate(
        ([0.0], np.cumsum(dx2, dtype=np.longdouble).astype(float)))
    return AdditiveFunctional(times=path.times[::stride], values=vals)
