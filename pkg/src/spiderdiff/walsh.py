"""Simulation of (sticky) Walsh Brownian motion on the unbounded star graph.

The radial part is reflected Brownian motion sampled exactly: it is realized
as |z_k| for a plain Gaussian random walk z, which has the same joint law as
the one-step reflected transition R_{k+1} = |R_k + sqrt(dt) N_k|.  A vertex
visit inside a step is declared with the Brownian-bridge probability
exp(-2 z_k z_{k+1} / dt); a sign change of z makes the exponent nonnegative,
so the same expression makes the visit certain, as it must be.  On a
declared visit a fresh edge label is drawn from the bias weights,
independent of everything else, and the label is constant otherwise.
Sub-step visits the bridge misses bias excursion counts at order sqrt(dt).

Randomness is counter-based (Philox).  Path-producing entry points use one
splittable stream per path index with a fixed per-chunk draw schedule, so
identical inputs give bit-identical paths no matter how work is blocked or
threaded.  The storage-free statistics kernels consume a single stream whose
draw schedule depends only on (inputs, seed), which keeps them reproducible
and their paths mutually independent.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .graph import GraphPoint

__all__ = ["Path", "LocalTimeField", "simulate_walsh", "simulate_sticky_walsh",
           "local_time_field", "walsh_path_batch", "walsh_ball_exit",
           "bm_interval_exit", "walsh_terminal_radii", "ExitSample"]

#: steps drawn per RNG request; fixed so per-path streams do not depend on
#: how paths are grouped into blocks
RNG_CHUNK = 1024
#: paths per storage block (memory cap)
BLOCK_PATHS = 2048


def path_stream(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one path: Philox(seed) jumped by the path index."""
    return np.random.Generator(np.random.Philox(seed).jumped(index))


def _check_bias(bias) -> np.ndarray:
    b = np.asarray(bias, dtype=float)
    if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or abs(b.sum() - 1.0) > 1e-12:
        raise DomainError(f"bias weights must be positive and sum to 1, got {bias}")
    return b


def _draw_edges(cum_bias: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum_bias, u, side="right"),
                      cum_bias.size - 1).astype(np.int32)


def _bridge_prob(arg):
    """exp(arg) clipped to [0, 1], evaluated only where it is not negligible."""
    p = np.zeros_like(arg)
    certain = arg >= 0.0
    p[certain] = 1.0
    near = ~certain & (arg > -37.0)
    if near.any():
        p[near] = np.exp(arg[near])
    return p


def _bridge_hits(z_prev, z_next, u, dt):
    """Vertex visit within a step, given signed endpoints of the driving walk.

    A sign change makes the exponent nonnegative, hence the visit certain.
    """
    return u < _bridge_prob(-2.0 / dt * z_prev * z_next)


def _propagate_labels(hit, fresh, carry):
    """Label per sample: the most recent renewal draw, else the carried label.

    hit/fresh have one column per step; carry is the label before the chunk.
    """
    steps = np.arange(hit.shape[-1])
    last = np.maximum.accumulate(np.where(hit, steps, -1), axis=-1)
    picked = np.take_along_axis(fresh, np.maximum(last, 0), axis=-1)
    if carry.ndim:
        carry = carry[:, None]
    return np.where(last >= 0, picked, carry).astype(np.int32)


# ---------------------------------------------------------------------------
# path container and local-time field
# ---------------------------------------------------------------------------

@dataclass
class Path:
    """A discretized trajectory on the uniform grid t_k = k * dt.

    ``radii`` is the distance to the junction, ``labels`` the edge id per
    sample (vertex samples carry the label of the outgoing excursion), and
    ``vertex[k]`` flags that the path sits at the junction at t_k or touched
    it during the step ending there.  ``qv`` holds the per-step increments
    of the quadratic-variation clock: dt for Walsh paths, the consumed
    driver time for time-changed paths.
    """

    dt: float
    radii: np.ndarray
    labels: np.ndarray
    vertex: np.ndarray
    qv: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.radii.size
        if not (self.labels.size == n and self.vertex.size == n
                and self.qv.size == n - 1):
            raise DomainError("inconsistent path array lengths")
        if np.any(self.radii < 0):
            raise DomainError("negative radius in path")

    @property
    def sitting(self) -> np.ndarray:
        """Samples that are exactly at the junction (positive occupation only
        for sticky paths; the ``vertex`` flags also mark mere touches)."""
        return self.radii == 0.0

    @property
    def n_steps(self) -> int:
        return self.qv.size

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.radii.size) * self.dt

    def index_at(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.n_steps:
            raise DomainError(f"time {t} outside path horizon {self.horizon}")
        return k

    def state(self, k: int) -> GraphPoint:
        return GraphPoint(int(self.labels[k]), float(self.radii[k]))


@dataclass
class LocalTimeField:
    """Grid estimates of the local-time field of a path.

    ``total[i, j]`` estimates L^{y_j} at times[i] with y_j = j * h;
    ``directional_vertex[i, e]`` restricts the vertex cell by edge label and
    sums to ``symmetric_vertex[i]`` exactly, being built from the same counts.
    """

    h: float
    times: np.ndarray
    grid: np.ndarray
    total: np.ndarray
    directional_vertex: np.ndarray
    symmetric_vertex: np.ndarray

    def vertex_split(self, i: int = -1) -> np.ndarray:
        """Directional shares L^{e,v} / L^{v} at the i-th requested time."""
        s = self.symmetric_vertex[i]
        return self.directional_vertex[i] / s if s > 0 else np.full(
            self.directional_vertex.shape[1], np.nan)


def local_time_field(path: Path, h: float, times, n_edges: int | None = None
                     ) -> LocalTimeField:
    """Occupation-density estimate (1/h) sum_k qv_k 1{R_k in [y_j, y_j + h)}.

    Step weights go to the cell of the left endpoint and to the label at the
    right endpoint, so a renewal step books its vertex-cell weight on the
    outgoing excursion's edge.
    """
    if not h > 0:
        raise DomainError(f"bandwidth must be > 0, got {h}")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times > path.horizon * (1 + 1e-9)):
        raise DomainError("requested time beyond path horizon")
    if n_edges is None:
        n_edges = int(path.labels.max()) + 1
    left = path.radii[:-1]
    # a step leaving a sitting span belongs to the outgoing excursion's
    # position, not to the vertex cell (whose clock does not run while
    # sitting); without this, sticky paths overweight the vertex cell
    leaving = (left == 0.0) & (path.radii[1:] > 0.0)
    cells = np.floor_divide(np.where(leaving, path.radii[1:], left),
                            h).astype(np.int64)
    n_cells = int(cells.max(initial=0)) + 1
    lab_out = path.labels[1:]
    total = np.zeros((times.size, n_cells))
    direc = np.zeros((times.size, n_edges))
    for i, t in enumerate(times):
        k = path.index_at(t)
        w = path.qv[:k]
        total[i] = np.bincount(cells[:k], weights=w, minlength=n_cells) / h
        at0 = cells[:k] == 0
        direc[i] = np.bincount(lab_out[:k][at0], weights=w[at0],
                               minlength=n_edges) / h
    return LocalTimeField(h=h, times=times, grid=np.arange(n_cells) * h,
                          total=total, directional_vertex=direc,
                          symmetric_vertex=total[:, 0].copy())


# ---------------------------------------------------------------------------
# storage kernel: full paths, one stream per path
# ---------------------------------------------------------------------------

def _walsh_block(seed, first_index, n_paths, n_steps, dt, cum_bias, r0, edge0):
    """Simulate a block of Walsh paths with full storage.

    Returns (radii, labels, vertex) of shape (n_paths, n_steps + 1).  Each
    path consumes its own stream in fixed chunks of RNG_CHUNK steps (one
    normal row and two uniform rows per chunk, after one initial uniform for
    the starting label), so the output does not depend on the blocking.
    """
    B = n_paths
    sdt = np.sqrt(dt)
    radii = np.empty((B, n_steps + 1))
    labels = np.empty((B, n_steps + 1), dtype=np.int32)
    flags = np.zeros((B, n_steps + 1), dtype=bool)
    rngs = [path_stream(seed, first_index + i) for i in range(B)]

    u0 = np.array([rg.random() for rg in rngs])
    if r0 > 0:
        carry_lab = np.full(B, edge0, dtype=np.int32)
    else:
        carry_lab = _draw_edges(cum_bias, u0)
    z = np.full(B, float(r0))
    radii[:, 0] = np.abs(z)
    labels[:, 0] = carry_lab
    flags[:, 0] = r0 == 0.0

    w = np.empty((B, RNG_CHUNK))
    u = np.empty((B, RNG_CHUNK))
    v = np.empty((B, RNG_CHUNK))
    done = 0
    while done < n_steps:
        c = min(RNG_CHUNK, n_steps - done)
        for i, rg in enumerate(rngs):
            w[i, :c] = rg.standard_normal(c)
            u[i, :c] = rg.random(c)
            v[i, :c] = rg.random(c)
        zc = z[:, None] + sdt * np.cumsum(w[:, :c], axis=1)
        zprev = np.concatenate((z[:, None], zc[:, :-1]), axis=1)
        hit = _bridge_hits(zprev, zc, u[:, :c], dt)
        fresh = _draw_edges(cum_bias, v[:, :c])
        lab = _propagate_labels(hit, fresh, carry_lab)
        sl = slice(done + 1, done + c + 1)
        radii[:, sl] = np.abs(zc)
        labels[:, sl] = lab
        flags[:, sl] = hit
        z = zc[:, -1].copy()
        carry_lab = lab[:, -1].copy()
        done += c
    return radii, labels, flags


def simulate_walsh(x0: GraphPoint, bias, T: float, dt: float, seed: int,
                   *, path_index: int = 0) -> Path:
    """One (non-sticky) Walsh Brownian motion path started at x0.

    Bit-reproducible from (inputs, seed, path_index); equal to the
    corresponding member of any batch drawn with the same seed.
    """
    b = _check_bias(bias)
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    if T < dt:
        raise DomainError(f"horizon {T} shorter than one step {dt}")
    if x0.radius > 0 and not 0 <= x0.edge < b.size:
        raise DomainError(f"start edge {x0.edge} not covered by bias weights")
    n_steps = int(round(T / dt))
    radii, labels, flags = _walsh_block(seed, path_index, 1, n_steps, dt,
                                        np.cumsum(b), x0.radius,
                                        max(x0.edge, 0))
    return Path(dt=dt, radii=radii[0], labels=labels[0], vertex=flags[0],
                qv=np.full(n_steps, dt),
                meta={"kind": "walsh", "seed": seed, "path_index": path_index,
                      "bias": b.tolist(), "rho": 0.0})


def simulate_sticky_walsh(x0: GraphPoint, bias, rho: float, T: float,
                          dt: float, seed: int, *, h: float | None = None,
                          path_index: int = 0) -> Path:
    """Sticky Walsh Brownian motion via the additive-functional composition.

    Simulates the non-sticky path, adds the vertex clock (rho/2) L^0 to real
    time, and reads the path on the inverted clock.  rho = 0 returns the
    non-sticky path unchanged (same seed, same samples).  The non-sticky
    horizon T always suffices because the sticky clock dominates real time.
    """
    if not rho >= 0:
        raise DomainError(f"stickiness must be >= 0, got {rho}")
    base = simulate_walsh(x0, bias, T, dt, seed, path_index=path_index)
    if rho == 0.0:
        return base
    from .timechange import sticky_compose
    out = sticky_compose(base, rho, h=h, T=T)
    out.meta.update({"kind": "sticky-walsh", "rho": rho})
    return out


def walsh_path_batch(x0: GraphPoint, bias, T: float, dt: float, seed: int,
                     n_paths: int, consume, *, threads: int = 1,
                     block: int = BLOCK_PATHS):
    """Run ``consume(radii, labels, flags, first_index)`` over path blocks.

    The consumer receives the storage arrays of one block at a time; results
    come back in block order, so reductions do not depend on the thread
    count.
    """
    b = _check_bias(bias)
    cum = np.cumsum(b)
    n_steps = int(round(T / dt))
    starts = list(range(0, n_paths, block))

    def job(lo):
        B = min(block, n_paths - lo)
        radii, labels, flags = _walsh_block(seed, lo, B, n_steps, dt, cum,
                                            x0.radius, max(x0.edge, 0))
        return consume(radii, labels, flags, lo)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(job, starts))
    return [job(lo) for lo in starts]


# ---------------------------------------------------------------------------
# storage-free kernels: exit statistics and terminal marginals
# ---------------------------------------------------------------------------

@dataclass
class ExitSample:
    """Per-path exit data from the ball around the junction."""

    time: np.ndarray          # exit time on the process clock (A_rho if sticky)
    edge: np.ndarray          # label at exit
    driver_time: np.ndarray   # exit time of the driving non-sticky radial path
    local0: np.ndarray        # vertex local-time estimate at exit
    truncated: int            # paths cut off by the time cap


def _first_true(mask):
    """Column index of the first True per row, or -1."""
    first = np.argmax(mask, axis=1)
    any_ = mask[np.arange(mask.shape[0]), first]
    return np.where(any_, first, -1)


def walsh_ball_exit(bias, delta: float, n_paths: int, dt: float, seed: int,
                    *, rho: float = 0.0, h: float | None = None,
                    x0: float = 0.0, edge0: int = 0, bridge: bool = True,
                    t_cap: float | None = None) -> ExitSample:
    """First exit of (sticky) Walsh BM from the open ball of radius delta.

    The radial walk runs on the non-sticky clock in waves of steps with
    active-path masking; stickiness only rescales the exit time through
    A = t + (rho/2) L^0, accumulated on the fly from vertex-cell occupation.
    With ``bridge`` on, sub-step barrier touches are declared with the
    Brownian-bridge probability, removing the O(sqrt(dt)) grid-crossing bias.
    """
    b = _check_bias(bias)
    cum = np.cumsum(b)
    if not 0 <= x0 < delta:
        raise DomainError("start radius must lie inside the ball")
    if h is None:
        h = float(np.sqrt(dt))
    if t_cap is None:
        t_cap = 16.0 * delta * (delta + rho)
    max_steps = int(np.ceil(t_cap / dt))
    sdt = np.sqrt(dt)
    rng = np.random.Generator(np.random.Philox(seed))

    idx = np.arange(n_paths)
    z = np.full(n_paths, float(x0))
    lab = (_draw_edges(cum, rng.random(n_paths)) if x0 == 0.0
           else np.full(n_paths, edge0, dtype=np.int32))
    l0 = np.zeros(n_paths)
    out_t = np.empty(n_paths)
    out_e = np.empty(n_paths, dtype=np.int32)
    out_l0 = np.empty(n_paths)
    out_drv = np.empty(n_paths)

    steps_done = 0
    while idx.size and steps_done < max_steps:
        m = idx.size
        c = int(np.clip(4_000_000 // max(m, 1), 16, 4096))
        c = min(c, max_steps - steps_done)
        w = rng.standard_normal((m, c))
        u = rng.random((m, c))
        v = rng.random((m, c))
        zc = z[:, None] + sdt * np.cumsum(w, axis=1)
        zp = np.concatenate((z[:, None], zc[:, :-1]), axis=1)
        rn = np.abs(zc)
        rp = np.abs(zp)
        hit = _bridge_hits(zp, zc, u, dt)
        crossed = rn >= delta
        if bridge:
            ub = rng.random((m, c))
            pb = _bridge_prob(-2.0 / dt * (delta - rp) * (delta - rn))
            crossed |= (~crossed) & (ub < pb)
        first = _first_true(crossed)
        lab_w = _propagate_labels(hit, _draw_edges(cum, v), lab)
        occ = np.cumsum(np.where(rp < h, dt / h, 0.0), axis=1)

        exited = first >= 0
        if exited.any():
            rows = np.flatnonzero(exited)
            je = first[rows]
            done = idx[rows]
            out_drv[done] = (steps_done + je + 1) * dt
            out_l0[done] = l0[rows] + occ[rows, je]
            out_t[done] = out_drv[done] + 0.5 * rho * out_l0[done]
            out_e[done] = lab_w[rows, je]
            keep = ~exited
            idx, z = idx[keep], zc[keep, -1]
            lab, l0 = lab_w[keep, -1], l0[keep] + occ[keep, -1]
        else:
            z = zc[:, -1]
            lab = lab_w[:, -1]
            l0 = l0 + occ[:, -1]
        steps_done += c
    truncated = idx.size
    if truncated:
        out_drv[idx] = steps_done * dt
        out_t[idx] = steps_done * dt + 0.5 * rho * l0
        out_e[idx] = lab
        out_l0[idx] = l0
    return ExitSample(time=out_t, edge=out_e, driver_time=out_drv,
                      local0=out_l0, truncated=truncated)


def bm_interval_exit(x0: float, a: float, b: float, n_paths: int, dt: float,
                     seed: int, *, bridge: bool = True,
                     t_cap: float | None = None):
    """Two-sided exit of a standard BM from (a, b), started at x0 inside.

    Returns (hit_upper, time); sub-step barrier touches are declared with
    one-sided Brownian-bridge probabilities.
    """
    if not a < x0 < b:
        raise DomainError("need a < x0 < b")
    if t_cap is None:
        t_cap = 40.0 * (b - a) ** 2
    max_steps = int(np.ceil(t_cap / dt))
    sdt = np.sqrt(dt)
    rng = np.random.Generator(np.random.Philox(seed))

    idx = np.arange(n_paths)
    x = np.full(n_paths, float(x0))
    hit_up = np.zeros(n_paths, dtype=bool)
    out_t = np.full(n_paths, np.nan)
    steps_done = 0
    while idx.size and steps_done < max_steps:
        m = idx.size
        c = int(np.clip(4_000_000 // max(m, 1), 16, 4096))
        c = min(c, max_steps - steps_done)
        w = rng.standard_normal((m, c))
        xc = x[:, None] + sdt * np.cumsum(w, axis=1)
        xp = np.concatenate((x[:, None], xc[:, :-1]), axis=1)
        up = xc >= b
        down = xc <= a
        if bridge:
            uu = rng.random((m, c))
            ud = rng.random((m, c))
            pu = _bridge_prob(-2.0 / dt * (b - xp) * (b - xc))
            pd = _bridge_prob(-2.0 / dt * (xp - a) * (xc - a))
            inside = ~(up | down)
            bu = inside & (uu < pu)
            down |= inside & (ud < pd) & ~bu
            up |= bu
        first = _first_true(up | down)
        exited = first >= 0
        if exited.any():
            rows = np.flatnonzero(exited)
            je = first[rows]
            done = idx[rows]
            out_t[done] = (steps_done + je + 1) * dt
            hit_up[done] = up[rows, je]
            keep = ~exited
            idx, x = idx[keep], xc[keep, -1]
        else:
            x = xc[:, -1]
        steps_done += c
    if idx.size:
        out_t[idx] = steps_done * dt
    return hit_up, out_t


def walsh_terminal_radii(bias, T: float, dt: float, n_paths: int, seed: int,
                         *, x0: float = 0.0) -> np.ndarray:
    """Radial values R_T over a batch; the reflected marginal is exact, so
    R_T is |N(x0, T)| in law at any dt."""
    _check_bias(bias)
    n_steps = int(round(T / dt))
    rng = np.random.Generator(np.random.Philox(seed))
    z = np.full(n_paths, float(x0))
    sdt = np.sqrt(dt)
    done = 0
    while done < n_steps:
        c = min(n_steps - done, max(1, 4_000_000 // n_paths))
        z += sdt * rng.standard_normal((n_paths, c)).sum(axis=1)
        done += c
    return np.abs(z)
