"""Path simulation under the Wiener, tilted, and survival-conditioned measures.

Three samplers share one Euler-Maruyama core on a uniform time grid:

* ``simulate_P``  -- driftless Brownian motion;
* ``simulate_Q``  -- drift ``grad log beta`` (the beta-tilted dynamics);
* ``simulate_Qt`` -- drift ``grad log beta + grad log alpha(t - s, .)``,
  the dynamics conditioned to survive past t.

Exit handling for the stopped measures combines a hard sign test with the
Brownian-bridge crossing probability ``exp(-2 d_i d_{i+1} / dt)`` per step
and boundary (accepted against a dedicated uniform substream); this removes
the O(sqrt(dt)) exit-time bias of plain sign checks.  On a detected exit
the position is frozen at the boundary point, so the recorded increment of
the exit step is the partial increment to the boundary.

The conditioned drift is singular as the conditioning horizon approaches
(near the boundary), and the discretization is handled as follows: the
drift is clamped so that ``|drift| * dt`` never exceeds half the distance
to the boundary, and a step whose noise still lands outside the domain is
reflected back in.  Both event kinds are counted per path and reported;
they touch a vanishing fraction of steps at the default dt.

Randomness is counter-based: sample k draws its normal increments from
``Philox(key=(master_seed, 2k))`` and its bridge uniforms from
``Philox(key=(master_seed, 2k+1))``, so every sample's draws depend only
on (master seed, k) -- never on batching, chunking, or worker assignment.
Estimator reductions store per-sample values and sum in sample order,
which makes whole runs bit-reproducible for any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainError, HalfLineDomain, IntervalDomain

__all__ = [
    "TimeGrid",
    "RngStream",
    "PathSample",
    "simulate_P",
    "simulate_Q",
    "simulate_Qt",
    "increments_w_tilde",
    "increments_hat",
]

BATCH_SIZE = 2048   # samples stepped together
CHUNK_STEPS = 2048  # steps drawn per RNG call


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0, dt, 2dt, ..., n_steps*dt covering [0, horizon]."""

    dt: float
    horizon: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ValueError("horizon must be at least one step")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def times(self):
        return self.dt * np.arange(self.n_steps + 1)


class RngStream:
    """Counter-based per-sample substreams over one master seed."""

    def __init__(self, master_seed):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF

    def normal_stream(self, sample_index):
        return np.random.Generator(
            np.random.Philox(key=[self.master_seed, 2 * int(sample_index)])
        )

    def uniform_stream(self, sample_index):
        return np.random.Generator(
            np.random.Philox(key=[self.master_seed, 2 * int(sample_index) + 1])
        )


@dataclass
class PathSample:
    """One discretized trajectory with exit data.

    ``positions`` has length n_steps+1 and is frozen at the exit point from
    ``exit_index`` on.  ``exit_index`` is the first grid index at or after
    which the path left the domain (None if it never did within the
    horizon).  ``importance_weight`` is 1 for direct Q sampling; for paths
    sampled under P it is ``rho(w(tau)) / beta(u)`` after an exit and the
    exact conditional completion ``beta(w(T)) / beta(u)`` for paths
    censored at the horizon, so weights average to one.
    """

    grid: TimeGrid
    sample_index: int
    positions: np.ndarray
    exit_index: int | None
    exit_time: float | None
    exit_point: float | None
    measure_tag: str
    importance_weight: float
    conditioning_time: float | None = None
    clamp_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    reflect_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def exited(self):
        return self.exit_index is not None

    def modified_steps(self):
        """Grid indices whose increment was altered by clamping or reflection."""
        return np.union1d(self.clamp_steps, self.reflect_steps)


# ----------------------------------------------------------------------
# batched engines
# ----------------------------------------------------------------------


class _NullHook:
    def start_batch(self, ids):
        pass

    def step(self, i, ids, w_before, w_after, dwt_eff):
        pass

    def end_batch(self, ids):
        pass


def _end_batch(hook, ids):
    fn = getattr(hook, "end_batch", None)
    if fn is not None:
        fn(ids)


def _draw_chunk(gens, out, n):
    for row, gen in enumerate(gens):
        out[row, :n] = gen.standard_normal(n)


def _draw_uni_chunk(gens, out, n):
    for row, gen in enumerate(gens):
        out[row, :n] = gen.random(n)


def run_stopped_batch(model, u, tg: TimeGrid, rng, sample_lo, n_samples, measure,
                      step_hook=None, batch_size=BATCH_SIZE):
    """Simulate stopped paths under P or Q; returns per-sample exit arrays.

    Output dict arrays are indexed by sample order (length n_samples):
    ``exit_step`` (-1 if censored), ``exit_time`` (nan), ``exit_point``
    (nan), ``final_w`` (position at horizon for censored paths, else the
    exit point), ``weight``.
    """
    if measure not in ("P", "Q"):
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    u = float(u)
    if not np.all(model.contains(u)):
        raise DomainError("start point must be interior")
    hook = step_hook or _NullHook()
    interval = isinstance(model, IntervalDomain)
    lo_b = model.a if interval else 0.0
    hi_b = model.b if interval else math.inf
    dt = tg.dt
    sqdt = math.sqrt(dt)
    n_steps = tg.n_steps
    beta_u = float(model.beta(u))

    exit_step = np.full(n_samples, -1, dtype=np.int64)
    exit_time = np.full(n_samples, np.nan)
    exit_point = np.full(n_samples, np.nan)
    final_w = np.full(n_samples, np.nan)
    weight = np.ones(n_samples)

    for blo in range(0, n_samples, batch_size):
        B = min(batch_size, n_samples - blo)
        ids = np.arange(blo, blo + B)
        gens_n = [rng.normal_stream(sample_lo + k) for k in ids]
        gens_u = [rng.uniform_stream(sample_lo + k) for k in ids]
        w = np.full(B, u)
        hook.start_batch(ids.copy())
        normals = np.empty((B, CHUNK_STEPS))
        unis = np.empty((B, CHUNK_STEPS))
        i = 0
        while i < n_steps and len(ids) > 0:
            n_chunk = min(CHUNK_STEPS, n_steps - i)
            _draw_chunk(gens_n, normals[: len(ids)], n_chunk)
            _draw_uni_chunk(gens_u, unis[: len(ids)], n_chunk)
            alive = np.ones(len(ids), dtype=bool)
            for j in range(n_chunk):
                act = np.nonzero(alive)[0]
                if len(act) == 0:
                    break
                wi = w[act]
                drift = np.asarray(model.grad_log_beta(wi), float) if measure == "Q" else 0.0
                dw = drift * dt + sqdt * normals[act, j]
                wn = wi + dw
                if interval:
                    p_lo = np.exp(-2.0 * np.maximum(wi - lo_b, 0.0) * np.maximum(wn - lo_b, 0.0) / dt)
                    p_hi = np.exp(-2.0 * np.maximum(hi_b - wi, 0.0) * np.maximum(hi_b - wn, 0.0) / dt)
                    hard = (wn <= lo_b) | (wn >= hi_b)
                    crossed = hard | (unis[act, j] < np.minimum(p_lo + p_hi, 1.0))
                    side_hi = np.where(hard, wn >= hi_b, p_hi >= p_lo)
                    x_exit = np.where(side_hi, hi_b, lo_b)
                else:
                    p_lo = np.exp(-2.0 * np.maximum(wi, 0.0) * np.maximum(wn, 0.0) / dt)
                    hard = wn <= lo_b
                    crossed = hard | (unis[act, j] < p_lo)
                    x_exit = np.zeros_like(wn)
                dwt_eff = np.where(crossed, x_exit - wi, dw) - drift * dt
                w_after = np.where(crossed, x_exit, wn)
                hook.step(i + j, ids[act], wi, w_after, dwt_eff)
                if crossed.any():
                    ex = act[crossed]
                    gidx = ids[ex]
                    exit_step[gidx] = i + j + 1
                    # linear-interpolated crossing time for hard exits,
                    # midpoint for bridge-detected ones
                    d_in = np.abs(wi[crossed] - x_exit[crossed])
                    over = np.abs(wn[crossed] - x_exit[crossed])
                    frac = np.where(hard[crossed], d_in / np.maximum(d_in + over, 1e-300), 0.5)
                    exit_time[gidx] = (i + j) * dt + frac * dt
                    exit_point[gidx] = x_exit[crossed]
                    final_w[gidx] = x_exit[crossed]
                    alive[ex] = False
                w[act] = w_after
            keep = alive
            if not keep.all():
                ids = ids[keep]
                w = w[keep]
                gens_n = [g for g, k in zip(gens_n, keep) if k]
                gens_u = [g for g, k in zip(gens_u, keep) if k]
            i += n_chunk
        if len(ids) > 0:
            final_w[ids] = w
        _end_batch(hook, np.arange(blo, blo + B))
    exited = exit_step >= 0
    if measure == "P":
        rho_exit = np.zeros(n_samples)
        if interval:
            rho_exit[exited] = np.where(
                exit_point[exited] == hi_b, model.rho_b, model.rho_a
            )
        else:
            rho_exit[exited] = model.rho_0
        weight[exited] = rho_exit[exited] / beta_u
        if (~exited).any():
            weight[~exited] = np.asarray(model.beta(final_w[~exited]), float) / beta_u
    return {
        "exit_step": exit_step,
        "exit_time": exit_time,
        "exit_point": exit_point,
        "final_w": final_w,
        "weight": weight,
    }


def run_conditioned_batch(model, u, tg: TimeGrid, rng, sample_lo, n_samples, t_cond,
                          step_hook=None, batch_size=BATCH_SIZE):
    """Simulate paths conditioned to survive past ``t_cond`` (measure Q_{t,u}).

    Steps to ``t_cond`` on the grid (which must contain it); no bridge
    killing is applied -- the conditioned law almost surely stays interior,
    and discretization failures are handled by drift clamping plus
    reflection, both counted per path.
    """
    u = float(u)
    if not np.all(model.contains(u)):
        raise DomainError("start point must be interior")
    t_cond = float(t_cond)
    n_steps = int(round(t_cond / tg.dt))
    if n_steps < 1 or n_steps > tg.n_steps or abs(n_steps * tg.dt - t_cond) > 1e-9 * max(t_cond, 1.0):
        raise ValueError("conditioning time must be a grid time within the horizon")
    hook = step_hook or _NullHook()
    interval = isinstance(model, IntervalDomain)
    dt = tg.dt
    sqdt = math.sqrt(dt)

    final_w = np.empty(n_samples)
    clamp_count = np.zeros(n_samples, dtype=np.int64)
    reflect_count = np.zeros(n_samples, dtype=np.int64)

    for blo in range(0, n_samples, batch_size):
        B = min(batch_size, n_samples - blo)
        ids = np.arange(blo, blo + B)
        gens_n = [rng.normal_stream(sample_lo + k) for k in ids]
        w = np.full(B, u)
        hook.start_batch(ids.copy())
        normals = np.empty((B, CHUNK_STEPS))
        i = 0
        while i < n_steps:
            n_chunk = min(CHUNK_STEPS, n_steps - i)
            _draw_chunk(gens_n, normals[:B], n_chunk)
            for j in range(n_chunk):
                lag = t_cond - (i + j) * dt
                drift = np.asarray(model.drift_conditioned(lag, w), float)
                dist = np.asarray(model.distance_to_boundary(w), float)
                cap = dist / (2.0 * dt)
                clamped = np.abs(drift) > cap
                if clamped.any():
                    clamp_count[ids[clamped]] += 1
                    drift = np.clip(drift, -cap, cap)
                dwhat = sqdt * normals[:B, j]
                wn = w + drift * dt + dwhat
                if interval:
                    out_lo = wn <= model.a
                    out_hi = wn >= model.b
                    reflected = out_lo | out_hi
                    if reflected.any():
                        reflect_count[ids[reflected]] += 1
                        wn = np.where(out_lo, 2.0 * model.a - wn, wn)
                        wn = np.where(out_hi, 2.0 * model.b - wn, wn)
                else:
                    reflected = wn <= 0.0
                    if reflected.any():
                        reflect_count[ids[reflected]] += 1
                        wn = np.where(reflected, -wn, wn)
                hook.step(i + j, ids, w, wn, dwhat, clamped, reflected)
                w = wn
            i += n_chunk
        final_w[ids] = w
        _end_batch(hook, ids)
    return {
        "final_w": final_w,
        "clamp_count": clamp_count,
        "reflect_count": reflect_count,
    }


# ----------------------------------------------------------------------
# per-path API
# ----------------------------------------------------------------------


class _PositionRecorder:
    """Stores full trajectories and per-step event flags for small runs."""

    def __init__(self, n_samples, n_steps, u):
        self.positions = np.full((n_samples, n_steps + 1), np.nan)
        self.positions[:, 0] = u
        self._offset = None

    def start_batch(self, ids):
        self._offset = ids[0]

    def step(self, i, ids, w_before, w_after, *rest):
        self.positions[ids, i + 1] = w_after


def _freeze_tail(row, exit_idx):
    if exit_idx is not None:
        row[exit_idx:] = row[exit_idx]
    return row


def _simulate_stopped(model, u, grid, rng, sample_index, measure):
    rec = _PositionRecorder(1, grid.n_steps, float(u))
    out = run_stopped_batch(model, u, grid, rng, sample_index, 1, measure, step_hook=rec)
    e = int(out["exit_step"][0])
    exit_idx = e if e >= 0 else None
    pos = rec.positions[0]
    if exit_idx is not None:
        pos[exit_idx] = out["exit_point"][0]
        _freeze_tail(pos, exit_idx)
    tag = measure
    return PathSample(
        grid=grid,
        sample_index=sample_index,
        positions=pos,
        exit_index=exit_idx,
        exit_time=float(out["exit_time"][0]) if exit_idx is not None else None,
        exit_point=float(out["exit_point"][0]) if exit_idx is not None else None,
        measure_tag=tag,
        importance_weight=float(out["weight"][0]),
    )


def simulate_P(model, u, grid, rng, sample_index=0):
    """One Wiener path started at u, stopped at the boundary, reweightable to Q."""
    return _simulate_stopped(model, u, grid, rng, sample_index, "P")


def simulate_Q(model, u, grid, rng, sample_index=0):
    """One path of the beta-tilted diffusion (drift grad log beta), stopped at exit."""
    return _simulate_stopped(model, u, grid, rng, sample_index, "Q")


class _QtEventRecorder(_PositionRecorder):
    def __init__(self, n_samples, n_steps, u):
        super().__init__(n_samples, n_steps, u)
        self.clamp_idx = [[] for _ in range(n_samples)]
        self.reflect_idx = [[] for _ in range(n_samples)]

    def step(self, i, ids, w_before, w_after, dwhat, clamped, reflected):
        self.positions[ids, i + 1] = w_after
        for k in ids[clamped]:
            self.clamp_idx[k].append(i)
        for k in ids[reflected]:
            self.reflect_idx[k].append(i)


def simulate_Qt(model, u, t, grid, rng, sample_index=0):
    """One path conditioned to survive past t (measure Q_{t,u}); never exits."""
    rec = _QtEventRecorder(1, grid.n_steps, float(u))
    run_conditioned_batch(model, u, grid, rng, sample_index, 1, t, step_hook=rec)
    n_cond = int(round(t / grid.dt))
    pos = rec.positions[0]
    # steps beyond the conditioning horizon are not simulated
    pos[n_cond + 1 :] = np.nan
    return PathSample(
        grid=grid,
        sample_index=sample_index,
        positions=pos,
        exit_index=None,
        exit_time=None,
        exit_point=None,
        measure_tag=f"Qt({t})",
        importance_weight=1.0,
        conditioning_time=float(t),
        clamp_steps=np.asarray(rec.clamp_idx[0], dtype=int),
        reflect_steps=np.asarray(rec.reflect_idx[0], dtype=int),
    )


# ----------------------------------------------------------------------
# increment reconstruction
# ----------------------------------------------------------------------


def _stopped_range(path):
    e = path.exit_index if path.exit_index is not None else path.grid.n_steps
    if path.conditioning_time is not None:
        e = min(e, int(round(path.conditioning_time / path.grid.dt)))
    return e


def increments_w_tilde(model, path: PathSample):
    """Increments of w-tilde: dw_i - grad log beta(w_i) dt, up to the exit."""
    e = _stopped_range(path)
    if e == 0:
        return np.empty(0)
    w = path.positions[: e + 1]
    dw = np.diff(w)
    glb = np.asarray(model.grad_log_beta(w[:-1]), float)
    return dw - glb * path.grid.dt

def increments_hat(model, path: PathSample, t):
    """Increments of the t-conditioned noise on [0, t):
    d w-tilde_i - grad log alpha(t - s_i, w_i) dt for s_i < t (stopped at exit)."""
    t = float(t)
    if t <= 0:
        raise ValueError("conditioning horizon must be positive")
    dt = path.grid.dt
    e = _stopped_range(path)
    n_t = min(e, max(int(math.ceil(t / dt - 1e-12)), 0))
    if n_t == 0:
        return np.empty(0)
    base = increments_w_tilde(model, path)[:n_t]
    w = path.positions[:n_t]
    s = dt * np.arange(n_t)
    gla = np.array([model.grad_log_alpha(t - si, wi) for si, wi in zip(s, w)])
    return base - gla * dt
