"""Iterated stochastic integrals along simulated paths and expansion studies.

The order-n integral of a kernel a_n over one stopped path is the Ito
grid sum (left-point evaluation throughout)

    I_n = sum_m  dwt_m * [ sum_{j_1 < ... < j_{n-1} < m}
              a_n(s_{j_1}, .., s_{j_{n-1}}, s_m) * dhat^{(s_m)}_{j_1} ... ],

where the outer integrator is the increment of w-tilde and the inner ones
are increments of the noise conditioned at the OUTER time s_m, so the
inner sums must be re-evaluated per outer index.  ``iterated_integral``
is the direct reference implementation (exact kernel pipeline values,
O(M^n) per path) and is meant for short grids; the batched study engine
reproduces it with tabulated kernels, a coarsened sub-grid for the inner
sums of orders 2 and 3 (default: every 10th point, a documented O(dt_c)
bias), and the drift-correction factorization of
:class:`~stopchaos.tables.KernelTables`, which turns the order-2 inner
sums into one matrix-vector product per path.

All estimators weight samples by the path's importance weight (one for
direct Q sampling), store per-sample statistics, and reduce them in
sample order, so results are independent of batch dispatch and worker
count.  Paths censored at the horizon (a <1e-4 tail at the default
horizon) contribute the exact conditional completion ``T_tilde phi`` of
the boundary functional and their integrals stopped at the horizon; the
count is reported.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainError
from .kernels import ChaosKernel, SimplexQuadrature, _solve_horizon
from .operators import SemigroupOperators
from .grids import GridFunction, QuadratureGrid
from .paths import (
    PathSample,
    RngStream,
    TimeGrid,
    increments_hat,
    increments_w_tilde,
    run_conditioned_batch,
    run_stopped_batch,
)
from .tables import KernelTables

__all__ = [
    "MCConfig",
    "MCEstimate",
    "IteratedIntegralValue",
    "iterated_integral",
    "ExpansionStudy",
    "run_expansion_study",
    "expansion_partial_sum",
    "orthogonality_estimate",
    "clark_residual",
    "eq1_check",
]

MAX_ORDER = 3


def worker_count():
    """STOPCHAOS_WORKERS controls batch dispatch only; numerics are unaffected."""
    try:
        return max(1, int(os.environ.get("STOPCHAOS_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo run settings; horizon None picks the 1e-4 survival time."""

    n_samples: int
    dt: float = 1e-4
    horizon: float | None = None
    seed: int = 20240901
    coarse_factor: int = 10
    grid_nodes: int = 64
    halfline_cutoff: float = 10.0
    sample_offset: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def resolve_horizon(self, model, u):
        if self.horizon is not None:
            return float(self.horizon)
        return max(_solve_horizon(model, u, 1e-4), 10 * self.dt)


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error."""

    mean: float
    stderr: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("an estimate needs at least 2 samples")

    @classmethod
    def from_samples(cls, values, weights=None):
        values = np.asarray(values, float)
        if weights is not None:
            values = values * np.asarray(weights, float)
        n = len(values)
        mean = float(np.sum(values) / n)
        var = float(np.sum((values - mean) ** 2) / (n - 1))
        return cls(mean=mean, stderr=math.sqrt(var / n), n_samples=n)

    def covers(self, target, n_se=3.0, extra=0.0):
        return abs(self.mean - float(target)) <= n_se * self.stderr + extra


@dataclass(frozen=True)
class IteratedIntegralValue:
    order: int
    value: float
    path: PathSample
    kernel: ChaosKernel


# ----------------------------------------------------------------------
# reference per-path implementation (exact kernels, O(M^n))
# ----------------------------------------------------------------------


def _check_weighted(path):
    if path.measure_tag.startswith("Qt"):
        raise ValueError("iterated integrals are taken along stopped paths (P or Q)")
    if not (path.importance_weight > 0.0):
        raise ValueError("path carries no valid Q-consistent weight")


def _a_with_zero_t1(kernel, times):
    """Kernel value allowing t_1 = 0 (left-point limit of the grid sum)."""
    if times[0] > 0.0:
        return kernel.eval(times)
    if len(times) == 1:
        return float(kernel.ops.grad_op_T_tilde(kernel.phi, kernel.u))
    incr = tuple(t2 - t1 for t1, t2 in zip(times, times[1:]))
    h = kernel._stage(incr)
    return float(h(kernel.u)) / float(kernel.model.alpha(times[-1], kernel.u))


def iterated_integral(model, path: PathSample, kernel: ChaosKernel, n) -> IteratedIntegralValue:
    """Direct evaluation of I_n along one path (reference; n <= 3)."""
    n = int(n)
    if n > MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are unsupported")
    if n < 0:
        raise ValueError("order must be nonnegative")
    _check_weighted(path)
    if n == 0:
        return IteratedIntegralValue(0, kernel.a0, path, kernel)
    dt = path.grid.dt
    dwt = increments_w_tilde(model, path)
    e = len(dwt)
    s = dt * np.arange(e)
    if n == 1:
        vals = np.array([_a_with_zero_t1(kernel, [si]) for si in s])
        return IteratedIntegralValue(1, float(vals @ dwt), path, kernel)
    total = 0.0
    for m_idx in range(1, e):
        t_outer = s[m_idx]
        dhat = increments_hat(model, path, t_outer)  # length m_idx
        if n == 2:
            inner = sum(
                _a_with_zero_t1(kernel, [s[j], t_outer]) * dhat[j] for j in range(m_idx)
            )
        else:
            inner = 0.0
            for k in range(1, m_idx):
                for j in range(k):
                    inner += (
                        _a_with_zero_t1(kernel, [s[j], s[k], t_outer]) * dhat[j] * dhat[k]
                    )
        total += dwt[m_idx] * inner
    return IteratedIntegralValue(n, float(total), path, kernel)


# ----------------------------------------------------------------------
# batched expansion study
# ----------------------------------------------------------------------


class _ExpansionHook:
    """Streaming per-step accumulation with batch-local coarse buffers.

    Fine-grid statistics (Clark integral, I1) accumulate directly into the
    study's per-sample arrays; the coarse-block data needed by the order-2
    and order-3 inner sums live in buffers of one batch's size and are
    consumed by ``end_batch``, which runs the per-path matrix-vector
    products and releases them.
    """

    def __init__(self, study, tables, grad_tt, cf, order):
        self.study = study
        self.tables = tables
        self.grad_tt = grad_tt
        self.cf = cf
        self.order = order
        self.pair_mats = tables.coarse_pair_matrices() if order >= 2 else None
        self.a3_tensor = tables.a3_coarse_tensor() if order >= 3 else None
        self.lo = 0
        self.dwt_c = None
        self.pos_c = None
        self.last_q = None

    def start_batch(self, ids):
        self.lo = int(ids[0])
        B = len(ids)
        if self.order >= 2:
            Q = self.tables.n_coarse
            self.dwt_c = np.zeros((B, Q))
            self.pos_c = np.zeros((B, Q))
            self.last_q = np.zeros(B, dtype=np.int64)

    def step(self, i, ids, w_before, w_after, dwt_eff):
        st = self.study
        st.clark[ids] += self.grad_tt(w_before) * dwt_eff
        st.I1[ids] += self.tables.a1_fine[i] * dwt_eff
        if self.order >= 2:
            sl = ids - self.lo
            q = i // self.cf
            self.dwt_c[sl, q] += dwt_eff
            self.last_q[sl] = q
            if i % self.cf == 0:
                self.pos_c[sl, q] = w_before

    def end_batch(self, ids):
        if self.order < 2:
            return
        tables = self.tables
        M = self.pair_mats                      # [(R+1), Q, Q] float32
        R = tables.gla_rank
        for sl in range(len(ids)):
            qe = int(self.last_q[sl]) + 1
            if qe < 2:
                continue
            dwv = self.dwt_c[sl, :qe]
            feats = tables.gla_features(self.pos_c[sl, :qe]) * tables.dtc  # [qe, R]
            z = np.float64(M[0, :qe, :qe].T @ dwv.astype(np.float32))
            for r in range(R):
                z -= np.float64(M[r + 1, :qe, :qe].T @ feats[:, r].astype(np.float32))
            self.study.I2[ids[sl]] = float(z @ dwv)
            if self.order >= 3:
                self._order3(ids[sl], qe, dwv, self.pos_c[sl, :qe])
        self.dwt_c = self.pos_c = self.last_q = None

    def _order3(self, sample_id, qe_c, dwv, pos_c):
        tables = self.tables
        c3 = int(round(tables.dtc3 / tables.dtc))
        qe3 = min(qe_c // c3, tables.n_coarse3)
        if qe3 < 3:
            return
        n_use = qe3 * c3
        dw3 = np.add.reduceat(dwv[:n_use], np.arange(0, n_use, c3))
        pos3 = pos_c[:n_use:c3]
        feats3 = tables.gla_features(pos3)
        A3 = self.a3_tensor
        total = 0.0
        max_lag = tables.n_coarse
        for m_idx in range(2, qe3):
            lag_idx = np.minimum((m_idx - np.arange(m_idx)) * c3, max_lag)
            gl = tables.gla_lowrank_pairs(lag_idx, feats3[:m_idx])
            dhat = np.float64(dw3[:m_idx]) - gl * tables.dtc3
            inner = float(dhat @ (np.float64(A3[:m_idx, :m_idx, m_idx]) @ dhat))
            total += inner * dw3[m_idx]
        self.study.I3[sample_id] = total


@dataclass
class ExpansionStudy:
    """Per-sample outputs of one batched run plus derived estimates."""

    n_samples: int
    order: int
    dt: float
    horizon: float
    seed: int
    censored: int = 0
    f: np.ndarray = None          # phi(w(tau)) (completed at censoring)
    weight: np.ndarray = None
    clark: np.ndarray = None      # int grad T_tilde phi dw~
    I1: np.ndarray = None
    I2: np.ndarray = None
    I3: np.ndarray = None
    a0: float = 0.0
    exit_step: np.ndarray = None
    exit_time: np.ndarray = None

    def integral(self, n):
        return {0: np.full(self.n_samples, self.a0), 1: self.I1, 2: self.I2, 3: self.I3}[n]

    def partial_sum(self, N):
        s = np.full(self.n_samples, self.a0)
        for n in range(1, N + 1):
            s = s + self.integral(n)
        return s

    def residual_estimate(self, N) -> MCEstimate:
        r = (self.f - self.partial_sum(N)) ** 2
        return MCEstimate.from_samples(r, self.weight)

    def moment_estimate(self, m, n) -> MCEstimate:
        return MCEstimate.from_samples(self.integral(m) * self.integral(n), self.weight)

    def clark_residual_estimate(self) -> MCEstimate:
        r = (self.f - self.a0 - self.clark) ** 2
        return MCEstimate.from_samples(r, self.weight)

    def f_moments(self):
        return (
            MCEstimate.from_samples(self.f, self.weight),
            MCEstimate.from_samples(self.f**2, self.weight),
        )


def _phi_at_exit(model, phi, exit_point, exited):
    out = np.zeros(len(exit_point))
    pts = model.boundary_points()
    for p in pts:
        out[exited & (exit_point == p)] = phi[p]
    return out


def run_expansion_study(model, u, phi, N, mc: MCConfig, measure="Q",
                        ops=None, tables=None) -> ExpansionStudy:
    """One batched Monte Carlo pass computing f, the Clark integral, and
    the iterated integrals up to order N (<= 3) for every sample."""
    N = int(N)
    if N > MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are unsupported")
    if measure not in ("P", "Q"):
        raise ValueError("expansion studies sample under P or Q")
    u = float(u)
    if ops is None:
        grid = QuadratureGrid.for_model(model, mc.grid_nodes, mc.halfline_cutoff, u)
        ops = SemigroupOperators(model, grid)
    phi = {float(k): float(v) for k, v in phi.items()}
    horizon = mc.resolve_horizon(model, u)
    tg = TimeGrid(mc.dt, horizon)
    kernel = ChaosKernel(ops, u, phi)
    if tables is None:
        tables = KernelTables(kernel, mc.dt, tg.n_steps * mc.dt,
                              coarse_factor=mc.coarse_factor, order=max(N, 1))
    study = ExpansionStudy(
        n_samples=mc.n_samples, order=N, dt=mc.dt, horizon=horizon, seed=mc.seed,
        a0=kernel.a0,
    )
    n = mc.n_samples
    study.f = np.zeros(n)
    study.clark = np.zeros(n)
    study.I1 = np.zeros(n)
    study.I2 = np.zeros(n)
    study.I3 = np.zeros(n)
    grad_tt = lambda w: np.asarray(ops.grad_op_T_tilde(phi, w), float)
    rng = RngStream(mc.seed)

    def hook_factory():
        return _ExpansionHook(study, tables, grad_tt, mc.coarse_factor, N)

    out = _dispatch_stopped(model, u, tg, rng, mc.sample_offset, n, measure, hook_factory)

    study.exit_step = out["exit_step"]
    study.exit_time = out["exit_time"]
    study.weight = out["weight"]
    exited = out["exit_step"] >= 0
    study.censored = int(np.sum(~exited))
    study.f = _phi_at_exit(model, phi, out["exit_point"], exited)
    if study.censored:
        # exact conditional completion of phi(w(tau)) for horizon-censored paths
        study.f[~exited] = np.asarray(
            ops.op_T_tilde(phi, out["final_w"][~exited]), float
        )
    return study


def _dispatch_stopped(model, u, tg, rng, sample_lo, n, measure, hook_factory):
    """Batch dispatch with optional thread workers; output identical for any
    worker count (per-sample substreams, per-task hooks, disjoint writes)."""
    workers = worker_count()
    if workers == 1:
        return run_stopped_batch(
            model, u, tg, rng, sample_lo, n, measure, step_hook=hook_factory()
        )
    from .paths import BATCH_SIZE

    keys = ["exit_time", "exit_point", "final_w", "weight"]
    spans = [(lo, min(lo + BATCH_SIZE, n)) for lo in range(0, n, BATCH_SIZE)]

    class _Shifted:
        """Re-bases a task's local sample ids onto the global range."""

        def __init__(self, base, lo):
            self.base, self.lo = base, lo

        def start_batch(self, ids):
            self.base.start_batch(ids + self.lo)

        def step(self, i, ids, *rest):
            self.base.step(i, ids + self.lo, *rest)

        def end_batch(self, ids):
            self.base.end_batch(ids + self.lo)

    def task(span):
        lo, hi = span
        return lo, run_stopped_batch(
            model, u, tg, rng, sample_lo + lo, hi - lo, measure,
            step_hook=_Shifted(hook_factory(), lo),
        )

    results = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(task, spans))
    out = {k: np.empty(n) for k in keys}
    out["exit_step"] = np.empty(n, dtype=np.int64)
    for lo, res in results:
        hi = lo + len(res["weight"])
        for k in keys + ["exit_step"]:
            out[k][lo:hi] = res[k]
    return out


# ----------------------------------------------------------------------
# spec-facing estimator entry points
# ----------------------------------------------------------------------


def expansion_partial_sum(model, u, phi, N, mc: MCConfig) -> MCEstimate:
    """MC estimate of E_Q (phi(w(tau)) - S_N)^2 for the order-N truncation."""
    study = run_expansion_study(model, u, phi, N, mc)
    return study.residual_estimate(N)


def orthogonality_estimate(model, u, phi, orders, mc: MCConfig) -> MCEstimate:
    """MC estimate of E_Q [I_m I_n], m != n (expected zero)."""
    m, n = int(orders[0]), int(orders[1])
    if m == n:
        raise ValueError("orthogonality check needs two distinct orders")
    if max(m, n) > MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are unsupported")
    study = run_expansion_study(model, u, phi, max(m, n), mc)
    return study.moment_estimate(m, n)


def clark_residual(model, u, phi, mc: MCConfig) -> MCEstimate:
    """MC estimate of E_Q (phi(w(tau)) - T_tilde phi(u) - int grad T_tilde phi dw~)^2."""
    study = run_expansion_study(model, u, phi, 0, mc)
    return study.clark_residual_estimate()


# ----------------------------------------------------------------------
# the two-sided identity for conditioned Wiener integrals
# ----------------------------------------------------------------------


class _ItoGHook:
    def __init__(self, ito, g_values):
        self.ito = ito
        self.g = g_values

    def start_batch(self, ids):
        pass

    def step(self, i, ids, w_before, w_after, dwhat, clamped, reflected):
        self.ito[ids] += self.g[i] * dwhat


def eq1_check(model, u, t, psi, g, mc: MCConfig, ops=None, quad_nodes=32):
    """Monte Carlo LHS and deterministic RHS of the conditioned-integral identity

        E_{Q_{t,u}} psi(w(t)) int_0^t g(s) dhat(s)
          = int_0^t (alpha(s,u)/alpha(t,u)) E_{Q_{s,u}}[alpha(t-s, w(s))
                grad Tk_tilde_{t-s} psi (w(s))] g(s) ds.

    ``psi`` is a callable on the domain, ``g`` a callable on [0, t].
    Returns (MCEstimate lhs, float rhs, info dict).
    """
    u = float(u)
    t = float(t)
    if ops is None:
        grid = QuadratureGrid.for_model(model, mc.grid_nodes, mc.halfline_cutoff, u)
        ops = SemigroupOperators(model, grid)
    tg = TimeGrid(mc.dt, max(t, mc.dt))
    n_steps = int(round(t / mc.dt))
    g_vals = np.array([float(g(i * mc.dt)) for i in range(n_steps)])
    ito = np.zeros(mc.n_samples)
    hook = _ItoGHook(ito, g_vals)
    rng = RngStream(mc.seed)
    out = run_conditioned_batch(model, u, tg, rng, mc.sample_offset, mc.n_samples, t,
                                step_hook=hook)
    psi_final = np.array([float(psi(w)) for w in out["final_w"]])
    lhs = MCEstimate.from_samples(psi_final * ito)

    # RHS: integrand collapses to (T^k_s [alpha(t-s,.) grad Tk_tilde_{t-s} psi])(u)
    # * g(s) / alpha(t, u), smooth up to both endpoints.
    psi_fn = GridFunction.from_callable(ops.grid, lambda x: np.asarray([psi(xx) for xx in np.atleast_1d(x)]))
    x_gl, w_gl = np.polynomial.legendre.leggauss(quad_nodes)
    s_nodes = (x_gl + 1.0) * t / 2.0
    s_wts = w_gl * t / 2.0
    total = 0.0
    for s, w_ in zip(s_nodes, s_wts):
        h = ops.weighted_grad_stage(t - s, psi_fn)
        total += w_ * ops.op_Tk_at(s, h, u) * float(g(s))
    rhs = total / float(model.alpha(t, u))
    info = {
        "clamped_paths": int(np.sum(out["clamp_count"] > 0)),
        "reflected_paths": int(np.sum(out["reflect_count"] > 0)),
        "n_samples": mc.n_samples,
    }
    return lhs, float(rhs), info
