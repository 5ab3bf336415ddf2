"""Independent time-domain oracle for the frequency response.

Integrates the block-diagram state space (swing equation, third-order
governor/droop path in controllable canonical form, first-order storage lags,
delayed step activations) with fixed-step classical RK4. Activation instants
that fall inside a step are handled by splitting the step exactly at the
instant, so step inputs never smear across a stage evaluation.

Because the dynamics are linear and inputs are piecewise constant, one RK4
step is the affine map x+ = M(h) x + N(h) b. The integrator precomputes
these matrices per step size and propagates chunks of steps with vectorized
matrix products; the recursion is bit-for-bit the classical RK4 one up to
floating-point reassociation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .freq_model import Portfolio, SourceKind, build_governor_tf

__all__ = ["SimTrace", "CompareResult", "simulate", "compare"]

DIVERGENCE_LIMIT = 10.0  # pu; beyond this the run aborts as diverged


@dataclass
class SimTrace:
    """Uniformly sampled simulation output."""

    dt: float
    t: np.ndarray
    dw: np.ndarray
    source_power: np.ndarray  # shape (n_sources, len(t))
    source_labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.t) != len(self.dw):
            raise DomainError("time and deviation arrays must align")
        if self.source_power.shape != (len(self.source_labels), len(self.t)):
            raise DomainError("per-source power block must align with labels and grid")

    def to_csv(self, path):
        header = ["t_s", "dw_pu"] + [f"src_{lab}_pu" for lab in self.source_labels]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(len(self.t)):
                row = [repr(float(self.t[k])), repr(float(self.dw[k]))]
                row += [repr(float(self.source_power[j, k])) for j in range(len(self.source_labels))]
                fh.write(",".join(row) + "\n")


def _rk4_step_ops(A: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact RK4 step matrices for x' = A x + b with constant b."""
    n = A.shape[0]
    eye = np.eye(n)
    hA = h * A
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    hA4 = hA3 @ hA
    M = eye + hA + hA2 / 2.0 + hA3 / 6.0 + hA4 / 24.0
    N = h * (eye + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0)
    return M, N


def _governor_canonical(params) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Controllable canonical realization of the governor path over the droop."""
    gov = build_governor_tf(params.T_g, params.T_c, params.T_r, params.F_h)
    den = np.asarray(gov.den, dtype=float)
    num = np.zeros(len(den) - 1)
    num[: len(gov.num)] = gov.num
    lead = den[-1]
    a = den[:-1] / lead  # monic denominator, ascending
    order = len(a)
    A = np.zeros((order, order))
    A[:-1, 1:] = np.eye(order - 1)
    A[-1, :] = -a
    B = np.zeros(order)
    B[-1] = 1.0
    C = num / (params.K * lead)
    return A, B, C


def _build_state_space(pf: Portfolio):
    """Assemble A, per-source input routing, and state layout for a portfolio.

    State layout: [dw, governor states (3), one lag state per storage source
    with a nonzero lag constant].
    """
    params = pf.params
    Ag, Bg, Cg = _governor_canonical(params)
    n_gov = Ag.shape[0]
    lag_sources = [
        (i, s)
        for i, s in enumerate(pf.sources)
        if s.kind is SourceKind.DER and s.dynamics > 0.0
    ]
    n = 1 + n_gov + len(lag_sources)
    A = np.zeros((n, n))
    two_h = 2.0 * params.H
    A[0, 0] = -params.D / two_h
    A[0, 1 : 1 + n_gov] = -Cg / two_h
    A[1 : 1 + n_gov, 0] = Bg
    A[1 : 1 + n_gov, 1 : 1 + n_gov] = Ag
    lag_state_of = {}
    for j, (i, s) in enumerate(lag_sources):
        row = 1 + n_gov + j
        lag_state_of[i] = row
        A[row, row] = -1.0 / s.dynamics
        A[0, row] = 1.0 / two_h
    return A, lag_state_of


def simulate(pf: Portfolio, t_end: float, dt: float) -> SimTrace:
    """Fixed-step RK4 trace of the portfolio response on [0, t_end]."""
    params = pf.params
    if not dt > 0:
        raise DomainError(f"step size must be positive, got {dt}")
    if not t_end > 0:
        raise DomainError(f"end time must be positive, got {t_end}")
    limits = [params.T_g, params.T_c]
    limits += [s.dynamics for s in pf.sources if s.dynamics > 0.0]
    dt_max = min(limits) / 10.0
    if dt > dt_max * (1.0 + 1e-12):
        raise DomainError(
            f"step size {dt} too coarse for the fastest time constant; need <= {dt_max}"
        )

    A, lag_state_of = _build_state_space(pf)
    n = A.shape[0]
    two_h = 2.0 * params.H

    n_samples = int(np.floor(t_end / dt + 1e-9)) + 1
    t = np.arange(n_samples) * dt
    horizon = t[-1]

    # Segment boundaries: every distinct activation instant inside the run.
    delays = sorted({s.delay for s in pf.sources if 0.0 < s.delay < horizon})
    edges = [0.0] + delays + [horizon]

    states = np.zeros((n_samples, n))
    x = np.zeros(n)
    ops_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def ops(h: float):
        got = ops_cache.get(h)
        if got is None:
            got = _rk4_step_ops(A, h)
            ops_cache[h] = got
        return got

    def input_vector(seg_start: float) -> np.ndarray:
        b = np.zeros(n)
        swing = -pf.loss.magnitude  # the contingency steps on at t = 0
        for i, s in enumerate(pf.sources):
            if s.delay > seg_start + 1e-15:
                continue
            row = lag_state_of.get(i)
            if row is None:
                swing += s.magnitude
            else:
                b[row] = s.magnitude / s.dynamics
        b[0] += swing / two_h
        return b

    states[0] = x
    for e0, e1 in zip(edges[:-1], edges[1:]):
        b = input_vector(e0)
        k_first = int(np.ceil(e0 / dt - 1e-9))
        if abs(k_first * dt - e0) > 1e-12:
            k_first += 0  # e0 strictly between grid points
            first_sample = k_first * dt
            if first_sample < e0:
                k_first += 1
                first_sample = k_first * dt
        else:
            first_sample = k_first * dt
        k_last = int(np.floor(e1 / dt + 1e-9))
        if k_last * dt > e1 + 1e-12:
            k_last -= 1

        if k_first > k_last:
            # No sample grid point inside; one partial step covers the segment.
            h = e1 - e0
            if h > 1e-15:
                M, N = ops(h)
                x = M @ x + N @ b
            continue

        # Partial entry step from the segment start to the first grid point.
        h_in = first_sample - e0
        if h_in > 1e-15:
            M, N = ops(h_in)
            x = M @ x + N @ b
        if first_sample <= horizon + 1e-12:
            states[k_first] = x

        nsteps = k_last - k_first
        if nsteps > 0:
            x = _propagate_uniform(x, A, b, dt, nsteps, states, k_first, ops)

        # Partial exit step from the last grid point to the segment end.
        h_out = e1 - k_last * dt
        if h_out > 1e-15:
            M, N = ops(h_out)
            x = M @ x + N @ b

        if np.max(np.abs(states[k_first : k_last + 1, 0])) > DIVERGENCE_LIMIT:
            raise NumericalError(
                "simulation diverged: |dw| exceeded "
                f"{DIVERGENCE_LIMIT} pu before t = {e1:.3f} s"
            )

    dw = states[:, 0]

    labels = []
    powers = np.zeros((len(pf.sources) + 1, n_samples))
    for i, s in enumerate(pf.sources):
        labels.append(f"{s.kind.value}{i}")
        row = lag_state_of.get(i)
        if row is None:
            powers[i] = s.magnitude * (t >= s.delay - 1e-12)
        else:
            powers[i] = states[:, row]
    labels.append("loss")
    powers[-1] = pf.loss.magnitude * np.ones(n_samples)

    return SimTrace(dt=dt, t=t, dw=dw, source_power=powers, source_labels=tuple(labels))


def _propagate_uniform(x, A, b, dt, nsteps, out, k0, ops):
    """Advance nsteps uniform RK4 steps, writing each state into out.

    Chunked: chunk-start states are advanced sequentially with a doubled
    step operator, then all chunks advance in lockstep so the per-step work
    is a single small matrix product.
    """
    M, N = ops(dt)
    m = N @ b
    chunk = 256
    if nsteps <= chunk:
        for j in range(1, nsteps + 1):
            x = M @ x + m
            out[k0 + j] = x
        return x

    n_full = nsteps // chunk
    # Chunk operator by binary doubling: (M2, m2) = (M M, M m + m).
    Mc, mc = M, m
    c = 1
    while c * 2 <= chunk:
        mc = Mc @ mc + mc
        Mc = Mc @ Mc
        c *= 2
    while c < chunk:
        mc = M @ mc + m
        Mc = M @ Mc
        c += 1

    starts = np.empty((n_full, len(x)))
    xi = x
    for i in range(n_full):
        starts[i] = xi
        xi = Mc @ xi + mc

    X = starts
    MT = M.T
    for j in range(1, chunk + 1):
        X = X @ MT + m
        idx = k0 + j + chunk * np.arange(n_full)
        out[idx] = X

    x = xi
    done = n_full * chunk
    for j in range(done + 1, nsteps + 1):
        x = M @ x + m
        out[k0 + j] = x
    return x


@dataclass
class CompareResult:
    max_abs: float
    rmse: float
    argmax_t: float


def compare(a, b) -> CompareResult:
    """Error metrics between two traces, or a trace and a sampler callable.

    Traces with different grids are resampled onto the coarser grid over the
    overlapping time range; callables are evaluated on the trace grid.
    """
    a_trace = isinstance(a, SimTrace)
    b_trace = isinstance(b, SimTrace)
    if not a_trace and not b_trace:
        raise DomainError("at least one argument must be a sampled trace")
    if a_trace and b_trace:
        lo = max(a.t[0], b.t[0])
        hi = min(a.t[-1], b.t[-1])
        if hi <= lo:
            raise DomainError("traces have disjoint time ranges")
        coarse, fine = (a, b) if a.dt >= b.dt else (b, a)
        mask = (coarse.t >= lo - 1e-12) & (coarse.t <= hi + 1e-12)
        grid = coarse.t[mask]
        ya = coarse.dw[mask]
        yb = np.interp(grid, fine.t, fine.dw)
        if coarse is b:
            ya, yb = yb, ya
    else:
        trace = a if a_trace else b
        func = b if a_trace else a
        grid = trace.t
        ya = trace.dw
        yb = np.asarray(func(grid), dtype=float)
        if not a_trace:
            ya, yb = yb, ya
    diff = ya - yb
    k = int(np.argmax(np.abs(diff)))
    return CompareResult(
        max_abs=float(np.abs(diff).max()),
        rmse=float(np.sqrt(np.mean(diff**2))),
        argmax_t=float(grid[k]),
    )
