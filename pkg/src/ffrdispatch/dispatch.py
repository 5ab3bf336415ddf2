"""Reserve dispatch: fleet modeling, latency-ordered allocation, and audit.

Storage devices are reduced to equivalent delayed steps (latency plus lag
constant), the fleet is sorted by effective latency, and reserves are added
greedily from fastest to slowest until the response satisfies both the
steady-state coverage requirement and the nadir limit. A subset-enumeration
baseline bounds the optimality gap on desk-scale instances, and an audit
re-checks every physical constraint on any proposed solution.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InfeasibleError, UnroutedDeviceError
from .freq_model import PortfolioEvaluator, SystemParams
from .nadir import (
    DEFAULT_HORIZON,
    NadirBracket,
    NadirResult,
    _find_nadir_ev,
    nadir_bounds,
)
from .routing import PathSet

__all__ = [
    "DeviceKind",
    "Device",
    "DispatchProblem",
    "SortedSequence",
    "DispatchSolution",
    "AuditReport",
    "ConstraintCheck",
    "equivalent_latency",
    "build_sorted_sequence",
    "warm_start",
    "warm_start_size",
    "heuristic_allocate",
    "exact_baseline",
    "grid_baseline",
    "audit",
    "cost",
    "build_evaluator",
]

# Padding around the precomputed nadir interval: its endpoints are
# themselves nadir times of the extreme sets, so the root for an
# intermediate set can sit exactly on an edge.
BRACKET_PAD = 1e-3
BISECT_ITERATIONS = 64


class DeviceKind:
    DER = "der"
    CL = "cl"


@dataclass
class Device:
    """One flexible device: a storage unit (der) or controllable load (cl)."""

    id: str
    kind: str
    R_max: float
    T_d: float = 0.0
    paths: PathSet | None = None
    selected_latency: float | None = None
    selected_path: str | None = None

    def __post_init__(self):
        if self.kind not in (DeviceKind.DER, DeviceKind.CL):
            raise DomainError(f"unknown device kind {self.kind!r}")
        if not self.R_max > 0:
            raise DomainError(f"device {self.id}: R_max must be positive")
        if self.T_d < 0:
            raise DomainError(f"device {self.id}: T_d must be nonnegative")
        if self.kind == DeviceKind.CL and self.T_d != 0.0:
            raise DomainError(f"device {self.id}: loads have no lag constant")
        if self.selected_latency is not None and self.selected_latency < 0:
            raise DomainError(f"device {self.id}: latency must be nonnegative")

    @property
    def routed(self) -> bool:
        return self.selected_latency is not None


@dataclass
class DispatchProblem:
    """Contingency size, nadir limit, and the candidate fleet."""

    devices: list[Device]
    dP_L: float
    dw_max: float
    C_rr: float
    params: SystemParams
    horizon: float = DEFAULT_HORIZON

    def __post_init__(self):
        if not self.dP_L > 0:
            raise DomainError(f"contingency size must be positive, got {self.dP_L}")
        if not self.dw_max > 0:
            raise DomainError(f"nadir limit must be positive, got {self.dw_max}")
        if self.C_rr < 0:
            raise DomainError(f"remuneration rate must be nonnegative, got {self.C_rr}")

    def device_by_id(self, device_id: str) -> Device:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise DomainError(f"unknown device id {device_id!r}")


def equivalent_latency(tau: float, T_d: float) -> float:
    """Energy-preserving step-model delay of a first-order device: tau + T_d."""
    if tau < 0 or T_d < 0:
        raise DomainError("latency and lag constant must be nonnegative")
    return tau + T_d


@dataclass(frozen=True)
class SortedSequence:
    """Fleet sorted by effective latency (storage first on ties)."""

    ids: tuple[str, ...]
    eff: np.ndarray
    R: np.ndarray
    tau: np.ndarray
    T_d: np.ndarray
    is_der: np.ndarray
    devices: tuple[Device, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> list[tuple[float, str]]:
        return [(float(e), i) for e, i in zip(self.eff, self.ids)]


def build_sorted_sequence(devices) -> SortedSequence:
    """Sort devices ascending by effective latency.

    Storage devices use latency + lag constant; loads use raw latency. The
    sort is stable over the storage-then-load concatenation order, so equal
    effective latencies keep storage devices first.
    """
    ders = [d for d in devices if d.kind == DeviceKind.DER]
    cls_ = [d for d in devices if d.kind == DeviceKind.CL]
    ordered = ders + cls_
    for d in ordered:
        if not d.routed:
            raise UnroutedDeviceError(f"device {d.id} has no selected latency")
    tau = np.array([d.selected_latency for d in ordered], dtype=float)
    td = np.array(
        [d.T_d if d.kind == DeviceKind.DER else 0.0 for d in ordered], dtype=float
    )
    eff = tau + td
    order = np.argsort(eff, kind="stable")
    ordered = [ordered[i] for i in order]
    return SortedSequence(
        ids=tuple(d.id for d in ordered),
        eff=eff[order],
        R=np.array([d.R_max for d in ordered], dtype=float),
        tau=tau[order],
        T_d=td[order],
        is_der=np.array([d.kind == DeviceKind.DER for d in ordered], dtype=bool),
        devices=tuple(ordered),
    )


def warm_start_size(seq: SortedSequence, dP_L: float, *, allow_short: bool = False) -> int:
    """Length of the smallest prefix whose capacity covers the contingency."""
    if len(seq) == 0:
        if allow_short:
            return 0
        raise InfeasibleError("no devices available to cover the contingency")
    csum = np.cumsum(seq.R)
    if csum[-1] < dP_L:
        if allow_short:
            return len(seq)
        raise InfeasibleError(
            f"total fleet capacity {csum[-1]:.6g} pu cannot cover the "
            f"contingency {dP_L:.6g} pu"
        )
    if dP_L <= 0:
        return 0
    return int(np.searchsorted(csum, dP_L, side="left")) + 1


def warm_start(seq: SortedSequence, dP_L: float) -> list[tuple[float, str]]:
    """The smallest latency-ordered activation prefix covering the contingency."""
    k = warm_start_size(seq, dP_L)
    return seq.entries[:k]


def build_evaluator(problem: DispatchProblem, seq: SortedSequence, k: int) -> PortfolioEvaluator:
    """Evaluator for the loss plus the first k sequence devices at full capacity."""
    ev = PortfolioEvaluator(problem.params)
    ev.add_loss(problem.dP_L)
    if k > 0:
        ev.bulk_add(seq.R[:k], seq.tau[:k], seq.T_d[:k])
    return ev


@dataclass
class DispatchSolution:
    """Activated reserves with the resulting nadir, cost, and bookkeeping."""

    status: str  # "feasible" | "infeasible"
    activations: tuple[tuple[str, float], ...]
    t_nad: float
    w_nad: float
    cost: float
    iterations: int
    path_choices: dict[str, str | None]
    total_reserve: float
    bracket: tuple[float, float] | None = None
    bracket_violations: int = 0
    post_trimmed: bool = False
    wall_time_s: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def nadir_hz(self, f_nom: float) -> float:
        return f_nom * (1.0 + self.w_nad)


def _padded_interval(bracket: NadirBracket, horizon: float) -> tuple[float, float]:
    lo = max(0.0, bracket.t_min - BRACKET_PAD)
    hi = min(horizon, bracket.t_max + BRACKET_PAD)
    if hi <= lo:
        hi = min(horizon, lo + 2.0 * BRACKET_PAD)
    return lo, hi


def heuristic_allocate(
    problem: DispatchProblem,
    *,
    warm_start: bool = True,
    nadir_bracket: bool = True,
    post_trim: bool = False,
) -> DispatchSolution:
    """Latency-ordered greedy allocation.

    Devices are added at full capacity from lowest to highest effective
    latency; the loop stops at the first set that both covers the contingency
    and keeps the nadir within the limit. The warm start begins directly at
    the smallest covering prefix; the nadir bracket confines the per-iteration
    root search. A bracketed pass is re-verified with an unrestricted solve
    before the loop may stop, so accelerations cannot change the outcome;
    any disagreement is counted as a bracket violation.
    """
    t_start = time.perf_counter()
    seq = build_sorted_sequence(problem.devices)
    horizon = problem.horizon
    n = len(seq)
    total_capacity = float(seq.R.sum()) if n else 0.0
    use_warm = warm_start
    use_bracket = nadir_bracket

    interval = None
    bracket_obj = None
    if use_bracket and n:
        bracket_obj = nadir_bounds(problem, horizon=horizon)
        interval = _padded_interval(bracket_obj, horizon)

    csum = np.cumsum(seq.R) if n else np.empty(0)
    covered_at = (
        int(np.searchsorted(csum, problem.dP_L, side="left")) + 1
        if n and csum[-1] >= problem.dP_L
        else None
    )

    ev = PortfolioEvaluator(problem.params)
    ev.add_loss(problem.dP_L)

    iterations = 0
    violations = 0
    k_start = 1
    if use_warm and covered_at is not None:
        k_start = covered_at
        if k_start > 1:
            ev.bulk_add(seq.R[: k_start - 1], seq.tau[: k_start - 1], seq.T_d[: k_start - 1])

    result: NadirResult | None = None
    stopped_at: int | None = None
    for k in range(k_start, n + 1):
        ev.add_source(seq.R[k - 1], seq.tau[k - 1], seq.T_d[k - 1])
        iterations += 1
        if covered_at is None or k < covered_at:
            continue  # coverage unsatisfied; the nadir check alone cannot stop
        if interval is not None:
            res = _find_nadir_ev(ev, interval, horizon)
            if res.w_nad >= -problem.dw_max:
                # Candidate stop: confirm against the unrestricted search.
                full = _find_nadir_ev(ev, None, horizon)
                if not (interval[0] <= full.t_nad <= interval[1]):
                    violations += 1
                res = full
        else:
            res = _find_nadir_ev(ev, None, horizon)
        result = res
        if res.w_nad >= -problem.dw_max:
            stopped_at = k
            break

    if stopped_at is None:
        # Exhausted the sequence; report the best-achieved response.
        if result is None:
            if n:
                ev_full = build_evaluator(problem, seq, n)
                result = _find_nadir_ev(ev_full, None, horizon)
            else:
                ev_loss = PortfolioEvaluator(problem.params)
                ev_loss.add_loss(problem.dP_L)
                result = _find_nadir_ev(ev_loss, None, horizon)
        reserves = list(zip(seq.ids, seq.R.tolist()))
        total = float(seq.R.sum()) if n else 0.0
        return DispatchSolution(
            status="infeasible",
            activations=tuple(reserves),
            t_nad=result.t_nad,
            w_nad=result.w_nad,
            cost=problem.C_rr * total,
            iterations=iterations,
            path_choices={d.id: d.selected_path for d in seq.devices},
            total_reserve=total,
            bracket=interval,
            bracket_violations=violations,
            wall_time_s=time.perf_counter() - t_start,
        )

    reserves = seq.R[:stopped_at].copy()
    trimmed = False
    if post_trim and stopped_at >= 1:
        others = float(reserves[:-1].sum())
        lower = max(0.0, problem.dP_L - others)
        r_full = float(reserves[-1])
        if lower < r_full:

            def feasible_at(r: float) -> NadirResult | None:
                ev.replace_last_magnitude(r)
                res = _find_nadir_ev(ev, None, horizon)
                return res if res.w_nad >= -problem.dw_max else None

            res_low = feasible_at(lower)
            if res_low is not None:
                reserves[-1] = lower
                result = res_low
                trimmed = True
            else:
                lo, hi = lower, r_full
                best = result
                for _ in range(BISECT_ITERATIONS):
                    mid = 0.5 * (lo + hi)
                    res_mid = feasible_at(mid)
                    if res_mid is not None:
                        hi, best = mid, res_mid
                    else:
                        lo = mid
                reserves[-1] = hi
                ev.replace_last_magnitude(hi)
                result = best
                trimmed = hi < r_full

    total = float(reserves.sum())
    activations = tuple(zip(seq.ids[:stopped_at], reserves.tolist()))
    return DispatchSolution(
        status="feasible",
        activations=activations,
        t_nad=result.t_nad,
        w_nad=result.w_nad,
        cost=problem.C_rr * total,
        iterations=iterations,
        path_choices={d.id: d.selected_path for d in seq.devices},
        total_reserve=total,
        bracket=interval,
        bracket_violations=violations,
        post_trimmed=trimmed,
        wall_time_s=time.perf_counter() - t_start,
    )


def _subset_evaluator(
    problem: DispatchProblem, seq: SortedSequence, members: np.ndarray, r_marginal: float
) -> PortfolioEvaluator:
    ev = PortfolioEvaluator(problem.params)
    ev.add_loss(problem.dP_L)
    R = seq.R[members].copy()
    R[-1] = r_marginal
    ev.bulk_add(R, seq.tau[members], seq.T_d[members])
    return ev


def exact_baseline(problem: DispatchProblem, max_devices: int = 12) -> DispatchSolution:
    """Subset enumeration with marginal-device trimming.

    Every activation subset with enough capacity is considered; within a
    subset all devices run at full capacity except the highest-effective-
    latency member, whose reserve is minimized by bisection subject to the
    nadir limit and coverage. Subsets are visited in ascending order of a
    cost lower bound so the search can stop early; this cannot change the
    returned optimum. Desk-scale only: refuses more than ``max_devices``.
    """
    t_start = time.perf_counter()
    if max_devices > 12:
        raise DomainError("the enumeration baseline is capped at 12 devices")
    n = len(problem.devices)
    if n > max_devices:
        raise DomainError(
            f"{n} devices exceed the baseline cap of {max_devices}; "
            "use heuristic_allocate for larger fleets"
        )
    seq = build_sorted_sequence(problem.devices)
    horizon = problem.horizon
    dP_L = problem.dP_L

    masks = np.arange(1, 2**n, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n)[None, :]) & 1
    subset_R = bits @ seq.R
    top = n - 1 - np.argmax(bits[:, ::-1], axis=1)  # highest sequence index present
    others = subset_R - seq.R[top]
    ok = subset_R >= dP_L
    lower = np.maximum(0.0, dP_L - others)
    bound = others + lower  # least possible total reserve of the subset

    order = np.argsort(bound, kind="stable")
    best_cost = math.inf
    best: tuple[np.ndarray, float, NadirResult] | None = None
    nadir_of = lambda ev: _find_nadir_ev(ev, None, horizon)

    for m in order:
        if not ok[m]:
            continue
        if problem.C_rr * bound[m] >= best_cost - 1e-12:
            break
        members = np.nonzero(bits[m])[0]
        r_full = float(seq.R[top[m]])
        res_full = nadir_of(_subset_evaluator(problem, seq, members, r_full))
        if res_full.w_nad < -problem.dw_max:
            continue  # even full capacity misses the limit
        lo = float(lower[m])
        if lo < r_full:
            res_lo = nadir_of(_subset_evaluator(problem, seq, members, lo))
            if res_lo.w_nad >= -problem.dw_max:
                r_star, res_star = lo, res_lo
            else:
                hi = r_full
                res_star = res_full
                for _ in range(BISECT_ITERATIONS):
                    mid = 0.5 * (lo + hi)
                    res_mid = nadir_of(_subset_evaluator(problem, seq, members, mid))
                    if res_mid.w_nad >= -problem.dw_max:
                        hi, res_star = mid, res_mid
                    else:
                        lo = mid
                r_star = hi
        else:
            r_star, res_star = r_full, res_full
        total = float(others[m] + r_star)
        c = problem.C_rr * total
        if c < best_cost:
            best_cost = c
            reserves = seq.R[members].copy()
            reserves[-1] = r_star
            best = (members, r_star, res_star, reserves)

    if best is None:
        ev_full = build_evaluator(problem, seq, n)
        res = _find_nadir_ev(ev_full, None, horizon) if n else None
        return DispatchSolution(
            status="infeasible",
            activations=tuple(zip(seq.ids, seq.R.tolist())),
            t_nad=res.t_nad if res else 0.0,
            w_nad=res.w_nad if res else 0.0,
            cost=problem.C_rr * float(seq.R.sum()) if n else 0.0,
            iterations=len(masks),
            path_choices={d.id: d.selected_path for d in seq.devices},
            total_reserve=float(seq.R.sum()) if n else 0.0,
            wall_time_s=time.perf_counter() - t_start,
        )

    members, r_star, res_star, reserves = best
    ids = tuple(seq.ids[i] for i in members)
    total = float(reserves.sum())
    return DispatchSolution(
        status="feasible",
        activations=tuple(zip(ids, reserves.tolist())),
        t_nad=res_star.t_nad,
        w_nad=res_star.w_nad,
        cost=problem.C_rr * total,
        iterations=len(masks),
        path_choices={d.id: d.selected_path for d in seq.devices},
        total_reserve=total,
        wall_time_s=time.perf_counter() - t_start,
    )


def grid_baseline(
    problem: DispatchProblem,
    steps: int = 100,
    *,
    t_max: float = 30.0,
    t_step: float = 0.01,
) -> DispatchSolution:
    """Dense reserve-grid cross-check for up to three devices.

    Each device's reserve ranges over a uniform grid; the nadir of every
    combination is the minimum of the (linear-in-reserves) deviation over a
    dense time grid, with no root finding involved. Intended as an
    independent oracle for the enumeration baseline.
    """
    n = len(problem.devices)
    if n > 3:
        raise DomainError("the grid cross-check is capped at 3 devices")
    seq = build_sorted_sequence(problem.devices)
    t = np.arange(0.0, t_max + t_step / 2, t_step)

    ev0 = PortfolioEvaluator(problem.params)
    ev0.add_loss(problem.dP_L)
    base = ev0.deviation(t)

    unit = np.empty((n, len(t)))
    for i in range(n):
        evu = PortfolioEvaluator(problem.params)
        evu.add_loss(0.0)
        evu.add_source(1.0, float(seq.tau[i]), float(seq.T_d[i]))
        unit[i] = evu.deviation(t)

    axes = [np.linspace(0.0, float(r), steps + 1) for r in seq.R]
    mesh = np.meshgrid(*axes, indexing="ij")
    combos = np.stack([m.ravel() for m in mesh], axis=0)  # (n, m)
    totals = combos.sum(axis=0)

    best_cost = math.inf
    best_idx = -1
    best_w = 0.0
    chunk = max(1, int(2e7 // len(t)))
    for s in range(0, combos.shape[1], chunk):
        block = combos[:, s : s + chunk]
        dev = base[:, None] + unit.T @ block
        w = dev.min(axis=0)
        feas = (w >= -problem.dw_max) & (totals[s : s + chunk] >= problem.dP_L)
        if not feas.any():
            continue
        costs = np.where(feas, totals[s : s + chunk], np.inf)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost = float(costs[j])
            best_idx = s + j
            best_w = float(w[j])

    if best_idx < 0:
        return DispatchSolution(
            status="infeasible",
            activations=(),
            t_nad=0.0,
            w_nad=0.0,
            cost=0.0,
            iterations=combos.shape[1],
            path_choices={},
            total_reserve=0.0,
        )
    reserves = combos[:, best_idx]
    active = [(seq.ids[i], float(reserves[i])) for i in range(n) if reserves[i] > 0]
    return DispatchSolution(
        status="feasible",
        activations=tuple(active),
        t_nad=0.0,
        w_nad=best_w,
        cost=problem.C_rr * float(reserves.sum()),
        iterations=combos.shape[1],
        path_choices={},
        total_reserve=float(reserves.sum()),
    )


@dataclass
class ConstraintCheck:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class AuditReport:
    checks: list[ConstraintCheck] = field(default_factory=list)
    t_nad: float = 0.0
    w_nad: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            detail = f"  {c.detail}" if c.detail else ""
            out.append(f"{status}  {c.name}: margin {c.margin:+.3e}{detail}")
        return out


def audit(problem: DispatchProblem, solution: DispatchSolution) -> AuditReport:
    """Re-check every physical constraint of a proposed solution.

    Reports margins per constraint (nadir, steady-state coverage, per-device
    capacity, single-path selection, activation consistency) and never raises.
    """
    report = AuditReport()
    tol = 1e-12
    by_id = {d.id: d for d in problem.devices}

    total = math.fsum(r for _, r in solution.activations)
    ss_margin = total - problem.dP_L
    report.checks.append(
        ConstraintCheck(
            "steady_state_coverage",
            ss_margin >= -tol,
            ss_margin,
            f"sum reserves {total:.9g} pu vs contingency {problem.dP_L:.9g} pu",
        )
    )

    cap_margin = math.inf
    cap_detail = ""
    ids_seen = set()
    consistent = True
    for dev_id, r in solution.activations:
        if dev_id in ids_seen:
            consistent = False
            cap_detail = f"duplicate activation of {dev_id}"
            break
        ids_seen.add(dev_id)
        d = by_id.get(dev_id)
        if d is None:
            consistent = False
            cap_detail = f"activation of unknown device {dev_id}"
            break
        margin = d.R_max - r
        if margin < cap_margin:
            cap_margin = margin
            if margin < -tol:
                cap_detail = f"device {dev_id} exceeds capacity by {-margin:.3e} pu"
        if r < -tol:
            consistent = False
            cap_detail = f"device {dev_id} has negative reserve {r:.3e}"
            break
    if cap_margin is math.inf:
        cap_margin = 0.0
    report.checks.append(
        ConstraintCheck("capacity_bounds", cap_margin >= -tol and consistent, cap_margin, cap_detail)
    )
    report.checks.append(
        ConstraintCheck(
            "activation_consistency",
            consistent,
            0.0 if consistent else -1.0,
            cap_detail if not consistent else "",
        )
    )

    path_ok = True
    path_detail = ""
    for d in problem.devices:
        if d.paths is None:
            if not d.routed:
                path_ok = False
                path_detail = f"device {d.id} is unrouted"
                break
            continue
        if d.selected_path is None:
            path_ok = False
            path_detail = f"device {d.id} has no selected path"
            break
        if d.selected_path not in d.paths.path_ids():
            path_ok = False
            path_detail = f"device {d.id} selected unknown path {d.selected_path!r}"
            break
        chosen = solution.path_choices.get(d.id)
        if chosen is not None and chosen != d.selected_path:
            path_ok = False
            path_detail = f"device {d.id} solution path {chosen!r} != routed {d.selected_path!r}"
            break
    report.checks.append(
        ConstraintCheck("single_path_selection", path_ok, 1.0 if path_ok else -1.0, path_detail)
    )

    ev = PortfolioEvaluator(problem.params)
    ev.add_loss(problem.dP_L)
    entries = []
    for dev_id, r in solution.activations:
        d = by_id.get(dev_id)
        if d is None or not d.routed:
            continue
        entries.append((r, d.selected_latency, d.T_d if d.kind == DeviceKind.DER else 0.0))
    if entries:
        arr = np.array(entries)
        ev.bulk_add(arr[:, 0], arr[:, 1], arr[:, 2])
    res = _find_nadir_ev(ev, None, problem.horizon)
    report.t_nad = res.t_nad
    report.w_nad = res.w_nad
    nadir_margin = res.w_nad + problem.dw_max
    report.checks.append(
        ConstraintCheck(
            "nadir_limit",
            nadir_margin >= -tol,
            nadir_margin,
            f"nadir {res.w_nad:.6e} pu at t = {res.t_nad:.4f} s, limit -{problem.dw_max:.6e} pu",
        )
    )
    return report


def cost(solution_or_activations, C_rr: float) -> float:
    """Remuneration: rate times the total activated reserve."""
    if isinstance(solution_or_activations, DispatchSolution):
        activations = solution_or_activations.activations
    else:
        activations = solution_or_activations
    return C_rr * math.fsum(r for _, r in activations)
