"""Frequency nadir location: the global minimum of the deviation trace.

The deviation rate is scanned on a grid per segment between activation
instants (the rate is discontinuous there), sign changes are refined by
bisection, and the minimum is taken over all stationary points, activation
kinks, and interval endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .freq_model import Portfolio, PortfolioEvaluator

__all__ = ["NadirResult", "NadirBracket", "find_nadir", "nadir_bounds"]

DEFAULT_HORIZON = 60.0
POINTS_PER_SEGMENT = 200
# Total scan budget; with very many distinct activation instants the
# per-segment point count is scaled down to keep scans tractable.
SCAN_BUDGET = 20000
RATE_TOL = 1e-9
TIME_TOL = 1e-9
MAX_BISECT = 60


@dataclass
class NadirResult:
    """Location and value of the deviation minimum.

    ``stationary`` is False when the minimum sits on a search boundary or an
    activation kink rather than at a zero of the rate.
    """

    t_nad: float
    w_nad: float
    stationary: bool
    bracket_used: tuple[float, float] | None = None


@dataclass
class NadirBracket:
    """Search interval for the nadir time; ``swapped`` flags an inverted pair."""

    t_min: float
    t_max: float
    swapped: bool = False

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_min, self.t_max)


def _segment_grid(lo: float, hi: float, kinks: np.ndarray, points: int):
    """Concatenated scan grid split at interior kinks, with segment slices."""
    interior = kinks[(kinks > lo + 1e-15) & (kinks < hi - 1e-15)]
    edges = np.concatenate([[lo], interior, [hi]])
    nseg = len(edges) - 1
    pts = points
    if nseg * pts > SCAN_BUDGET:
        pts = max(8, SCAN_BUDGET // nseg)
    grids = []
    slices = []
    start = 0
    for a, b in zip(edges[:-1], edges[1:]):
        g = np.linspace(a, b, pts)
        grids.append(g)
        slices.append((start, start + pts))
        start += pts
    return edges, np.concatenate(grids), slices


def _find_nadir_ev(
    ev: PortfolioEvaluator,
    bracket: tuple[float, float] | None,
    horizon: float,
    points_per_segment: int = POINTS_PER_SEGMENT,
) -> NadirResult:
    if bracket is not None:
        lo, hi = bracket
        if not (0.0 <= lo < hi):
            raise DomainError(f"invalid nadir bracket {bracket}")
        lo = max(0.0, lo)
        hi = min(hi, horizon)
        if hi <= lo:
            raise DomainError(f"bracket {bracket} lies outside the horizon {horizon}")
    else:
        lo, hi = 0.0, horizon

    edges, grid, slices = _segment_grid(lo, hi, ev.kink_times(), points_per_segment)
    rate = ev.rate(grid)

    # Sign-change brackets, segment by segment (the rate jumps at kinks).
    b_lo, b_hi, r_lo = [], [], []
    for start, stop in slices:
        r = rate[start:stop]
        g = grid[start:stop]
        sign = np.sign(r)
        flips = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
        for i in flips:
            b_lo.append(g[i])
            b_hi.append(g[i + 1])
            r_lo.append(r[i])
        zeros = np.nonzero(r == 0.0)[0]
        for i in zeros:
            b_lo.append(g[i])
            b_hi.append(g[i])
            r_lo.append(0.0)

    roots = np.empty(0)
    if b_lo:
        lo_arr = np.asarray(b_lo)
        hi_arr = np.asarray(b_hi)
        f_lo = np.asarray(r_lo)
        it = 0
        while np.any(hi_arr - lo_arr > TIME_TOL):
            if it >= MAX_BISECT:
                raise NumericalError(
                    "nadir bisection failed to reach tolerance in "
                    f"{MAX_BISECT} iterations"
                )
            mid = 0.5 * (lo_arr + hi_arr)
            f_mid = ev.rate(mid)
            take_left = f_lo * f_mid <= 0.0
            hi_arr = np.where(take_left, mid, hi_arr)
            lo_arr = np.where(take_left, lo_arr, mid)
            f_lo = np.where(take_left, f_lo, f_mid)
            it += 1
        roots = 0.5 * (lo_arr + hi_arr)

    candidates = np.concatenate([roots, edges])
    values = ev.deviation(candidates)
    k = int(np.argmin(values))
    t_nad = float(candidates[k])
    w_nad = float(values[k])
    stationary = abs(ev.rate(t_nad)) <= RATE_TOL or k < len(roots)
    return NadirResult(
        t_nad=t_nad,
        w_nad=w_nad,
        stationary=bool(stationary),
        bracket_used=(lo, hi) if bracket is not None else None,
    )


def find_nadir(
    pf: Portfolio,
    bracket: tuple[float, float] | None = None,
    *,
    horizon: float = DEFAULT_HORIZON,
    points_per_segment: int = POINTS_PER_SEGMENT,
) -> NadirResult:
    """Global minimum of the portfolio deviation on [0, horizon].

    With a bracket the search is restricted to it; if the true minimum lies
    outside, the result sits on a bracket edge and is flagged non-stationary.
    """
    return _find_nadir_ev(pf.evaluator(), bracket, horizon, points_per_segment)


def nadir_bounds(problem, *, horizon: float = DEFAULT_HORIZON) -> NadirBracket:
    """Nadir-time interval from the two extreme activation sets.

    The upper end is the nadir time of the smallest latency-ordered prefix
    covering the contingency; the lower end is the nadir time with every
    device activated at full capacity. Intermediate activation sets are
    expected (empirically) to fall between the two.
    """
    from .dispatch import build_evaluator, build_sorted_sequence, warm_start_size

    seq = build_sorted_sequence(problem.devices)
    k0 = warm_start_size(seq, problem.dP_L, allow_short=True)

    ev_warm = build_evaluator(problem, seq, k0)
    t_max = _find_nadir_ev(ev_warm, None, horizon).t_nad
    if k0 == len(seq.ids):
        t_min = t_max
    else:
        ev_full = build_evaluator(problem, seq, len(seq.ids))
        t_min = _find_nadir_ev(ev_full, None, horizon).t_nad

    swapped = t_min > t_max
    if swapped:
        t_min, t_max = t_max, t_min
    return NadirBracket(t_min=t_min, t_max=t_max, swapped=swapped)
