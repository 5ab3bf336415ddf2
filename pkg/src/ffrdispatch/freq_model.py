"""Closed-loop grid frequency dynamics and delayed-step response closed forms.

The aggregate grid (swing equation plus a droop-governed reheat turbine) is
reduced to a rational transfer function from net power injection to frequency
deviation, which is then decomposed into first-order pole/residue terms.
Delayed step injections (storage devices, switchable loads, and the
contingency itself) have closed-form time responses assembled from those
terms, so the full multi-delay frequency deviation and its time derivative
can be evaluated without integrating an ODE.

All power quantities are per-unit on the system base, times in seconds.
Frequency deviations are per-unit on nominal frequency; conversion to Hz
happens only at I/O boundaries.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import numpy.polynomial.polynomial as npp

from .errors import DomainError, UnsupportedStructureError

__all__ = [
    "SystemParams",
    "RationalTF",
    "PoleResidueSet",
    "SourceKind",
    "DelayedStepSource",
    "Portfolio",
    "PortfolioEvaluator",
    "aggregate_inertia",
    "build_governor_tf",
    "build_closed_loop",
    "partial_fractions",
    "augment_der_poles",
    "eval_f1",
    "eval_f2",
    "eval_fdot",
    "deviation_of_source",
    "rate_of_source",
    "total_deviation",
    "total_deviation_rate",
    "steady_state_deviation",
]

# Poles closer than this are treated as repeated and rejected.
MIN_POLE_SEPARATION = 1e-7
# |Im(pole)| below this (relative) threshold is root-finder dust, not a pair.
IMAG_CLASSIFY_TOL = 1e-9


@dataclass(frozen=True)
class SystemParams:
    """Aggregate grid constants.

    H      system inertia constant (s)
    D      load damping ratio (pu)
    K      droop characteristic (pu)
    T_g    governor time constant (s)
    T_c    turbine time constant (s)
    T_r    reheat time constant (s)
    F_h    reheat gain (dimensionless, in [0, 1])
    f_nom  nominal frequency (Hz); only used at I/O boundaries
    S_base base power (MW); only used at I/O boundaries
    """

    H: float
    D: float
    K: float
    T_g: float
    T_c: float
    T_r: float
    F_h: float
    f_nom: float = 50.0
    S_base: float = 1000.0

    def __post_init__(self):
        if not self.H > 0:
            raise DomainError(f"inertia constant must be positive, got {self.H}")
        if self.D < 0:
            raise DomainError(f"damping ratio must be nonnegative, got {self.D}")
        if not self.K > 0:
            raise DomainError(f"droop characteristic must be positive, got {self.K}")
        for name in ("T_g", "T_c", "T_r"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.F_h <= 1.0:
            raise DomainError(f"reheat gain must be in [0, 1], got {self.F_h}")
        if not self.f_nom > 0:
            raise DomainError(f"nominal frequency must be positive, got {self.f_nom}")
        if not self.S_base > 0:
            raise DomainError(f"base power must be positive, got {self.S_base}")

    def dc_gain(self) -> float:
        """Steady-state deviation per unit of sustained power imbalance."""
        return 1.0 / (self.D + 1.0 / self.K)


def aggregate_inertia(units: Sequence[tuple[float, float]], S_sym: float) -> float:
    """Capacity-weighted inertia of a set of (rating MVA, inertia s) units."""
    if not units:
        raise DomainError("cannot aggregate inertia of an empty unit list")
    if not S_sym > 0:
        raise DomainError(f"system rating must be positive, got {S_sym}")
    total = 0.0
    for rating, inertia in units:
        if not rating > 0 or not inertia > 0:
            raise DomainError(
                f"unit ratings and inertias must be positive, got ({rating}, {inertia})"
            )
        total += rating * inertia
    return total / S_sym


def _trim_trailing_zeros(coeffs: tuple[float, ...]) -> tuple[float, ...]:
    end = len(coeffs)
    while end > 1 and coeffs[end - 1] == 0.0:
        end -= 1
    return coeffs[:end]


@dataclass(frozen=True)
class RationalTF:
    """Strictly proper rational transfer function, ascending coefficients."""

    num: tuple[float, ...]
    den: tuple[float, ...]

    def __post_init__(self):
        num = _trim_trailing_zeros(tuple(float(c) for c in self.num))
        den = _trim_trailing_zeros(tuple(float(c) for c in self.den))
        if not all(math.isfinite(c) for c in num + den):
            raise DomainError("transfer function coefficients must be finite")
        if den[-1] == 0.0:
            raise DomainError("denominator leading coefficient must be nonzero")
        if len(num) >= len(den):
            raise DomainError(
                f"transfer function must be strictly proper, got degrees "
                f"{len(num) - 1}/{len(den) - 1}"
            )
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @cached_property
    def num_arr(self) -> np.ndarray:
        return np.asarray(self.num, dtype=float)

    @cached_property
    def den_arr(self) -> np.ndarray:
        return np.asarray(self.den, dtype=float)

    def __call__(self, s):
        """Evaluate the transfer function at scalar or array s (complex ok)."""
        return npp.polyval(s, self.num_arr) / npp.polyval(s, self.den_arr)


def build_governor_tf(T_g: float, T_c: float, T_r: float, F_h: float) -> RationalTF:
    """Reheat turbine/governor path: (F_h*T_r*s + 1) over the three lags."""
    for name, value in (("T_g", T_g), ("T_c", T_c), ("T_r", T_r)):
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")
    if not 0.0 <= F_h <= 1.0:
        raise DomainError(f"reheat gain must be in [0, 1], got {F_h}")
    num = np.array([1.0, F_h * T_r])
    den = npp.polymul(npp.polymul([1.0, T_r], [1.0, T_g]), [1.0, T_c])
    return RationalTF(tuple(num), tuple(den))


def build_closed_loop(params: SystemParams, droop: bool = True) -> RationalTF:
    """Frequency deviation per unit net power injection.

    The swing path 1/(2Hs + D) closed through the governor/droop feedback,
    cleared to a single strictly proper rational. With ``droop=False`` the
    feedback is removed and the bare swing path is returned.
    """
    two_h = 2.0 * params.H
    if not droop:
        return RationalTF((1.0,), (params.D, two_h))
    gov = build_governor_tf(params.T_g, params.T_c, params.T_r, params.F_h)
    if abs(params.D + 1.0 / params.K) < 1e-15:
        raise DomainError("closed loop degenerates: D + 1/K vanishes")
    num = gov.den_arr
    den = npp.polyadd(
        npp.polymul([params.D, two_h], gov.den_arr), gov.num_arr / params.K
    )
    return RationalTF(tuple(num), tuple(den))


@dataclass(frozen=True)
class PoleResidueSet:
    """First-order decomposition Sum alpha/(s + p) of a strictly proper TF.

    Real terms are (alpha, p) pairs. Complex terms store one member of each
    conjugate pair as (a, b, c, d) = (Re alpha, Im alpha, Re p, Im p) with
    d > 0; the stored term represents alpha/(s+p) + conj(alpha)/(s+conj(p)).
    Stable dynamics have p (resp. c) positive.
    """

    real_terms: tuple[tuple[float, float], ...]
    complex_terms: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self):
        for _, _, _, d in self.complex_terms:
            if not d > 0:
                raise DomainError("complex terms must store the member with Im(p) > 0")

    @cached_property
    def real_alpha(self) -> np.ndarray:
        return np.array([t[0] for t in self.real_terms], dtype=float)

    @cached_property
    def real_p(self) -> np.ndarray:
        return np.array([t[1] for t in self.real_terms], dtype=float)

    @cached_property
    def pair_alpha(self) -> np.ndarray:
        return np.array([complex(a, b) for a, b, _, _ in self.complex_terms])

    @cached_property
    def pair_p(self) -> np.ndarray:
        return np.array([complex(c, d) for _, _, c, d in self.complex_terms])

    @property
    def n_real(self) -> int:
        return len(self.real_terms)

    @property
    def n_complex(self) -> int:
        return len(self.complex_terms)

    def is_stable(self) -> bool:
        return bool(np.all(self.real_p > 0)) and all(
            c > 0 for _, _, c, _ in self.complex_terms
        )

    def evaluate(self, s):
        """Reconstruct the transfer function value at scalar or array s."""
        s = np.asarray(s, dtype=complex)
        out = np.zeros_like(s)
        if self.n_real:
            out = out + (
                self.real_alpha / (s[..., None] + self.real_p)
            ).sum(axis=-1)
        if self.n_complex:
            alpha = self.pair_alpha
            p = self.pair_p
            out = out + (
                alpha / (s[..., None] + p) + alpha.conj() / (s[..., None] + p.conj())
            ).sum(axis=-1)
        return out

    def dc_value(self) -> float:
        """Value at s = 0, i.e. Sum alpha/p over all terms."""
        total = float((self.real_alpha / self.real_p).sum()) if self.n_real else 0.0
        if self.n_complex:
            total += float(2.0 * (self.pair_alpha / self.pair_p).real.sum())
        return total

    def to_lines(self) -> list[str]:
        """Serialize one term per line, full float precision."""
        lines = [f"real,{a!r},{p!r}" for a, p in self.real_terms]
        lines += [f"complex,{a!r},{b!r},{c!r},{d!r}" for a, b, c, d in self.complex_terms]
        return lines

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "PoleResidueSet":
        real, cplx = [], []
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if parts[0] == "real" and len(parts) == 3:
                real.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "complex" and len(parts) == 5:
                cplx.append(tuple(float(x) for x in parts[1:]))
            else:
                raise DomainError(f"unrecognized pole/residue line: {line!r}")
        return cls(tuple(real), tuple(cplx))


def _check_stability(prs: PoleResidueSet, require_stable: bool) -> PoleResidueSet:
    if require_stable and not prs.is_stable():
        raise DomainError(
            "decomposition contains non-decaying poles; pass require_stable=False "
            "to keep it anyway"
        )
    return prs


def partial_fractions(
    tf: RationalTF,
    *,
    require_stable: bool = True,
    min_separation: float = MIN_POLE_SEPARATION,
) -> PoleResidueSet:
    """Decompose a strictly proper rational TF with distinct poles.

    Roots come from the companion-matrix eigenvalues with one Newton polish;
    residues are num(s_i)/den'(s_i). Near-repeated poles are rejected rather
    than silently handled.
    """
    den = tf.den_arr
    num = tf.num_arr
    roots = np.atleast_1d(npp.polyroots(den)).astype(complex)
    dden = npp.polyder(den)
    dvals = npp.polyval(roots, dden)
    safe = np.abs(dvals) > 0
    polished = roots.copy()
    polished[safe] = roots[safe] - npp.polyval(roots[safe], den) / dvals[safe]
    roots = polished
    if len(roots) > 1:
        dist = np.abs(roots[:, None] - roots[None, :])
        np.fill_diagonal(dist, np.inf)
        if dist.min() < min_separation:
            raise UnsupportedStructureError(
                f"poles closer than {min_separation} (min distance {dist.min():.3e}); "
                "repeated-pole structures are unsupported"
            )
    alphas = npp.polyval(roots, num) / npp.polyval(roots, npp.polyder(den))
    poles = -roots

    real_terms: list[tuple[float, float]] = []
    complex_idx: list[int] = []
    for i, p in enumerate(poles):
        if abs(p.imag) <= IMAG_CLASSIFY_TOL * (1.0 + abs(p.real)):
            real_terms.append((float(alphas[i].real), float(p.real)))
        else:
            complex_idx.append(i)

    complex_terms: list[tuple[float, float, float, float]] = []
    remaining = set(complex_idx)
    for i in complex_idx:
        if i not in remaining:
            continue
        p = poles[i]
        if p.imag < 0:
            continue
        partner = min(
            (j for j in remaining if j != i and poles[j].imag < 0),
            key=lambda j: abs(poles[j] - p.conjugate()),
            default=None,
        )
        if partner is None:
            raise UnsupportedStructureError(
                f"complex pole {p} has no conjugate partner"
            )
        remaining.discard(i)
        remaining.discard(partner)
        alpha = alphas[i]
        complex_terms.append((alpha.real, alpha.imag, p.real, p.imag))
    if any(poles[j].imag > 0 for j in remaining):
        raise UnsupportedStructureError("unpaired complex poles remain")

    real_terms.sort(key=lambda t: t[1])
    complex_terms.sort(key=lambda t: (t[2], t[3]))
    return _check_stability(
        PoleResidueSet(tuple(real_terms), tuple(complex_terms)), require_stable
    )


_AUGMENT_CACHE: dict[tuple, PoleResidueSet] = {}
_AUGMENT_LOCK = threading.Lock()


def augment_der_poles(
    tf: RationalTF, T_d: float, *, require_stable: bool = True
) -> PoleResidueSet:
    """Decompose tf(s)/(s*T_d + 1), the TF seen through a first-order lag.

    T_d = 0 reduces to the plain decomposition. Results are cached on the
    exact (tf, T_d) key since fleets share a handful of lag constants.
    """
    if T_d < 0:
        raise DomainError(f"lag constant must be nonnegative, got {T_d}")
    key = (tf.num, tf.den, float(T_d), require_stable)
    with _AUGMENT_LOCK:
        hit = _AUGMENT_CACHE.get(key)
    if hit is not None:
        return hit
    if T_d == 0.0:
        result = partial_fractions(tf, require_stable=require_stable)
    else:
        den = npp.polymul(tf.den_arr, [1.0, T_d])
        result = partial_fractions(
            RationalTF(tf.num, tuple(den)), require_stable=require_stable
        )
    with _AUGMENT_LOCK:
        _AUGMENT_CACHE[key] = result
    return result


def _as_time_array(t) -> tuple[np.ndarray, bool]:
    arr = np.asarray(t, dtype=float)
    scalar = arr.ndim == 0
    return np.atleast_1d(arr), scalar


def eval_f1(t, prs: PoleResidueSet):
    """Oscillatory cosine-channel component of the unit step response."""
    tt, scalar = _as_time_array(t)
    out = np.zeros_like(tt)
    if prs.n_complex:
        a = np.array([x[0] for x in prs.complex_terms])
        c = np.array([x[2] for x in prs.complex_terms])
        d = np.array([x[3] for x in prs.complex_terms])
        mag2 = c * c + d * d
        if np.any(mag2 == 0.0):
            raise DomainError("pole at the origin is unsupported")
        e = np.exp(-c[:, None] * tt[None, :])
        brack = (
            -e * c[:, None] * np.cos(d[:, None] * tt[None, :])
            + c[:, None]
            + e * d[:, None] * np.sin(d[:, None] * tt[None, :])
        )
        out = (2.0 * a / mag2) @ brack
    return float(out[0]) if scalar else out


def eval_f2(t, prs: PoleResidueSet):
    """Oscillatory sine-channel component of the unit step response."""
    tt, scalar = _as_time_array(t)
    out = np.zeros_like(tt)
    if prs.n_complex:
        b = np.array([x[1] for x in prs.complex_terms])
        c = np.array([x[2] for x in prs.complex_terms])
        d = np.array([x[3] for x in prs.complex_terms])
        mag2 = c * c + d * d
        if np.any(mag2 == 0.0):
            raise DomainError("pole at the origin is unsupported")
        e = np.exp(-c[:, None] * tt[None, :])
        brack = (
            -e * c[:, None] * np.sin(d[:, None] * tt[None, :])
            + d[:, None]
            - e * d[:, None] * np.cos(d[:, None] * tt[None, :])
        )
        out = (2.0 * b / mag2) @ brack
    return float(out[0]) if scalar else out


def eval_fdot(t, prs: PoleResidueSet):
    """Time derivative of the oscillatory components, d(f1 + f2)/dt."""
    tt, scalar = _as_time_array(t)
    out = np.zeros_like(tt)
    if prs.n_complex:
        a = np.array([x[0] for x in prs.complex_terms])
        b = np.array([x[1] for x in prs.complex_terms])
        c = np.array([x[2] for x in prs.complex_terms])
        d = np.array([x[3] for x in prs.complex_terms])
        e = np.exp(-c[:, None] * tt[None, :])
        out = 2.0 * (
            b @ (e * np.sin(d[:, None] * tt[None, :]))
            + a @ (e * np.cos(d[:, None] * tt[None, :]))
        )
    return float(out[0]) if scalar else out


class SourceKind(enum.Enum):
    DER = "der"
    CL = "cl"
    LOSS = "loss"


@dataclass(frozen=True)
class DelayedStepSource:
    """A delayed step power injection, optionally through a first-order lag.

    magnitude  reserve or loss size (pu)
    delay      activation latency (s); zero for the loss
    dynamics   lag constant T_d (s); only storage devices have one
    """

    kind: SourceKind
    magnitude: float
    delay: float
    dynamics: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise DomainError(f"magnitude must be nonnegative, got {self.magnitude}")
        if self.delay < 0:
            raise DomainError(f"delay must be nonnegative, got {self.delay}")
        if self.dynamics < 0:
            raise DomainError(f"lag constant must be nonnegative, got {self.dynamics}")
        if self.kind is not SourceKind.DER and self.dynamics != 0.0:
            raise DomainError("only storage devices carry a lag constant")
        if self.kind is SourceKind.LOSS and self.delay != 0.0:
            raise DomainError("the contingency step occurs at t = 0")


def deviation_of_source(t, src: DelayedStepSource, prs: PoleResidueSet):
    """Raw frequency deviation contribution of one delayed step source.

    The caller supplies the lag-augmented pole set for storage devices and
    applies the minus sign for the loss term. Vectorized over t.
    """
    tt, scalar = _as_time_array(t)
    shifted = tt - src.delay
    active = shifted >= 0.0
    dt = np.where(active, shifted, 0.0)
    out = np.zeros_like(tt)
    if prs.n_real:
        alpha = prs.real_alpha
        p = prs.real_p
        out += ((alpha / p)[:, None] * (1.0 - np.exp(-p[:, None] * dt[None, :]))).sum(
            axis=0
        )
    out += eval_f1(dt, prs) + eval_f2(dt, prs)
    result = src.magnitude * out * active
    return float(result[0]) if scalar else result


def rate_of_source(t, src: DelayedStepSource, prs: PoleResidueSet):
    """Raw time-derivative contribution of one delayed step source."""
    tt, scalar = _as_time_array(t)
    shifted = tt - src.delay
    active = shifted >= 0.0
    dt = np.where(active, shifted, 0.0)
    out = np.zeros_like(tt)
    if prs.n_real:
        alpha = prs.real_alpha
        p = prs.real_p
        out += (alpha[:, None] * np.exp(-p[:, None] * dt[None, :])).sum(axis=0)
    out += eval_fdot(dt, prs)
    result = src.magnitude * out * active
    return float(result[0]) if scalar else result


@dataclass
class Portfolio:
    """A contingency plus the set of activated reserve sources."""

    sources: tuple[DelayedStepSource, ...]
    loss: DelayedStepSource
    params: SystemParams
    _ev: "PortfolioEvaluator | None" = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if self.loss.kind is not SourceKind.LOSS:
            raise DomainError("portfolio loss entry must have kind LOSS")
        if any(s.kind is SourceKind.LOSS for s in self.sources):
            raise DomainError("reserve sources may not contain a LOSS entry")

    @property
    def total_reserve(self) -> float:
        return math.fsum(s.magnitude for s in self.sources)

    def closed_loop(self) -> RationalTF:
        return build_closed_loop(self.params)

    def pole_set(self) -> PoleResidueSet:
        return augment_der_poles(self.closed_loop(), 0.0)

    def der_pole_set(self, T_d: float) -> PoleResidueSet:
        return augment_der_poles(self.closed_loop(), T_d)

    def evaluator(self) -> "PortfolioEvaluator":
        with _EVALUATOR_LOCK:
            if self._ev is None:
                self._ev = PortfolioEvaluator.from_portfolio(self)
            return self._ev


_EVALUATOR_LOCK = threading.Lock()


class _SourceGroup:
    """Sources sharing one pole set, sorted by delay, with prefix sums.

    For a group with terms (alpha_i, p_i, weight w_i) and active sources
    (R_j, tau_j <= t), the group deviation and rate at time t are

        dev(t)  = Sum_i w_i Re{ (alpha_i/p_i) (S0(t) - e^{-p_i t} S1_i(t)) }
        rate(t) = Sum_i w_i Re{ alpha_i e^{-p_i t} S1_i(t) }

    with prefix sums S0(t) = Sum R_j and S1_i(t) = Sum R_j e^{p_i tau_j}.
    Appends must come in nondecreasing tau order.
    """

    __slots__ = ("prs", "p", "alpha_over_p", "alpha", "w", "taus", "s0", "s1", "n")

    def __init__(self, prs: PoleResidueSet):
        self.prs = prs
        p = np.concatenate([prs.real_p.astype(complex), prs.pair_p])
        alpha = np.concatenate([prs.real_alpha.astype(complex), prs.pair_alpha])
        w = np.concatenate([np.ones(prs.n_real), 2.0 * np.ones(prs.n_complex)])
        if np.any(np.abs(p) == 0.0):
            raise DomainError("pole at the origin is unsupported")
        self.p = p
        self.alpha = alpha
        self.alpha_over_p = alpha / p
        self.w = w
        self.taus = np.empty(16, dtype=float)
        self.s0 = np.zeros(17, dtype=float)
        self.s1 = np.zeros((len(p), 17), dtype=complex)
        self.n = 0

    def _grow(self, extra: int):
        need = self.n + extra
        cap = len(self.taus)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        self.taus = np.concatenate([self.taus, np.empty(cap - len(self.taus))])
        pad0 = np.zeros(cap + 1 - self.s0.shape[0])
        self.s0 = np.concatenate([self.s0, pad0])
        pad1 = np.zeros((self.s1.shape[0], cap + 1 - self.s1.shape[1]), dtype=complex)
        self.s1 = np.concatenate([self.s1, pad1], axis=1)

    def append(self, magnitude: float, tau: float):
        if self.n and tau < self.taus[self.n - 1] - 1e-15:
            raise DomainError("group appends must be in nondecreasing delay order")
        self._grow(1)
        k = self.n
        self.taus[k] = tau
        self.s0[k + 1] = self.s0[k] + magnitude
        self.s1[:, k + 1] = self.s1[:, k] + magnitude * np.exp(self.p * tau)
        self.n = k + 1

    def bulk_append(self, magnitudes: np.ndarray, taus: np.ndarray):
        if len(magnitudes) == 0:
            return
        order = np.argsort(taus, kind="stable")
        taus = taus[order]
        magnitudes = magnitudes[order]
        if self.n and taus[0] < self.taus[self.n - 1] - 1e-15:
            raise DomainError("group appends must be in nondecreasing delay order")
        m = len(taus)
        self._grow(m)
        k = self.n
        self.taus[k : k + m] = taus
        self.s0[k + 1 : k + m + 1] = self.s0[k] + np.cumsum(magnitudes)
        contrib = magnitudes[None, :] * np.exp(self.p[:, None] * taus[None, :])
        self.s1[:, k + 1 : k + m + 1] = self.s1[:, k : k + 1] + np.cumsum(
            contrib, axis=1
        )
        self.n = k + m

    def replace_last(self, magnitude: float):
        if self.n == 0:
            raise DomainError("group is empty")
        k = self.n - 1
        tau = self.taus[k]
        self.s0[k + 1] = self.s0[k] + magnitude
        self.s1[:, k + 1] = self.s1[:, k] + magnitude * np.exp(self.p * tau)

    def _prefix_index(self, t: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.taus[: self.n], t, side="right")

    def deviation(self, t: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(t)
        idx = self._prefix_index(t)
        s0 = self.s0[idx]
        s1 = self.s1[:, idx]
        decay = np.exp(-self.p[:, None] * t[None, :])
        terms = self.alpha_over_p[:, None] * (s0[None, :] - decay * s1)
        return (self.w[:, None] * terms.real).sum(axis=0)

    def rate(self, t: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(t)
        idx = self._prefix_index(t)
        s1 = self.s1[:, idx]
        decay = np.exp(-self.p[:, None] * t[None, :])
        terms = self.alpha[:, None] * decay * s1
        return (self.w[:, None] * terms.real).sum(axis=0)

    def active_taus(self) -> np.ndarray:
        return self.taus[: self.n]


class PortfolioEvaluator:
    """Fast deviation/rate evaluation for a growing set of delayed steps.

    Sources are grouped by lag constant so pole decompositions are shared;
    the loss enters the zero-lag group with negative magnitude. Appends
    within a group must be in nondecreasing delay order (satisfied when
    devices are added in ascending effective latency).
    """

    def __init__(self, params: SystemParams):
        self.params = params
        self._tf = build_closed_loop(params)
        self._groups: dict[float, _SourceGroup] = {}
        self._last_group: _SourceGroup | None = None

    def _group(self, T_d: float) -> _SourceGroup:
        key = float(T_d)
        grp = self._groups.get(key)
        if grp is None:
            grp = _SourceGroup(augment_der_poles(self._tf, key))
            self._groups[key] = grp
        return grp

    def add_loss(self, dP_L: float):
        grp = self._group(0.0)
        if grp.n:
            raise DomainError("the loss must be added before any zero-lag source")
        grp.append(-dP_L, 0.0)
        self._last_group = None

    def add_source(self, magnitude: float, delay: float, T_d: float = 0.0):
        grp = self._group(T_d)
        grp.append(magnitude, delay)
        self._last_group = grp

    def bulk_add(self, magnitudes, delays, T_ds):
        """Add many sources at once; groups are built with vectorized sums."""
        magnitudes = np.asarray(magnitudes, dtype=float)
        delays = np.asarray(delays, dtype=float)
        T_ds = np.asarray(T_ds, dtype=float)
        for key in np.unique(T_ds):
            mask = T_ds == key
            self._group(float(key)).bulk_append(magnitudes[mask], delays[mask])
        self._last_group = None

    def replace_last_magnitude(self, magnitude: float):
        """Rewrite the magnitude of the most recently added source."""
        if self._last_group is None:
            raise DomainError("no single-source append to replace")
        self._last_group.replace_last(magnitude)

    def deviation(self, t) -> np.ndarray:
        tt, scalar = _as_time_array(t)
        out = np.zeros_like(tt)
        for grp in self._groups.values():
            out += grp.deviation(tt)
        return float(out[0]) if scalar else out

    def rate(self, t) -> np.ndarray:
        tt, scalar = _as_time_array(t)
        out = np.zeros_like(tt)
        for grp in self._groups.values():
            out += grp.rate(tt)
        return float(out[0]) if scalar else out

    def kink_times(self) -> np.ndarray:
        """Distinct activation instants (derivative discontinuity candidates)."""
        parts = [g.active_taus() for g in self._groups.values() if g.n]
        if not parts:
            return np.empty(0)
        return np.unique(np.concatenate(parts))

    @classmethod
    def from_portfolio(cls, pf: Portfolio) -> "PortfolioEvaluator":
        ev = cls(pf.params)
        ev.add_loss(pf.loss.magnitude)
        if pf.sources:
            mags = np.array([s.magnitude for s in pf.sources])
            delays = np.array([s.delay for s in pf.sources])
            tds = np.array(
                [s.dynamics if s.kind is SourceKind.DER else 0.0 for s in pf.sources]
            )
            ev.bulk_add(mags, delays, tds)
        return ev


def total_deviation(t, pf: Portfolio):
    """Frequency deviation of the full portfolio: reserves minus the loss."""
    return pf.evaluator().deviation(t)


def total_deviation_rate(t, pf: Portfolio):
    """Time derivative of the portfolio frequency deviation."""
    return pf.evaluator().rate(t)


def steady_state_deviation(pf: Portfolio) -> float:
    """Final-value deviation: (sum of reserves - loss) times the DC gain."""
    imbalance = math.fsum(
        [s.magnitude for s in pf.sources] + [-pf.loss.magnitude]
    )
    return imbalance * pf.params.dc_gain()
