"""KAM iteration: schedule, Lie transform, one normal-form step and the driver loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from .homological import (
    ResonanceError,
    SolutionF,
    extract_truncation,
    residual_check,
    solve_homological,
)
from .model import NormalForm
from .series import (
    DomainParams,
    HamiltonianSeries,
    PhasePoint,
    concat,
    hamiltonian_vector_field,
    is_zero_momentum,
    poisson_bracket,
    prune_budget,
    vector_field_norm,
)

RESIDUAL_TOL = 1e-9


class ScheduleError(ValueError):
    """Perturbation too large for the schedule to be defined."""


class DivergenceError(ArithmeticError):
    """Lie series terms stopped shrinking."""


class ResidualError(ArithmeticError):
    """Homological equation not solved to tolerance."""


class ContractionError(ArithmeticError):
    """A step failed to reduce the perturbation."""


@dataclass
class StepRecord:
    nu: int
    eps: float
    eps_next: float
    bound: float
    K: int
    r: float
    s: float
    rho: float
    residual: float
    drift: float
    min_divisor: float
    lie_order: int
    terms: int
    seconds: float


@dataclass
class KamState:
    """Normal form, perturbation and domain at step ``nu``.

    ``r0`` and ``rho0`` are the initial widths the schedule shrinks from;
    ``flows`` collects the generating functions used so far (oldest first).
    """

    nf: NormalForm
    P: HamiltonianSeries
    dp: DomainParams
    K: int
    nu: int = 0
    gamma: float = 0.05
    tau: float = 12.0
    c: float = 1.0
    r0: float | None = None
    rho0: float | None = None
    eps: float | None = None
    history: list = field(default_factory=list)
    flows: list = field(default_factory=list)

    def __post_init__(self):
        if self.r0 is None:
            self.r0 = self.dp.r
        if self.rho0 is None:
            self.rho0 = self.dp.rho
        measured = vector_field_norm(self.P, self.dp)
        if self.eps is None:
            self.eps = measured
        elif not math.isclose(self.eps, measured, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError("cached eps does not match the perturbation norm")

    @property
    def sites(self):
        return self.P.sites

    def hamiltonian(self) -> HamiltonianSeries:
        return self.nf.to_series(self.sites) + self.P


def initial_K(eps: float, c: float = 1.0) -> int:
    return max(1, math.ceil(c * math.log(1.0 / eps))) if 0 < eps < 1 else 1


@dataclass(frozen=True)
class Schedule:
    r: float
    s: float
    rho: float
    K: int
    eps_bound: float


def _shrink(nu: int) -> float:
    return 1.0 - sum(2.0 ** -i for i in range(2, nu + 3))


def schedule_next(state: KamState) -> Schedule:
    """Domain, truncation order and perturbation bound for step ``nu + 1``.

    The bound c gamma^-16 K^(16 tau + 16) eps^(4/3) is evaluated in log space;
    when it is not below one the truncation order uses the current eps.
    """
    nu, eps = state.nu, state.eps
    if nu < 0:
        raise ValueError("step index must be nonnegative")
    if not eps < 1:
        raise ScheduleError(f"eps = {eps:.3e} >= 1: perturbation not small")
    frac = _shrink(nu)
    r_next, rho_next = state.r0 * frac, state.rho0 * frac
    rho_now = state.rho0 * _shrink(nu - 1)
    if eps == 0:
        return Schedule(r_next, state.dp.s, rho_next, state.K, 0.0)
    log_bound = (math.log(state.c) - 16 * math.log(state.gamma)
                 + (16 * state.tau + 16) * math.log(max(state.K, 1)) + 4.0 / 3.0 * math.log(eps))
    eps_bound = math.exp(log_bound) if log_bound < 700 else math.inf
    s_next = eps ** (1.0 / 3.0) * state.dp.s / 4.0
    ln_inv = -log_bound if log_bound < 0 else -math.log(eps)
    K_next = max(state.K, math.ceil(state.c * ln_inv / (rho_now - rho_next)))
    return Schedule(r_next, s_next, rho_next, K_next, eps_bound)


def lie_transform(H: HamiltonianSeries, F: HamiltonianSeries, order_cap: int = 8,
                  degree_cap: int | None = 4, dp: DomainParams | None = None,
                  target: float = 0.0, prune: float = 0.0):
    """H o X_F^1 as the series sum_j ad_F^j(H) / j! with ad_F(H) = {H, F}.

    Summation stops once a term's vector-field norm at ``dp`` is below
    ``1e-3 * target`` or after ``order_cap`` brackets.  Terms whose summed
    contribution stays within ``prune`` are dropped from each bracket.
    """
    corr, _ = _lie_corrections(H, None, F, order_cap, degree_cap, dp, target, prune)
    return concat(H.sites, [H, corr])


def _lie_corrections(P, Q, F, order_cap, degree_cap, dp, target, prune):
    """sum_{j>=1} ad^j(P)/j! + ad^j(Q)/(j+1)!, with the number of brackets taken."""
    sites = P.sites
    parts = []
    p_j, q_j = P, Q
    norms = []
    order = 0
    for j in range(1, order_cap + 1):
        if len(F) == 0:
            break
        p_j = poisson_bracket(p_j, F, degree_cap) / j if len(p_j) else p_j
        term = p_j
        if q_j is not None and len(q_j):
            q_j = poisson_bracket(q_j, F, degree_cap) / (j + 1)
            term = concat(sites, [p_j, q_j])
        if dp is not None and prune > 0:
            term = prune_budget(term, dp, prune)
            p_j = prune_budget(p_j, dp, prune)
            if q_j is not None:
                q_j = prune_budget(q_j, dp, prune)
        parts.append(term)
        order = j
        if dp is None:
            continue
        nj = vector_field_norm(term, dp)
        norms.append(nj)
        if nj < 1e-3 * target or nj == 0:
            break
        if len(norms) >= 4 and all(norms[-i] > norms[-i - 1] / 2 for i in range(1, 4)):
            raise DivergenceError(f"Lie series terms not contracting: {norms}")
    return concat(sites, parts), order


def kam_step(state: KamState, order_cap: int = 8, degree_cap: int = 4,
             prune_beta: float = 1e-4) -> tuple[KamState, SolutionF]:
    """One Newton step: truncate, solve, verify the residual, transform and update.

    Raises
    ------
    ResonanceError, DivergenceError, ResidualError
    """
    t0 = time.perf_counter()
    sites = state.sites
    sched = schedule_next(state)
    dp_next = DomainParams(sched.r, sched.s, sched.rho)
    if len(state.P) == 0:
        nxt = replace(state, dp=dp_next, K=sched.K, nu=state.nu + 1, eps=None,
                      history=list(state.history), flows=list(state.flows))
        empty = HamiltonianSeries(sites)
        return nxt, SolutionF(empty, empty, empty)
    R = extract_truncation(state.P, state.K)
    sol, upd = solve_homological(R, state.nf, state.gamma, state.tau, state.K)
    F = sol.total()
    Rtot = R.total()
    hat = upd.to_series(sites)
    res = residual_check(state.nf, F, Rtot, hat, state.dp)
    r_norm = vector_field_norm(Rtot, state.dp)
    rel = res / r_norm if r_norm > 0 else res
    if rel > RESIDUAL_TOL:
        raise ResidualError(f"homological residual {rel:.3e} exceeds {RESIDUAL_TOL:.0e}")

    base = state.P - Rtot
    base_norm = vector_field_norm(base, dp_next)
    expected = state.eps ** (4.0 / 3.0)
    target = min(expected, base_norm) if base_norm > 0 else expected
    budget = prune_beta * target
    Q = hat - Rtot
    corr, order = _lie_corrections(state.P, Q, F, order_cap, degree_cap, dp_next, target, budget)
    P_next = prune_budget(concat(sites, [base, corr]), dp_next, budget)
    if not is_zero_momentum(P_next):
        raise AssertionError("new perturbation left the zero-momentum class")
    nf_next = upd.apply(state.nf)
    eps_next = vector_field_norm(P_next, dp_next)
    if eps_next > sched.eps_bound:
        raise ContractionError(f"step {state.nu}: eps {eps_next:.3e} above the schedule bound {sched.eps_bound:.3e}")
    drift = float(np.abs(nf_next.frequencies - state.nf.frequencies).max(initial=0.0))
    rec = StepRecord(
        nu=state.nu, eps=state.eps, eps_next=eps_next, bound=sched.eps_bound, K=state.K,
        r=state.dp.r, s=state.dp.s, rho=state.dp.rho, residual=rel, drift=drift,
        min_divisor=sol.min_divisor, lie_order=order, terms=len(P_next),
        seconds=time.perf_counter() - t0,
    )
    nxt = KamState(
        nf=nf_next, P=P_next, dp=dp_next, K=sched.K, nu=state.nu + 1, gamma=state.gamma,
        tau=state.tau, c=state.c, r0=state.r0, rho0=state.rho0, eps=eps_next,
        history=state.history + [rec], flows=state.flows + [F],
    )
    return nxt, sol


@dataclass
class ConvergenceReport:
    history: list
    omega_limit: np.ndarray
    drift_sum: float
    eps_sum: float
    converged: bool
    logs: list = field(default_factory=list)


def iterate(state: KamState, max_steps: int, target_eps: float, order_cap: int = 8,
            degree_cap: int = 4, prune_beta: float = 1e-4):
    """Run steps until eps <= target_eps or ``max_steps``; abort when eps fails to drop."""
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    logs = []
    while state.eps > target_eps and state.nu < max_steps:
        nxt, sol = kam_step(state, order_cap, degree_cap, prune_beta)
        logs.append(sol.divisor_log)
        if nxt.eps >= state.eps:
            raise ContractionError(
                f"step {state.nu}: eps {state.eps:.3e} -> {nxt.eps:.3e} did not contract"
            )
        state = nxt
    drift_sum = float(sum(r.drift for r in state.history))
    report = ConvergenceReport(
        history=state.history,
        omega_limit=state.nf.frequencies.copy(),
        drift_sum=drift_sum,
        eps_sum=float(sum(r.eps for r in state.history)),
        converged=state.eps <= target_eps,
        logs=logs,
    )
    return state, report


def fitted_exponent(eps: list[float]) -> float:
    """Least-squares slope of log eps_{nu+1} against log eps_nu."""
    x = np.log(np.asarray(eps[:-1]))
    y = np.log(np.asarray(eps[1:]))
    if len(x) < 2:
        return float(y[0] / x[0]) if len(x) else float("nan")
    return float(np.polyfit(x, y, 1)[0])


# ---- flows --------------------------------------------------------------

def _pack(pt: PhasePoint) -> np.ndarray:
    z = np.concatenate([np.atleast_2d(pt.angles), np.atleast_2d(pt.actions),
                        pt.modes.reshape(np.atleast_2d(pt.angles).shape[0], -1)], axis=1)
    return np.concatenate([z.real, z.imag], axis=1).ravel()


def _unpack(y: np.ndarray, P: int, nb: int, W: int) -> PhasePoint:
    y = y.reshape(P, -1)
    half = y.shape[1] // 2
    z = y[:, :half] + 1j * y[:, half:]
    return PhasePoint(z[:, :nb], z[:, nb: 2 * nb], z[:, 2 * nb:].reshape(P, 4, W))


def flow(F: HamiltonianSeries, point: PhasePoint, t: float = 1.0, rtol: float = 1e-12,
         atol: float = 1e-15) -> PhasePoint:
    """Time-``t`` map of the Hamiltonian vector field of F, integrated numerically.

    Batched: ``point`` may carry a leading batch dimension and all points are
    advanced together.
    """
    sites = F.sites
    nb, W = F.nb, sites.size
    single = np.ndim(point.angles) == 1
    P = 1 if single else np.shape(point.angles)[0]
    if len(F) == 0 or t == 0:
        return point
    y0 = _pack(PhasePoint(np.atleast_2d(point.angles).astype(complex),
                          np.atleast_2d(point.actions).astype(complex),
                          np.asarray(point.modes, dtype=complex).reshape(P, 4, W)))

    def rhs(_, y):
        return _pack(hamiltonian_vector_field(F, _unpack(y, P, nb, W)))

    sol = solve_ivp(rhs, (0.0, t), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise ArithmeticError(f"flow integration failed: {sol.message}")
    out = _unpack(sol.y[:, -1], P, nb, W)
    if single:
        return PhasePoint(out.angles[0], out.actions[0], out.modes[0])
    return out


def pull_back(flows: list[HamiltonianSeries], point: PhasePoint, **kw) -> PhasePoint:
    """Phi_0 o Phi_1 o ... o Phi_{N-1} applied to a point in the final coordinates."""
    for F in reversed(flows):
        point = flow(F, point, 1.0, **kw)
    return point


def push_forward(flows: list[HamiltonianSeries], point: PhasePoint, **kw) -> PhasePoint:
    """Inverse of ``pull_back``: original coordinates to final coordinates."""
    for F in flows:
        point = flow(F, point, -1.0, **kw)
    return point


CONVERGENCE_COLUMNS = ("nu", "eps", "bound", "K", "r", "s", "rho", "residual", "drift", "min_divisor")


def convergence_rows(history: list[StepRecord]):
    return [(h.nu, h.eps, h.bound, h.K, h.r, h.s, h.rho, h.residual, h.drift, h.min_divisor)
            for h in history]


__all__ = [
    "ContractionError",
    "ConvergenceReport",
    "DivergenceError",
    "KamState",
    "ResidualError",
    "ResonanceError",
    "Schedule",
    "ScheduleError",
    "StepRecord",
    "fitted_exponent",
    "flow",
    "initial_K",
    "iterate",
    "kam_step",
    "lie_transform",
    "pull_back",
    "push_forward",
    "schedule_next",
]
