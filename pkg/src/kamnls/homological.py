"""Quadratic truncation R of the perturbation and the solution of the homological equation.

Conventions: with the bracket of ``series.poisson_bracket`` a monomial ``m``
satisfies ``{m, N} = i (delta + sum of normal frequencies with sign) m``.
For a class of monomials sharing (k, k~) and the same lattice sites, the
operator ``F -> {F, N + B}`` acts on the coefficient vector as
``i (delta I + X)`` with ``X = A_n`` for a holomorphic factor, ``-A_n^T``
for an antiholomorphic one and Kronecker sums for two factors.  We solve
``{F, N + B} = R - (N^ + B^)``, i.e. ``{N + B, F} + R = N^ + B^``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NormalForm, spectrum_divisor
from .series import (
    DomainParams,
    HamiltonianSeries,
    concat,
    poisson_bracket,
    vector_field_norm,
)


class ResonanceError(ArithmeticError):
    """A divisor fell below the admissible bound gamma / K^tau."""

    def __init__(self, cls: str, k, n=None, m=None, sign=None, value=0.0, bound=0.0):
        self.cls, self.k, self.n, self.m, self.sign = cls, tuple(k), n, m, sign
        self.value, self.bound = value, bound
        where = f"k={self.k}"
        if n is not None:
            where += f" n={n}"
        if m is not None:
            where += f" m={m}"
        if sign is not None:
            where += f" sign={sign}"
        super().__init__(f"resonant {cls} class at {where}: |divisor|={value:.3e} < {bound:.3e}")


@dataclass
class TruncationR:
    R0: HamiltonianSeries
    R1: HamiltonianSeries
    R2: HamiltonianSeries

    def total(self) -> HamiltonianSeries:
        return concat(self.R0.sites, [self.R0, self.R1, self.R2])


@dataclass
class DivisorRecord:
    cls: str
    k: tuple
    n: tuple | None
    m: tuple | None
    sign: str
    value: float
    bound: float


@dataclass
class SolutionF:
    F0: HamiltonianSeries
    F1: HamiltonianSeries
    F2: HamiltonianSeries
    divisor_log: list = field(default_factory=list)
    max_condition: float = 1.0

    def total(self) -> HamiltonianSeries:
        return concat(self.F0.sites, [self.F0, self.F1, self.F2])

    @property
    def min_divisor(self) -> float:
        return min((r.value for r in self.divisor_log), default=float("inf"))


@dataclass
class NormalFormUpdate:
    """The resonant part N^ + B^ removed from R and added to the normal form."""

    d_omega: np.ndarray
    d_Omega: np.ndarray
    d_Omega_t: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray
    d_energy: float = 0.0

    @classmethod
    def zeros(cls, nb: int, W: int) -> "NormalFormUpdate":
        return cls(np.zeros(nb), np.zeros(W), np.zeros(W), np.zeros(W, complex), np.zeros(W, complex))

    def apply(self, nf: NormalForm) -> NormalForm:
        out = nf.copy()
        b = len(nf.omega)
        out.omega = nf.omega + self.d_omega[:b]
        out.omega_t = nf.omega_t + self.d_omega[b:]
        out.Omega = nf.Omega + np.where(np.isnan(nf.Omega), 0.0, self.d_Omega)
        out.Omega_t = nf.Omega_t + np.where(np.isnan(nf.Omega_t), 0.0, self.d_Omega_t)
        out.a = nf.a + self.d_a
        out.b = nf.b + self.d_b
        out.energy = nf.energy + self.d_energy
        return out

    def to_series(self, sites) -> HamiltonianSeries:
        shell = NormalForm(self.d_omega[: sites.b], self.d_omega[sites.b:], sites,
                           np.where(sites.in_Z1, self.d_Omega, np.nan),
                           np.where(sites.in_Z2, self.d_Omega_t, np.nan), self.d_a, self.d_b)
        ser = shell.to_series(sites)
        if self.d_energy:
            ser = ser + HamiltonianSeries.constant(sites, self.d_energy)
        return ser

    def max_frequency_drift(self) -> float:
        return float(np.abs(self.d_omega).max(initial=0.0))


def bound(gamma: float, tau: float, K: int) -> float:
    return gamma / max(K, 1) ** tau


def extract_truncation(P: HamiltonianSeries, K: int) -> TruncationR:
    """Split the low-order part of P by normal-mode degree (0, 1, 2) with |k| + |k~| <= K."""
    if K < 0:
        raise ValueError("K must be nonnegative")
    low = P.k_order() <= K
    nd = P.normal_degree()
    lsum = P.act.sum(axis=1)
    return TruncationR(
        P.select(low & (nd == 0) & (lsum <= 1)),
        P.select(low & (nd == 1) & (lsum == 0)),
        P.select(low & (nd == 2) & (lsum == 0)),
    )


def split_resonant(R: TruncationR, nf: NormalForm):
    """Separate the diagonal resonant terms (k = k~ = 0) from the ones to solve.

    Returns the normal-form update and the remaining R0 and R2.  Only real
    parts enter the frequency corrections.
    """
    sites = R.R0.sites
    nb, W = R.R0.nb, sites.size
    upd = NormalFormUpdate.zeros(nb, W)
    R0, R2 = R.R0, R.R2
    k0 = R0.k_order() == 0
    if k0.any():
        lsum = R0.act.sum(axis=1)
        for i in np.flatnonzero(k0):
            c = R0.coef[i]
            if lsum[i] == 0:
                upd.d_energy += c.real
            else:
                upd.d_omega[int(np.argmax(R0.act[i]))] += c.real
        R0 = R0.select(~k0)
    if len(R2):
        f = R2.fac[:, :2].astype(np.int64)
        same = (R2.k_order() == 0) & (f[:, 0] % W == f[:, 1] % W) & ((f[:, 0] // W) % 2 != (f[:, 1] // W) % 2)
        for i in np.flatnonzero(same):
            k1, k2 = f[i] // W
            site = f[i, 0] % W
            c = R2.coef[i]
            pair = (int(k1), int(k2))
            if pair == (0, 1):
                upd.d_Omega[site] += c.real
            elif pair == (2, 3):
                upd.d_Omega_t[site] += c.real
            elif pair == (0, 3):
                upd.d_a[site] += c
            elif pair == (1, 2):
                upd.d_b[site] += c
        R2 = R2.select(~same)
    return upd, R0, R2


def solve_f0(R0: HamiltonianSeries, nf: NormalForm, gamma: float, tau: float, K: int):
    """F coefficient = R coefficient / (i delta) for every k != 0 term."""
    log = []
    if len(R0) == 0:
        return HamiltonianSeries(R0.sites), log
    if np.any(R0.k_order() == 0):
        raise ValueError("k = 0 terms of R0 belong to the normal-form update")
    bnd = bound(gamma, tau, K)
    freq = nf.frequencies
    delta = R0.ang.astype(float) @ freq
    div = spectrum_divisor(delta, np.zeros(1))  # 1x1 zero block: |delta|, same code path as the block classes
    for i in range(len(R0)):
        k = tuple(int(x) for x in R0.ang[i])
        if div[i] < bnd:
            raise ResonanceError("R0", k, value=float(div[i]), bound=bnd)
        log.append(DivisorRecord("R0", k, None, None, "", float(div[i]), bnd))
    return R0.with_coef(R0.coef / (1j * delta)), log


def _slot_info(f: np.ndarray, W: int):
    kind = f // W
    return f % W, (kind % 2).astype(np.int64)  # site, anti flag


def _class_solve(nf, sites, slots, delta, terms, gamma_bound, cls_name, sign):
    """Solve one class; ``slots`` are (site, anti) pairs, ``terms`` (sorted codes, coef) pairs."""
    W = sites.size
    ops, eigs, bases = [], [], []
    for site, anti in slots:
        kinds, A, eig = nf.site_block(site)
        if anti:
            ops.append(-A.T)
            eigs.append(-eig)
            bases.append([(kd + 1) * W + site for kd in kinds])
        else:
            ops.append(A)
            eigs.append(eig)
            bases.append([kd * W + site for kd in kinds])
    if len(slots) == 1:
        X, spec = ops[0], eigs[0]
        comps = [(c,) for c in bases[0]]
    else:
        I1, I2 = np.eye(len(ops[0])), np.eye(len(ops[1]))
        X = np.kron(ops[0], I2) + np.kron(I1, ops[1])
        spec = (eigs[0][:, None] + eigs[1][None, :]).ravel()
        comps = [tuple(sorted((c1, c2))) for c1 in bases[0] for c2 in bases[1]]
    D = len(comps)
    # distribute each monomial coefficient over the tensor components it equals
    where: dict[tuple, list[int]] = {}
    for idx, cm in enumerate(comps):
        where.setdefault(cm, []).append(idx)
    Y = np.zeros(D, dtype=complex)
    for codes, c in terms:
        idxs = where[codes]
        for idx in idxs:
            Y[idx] += c / len(idxs)
    div = float(spectrum_divisor(delta, spec))
    n = tuple(sites.site(slots[0][0]))
    m = tuple(sites.site(slots[1][0])) if len(slots) > 1 else None
    if div < gamma_bound:
        raise ResonanceError(cls_name, (), n, m, sign, div, gamma_bound)
    Mx = delta * np.eye(D) + X
    sol = np.linalg.solve(Mx, Y / 1j)
    cond = float(np.linalg.cond(Mx)) if D > 1 else 1.0
    out = {}
    for cm, idxs in where.items():
        out[cm] = sol[idxs].sum()
    return out, div, n, m, cond


def _solve_classes(Rk: HamiltonianSeries, nf: NormalForm, gamma: float, tau: float, K: int,
                   nslots: int, cls_prefix: str):
    sites = Rk.sites
    log: list[DivisorRecord] = []
    if len(Rk) == 0:
        return HamiltonianSeries(sites), log, 1.0
    W, nb = sites.size, Rk.nb
    bnd = bound(gamma, tau, K)
    fac = Rk.fac[:, :nslots].astype(np.int64)
    site, anti = _slot_info(fac, W)
    # slot order inside a class: holomorphic first, then by site
    order_key = anti * W + site
    perm = np.argsort(order_key, axis=1, kind="stable")
    site = np.take_along_axis(site, perm, 1)
    anti = np.take_along_axis(anti, perm, 1)
    key = np.hstack([Rk.ang.astype(np.int64), site, anti])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    freq = nf.frequencies
    groups = np.argsort(inv, kind="stable")
    bounds_ = np.searchsorted(inv[groups], np.arange(len(uniq) + 1))
    out_rows, out_coef = [], []
    max_cond = 1.0
    for g in range(len(uniq)):
        members = groups[bounds_[g]: bounds_[g + 1]]
        k = uniq[g, :nb]
        slots = [(int(uniq[g, nb + s]), int(uniq[g, nb + nslots + s])) for s in range(nslots)]
        delta = float(k.astype(float) @ freq)
        terms = [(tuple(sorted(int(x) for x in fac[i])), Rk.coef[i]) for i in members]
        if nslots == 1:
            cls_name, sign = cls_prefix, ("anti" if slots[0][1] else "hol")
        else:
            flags = (slots[0][1], slots[1][1])
            sign = {(0, 1): "minus", (0, 0): "plus", (1, 1): "plus-conj"}[flags]
            cls_name = f"{cls_prefix}-{sign}"
        try:
            sol, div, n, m, cond = _class_solve(nf, sites, slots, delta, terms, bnd, cls_name, sign)
        except ResonanceError as err:
            raise ResonanceError(cls_name, tuple(int(x) for x in k), err.n, err.m, sign,
                                 err.value, err.bound) from None
        max_cond = max(max_cond, cond)
        for i in members:
            log.append(DivisorRecord(cls_name, tuple(int(x) for x in k), n, m, sign, div, bnd))
        for codes, c in sol.items():
            if c == 0:
                continue
            row = np.concatenate([k, np.zeros(nb, dtype=np.int64), codes])
            out_rows.append(row)
            out_coef.append(c)
    if not out_rows:
        return HamiltonianSeries(sites), log, max_cond
    rows = np.array(out_rows, dtype=np.int64)
    return HamiltonianSeries(sites, rows, np.array(out_coef)), log, max_cond


def solve_f1(R1: HamiltonianSeries, nf: NormalForm, gamma: float, tau: float, K: int, sites=None):
    """Classes linear in one normal mode: (delta I + A_n) on (u_n, v_n), (delta I - A_n^T) on the conjugates."""
    F, log, _ = _solve_classes(R1, nf, gamma, tau, K, 1, "R1")
    return F, log


def solve_f2(R2: HamiltonianSeries, nf: NormalForm, gamma: float, tau: float, K: int, sites=None):
    """Classes quadratic in the normal modes; diagonal k = 0 terms must have been routed out."""
    F, log, _ = _solve_classes(R2, nf, gamma, tau, K, 2, "R2")
    return F, log


def solve_homological(R: TruncationR, nf: NormalForm, gamma: float, tau: float, K: int):
    """Route the resonant part and solve all three classes.

    Returns
    -------
    sol : SolutionF
    upd : NormalFormUpdate holding N^ + B^.
    """
    upd, R0s, R2s = split_resonant(R, nf)
    F0, log0 = solve_f0(R0s, nf, gamma, tau, K)
    F1, log1, c1 = _solve_classes(R.R1, nf, gamma, tau, K, 1, "R1")
    F2, log2, c2 = _solve_classes(R2s, nf, gamma, tau, K, 2, "R2")
    sol = SolutionF(F0, F1, F2, log0 + log1 + log2, max(c1, c2))
    return sol, upd


def residual_series(nf: NormalForm, F: HamiltonianSeries, R: HamiltonianSeries,
                    hat: HamiltonianSeries) -> HamiltonianSeries:
    """{N + B, F} + R - (N^ + B^)."""
    NB = nf.to_series(F.sites)
    return concat(F.sites, [poisson_bracket(NB, F), R, -hat], prune_rel=0.0)


def residual_check(nf: NormalForm, F: HamiltonianSeries, R: HamiltonianSeries,
                   hat: HamiltonianSeries, dp: DomainParams) -> float:
    """Vector-field norm of the homological residual at ``dp``."""
    return vector_field_norm(residual_series(nf, F, R, hat), dp)


def divisor_csv_rows(log: list[DivisorRecord]):
    """Rows (class, k, n, m, sign, |divisor|, bound) sorted by class key."""
    def fmt(x):
        return "" if x is None else " ".join(str(v) for v in x)

    rows = [(r.cls, fmt(r.k), fmt(r.n), fmt(r.m), r.sign, r.value, r.bound) for r in log]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    return rows


__all__ = [
    "DivisorRecord",
    "NormalFormUpdate",
    "ResonanceError",
    "SolutionF",
    "TruncationR",
    "bound",
    "divisor_csv_rows",
    "extract_truncation",
    "residual_check",
    "residual_series",
    "solve_f0",
    "solve_f1",
    "solve_f2",
    "solve_homological",
    "split_resonant",
]
