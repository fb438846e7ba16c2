"""Sparse Fourier-Taylor series on the phase space (theta, phi, I, J, u, ubar, v, vbar).

A series is stored as one integer matrix plus a coefficient vector.  Each row
is a monomial laid out as ``[k | k_t | l | l_t | factor codes]`` where the
angle block covers the ``b`` u-angles followed by the ``b_t`` v-angles, and
every normal-mode factor is encoded as ``kind * W + site`` with ``W`` the
window size and kinds ordered (u, ubar, v, vbar).  Factor codes are sorted
within a row and padded with a sentinel that sorts last, so a row is a
canonical key for its monomial.  Rows are kept sorted and unique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .lattice import ConfigurationError, ModeIndex, MultiIndex, SiteConfig

KINDS = ("u", "ubar", "v", "vbar")
ANGLE_KINDS = ("theta", "phi")
ACTION_KINDS = ("I", "J")

PRUNE_REL = 1e-14
# upper bound on the number of candidate products materialized at once
CHUNK = 1 << 21


class SiteMismatchError(ConfigurationError):
    """Operands live on different site configurations."""


@dataclass(frozen=True)
class DomainParams:
    """Angle-strip width ``r``, action/mode radius ``s`` and mode decay ``rho``."""

    r: float
    s: float
    rho: float

    def __post_init__(self):
        for name in ("r", "s", "rho"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive (got {v})")


def sentinel(sites: SiteConfig) -> int:
    return 4 * sites.size


def code(sites: SiteConfig, kind: str, n: Iterable[int]) -> int:
    return KINDS.index(kind) * sites.size + sites.site_index(n)


def conj_codes(codes: np.ndarray, W: int) -> np.ndarray:
    """Map u <-> ubar and v <-> vbar; the sentinel is left alone."""
    kind = codes // W
    out = np.where(kind % 2 == 0, codes + W, codes - W)
    return np.where(kind >= 4, codes, out)


def _empty_rows(width: int) -> np.ndarray:
    return np.zeros((0, width), dtype=np.int32)


def _pack_keys(rows: np.ndarray) -> list[np.ndarray]:
    """Pack integer columns into as few int64 words as possible, preserving lex order."""
    if rows.shape[1] == 0:
        return [np.zeros(len(rows), dtype=np.int64)]
    lo = rows.min(axis=0).astype(np.int64)
    hi = rows.max(axis=0).astype(np.int64)
    bits = [max(1, int(h - l).bit_length()) for l, h in zip(lo, hi)]
    words, cur, used = [], None, 0
    for j, nb in enumerate(bits):
        col = rows[:, j].astype(np.int64) - lo[j]
        if cur is None or used + nb > 62:
            if cur is not None:
                words.append(cur)
            cur, used = col.copy(), nb
        else:
            cur = (cur << nb) | col
            used += nb
    words.append(cur)
    return words


class HamiltonianSeries:
    """Immutable sparse series; use the module-level operations to combine them.

    Parameters
    ----------
    sites : SiteConfig
    rows : (N, 2 * (b + b_t) + F) int array
    coef : (N,) complex array
    canonical : bool
        Skip canonicalization when the caller guarantees sorted unique rows.
    prune_rel : float
        Relative magnitude below which coefficients are dropped.
    """

    __slots__ = ("sites", "rows", "coef")

    def __init__(self, sites: SiteConfig, rows=None, coef=None, *, canonical=False,
                 prune_rel: float = PRUNE_REL):
        nb = sites.b + sites.b_tilde
        if rows is None:
            rows = _empty_rows(2 * nb)
            coef = np.zeros(0, dtype=complex)
        rows = np.asarray(rows, dtype=np.int32)
        coef = np.asarray(coef, dtype=complex)
        if rows.ndim != 2 or rows.shape[1] < 2 * nb or len(rows) != len(coef):
            raise ValueError("row matrix does not match the site configuration")
        if not canonical:
            rows, coef = canonicalize(rows, coef, nb, sites.size, prune_rel)
        self.sites = sites
        self.rows = rows
        self.coef = coef

    # ---- layout -------------------------------------------------------
    @property
    def nb(self) -> int:
        return self.sites.b + self.sites.b_tilde

    @property
    def ang(self) -> np.ndarray:
        return self.rows[:, : self.nb]

    @property
    def act(self) -> np.ndarray:
        return self.rows[:, self.nb: 2 * self.nb]

    @property
    def fac(self) -> np.ndarray:
        return self.rows[:, 2 * self.nb:]

    @property
    def sentinel(self) -> int:
        return sentinel(self.sites)

    def __len__(self) -> int:
        return len(self.coef)

    def normal_degree(self) -> np.ndarray:
        return (self.fac != self.sentinel).sum(axis=1)

    def degree(self) -> np.ndarray:
        """Weighted degree per term (actions weigh 2, normal factors 1)."""
        return 2 * self.act.sum(axis=1) + self.normal_degree()

    def k_order(self) -> np.ndarray:
        return np.abs(self.ang).sum(axis=1)

    # ---- construction -------------------------------------------------
    @classmethod
    def zero(cls, sites: SiteConfig) -> "HamiltonianSeries":
        return cls(sites)

    @classmethod
    def constant(cls, sites: SiteConfig, c: complex) -> "HamiltonianSeries":
        nb = sites.b + sites.b_tilde
        return cls(sites, np.zeros((1, 2 * nb), dtype=np.int32), [c])

    @classmethod
    def monomial(cls, sites: SiteConfig, c: complex = 1.0, *, k=None, k_t=None, l=None,
                 l_t=None, u=(), ubar=(), v=(), vbar=()) -> "HamiltonianSeries":
        """Single term; mode arguments are lists of lattice points (repeats allowed)."""
        b, bt = sites.b, sites.b_tilde
        head = np.concatenate([
            _vec(k, b), _vec(k_t, bt), _vec(l, b), _vec(l_t, bt)
        ])
        codes = [code(sites, kind, n) for kind, modes in zip(KINDS, (u, ubar, v, vbar))
                 for n in modes]
        row = np.concatenate([head, np.array(codes, dtype=np.int64)]).astype(np.int32)
        return cls(sites, row[None, :], [c])

    @classmethod
    def from_terms(cls, sites: SiteConfig, terms: Mapping[MultiIndex, complex]) -> "HamiltonianSeries":
        if not terms:
            return cls(sites)
        parts = []
        for m, c in terms.items():
            parts.append(cls.monomial(
                sites, c, k=m.k, k_t=m.k_t, l=m.l, l_t=m.l_t,
                u=_expand(m.alpha), ubar=_expand(m.beta), v=_expand(m.alpha_t), vbar=_expand(m.beta_t),
            ))
        return concat(sites, parts)

    def multi_index(self, i: int) -> MultiIndex:
        b, bt, W = self.sites.b, self.sites.b_tilde, self.sites.size
        row = self.rows[i]
        maps: list[dict] = [{}, {}, {}, {}]
        for c in row[2 * self.nb:]:
            if c == self.sentinel:
                continue
            kind, site = divmod(int(c), W)
            n = self.sites.site(site)
            maps[kind][n] = maps[kind].get(n, 0) + 1
        return MultiIndex(
            k=tuple(row[:b]), k_t=tuple(row[b: b + bt]),
            l=tuple(row[b + bt: 2 * b + bt]), l_t=tuple(row[2 * b + bt: 2 * (b + bt)]),
            alpha=maps[0], beta=maps[1], alpha_t=maps[2], beta_t=maps[3],
        )

    def terms(self) -> dict[MultiIndex, complex]:
        return {self.multi_index(i): complex(self.coef[i]) for i in range(len(self))}

    # ---- elementwise --------------------------------------------------
    def select(self, mask) -> "HamiltonianSeries":
        mask = np.asarray(mask)
        return HamiltonianSeries(self.sites, self.rows[mask], self.coef[mask], canonical=True)._trimmed()

    def with_coef(self, coef) -> "HamiltonianSeries":
        coef = np.asarray(coef, dtype=complex)
        keep = coef != 0
        return HamiltonianSeries(self.sites, self.rows[keep], coef[keep], canonical=True)

    def _trimmed(self) -> "HamiltonianSeries":
        rows = _trim_fac(self.rows, self.nb, self.sentinel)
        if rows is self.rows:
            return self
        return HamiltonianSeries(self.sites, rows, self.coef, canonical=True)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other)

    def __neg__(self):
        return HamiltonianSeries(self.sites, self.rows, -self.coef, canonical=True)

    def __mul__(self, scalar):
        if isinstance(scalar, HamiltonianSeries):
            return NotImplemented
        if scalar == 0:
            return HamiltonianSeries(self.sites)
        return HamiltonianSeries(self.sites, self.rows, self.coef * scalar, canonical=True)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def __repr__(self):
        return f"HamiltonianSeries({len(self)} terms)"

    def is_empty(self) -> bool:
        return len(self) == 0

    def max_abs(self) -> float:
        return float(np.abs(self.coef).max()) if len(self) else 0.0

    def equals(self, other: "HamiltonianSeries", atol: float = 0.0, rtol: float = 0.0) -> bool:
        """Structural comparison: same monomials and coefficients within tolerance."""
        diff = add(self, -other, prune_rel=0.0)
        scale = max(self.max_abs(), other.max_abs())
        return diff.max_abs() <= atol + rtol * scale


def _vec(x, n):
    if x is None:
        return np.zeros(n, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if len(x) != n:
        raise ConfigurationError(f"expected a vector of length {n}, got {len(x)}")
    return x


def _expand(entries) -> list[ModeIndex]:
    out = []
    for n, e in entries:
        out.extend([n] * e)
    return out


def _trim_fac(rows: np.ndarray, nb: int, sent: int) -> np.ndarray:
    fac = rows[:, 2 * nb:]
    if fac.shape[1] == 0:
        return rows
    used = (fac != sent).sum(axis=1)
    width = int(used.max()) if len(rows) else 0
    if width == fac.shape[1]:
        return rows
    return np.ascontiguousarray(rows[:, : 2 * nb + width])


def canonicalize(rows: np.ndarray, coef: np.ndarray, nb: int, W: int,
                 prune_rel: float = PRUNE_REL):
    """Sort factor slots, merge duplicate monomials, prune tiny coefficients.

    Duplicate rows are merged with a stable sort so the summation order, and
    hence the floating-point result, depends only on the input order.
    """
    sent = 4 * W
    if len(rows) == 0:
        return _empty_rows(2 * nb), np.zeros(0, dtype=complex)
    rows = np.asarray(rows, dtype=np.int32)
    if rows.shape[1] > 2 * nb + 1:
        rows = rows.copy()
        rows[:, 2 * nb:] = np.sort(rows[:, 2 * nb:], axis=1)
    rows = _trim_fac(rows, nb, sent)
    words = _pack_keys(rows)
    if len(words) == 1:
        order = np.argsort(words[0], kind="stable")
    else:
        order = np.lexsort(words[::-1])
    rows = rows[order]
    coef = coef[order]
    sorted_words = [w[order] for w in words]
    new = np.ones(len(rows), dtype=bool)
    same = np.ones(len(rows) - 1, dtype=bool)
    for w in sorted_words:
        same &= w[1:] == w[:-1]
    new[1:] = ~same
    starts = np.flatnonzero(new)
    if len(starts) < len(rows):
        coef = np.add.reduceat(coef, starts)
        rows = rows[starts]
    mag = np.abs(coef)
    if len(mag):
        keep = mag > prune_rel * mag.max() if prune_rel > 0 else mag > 0
        keep &= mag > 0
        if not keep.all():
            rows, coef = rows[keep], coef[keep]
    rows = _trim_fac(rows, nb, sent)
    return np.ascontiguousarray(rows), coef


def _check_sites(A: HamiltonianSeries, B: HamiltonianSeries) -> None:
    if not A.sites.same_as(B.sites):
        raise SiteMismatchError("series are defined on different site configurations")


def _pad_fac(rows: np.ndarray, nb: int, width: int, sent: int) -> np.ndarray:
    cur = rows.shape[1] - 2 * nb
    if cur >= width:
        return rows
    pad = np.full((len(rows), width - cur), sent, dtype=rows.dtype)
    return np.hstack([rows, pad])


def concat(sites: SiteConfig, parts: list[HamiltonianSeries], prune_rel: float = PRUNE_REL):
    """Sum of several series in one canonicalization pass."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return HamiltonianSeries(sites)
    for p in parts:
        if not p.sites.same_as(sites):
            raise SiteMismatchError("series are defined on different site configurations")
    nb = sites.b + sites.b_tilde
    sent = sentinel(sites)
    width = max(p.rows.shape[1] for p in parts) - 2 * nb
    rows = np.vstack([_pad_fac(p.rows, nb, width, sent) for p in parts])
    coef = np.concatenate([p.coef for p in parts])
    return HamiltonianSeries(sites, rows, coef, prune_rel=prune_rel)


def add(A: HamiltonianSeries, B: HamiltonianSeries, prune_rel: float = PRUNE_REL) -> HamiltonianSeries:
    """Coefficient-wise sum."""
    _check_sites(A, B)
    if len(B) == 0 and prune_rel == PRUNE_REL:
        return A
    if len(A) == 0 and prune_rel == PRUNE_REL:
        return B
    return concat(A.sites, [A, B], prune_rel=prune_rel)


def _merge_fac(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    return np.sort(np.hstack([fa, fb]), axis=1)


def _degree_mask(dA, dB, degree_cap, shift):
    if degree_cap is None:
        return None
    return (dA[:, None] + dB[None, :] - shift) <= degree_cap


def multiply(A: HamiltonianSeries, B: HamiltonianSeries, degree_cap: int | None = None) -> HamiltonianSeries:
    """Product series, dropping terms whose weighted degree exceeds ``degree_cap``."""
    _check_sites(A, B)
    if degree_cap is not None and degree_cap < 0:
        raise ValueError("degree_cap must be nonnegative")
    if len(A) == 0 or len(B) == 0:
        return HamiltonianSeries(A.sites)
    nb, sites = A.nb, A.sites
    dA, dB = A.degree(), B.degree()
    out = []
    step = max(1, CHUNK // max(1, len(B)))
    for s0 in range(0, len(A), step):
        ia = np.arange(s0, min(len(A), s0 + step))
        mask = _degree_mask(dA[ia], dB, degree_cap, 0)
        if mask is None:
            ii, jj = np.meshgrid(ia, np.arange(len(B)), indexing="ij")
            ii, jj = ii.ravel(), jj.ravel()
        else:
            ii, jj = np.nonzero(mask)
            ii = ia[ii]
        if len(ii) == 0:
            continue
        head = A.rows[ii, : 2 * nb] + B.rows[jj, : 2 * nb]
        fac = _merge_fac(A.fac[ii], B.fac[jj])
        out.append(_piece(sites, np.hstack([head, fac]), A.coef[ii] * B.coef[jj]))
    return concat(sites, out)


def _piece(sites, rows, coef):
    return HamiltonianSeries(sites, rows, coef, prune_rel=0.0)


def _angle_col(sites: SiteConfig, kind: str, j: int) -> int:
    if kind in ("theta", "I"):
        if not 0 <= j < sites.b:
            raise ConfigurationError(f"{kind} index {j} out of range")
        return j
    if not 0 <= j < sites.b_tilde:
        raise ConfigurationError(f"{kind} index {j} out of range")
    return sites.b + j


def partial(A: HamiltonianSeries, kind: str, index) -> HamiltonianSeries:
    """Formal partial derivative.

    Parameters
    ----------
    kind : {'theta', 'phi', 'I', 'J', 'u', 'ubar', 'v', 'vbar'}
    index : int for angle/action variables, lattice point for mode variables.
    """
    sites, nb = A.sites, A.nb
    if kind in ANGLE_KINDS:
        col = _angle_col(sites, "theta" if kind == "theta" else "phi", int(index))
        return A.with_coef(A.coef * 1j * A.ang[:, col])
    if kind in ACTION_KINDS:
        col = _angle_col(sites, "I" if kind == "I" else "J", int(index))
        l = A.act[:, col]
        keep = l > 0
        rows = A.rows[keep].copy()
        rows[:, nb + col] -= 1
        return HamiltonianSeries(sites, rows, A.coef[keep] * l[keep])
    if kind not in KINDS:
        raise ValueError(f"unknown variable kind {kind!r}")
    c = code(sites, kind, index)
    eq = A.fac == c
    mult = eq.sum(axis=1)
    keep = mult > 0
    if not keep.any():
        return HamiltonianSeries(sites)
    rows = A.rows[keep].copy()
    first = np.argmax(eq[keep], axis=1)
    rows[np.arange(len(rows)), 2 * nb + first] = A.sentinel
    return HamiltonianSeries(sites, rows, A.coef[keep] * mult[keep])


def _incidences(A: HamiltonianSeries):
    """One record per (term, distinct factor code): term, slot, code, multiplicity."""
    fac = A.fac
    if fac.shape[1] == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, z
    first = np.ones(fac.shape, dtype=bool)
    first[:, 1:] = fac[:, 1:] != fac[:, :-1]
    first &= fac != A.sentinel
    term, slot = np.nonzero(first)
    codes = fac[term, slot].astype(np.int64)
    mult = np.zeros(len(term), dtype=np.int64)
    for p in range(fac.shape[1]):
        mult += fac[term, p] == codes
    return term, slot, codes, mult


def _drop_slot(A: HamiltonianSeries, term, slot) -> np.ndarray:
    fac = A.fac[term].copy()
    fac[np.arange(len(term)), slot] = A.sentinel
    return fac


def poisson_bracket(G: HamiltonianSeries, H: HamiltonianSeries, degree_cap: int | None = None,
                    prune_rel: float = PRUNE_REL) -> HamiltonianSeries:
    """Canonical bracket {G, H} with dG/dt = {G, H} giving the flow of H.

    Angle/action pairs contribute G_theta H_I - G_I H_theta, normal modes
    i (G_u H_ubar - G_ubar H_u) and the same for v.  Products whose weighted
    degree exceeds ``degree_cap`` are never formed.
    """
    _check_sites(G, H)
    sites, nb = G.sites, G.nb
    if len(G) == 0 or len(H) == 0:
        return HamiltonianSeries(sites)
    W = sites.size
    dG, dH = G.degree(), H.degree()
    pieces: list[HamiltonianSeries] = []

    # normal-mode channel: join G factors with conjugate H factors
    gt, gs, gc, gm = _incidences(G)
    ht, hs, hc, hm = _incidences(H)
    if len(gt) and len(ht):
        order = np.argsort(hc, kind="stable")
        ht, hs, hc, hm = ht[order], hs[order], hc[order], hm[order]
        target = conj_codes(gc, W)
        lo = np.searchsorted(hc, target, "left")
        hi = np.searchsorted(hc, target, "right")
        cnt = hi - lo
        sign = np.where((gc // W) % 2 == 0, 1j, -1j)
        cum = np.cumsum(cnt)
        start = 0
        while start < len(gt):
            base = cum[start - 1] if start else 0
            stop = int(np.searchsorted(cum, base + CHUNK, "right"))
            stop = max(stop, start + 1)
            sel = np.arange(start, stop)
            start = stop
            c = cnt[sel]
            if c.sum() == 0:
                continue
            gi = np.repeat(sel, c)
            offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
            hj = np.repeat(lo[sel], c) + offs
            if degree_cap is not None:
                ok = dG[gt[gi]] + dH[ht[hj]] - 2 <= degree_cap
                gi, hj = gi[ok], hj[ok]
                if len(gi) == 0:
                    continue
            tg, th = gt[gi], ht[hj]
            head = G.rows[tg, : 2 * nb] + H.rows[th, : 2 * nb]
            fac = _merge_fac(_drop_slot(G, tg, gs[gi]), _drop_slot(H, th, hs[hj]))
            coef = sign[gi] * gm[gi] * hm[hj] * G.coef[tg] * H.coef[th]
            pieces.append(_piece(sites, np.hstack([head, fac]), coef))

    # angle/action channel
    for j in range(nb):
        for X, Y, sgn in ((G, H, 1.0), (H, G, -1.0)):
            # sgn * i * k^X_j * l^Y_j, with X differentiated in the angle
            kx = X.ang[:, j]
            ly = Y.act[:, j]
            ix = np.flatnonzero(kx)
            iy = np.flatnonzero(ly)
            if len(ix) == 0 or len(iy) == 0:
                continue
            dX, dY = X.degree()[ix], Y.degree()[iy]
            step = max(1, CHUNK // len(iy))
            for s0 in range(0, len(ix), step):
                sx = np.arange(s0, min(len(ix), s0 + step))
                if degree_cap is None:
                    a, b = np.meshgrid(sx, np.arange(len(iy)), indexing="ij")
                    a, b = a.ravel(), b.ravel()
                else:
                    a, b = np.nonzero(dX[sx][:, None] + dY[None, :] - 2 <= degree_cap)
                    a = sx[a]
                if len(a) == 0:
                    continue
                tx, ty = ix[a], iy[b]
                head = X.rows[tx, : 2 * nb] + Y.rows[ty, : 2 * nb]
                head[:, nb + j] -= 1
                fac = _merge_fac(X.fac[tx], Y.fac[ty])
                coef = sgn * 1j * kx[tx] * ly[ty] * X.coef[tx] * Y.coef[ty]
                pieces.append(_piece(sites, np.hstack([head, fac]), coef))
    return concat(sites, pieces, prune_rel=prune_rel)


# ---- norms --------------------------------------------------------------

def _factor_weights(sites: SiteConfig, dp: DomainParams):
    norms = np.tile(sites.norms, 4)
    w = np.append(dp.s * np.exp(-dp.rho * norms), 1.0)
    e2 = np.append(np.exp(2 * dp.rho * norms), 0.0)
    return w, e2


def term_weights(A: HamiltonianSeries, dp: DomainParams) -> np.ndarray:
    """Per-term contribution to the majorant norm."""
    if len(A) == 0:
        return np.zeros(0)
    w, _ = _factor_weights(A.sites, dp)
    out = np.abs(A.coef) * np.exp(dp.r * A.k_order()) * dp.s ** (2.0 * A.act.sum(axis=1))
    if A.fac.shape[1]:
        out = out * np.prod(w[A.fac], axis=1)
    return out


def term_vector_field_weights(A: HamiltonianSeries, dp: DomainParams) -> np.ndarray:
    """Per-term contribution to the vector-field norm.

    Differentiation maps distinct monomials to distinct monomials, so the
    norm of each derivative series is the plain sum of these contributions.
    """
    if len(A) == 0:
        return np.zeros(0)
    _, e2 = _factor_weights(A.sites, dp)
    mult = A.act.sum(axis=1) + A.k_order()
    mult = mult.astype(float)
    if A.fac.shape[1]:
        mult = mult + e2[A.fac].sum(axis=1)
    return term_weights(A, dp) * mult / dp.s**2


def majorant_norm(A: HamiltonianSeries, dp: DomainParams) -> float:
    return float(term_weights(A, dp).sum())


def vector_field_norm(A: HamiltonianSeries, dp: DomainParams) -> float:
    return float(term_vector_field_weights(A, dp).sum())


def vector_field_norm_by_parts(A: HamiltonianSeries, dp: DomainParams) -> float:
    """Same norm assembled literally from derivative series; used as an oracle."""
    sites = A.sites
    total = 0.0
    for j in range(sites.b):
        total += majorant_norm(partial(A, "I", j), dp)
        total += majorant_norm(partial(A, "theta", j), dp) / dp.s**2
    for j in range(sites.b_tilde):
        total += majorant_norm(partial(A, "J", j), dp)
        total += majorant_norm(partial(A, "phi", j), dp) / dp.s**2
    for i in range(sites.size):
        n = sites.site(i)
        wn = math.exp(dp.rho * sites.norms[i]) / dp.s
        for kind in KINDS:
            total += majorant_norm(partial(A, kind, n), dp) * wn
    return total


def prune_budget(A: HamiltonianSeries, dp: DomainParams, budget: float) -> HamiltonianSeries:
    """Drop the smallest terms whose summed vector-field contribution stays within ``budget``.

    Constants carry no vector field and are always kept.
    """
    if budget <= 0 or len(A) == 0:
        return A
    w = term_vector_field_weights(A, dp)
    order = np.argsort(w, kind="stable")
    cum = np.cumsum(w[order])
    ndrop = int(np.searchsorted(cum, budget, "right"))
    if ndrop == 0:
        return A
    keep = np.ones(len(A), dtype=bool)
    keep[order[:ndrop]] = False
    keep |= w == 0
    return A.select(keep)


# ---- structure ------------------------------------------------------------

def _mode_momenta(sites: SiteConfig) -> np.ndarray:
    c = sites.coords
    return np.vstack([c, -c, c, -c, np.zeros((1, sites.d), dtype=np.int64)])


def momenta(A: HamiltonianSeries) -> np.ndarray:
    sites = A.sites
    if len(A) == 0:
        return np.zeros((0, sites.d), dtype=np.int64)
    tang = sites.tangential_coords()
    out = A.ang.astype(np.int64) @ tang
    if A.fac.shape[1]:
        out = out + _mode_momenta(sites)[A.fac].sum(axis=1)
    return out


def is_zero_momentum(A: HamiltonianSeries) -> bool:
    return bool(np.all(momenta(A) == 0))


def truncate(A: HamiltonianSeries, K: int, degree_cap: int) -> HamiltonianSeries:
    if K < 0:
        raise ValueError("K must be nonnegative")
    return A.select((A.k_order() <= K) & (A.degree() <= degree_cap))


def conjugate(A: HamiltonianSeries) -> HamiltonianSeries:
    """Complex-conjugate series: k -> -k, u <-> ubar, v <-> vbar, coefficients conjugated."""
    rows = A.rows.copy()
    nb = A.nb
    rows[:, :nb] *= -1
    rows[:, 2 * nb:] = conj_codes(rows[:, 2 * nb:].astype(np.int64), A.sites.size)
    return HamiltonianSeries(A.sites, rows, np.conj(A.coef))


def reality_defect(A: HamiltonianSeries) -> float:
    """Max coefficient mismatch between A and its conjugate; 0 for a real Hamiltonian."""
    return add(A, -conjugate(A), prune_rel=0.0).max_abs()


def is_real(A: HamiltonianSeries, rtol: float = 1e-12) -> bool:
    return reality_defect(A) <= rtol * max(A.max_abs(), 1e-300)


# ---- evaluation ---------------------------------------------------------

@dataclass
class PhasePoint:
    """A point of the complexified phase space; ``modes`` rows are (u, ubar, v, vbar).

    Leading batch dimensions are allowed: ``angles`` (..., nb), ``actions``
    (..., nb), ``modes`` (..., 4, W).
    """

    angles: np.ndarray
    actions: np.ndarray
    modes: np.ndarray

    @classmethod
    def random(cls, sites: SiteConfig, rng: np.random.Generator, dp: DomainParams,
               size: int | None = None, real: bool = True, frac: float = 0.5) -> "PhasePoint":
        """Random point well inside the domain (actions and modes at ``frac`` of the radius)."""
        nb, W = sites.b + sites.b_tilde, sites.size
        shape = () if size is None else (size,)
        ang = rng.uniform(0, 2 * np.pi, shape + (nb,))
        act = frac * dp.s**2 * rng.uniform(-1, 1, shape + (nb,))
        radius = frac * dp.s * np.exp(-dp.rho * sites.norms)
        z = radius * rng.uniform(0, 1, shape + (2, W)) * np.exp(2j * np.pi * rng.uniform(0, 1, shape + (2, W)))
        if real:
            modes = np.stack([z[..., 0, :], np.conj(z[..., 0, :]), z[..., 1, :], np.conj(z[..., 1, :])], axis=-2)
        else:
            w = radius * rng.uniform(0, 1, shape + (2, W)) * np.exp(2j * np.pi * rng.uniform(0, 1, shape + (2, W)))
            modes = np.stack([z[..., 0, :], w[..., 0, :], z[..., 1, :], w[..., 1, :]], axis=-2)
            ang = ang + 0.1j * rng.uniform(-1, 1, ang.shape)
        return cls(ang, act.astype(complex), modes)


def _flat_modes(point: PhasePoint) -> np.ndarray:
    m = np.asarray(point.modes, dtype=complex)
    flat = m.reshape(m.shape[:-2] + (-1,))
    one = np.ones(flat.shape[:-1] + (1,), dtype=complex)
    return np.concatenate([flat, one], axis=-1)


def _term_parts(A: HamiltonianSeries, point: PhasePoint):
    ang = np.asarray(point.angles)
    act = np.asarray(point.actions, dtype=complex)
    phase = np.exp(1j * (ang @ A.ang.T.astype(float)))
    powers = act[..., None, :] ** A.act
    apow = np.prod(powers, axis=-1)
    vals = _flat_modes(point)
    fvals = vals[..., A.fac] if A.fac.shape[1] else np.ones(apow.shape + (0,), dtype=complex)
    return phase, act, apow, fvals


def evaluate(A: HamiltonianSeries, point: PhasePoint) -> np.ndarray | complex:
    if len(A) == 0:
        return np.zeros(np.shape(point.angles)[:-1], dtype=complex) if np.ndim(point.angles) > 1 else 0j
    phase, _, apow, fvals = _term_parts(A, point)
    t = A.coef * phase * apow * np.prod(fvals, axis=-1)
    return t.sum(axis=-1)


def gradient(A: HamiltonianSeries, point: PhasePoint) -> PhasePoint:
    """All first partial derivatives at ``point`` in one vectorized pass."""
    nb, W = A.nb, A.sites.size
    batch = np.shape(point.angles)[:-1]
    g_ang = np.zeros(batch + (nb,), dtype=complex)
    g_act = np.zeros(batch + (nb,), dtype=complex)
    g_mod = np.zeros(batch + (4 * W + 1,), dtype=complex)
    if len(A) == 0:
        return PhasePoint(g_ang, g_act, g_mod[..., :-1].reshape(batch + (4, W)))
    phase, act, apow, fvals = _term_parts(A, point)
    fprod = np.prod(fvals, axis=-1)
    base = A.coef * phase
    full = base * apow * fprod
    g_ang = full @ (1j * A.ang.astype(complex))
    for j in range(nb):
        l = A.act[:, j]
        sel = np.flatnonzero(l)
        if len(sel) == 0:
            continue
        lowered = A.act[sel].copy()
        lowered[:, j] -= 1
        ap = np.prod(act[..., None, :] ** lowered, axis=-1)
        g_act[..., j] = (base[..., sel] * l[sel] * ap * fprod[..., sel]).sum(axis=-1)
    F = A.fac.shape[1]
    if F:
        # product of all factors but slot p via prefix/suffix products
        pre = np.ones_like(fvals)
        suf = np.ones_like(fvals)
        for p in range(1, F):
            pre[..., p] = pre[..., p - 1] * fvals[..., p - 1]
            suf[..., F - 1 - p] = suf[..., F - p] * fvals[..., F - p]
        others = pre * suf
        contrib = (base * apow)[..., None] * others
        flat_codes = A.fac.ravel()
        cflat = contrib.reshape(batch + (-1,))
        if batch:
            gm = g_mod.reshape(-1, 4 * W + 1)
            cf = cflat.reshape(len(gm), -1)
            for b_ in range(len(gm)):
                gm[b_] += np.bincount(flat_codes, weights=cf[b_].real, minlength=4 * W + 1)
                gm[b_] += 1j * np.bincount(flat_codes, weights=cf[b_].imag, minlength=4 * W + 1)
            g_mod = gm.reshape(batch + (4 * W + 1,))
        else:
            g_mod = (np.bincount(flat_codes, weights=cflat.real, minlength=4 * W + 1)
                     + 1j * np.bincount(flat_codes, weights=cflat.imag, minlength=4 * W + 1))
    return PhasePoint(g_ang, g_act, g_mod[..., :-1].reshape(batch + (4, W)))


def hamiltonian_vector_field(A: HamiltonianSeries, point: PhasePoint) -> PhasePoint:
    """Time derivative of every coordinate under the flow of ``A``."""
    g = gradient(A, point)
    dm = np.empty_like(g.modes)
    dm[..., 0, :] = 1j * g.modes[..., 1, :]
    dm[..., 1, :] = -1j * g.modes[..., 0, :]
    dm[..., 2, :] = 1j * g.modes[..., 3, :]
    dm[..., 3, :] = -1j * g.modes[..., 2, :]
    return PhasePoint(g.actions, -g.angles, dm)


# ---- serialization -------------------------------------------------------

_HEADER = "# kamnls series v1"


def _fmt_site(n) -> str:
    return "(" + ",".join(str(int(x)) for x in n) + ")"


def _parse_site(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.strip("()").split(","))


def dumps(A: HamiltonianSeries) -> str:
    """Line-oriented text: one term per line, doubles written with round-trip precision."""
    sites = A.sites
    lines = [
        _HEADER,
        "sites d={} cutoff={} S={} S_tilde={}".format(
            sites.d, sites.cutoff,
            ";".join(_fmt_site(n) for n in sites.S),
            ";".join(_fmt_site(n) for n in sites.S_tilde),
        ),
    ]
    b, bt, W = sites.b, sites.b_tilde, sites.size
    for row, c in zip(A.rows.tolist(), A.coef.tolist()):
        k = ",".join(map(str, row[:b]))
        kt = ",".join(map(str, row[b: b + bt]))
        l = ",".join(map(str, row[b + bt: 2 * b + bt]))
        lt = ",".join(map(str, row[2 * b + bt: 2 * (b + bt)]))
        facs = [f"{KINDS[x // W]}{_fmt_site(sites.site(x % W))}" for x in row[2 * (b + bt):]
                if x != 4 * W]
        lines.append(f"k={k} kt={kt} l={l} lt={lt} f={' '.join(facs) or '-'} c={c.real!r} {c.imag!r}")
    return "\n".join(lines) + "\n"


def loads(text: str, sites: SiteConfig | None = None) -> HamiltonianSeries:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise ValueError("not a serialized series")
    head = dict(tok.split("=", 1) for tok in lines[1].split()[1:])
    parsed = SiteConfig(
        d=int(head["d"]),
        S=tuple(_parse_site(s) for s in head["S"].split(";")),
        S_tilde=tuple(_parse_site(s) for s in head["S_tilde"].split(";")),
        cutoff=int(head["cutoff"]),
    )
    if sites is None:
        sites = parsed
    elif not sites.same_as(parsed):
        raise SiteMismatchError("serialized series uses a different site configuration")
    parts = []
    for ln in lines[2:]:
        body, cpart = ln.split(" c=")
        re_, im_ = cpart.split()
        fields = {}
        for tok in body.split(" f=")[0].split():
            key, val = tok.split("=")
            fields[key] = [int(x) for x in val.split(",")] if val else []
        fstr = body.split(" f=")[1]
        modes = {kind: [] for kind in KINDS}
        if fstr != "-":
            for tok in fstr.split():
                kind, rest = tok.split("(", 1)
                modes[kind].append(_parse_site("(" + rest))
        parts.append(HamiltonianSeries.monomial(
            sites, complex(float(re_), float(im_)), k=fields["k"], k_t=fields["kt"],
            l=fields["l"], l_t=fields["lt"], **modes,
        ))
    return concat(sites, parts, prune_rel=0.0)
