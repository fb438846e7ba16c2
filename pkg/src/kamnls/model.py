"""Coupled NLS Hamiltonian on a Galerkin window, action-angle reduction and the normal form N + B."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import binom

from .lattice import ConfigurationError, SiteConfig
from .series import HamiltonianSeries, canonicalize, sentinel

# ordered tuples enumerated per nonlinearity monomial before we refuse
MAX_TUPLES = 20_000_000


class ModelError(ValueError):
    """The Hamiltonian does not have the structure the reduction expects."""


@dataclass(frozen=True)
class NonlinearitySpec:
    """Polynomial G(a, b) = sum g_pq a^p b^q evaluated at a = |u|^2, b = |v|^2."""

    coefficients: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (p, q), g in dict(self.coefficients).items():
            p, q = int(p), int(q)
            if p < 0 or q < 0:
                raise ConfigurationError(f"negative exponent in G term a^{p} b^{q}")
            if p + q < 2:
                raise ConfigurationError(f"G must start at second order; got a^{p} b^{q}")
            if g != 0:
                clean[(p, q)] = float(g)
        object.__setattr__(self, "coefficients", dict(sorted(clean.items())))

    @property
    def is_zero(self) -> bool:
        return not self.coefficients

    @property
    def max_order(self) -> int:
        return max((p + q for p, q in self.coefficients), default=0)

    def d_a(self, a, b):
        """dG/da, the factor multiplying u in the u-equation."""
        out = np.zeros(np.broadcast(a, b).shape)
        for (p, q), g in self.coefficients.items():
            if p:
                out = out + g * p * a ** (p - 1) * b**q
        return out

    def d_b(self, a, b):
        out = np.zeros(np.broadcast(a, b).shape)
        for (p, q), g in self.coefficients.items():
            if q:
                out = out + g * q * a**p * b ** (q - 1)
        return out

    def value(self, a, b):
        out = np.zeros(np.broadcast(a, b).shape)
        for (p, q), g in self.coefficients.items():
            out = out + g * a**p * b**q
        return out


def linear_frequencies(sites: SiteConfig, xi, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Per-site lambda_n and lambda~_n: |n|^2, shifted by the parameters on S and S~."""
    xi = np.asarray(xi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if xi.shape != (sites.b,) or sigma.shape != (sites.b_tilde,):
        raise ConfigurationError(
            f"parameters sized {xi.shape}, {sigma.shape}; expected ({sites.b},), ({sites.b_tilde},)"
        )
    lam = sites.norms2.astype(float)
    lam_t = lam.copy()
    for j, n in enumerate(sites.S):
        lam[sites.site_index(n)] += xi[j]
    for j, n in enumerate(sites.S_tilde):
        lam_t[sites.site_index(n)] += sigma[j]
    return lam, lam_t


def _nonlinear_rows(sites: SiteConfig, p: int, q: int) -> np.ndarray:
    """Factor codes of every ordered zero-momentum tuple (u^p ubar^p v^q vbar^q)."""
    W, d = sites.size, sites.d
    L = 2 * (p + q)
    kinds = [0] * p + [1] * p + [2] * q + [3] * q
    signs = np.array([1 if kd % 2 == 0 else -1 for kd in kinds])
    last = p * 2 - 1 if p else L - 1  # a conjugate slot, so its mode is fixed by the rest
    free = [i for i in range(L) if i != last]
    total = W ** len(free)
    if total > MAX_TUPLES:
        raise ConfigurationError(
            f"nonlinearity term a^{p} b^{q} needs {total} tuples; reduce the window or the order"
        )
    idx = np.indices((W,) * len(free)).reshape(len(free), -1).T
    mom = np.zeros((len(idx), d), dtype=np.int64)
    for col, slot in enumerate(free):
        mom += signs[slot] * sites.coords[idx[:, col]]
    target = -signs[last] * mom  # signs[last] * x + mom = 0
    N = sites.cutoff
    ok = np.all(np.abs(target) <= N, axis=1)
    idx, target = idx[ok], target[ok]
    # lexicographic window ordering: index = sum (x_i + N) (2N+1)^(d-1-i)
    base = (2 * N + 1) ** np.arange(d - 1, -1, -1)
    last_idx = ((target + N) * base).sum(axis=1)
    sites_tuple = np.empty((len(idx), L), dtype=np.int64)
    sites_tuple[:, free] = idx
    sites_tuple[:, last] = last_idx
    return sites_tuple + np.array(kinds) * W


def build_hamiltonian(sites: SiteConfig, nl: NonlinearitySpec, xi, sigma,
                      degree_cap: int | None = None) -> HamiltonianSeries:
    """Quadratic part plus the window expansion of the integral of G(|u|^2, |v|^2).

    Works in the original mode variables: tangential sites appear as ordinary
    factors and no angle or action is used yet.  Every ordered tuple of modes
    with vanishing momentum contributes ``g_pq (2 pi)^(-d (p + q - 1))``.
    """
    lam, lam_t = linear_frequencies(sites, xi, sigma)
    W, nb = sites.size, sites.b + sites.b_tilde
    head = lambda m: np.zeros((m, 2 * nb), dtype=np.int64)  # noqa: E731
    i = np.arange(W)
    quad_fac = np.vstack([np.c_[i, W + i], np.c_[2 * W + i, 3 * W + i]])
    pieces_rows = [np.hstack([head(2 * W), quad_fac])]
    pieces_coef = [np.concatenate([lam, lam_t]).astype(complex)]
    width = 2
    for (p, q), g in nl.coefficients.items():
        if degree_cap is not None and 2 * (p + q) > degree_cap:
            continue
        fac = _nonlinear_rows(sites, p, q)
        if len(fac) == 0:
            warnings.warn(f"window admits no zero-momentum tuple for a^{p} b^{q}; term dropped")
            continue
        c = g * (2 * math.pi) ** (-sites.d * (p + q - 1))
        pieces_rows.append(np.hstack([head(len(fac)), fac]))
        pieces_coef.append(np.full(len(fac), c, dtype=complex))
        width = max(width, fac.shape[1])
    sent = sentinel(sites)
    rows = []
    for r in pieces_rows:
        pad = width + 2 * nb - r.shape[1]
        rows.append(np.hstack([r, np.full((len(r), pad), sent)]) if pad else r)
    rows, coef = canonicalize(np.vstack(rows), np.concatenate(pieces_coef), nb, W)
    return HamiltonianSeries(sites, rows, coef, canonical=True)


@dataclass
class NormalForm:
    """N + B: tangential frequencies, normal frequencies and the u-v couplings.

    Site-indexed arrays run over the window of ``sites``; ``Omega`` is NaN
    off Z1, ``Omega_t`` NaN off Z2 and the couplings vanish off Z1 & Z2.
    ``sites`` may be None for a normal form without normal modes.
    """

    omega: np.ndarray
    omega_t: np.ndarray
    sites: SiteConfig | None = None
    Omega: np.ndarray | None = None
    Omega_t: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    energy: float = 0.0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.omega_t = np.asarray(self.omega_t, dtype=float)
        W = self.sites.size if self.sites is not None else 0
        for name, dtype in (("Omega", float), ("Omega_t", float), ("a", complex), ("b", complex)):
            v = getattr(self, name)
            if v is None:
                v = np.full(W, np.nan) if dtype is float else np.zeros(W, dtype=complex)
            v = np.asarray(v, dtype=dtype)
            if v.shape != (W,):
                raise ConfigurationError(f"{name} must have one entry per window site")
            setattr(self, name, v)

    @property
    def frequencies(self) -> np.ndarray:
        return np.concatenate([self.omega, self.omega_t])

    def delta(self, k, k_t=None) -> float:
        """<k, omega> + <k~, omega~>; ``k`` may already be the concatenated vector."""
        if k_t is None:
            return float(np.dot(np.asarray(k, dtype=float), self.frequencies))
        return float(np.dot(k, self.omega) + np.dot(k_t, self.omega_t))

    def copy(self) -> "NormalForm":
        return replace(self, omega=self.omega.copy(), omega_t=self.omega_t.copy(),
                       Omega=self.Omega.copy(), Omega_t=self.Omega_t.copy(),
                       a=self.a.copy(), b=self.b.copy())

    def site_block(self, i: int):
        """Holomorphic basis kinds, matrix A_n and its eigenvalues at window site ``i``."""
        in1 = not np.isnan(self.Omega[i])
        in2 = not np.isnan(self.Omega_t[i])
        if in1 and in2:
            A = np.array([[self.Omega[i], self.a[i]], [self.b[i], self.Omega_t[i]]], dtype=complex)
            if self.a[i] == 0 and self.b[i] == 0:
                eig = np.array([self.Omega[i], self.Omega_t[i]], dtype=complex)
            else:
                eig = _eig2(A)
            return (0, 2), A, eig
        if in1:
            return (0,), np.array([[self.Omega[i]]], dtype=complex), np.array([self.Omega[i]], dtype=complex)
        if in2:
            return (2,), np.array([[self.Omega_t[i]]], dtype=complex), np.array([self.Omega_t[i]], dtype=complex)
        raise ConfigurationError(f"site {self.sites.site(i)} is not a normal mode")

    def to_series(self, sites: SiteConfig | None = None) -> HamiltonianSeries:
        """N + B as a series (the energy constant is left out)."""
        sites = sites or self.sites
        H = HamiltonianSeries
        parts = []
        for j in range(sites.b):
            l = np.zeros(sites.b, dtype=int)
            l[j] = 1
            parts.append(H.monomial(sites, self.omega[j], l=l))
        for j in range(sites.b_tilde):
            l = np.zeros(sites.b_tilde, dtype=int)
            l[j] = 1
            parts.append(H.monomial(sites, self.omega_t[j], l_t=l))
        rows, coef = _normal_rows(self, sites)
        parts.append(H(sites, rows, coef))
        from .series import concat

        return concat(sites, parts)


def _eig2(A: np.ndarray) -> np.ndarray:
    tr = A[0, 0] + A[1, 1]
    disc = np.sqrt((A[0, 0] - A[1, 1]) ** 2 / 4 + A[0, 1] * A[1, 0])
    return np.array([tr / 2 + disc, tr / 2 - disc], dtype=complex)


def _normal_rows(nf: NormalForm, sites: SiteConfig):
    W, nb = sites.size, sites.b + sites.b_tilde
    i = np.arange(W)
    blocks, coefs = [], []
    for mask, c1, c2, val in (
        (~np.isnan(nf.Omega), 0, 1, nf.Omega),
        (~np.isnan(nf.Omega_t), 2, 3, nf.Omega_t),
        (nf.a != 0, 0, 3, nf.a),
        (nf.b != 0, 1, 2, nf.b),
    ):
        sel = i[mask]
        blocks.append(np.c_[c1 * W + sel, c2 * W + sel])
        coefs.append(np.asarray(val, dtype=complex)[mask])
    fac = np.vstack(blocks)
    rows = np.hstack([np.zeros((len(fac), 2 * nb), dtype=np.int64), fac])
    return rows, np.concatenate(coefs)


def initial_normal_form(sites: SiteConfig, xi, sigma) -> NormalForm:
    """Normal form of the unperturbed problem, without building any series."""
    lam, lam_t = linear_frequencies(sites, xi, sigma)
    omega = np.array([lam[sites.site_index(n)] for n in sites.S])
    omega_t = np.array([lam_t[sites.site_index(n)] for n in sites.S_tilde])
    Omega = np.where(sites.in_Z1, lam, np.nan)
    Omega_t = np.where(sites.in_Z2, lam_t, np.nan)
    return NormalForm(omega, omega_t, sites, Omega, Omega_t)


def action_angle_reduce(H: HamiltonianSeries, sites: SiteConfig | None = None, actions=None,
                        degree_cap: int = 4) -> tuple[NormalForm, HamiltonianSeries]:
    """Replace tangential modes by actions and angles around reference actions.

    ``u_{i_j} = sqrt(I0_j + I_j) e^{i theta_j}`` (and likewise for v with
    ``J0``).  Half-integer powers of ``I0_j + I_j`` are expanded binomially
    and truncated at ``degree_cap``; with ``I0_j = 0`` only even total
    powers are admissible.

    Parameters
    ----------
    actions : array of length b + b_t, optional
        Reference actions (I0, J0); zero when omitted.

    Returns
    -------
    nf : NormalForm with zero couplings, ``energy`` holding the constant part.
    P : perturbation in (theta, phi, I, J, u, ubar, v, vbar).
    """
    sites = sites or H.sites
    if not sites.same_as(H.sites):
        raise ConfigurationError("series and site configuration differ")
    nb, W, sent = sites.b + sites.b_tilde, sites.size, sentinel(sites)
    I0 = np.zeros(nb) if actions is None else np.asarray(actions, dtype=float)
    if I0.shape != (nb,) or np.any(I0 < 0):
        raise ConfigurationError("reference actions must be nonnegative, one per tangential site")
    if np.any(H.ang != 0) or np.any(H.act != 0):
        raise ModelError("series already contains angle or action variables")

    # quadratic part: must be diagonal
    deg = H.normal_degree()
    quad = deg == 2
    fq = H.fac[quad][:, :2].astype(np.int64)
    diag = ((fq[:, 0] // W == 0) & (fq[:, 1] == fq[:, 0] + W)) | ((fq[:, 0] // W == 2) & (fq[:, 1] == fq[:, 0] + W))
    if not np.all(diag):
        raise ModelError("quadratic part of H is not diagonal in the modes")
    lam = np.full(W, np.nan)
    lam_t = np.full(W, np.nan)
    cq = H.coef[quad]
    if np.any(np.abs(cq.imag) > 1e-12 * np.maximum(1, np.abs(cq))):
        raise ModelError("quadratic coefficients must be real")
    for (c1, _), val in zip(fq, cq.real):
        (lam if c1 < W else lam_t)[c1 % W] = val
    tang = [sites.site_index(n) for n in sites.S]
    tang_t = [sites.site_index(n) for n in sites.S_tilde]
    omega = lam[tang]
    omega_t = lam_t[tang_t]
    if np.any(np.isnan(omega)) or np.any(np.isnan(omega_t)):
        raise ModelError("tangential modes have no quadratic term")
    nf = NormalForm(omega, omega_t, sites,
                    np.where(sites.in_Z1, lam, np.nan), np.where(sites.in_Z2, lam_t, np.nan))
    nf.energy = float(np.dot(omega, I0[: sites.b]) + np.dot(omega_t, I0[sites.b:]))

    rest = ~quad
    rows = H.rows[rest].astype(np.int64)
    coef = H.coef[rest].copy()
    fac = rows[:, 2 * nb:]
    tang_codes = [(tang[j], 0) for j in range(sites.b)] + [(tang_t[j], 2) for j in range(sites.b_tilde)]
    expo = np.zeros((len(rows), nb), dtype=np.int64)
    for j, (site, kind) in enumerate(tang_codes):
        hol = fac == kind * W + site
        anti = fac == (kind + 1) * W + site
        alpha, beta = hol.sum(axis=1), anti.sum(axis=1)
        rows[:, j] += alpha - beta
        expo[:, j] = alpha + beta
        fac[hol | anti] = sent
    rows[:, 2 * nb:] = np.sort(fac, axis=1)

    for j in range(nb):
        e = expo[:, j]
        has = e > 0
        if not has.any():
            continue
        out_rows, out_coef, out_expo = [rows[~has]], [coef[~has]], [expo[~has]]
        r_h, c_h, x_h = rows[has], coef[has], expo[has]
        half = e[has] / 2.0
        if I0[j] == 0:
            if np.any(e[has] % 2):
                raise ModelError("odd tangential power with zero reference action; set actions > 0")
            r_new = r_h.copy()
            r_new[:, nb + j] += e[has] // 2
            out_rows.append(r_new)
            out_coef.append(c_h)
            out_expo.append(x_h)
        else:
            deg_h = (r_h[:, 2 * nb:] != sent).sum(axis=1) + 2 * r_h[:, nb: 2 * nb].sum(axis=1)
            for m in range(degree_cap // 2 + 1):
                ok = deg_h + 2 * m <= degree_cap
                # integer powers terminate
                ok &= ~((half == np.floor(half)) & (m > half))
                if not ok.any():
                    continue
                r_new = r_h[ok].copy()
                r_new[:, nb + j] += m
                out_rows.append(r_new)
                out_coef.append(c_h[ok] * binom(half[ok], m) * I0[j] ** (half[ok] - m))
                out_expo.append(x_h[ok])
        rows = np.vstack(out_rows)
        coef = np.concatenate(out_coef)
        expo = np.vstack(out_expo)
    rows, coef = canonicalize(rows, coef, nb, W)
    P = HamiltonianSeries(sites, rows, coef, canonical=True)
    P = P.select(P.degree() <= degree_cap)
    const = (P.degree() == 0) & (P.k_order() == 0)
    if const.any():
        nf.energy += float(P.coef[const].sum().real)
        P = P.select(~const)
    return nf, P


def block_matrix(nf: NormalForm, n, m=None, sign: str = "minus", sites: SiteConfig | None = None):
    """A_n, or A_n (x) I - I (x) A_m^T ('minus') / A_n (x) I + I (x) A_m ('plus')."""
    sites = sites or nf.sites
    i = sites.site_index(n)
    _, An, en = nf.site_block(i)
    if m is None:
        return BlockMatrix(An, en)
    j = sites.site_index(m)
    _, Am, em = nf.site_block(j)
    In, Im = np.eye(len(An)), np.eye(len(Am))
    if sign == "minus":
        M = np.kron(An, Im) - np.kron(In, Am.T)
        eig = (en[:, None] - em[None, :]).ravel()
    elif sign == "plus":
        M = np.kron(An, Im) + np.kron(In, Am)
        eig = (en[:, None] + em[None, :]).ravel()
    else:
        raise ValueError(f"sign must be 'minus' or 'plus', got {sign!r}")
    return BlockMatrix(M, eig)


@dataclass(frozen=True)
class BlockMatrix:
    """Matrix of a divisor class together with its spectrum (Kronecker sums of block spectra)."""

    matrix: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def spectrum_divisor(delta, eigenvalues) -> np.ndarray | float:
    """|det(delta I + M)| computed as |prod(delta + mu_i)| over the spectrum of M.

    ``delta`` may be an array; the product runs over the last axis of the
    broadcast ``delta[..., None] + eigenvalues``.
    """
    vals = np.asarray(delta)[..., None] + np.asarray(eigenvalues)
    return np.abs(np.prod(vals, axis=-1))


def divisor(nf: NormalForm, k, k_t, block: BlockMatrix | None = None) -> float:
    d = nf.delta(k, k_t)
    if block is None:
        return abs(d)
    return float(spectrum_divisor(d, block.eigenvalues))
