"""Ray checks of second normal-mode derivatives (the Toeplitz-Lipschitz property)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .lattice import ConfigurationError
from .series import DomainParams, HamiltonianSeries, KINDS, _factor_weights, partial

# (first kind, second kind, shift sign of the second index)
CLASSES = {
    "u-u": (0, 0, -1),
    "ubar-ubar": (1, 1, -1),
    "u-v": (0, 2, -1),
    "ubar-vbar": (1, 3, -1),
    "v-v": (2, 2, -1),
    "vbar-vbar": (3, 3, -1),
    "u-ubar": (0, 1, +1),
    "u-vbar": (0, 3, +1),
    "ubar-v": (1, 2, +1),
    "v-vbar": (2, 3, +1),
}


class WindowError(ConfigurationError):
    """A shifted index left the window or is not a normal mode of the field."""


def _normal_mask(sites, kind: int) -> np.ndarray:
    return sites.in_Z1 if kind < 2 else sites.in_Z2


def ray_second_derivative(P: HamiltonianSeries, cls: str, n, m, c, t: int) -> HamiltonianSeries:
    """d^2 P / dx_{n + tc} dy_{m -+ tc} for the class ``cls`` (see ``CLASSES``)."""
    k1, k2, sgn = CLASSES[cls]
    sites = P.sites
    n, m, c = (np.asarray(v, dtype=np.int64) for v in (n, m, c))
    if not c.any():
        raise ValueError("ray direction must be nonzero")
    a, b = n + t * c, m + sgn * t * c
    for kind, site in ((k1, a), (k2, b)):
        if not sites.in_window(site):
            raise WindowError(f"shifted index {tuple(site)} outside the window")
        if not _normal_mask(sites, kind)[sites.site_index(site)]:
            raise WindowError(f"shifted index {tuple(site)} is not a normal mode of {KINDS[kind]}")
    return partial(partial(P, KINDS[k1], a), KINDS[k2], b)


@dataclass
class ClassReport:
    max_violation: float = 0.0
    worst_ratio: float = 0.0
    violation_witness: tuple | None = None
    ratio_witness: tuple | None = None
    rays: int = 0
    comparisons: int = 0


@dataclass
class TLReport:
    classes: dict
    eps_budget: float
    dp: DomainParams
    cap: int
    notes: list = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max((r.max_violation for r in self.classes.values()), default=0.0)

    @property
    def worst_ratio(self) -> float:
        return max((r.worst_ratio for r in self.classes.values()), default=0.0)


def _derivative_tables(P: HamiltonianSeries):
    """Every second derivative as sparse rows (pair index a*W + b) x (cofactor monomial)."""
    nb, W = P.nb, P.sites.size
    sent = 4 * W
    fac = P.fac.astype(np.int64)
    F = fac.shape[1]
    ents = []
    for i, j in itertools.permutations(range(F), 2):
        x, y = fac[:, i], fac[:, j]
        ok = (x != sent) & (y != sent) & (x // W <= y // W)
        if not ok.any():
            continue
        rows = P.rows[ok].astype(np.int64).copy()
        rows[:, 2 * nb + i] = sent
        rows[:, 2 * nb + j] = sent
        rows[:, 2 * nb:] = np.sort(rows[:, 2 * nb:], axis=1)
        ents.append((x[ok], y[ok], rows, P.coef[ok]))
    if not ents:
        return None
    x = np.concatenate([e[0] for e in ents])
    y = np.concatenate([e[1] for e in ents])
    rows = np.vstack([e[2] for e in ents])
    coef = np.concatenate([e[3] for e in ents])
    cof_rows, cof = np.unique(rows, axis=0, return_inverse=True)
    cof = cof.ravel()
    return x, y, cof_rows, cof, coef


def _cofactor_weights(P: HamiltonianSeries, cof_rows: np.ndarray, dp: DomainParams) -> np.ndarray:
    nb = P.nb
    w, _ = _factor_weights(P.sites, dp)
    k = np.abs(cof_rows[:, :nb]).sum(axis=1)
    l = cof_rows[:, nb: 2 * nb].sum(axis=1)
    out = np.exp(dp.r * k) * dp.s ** (2.0 * l)
    if cof_rows.shape[1] > 2 * nb:
        out = out * np.prod(w[cof_rows[:, 2 * nb:]], axis=1)
    return out


def _rays(sites, k1: int, k2: int, sgn: int, cap: int):
    """Comparisons along every valid ray: (pair at t, pair at limit, |t|, |n -+ m|, witness ids)."""
    N, d, W = sites.cutoff, sites.d, sites.size
    coords = sites.coords
    base = (2 * N + 1) ** np.arange(d - 1, -1, -1)
    small = np.abs(coords).max(axis=1) <= cap
    ok1, ok2 = _normal_mask(sites, k1), _normal_mask(sites, k2)
    n_ids = np.flatnonzero(small & ok1)
    m_ids = np.flatnonzero(small & ok2)
    cs = np.array([c for c in itertools.product(range(-cap, cap + 1), repeat=d) if any(c)],
                  dtype=np.int64).reshape(-1, d)
    ts = np.arange(-2 * N, 2 * N + 1)
    T0 = 2 * N

    def locate(start_ids, sign, ok):
        # (len(start), C, T) site index of start + sign*t*c, or -1 if invalid
        pts = coords[start_ids][:, None, None, :] + sign * ts[None, None, :, None] * cs[None, :, None, :]
        inside = (np.abs(pts) <= N).all(axis=-1)
        idx = ((np.clip(pts, -N, N) + N) * base).sum(axis=-1)
        valid = inside & ok[idx]
        return np.where(valid, idx, -1)

    A = locate(n_ids, 1, ok1)
    B = locate(m_ids, sgn, ok2)
    out = []
    for ni in range(len(n_ids)):
        a = A[ni][None]                       # (1, C, T)
        valid = (a >= 0) & (B >= 0)           # (M, C, T)
        fwd = np.cumprod(valid[..., T0:], axis=-1).sum(axis=-1) - 1
        bwd = np.cumprod(valid[..., T0::-1], axis=-1).sum(axis=-1) - 1
        t_hi, t_lo = fwd, -bwd
        has = (t_hi > t_lo)
        if not has.any():
            continue
        t_lim = np.where(t_hi >= -t_lo, t_hi, t_lo)
        mi, ci = np.nonzero(has)
        for mm, cc in zip(mi, ci):
            lo, hi, tl = int(t_lo[mm, cc]), int(t_hi[mm, cc]), int(t_lim[mm, cc])
            tt = np.array([t for t in range(lo, hi + 1) if t != tl])
            p = A[ni, cc, tt + T0] * W + B[mm, cc, tt + T0]
            q = A[ni, cc, tl + T0] * W + B[mm, cc, tl + T0]
            out.append((p, np.full(len(tt), q), np.abs(tt), np.full(len(tt), ni), np.full(len(tt), mm),
                        np.full(len(tt), cc), tt))
    if not out:
        return None
    cols = [np.concatenate([o[i] for o in out]) for i in range(7)]
    nsum = coords[n_ids[cols[3]]] - sgn * coords[m_ids[cols[4]]]
    dist = np.sqrt((nsum**2).sum(axis=1).astype(float))
    wit = (n_ids[cols[3]], m_ids[cols[4]], cs[cols[5]], cols[6])
    return cols[0], cols[1], cols[2], dist, wit, len(out)


def check_toeplitz(P: HamiltonianSeries, dp: DomainParams, eps_budget: float, cap: int = 3,
                   seed: int = 0) -> TLReport:
    """Compare ray derivatives with their largest-|t| value for all ten classes.

    The value at the largest valid |t| stands in for the ray limit.  A
    comparison at t passes when the majorant norm of the difference is at
    most (eps_budget / |t|) exp(-|n -+ m| rho); the report keeps the worst
    ratio and the largest absolute difference per class.
    """
    sites, W = P.sites, P.sites.size
    rep = TLReport({name: ClassReport() for name in CLASSES}, eps_budget, dp, cap,
                   notes=["ray limit proxied by the value at the largest valid |t|"])
    tabs = _derivative_tables(P) if len(P) else None
    rng = np.random.default_rng(seed)
    for name, (k1, k2, sgn) in CLASSES.items():
        cr = rep.classes[name]
        rays = _rays(sites, k1, k2, sgn, cap)
        if rays is None:
            continue
        p, q, tabs_t, dist, wit, nrays = rays
        cr.rays, cr.comparisons = nrays, len(p)
        if tabs is None:
            continue
        x, y, cof_rows, cof, coef = tabs
        sel = (x // W == k1) & (y // W == k2)
        if not sel.any():
            continue
        pair = (x[sel] % W) * W + y[sel] % W
        V = sparse.csr_matrix((coef[sel], (pair, cof[sel])), shape=(W * W, len(cof_rows)))
        V.sum_duplicates()
        wts = _cofactor_weights(P, cof_rows, dp)
        z = rng.standard_normal(len(cof_rows)) + 1j * rng.standard_normal(len(cof_rows))
        h = V @ z
        uniq, inv = np.unique(np.c_[p, q], axis=0, return_inverse=True)
        inv = inv.ravel()
        norms = np.zeros(len(uniq))
        differ = np.flatnonzero(h[uniq[:, 0]] != h[uniq[:, 1]])
        for s in range(0, len(differ), 20000):
            blk = differ[s: s + 20000]
            D = V[uniq[blk, 0]] - V[uniq[blk, 1]]
            D = abs(D)
            norms[blk] = D @ wts
        viol = norms[inv]
        budget = np.where(tabs_t > 0, eps_budget / np.maximum(tabs_t, 1) * np.exp(-dist * dp.rho), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(viol > 0, viol / budget, 0.0)
        i = int(np.argmax(viol))
        cr.max_violation = float(viol[i])
        cr.violation_witness = _witness(sites, wit, i)
        j = int(np.argmax(ratio))
        cr.worst_ratio = float(ratio[j])
        cr.ratio_witness = _witness(sites, wit, j)
    return rep


def _witness(sites, wit, i):
    n_ids, m_ids, cs, ts = wit
    return (sites.site(n_ids[i]), sites.site(m_ids[i]), tuple(int(v) for v in cs[i]), int(ts[i]))


def report_text(rep: TLReport) -> str:
    from .textio import fmt

    lines = ["# toeplitz-lipschitz ray check", f"eps_budget = {fmt(rep.eps_budget)}",
             f"r = {fmt(rep.dp.r)}", f"s = {fmt(rep.dp.s)}", f"rho = {fmt(rep.dp.rho)}",
             f"cap = {rep.cap}"]
    lines += [f"note = {n}" for n in rep.notes]
    lines += [f"max_violation = {fmt(rep.max_violation)}", f"worst_ratio = {fmt(rep.worst_ratio)}", "",
              "class,rays,comparisons,max_violation,worst_ratio,witness_n,witness_m,witness_c,witness_t"]
    for name, r in rep.classes.items():
        w = r.ratio_witness if r.worst_ratio > 0 else (r.violation_witness if r.max_violation > 0 else None)
        wn = ["", "", "", ""] if w is None else [_site(w[0]), _site(w[1]), _site(w[2]), str(w[3])]
        lines.append(",".join([name, str(r.rays), str(r.comparisons), fmt(r.max_violation),
                               fmt(r.worst_ratio)] + wn))
    return "\n".join(lines) + "\n"


def _site(n) -> str:
    return "(" + " ".join(str(v) for v in n) + ")"
