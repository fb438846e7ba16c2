"""Sampled measure of the parameter sets where a small-divisor condition fails."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .lattice import SiteConfig
from .model import NormalForm, spectrum_divisor

CLASSES = ("scalar", "block", "minus", "plus")


def l1_annulus(nb: int, K_lo: int, K_hi: int) -> np.ndarray:
    """All k in Z^nb with K_lo < |k|_1 <= K_hi, ordered by |k|_1 then lexicographically."""
    if K_hi < 0:
        return np.zeros((0, nb), dtype=np.int64)
    rng = range(-K_hi, K_hi + 1)
    pts = np.array(list(itertools.product(rng, repeat=nb)), dtype=np.int64).reshape(-1, nb)
    l1 = np.abs(pts).sum(axis=1)
    pts = pts[(l1 > K_lo) & (l1 <= K_hi)]
    order = np.lexsort(tuple(pts.T[::-1]) + (np.abs(pts).sum(axis=1),))
    return pts[order]


@dataclass
class ResonanceQuery:
    """One annulus K_lo < |k| + |k~| <= K_hi of the divisor conditions, over a parameter box.

    ``window`` may be None when the normal form has no normal modes; only
    the scalar class is then tested.
    """

    gamma: float
    tau: float
    K_lo: int
    K_hi: int
    window: SiteConfig | None
    box: list
    samples: int = 10_000
    seed: int = 0
    sampler: str = "halton"

    def __post_init__(self):
        self.box = [(float(a), float(b)) for a, b in self.box]
        if not self.box or any(not b > a for a, b in self.box):
            raise ValueError("parameter box must be a nonempty product of intervals")
        if not self.K_lo < self.K_hi:
            raise ValueError("need K_lo < K_hi")
        if self.gamma < 0 or self.tau <= 0:
            raise ValueError("gamma must be nonnegative and tau positive")
        if self.sampler not in ("halton", "lattice", "random"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def bound(self) -> float:
        return self.gamma / max(self.K_hi, 1) ** self.tau

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.box]))


def sample_points(q: ResonanceQuery) -> np.ndarray:
    """Deterministic sample of the box (scrambled Halton by default)."""
    D = len(q.box)
    lo = np.array([a for a, _ in q.box])
    hi = np.array([b for _, b in q.box])
    if q.sampler == "halton":
        u = qmc.Halton(D, scramble=True, seed=q.seed).random(q.samples)
    elif q.sampler == "random":
        u = np.random.default_rng(q.seed).random((q.samples, D))
    else:
        per = max(1, round(q.samples ** (1.0 / D)))
        axis = (np.arange(per) + 0.5) / per
        u = np.array(list(itertools.product(axis, repeat=D)))
    return lo + u * (hi - lo)


@dataclass
class Spectra:
    """Distinct spectra of the block conditions at one parameter point."""

    cls: list                 # class name per spectrum
    eig: list                 # eigenvalue arrays
    witness: list             # (n, m) per spectrum


def block_spectra(nf: NormalForm, window: SiteConfig | None, include_zero_k: bool = False) -> Spectra:
    """Spectra for the single-block, minus-pair and plus-pair classes.

    Pairs sharing a spectrum are merged (the first pair in window order is
    kept as witness).  Minus pairs with |n| = |m| are kept separately when
    ``include_zero_k`` so the caller can skip them at k = 0.
    """
    out = Spectra([], [], [])
    if window is None:
        return out
    normal = [i for i in range(window.size) if window.in_Z1[i] or window.in_Z2[i]]
    eigs = [nf.site_block(i)[2] for i in normal]
    norms2 = window.norms2
    seen = set()

    def add(cls, e, wit, tag=()):
        key = (cls, tag, e.tobytes())
        if key not in seen:
            seen.add(key)
            out.cls.append(cls)
            out.eig.append(e)
            out.witness.append(wit)

    for i, e in zip(normal, eigs):
        add("block", e, (window.site(i), None))
    for (i, ei), (j, ej) in itertools.product(list(zip(normal, eigs)), repeat=2):
        wit = (window.site(i), window.site(j))
        same = bool(norms2[i] == norms2[j]) if include_zero_k else False
        add("minus", (ei[:, None] - ej[None, :]).ravel(), wit, ("same",) if same else ())
        add("plus", (ei[:, None] + ej[None, :]).ravel(), wit)
    return out


def _point_minima(ks, delta, spectra: Spectra, screen: float, zero_rows: np.ndarray):
    """Minimum divisor per class over all k; block classes only via screened candidates."""
    minima = {c: np.inf for c in CLASSES}
    witness = {c: None for c in CLASSES}
    nz = ~zero_rows
    if nz.any():
        ad = np.abs(delta[nz])
        i = int(np.argmin(ad))
        minima["scalar"] = float(ad[i])
        witness["scalar"] = (tuple(int(x) for x in ks[nz][i]), None, None)
    if not spectra.eig:
        return minima, witness
    # flatten the spectra; a product below B needs one factor below B^(1/len)
    sid = np.concatenate([np.full(len(e), s) for s, e in enumerate(spectra.eig)])
    re = np.concatenate([np.real(e) for e in spectra.eig])
    order = np.argsort(re, kind="stable")
    sid, re = sid[order], re[order]
    lo = np.searchsorted(re, -delta - screen, "left")
    hi = np.searchsorted(re, -delta + screen, "right")
    cnt = hi - lo
    if cnt.sum() == 0:
        return minima, witness
    kidx = np.repeat(np.arange(len(delta)), cnt)
    pos = np.concatenate([np.arange(a, b) for a, b in zip(lo[cnt > 0], hi[cnt > 0])])
    cand = np.unique(np.c_[kidx, sid[pos]], axis=0)
    for kk, s in cand:
        cls = spectra.cls[s]
        if zero_rows[kk] and cls == "minus" and _same_norm(spectra, s):
            continue  # k = 0 and |n| = |m|: not a condition
        val = float(spectrum_divisor(delta[kk], spectra.eig[s]))
        if val < minima[cls]:
            minima[cls] = val
            n, m = spectra.witness[s]
            witness[cls] = (tuple(int(x) for x in ks[kk]), n, m)
    return minima, witness


def _same_norm(spectra: Spectra, s: int) -> bool:
    n, m = spectra.witness[s]
    return m is not None and sum(x * x for x in n) == sum(x * x for x in m)


@dataclass
class ResonanceReport:
    gammas: list
    fractions: dict            # class -> list of fractions, one per gamma
    union: list
    samples: int
    min_divisor: float
    median_divisor: float
    seed: int
    sampler: str
    query: ResonanceQuery | None = None
    extra: dict = field(default_factory=dict)

    def fraction(self, cls: str, gamma_index: int = 0) -> float:
        return self.fractions[cls][gamma_index]


def _scan(q: ResonanceQuery, nf_builder: Callable, gammas: list):
    pts = sample_points(q)
    ks = l1_annulus(len(q.box), q.K_lo, q.K_hi)
    zero_rows = ~ks.any(axis=1)
    g_max = max(gammas) if gammas else 0.0
    B_max = g_max / max(q.K_hi, 1) ** q.tau
    mins = np.full((len(pts), len(CLASSES)), np.inf)
    firsts = []
    spectra_cache = None
    for p_i, p in enumerate(pts):
        nf = nf_builder(p)
        if ks.shape[1] != len(nf.frequencies):
            raise ValueError("box dimension must equal the number of tangential frequencies")
        if spectra_cache is None or not _static(nf, spectra_cache[0]):
            spectra = block_spectra(nf, q.window, include_zero_k=bool(zero_rows.any()))
            spectra_cache = (nf, spectra)
        spectra = spectra_cache[1]
        delta = ks.astype(float) @ nf.frequencies
        screen = B_max ** (1.0 / max((len(e) for e in spectra.eig), default=1)) if B_max > 0 else 0.0
        minima, wit = _point_minima(ks, delta, spectra, screen, zero_rows)
        mins[p_i] = [minima[c] for c in CLASSES]
        firsts.append(wit)
    return pts, mins, firsts


def _static(nf: NormalForm, ref: NormalForm) -> bool:
    """True when the normal-mode blocks of ``nf`` equal those of ``ref`` (spectra reusable)."""
    return (np.array_equal(nf.Omega, ref.Omega, equal_nan=True)
            and np.array_equal(nf.Omega_t, ref.Omega_t, equal_nan=True)
            and np.array_equal(nf.a, ref.a) and np.array_equal(nf.b, ref.b))


def measure_excluded(q: ResonanceQuery, nf_builder: Callable, gammas: list | None = None) -> ResonanceReport:
    """Fraction of sampled parameters violating each condition class.

    Several gamma values (each at most ``q.gamma`` unless listed explicitly)
    are evaluated from a single scan of the samples.
    """
    if q.samples < 100:
        raise ValueError("need at least 100 samples")
    gammas = [q.gamma] if gammas is None else [float(g) for g in gammas]
    pts, mins, _ = _scan(q, nf_builder, gammas)
    fractions = {c: [] for c in CLASSES}
    union = []
    Kt = max(q.K_hi, 1) ** q.tau
    for g in gammas:
        hit = mins < g / Kt
        for j, c in enumerate(CLASSES):
            fractions[c].append(float(hit[:, j].mean()))
        union.append(float(hit.any(axis=1).mean()))
    scalar = mins[:, 0]
    finite = scalar[np.isfinite(scalar)]
    return ResonanceReport(
        gammas=gammas, fractions=fractions, union=union, samples=len(pts),
        min_divisor=float(np.nanmin(mins)) if np.isfinite(mins).any() else float("inf"),
        median_divisor=float(np.median(finite)) if len(finite) else float("inf"),
        seed=q.seed, sampler=q.sampler, query=q,
    )


def is_resonant(point, q: ResonanceQuery, nf_builder: Callable):
    """Classify one parameter point: ``("clear",)`` or ``("resonant", cls, k, n, m)``.

    Classes are checked in the order scalar, block, minus, plus; within a
    class the witness with the smallest divisor is reported.
    """
    nf = nf_builder(np.asarray(point, dtype=float))
    ks = l1_annulus(len(nf.frequencies), q.K_lo, q.K_hi)
    zero_rows = ~ks.any(axis=1)
    spectra = block_spectra(nf, q.window, include_zero_k=bool(zero_rows.any()))
    B = q.bound
    delta = ks.astype(float) @ nf.frequencies
    screen = B ** (1.0 / max((len(e) for e in spectra.eig), default=1)) if B > 0 else 0.0
    minima, wit = _point_minima(ks, delta, spectra, screen, zero_rows)
    for c in CLASSES:
        if minima[c] < B:
            k, n, m = wit[c]
            return ("resonant", c, k, n, m)
    return ("clear",)


def analytic_slice_builder(xi_offset: float = 0.0, far: float = 10.0):
    """One tangential frequency per field: omega = xi, omega~ = far + sigma (never small)."""

    def build(p):
        return NormalForm(np.array([p[0] + xi_offset]), np.array([far + p[1]]))

    return build


def report_text(rep: ResonanceReport) -> str:
    """Key-value report followed by a per-class table."""
    from .textio import fmt

    q = rep.query
    lines = ["# resonance measure"]
    if q is not None:
        lines += [f"tau = {fmt(q.tau)}", f"K_lo = {q.K_lo}", f"K_hi = {q.K_hi}",
                  "box = " + " ".join(f"[{fmt(a)},{fmt(b)}]" for a, b in q.box)]
    lines += [f"samples = {rep.samples}", f"sampler = {rep.sampler}", f"seed = {rep.seed}",
              f"min_divisor = {fmt(rep.min_divisor)}", f"median_scalar_divisor = {fmt(rep.median_divisor)}",
              "", "gamma," + ",".join(CLASSES) + ",union"]
    for i, g in enumerate(rep.gammas):
        lines.append(",".join([fmt(g)] + [fmt(rep.fractions[c][i]) for c in CLASSES] + [fmt(rep.union[i])]))
    return "\n".join(lines) + "\n"
