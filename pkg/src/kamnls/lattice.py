"""Integer-lattice bookkeeping: sites, mode windows, momenta and monomial signatures."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

ModeIndex = tuple[int, ...]


class ConfigurationError(ValueError):
    """Invalid site configuration or mismatched index dimensions."""


def norm(n: Iterable[int]) -> float:
    """Euclidean length of a lattice point."""
    return float(np.sqrt(sum(int(x) * int(x) for x in n)))


def norm2(n: Iterable[int]) -> int:
    return sum(int(x) * int(x) for x in n)


@dataclass(frozen=True)
class Membership:
    in_S: bool
    in_S_tilde: bool
    in_Z1: bool
    in_Z2: bool
    outside: bool


@dataclass(frozen=True, eq=False)
class SiteConfig:
    """Tangential sites of the two fields plus the finite mode window.

    The window is the sup-norm ball ``|n|_inf <= cutoff``; its points are
    enumerated in lexicographic order and that order fixes the integer
    index used everywhere else (``site_index``).
    """

    d: int
    S: tuple[ModeIndex, ...]
    S_tilde: tuple[ModeIndex, ...]
    cutoff: int
    coords: np.ndarray = field(init=False, repr=False)
    index: dict = field(init=False, repr=False)
    in_Z1: np.ndarray = field(init=False, repr=False)
    in_Z2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = tuple(tuple(int(x) for x in n) for n in self.S)
        St = tuple(tuple(int(x) for x in n) for n in self.S_tilde)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "S_tilde", St)
        problems = validate_sites(self.d, S, St, self.cutoff)
        if problems:
            raise ConfigurationError("; ".join(problems))
        rng = range(-self.cutoff, self.cutoff + 1)
        coords = np.array(list(itertools.product(rng, repeat=self.d)), dtype=np.int64)
        index = {tuple(int(x) for x in row): i for i, row in enumerate(coords)}
        sset, stset = set(S), set(St)
        z1 = np.array([tuple(row) not in sset for row in coords.tolist()])
        z2 = np.array([tuple(row) not in stset for row in coords.tolist()])
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "in_Z1", z1)
        object.__setattr__(self, "in_Z2", z2)

    @property
    def b(self) -> int:
        return len(self.S)

    @property
    def b_tilde(self) -> int:
        return len(self.S_tilde)

    @property
    def size(self) -> int:
        return len(self.coords)

    def site_index(self, n: Iterable[int]) -> int:
        key = tuple(int(x) for x in n)
        if len(key) != self.d:
            raise ConfigurationError(f"mode {key} has dimension {len(key)}, expected {self.d}")
        try:
            return self.index[key]
        except KeyError:
            raise ConfigurationError(f"mode {key} outside window |n|_inf <= {self.cutoff}") from None

    def site(self, i: int) -> ModeIndex:
        return tuple(int(x) for x in self.coords[i])

    def in_window(self, n: Iterable[int]) -> bool:
        return tuple(int(x) for x in n) in self.index

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt((self.coords**2).sum(axis=1).astype(float))

    @property
    def norms2(self) -> np.ndarray:
        return (self.coords**2).sum(axis=1)

    def tangential_coords(self) -> np.ndarray:
        """(b + b_tilde, d) array of the tangential sites, u-sites first."""
        return np.array(self.S + self.S_tilde, dtype=np.int64).reshape(-1, self.d)

    def same_as(self, other: "SiteConfig") -> bool:
        return (
            self is other
            or (
                self.d == other.d
                and self.S == other.S
                and self.S_tilde == other.S_tilde
                and self.cutoff == other.cutoff
            )
        )

    def __eq__(self, other):
        return isinstance(other, SiteConfig) and self.same_as(other)

    def __hash__(self):
        return hash((self.d, self.S, self.S_tilde, self.cutoff))


def validate_sites(d, S, S_tilde, cutoff) -> list[str]:
    """Return every violated invariant (empty list when the configuration is valid)."""
    problems = []
    if d < 2:
        problems.append(f"d must be >= 2 (got {d})")
    if len(S) < 2:
        problems.append(f"S needs at least 2 sites (got {len(S)})")
    if len(S_tilde) < 2:
        problems.append(f"S_tilde needs at least 2 sites (got {len(S_tilde)})")
    for name, sites in (("S", S), ("S_tilde", S_tilde)):
        if len(set(sites)) != len(sites):
            problems.append(f"{name} has repeated sites")
        for n in sites:
            if len(n) != d:
                problems.append(f"{name} site {n} does not have dimension {d}")
            elif max(abs(x) for x in n) > cutoff:
                problems.append(f"{name} site {n} lies outside the window")
    zero = (0,) * d
    if zero not in S or zero not in S_tilde:
        problems.append("the zero mode must belong to both S and S_tilde")
    if cutoff < 0:
        problems.append(f"cutoff must be nonnegative (got {cutoff})")
    return problems


def classify(n: Iterable[int], sites: SiteConfig) -> Membership:
    key = tuple(int(x) for x in n)
    if len(key) != sites.d:
        raise ConfigurationError(f"mode {key} has dimension {len(key)}, expected {sites.d}")
    inside = key in sites.index
    in_S = key in sites.S
    in_St = key in sites.S_tilde
    return Membership(
        in_S=in_S,
        in_S_tilde=in_St,
        in_Z1=inside and not in_S,
        in_Z2=inside and not in_St,
        outside=not inside,
    )


def _sparse(entries) -> tuple[tuple[ModeIndex, int], ...]:
    if isinstance(entries, Mapping):
        entries = entries.items()
    acc: dict[ModeIndex, int] = {}
    for n, e in entries:
        key = tuple(int(x) for x in n)
        acc[key] = acc.get(key, 0) + int(e)
    for key, e in acc.items():
        if e < 0:
            raise ConfigurationError(f"negative exponent {e} at mode {key}")
    return tuple(sorted((k, e) for k, e in acc.items() if e != 0))


@dataclass(frozen=True)
class MultiIndex:
    """Exponent signature of one Fourier-Taylor monomial.

    ``alpha``/``beta`` hold the exponents of u_n / conj(u_n) and
    ``alpha_t``/``beta_t`` those of v_n / conj(v_n), each as a sorted tuple
    of ``(mode, exponent)`` pairs so that equality and hashing are
    structural.
    """

    k: tuple[int, ...]
    k_t: tuple[int, ...]
    l: tuple[int, ...]
    l_t: tuple[int, ...]
    alpha: tuple = ()
    beta: tuple = ()
    alpha_t: tuple = ()
    beta_t: tuple = ()

    def __post_init__(self):
        for name in ("k", "k_t", "l", "l_t"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if any(x < 0 for x in self.l + self.l_t):
            raise ConfigurationError("action exponents must be nonnegative")
        for name in ("alpha", "beta", "alpha_t", "beta_t"):
            object.__setattr__(self, name, _sparse(getattr(self, name)))

    @classmethod
    def make(cls, b, b_t, *, k=None, k_t=None, l=None, l_t=None,
             alpha=(), beta=(), alpha_t=(), beta_t=()) -> "MultiIndex":
        return cls(
            k=tuple(k) if k is not None else (0,) * b,
            k_t=tuple(k_t) if k_t is not None else (0,) * b_t,
            l=tuple(l) if l is not None else (0,) * b,
            l_t=tuple(l_t) if l_t is not None else (0,) * b_t,
            alpha=alpha, beta=beta, alpha_t=alpha_t, beta_t=beta_t,
        )

    def __mul__(self, other: "MultiIndex") -> "MultiIndex":
        def add(x, y):
            return tuple(a + b for a, b in zip(x, y))

        return MultiIndex(
            add(self.k, other.k), add(self.k_t, other.k_t),
            add(self.l, other.l), add(self.l_t, other.l_t),
            self.alpha + other.alpha, self.beta + other.beta,
            self.alpha_t + other.alpha_t, self.beta_t + other.beta_t,
        )

    def conjugate(self) -> "MultiIndex":
        return MultiIndex(
            tuple(-x for x in self.k), tuple(-x for x in self.k_t), self.l, self.l_t,
            self.beta, self.alpha, self.beta_t, self.alpha_t,
        )

    @property
    def normal_degree(self) -> int:
        return sum(e for _, e in self.alpha + self.beta + self.alpha_t + self.beta_t)

    @property
    def degree(self) -> int:
        """Weighted degree: actions count twice, normal-mode factors once."""
        return 2 * (sum(self.l) + sum(self.l_t)) + self.normal_degree


def momentum(m: MultiIndex, sites: SiteConfig) -> ModeIndex:
    """Lattice momentum of a monomial; zero iff it is momentum-conserving."""
    if len(m.k) != sites.b or len(m.k_t) != sites.b_tilde:
        raise ConfigurationError(
            f"index sized ({len(m.k)}, {len(m.k_t)}) but sites have ({sites.b}, {sites.b_tilde})"
        )
    total = np.zeros(sites.d, dtype=np.int64)
    for kj, site in zip(m.k, sites.S):
        total += kj * np.asarray(site)
    for kj, site in zip(m.k_t, sites.S_tilde):
        total += kj * np.asarray(site)
    for entries, sign in ((m.alpha, 1), (m.beta, -1), (m.alpha_t, 1), (m.beta_t, -1)):
        for n, e in entries:
            if len(n) != sites.d:
                raise ConfigurationError(f"mode {n} has dimension {len(n)}, expected {sites.d}")
            total += sign * e * np.asarray(n)
    return tuple(int(x) for x in total)
