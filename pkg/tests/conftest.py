from __future__ import annotations

import numpy as np
import pytest

from kamnls.engine import KamState, initial_K, iterate
from kamnls.lattice import SiteConfig
from kamnls.model import NonlinearitySpec, action_angle_reduce, build_hamiltonian
from kamnls.series import DomainParams, HamiltonianSeries, concat

XI = [0.1, 0.37]
SIGMA = [0.23, 0.61]
ACTIONS = [0.04] * 4
G_AB = 5e-6


@pytest.fixture(scope="session")
def sites():
    return SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 3)


@pytest.fixture(scope="session")
def small_sites():
    return SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 1)


@pytest.fixture(scope="session")
def nl():
    return NonlinearitySpec({(1, 1): G_AB})


@pytest.fixture(scope="session")
def dp():
    return DomainParams(0.5, 0.1, 0.5)


@pytest.fixture(scope="session")
def desk_H(sites, nl):
    return build_hamiltonian(sites, nl, XI, SIGMA, 4)


@pytest.fixture(scope="session")
def desk_reduced(sites, desk_H):
    return action_angle_reduce(desk_H, sites, actions=ACTIONS, degree_cap=4)


@pytest.fixture(scope="session")
def desk_state(desk_reduced, dp):
    nf, P = desk_reduced
    st = KamState(nf, P, dp, K=1)
    st.K = initial_K(st.eps)
    return st


@pytest.fixture(scope="session")
def desk_run(desk_state):
    """Three KAM steps on the reference problem (shared, about 4 s)."""
    return iterate(desk_state, 3, 1e-30)


def random_series(sites, rng, n_terms=6, max_k=2, max_l=1, max_f=3, zero_momentum=False):
    """Random sparse series; with ``zero_momentum`` every term is made momentum-free."""
    parts = []
    nb = sites.b + sites.b_tilde
    tang = sites.tangential_coords()
    pools = {"u": np.flatnonzero(sites.in_Z1), "v": np.flatnonzero(sites.in_Z2)}
    pools["ubar"], pools["vbar"] = pools["u"], pools["v"]
    kinds = ("u", "ubar", "v", "vbar")
    sign = {"u": 1, "ubar": -1, "v": 1, "vbar": -1}
    while len(parts) < n_terms:
        k = rng.integers(-max_k, max_k + 1, nb)
        l = rng.integers(0, max_l + 1, nb)
        facs = {kd: [] for kd in kinds}
        mom = k @ tang
        for _ in range(rng.integers(0, max_f + 1)):
            kd = kinds[rng.integers(4)]
            n = sites.site(int(rng.choice(pools[kd])))
            facs[kd].append(n)
            mom = mom + sign[kd] * np.asarray(n)
        if zero_momentum and mom.any():
            # close the momentum with one extra factor when it fits the window
            n = tuple(int(x) for x in -mom)
            if not sites.in_window(n):
                continue
            i = sites.site_index(n)
            if sites.in_Z1[i]:
                facs["u"].append(n)
            elif sites.in_Z2[i]:
                facs["v"].append(n)
            else:
                continue
        c = complex(rng.standard_normal(), rng.standard_normal())
        parts.append(HamiltonianSeries.monomial(sites, c, k=k[: sites.b], k_t=k[sites.b:],
                                                l=l[: sites.b], l_t=l[sites.b:], **facs))
    return concat(sites, parts)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def verdict(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
