"""Command-line pipeline: build, kam, measure, check-tl, verify-torus and all."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .engine import (
    CONVERGENCE_COLUMNS,
    ContractionError,
    DivergenceError,
    KamState,
    ResidualError,
    ScheduleError,
    convergence_rows,
    initial_K,
    iterate,
)
from .homological import ResonanceError, divisor_csv_rows
from .lattice import ConfigurationError, SiteConfig
from .model import ModelError, NonlinearitySpec, action_angle_reduce, build_hamiltonian, initial_normal_form
from .resonance import CLASSES as MEASURE_CLASSES
from .resonance import ResonanceQuery, measure_excluded
from .resonance import report_text as measure_text
from .series import DomainParams, HamiltonianSeries, dumps
from .textio import csv_text, fmt
from .toeplitz import check_toeplitz
from .toeplitz import report_text as tl_text
from .torus import InstabilityError, StepSizeError, max_stable_dt, verify_torus, GalerkinNLS

EXIT_CODES = {
    cfgmod.ConfigError: 2,
    ConfigurationError: 2,
    ModelError: 2,
    ResonanceError: 3,
    DivergenceError: 4,
    ResidualError: 5,
    ContractionError: 6,
    ScheduleError: 6,
    StepSizeError: 7,
    InstabilityError: 7,
}


@dataclass
class Problem:
    cfg: dict
    sites: SiteConfig
    nl: NonlinearitySpec
    H: HamiltonianSeries
    nf: object
    P: HamiltonianSeries
    dp: DomainParams

    @property
    def xi(self):
        return self.cfg["model"]["xi"]

    @property
    def sigma(self):
        return self.cfg["model"]["sigma"]

    @property
    def actions(self):
        return self.cfg["model"]["actions"]


def build_problem(cfg: dict) -> Problem:
    s = cfg["sites"]
    sites = SiteConfig(int(s["d"]), [tuple(n) for n in s["S"]], [tuple(n) for n in s["S_tilde"]],
                       int(s["N_max"]))
    nl = NonlinearitySpec({(int(t["p"]), int(t["q"])): float(t["g"]) for t in cfg["model"]["G"]})
    cap = int(cfg["model"]["degree_cap"])
    # the cap of the reduced problem also bounds the build
    H = build_hamiltonian(sites, nl, cfg["model"]["xi"], cfg["model"]["sigma"], max(cap, 2 * nl.max_order))
    nf, P = action_angle_reduce(H, sites, actions=cfg["model"]["actions"], degree_cap=cap)
    d = cfg["domain"]
    return Problem(cfg, sites, nl, H, nf, P, DomainParams(d["r"], d["s"], d["rho"]))


def run_kam(pr: Problem):
    k = pr.cfg["kam"]
    st = KamState(pr.nf, pr.P, pr.dp, K=1, gamma=k["gamma"], tau=k["tau"], c=k["c"])
    st.K = initial_K(st.eps, k["c"])
    steps = int(k["max_steps"])
    if steps == 0:
        return st, None
    return iterate(st, steps, k["target_eps"], order_cap=k["order_cap"],
                   degree_cap=pr.cfg["model"]["degree_cap"], prune_beta=k["prune_beta"])


def _header(cfg: dict) -> str:
    return "# config " + cfgmod.canonical_json(cfg) + "\n"


def _write(out: Path, name: str, text: str, cfg: dict) -> None:
    (out / name).write_text(_header(cfg) + text)


def cmd_build(pr: Problem, out: Path) -> None:
    _write(out, "hamiltonian.txt", dumps(pr.H), pr.cfg)
    _write(out, "perturbation.txt", dumps(pr.P), pr.cfg)


def cmd_kam(pr: Problem, out: Path):
    st, rep = run_kam(pr)
    rows = convergence_rows(st.history)
    _write(out, "convergence.csv", csv_text(CONVERGENCE_COLUMNS, rows), pr.cfg)
    div_rows = []
    if rep is not None:
        for nu, log in enumerate(rep.logs):
            for r in sorted(set(divisor_csv_rows(log))):
                div_rows.append((nu,) + r)
    _write(out, "divisors.csv",
           csv_text(("nu", "class", "k", "n", "m", "sign", "divisor", "bound"), div_rows), pr.cfg)
    lines = [f"steps = {len(st.history)}", f"eps_final = {fmt(st.eps)}",
             "omega_final = " + " ".join(fmt(w) for w in st.nf.frequencies)]
    if rep is not None:
        lines.append(f"drift_sum = {fmt(rep.drift_sum)}")
        lines.append(f"converged = {int(rep.converged)}")
    _write(out, "kam_summary.txt", "\n".join(lines) + "\n", pr.cfg)
    return st


def _measure_query(pr: Problem) -> ResonanceQuery:
    m, k = pr.cfg["measure"], pr.cfg["kam"]
    K_hi = m["K_hi"]
    if K_hi is None:
        from .series import vector_field_norm

        K_hi = initial_K(vector_field_norm(pr.P, pr.dp), k["c"])
    gmax = max(m["gammas"]) if m["gammas"] else k["gamma"]
    return ResonanceQuery(gmax, k["tau"], int(m["K_lo"]), int(K_hi), pr.sites,
                          m["box"], int(m["samples"]), int(pr.cfg["seed"]), m["sampler"])


def cmd_measure(pr: Problem, out: Path):
    q = _measure_query(pr)
    b = pr.sites.b

    def builder(p):
        return initial_normal_form(pr.sites, p[:b], p[b:])

    rep = measure_excluded(q, builder, pr.cfg["measure"]["gammas"])
    rows = [(g, q.tau, q.K_lo, q.K_hi) + tuple(rep.fractions[c][i] for c in MEASURE_CLASSES) + (rep.union[i],)
            for i, g in enumerate(rep.gammas)]
    header = ("gamma", "tau", "K_lo", "K_hi") + tuple(f"fraction_{c}" for c in MEASURE_CLASSES) + ("fraction_union",)
    _write(out, "measure.csv", csv_text(header, rows), pr.cfg)
    _write(out, "measure_report.txt", measure_text(rep), pr.cfg)
    return rep


def cmd_check_tl(pr: Problem, out: Path, state: KamState | None = None):
    budget = pr.cfg["toeplitz"]["eps_budget"]
    from .series import vector_field_norm

    eps0 = vector_field_norm(pr.P, pr.dp)
    rep = check_toeplitz(pr.P, pr.dp, budget if budget is not None else eps0, pr.cfg["toeplitz"]["cap"],
                         int(pr.cfg["seed"]))
    text = "## initial perturbation\n" + tl_text(rep)
    reps = [rep]
    if state is not None and state.nu > 0:
        rep2 = check_toeplitz(state.P, state.dp, budget if budget is not None else state.eps,
                              pr.cfg["toeplitz"]["cap"], int(pr.cfg["seed"]))
        text += f"\n## perturbation after step {state.nu}\n" + tl_text(rep2)
        reps.append(rep2)
    _write(out, "tl_report.txt", text, pr.cfg)
    return reps


def cmd_verify_torus(pr: Problem, out: Path, state: KamState | None = None):
    if state is None:
        state, _ = run_kam(pr)
    t = pr.cfg["torus"]
    model = GalerkinNLS(pr.sites, pr.nl, pr.xi, pr.sigma)
    dt = t["dt"] if t["dt"] is not None else max_stable_dt(pr.sites, model)
    rng = np.random.default_rng(int(pr.cfg["seed"]))
    nb = pr.sites.b + pr.sites.b_tilde
    angles = rng.uniform(0, 2 * np.pi, (int(t["trajectories"]), nb))
    run = verify_torus(state, pr.nl, pr.xi, pr.sigma, pr.actions, 2 * t["T"], dt, angles,
                       int(t["n_samples"]), int(t["residence_points"]), t["flow_rtol"])
    res = run.trajectory.resolution
    names = [("u", n) for n in pr.sites.S] + [("v", n) for n in pr.sites.S_tilde]
    rows = []
    for (fld, n), est, w in zip(names, run.frequencies, run.predicted):
        site = "(" + " ".join(str(x) for x in n) + ")"
        rows.append((f"{fld}{site}", est.frequency, w, abs(est.frequency - w), res, int(est.conclusive)))
    _write(out, "frequencies.csv",
           csv_text(("mode", "omega_measured", "omega_predicted", "abs_diff", "resolution", "conclusive"), rows),
           pr.cfg)
    traj = run.trajectory
    idx_u = [pr.sites.site_index(n) for n in pr.sites.S]
    idx_v = [pr.sites.site_index(n) for n in pr.sites.S_tilde]
    cols = ["t"]
    for fld, n in names:
        site = "(" + " ".join(str(x) for x in n) + ")"
        cols += [f"re_{fld}{site}", f"im_{fld}{site}"]
    data = np.concatenate([traj.u[0][:, idx_u], traj.v[0][:, idx_v]], axis=1)
    trows = []
    for i, tt in enumerate(traj.times):
        row = [tt]
        for z in data[i]:
            row += [z.real, z.imag]
        trows.append(row)
    _write(out, "trajectory.csv", csv_text(cols, trows), pr.cfg)
    lines = [f"T = {fmt(t['T'])}", f"dt = {fmt(traj.dt)}", f"eps_final = {fmt(state.eps)}",
             f"energy_drift = {fmt(run.energy_drift)}", f"l2_drift = {fmt(run.l2_drift)}"]
    for h, r in run.residence.items():
        lines.append(f"action_deviation[{fmt(h * 2 * t['T'])}] = {fmt(r.action_deviation)}")
        lines.append(f"normal_mass[{fmt(h * 2 * t['T'])}] = {fmt(r.normal_mass)}")
    _write(out, "torus_report.txt", "\n".join(lines) + "\n", pr.cfg)
    return run


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamnls", description="KAM normal-form pipeline for coupled NLS lattices")
    p.add_argument("subcommand", choices=["build", "kam", "measure", "check-tl", "verify-torus", "all"])
    p.add_argument("--config", required=True, help="TOML configuration file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    return p


def run(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    overrides = {"seed": args.seed, "workers": args.workers, "kam.max_steps": args.max_steps,
                 "kam.gamma": args.gamma, "kam.tau": args.tau}
    try:
        cfg = cfgmod.load(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pr = build_problem(cfg)
        sub = args.subcommand
        if sub == "build":
            cmd_build(pr, out)
        elif sub == "kam":
            cmd_kam(pr, out)
        elif sub == "measure":
            cmd_measure(pr, out)
        elif sub == "check-tl":
            cmd_check_tl(pr, out)
        elif sub == "verify-torus":
            cmd_verify_torus(pr, out)
        else:
            cmd_build(pr, out)
            st = cmd_kam(pr, out)
            cmd_measure(pr, out)
            cmd_check_tl(pr, out, st)
            cmd_verify_torus(pr, out, st)
    except tuple(EXIT_CODES) as err:
        code = next(c for cls, c in EXIT_CODES.items() if isinstance(err, cls))
        print(f"error_class={type(err).__name__}", file=sys.stderr)
        print(str(err), file=sys.stderr)
        return code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
