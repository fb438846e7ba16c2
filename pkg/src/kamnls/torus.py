"""Direct integration of the Galerkin-truncated coupled NLS and torus diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .lattice import SiteConfig
from .model import NonlinearitySpec, linear_frequencies


class StepSizeError(ValueError):
    """Time step violates the resolution guard."""


class InstabilityError(ArithmeticError):
    """The l2 norm of the solution doubled."""


GUARD = 0.1


@dataclass
class TrajectorySample:
    """Uniformly sampled trajectory; ``u``/``v`` have shape (n, W) or (batch, n, W)."""

    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    final_u: np.ndarray
    final_v: np.ndarray
    dt: float

    @property
    def resolution(self) -> float:
        """Frequency spacing 2 pi / (n * sample step) of the sampled record."""
        step = self.times[1] - self.times[0]
        return 2 * math.pi / (len(self.times) * step)


class GalerkinNLS:
    """Pseudo-spectral evaluation of the truncated coupled system on a grid.

    Modes u_n multiply the orthonormal functions (2 pi)^(-d/2) exp(i n.x); the
    grid has M points per axis with M a power of two above 2 P N, P the
    order of G, so no product aliases back into the window and the energy
    quadrature is exact.
    """

    def __init__(self, sites: SiteConfig, nl: NonlinearitySpec, xi, sigma):
        self.sites, self.nl = sites, nl
        lam, lam_t = linear_frequencies(sites, xi, sigma)
        self.lam = np.stack([lam, lam_t])                      # (2, W)
        order = max(nl.max_order, 1)
        need = 2 * order * sites.cutoff + 1
        self.M = 1 << max(need - 1, 1).bit_length()
        d, M = sites.d, self.M
        self.grid_idx = tuple((sites.coords % M).T)
        self.to_phys = (2 * math.pi) ** (-d / 2) * M**d
        self.to_mode = (2 * math.pi) ** (-d / 2) * (2 * math.pi / M) ** d
        self.cell = (2 * math.pi / M) ** d
        self._grids: dict = {}
        # G_a and G_b as (coefficient, power of a, power of b) lists
        self._da = [(g * p, p - 1, q) for (p, q), g in nl.coefficients.items() if p]
        self._db = [(g * q, p, q - 1) for (p, q), g in nl.coefficients.items() if q]

    @property
    def max_linear_frequency(self) -> float:
        return float(np.abs(self.lam).max())

    def fields(self, z: np.ndarray) -> np.ndarray:
        """Grid values of (u, v); z has shape (..., 2, W)."""
        M, d = self.M, self.sites.d
        shape = z.shape[:-1] + (M,) * d
        grid = self._grids.get(shape)
        if grid is None:
            grid = self._grids[shape] = np.zeros(shape, dtype=complex)
        grid[(Ellipsis,) + self.grid_idx] = z  # off-window entries stay zero
        return sfft.ifftn(grid, axes=tuple(range(-d, 0))) * self.to_phys

    def nonlinear(self, z: np.ndarray) -> np.ndarray:
        """Mode coefficients of (G_a u, G_b v)."""
        d = self.sites.d
        if self.nl.is_zero:
            return np.zeros_like(z)
        f = self.fields(z)
        fu, fv = f.take(0, axis=-d - 1), f.take(1, axis=-d - 1)
        a, b = np.abs(fu) ** 2, np.abs(fv) ** 2
        g = np.stack([_poly(self._da, a, b) * fu, _poly(self._db, a, b) * fv], axis=-d - 1)
        spec = sfft.fftn(g, axes=tuple(range(-d, 0)), overwrite_x=True)
        return spec[(Ellipsis,) + self.grid_idx] * self.to_mode

    def rhs(self, z: np.ndarray) -> np.ndarray:
        return 1j * (self.lam * z + self.nonlinear(z))

    def energy(self, z: np.ndarray) -> np.ndarray:
        d = self.sites.d
        lin = (self.lam * np.abs(z) ** 2).sum(axis=(-2, -1))
        if self.nl.is_zero:
            return lin
        f = self.fields(z)
        a = np.abs(f.take(0, axis=-d - 1)) ** 2
        b = np.abs(f.take(1, axis=-d - 1)) ** 2
        return lin + self.cell * self.nl.value(a, b).sum(axis=tuple(range(-d, 0)))


def _poly(terms, a, b):
    out = 0.0
    for c, p, q in terms:
        t = c
        if p:
            t = t * (a if p == 1 else a**p)
        if q:
            t = t * (b if q == 1 else b**q)
        out = out + t
    return out if not np.isscalar(out) else np.full(a.shape, out)


def max_stable_dt(sites: SiteConfig, model: GalerkinNLS) -> float:
    """Largest dt with dt (max |n|^2 + max |lambda|) <= GUARD."""
    return GUARD / (float(sites.norms2.max()) + model.max_linear_frequency)


def integrate(sites: SiteConfig, nl: NonlinearitySpec, xi, sigma, u0, v0, T: float, dt: float,
              n_samples: int = 1 << 12, model: GalerkinNLS | None = None) -> TrajectorySample:
    """Integrating-factor RK4 (Lawson) over [0, T]; negative T runs backward.

    The step is reduced so that an integer number of steps, a multiple of
    ``n_samples``, covers T exactly.  Samples are taken at t = j * T / n_samples
    for j < n_samples; the state at T is returned separately.
    """
    model = model or GalerkinNLS(sites, nl, xi, sigma)
    if n_samples < 1 or n_samples & (n_samples - 1):
        raise ValueError("n_samples must be a power of two")
    if dt <= 0:
        raise StepSizeError("dt must be positive")
    limit = max_stable_dt(sites, model)
    if dt > limit * (1 + 1e-12):
        raise StepSizeError(f"dt = {dt:.3e} exceeds the resolution guard {limit:.3e}")
    per = max(1, math.ceil(abs(T) / (dt * n_samples)))
    steps = per * n_samples
    h = T / steps
    z = np.stack([np.asarray(u0, dtype=complex), np.asarray(v0, dtype=complex)], axis=-2)
    norm0 = float(np.max((np.abs(z) ** 2).sum(axis=(-2, -1))))
    # Advance w = exp(-i lam t) z; phases come from t directly so their
    # rounding does not compound over steps.
    lam = model.lam
    w = z.copy()
    comp = np.zeros_like(w)  # Kahan compensation: increments are far below one ulp of w
    rec = np.empty((n_samples,) + z.shape, dtype=complex)
    step = 0

    def f(t, w_):
        ph = np.exp(1j * lam * t)
        return _nl(model, ph * w_) / ph

    for j in range(n_samples):
        rec[j] = np.exp(1j * lam * (step * h)) * w
        for _ in range(per):
            t0 = step * h
            k1 = f(t0, w)
            k2 = f(t0 + 0.5 * h, w + 0.5 * h * k1)
            k3 = f(t0 + 0.5 * h, w + 0.5 * h * k2)
            k4 = f(t0 + h, w + h * k3)
            inc = h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4) - comp
            nw = w + inc
            comp = (nw - w) - inc
            w = nw
            step += 1
        nrm = float(np.max((np.abs(w) ** 2).sum(axis=(-2, -1))))
        if not np.isfinite(nrm) or (norm0 > 0 and nrm > 2 * norm0):
            raise InstabilityError(f"l2 norm grew from {norm0:.3e} to {nrm:.3e}")
    z = np.exp(1j * lam * T) * w
    rec = np.moveaxis(rec, 0, -3)  # (..., n, 2, W)
    times = np.arange(n_samples) * (T / n_samples)
    return TrajectorySample(times, rec[..., 0, :], rec[..., 1, :], z[..., 0, :], z[..., 1, :], h)


def _nl(model: GalerkinNLS, z):
    return 1j * model.nonlinear(z)


@dataclass
class FrequencyEstimate:
    frequency: float
    amplitude: float
    peak_ratio: float
    conclusive: bool


def extract_frequency(t: np.ndarray, z: np.ndarray, min_ratio: float = 3.0) -> FrequencyEstimate:
    """Dominant frequency of z(t) ~ A exp(i w t).

    Hann-windowed FFT peak, quadratic refinement of the peak bin, then a
    linear fit to the unwrapped phase of the demodulated signal.
    """
    n = len(t)
    step = t[1] - t[0]
    win = np.hanning(n)
    spec = np.fft.fft(z * win)
    mag = np.abs(spec)
    freqs = 2 * math.pi * np.fft.fftfreq(n, step)
    i = int(np.argmax(mag))
    background = float(np.median(mag))
    ratio = float(mag[i] / background) if background > 0 else (math.inf if mag[i] > 0 else 0.0)
    if ratio < min_ratio:
        return FrequencyEstimate(math.nan, 0.0, ratio, False)
    a, b, c = mag[i - 1], mag[i], mag[(i + 1) % n]
    den = a - 2 * b + c
    shift = 0.5 * (a - c) / den if den != 0 else 0.0
    w0 = freqs[i] + shift * 2 * math.pi / (n * step)
    demod = z * np.exp(-1j * w0 * t)
    phase = np.unwrap(np.angle(demod))
    slope, _ = np.polyfit(t - t[0], phase, 1, w=np.sqrt(win + 1e-3))
    w = w0 + slope
    amp = float(np.abs(np.mean(z * np.exp(-1j * w * t))))
    return FrequencyEstimate(float(w), amp, ratio, True)


def extract_frequencies(traj: TrajectorySample, modes_of_interest, min_ratio: float = 3.0):
    """Per requested (field, site index) pair, the dominant frequency estimate.

    ``field`` is 'u' or 'v'; single (non-batched) trajectories only.
    """
    out = []
    for fld, idx in modes_of_interest:
        z = (traj.u if fld == "u" else traj.v)[..., idx]
        if z.ndim != 1:
            raise ValueError("extract_frequencies expects a single trajectory")
        out.append(extract_frequency(traj.times, z, min_ratio))
    return out


@dataclass
class Residence:
    action_deviation: float
    normal_mass: float


def torus_residence(traj: TrajectorySample, sites: SiteConfig, actions) -> Residence:
    """max_t | |u_{i_j}|^2 - I_j | over tangential sites and max_t of the normal-mode mass."""
    actions = np.asarray(actions, dtype=float)
    b = sites.b
    u_idx = [sites.site_index(n) for n in sites.S]
    v_idx = [sites.site_index(n) for n in sites.S_tilde]
    dev_u = np.abs(np.abs(traj.u[..., u_idx]) ** 2 - actions[:b])
    dev_v = np.abs(np.abs(traj.v[..., v_idx]) ** 2 - actions[b:])
    dev = max(float(dev_u.max()), float(dev_v.max()))
    mass = (np.abs(traj.u) ** 2 * sites.in_Z1).sum(axis=-1) + (np.abs(traj.v) ** 2 * sites.in_Z2).sum(axis=-1)
    return Residence(dev, float(mass.max()))


# ---- torus data from the KAM state ------------------------------------------

def reduced_to_physical(pt, sites: SiteConfig, actions):
    """Mode amplitudes (u, v) from reduced coordinates (angles, actions, normal modes).

    Tangential amplitudes are sqrt(I0_j + I_j) exp(i theta_j); normal modes are
    copied.  Leading batch dimensions are kept.
    """
    actions = np.asarray(actions, dtype=float)
    b = sites.b
    modes = np.asarray(pt.modes)
    u = np.where(sites.in_Z1, modes[..., 0, :], 0).astype(complex)
    v = np.where(sites.in_Z2, modes[..., 2, :], 0).astype(complex)
    amp = np.sqrt((actions + np.real(pt.actions)).astype(complex)) * np.exp(1j * np.real(pt.angles))
    for j, n in enumerate(sites.S):
        u[..., sites.site_index(n)] = amp[..., j]
    for j, n in enumerate(sites.S_tilde):
        v[..., sites.site_index(n)] = amp[..., b + j]
    return u, v


def physical_to_reduced(u, v, sites: SiteConfig, actions):
    """Inverse of ``reduced_to_physical`` for real data."""
    from .series import PhasePoint

    actions = np.asarray(actions, dtype=float)
    tang = np.concatenate([u[..., [sites.site_index(n) for n in sites.S]],
                           v[..., [sites.site_index(n) for n in sites.S_tilde]]], axis=-1)
    ang = np.angle(tang)
    act = np.abs(tang) ** 2 - actions
    un = np.where(sites.in_Z1, u, 0)
    vn = np.where(sites.in_Z2, v, 0)
    modes = np.stack([un, np.conj(un), vn, np.conj(vn)], axis=-2)
    return PhasePoint(ang.astype(complex), act.astype(complex), modes)


@dataclass
class TorusRun:
    trajectory: TrajectorySample
    frequencies: list          # FrequencyEstimate per tangential mode (first trajectory)
    predicted: np.ndarray
    residence: dict            # horizon label -> Residence in KAM coordinates
    residence_physical: dict   # horizon label -> Residence of the raw amplitudes
    energy_drift: float
    l2_drift: float


def verify_torus(state, nl: NonlinearitySpec, xi, sigma, actions, T: float, dt: float,
                 angles: np.ndarray, n_samples: int = 1 << 12, residence_points: int = 256,
                 flow_rtol: float = 1e-12, horizons=(0.5, 1.0)) -> TorusRun:
    """Integrate from KAM torus data and measure frequencies and residence.

    The torus {I = 0, normal modes = 0} in the final coordinates is pulled back
    through the generating functions of ``state`` at each initial angle in
    ``angles`` (shape (B, b + b_tilde)).  Residence is measured after pushing
    trajectory samples forward into the final coordinates; ``horizons`` are
    fractions of T over which the maxima are taken.
    """
    from .engine import pull_back, push_forward
    from .series import PhasePoint

    sites = state.sites
    W, nb = sites.size, sites.b + sites.b_tilde
    angles = np.atleast_2d(np.asarray(angles, dtype=float))
    B = len(angles)
    y = PhasePoint(angles.astype(complex), np.zeros((B, nb), complex), np.zeros((B, 4, W), complex))
    x = pull_back(state.flows, y, rtol=flow_rtol)
    u0, v0 = reduced_to_physical(x, sites, actions)
    model = GalerkinNLS(sites, nl, xi, sigma)
    traj = integrate(sites, nl, xi, sigma, u0, v0, T, dt, n_samples, model)
    z0 = np.stack([u0, v0], axis=-2)
    zT = np.stack([traj.final_u, traj.final_v], axis=-2)
    e0, eT = model.energy(z0), model.energy(zT)
    energy_drift = float(np.max(np.abs(eT - e0) / np.maximum(np.abs(e0), 1e-300)))
    n0 = (np.abs(z0) ** 2).sum(axis=(-2, -1))
    l2_drift = float(np.max(np.abs((np.abs(zT) ** 2).sum(axis=(-2, -1)) - n0) / n0))

    first_u, first_v = traj.u[0], traj.v[0]
    single = TrajectorySample(traj.times, first_u, first_v, traj.final_u[0], traj.final_v[0], traj.dt)
    modes = [("u", sites.site_index(n)) for n in sites.S] + [("v", sites.site_index(n)) for n in sites.S_tilde]
    freqs = extract_frequencies(single, modes)

    stride = max(1, n_samples // residence_points)
    pick = np.arange(0, n_samples, stride)
    times = traj.times[pick]
    us, vs = traj.u[:, pick], traj.v[:, pick]
    kam = push_forward(state.flows, physical_to_reduced(us.reshape(-1, W), vs.reshape(-1, W), sites, actions),
                       rtol=flow_rtol)
    I = np.abs(np.real(kam.actions)).reshape(B, len(pick), nb)
    mass = (np.abs(kam.modes[:, 0]) ** 2 * sites.in_Z1 + np.abs(kam.modes[:, 2]) ** 2 * sites.in_Z2).sum(axis=-1)
    mass = mass.reshape(B, len(pick))
    residence, residence_phys = {}, {}
    for h in horizons:
        sel = times <= h * abs(T) + 1e-9
        residence[h] = Residence(float(I[:, sel].max()), float(mass[:, sel].max()))
        sub = TrajectorySample(times[sel], us[:, sel], vs[:, sel], traj.final_u, traj.final_v, traj.dt)
        residence_phys[h] = torus_residence(sub, sites, actions)
    return TorusRun(traj, freqs, state.nf.frequencies.copy(), residence, residence_phys,
                    energy_drift, l2_drift)
