"""Closed-form references for the worked examples, bound verifiers,
decay-rate fitting, and invariant-measure multiplicity diagnostics."""

import math
from dataclasses import dataclass, field

import numpy as np

from mkvsim.ensemble import StatsTrajectory, simulate_batch
from mkvsim.eberle import w1_sorted
from mkvsim.model import ConstantsLedger, ModelSpec
from scipy.optimize import brentq
from scipy.special import ndtri


class AnalyticsError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Decay-rate fitting
# ---------------------------------------------------------------------------


@dataclass
class DecayFit:
    rate: float  # 1/time; positive = decaying
    intercept: float  # fitted log value at t = 0
    rms_residual: float
    window: tuple


def fit_decay(times, values, window: tuple | None = None) -> DecayFit:
    """Least-squares line on (t, log values); rate is minus the slope.

    The series must be strictly positive on the fit window.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    lo, hi = window
    if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12:
        raise ValueError(f"fit window {window} outside recorded times [{t[0]}, {t[-1]}]")
    mask = (t >= lo) & (t <= hi)
    if mask.sum() < 2:
        raise ValueError("fit window contains fewer than two points")
    tw, yw = t[mask], y[mask]
    if np.any(yw <= 0):
        raise ValueError("series must be strictly positive on the fit window")
    logy = np.log(yw)
    slope, intercept = np.polyfit(tw, logy, 1)
    resid = logy - (slope * tw + intercept)
    return DecayFit(
        rate=float(-slope),
        intercept=float(intercept),
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        window=(float(lo), float(hi)),
    )


# ---------------------------------------------------------------------------
# Bound reports
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    bound_name: str
    times: np.ndarray
    observed: np.ndarray
    bound: np.ndarray
    tolerance: float
    params: dict = field(default_factory=dict)

    @property
    def margins(self) -> np.ndarray:
        return self.bound - self.observed

    @property
    def violations(self) -> int:
        return int(np.sum(self.margins < -self.tolerance))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        worst = float(np.min(self.margins))
        status = "pass" if self.passed else "FAIL"
        lines = [
            f"[{status}] {self.bound_name}: {self.violations} violations over "
            f"{len(self.times)} recorded times (worst margin {worst:.3e}, "
            f"tolerance {self.tolerance:g})"
        ]
        for key, val in self.params.items():
            lines.append(f"    {key} = {val}")
        return "\n".join(lines)


def bound_report_to_csv(report: BoundReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,observed,bound,margin\n")
        m = report.margins
        for k in range(len(report.times)):
            fh.write(
                ",".join(
                    f"{v:.17g}"
                    for v in (report.times[k], report.observed[k], report.bound[k], m[k])
                )
                + "\n"
            )


def verify_variance_bound(
    traj: StatsTrajectory,
    ledger: ConstantsLedger,
    d: int,
    sigma: float,
    N: int,
    tolerance: float = 0.0,
) -> BoundReport:
    """Check ``v(t) <= v(0) e^{-2 c_alpha t} + d sigma^2 / c_alpha + 5 v(t)/sqrt(N)``
    at every recorded time.  The last term is the Monte-Carlo slack for the
    N-particle estimate of the conditional variance."""
    c = ledger.c_alpha
    if c <= 0:
        raise ValueError(f"variance bound requires c_alpha > 0, got {c}")
    t = traj.times
    bound = traj.v[0] * np.exp(-2.0 * c * t) + d * sigma**2 / c + 5.0 * traj.v / math.sqrt(N)
    return BoundReport(
        bound_name="variance-bound",
        times=t,
        observed=traj.v,
        bound=bound,
        tolerance=tolerance,
        params={"c_alpha": c, "d": d, "sigma": sigma, "N": N, "v0": float(traj.v[0])},
    )


# ---------------------------------------------------------------------------
# Closed-form references
# ---------------------------------------------------------------------------


def ou_variant_reference(a: float, sigma: float, sigma0: float, t, v0: float = 0.0, y0: float = 0.0):
    """Moments of the linear-pull model with zero mean forcing.

    Returns ``(mean_law, conditional_variance)`` where ``mean_law`` is the
    (mean, variance) pair of the Gaussian law of the ensemble mean and the
    conditional variance is ``(sigma^2/2a)(1 - e^{-2at}) + v0 e^{-2at}``.
    """
    if a <= 0:
        raise ValueError("a must be > 0")
    t = np.asarray(t, dtype=float)
    decay2 = np.exp(-2.0 * a * t)
    mean_mean = y0 * np.exp(-a * t)
    mean_var = sigma0**2 / (2.0 * a) * (1.0 - decay2)
    cond_var = sigma**2 / (2.0 * a) * (1.0 - decay2) + v0 * decay2
    return (mean_mean, mean_var), cond_var


def counterexample_reference(sigma_of_v, sigma0: float, v0: float, T: float, dt_ode: float = 1e-4):
    """RK4 reference for the variance ODE ``v' = -2v + sigma(v)^2 / 2`` plus
    the law of the ensemble mean (zero-mean Gaussian, variance
    ``(sigma0^2/2)(1 - e^{-2t})``).

    Returns ``(times, v, mu1_variance)`` arrays on the ODE mesh.
    """
    if v0 < 0:
        raise ValueError("v0 must be >= 0")
    n = max(1, round(T / dt_ode))

    def rhs(v):
        return -2.0 * v + 0.5 * float(sigma_of_v(v)) ** 2

    v = float(v0)
    out = np.empty(n + 1)
    out[0] = v
    for k in range(n):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * dt_ode * k1)
        k3 = rhs(v + 0.5 * dt_ode * k2)
        k4 = rhs(v + dt_ode * k3)
        v = v + dt_ode / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(v) or abs(v) > 1e12:
            raise AnalyticsError(f"variance ODE blow-up at t = {(k + 1) * dt_ode:g}")
        out[k + 1] = v
    times = np.arange(n + 1) * dt_ode
    mu1_var = sigma0**2 / 2.0 * (1.0 - np.exp(-2.0 * times))
    return times, out, mu1_var


def variance_fixed_points(sigma_of_v, lo: float = 0.0, hi: float = 10.0, n_grid: int = 4001):
    """Equilibria of the variance ODE by sign-change bisection on
    ``-2v + sigma(v)^2 / 2``."""
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([-2.0 * v + 0.5 * float(sigma_of_v(v)) ** 2 for v in grid])
    roots = []
    for i in range(n_grid - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(
                float(
                    brentq(
                        lambda v: -2.0 * v + 0.5 * float(sigma_of_v(v)) ** 2,
                        grid[i],
                        grid[i + 1],
                    )
                )
            )
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    out = []
    for r in roots:
        if not out or abs(r - out[-1]) > 1e-9:
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# Multiplicity diagnostics
# ---------------------------------------------------------------------------


@dataclass
class OccupancyReport:
    times: np.ndarray
    wells: list
    radius: float
    fractions: np.ndarray  # (K, W): fraction of runs with mu1 within radius of each well
    merge_std: np.ndarray  # (K,): across-realization std of mu1


def basin_occupancy(runs: list, wells: list, radius: float) -> OccupancyReport:
    """Per-time well-occupancy fractions of the run means, plus the merge
    statistic (across-realization standard deviation of mu1); d = 1."""
    if not runs:
        raise ValueError("runs must be non-empty")
    times = runs[0].times
    for run in runs[1:]:
        if len(run.times) != len(times) or not np.allclose(run.times, times):
            raise ValueError("all runs must share the recorded time grid")
    mu = np.stack([run.mu1[:, 0] for run in runs])  # (M, K)
    fractions = np.stack(
        [np.mean(np.abs(mu - w) <= radius, axis=0) for w in wells], axis=1
    )
    return OccupancyReport(
        times=times,
        wells=list(wells),
        radius=radius,
        fractions=fractions,
        merge_std=mu.std(axis=0),
    )


# ---------------------------------------------------------------------------
# Semigroup gap with a 1-Lipschitz functional catalog
# ---------------------------------------------------------------------------

_CLIP = 10.0


def phi_clipped_mean(positions: np.ndarray) -> float:
    """Ensemble mean clipped to +-10; 1-Lipschitz for the transport distance."""
    return float(np.clip(positions.mean(), -_CLIP, _CLIP))


def phi_clipped_w1(positions: np.ndarray) -> float:
    """Clipped 1-Wasserstein distance to a fixed standard-normal reference
    (quantile comb matched to the sample size); 1-Lipschitz by the triangle
    inequality."""
    x = positions.ravel()
    n = len(x)
    ref = ndtri((np.arange(n) + 0.5) / n)
    return float(min(w1_sorted(x, ref), _CLIP))


PHI_CATALOG = {
    "clipped_mean": phi_clipped_mean,
    "clipped_w1": phi_clipped_w1,
}


def semigroup_gap(
    model: ModelSpec,
    phi: str,
    init_a: tuple,
    init_b: tuple,
    N: int,
    M: int,
    T: float,
    dt: float,
    master_seed: int,
    record_every: int = 1,
    workers: int = 1,
    realization_offset_b: int | None = None,
):
    """``|avg_a phi(m_t) - avg_b phi(m_t)|`` over time, from M realizations per
    initial law with common noise independent across the two batches (batch b
    uses realization indices offset by M; pass ``realization_offset_b=0`` to
    deliberately reuse batch a's streams as a sanity mode).

    ``phi`` names a catalog functional.  Returns ``(times, gap)``.
    """
    if phi not in PHI_CATALOG:
        raise ValueError(f"unknown functional {phi!r}; catalog: {sorted(PHI_CATALOG)}")
    if realization_offset_b is None:
        realization_offset_b = M
    runs_a = simulate_batch(
        model, N, dt, T, master_seed, M,
        record_every=record_every, init=init_a, workers=workers,
        functional_names=(phi,),
    )
    runs_b = simulate_batch(
        model, N, dt, T, master_seed, M,
        record_every=record_every, init=init_b, workers=workers,
        functional_names=(phi,), realization_offset=realization_offset_b,
    )
    vals_a = np.stack([r.extra[phi] for r in runs_a])
    vals_b = np.stack([r.extra[phi] for r in runs_b])
    gap = np.abs(vals_a.mean(axis=0) - vals_b.mean(axis=0))
    return runs_a[0].times, gap


def exp_moment_tracker(traj: StatsTrajectory, c2: float) -> np.ndarray:
    """Series ``exp(2 c2 sqrt(v(t)))`` for stationarity monitoring; bounded
    exactly when the variance stays bounded."""
    if c2 <= 0:
        raise ValueError("c2 must be > 0")
    return np.exp(2.0 * c2 * np.sqrt(traj.v))
