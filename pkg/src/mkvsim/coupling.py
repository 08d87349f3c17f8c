"""Reflection and synchronous coupling of two particle ensembles.

The two legs share every idiosyncratic draw.  Their common-noise channels are
mixed through two switches of the separation ``E`` between the leg means:
``pi`` turns on the reflected channel away from coalescence, ``lambda``
replaces it by a shared auxiliary channel near coalescence, and
``pi^2 + lambda^2 = 1`` keeps the total intensity constant, so each leg alone
is statistically an uncoupled solution.

Per step, with ``e = E/|E|`` (zero at ``E = 0``):

- leg X  common part: ``sigma0 * (pi(E) dB0 + lambda(E) dB0_aux)``
- leg X~ common part: ``sigma0 * (pi(E) (I - 2 e e^T) dB0 + lambda(E) dB0_aux)``

The contraction statistic ``theta`` is the RMS of centered differences plus
the distance between the leg means; its across-realization average is the
quantity whose exponential decay the acceptance suite fits.

Stream discipline: each step consumes, in order, one common increment, one
auxiliary increment, and (when the model has idiosyncratic noise) one shared
``(N, d)`` block — independent of the trajectory, so runs that differ only in
``delta`` stay draw-for-draw aligned.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mkvsim.ensemble import (
    ParticleEnsemble,
    _check_dt,
    _has_idiosyncratic,
    _stats,
    _step_positions,
    run_payloads,
    payload_model,
    sample_initial,
)
from mkvsim.model import ModelSpec
from mkvsim.rng import ROLE_INIT, derive_stream, stream_set


def pi_delta(r_vec, delta: float) -> float:
    """Reflected-channel switch: 0 inside |r| <= delta/2, 1 outside |r| >= delta,
    linear in |r| between (Lipschitz constant 2/delta)."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    r = float(np.linalg.norm(np.atleast_1d(np.asarray(r_vec, dtype=float))))
    return min(max(2.0 * r / delta - 1.0, 0.0), 1.0)


def lambda_delta(r_vec, delta: float) -> float:
    """Auxiliary-channel switch, computed from pi so that pi^2 + lambda^2 = 1."""
    p = pi_delta(r_vec, delta)
    return math.sqrt(max(0.0, 1.0 - p * p))


@dataclass
class CoupledEnsemble:
    """Two ensembles at the same time, sharing idiosyncratic draws."""

    ens_x: ParticleEnsemble
    ens_xt: ParticleEnsemble
    delta: float
    common_rng: np.random.Generator
    aux_rng: np.random.Generator
    particles_rng: np.random.Generator
    t: float = 0.0
    step_index: int = 0
    seed_info: tuple | None = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        a, b = self.ens_x, self.ens_xt
        if a.n_particles != b.n_particles or a.d != b.d or a.model is not b.model:
            raise ValueError("coupled legs must share N, d and the model")

    @property
    def model(self) -> ModelSpec:
        return self.ens_x.model


def make_coupled(
    model: ModelSpec,
    N: int,
    delta: float,
    init_a: tuple,
    init_b: tuple,
    master_seed: int,
    realization: int = 0,
) -> CoupledEnsemble:
    """Coupled pair with independent initial clouds and shared particle stream."""
    streams = stream_set(master_seed, realization)
    init_x = derive_stream(master_seed, realization, ROLE_INIT, index=0)
    init_xt = derive_stream(master_seed, realization, ROLE_INIT, index=1)
    ens_x = sample_initial(init_a[0], init_a[1], N, init_x, model)
    ens_xt = sample_initial(init_b[0], init_b[1], N, init_xt, model)
    ens_x.particles_rng = streams.particles
    ens_xt.particles_rng = streams.particles
    return CoupledEnsemble(
        ens_x=ens_x,
        ens_xt=ens_xt,
        delta=delta,
        common_rng=streams.common,
        aux_rng=streams.aux_common,
        particles_rng=streams.particles,
        seed_info=(master_seed, realization),
    )


def _advance(coupled: CoupledEnsemble, dt: float, common_x, common_xt, xi, mu_x, mu_xt):
    model = coupled.model
    a, b = coupled.ens_x, coupled.ens_xt
    a.positions = _step_positions(model, a.positions, dt, mu_x, xi, common_x, coupled.step_index)
    b.positions = _step_positions(model, b.positions, dt, mu_xt, xi, common_xt, coupled.step_index)
    coupled.step_index += 1
    coupled.t += dt
    a.step_index = b.step_index = coupled.step_index
    a.t = b.t = coupled.t


def reflection_step(coupled: CoupledEnsemble, dt: float) -> CoupledEnsemble:
    """One step of the reflection coupling (advances in place, returns self)."""
    model = coupled.model
    _check_dt(model, dt)
    mu_x = coupled.ens_x.positions.mean(axis=0)
    mu_xt = coupled.ens_xt.positions.mean(axis=0)
    E = mu_x - mu_xt
    aE = float(np.linalg.norm(E))
    pi = pi_delta(E, coupled.delta)
    lam = math.sqrt(max(0.0, 1.0 - pi * pi))
    sqdt = math.sqrt(dt)
    dB0 = coupled.common_rng.standard_normal(model.d) * sqdt
    dB0_aux = coupled.aux_rng.standard_normal(model.d) * sqdt
    xi = None
    if _has_idiosyncratic(model):
        xi = coupled.particles_rng.standard_normal(coupled.ens_x.positions.shape)
    if aE > 0.0:
        e = E / aE
        reflected = dB0 - 2.0 * e * float(e @ dB0)
    else:
        reflected = dB0
    common_x = common_xt = None
    if model.sigma0 > 0:
        common_x = model.sigma0 * (pi * dB0 + lam * dB0_aux)
        common_xt = model.sigma0 * (pi * reflected + lam * dB0_aux)
    _advance(coupled, dt, common_x, common_xt, xi, mu_x, mu_xt)
    return coupled


def synchronous_step(coupled: CoupledEnsemble, dt: float) -> CoupledEnsemble:
    """Baseline comparator: both legs receive the identical common increment."""
    model = coupled.model
    _check_dt(model, dt)
    sqdt = math.sqrt(dt)
    dB0 = coupled.common_rng.standard_normal(model.d) * sqdt
    xi = None
    if _has_idiosyncratic(model):
        xi = coupled.particles_rng.standard_normal(coupled.ens_x.positions.shape)
    common = model.sigma0 * dB0 if model.sigma0 > 0 else None
    mu_x = coupled.ens_x.positions.mean(axis=0)
    mu_xt = coupled.ens_xt.positions.mean(axis=0)
    _advance(coupled, dt, common, common, xi, mu_x, mu_xt)
    return coupled


def theta(coupled: CoupledEnsemble) -> float:
    """RMS of centered differences plus distance of the leg means."""
    x = coupled.ens_x.positions
    xt = coupled.ens_xt.positions
    mu_x = x.mean(axis=0)
    mu_xt = xt.mean(axis=0)
    centered = (x - mu_x) - (xt - mu_xt)
    rms = math.sqrt(float((centered**2).sum(axis=1).mean()))
    return rms + float(np.linalg.norm(mu_x - mu_xt))


@dataclass
class CoupledTrajectory:
    """Per-realization series of the coupling diagnostics.

    ``mu_x``/``mu_xt`` are the leg means (K, d); marginal-law checks compare
    their terminal distribution against uncoupled runs.
    """

    times: np.ndarray
    theta: np.ndarray
    absE: np.ndarray
    centered_rms: np.ndarray
    mu_x: np.ndarray
    mu_xt: np.ndarray


@dataclass
class CoupledRunResult:
    """Across-realization averages plus the per-realization series."""

    times: np.ndarray
    theta_mean: np.ndarray
    theta_se: np.ndarray
    absE_mean: np.ndarray
    centered_rms_mean: np.ndarray
    per_realization: list = field(default_factory=list)


def _couple_payload(payload: dict) -> CoupledTrajectory:
    model = payload_model(payload)
    coupled = make_coupled(
        model,
        payload["N"],
        payload["delta"],
        payload["init_a"],
        payload["init_b"],
        payload["master_seed"],
        payload["realization"],
    )
    dt, T = payload["dt"], payload["T"]
    record_every = payload["record_every"]
    step = synchronous_step if payload.get("synchronous") else reflection_step
    n_steps = max(1, round(T / dt))
    times, thetas, absEs, rmss, mus_x, mus_xt = [], [], [], [], [], []

    def record(k):
        x, xt = coupled.ens_x.positions, coupled.ens_xt.positions
        mu_x, mu_xt = x.mean(axis=0), xt.mean(axis=0)
        centered = (x - mu_x) - (xt - mu_xt)
        rms = math.sqrt(float((centered**2).sum(axis=1).mean()))
        aE = float(np.linalg.norm(mu_x - mu_xt))
        times.append(k * dt)
        thetas.append(rms + aE)
        absEs.append(aE)
        rmss.append(rms)
        mus_x.append(mu_x)
        mus_xt.append(mu_xt)

    record(0)
    for k in range(n_steps):
        step(coupled, dt)
        if (k + 1) % record_every == 0 or (k + 1) == n_steps:
            record(k + 1)
    return CoupledTrajectory(
        times=np.array(times),
        theta=np.array(thetas),
        absE=np.array(absEs),
        centered_rms=np.array(rmss),
        mu_x=np.array(mus_x),
        mu_xt=np.array(mus_xt),
    )


def run_coupled(
    model: ModelSpec,
    N: int,
    dt: float,
    T: float,
    delta: float,
    master_seed: int,
    M: int,
    *,
    record_every: int = 1,
    init_a: tuple = ("point_mass", {"at": 1.0}),
    init_b: tuple = ("point_mass", {"at": -1.0}),
    synchronous: bool = False,
    workers: int = 1,
) -> CoupledRunResult:
    """M coupled realizations; returns the across-realization average of theta
    together with its two halves (|E| and the centered RMS) per recorded time."""
    if M < 1:
        raise ValueError("M must be >= 1")
    payloads = [
        {
            "N": N,
            "dt": dt,
            "T": T,
            "delta": delta,
            "master_seed": master_seed,
            "realization": r,
            "record_every": record_every,
            "init_a": init_a,
            "init_b": init_b,
            "synchronous": synchronous,
        }
        for r in range(M)
    ]
    trajs = run_payloads(model, payloads, _couple_payload, workers)
    theta_mat = np.stack([t.theta for t in trajs])
    absE_mat = np.stack([t.absE for t in trajs])
    rms_mat = np.stack([t.centered_rms for t in trajs])
    if M > 1:
        theta_se = theta_mat.std(axis=0, ddof=1) / math.sqrt(M)
    else:
        theta_se = np.zeros_like(trajs[0].theta)
    return CoupledRunResult(
        times=trajs[0].times,
        theta_mean=theta_mat.mean(axis=0),
        theta_se=theta_se,
        absE_mean=absE_mat.mean(axis=0),
        centered_rms_mean=rms_mat.mean(axis=0),
        per_realization=list(trajs),
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def coupled_to_csv(result: CoupledRunResult, path) -> None:
    """Aggregate CSV: one row per recorded time."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,theta_mean,theta_se,absE_mean,centered_rms_mean\n")
        for k in range(len(result.times)):
            fh.write(
                ",".join(
                    _fmt(v)
                    for v in (
                        result.times[k],
                        result.theta_mean[k],
                        result.theta_se[k],
                        result.absE_mean[k],
                        result.centered_rms_mean[k],
                    )
                )
                + "\n"
            )


def realization_to_csv(traj: CoupledTrajectory, path) -> None:
    """Verbose per-realization dump (includes the two leg means)."""
    d = traj.mu_x.shape[1]
    header = ["t", "theta", "absE", "centered_rms"]
    header += [f"mu_x_{j}" for j in range(d)] + [f"mu_xt_{j}" for j in range(d)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(traj.times)):
            row = [traj.times[k], traj.theta[k], traj.absE[k], traj.centered_rms[k]]
            row += list(traj.mu_x[k]) + list(traj.mu_xt[k])
            fh.write(",".join(_fmt(v) for v in row) + "\n")
