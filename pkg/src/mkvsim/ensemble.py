"""N-particle Euler-Maruyama integration under one common-noise realization.

One ensemble advances single-threaded (the mean-field term is a global
reduction each step); distinct realizations are independent jobs.  Means use
numpy's fixed-order pairwise summation, so aggregating realizations in a pool
reproduces the serial result bit for bit.

Euler-Maruyama is the whole integrator: every noise channel is additive
within a step, where it already attains strong order 1.  The explicit-Euler
stability guard ``dt * L_G <= 0.5`` rejects silently stiff configurations up
front.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mkvsim.model import ModelSpec, build_model
from mkvsim.rng import StreamSet, stream_set

STABILITY_LIMIT = 0.5

INIT_KINDS = ("point_mass", "gaussian", "two_point")


class SimulationError(RuntimeError):
    pass


class StabilityError(SimulationError):
    pass


class NonFiniteError(SimulationError):
    def __init__(self, step: int, particle: int):
        self.step = step
        self.particle = particle
        super().__init__(
            f"non-finite position at step {step}, particle {particle} "
            "(reduce dt or check the model)"
        )


@dataclass
class ParticleEnsemble:
    """Positions of N particles plus the idiosyncratic stream that drives them.

    ``seed_info`` records ``(master_seed, realization)`` when the ensemble was
    wired from derived streams.  Positions must stay finite; the stepper
    faults rather than propagate NaN.
    """

    positions: np.ndarray  # (N, d) float64
    model: ModelSpec
    t: float = 0.0
    step_index: int = 0
    particles_rng: np.random.Generator | None = None
    seed_info: tuple | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[0] < 2:
            raise ValueError("an ensemble needs N >= 2 particles")
        if self.positions.shape[1] != self.model.d:
            raise ValueError(
                f"positions have d={self.positions.shape[1]} but model.d={self.model.d}"
            )
        if not np.isfinite(self.positions).all():
            raise ValueError("initial positions must be finite")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]


def empirical_stats(ens: ParticleEnsemble):
    """(mu1, mu2, v): mean vector, mean squared norm, population variance."""
    return _stats(ens.positions)


def _stats(positions: np.ndarray):
    mu1 = positions.mean(axis=0)
    sq = (positions**2).sum(axis=1)
    mu2 = float(sq.mean())
    v = float(((positions - mu1) ** 2).sum(axis=1).mean())
    return mu1, mu2, v


def _idiosyncratic_sigma(model: ModelSpec, positions: np.ndarray, mu1: np.ndarray) -> float:
    if model.sigma_of_variance is not None:
        v = float(((positions - mu1) ** 2).sum(axis=1).mean())
        return float(model.sigma_of_variance(v))
    return model.sigma


def _step_positions(model, positions, dt, mu1, xi, common_part, step_index):
    """Shared single-step update; ``common_part`` is the full common-noise
    displacement (already scaled by sigma0), identical for every particle."""
    drift = model.g(positions) + model.f(positions - mu1)
    if model.mean_drift is not None:
        drift = drift + model.mean_drift(mu1)
    new = positions + drift * dt
    if xi is not None:
        sigma = _idiosyncratic_sigma(model, positions, mu1)
        new = new + (sigma * math.sqrt(dt)) * xi
    if common_part is not None:
        new = new + common_part
    if not np.isfinite(new).all():
        bad = int(np.argwhere(~np.isfinite(new))[0][0])
        raise NonFiniteError(step=step_index, particle=bad)
    return new


def _check_dt(model: ModelSpec, dt: float):
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if dt * model.constants.L_G > STABILITY_LIMIT:
        raise StabilityError(
            f"dt * L_G = {dt * model.constants.L_G:g} exceeds the stability limit "
            f"{STABILITY_LIMIT}; reduce dt below {STABILITY_LIMIT / model.constants.L_G:g}"
        )


def _has_idiosyncratic(model: ModelSpec) -> bool:
    return model.sigma > 0 or model.sigma_of_variance is not None


def em_step(ens: ParticleEnsemble, dt: float, common_increment: np.ndarray) -> ParticleEnsemble:
    """Advance the ensemble one step.

    ``common_increment`` is the Brownian increment of the common channel,
    N(0, dt I_d) from the caller's stream; the same vector (scaled by sigma0)
    is added to every particle.  Idiosyncratic draws come from the ensemble's
    own particle stream.  The ensemble is advanced in place and returned.
    """
    _check_dt(ens.model, dt)
    model = ens.model
    mu1 = ens.positions.mean(axis=0)
    xi = None
    if _has_idiosyncratic(model):
        if ens.particles_rng is None:
            raise ValueError("ensemble has no particle stream but the model has sigma > 0")
        xi = ens.particles_rng.standard_normal(ens.positions.shape)
    common_part = None
    if model.sigma0 > 0:
        common_part = model.sigma0 * np.asarray(common_increment, dtype=float)
    ens.positions = _step_positions(
        model, ens.positions, dt, mu1, xi, common_part, ens.step_index
    )
    ens.step_index += 1
    ens.t += dt
    return ens


def sample_initial(kind: str, params: dict, N: int, rng: np.random.Generator, model: ModelSpec) -> ParticleEnsemble:
    """I.i.d. initial positions from the requested law.

    The caller supplies the init stream, which is derived independently of
    every common-noise stream.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    d = model.d
    if kind == "point_mass":
        at = np.broadcast_to(np.asarray(params.get("at", 0.0), dtype=float), (d,))
        positions = np.tile(at, (N, 1))
    elif kind == "gaussian":
        var = float(params.get("var", 1.0))
        if var <= 0:
            raise ValueError(f"gaussian init needs var > 0, got {var}")
        mean = np.broadcast_to(np.asarray(params.get("mean", 0.0), dtype=float), (d,))
        positions = mean + math.sqrt(var) * rng.standard_normal((N, d))
    elif kind == "two_point":
        a = np.broadcast_to(np.asarray(params.get("a", -1.0), dtype=float), (d,))
        b = np.broadcast_to(np.asarray(params.get("b", 1.0), dtype=float), (d,))
        pick = rng.random((N, 1)) < 0.5
        positions = np.where(pick, a, b)
    else:
        raise ValueError(f"unknown initial kind: {kind!r} (expected one of {INIT_KINDS})")
    return ParticleEnsemble(positions=positions, model=model)


@dataclass
class StatsTrajectory:
    """Recorded time series of (mu1, mu2, v) plus named extra series."""

    times: np.ndarray  # (K,)
    mu1: np.ndarray  # (K, d)
    mu2: np.ndarray  # (K,)
    v: np.ndarray  # (K,)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.mu1 = np.atleast_2d(np.asarray(self.mu1, dtype=float))
        self.mu2 = np.asarray(self.mu2, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("recorded times must be strictly increasing")
        if np.any(self.v < 0):
            raise ValueError("variance series must be non-negative")

    @property
    def d(self) -> int:
        return self.mu1.shape[1]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def trajectory_to_csv(traj: StatsTrajectory, path) -> None:
    """CSV with header ``t,mu1_0..mu1_{d-1},mu2,v[,extra...]``, 17 significant
    digits per float, one row per recorded time."""
    d = traj.d
    extra_names = sorted(traj.extra)
    header = (
        ["t"] + [f"mu1_{j}" for j in range(d)] + ["mu2", "v"] + extra_names
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(traj.times)):
            row = [_fmt(traj.times[k])]
            row += [_fmt(traj.mu1[k, j]) for j in range(d)]
            row += [_fmt(traj.mu2[k]), _fmt(traj.v[k])]
            row += [_fmt(traj.extra[name][k]) for name in extra_names]
            fh.write(",".join(row) + "\n")


def simulate(
    model: ModelSpec,
    N: int,
    dt: float,
    T: float,
    master_seed: int,
    realization: int = 0,
    *,
    record_every: int = 1,
    init: tuple = ("point_mass", {"at": 0.0}),
    streams: StreamSet | None = None,
    functionals: dict | None = None,
) -> StatsTrajectory:
    """Integrate one realization and record stats every ``record_every`` steps
    (always including t=0 and t=T).

    Deterministic given ``(model, N, dt, T, master_seed, realization)``.
    ``functionals`` maps names to ``positions -> float`` statistics recorded
    alongside the moments (they land in ``StatsTrajectory.extra``).
    """
    if T <= 0:
        raise ValueError(f"T must be > 0, got {T}")
    if dt > T:
        raise ValueError(f"dt={dt} must not exceed T={T}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    _check_dt(model, dt)
    n_steps = max(1, round(T / dt))
    if streams is None:
        streams = stream_set(master_seed, realization)
    kind, params = init
    ens = sample_initial(kind, params, N, streams.init, model)
    ens.particles_rng = streams.particles
    ens.seed_info = (master_seed, realization)

    functionals = functionals or {}
    times, mu1s, mu2s, vs = [], [], [], []
    extras = {name: [] for name in functionals}

    def record(step):
        mu1, mu2, v = _stats(ens.positions)
        times.append(step * dt)
        mu1s.append(mu1)
        mu2s.append(mu2)
        vs.append(v)
        for name, fn in functionals.items():
            extras[name].append(float(fn(ens.positions)))

    record(0)
    d = model.d
    sqdt = math.sqrt(dt)
    for k in range(n_steps):
        if model.sigma0 > 0:
            dB0 = streams.common.standard_normal(d) * sqdt
        else:
            dB0 = np.zeros(d)
        em_step(ens, dt, dB0)
        if (k + 1) % record_every == 0 or (k + 1) == n_steps:
            record(k + 1)

    return StatsTrajectory(
        times=np.array(times),
        mu1=np.array(mu1s),
        mu2=np.array(mu2s),
        v=np.array(vs),
        extra={name: np.array(vals) for name, vals in extras.items()},
    )


# ---------------------------------------------------------------------------
# Batched realizations (worker-pool friendly)
# ---------------------------------------------------------------------------


def _resolve_functionals(names):
    # local import: the catalog lives in analytics, which imports this module
    if not names:
        return None
    from mkvsim.analytics import PHI_CATALOG

    return {name: PHI_CATALOG[name] for name in names}


def payload_model(payload: dict) -> ModelSpec:
    """Model for one batch job: the live object when running in-process, a
    rebuild from plain data inside a worker."""
    model = payload.get("model_obj")
    if model is not None:
        return model
    return build_model(payload["model_id"], payload["model_params"])


def prepare_payloads(model: ModelSpec, payloads: list, workers: int) -> None:
    """Attach the model to each payload, as plain data when workers rebuild it."""
    if workers > 1:
        if model.build_args is None:
            raise ValueError(
                "workers > 1 requires a model rebuildable from plain data "
                "(model.build_args is None; run with workers=1)"
            )
        model_id, model_params = model.build_args
        for p in payloads:
            p["model_id"], p["model_params"] = model_id, model_params
    else:
        for p in payloads:
            p["model_obj"] = model


def run_payloads(model: ModelSpec, payloads: list, worker_fn, workers: int) -> list:
    """Run batch jobs, aggregating in fixed payload order regardless of workers."""
    prepare_payloads(model, payloads, workers)
    if workers > 1:
        import multiprocessing

        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(worker_fn, payloads)
    return [worker_fn(p) for p in payloads]


def _simulate_payload(payload: dict) -> StatsTrajectory:
    model = payload_model(payload)
    streams = stream_set(
        payload["master_seed"],
        payload["realization"],
        common_realization=payload.get("common_realization"),
    )
    return simulate(
        model,
        payload["N"],
        payload["dt"],
        payload["T"],
        payload["master_seed"],
        payload["realization"],
        record_every=payload["record_every"],
        init=payload["init"],
        streams=streams,
        functionals=_resolve_functionals(payload.get("functional_names")),
    )


def simulate_batch(
    model: ModelSpec,
    N: int,
    dt: float,
    T: float,
    master_seed: int,
    M: int,
    *,
    record_every: int = 1,
    init: tuple = ("point_mass", {"at": 0.0}),
    inits: list | None = None,
    share_common: bool = False,
    workers: int = 1,
    functional_names: tuple = (),
    realization_offset: int = 0,
) -> list:
    """M independent realizations, aggregated in fixed realization order.

    ``share_common=True`` pins every realization to the common stream of
    realization 0 (one shared noise path, distinct idiosyncratic channels) —
    the configuration used by merge diagnostics.  ``inits`` optionally gives
    one initial condition per realization.  With ``workers > 1`` the model is
    rebuilt in each worker from ``model.build_args``, so the result is
    identical for every worker count.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if inits is not None and len(inits) != M:
        raise ValueError("inits must have one entry per realization")
    payloads = []
    for r in range(M):
        payloads.append(
            {
                "N": N,
                "dt": dt,
                "T": T,
                "master_seed": master_seed,
                "realization": realization_offset + r,
                "record_every": record_every,
                "init": inits[r] if inits is not None else init,
                "common_realization": 0 if share_common else None,
                "functional_names": tuple(functional_names),
            }
        )
    return run_payloads(model, payloads, _simulate_payload, workers)
