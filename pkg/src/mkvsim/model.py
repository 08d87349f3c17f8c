"""Drift/interaction specifications, their constants ledger, built-in example
models, and a sampling-based assumption checker.

All built-in models are one-dimensional.  Drift and interaction callables act
elementwise on float arrays of any shape; the ensemble integrator feeds them
``(N, d)`` position blocks.

Conventions for the constants:

- ``alpha_F``: strong-monotonicity rate of the interaction,
  ``(x-y).(F(x)-F(y)) <= -alpha_F |x-y|^2``
- ``L_G``:   Lipschitz constant of the confining drift
- ``C_G``:   Lipschitz constant of the drift Jacobian
- ``C_F``:   Lipschitz constant of the interaction Jacobian
- ``m_G``:   one-sided bound ``(x-y).(G(x)-G(y)) <= -m_G |x-y|^2``
  (negative when the drift is locally expanding somewhere)
- ``c_alpha = alpha_F - L_G``: the variance-contraction rate; several bound
  verifiers require it positive
- ``kappa2``: sup of the contractivity profile ``kappa`` on (0, 1]
"""

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

# Absolute tolerance for closed-form constant checks; relative tolerance for
# grid-derived ones.
CLOSED_FORM_TOL = 1e-9
GRID_REL_TOL = 1e-6

# kappa sampling grid for scan-based profiles: log-spaced, resolves the sign
# change of every built-in.
KAPPA_R_MIN = 1e-3
KAPPA_R_MAX = 50.0
KAPPA_GRID_POINTS = 2048

MODEL_IDS = ("double_well", "ou_variant", "variance_counterexample", "custom")


@dataclass(frozen=True)
class ConstantsLedger:
    alpha_F: float
    L_G: float
    C_G: float
    C_F: float
    m_G: float
    kappa2: float | None = None

    @property
    def c_alpha(self) -> float:
        return self.alpha_F - self.L_G


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model definition; safe to share read-only across workers.

    ``g`` is the confining drift, ``f`` the interaction applied to the
    displacement from the ensemble mean.  ``mean_drift``, when present, adds
    a term depending only on the ensemble mean (it cancels from the centered
    dynamics).  ``sigma_of_variance``, when present, replaces the constant
    idiosyncratic intensity by one evaluated on the empirical variance each
    step.  ``kappa`` is the contractivity profile of the mean-dynamics drift
    ``g_eff = g + mean_drift``; ``None`` when ``sigma0 == 0``.
    """

    d: int
    g: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray], np.ndarray]
    sigma: float
    sigma0: float
    constants: ConstantsLedger
    kappa: Callable[[np.ndarray], np.ndarray] | None
    model_id: str
    mean_drift: Callable[[np.ndarray], np.ndarray] | None = None
    sigma_of_variance: Callable[[float], float] | None = None
    # (model_id, params) when the model can be rebuilt from plain data;
    # required for multi-process runs (workers rebuild instead of pickling
    # the callables).
    build_args: tuple[str, dict] | None = field(default=None, compare=False)

    def g_eff(self, x: np.ndarray) -> np.ndarray:
        """Drift seen by the ensemble mean along the diagonal."""
        gx = self.g(x)
        if self.mean_drift is not None:
            gx = gx + self.mean_drift(x)
        return gx


def _zero(x):
    return np.zeros_like(x)


def _validate_intensities(sigma, sigma0):
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma0 < 0:
        raise ValueError(f"sigma0 must be >= 0, got {sigma0}")


def _kappa2_from(kappa) -> float | None:
    if kappa is None:
        return None
    r = np.geomspace(KAPPA_R_MIN, 1.0, 256)
    return float(np.max(kappa(r)))


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------


def double_well_drift(x, A=1.5):
    """Cubic double-well drift, linearly extended outside [-A, A].

    Inside the window the drift is ``x - x**3`` (wells at +-1, unstable point
    at 0); outside it continues with the boundary slope ``1 - 3A**2`` so the
    global Lipschitz constant is ``3A**2 - 1``.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    edge = A - A**3
    out = np.sign(x) * (edge + (1.0 - 3.0 * A * A) * (ax - A))
    return np.where(ax <= A, x * (1.0 - x * x), out)


def _double_well_kappa(A, sigma0):
    # Worst slope quotient over pairs at distance r sits at the symmetric
    # pair (+-r/2): 1 - r^2/4 while both points are in the cubic window,
    # 2 G(r/2)/r beyond (verified against a midpoint scan in the tests).
    scale = 2.0 / sigma0**2

    def kappa(r):
        r = np.asarray(r, dtype=float)
        q_in = 1.0 - r * r / 4.0
        safe = np.where(r > 0, r, 1.0)
        q_out = 2.0 * double_well_drift(safe / 2.0, A) / safe
        return -scale * np.where(r <= 2.0 * A, q_in, q_out)

    return kappa


def make_double_well(alpha: float, A: float, sigma: float, sigma0: float) -> ModelSpec:
    """Double-well confinement with linear interaction ``F(z) = -alpha z``.

    ``A`` is the truncation radius of the cubic drift (must exceed 1 or the
    two-well structure would be destroyed).  ``alpha = 0`` is accepted as the
    interaction-free diffusion baseline.  When ``alpha <= L_G`` the variance
    contraction rate ``c_alpha`` is not positive and a warning is emitted:
    such models are fine to simulate but the variance bound does not apply.
    """
    if A <= 1.0:
        raise ValueError(f"truncation radius A must be > 1, got {A}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    _validate_intensities(sigma, sigma0)

    L_G = 3.0 * A * A - 1.0
    if alpha <= L_G:
        warnings.warn(
            f"alpha={alpha} <= L_G={L_G}: c_alpha={alpha - L_G} is not positive; "
            "the variance bound will not apply to this model",
            stacklevel=2,
        )

    def g(x, _A=A):
        return double_well_drift(x, _A)

    def f(z, _a=alpha):
        return -_a * z

    kappa = _double_well_kappa(A, sigma0) if sigma0 > 0 else None
    ledger = ConstantsLedger(
        alpha_F=alpha,
        L_G=L_G,
        C_G=6.0 * A,
        C_F=0.0,
        m_G=-1.0,
        kappa2=_kappa2_from(kappa),
    )
    return ModelSpec(
        d=1,
        g=g,
        f=f,
        sigma=sigma,
        sigma0=sigma0,
        constants=ledger,
        kappa=kappa,
        model_id="double_well",
        build_args=("double_well", {"alpha": alpha, "A": A, "sigma": sigma, "sigma0": sigma0}),
    )


def make_ou_variant(
    a: float,
    f_map: Callable[[np.ndarray], np.ndarray] | None,
    sigma: float,
    sigma0: float,
) -> ModelSpec:
    """Linear-pull dynamics with a mean-dependent forcing.

    The per-particle drift is ``-a x + f_map(ensemble mean)``, realized as the
    exact rewrite ``F(x - mean) + h(mean)`` with ``F(z) = -a z`` and
    ``h(m) = -a m + f_map(m)``.  The centered dynamics therefore see only the
    strongly monotone interaction, and the ensemble mean follows the scalar
    SDE with effective drift ``-a x + f_map(x)``.
    """
    if a <= 0:
        raise ValueError(f"a must be > 0, got {a}")
    _validate_intensities(sigma, sigma0)

    def f(z, _a=a):
        return -_a * z

    if f_map is None:

        def mean_drift(m, _a=a):
            return -_a * m

        def g_eff(x, _a=a):
            return -_a * x

        kappa = _constant_kappa(2.0 * a / sigma0**2) if sigma0 > 0 else None
        build_args = ("ou_variant", {"a": a, "sigma": sigma, "sigma0": sigma0})
    else:

        def mean_drift(m, _a=a, _f=f_map):
            return -_a * m + _f(m)

        def g_eff(x, _a=a, _f=f_map):
            return -_a * x + _f(x)

        kappa = kappa_scan_profile(g_eff, sigma0) if sigma0 > 0 else None
        build_args = None  # custom forcing cannot be rebuilt from plain data

    ledger = ConstantsLedger(
        alpha_F=a,
        L_G=0.0,
        C_G=0.0,
        C_F=0.0,
        m_G=0.0,
        kappa2=_kappa2_from(kappa),
    )
    return ModelSpec(
        d=1,
        g=_zero,
        f=f,
        sigma=sigma,
        sigma0=sigma0,
        constants=ledger,
        kappa=kappa,
        model_id="ou_variant",
        mean_drift=mean_drift,
        build_args=build_args,
    )


def ou_fixed_points(a, f_map, lo=-3.0, hi=3.0, n_grid=4001):
    """Roots of ``f_map(m) - a m`` on [lo, hi] by sign-change bisection.

    These are the self-consistency points of the noiseless mean equation;
    several roots signal multiple stationary states.
    """
    if f_map is None:
        return [0.0] if lo <= 0.0 <= hi else []
    grid = np.linspace(lo, hi, n_grid)
    vals = np.asarray(f_map(grid), dtype=float) - a * grid
    roots = []
    for i in range(n_grid - 1):
        v0, v1 = vals[i], vals[i + 1]
        if v0 == 0.0:
            roots.append(float(grid[i]))
        elif v0 * v1 < 0:
            roots.append(
                float(brentq(lambda m: float(f_map(np.float64(m))) - a * m, grid[i], grid[i + 1]))
            )
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    # collapse duplicates from adjacent brackets
    out = []
    for r in roots:
        if not out or abs(r - out[-1]) > 1e-9:
            out.append(r)
    return out


def make_variance_counterexample(
    sigma_of_v: Callable[[float], float] | float,
    sigma0: float,
) -> ModelSpec:
    """Linear pull ``-x`` with idiosyncratic intensity driven by the variance.

    The intensity ``sigma(v)`` is evaluated on the empirical variance at every
    step; it must be strictly positive.  There is no interaction term, so the
    variance obeys a closed scalar ODE and the model can carry several
    stationary variances regardless of the common noise.
    """
    _validate_intensities(0.0, sigma0)
    if callable(sigma_of_v):
        sv = sigma_of_v
    else:
        const = float(sigma_of_v)

        def sv(v, _c=const):
            return _c

    probe = np.concatenate([[0.0], np.geomspace(1e-6, 100.0, 64)])
    vals = np.array([float(sv(v)) for v in probe])
    if not np.all(vals > 0):
        bad = probe[np.argmin(vals)]
        raise ValueError(f"sigma_of_v must be strictly positive; sigma_of_v({bad}) = {min(vals)}")

    def g(x):
        return -np.asarray(x, dtype=float)

    kappa = _constant_kappa(2.0 / sigma0**2) if sigma0 > 0 else None
    ledger = ConstantsLedger(
        alpha_F=0.0,
        L_G=1.0,
        C_G=0.0,
        C_F=0.0,
        m_G=1.0,
        kappa2=_kappa2_from(kappa),
    )
    build_args = None
    if not callable(sigma_of_v):
        build_args = (
            "variance_counterexample",
            {"sigma_v_kind": "const", "sigma_v_value": float(sigma_of_v), "sigma0": sigma0},
        )
    return ModelSpec(
        d=1,
        g=g,
        f=_zero,
        sigma=0.0,
        sigma0=sigma0,
        constants=ledger,
        kappa=kappa,
        model_id="variance_counterexample",
        sigma_of_variance=sv,
        build_args=build_args,
    )


def _constant_kappa(value):
    def kappa(r, _v=value):
        return np.full_like(np.asarray(r, dtype=float), _v)

    return kappa


def sigma_v_sqrt_floor(v, scale=2.0, floor=0.01):
    """Intensity family ``scale * sqrt(max(v, floor))``.

    With the defaults, ``sigma(v)^2 / 4 = max(v, floor)``: every variance at or
    above the floor is a fixed point of the variance map, so the stationary
    variance is not unique.
    """
    return scale * math.sqrt(max(v, floor))


def build_model(model_id: str, params: dict) -> ModelSpec:
    """Build a model from plain data (the CLI/worker entry point).

    ``params`` is the flat parameter table of the config surface; custom
    drifts are library-level only and not reachable from here.
    """
    if model_id == "double_well":
        return make_double_well(
            alpha=params["alpha"],
            A=params.get("A", 1.5),
            sigma=params["sigma"],
            sigma0=params["sigma0"],
        )
    if model_id == "ou_variant":
        return make_ou_variant(
            a=params["a"], f_map=None, sigma=params["sigma"], sigma0=params["sigma0"]
        )
    if model_id == "variance_counterexample":
        kind = params.get("sigma_v_kind", "sqrt_floor")
        if kind == "const":
            sv = float(params["sigma_v_value"])
            model = make_variance_counterexample(sv, sigma0=params["sigma0"])
        elif kind == "sqrt_floor":
            scale = float(params.get("sigma_v_scale", 2.0))
            floor = float(params.get("sigma_v_floor", 0.01))

            def sv_fn(v, _s=scale, _f=floor):
                return sigma_v_sqrt_floor(v, _s, _f)

            model = make_variance_counterexample(sv_fn, sigma0=params["sigma0"])
            model = dataclasses.replace(
                model,
                build_args=(
                    "variance_counterexample",
                    {
                        "sigma_v_kind": "sqrt_floor",
                        "sigma_v_scale": scale,
                        "sigma_v_floor": floor,
                        "sigma0": params["sigma0"],
                    },
                ),
            )
        else:
            raise ValueError(f"unknown sigma_v_kind: {kind!r} (expected const|sqrt_floor)")
        return model
    raise ValueError(f"unknown model_id: {model_id!r} (expected one of {MODEL_IDS[:-1]})")


# ---------------------------------------------------------------------------
# kappa profiles and custom-model constants
# ---------------------------------------------------------------------------


def kappa_canonical(model: ModelSpec, r: float, mid_points: int = 4001, mid_range: float = 60.0) -> float:
    """Contractivity of the mean-dynamics drift at separation ``r``.

    Returns the infimum over sampled pairs at distance ``r`` of
    ``-(2/sigma0^2) (x-y).(g_eff(x)-g_eff(y)) / r^2``, scanned over midpoints
    on a uniform grid (one-dimensional models only).
    """
    if model.sigma0 <= 0:
        raise ValueError("kappa is defined only for sigma0 > 0")
    if r <= 0:
        raise ValueError("kappa is undefined at r = 0")
    if model.d != 1:
        raise NotImplementedError("midpoint-scan kappa is implemented for d = 1 only")
    m = np.linspace(-mid_range, mid_range, mid_points)
    q = (model.g_eff(m + r / 2.0) - model.g_eff(m - r / 2.0)) / r
    return float(-(2.0 / model.sigma0**2) * q.max())


def kappa_scan_profile(
    g_eff: Callable[[np.ndarray], np.ndarray],
    sigma0: float,
    r_min: float = KAPPA_R_MIN,
    r_max: float = KAPPA_R_MAX,
    n_r: int = KAPPA_GRID_POINTS,
    mid_points: int = 2001,
    mid_range: float = 60.0,
):
    """Tabulated kappa on a log-spaced grid, linearly interpolated.

    Below ``r_min`` the value at ``r_min`` is used; above ``r_max`` the value
    at ``r_max``.  Good enough pointwise for the concave-distance integrals,
    which is all the grid needs to support.
    """
    if sigma0 <= 0:
        raise ValueError("kappa profile requires sigma0 > 0")
    r = np.geomspace(r_min, r_max, n_r)
    m = np.linspace(-mid_range, mid_range, mid_points)[:, None]
    q = (g_eff(m + r / 2.0) - g_eff(m - r / 2.0)) / r
    vals = -(2.0 / sigma0**2) * q.max(axis=0)

    def kappa(rr, _r=r, _v=vals):
        return np.interp(np.asarray(rr, dtype=float), _r, _v)

    return kappa


def estimate_constants(
    g: Callable,
    f: Callable,
    radius: float = 10.0,
    n_grid: int = 2001,
    fd_step: float = 1e-4,
) -> tuple[ConstantsLedger, float]:
    """Grid-maximized constants for a custom one-dimensional model.

    Returns the ledger together with the relative confidence margin of the
    grid estimates (the built-ins use closed forms instead).
    """
    x = np.linspace(-radius, radius, n_grid)
    gx, fx = np.asarray(g(x), float), np.asarray(f(x), float)
    dx = np.diff(x)
    slopes_g = np.diff(gx) / dx
    slopes_f = np.diff(fx) / dx
    L_G = float(np.max(np.abs(slopes_g)))
    m_G = float(-np.max(slopes_g))
    alpha_F = float(-np.max(slopes_f))
    jac_g = (g(x + fd_step) - g(x - fd_step)) / (2 * fd_step)
    jac_f = (f(x + fd_step) - f(x - fd_step)) / (2 * fd_step)
    C_G = float(np.max(np.abs(np.diff(jac_g) / dx)))
    C_F = float(np.max(np.abs(np.diff(jac_f) / dx)))
    return (
        ConstantsLedger(alpha_F=alpha_F, L_G=L_G, C_G=C_G, C_F=C_F, m_G=m_G),
        GRID_REL_TOL,
    )


def make_custom(
    g: Callable,
    f: Callable,
    sigma: float,
    sigma0: float,
    constants: ConstantsLedger | None = None,
    kappa=None,
    d: int = 1,
) -> ModelSpec:
    """Library-level custom model; constants grid-estimated unless given."""
    _validate_intensities(sigma, sigma0)
    if constants is None:
        constants, _ = estimate_constants(g, f)
    if kappa is None and sigma0 > 0 and d == 1:
        kappa = kappa_scan_profile(g, sigma0)
    if constants.kappa2 is None and kappa is not None:
        constants = ConstantsLedger(
            alpha_F=constants.alpha_F,
            L_G=constants.L_G,
            C_G=constants.C_G,
            C_F=constants.C_F,
            m_G=constants.m_G,
            kappa2=_kappa2_from(kappa),
        )
    return ModelSpec(
        d=d,
        g=g,
        f=f,
        sigma=sigma,
        sigma0=sigma0,
        constants=constants,
        kappa=kappa,
        model_id="custom",
    )


# ---------------------------------------------------------------------------
# Assumption checking
# ---------------------------------------------------------------------------


@dataclass
class ClauseCheck:
    clause: str
    passed: bool
    worst: float  # largest violation amount found (<= tolerance when passing)
    witness: tuple | None = None
    detail: str = ""


@dataclass
class AssumptionReport:
    clauses: list
    sample_count: int
    radius: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name: str) -> ClauseCheck:
        for c in self.clauses:
            if c.clause == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        lines = [
            f"assumption check: {self.sample_count} pairs on [-{self.radius}, {self.radius}], "
            f"tolerance {self.tolerance:g}"
        ]
        for c in self.clauses:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"  [{status}] {c.clause}: worst violation {c.worst:.3e}  {c.detail}")
        return "\n".join(lines)


def check_assumptions(
    model: ModelSpec,
    sample_count: int = 10_000,
    radius: float = 10.0,
    tolerance: float = CLOSED_FORM_TOL,
    seed: int = 0,
    fd_step: float = 1e-4,
) -> AssumptionReport:
    """Sampling-based pass/fail report for the structural model assumptions.

    Clauses (failures are report entries, never exceptions):

    - ``A1.1-confinement``: pairwise consistency of the mean-dynamics drift
      with the model's kappa profile, eventual positivity of kappa, and the
      ``int r kappa^- dr`` integrability proxy; skipped when ``sigma0 == 0``.
    - ``A1.2-lipschitz``: ``|g(x)-g(y)| <= L_G |x-y|`` against the ledger.
    - ``A1.3-jacobian``: finite-difference Jacobian of ``g`` is ``C_G``-Lipschitz
      (windowed-average argument makes the FD version exact up to rounding).
    - ``A2-monotone``: ``(x-y).(F(x)-F(y)) <= -alpha_F |x-y|^2`` and F(0)=0.
    - ``ledger-mG``: the one-sided bound on ``g`` claimed by ``m_G``.
    """
    if sample_count < 100:
        raise ValueError("sample_count must be >= 100")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, sample_count)
    y = rng.uniform(-radius, radius, sample_count)
    keep = np.abs(x - y) > 1e-8
    x, y = x[keep], y[keep]
    r = np.abs(x - y)
    clauses = []

    def record(name, violations, witness_idx, detail=""):
        worst = float(np.max(violations))
        i = int(witness_idx)
        clauses.append(
            ClauseCheck(
                clause=name,
                passed=worst <= tolerance,
                worst=worst,
                witness=(float(x[i]), float(y[i])),
                detail=detail,
            )
        )

    # A1.1: confinement of the mean-dynamics drift against kappa
    if model.sigma0 > 0 and model.kappa is not None:
        lhs = (x - y) * (model.g_eff(x) - model.g_eff(y))
        bound = -(model.sigma0**2 / 2.0) * model.kappa(r) * r * r
        viol = lhs - bound
        tail_r = np.geomspace(KAPPA_R_MAX / 4.0, KAPPA_R_MAX, 64)
        tail_ok = bool(np.all(model.kappa(tail_r) > 0))
        rg = np.geomspace(KAPPA_R_MIN, 1.0, 512)
        integ = float(np.trapezoid(rg * np.maximum(0.0, -model.kappa(rg)), rg))
        integ_ok = math.isfinite(integ) and integ < 1e3
        idx = int(np.argmax(viol))
        worst = float(np.max(viol))
        passed = worst <= tolerance and tail_ok and integ_ok
        detail = f"tail kappa > 0: {tail_ok}; int r*kappa^- on (0,1] ~ {integ:.3g}"
        if not tail_ok:
            detail += " (kappa not eventually positive)"
        clauses.append(
            ClauseCheck(
                clause="A1.1-confinement",
                passed=passed,
                worst=worst,
                witness=(float(x[idx]), float(y[idx])),
                detail=detail,
            )
        )
    else:
        clauses.append(
            ClauseCheck(
                clause="A1.1-confinement",
                passed=True,
                worst=0.0,
                detail="skipped: sigma0 = 0",
            )
        )

    # A1.2: Lipschitz bound on the confining drift
    gx, gy = model.g(x), model.g(y)
    record(
        "A1.2-lipschitz",
        np.abs(gx - gy) - model.constants.L_G * r,
        np.argmax(np.abs(gx - gy) - model.constants.L_G * r),
        detail=f"ledger L_G = {model.constants.L_G:g}",
    )

    # A1.3: FD-Jacobian Lipschitz bound
    jx = (model.g(x + fd_step) - model.g(x - fd_step)) / (2 * fd_step)
    jy = (model.g(y + fd_step) - model.g(y - fd_step)) / (2 * fd_step)
    record(
        "A1.3-jacobian",
        np.abs(jx - jy) - model.constants.C_G * r,
        np.argmax(np.abs(jx - jy) - model.constants.C_G * r),
        detail=f"ledger C_G = {model.constants.C_G:g}, fd_step = {fd_step:g}",
    )

    # A2: strong monotonicity of the interaction, F(0) = 0
    fx, fy = model.f(x), model.f(y)
    viol_a2 = (x - y) * (fx - fy) + model.constants.alpha_F * r * r
    f0 = float(np.abs(model.f(np.zeros(1))[0]))
    idx = int(np.argmax(viol_a2))
    worst = max(float(np.max(viol_a2)), f0)
    clauses.append(
        ClauseCheck(
            clause="A2-monotone",
            passed=worst <= tolerance,
            worst=worst,
            witness=(float(x[idx]), float(y[idx])),
            detail=f"ledger alpha_F = {model.constants.alpha_F:g}; |F(0)| = {f0:.3e}",
        )
    )

    # ledger m_G: one-sided bound on g
    record(
        "ledger-mG",
        (x - y) * (gx - gy) + model.constants.m_G * r * r,
        np.argmax((x - y) * (gx - gy) + model.constants.m_G * r * r),
        detail=f"ledger m_G = {model.constants.m_G:g}",
    )

    return AssumptionReport(
        clauses=clauses,
        sample_count=sample_count,
        radius=radius,
        tolerance=tolerance,
    )
