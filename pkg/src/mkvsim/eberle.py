"""Concave distance function built from a contractivity profile, with a
numerically certified contraction rate, plus sample-based transport distances.

Given kappa, the construction tabulates on a uniform mesh:

- ``phi(r)   = exp(-1/4 int_0^r s kappa(s)^- ds)``   (kappa^- = max(0, -kappa))
- ``Phi(r)   = int_0^r phi``
- ``g(r)     = 1 - (int_0^{r ^ R1} Phi/phi) / (2 int_0^{R1} Phi/phi)``
- ``f(r)     = int_0^r phi g``

with the two radii

- ``R0 = inf{R >= 0 : kappa(r) >= 0 for all r >= R}``
- ``R1 = inf{R >= R0 : kappa(r) R (R - R0) >= 8 for all r >= R}``

f is concave with ``f(0) = 0``, ``f'(0) = 1``, sandwiched between ``Phi/2``
and ``Phi`` and between ``kappa1 r`` and ``r`` where ``kappa1 = phi(R0)/2``.
The certified rate is the grid minimum of
``-2 sigma0^2 [f'' - (1/4) r kappa f'] / f`` with central differences, so it
is mesh-dependent and conservative; it is reported with its mesh.

All quadrature is cumulative trapezoid on the uniform mesh; the tests
cross-check f against an independent Simpson evaluation.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_MESH = 8192
SCAN_R_MAX = 50.0
SCAN_POINTS = 2048
ASSIGNMENT_LIMIT = 512


class ProfileError(RuntimeError):
    pass


def _kappa_values(kappa, r_grid):
    if callable(kappa):
        vals = np.asarray(kappa(r_grid), dtype=float)
    else:
        vals = np.asarray(kappa, dtype=float)
        if vals.shape != r_grid.shape:
            raise ValueError("kappa array must match the grid shape")
    return vals


def compute_R0(kappa, r_grid) -> float:
    """Smallest grid point beyond which every sampled kappa is >= 0.

    Faults when kappa is still negative at the top of the grid (no confining
    tail: the construction cannot proceed).
    """
    r_grid = np.asarray(r_grid, dtype=float)
    vals = _kappa_values(kappa, r_grid)
    neg = np.where(vals < 0.0)[0]
    if len(neg) == 0:
        return 0.0
    last = int(neg.max())
    if last >= len(r_grid) - 1:
        raise ProfileError(
            f"kappa is negative at the top of the grid (r = {r_grid[last]:g}); "
            "no confining tail on the sampled range"
        )
    return float(r_grid[last + 1])


def compute_R1(kappa, r_grid, R0: float) -> float:
    """Smallest grid point R >= R0 with ``kappa(r) R (R - R0) >= 8`` for all
    sampled r >= R.  Faults when the condition is never met on the grid."""
    r_grid = np.asarray(r_grid, dtype=float)
    vals = _kappa_values(kappa, r_grid)
    suffix_min = np.minimum.accumulate(vals[::-1])[::-1]
    ok = (r_grid >= R0) & (suffix_min * r_grid * (r_grid - R0) >= 8.0)
    idx = np.where(ok)[0]
    if len(idx) == 0:
        raise ProfileError(
            f"kappa(r) R (R - R0) >= 8 never holds for r <= {r_grid[-1]:g}; "
            "extend r_max and rebuild"
        )
    return float(r_grid[idx.min()])


def _cumtrapz(y, h):
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum((y[1:] + y[:-1]) * (h / 2.0), out=out[1:])
    return out


@dataclass
class EberleProfile:
    """Tabulated construction on a uniform mesh over [0, r_max]."""

    r_grid: np.ndarray
    kappa_vals: np.ndarray
    R0: float
    R1: float
    phi_vals: np.ndarray
    Phi_vals: np.ndarray
    g_vals: np.ndarray
    f_vals: np.ndarray
    kappa1: float
    c_rate: float
    c_rate_argmin: float
    sigma0: float
    mesh_size: int

    @property
    def r_max(self) -> float:
        return float(self.r_grid[-1])

    def f(self, r):
        """Evaluate f by interpolation; beyond the mesh f continues linearly
        with its terminal slope kappa1 (phi and g are flat past R1)."""
        r = np.asarray(r, dtype=float)
        inside = np.interp(r, self.r_grid, self.f_vals)
        tail = self.f_vals[-1] + self.kappa1 * (r - self.r_max)
        return np.where(r <= self.r_max, inside, tail)


def build_profile(
    kappa,
    sigma0: float,
    r_max: float | None = None,
    mesh_size: int = DEFAULT_MESH,
) -> EberleProfile:
    """Tabulate the construction from a kappa callable.

    With ``r_max=None`` the radii are found on a coarse log-spaced scan first
    and the mesh then spans ``[0, 4 R1]`` (two-pass build).  An explicit
    ``r_max`` must leave ``R1 <= r_max / 2``.
    """
    if sigma0 <= 0:
        raise ValueError("sigma0 must be > 0")
    if mesh_size < 512:
        raise ValueError("mesh_size must be >= 512")
    if not callable(kappa):
        raise TypeError("kappa must be callable on radius arrays")

    if r_max is None:
        scan = np.geomspace(1e-3, SCAN_R_MAX, SCAN_POINTS)
        scan_vals = _kappa_values(kappa, scan)
        R0_scan = compute_R0(scan_vals, scan)
        R1_scan = compute_R1(scan_vals, scan, R0_scan)
        r_max = 4.0 * R1_scan

    r = np.linspace(0.0, float(r_max), mesh_size)
    h = r[1] - r[0]
    kv = np.empty(mesh_size)
    kv[1:] = _kappa_values(kappa, r[1:])
    kv[0] = kv[1]  # kappa is defined for r > 0; extend by the first mesh value

    R0 = compute_R0(kv, r)
    R1 = compute_R1(kv, r, R0)
    if R1 > r_max / 2.0:
        raise ProfileError(f"R1 = {R1:g} exceeds r_max/2 = {r_max / 2.0:g}; enlarge r_max")

    i_R0 = int(np.searchsorted(r, R0))
    i_R1 = int(np.searchsorted(r, R1))

    kneg = np.maximum(0.0, -kv)
    phi = np.exp(-0.25 * _cumtrapz(r * kneg, h))
    # kappa >= 0 past R0 on the grid, so the integrand vanishes and phi
    # plateaus exactly; pin the tail to make that float-exact.
    phi[i_R0:] = phi[i_R0]
    Phi = _cumtrapz(phi, h)
    ratio_int = _cumtrapz(Phi / phi, h)
    denom = 2.0 * ratio_int[i_R1]
    g = 1.0 - np.minimum(ratio_int, ratio_int[i_R1]) / denom
    f = _cumtrapz(phi * g, h)
    kappa1 = float(phi[i_R0] / 2.0)

    profile = EberleProfile(
        r_grid=r,
        kappa_vals=kv,
        R0=R0,
        R1=R1,
        phi_vals=phi,
        Phi_vals=Phi,
        g_vals=g,
        f_vals=f,
        kappa1=kappa1,
        c_rate=math.nan,
        c_rate_argmin=math.nan,
        sigma0=sigma0,
        mesh_size=mesh_size,
    )
    profile.c_rate, profile.c_rate_argmin = certify_contraction_rate(profile)
    return profile


def certify_contraction_rate(profile: EberleProfile):
    """Grid-certified contraction constant.

    Returns ``(c, argmin r)`` where c is the minimum over interior mesh points
    of ``-2 sigma0^2 [f''(r) - (1/4) r kappa(r) f'(r)] / f(r)`` with central
    finite differences.  Faults when the minimum is not positive (construction
    or resolution failure).
    """
    r, f, kv = profile.r_grid, profile.f_vals, profile.kappa_vals
    h = r[1] - r[0]
    fp = (f[2:] - f[:-2]) / (2.0 * h)
    fpp = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / (h * h)
    ri = r[1:-1]
    expr = -2.0 * profile.sigma0**2 * (fpp - 0.25 * ri * kv[1:-1] * fp) / f[1:-1]
    i = int(np.argmin(expr))
    c = float(expr[i])
    if c <= 0:
        raise ProfileError(
            f"certified rate is not positive (c = {c:g} at r = {ri[i]:g}); "
            "refine the mesh or check kappa"
        )
    return c, float(ri[i])


def check_profile(profile: EberleProfile, tol: float = 1e-8) -> dict:
    """Worst violations of the structural profile properties.

    Keys: monotonicity and plateaus of phi and g, concavity of f, the
    Phi/2 <= f <= Phi and kappa1 r <= f <= r sandwiches, and the endpoint
    values.  All values are violation amounts (<= tol when the profile is
    healthy); the caller asserts against its own tolerance.
    """
    r, phi, Phi, g, f = (
        profile.r_grid,
        profile.phi_vals,
        profile.Phi_vals,
        profile.g_vals,
        profile.f_vals,
    )
    i_R0 = int(np.searchsorted(r, profile.R0))
    i_R1 = int(np.searchsorted(r, profile.R1))
    second_diff = f[2:] - 2.0 * f[1:-1] + f[:-2]
    return {
        "phi_nonincreasing": float(np.max(np.diff(phi), initial=0.0)),
        "phi_at_0": abs(phi[0] - 1.0),
        "phi_plateau": float(np.max(np.abs(phi[i_R0:] - phi[i_R0]), initial=0.0)),
        "g_nonincreasing": float(np.max(np.diff(g), initial=0.0)),
        "g_at_0": abs(g[0] - 1.0),
        "g_plateau": float(np.max(np.abs(g[i_R1:] - 0.5), initial=0.0)),
        "f_at_0": abs(f[0]),
        "f_prime_at_0": abs(phi[0] * g[0] - 1.0),
        "f_concave": float(np.max(second_diff, initial=0.0)),
        "f_le_Phi": float(np.max(f - Phi, initial=0.0)),
        "f_ge_half_Phi": float(np.max(Phi / 2.0 - f, initial=0.0)),
        "f_le_r": float(np.max(f - r, initial=0.0)),
        "f_ge_kappa1_r": float(np.max(profile.kappa1 * r - f, initial=0.0)),
    }


# ---------------------------------------------------------------------------
# Sample-based distances
# ---------------------------------------------------------------------------


def w1_sorted(samples_a, samples_b) -> float:
    """Exact 1-Wasserstein distance between equal-weight 1-d sample sets:
    mean absolute difference of the order statistics."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"sample counts differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


@dataclass
class DfResult:
    value: float
    exact: bool
    method: str


def df_distance(
    samples_a,
    samples_b,
    profile: EberleProfile,
    assignment_limit: int = ASSIGNMENT_LIMIT,
) -> DfResult:
    """Transport distance with cost ``f(|x - y|)`` between equal-weight samples.

    Concave costs are not minimized by sorted pairing in general, so the exact
    mode solves the optimal assignment (O(N^3), up to ``assignment_limit``).
    Above the limit the sorted-pairing value is returned, flagged as an upper
    bound only.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise ValueError(f"sample shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n <= assignment_limit:
        dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        cost = profile.f(dist)
        rows, cols = linear_sum_assignment(cost)
        return DfResult(value=float(cost[rows, cols].mean()), exact=True, method="assignment")
    if a.shape[1] != 1:
        raise ValueError("sorted-pairing bound mode is available for 1-d samples only")
    value = float(np.mean(profile.f(np.abs(np.sort(a.ravel()) - np.sort(b.ravel())))))
    return DfResult(value=value, exact=False, method="sorted_upper_bound")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def profile_to_csv(profile: EberleProfile, path) -> None:
    """Table of ``r,kappa,phi,Phi,g,f`` plus a summary line with the radii,
    kappa1 and the certified rate."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("r,kappa,phi,Phi,g,f\n")
        for k in range(len(profile.r_grid)):
            fh.write(
                ",".join(
                    _fmt(v)
                    for v in (
                        profile.r_grid[k],
                        profile.kappa_vals[k],
                        profile.phi_vals[k],
                        profile.Phi_vals[k],
                        profile.g_vals[k],
                        profile.f_vals[k],
                    )
                )
                + "\n"
            )
        fh.write("R0,R1,kappa1,c_rate\n")
        fh.write(
            ",".join(_fmt(v) for v in (profile.R0, profile.R1, profile.kappa1, profile.c_rate))
            + "\n"
        )
