"""Mixture renewal kernel, its density, and the renewal function.

The kernel mixes the exponential origin-sojourn law with the convolution of
that law and the return-time distribution.  Solvers treat the exponential
component by an exact exponential-integrator recursion and the convolution
remainder by Stieltjes-trapezoid sums against its increments, which keeps
the marching second order and exact on constants.
"""

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import CriticalityError, GridCoverageError, InstabilityError
from .tables import SolutionTable, TabulatedDistribution

CRITICALITY_TOL = 1e-4


def uniform_grid(step=0.05, t_max=2000.0):
    n = int(round(t_max / step))
    return np.linspace(0.0, n * step, n + 1)


def _require_uniform(grid):
    steps = np.diff(grid)
    h = steps[0]
    if grid[0] != 0.0 or not np.allclose(steps, h, rtol=1e-9, atol=0.0):
        raise ValueError("marching requires a uniform grid starting at 0")
    return h


def g1_convolution_parts(g2, grid):
    """Semi-analytic pieces of G_1 * G_2 on `grid`.

    Returns (w_raw, conv) with
      w_raw(t) = int_0^t exp(-(t-v)) dG_2(v)  =  (G_1 * G_2)'(t),
      conv(t)  = (G_1 * G_2)(t) = G_2(t) - w_raw(t),
    treating G_2 as piecewise uniform inside its cells (each cell integral is
    then exact, so the identities hold to machine precision).
    """
    grid = np.asarray(grid, dtype=float)
    if grid[-1] > g2.grid[-1] + 1e-9:
        raise GridCoverageError(
            f"return-time table covers [0, {g2.grid[-1]:g}] but the kernel "
            f"grid extends to {grid[-1]:g}"
        )
    w_raw = np.zeros_like(grid)
    dens = g2.cell_densities()
    # exp(-(t - v)) is negligible once t - v exceeds ~46 log units
    window = 46.0
    for lo, hi, rho in zip(g2.grid[:-1], g2.grid[1:], dens):
        if rho == 0.0:
            continue
        i0 = np.searchsorted(grid, lo, side="right")
        i1 = np.searchsorted(grid, hi + window, side="right")
        t = grid[i0:i1]
        upper = np.minimum(t, hi)
        w_raw[i0:i1] += rho * (np.exp(upper - t) - np.exp(lo - t))
    conv = np.interp(grid, g2.grid, g2.cdf) * g2.total_mass - w_raw
    return w_raw, conv


@dataclass(frozen=True)
class KernelSet:
    """Kernel K = alpha m1 G_1 + (1-alpha)(1-h) G_1 * G_2 and derived tables.

    `exp_mass` is the coefficient of the exponential component; `increments`
    are the per-cell masses of the convolution component, used by the
    Stieltjes marching; `k_remainder` is that component's density.
    """

    alpha: float
    m1: float
    h_d: float
    G2: TabulatedDistribution
    K: TabulatedDistribution
    k_density: np.ndarray
    c4: float | None
    grid: np.ndarray
    exp_mass: float
    k_remainder: np.ndarray
    conv_cdf: np.ndarray
    increments: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def mix_mass(self):
        return self.alpha * self.m1 + (1.0 - self.alpha) * (1.0 - self.h_d)

    def tail(self, t):
        """1 - K(t) evaluated from the analytic pieces."""
        t = np.asarray(t, dtype=float)
        conv = np.interp(t, self.grid, self.conv_cdf)
        return 1.0 - self.exp_mass * (1.0 - np.exp(-t)) - conv

    def to_csv(self, path):
        from .tables import write_table

        meta = {
            "alpha": f"{self.alpha:.17g}",
            "m1": f"{self.m1:.17g}",
            "h_d": f"{self.h_d:.17g}",
            "h_d_std_error": str(self.meta.get("h_std_error", "")),
            "c4": "" if self.c4 is None else f"{self.c4:.17g}",
            "grid": f"uniform h={self.grid[1] - self.grid[0]:g} "
                    f"t_max={self.grid[-1]:g}",
        }
        meta.update({k: str(v) for k, v in self.meta.items() if k not in meta})
        write_table(
            path,
            {"t": self.grid, "K": self.K.cdf, "k_density": self.k_density},
            meta,
        )


def build_kernel_set(alpha, offspring, h_d, g2, grid=None,
                     criticality_tol=CRITICALITY_TOL, c4=None):
    """Assemble the kernel tables from a calibrated (alpha, f, h, G_2) tuple.

    Rejects the input when the criticality identity
    alpha f'(1) + (1 - alpha)(1 - h) = 1 fails beyond `criticality_tol`,
    since the downstream solver assumes a proper kernel.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if abs(g2.total_mass - 1.0) > 1e-9:
        raise ValueError("G_2 must be proper (normalize the return-time law)")
    m1 = offspring.mean
    mass = alpha * m1 + (1.0 - alpha) * (1.0 - h_d)
    if abs(mass - 1.0) > criticality_tol:
        raise CriticalityError(
            f"alpha f'(1) + (1-alpha)(1-h) = {mass!r} is not 1 within "
            f"{criticality_tol:g}; calibrate alpha first"
        )
    if grid is None:
        grid = uniform_grid(0.05, min(2000.0, float(g2.grid[-1])))
    grid = np.asarray(grid, dtype=float)
    _require_uniform(grid)
    p = (1.0 - alpha) * (1.0 - h_d)
    w_raw, conv_raw = g1_convolution_parts(g2, grid)
    k_remainder = p * w_raw
    conv_cdf = p * conv_raw
    exp_mass = alpha * m1
    k_values = exp_mass * (1.0 - np.exp(-grid)) + conv_cdf
    k_density = exp_mass * np.exp(-grid) + k_remainder
    if c4 is None and g2.tail_patch is not None:
        const, expo = g2.tail_patch
        d = 2.0 * (expo + 1.0)
        c4 = (1.0 - alpha) * (1.0 - h_d) * (d - 2.0) / 2.0 * const
    meta = {
        "h_std_error": g2.meta.get("escape_std_error"),
        "spec_hash": g2.meta.get("spec_hash"),
        "g2_seed": g2.meta.get("seed"),
    }
    kernel_cdf = TabulatedDistribution(
        grid, k_values, None, mass, None, {"label": "K"}
    )
    return KernelSet(
        alpha=float(alpha),
        m1=float(m1),
        h_d=float(h_d),
        G2=g2,
        K=kernel_cdf,
        k_density=k_density,
        c4=None if c4 is None else float(c4),
        grid=grid,
        exp_mass=float(exp_mass),
        k_remainder=k_remainder,
        conv_cdf=conv_cdf,
        increments=np.diff(conv_cdf),
        meta=meta,
    )


def stieltjes_convolve(f_dist, g_dist, grid):
    """(F * G)(t) = int_0^t F(t - u) dG(u) by trapezoidal Stieltjes sums.

    Commutes with its arguments within quadrature tolerance and multiplies
    total masses.  Both inputs must span the target grid (directly or via a
    tail patch).
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("target grid must be strictly increasing from 0")
    f_dist.require_coverage(grid[-1])
    g_dist.require_coverage(grid[-1])
    atom = g_dist.cdf[0]
    out = np.empty_like(grid)
    g_knots = g_dist.grid
    g_vals = g_dist.cdf
    for i, t in enumerate(grid):
        j = np.searchsorted(g_knots, t, side="right")
        knots = g_knots[:j]
        vals = g_vals[:j]
        if j < g_knots.shape[0] and t > knots[-1]:
            knots = np.append(knots, t)
            vals = np.append(vals, g_dist.cdf_at(t))
        dg = np.diff(vals)
        f_left = f_dist.cdf_at(t - knots[:-1])
        f_right = f_dist.cdf_at(t - knots[1:])
        out[i] = f_dist.cdf_at(t) * atom + 0.5 * ((f_left + f_right) * dg).sum()
    total = f_dist.total_mass * g_dist.total_mass
    return TabulatedDistribution(grid, np.minimum(out, total), None, total)


@nb.njit(cache=True)
def _renewal_march(h, n, exp_mass, exp_rate, d_rem):
    """March V = 1 + exp_mass * (Exp-CDF * V) + (remainder * V).

    The exponential part uses the exact piecewise-linear recursion
    J' = exp_rate (V - J); the remainder part uses Stieltjes-trapezoid sums
    against the increments `d_rem` (d_rem[j] = mass of cell j+1).
    """
    v = np.empty(n, dtype=np.float64)
    v[0] = 1.0
    decay = np.exp(-exp_rate * h)
    e1 = 1.0 - decay
    phi_b = 1.0 - e1 / (exp_rate * h)
    phi_a = e1 - phi_b
    j_state = 0.0
    half_first = 0.5 * d_rem[0] if d_rem.shape[0] > 0 else 0.0
    for i in range(1, n):
        acc = 0.0
        # cells j = 2..i pair V[i-j] and V[i-j+1]; cell 1 handled implicitly
        for j in range(2, i + 1):
            acc += (v[i - j] + v[i - j + 1]) * d_rem[j - 1]
        acc *= 0.5
        rhs = 1.0 + exp_mass * (decay * j_state + phi_a * v[i - 1])
        rhs += acc + half_first * v[i - 1]
        denom = 1.0 - exp_mass * phi_b - half_first
        v[i] = rhs / denom
        j_state = decay * j_state + phi_a * v[i - 1] + phi_b * v[i]
    return v


def renewal_function(kernel, grid=None, exp_component=None):
    """Renewal function V(t) = sum_j K^{*j}(t), by time marching.

    Solves V = 1 + K * V (second-kind Volterra).  `kernel` is either a
    KernelSet (its exponential/remainder split is used directly) or a
    TabulatedDistribution; in the latter case `exp_component=(mass, rate)`
    optionally declares an analytic exponential part of the kernel, which is
    then handled by the exact recursion instead of quadrature.
    """
    if isinstance(kernel, KernelSet):
        grid = kernel.grid if grid is None else np.asarray(grid, dtype=float)
        h = _require_uniform(grid)
        if grid is not kernel.grid:
            conv = np.interp(grid, kernel.grid, kernel.conv_cdf)
            d_rem = np.diff(conv)
        else:
            d_rem = kernel.increments
        exp_mass, exp_rate = kernel.exp_mass, 1.0
        label_meta = {"kernel": "mixture", "alpha": kernel.alpha}
    else:
        if grid is None:
            raise ValueError("a target grid is required for a tabulated kernel")
        grid = np.asarray(grid, dtype=float)
        h = _require_uniform(grid)
        if kernel.total_mass > 1.0 + 1e-9:
            raise ValueError("kernel mass exceeds 1; no renewal function")
        values = kernel.cdf_at(grid)
        if exp_component is not None:
            exp_mass, exp_rate = exp_component
            values = values - exp_mass * (1.0 - np.exp(-exp_rate * grid))
            if np.min(values) < -1e-9:
                raise ValueError(
                    "declared exponential component exceeds the kernel"
                )
            values = np.maximum(values, 0.0)
        else:
            exp_mass, exp_rate = 0.0, 1.0
        d_rem = np.diff(values)
        label_meta = {"kernel": "tabulated"}
    v = _renewal_march(h, grid.shape[0], exp_mass, exp_rate,
                       np.ascontiguousarray(d_rem))
    drops = np.diff(v)
    if drops.size and drops.min() < -1e-8 * max(1.0, np.abs(v).max()):
        raise InstabilityError(
            f"renewal marching produced a negative increment "
            f"({drops.min():.3e}); refine the grid step"
        )
    return SolutionTable(grid, np.maximum.accumulate(v), "V", {}, label_meta)
