"""The underlying continuous-time random walk on Z^d.

Exact transition probabilities at the origin via torus (Fourier) quadrature,
excursion sampling with horizon censoring, escape-probability estimation and
the return-time tabulation that feeds every kernel downstream.
"""

import hashlib
from collections import namedtuple
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import (
    ExtrapolationError,
    QuadratureResolutionError,
    TabulationQualityError,
    UnsupportedDimensionError,
)
from .rng import (
    next_double,
    next_exponential,
    next_index,
    next_u64,
    stream_state,
)
from .tables import McEstimate, TabulatedDistribution


def _lattice_index(vectors):
    """Index of the sublattice of Z^d generated by the rows (0 = not full rank).

    Integer Gaussian elimination with Euclidean row reductions; the support
    is irreducible exactly when the index is 1.
    """
    rows = [[int(v) for v in row] for row in vectors]
    d = len(rows[0])
    det = 1
    for col in range(d):
        pivot = None
        while True:
            pivot = None
            for i in range(col, len(rows)):
                if rows[i][col] != 0 and (
                    pivot is None or abs(rows[i][col]) < abs(rows[pivot][col])
                ):
                    pivot = i
            if pivot is None:
                return 0
            rows[col], rows[pivot] = rows[pivot], rows[col]
            done = True
            for i in range(col + 1, len(rows)):
                if rows[i][col] != 0:
                    q = rows[i][col] // rows[col][col]
                    rows[i] = [a - q * b for a, b in zip(rows[i], rows[col])]
                    if rows[i][col] != 0:
                        done = False
            if done:
                break
        det *= rows[col][col]
    return abs(det)


@dataclass(frozen=True)
class WalkSpec:
    """Rate matrix a(.) of a symmetric homogeneous walk with finite support.

    `jumps` is an (m, d) integer array of jump vectors, `rates` the matching
    jump rates.  The total rate a equals -a(0,0); pi is the first-step law.
    Downstream operations that rely on transience require dimension >= 3.
    """

    dimension: int
    jumps: np.ndarray
    rates: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        jumps = np.ascontiguousarray(self.jumps, dtype=np.int64)
        rates = np.ascontiguousarray(self.rates, dtype=float)
        if jumps.ndim != 2 or jumps.shape[1] != self.dimension:
            raise ValueError("jumps must be an (m, d) integer array")
        if rates.shape != (jumps.shape[0],):
            raise ValueError("rates must match jumps")
        keep = rates > 0.0
        jumps, rates = jumps[keep], rates[keep]
        if jumps.shape[0] == 0:
            raise ValueError("support is empty")
        if np.any(~np.any(jumps, axis=1)):
            raise ValueError("the zero vector cannot carry a jump rate")
        object.__setattr__(self, "jumps", jumps)
        object.__setattr__(self, "rates", rates)
        # symmetry a(x) = a(-x)
        table = {tuple(v): r for v, r in zip(jumps.tolist(), rates)}
        if len(table) != jumps.shape[0]:
            raise ValueError("duplicate jump vectors in support")
        for vec, rate in table.items():
            mirror = tuple(-c for c in vec)
            if mirror not in table or abs(table[mirror] - rate) > 1e-12 * max(rate, 1.0):
                raise ValueError(f"support is not symmetric at {vec}")
        if _lattice_index(jumps) != 1:
            raise ValueError("support does not generate Z^d (walk is reducible)")

    @classmethod
    def simple(cls, dimension=4, rate=1.0):
        """Nearest-neighbor walk: rate/(2d) on each of the 2d unit vectors."""
        if rate <= 0.0:
            raise ValueError("rate must be positive")
        eye = np.eye(dimension, dtype=np.int64)
        jumps = np.vstack([eye, -eye])
        rates = np.full(2 * dimension, rate / (2.0 * dimension))
        return cls(dimension, jumps, rates, {"preset": "simple", "rate": rate})

    @property
    def total_rate(self):
        """a = sum of jump rates = -a(0,0)."""
        return float(self.rates.sum())

    @property
    def second_moment(self):
        """b^2 = sum |x|^2 a(x)."""
        return float((self.rates * (self.jumps.astype(float) ** 2).sum(axis=1)).sum())

    @property
    def jump_rates(self):
        return {tuple(v): float(r) for v, r in zip(self.jumps.tolist(), self.rates)}

    @property
    def first_step_law(self):
        return self.rates / self.total_rate

    def spec_hash(self):
        parts = [f"d={self.dimension}"]
        order = np.lexsort(self.jumps.T[::-1])
        for i in order:
            parts.append(
                ",".join(map(str, self.jumps[i])) + f":{self.rates[i]:.17g}"
            )
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]

    def scaled(self, factor):
        """Walk with all rates multiplied by `factor` (time change)."""
        return WalkSpec(self.dimension, self.jumps, self.rates * factor)

    def permuted(self, perm):
        """Walk with coordinate axes relabelled by permutation `perm`."""
        return WalkSpec(self.dimension, self.jumps[:, list(perm)], self.rates)


@dataclass(frozen=True)
class Returned:
    """Excursion came back to the origin after `duration` > 0."""

    duration: float

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("return duration must be positive")


@dataclass(frozen=True)
class NotReturnedBy:
    """Excursion was still away from the origin at the censoring horizon."""

    horizon: float


def characteristic_exponent(spec, theta):
    """Fourier multiplier of the generator: sum_x a(x) (cos(theta.x) - 1)."""
    theta = np.asarray(theta, dtype=float)
    phase = spec.jumps.astype(float) @ theta
    return float(spec.rates @ (np.cos(phase) - 1.0))


def _axis_groups(spec):
    """Per-axis (offsets, rates) when every jump is axis-aligned, else None."""
    aligned = (np.count_nonzero(spec.jumps, axis=1) == 1)
    if not np.all(aligned):
        return None
    groups = []
    for axis in range(spec.dimension):
        on_axis = spec.jumps[:, axis] != 0
        groups.append((spec.jumps[on_axis, axis].astype(float), spec.rates[on_axis]))
    return groups


def _p_factorized(groups, t, nodes):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    theta = -np.pi + (np.arange(nodes) + 0.5) * (2.0 * np.pi / nodes)
    result = np.ones_like(t)
    for offsets, rates in groups:
        exponent = (np.cos(np.outer(theta, offsets)) - 1.0) @ rates
        result *= np.exp(np.outer(t, exponent)).mean(axis=1)
    return result


def _p_tensor(spec, t, nodes, chunk=True):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    theta = -np.pi + (np.arange(nodes) + 0.5) * (2.0 * np.pi / nodes)
    d = spec.dimension
    acc = np.zeros_like(t)
    axes_rest = [theta] * (d - 1)
    rest_mesh = np.meshgrid(*axes_rest, indexing="ij") if d > 1 else []
    for first in theta:
        exponent = np.zeros(nodes ** (d - 1))
        flat_rest = [m.ravel() for m in rest_mesh]
        for vec, rate in zip(spec.jumps, spec.rates):
            phase = vec[0] * first
            for j in range(1, d):
                phase = phase + vec[j] * flat_rest[j - 1]
            exponent += rate * (np.cos(phase) - 1.0)
        for i, ti in enumerate(t):
            acc[i] += np.exp(ti * exponent).sum()
    return acc / nodes ** d


def _p_origin_many(spec, t, rtol=1e-9, start_nodes=64, max_nodes=None):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0.0):
        raise ValueError("t must be nonnegative")
    groups = _axis_groups(spec)
    if groups is not None:
        evaluate, cap = (lambda n: _p_factorized(groups, t, n)), max_nodes or 1 << 16
    else:
        evaluate, cap = (lambda n: _p_tensor(spec, t, n)), max_nodes or 128
    nodes = start_nodes
    prev = evaluate(nodes)
    while True:
        if 2 * nodes > cap:
            raise QuadratureResolutionError(
                f"torus quadrature did not reach rtol={rtol:g} within "
                f"{cap} nodes per axis; refine the node cap"
            )
        nodes *= 2
        cur = evaluate(nodes)
        if np.all(np.abs(cur - prev) <= rtol * np.abs(cur)):
            return cur
        prev = cur


def transition_probability_origin(spec, t, rtol=1e-9, nodes=64, max_nodes=None):
    """p(t; 0) = (2 pi)^-d * integral of exp(t a_hat(theta)) over the torus.

    Deterministic tensor quadrature with per-axis node doubling until the
    relative change drops below `rtol`; raises QuadratureResolutionError when
    the node cap is hit first.
    """
    return float(_p_origin_many(spec, t, rtol, nodes, max_nodes)[0])


@dataclass(frozen=True)
class GammaEstimate:
    """Fitted constant of the p(t;0) ~ gamma * t^(-d/2) decay."""

    value: float
    error: float
    times: np.ndarray
    ladder: np.ndarray

    @property
    def relative_error(self):
        return self.error / self.value


def gamma_d(spec, t0=100.0, rungs=7, converge_rtol=5e-3, quad_rtol=1e-11):
    """Extrapolate gamma_d = lim t^{d/2} p(t; 0) over a geometric ladder.

    Ladder t_k = t0 * 2^k; convergence is declared when successive rescaled
    values differ by less than `converge_rtol`, then a Richardson step with
    the empirically estimated decay ratio removes the leading correction.
    """
    times = t0 * 2.0 ** np.arange(rungs)
    p = _p_origin_many(spec, times, rtol=quad_rtol)
    ladder = p * times ** (spec.dimension / 2.0)
    diffs = np.diff(ladder)
    rel = np.abs(diffs[-1]) / ladder[-1]
    if rel > converge_rtol:
        raise ExtrapolationError(
            f"ladder not converged: last relative step {rel:.3e} exceeds "
            f"{converge_rtol:g}; raise t0 or the rung count"
        )
    value = ladder[-1]
    error = abs(diffs[-1])
    if abs(diffs[-2]) > 0.0:
        ratio = diffs[-1] / diffs[-2]
        if 0.0 < ratio < 0.9:
            correction = diffs[-1] * ratio / (1.0 - ratio)
            value = ladder[-1] + correction
            error = abs(correction) + abs(diffs[-1]) * ratio ** 2
    return GammaEstimate(float(value), float(error), times, ladder)


def gamma_local_clt(spec):
    """Closed-form isotropic shortcut (2 pi)^{-d/2} det(M)^{-1/2}.

    M is the rate-covariance matrix sum_x x x^T a(x).  Recorded as a derived
    cross-check against the extrapolated value, never assumed by the pipeline.
    """
    x = spec.jumps.astype(float)
    m = (x[:, :, None] * x[:, None, :] * spec.rates[:, None, None]).sum(axis=0)
    return float((2.0 * np.pi) ** (-spec.dimension / 2.0) / np.sqrt(np.linalg.det(m)))


# ---------------------------------------------------------------------------
# Monte Carlo: excursions, escape probability, return-time tabulation
# ---------------------------------------------------------------------------


@nb.njit(nb.float64(nb.uint64[:], nb.float64, nb.float64), cache=True,
         inline="always")
def _gamma_variate(state, shape, rate):
    """Marsaglia-Tsang Gamma(shape, rate) sampler, shape >= 1."""
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
        u1 = (np.float64(next_u64(state) >> np.uint64(11)) + 1.0) * 1.1102230246251565e-16
        x = np.sqrt(-2.0 * np.log(u1)) * np.cos(6.283185307179586 * next_double(state))
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = next_double(state)
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            return d * v / rate
        if np.log(u) < 0.5 * x2 + d * (1.0 - v + np.log(v)):
            return d * v / rate


@nb.njit(cache=True)
def _one_excursion(state, cum, vecs, axis, delta, uniform, m, rate, horizon,
                   step_cap):
    """First step ~ pi, then walk until origin or censoring.

    Holding times are iid Exp(rate) independent of the jump chain, so the
    chain is run first (counting steps S) and one Gamma(S, rate) draw gives
    the elapsed time; the joint law of (outcome, duration) is unchanged.
    `step_cap` is set so that Gamma(step_cap, rate) <= horizon has negligible
    probability; paths still away after that many steps are censored.

    The body is deliberately monolithic: per-step helper calls defeat the
    jit inliner and cost an order of magnitude in throughput.

    Returns (returned, elapsed); elapsed for a censored path is `horizon`.
    """
    dim = vecs.shape[1]
    pos = np.zeros(dim, dtype=np.int64)
    if uniform:
        k = np.int64(next_double(state) * m)
        if k >= m:
            k = m - 1
    else:
        k = next_index(state, cum)
    nonzero = 0
    for j in range(dim):
        pos[j] = vecs[k, j]
        if pos[j] != 0:
            nonzero += 1
    steps = 1
    while nonzero != 0:
        if steps >= step_cap:
            return False, horizon
        if uniform:
            k = np.int64(next_double(state) * m)
            if k >= m:
                k = m - 1
        else:
            k = next_index(state, cum)
        ax = axis[k]
        if ax >= 0:
            old = pos[ax]
            new = old + delta[k]
            pos[ax] = new
            nonzero += (old == 0) - (new == 0)
        else:
            for j in range(dim):
                c = vecs[k, j]
                if c != 0:
                    old = pos[j]
                    pos[j] = old + c
                    if old == 0:
                        nonzero += 1
                    elif pos[j] == 0:
                        nonzero -= 1
        steps += 1
    elapsed = _gamma_variate(state, np.float64(steps), rate)
    if elapsed > horizon:
        return False, horizon
    return True, elapsed


@nb.njit(nb.int64(nb.float64, nb.float64), cache=True, inline="always")
def _step_cap(rate, horizon):
    mean = rate * horizon
    return np.int64(mean + 10.0 * np.sqrt(mean) + 50.0)


@nb.njit(cache=True)
def _escape_batch(seed, n, cum, vecs, axis, delta, uniform, m, rate, horizon):
    escaped = 0
    cap = _step_cap(rate, horizon)
    for i in range(n):
        state = stream_state(np.uint64(seed), np.uint64(i))
        returned, _ = _one_excursion(
            state, cum, vecs, axis, delta, uniform, m, rate, horizon, cap
        )
        if not returned:
            escaped += 1
    return escaped


@nb.njit(cache=True)
def _return_cdf_batch(seed, n, cum, vecs, axis, delta, uniform, m, rate,
                      horizon, grid):
    cells = np.zeros(grid.shape[0], dtype=np.int64)
    beyond = 0
    escaped = 0
    gmax = grid[-1]
    cap = _step_cap(rate, horizon)
    for i in range(n):
        state = stream_state(np.uint64(seed), np.uint64(i))
        returned, tau = _one_excursion(
            state, cum, vecs, axis, delta, uniform, m, rate, horizon, cap
        )
        if not returned:
            escaped += 1
        elif tau > gmax:
            beyond += 1
        else:
            lo, hi = 0, grid.shape[0] - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if grid[mid] < tau:
                    lo = mid + 1
                else:
                    hi = mid
            cells[lo] += 1
    return cells, beyond, escaped


@nb.njit(cache=True)
def _occupancy_batch(seed, n, cum, vecs, axis, delta, uniform, m, rate, t):
    at_origin = 0
    dim = vecs.shape[1]
    for i in range(n):
        state = stream_state(np.uint64(seed), np.uint64(i))
        pos = np.zeros(dim, dtype=np.int64)
        nonzero = 0
        clock = next_exponential(state, rate)
        while clock <= t:
            if uniform:
                k = np.int64(next_double(state) * m)
                if k >= m:
                    k = m - 1
            else:
                k = next_index(state, cum)
            ax = axis[k]
            if ax >= 0:
                old = pos[ax]
                new = old + delta[k]
                pos[ax] = new
                nonzero += (old == 0) - (new == 0)
            else:
                for j in range(dim):
                    c = vecs[k, j]
                    if c != 0:
                        old = pos[j]
                        pos[j] = old + c
                        if old == 0:
                            nonzero += 1
                        elif pos[j] == 0:
                            nonzero -= 1
            clock += next_exponential(state, rate)
        if nonzero == 0:
            at_origin += 1
    return at_origin


JumpTable = namedtuple("JumpTable", ["cum", "vecs", "axis", "delta", "uniform", "m"])


def jump_table(spec):
    """Sampling tables for the first-step law / embedded jump chain."""
    cum = np.cumsum(spec.first_step_law)
    cum[-1] = 1.0
    vecs = spec.jumps
    m = vecs.shape[0]
    axis = np.full(m, -1, dtype=np.int64)
    delta = np.zeros(m, dtype=np.int64)
    single = np.count_nonzero(vecs, axis=1) == 1
    for i in np.nonzero(single)[0]:
        j = int(np.nonzero(vecs[i])[0][0])
        axis[i] = j
        delta[i] = vecs[i, j]
    uniform = bool(np.all(np.abs(np.diff(spec.rates)) <= 1e-15 * max(spec.rates[0], 1e-300)))
    return JumpTable(cum, vecs, axis, delta, uniform, np.int64(m))


def sample_excursion(spec, horizon, rng_stream):
    """Draw one excursion from the origin, censored at `horizon`."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    tb = jump_table(spec)
    rate = spec.total_rate
    returned, elapsed = _one_excursion(
        rng_stream.state, tb.cum, tb.vecs, tb.axis, tb.delta, tb.uniform,
        tb.m, rate, horizon, _step_cap(rate, horizon),
    )
    if returned:
        return Returned(elapsed)
    return NotReturnedBy(horizon)


def _require_transient(spec):
    if spec.dimension < 3:
        raise UnsupportedDimensionError(
            f"d = {spec.dimension} walks are recurrent (escape probability 0); "
            "this artifact requires d >= 3"
        )


def estimate_escape_probability(spec, replicates, horizon, seed):
    """Fraction of excursions censored at `horizon` (escape estimate).

    Censoring biases the estimate upward by O(horizon^{1 - d/2}); the bound
    scale is recorded in the estimate metadata.
    """
    _require_transient(spec)
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    tb = jump_table(spec)
    escaped = _escape_batch(
        np.uint64(seed), replicates, tb.cum, tb.vecs, tb.axis, tb.delta,
        tb.uniform, tb.m, spec.total_rate, float(horizon),
    )
    p = escaped / replicates
    se = np.sqrt(p * (1.0 - p) / replicates)
    return McEstimate(
        p,
        float(se),
        replicates,
        int(seed),
        {
            "horizon": float(horizon),
            "bias_order": float(horizon) ** (1.0 - spec.dimension / 2.0),
        },
    )


def tabulate_return_cdf(
    spec,
    grid,
    replicates,
    horizon,
    seed,
    min_cell_count=25,
    gamma=None,
    splice=None,
):
    """Normalized return-time CDF G_2 on `grid` from excursion samples.

    The tabulated part is the empirical CDF at the grid knots (exact there,
    linear between); mass beyond the grid is described by the power-law tail
    patch with constants from `gamma` (or a fresh extrapolation) and the
    escape estimate of the same run.
    """
    _require_transient(spec)
    grid = np.ascontiguousarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("grid must be strictly increasing and start at 0")
    if grid[-1] > horizon:
        raise ValueError("grid max must not exceed the censoring horizon")
    tb = jump_table(spec)
    cells, beyond, escaped = _return_cdf_batch(
        np.uint64(seed), replicates, tb.cum, tb.vecs, tb.axis, tb.delta,
        tb.uniform, tb.m, spec.total_rate, float(horizon), grid,
    )
    returned = int(cells.sum() + beyond)
    if returned == 0:
        raise TabulationQualityError("no excursion returned within the horizon")
    thin = np.nonzero(cells[1:] < min_cell_count)[0]
    if thin.size:
        j = int(thin[0]) + 1
        raise TabulationQualityError(
            f"cell ({grid[j - 1]:g}, {grid[j]:g}] holds {int(cells[j])} returned "
            f"samples, fewer than the configured minimum {min_cell_count}"
        )
    h_hat = escaped / replicates
    se = np.sqrt(h_hat * (1.0 - h_hat) / replicates)
    cdf = np.cumsum(cells) / returned
    cdf[0] = 0.0
    d = spec.dimension
    if gamma is None:
        gamma = gamma_d(spec)
    patch_const = (
        2.0 * spec.total_rate * gamma.value * h_hat ** 2
        / ((1.0 - h_hat) * (d - 2.0))
    )
    meta = {
        "spec_hash": spec.spec_hash(),
        "seed": int(seed),
        "replicates": int(replicates),
        "horizon": float(horizon),
        "splice": float(splice if splice is not None else grid[-1]),
        "escape_probability": float(h_hat),
        "escape_std_error": float(se),
        "gamma": gamma.value,
        "gamma_error": gamma.error,
        "returned_samples": returned,
        "returned_beyond_grid": int(beyond),
        "total_rate": spec.total_rate,
    }
    return TabulatedDistribution(
        grid, np.minimum(cdf, 1.0), None, 1.0,
        (patch_const, d / 2.0 - 1.0), meta,
    )


def geometric_grid(t_first=0.05, t_max=2000.0, cells_per_decade=8,
                   coarse_from=200.0, coarse_cells_per_decade=4):
    """Tabulation grid: 0, then geometric knots (dense near 0, sparse tail).

    Beyond `coarse_from` the knot density drops to `coarse_cells_per_decade`
    so tail cells keep enough returned samples per cell.
    """
    if coarse_from is None or coarse_from >= t_max:
        count = int(round(cells_per_decade * np.log10(t_max / t_first))) + 1
        knots = np.geomspace(t_first, t_max, count)
        knots[-1] = t_max
        return np.concatenate(([0.0], knots))
    n1 = int(round(cells_per_decade * np.log10(coarse_from / t_first))) + 1
    head = np.geomspace(t_first, coarse_from, n1)
    n2 = int(round(coarse_cells_per_decade * np.log10(t_max / coarse_from))) + 1
    tail = np.geomspace(coarse_from, t_max, n2)
    tail[-1] = t_max
    return np.concatenate(([0.0], head, tail[1:]))


def estimate_origin_occupancy(spec, t, replicates, seed):
    """MC estimate of P(walk at origin at time t), for quadrature cross-checks."""
    tb = jump_table(spec)
    hits = _occupancy_batch(
        np.uint64(seed), replicates, tb.cum, tb.vecs, tb.axis, tb.delta,
        tb.uniform, tb.m, spec.total_rate, float(t),
    )
    p = hits / replicates
    se = np.sqrt(p * (1.0 - p) / replicates)
    return McEstimate(p, float(se), replicates, int(seed), {"t": float(t)})
