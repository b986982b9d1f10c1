"""Shared value types: tabulated distributions, solution tables, MC estimates.

CSV serialization puts metadata in leading '#'-comment lines, one
`# key: value` per entry, plus a `# sha256:` line over the payload so a
corrupted artifact is detected instead of silently reused.
"""

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GridCoverageError, IntegrityError

_FLOAT_FMT = "%.17g"


def _payload_hash(lines):
    digest = hashlib.sha256()
    for line in lines:
        digest.update(line.encode("ascii"))
        digest.update(b"\n")
    return digest.hexdigest()


def write_table(path, columns, meta=None):
    """Write named columns as CSV with a hashed metadata header."""
    names = list(columns)
    arrays = [np.asarray(columns[k], dtype=float) for k in names]
    n = arrays[0].shape[0]
    payload = [",".join(names)]
    for i in range(n):
        payload.append(",".join(_FLOAT_FMT % a[i] for a in arrays))
    with open(path, "w", encoding="ascii") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        fh.write(f"# sha256: {_payload_hash(payload)}\n")
        fh.write("\n".join(payload))
        fh.write("\n")


def read_table(path):
    """Read a CSV artifact, verifying its payload hash.

    Returns (columns: dict of name -> ndarray, meta: dict of str -> str).
    """
    meta = {}
    payload = []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                meta[key] = value
            elif line:
                payload.append(line)
    stored = meta.pop("sha256", None)
    if stored is None or _payload_hash(payload) != stored:
        raise IntegrityError(f"artifact {path} failed its content-hash check")
    names = payload[0].split(",")
    data = np.loadtxt(io.StringIO("\n".join(payload[1:])), delimiter=",", ndmin=2)
    return {name: data[:, j].copy() for j, name in enumerate(names)}, meta


@dataclass(frozen=True)
class McEstimate:
    """Point estimate with its standard error and provenance."""

    value: float
    std_error: float
    replicates: int
    seed: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.std_error < 0.0:
            raise ValueError("std_error must be nonnegative")
        if self.replicates <= 0:
            raise ValueError("replicates must be positive")


@dataclass(frozen=True)
class TabulatedDistribution:
    """A CDF (possibly defective) sampled on a time grid.

    The CDF is interpreted as piecewise linear between knots; `tail_patch`
    (constant, exponent) describes the mass still missing beyond the grid:
    total_mass - F(t) ~ constant * t**(-exponent).
    """

    grid: np.ndarray
    cdf: np.ndarray
    density: np.ndarray | None = None
    total_mass: float = 1.0
    tail_patch: tuple | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=float)
        cdf = np.ascontiguousarray(self.cdf, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "cdf", cdf)
        if grid.ndim != 1 or grid.shape != cdf.shape:
            raise ValueError("grid and cdf must be 1-d arrays of equal length")
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0.0):
            raise ValueError("grid must be strictly increasing and start at 0")
        if np.any(np.diff(cdf) < -1e-12):
            raise ValueError("cdf must be nondecreasing")
        if cdf[-1] > self.total_mass + 1e-9:
            raise ValueError("cdf exceeds total_mass")
        if self.density is not None:
            dens = np.ascontiguousarray(self.density, dtype=float)
            object.__setattr__(self, "density", dens)
            if dens.shape != grid.shape:
                raise ValueError("density must match the grid")
            if np.any(dens < -1e-12):
                raise ValueError("density must be nonnegative")
            cell = 0.5 * (dens[1:] + dens[:-1]) * np.diff(grid)
            if np.max(np.abs(cell - np.diff(cdf)), initial=0.0) > 1e-6:
                raise ValueError("density does not integrate to cdf increments")

    def cdf_at(self, t):
        """CDF value(s) at time(s) t; uses the tail patch beyond the grid."""
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.grid, self.cdf)
        beyond = t > self.grid[-1]
        if np.any(beyond):
            if self.tail_patch is None:
                out = np.where(beyond, self.cdf[-1], out)
            else:
                const, expo = self.tail_patch
                patched = self.total_mass - const * np.power(
                    np.maximum(t, self.grid[-1]), -expo
                )
                out = np.where(beyond, np.maximum(patched, self.cdf[-1]), out)
        return out if out.ndim else float(out)

    def cell_densities(self):
        """Average density per grid cell (piecewise-constant view)."""
        return np.diff(self.cdf) / np.diff(self.grid)

    def normalized(self):
        """Rescale to total mass 1 (conditioning a defective law)."""
        if self.total_mass <= 0.0:
            raise ValueError("cannot normalize a mass-zero distribution")
        scale = 1.0 / self.total_mass
        patch = None
        if self.tail_patch is not None:
            patch = (self.tail_patch[0] * scale, self.tail_patch[1])
        return TabulatedDistribution(
            self.grid, self.cdf * scale, None, 1.0, patch, dict(self.meta)
        )

    def require_coverage(self, t_max):
        exhausted = self.total_mass - self.cdf[-1] <= 1e-12
        if self.grid[-1] < t_max and self.tail_patch is None and not exhausted:
            raise GridCoverageError(
                f"table covers [0, {self.grid[-1]:g}] but {t_max:g} was "
                "requested and no tail patch is present"
            )

    def to_csv(self, path):
        meta = dict(self.meta)
        meta["total_mass"] = _FLOAT_FMT % self.total_mass
        if self.tail_patch is not None:
            meta["tail_patch_constant"] = _FLOAT_FMT % self.tail_patch[0]
            meta["tail_patch_exponent"] = _FLOAT_FMT % self.tail_patch[1]
        cols = {"t": self.grid, "cdf": self.cdf}
        if self.density is not None:
            cols["density"] = self.density
        write_table(path, cols, meta)

    @classmethod
    def from_csv(cls, path):
        cols, meta = read_table(path)
        total = float(meta.pop("total_mass", "1"))
        patch = None
        if "tail_patch_constant" in meta:
            patch = (
                float(meta.pop("tail_patch_constant")),
                float(meta.pop("tail_patch_exponent")),
            )
        return cls(
            cols["t"], cols["cdf"], cols.get("density"), total, patch, meta
        )


def exponential_cdf(grid, rate=1.0, mass=1.0, with_density=False):
    """Tabulated mass*(1 - exp(-rate t)) on `grid` (the origin-sojourn law).

    Knot-sampled densities only satisfy the trapezoid-consistency invariant
    on grids fine enough for the curvature (step^3 * rate^3 / 12 < 1e-6), so
    the density is attached only on request.
    """
    grid = np.asarray(grid, dtype=float)
    cdf = mass * (1.0 - np.exp(-rate * grid))
    dens = mass * rate * np.exp(-rate * grid) if with_density else None
    return TabulatedDistribution(grid, cdf, dens, mass, None)


@dataclass(frozen=True)
class SolutionTable:
    """Values of a labelled function of time on the solver grid."""

    grid: np.ndarray
    values: np.ndarray
    label: str
    params: dict = field(default_factory=dict, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=float)
        values = np.ascontiguousarray(self.values, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if grid.shape != values.shape or grid.ndim != 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if np.any(np.diff(grid) <= 0.0):
            raise ValueError("grid must be strictly increasing")

    def at(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t > self.grid[-1] + 1e-12) or np.any(t < self.grid[0] - 1e-12):
            raise GridCoverageError(
                f"{self.label} is tabulated on [{self.grid[0]:g}, "
                f"{self.grid[-1]:g}]; requested {t}"
            )
        out = np.interp(t, self.grid, self.values)
        return out if out.ndim else float(out)

    def to_csv(self, path):
        meta = {"label": self.label}
        meta.update({k: str(v) for k, v in self.params.items()})
        meta.update(self.meta)
        write_table(path, {"t": self.grid, "value": self.values}, meta)

    @classmethod
    def from_csv(cls, path):
        cols, meta = read_table(path)
        label = meta.pop("label", "value")
        return cls(cols["t"], cols["value"], label, {}, meta)
