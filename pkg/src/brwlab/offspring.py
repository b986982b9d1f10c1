"""Offspring laws as probability generating functions given by coefficients."""

import numpy as np

from .errors import DerivativeOrderError


class OffspringLaw:
    """PGF f(s) = sum_k f_k s^k with evaluable derivatives at s = 1.

    `truncated` marks a law whose coefficient sequence was numerically
    truncated from an infinite-support family; such laws are treated as
    infinite-support by the polynomial-bracketing construction even though
    the stored sequence is finite.  `truncation_mass` records the dropped
    tail probability.
    """

    def __init__(self, coefficients, name="custom", truncated=False,
                 truncation_mass=0.0):
        coeffs = np.ascontiguousarray(coefficients, dtype=float)
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise ValueError("coefficients must be a nonempty 1-d sequence")
        if np.any(coeffs < -1e-15):
            raise ValueError("coefficients must be nonnegative")
        total = coeffs.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"coefficients sum to {total!r}, not 1")
        self.coefficients = np.clip(coeffs, 0.0, None)
        self.name = name
        self.truncated = bool(truncated)
        self.truncation_mass = float(truncation_mass)
        self._derivatives = {}

    @property
    def max_degree(self):
        return self.coefficients.size - 1

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        for c in self.coefficients[::-1]:
            out = out * s + c
        return out if out.ndim else float(out)

    def derivative_at_one(self, order):
        """f^(order)(1) = sum_k k(k-1)...(k-order+1) f_k (exact finite sum)."""
        if order < 0:
            raise DerivativeOrderError("derivative order must be >= 0")
        if order == 0:
            return 1.0
        if order not in self._derivatives:
            k = np.arange(self.coefficients.size, dtype=float)
            falling = np.ones_like(k)
            for j in range(order):
                falling *= np.maximum(k - j, 0.0)
            self._derivatives[order] = float(falling @ self.coefficients)
        return self._derivatives[order]

    @property
    def mean(self):
        return self.derivative_at_one(1)

    @property
    def variance(self):
        m = self.mean
        return self.derivative_at_one(2) + m - m * m

    def cumulative(self):
        """Cumulative coefficient table for inverse sampling."""
        return np.cumsum(self.coefficients)

    def require_second_moment(self):
        """Hypothesis-level check: f''(1) in (0, inf)."""
        f2 = self.derivative_at_one(2)
        if not (0.0 < f2 < np.inf):
            raise DerivativeOrderError(
                f"law {self.name!r} has f''(1) = {f2:g}; a finite positive "
                "second derivative at 1 is required here"
            )
        return f2

    def spec_key(self):
        return (self.name, tuple(np.round(self.coefficients, 15)))

    def __repr__(self):
        return (f"OffspringLaw(name={self.name!r}, degree={self.max_degree}, "
                f"mean={self.mean:.6g})")


def binary_law(p_two=0.75):
    """Either no children or two: f(s) = (1-p) + p s^2, mean 2p."""
    if not 0.0 < p_two <= 1.0:
        raise ValueError("p_two must lie in (0, 1]")
    return OffspringLaw([1.0 - p_two, 0.0, p_two], name=f"binary({p_two:g})")

def single_child_law():
    """Deterministic single child, f(s) = s."""
    return OffspringLaw([0.0, 1.0], name="single")


def certain_death_law():
    """No children ever, f(s) = 1."""
    return OffspringLaw([1.0], name="certain_death")


def geometric_law(p=0.4, tail_tol=1e-15):
    """Geometric on {0, 1, ...}: f_k = p (1-p)^k, mean (1-p)/p, truncated.

    The sequence is cut once the remaining tail mass drops below
    `tail_tol` and renormalized; the law is flagged `truncated` so
    downstream consumers treat it as an infinite-support family.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    n = int(np.ceil(np.log(tail_tol) / np.log1p(-p))) + 1
    k = np.arange(n)
    coeffs = p * (1.0 - p) ** k
    dropped = (1.0 - p) ** n
    coeffs /= coeffs.sum()
    return OffspringLaw(coeffs, name=f"geometric({p:g})", truncated=True,
                        truncation_mass=dropped)


_PRESETS = {
    "binary": binary_law,
    "geometric-truncated": geometric_law,
    "single": single_child_law,
    "certain-death": certain_death_law,
}


def preset_law(name, **kwargs):
    if name not in _PRESETS:
        raise ValueError(f"unknown offspring preset {name!r}; "
                         f"choose from {sorted(_PRESETS)}")
    return _PRESETS[name](**kwargs)
