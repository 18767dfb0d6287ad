"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """A point or time lies outside the admissible domain."""


class BarrierError(ValueError):
    """det(grad y) <= 0 somewhere; the state left GL+(2)."""

    def __init__(self, message, point=None, index=None, det=None):
        super().__init__(message)
        self.point = point
        self.index = index
        self.det = det


class ResolutionError(RuntimeError):
    """Rasterisation would need more samples than allowed."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, best=None, grad_norm=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm
        self.iterations = iterations


class ConstraintInfeasibleError(RuntimeError):
    """Overlap excess stays above tolerance at the largest penalty weight."""

    def __init__(self, message, best=None, excess=None, kappa=None):
        super().__init__(message)
        self.best = best
        self.excess = excess
        self.kappa = kappa


class ConfigError(ValueError):
    """Invalid run configuration; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
