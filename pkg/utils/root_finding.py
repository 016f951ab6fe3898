"""
Vectorized scalar root finding for monotone increasing functions.

Brackets each root by expanding from an initial guess with doubling steps,
then refines with Newton steps safeguarded by bisection.
"""

import logging
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

VectorFunction = Callable[[np.ndarray], np.ndarray]


class RootFindingError(Exception):
    """Raised when a root cannot be bracketed or refined."""
    pass


def expand_brackets(
    func: VectorFunction,
    initial: np.ndarray,
    max_doublings: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """
    Find lo <= hi with func(lo) <= 0 <= func(hi) for an increasing func.

    Args:
        func: Vectorized residual, increasing in its argument
        initial: Initial guesses
        max_doublings: Expansion steps before giving up

    Returns:
        (lo, hi) bracket arrays

    Raises:
        RootFindingError: If some root is not bracketed after max_doublings steps
    """
    initial = np.asarray(initial, dtype=float)
    lo = initial.copy()
    hi = initial.copy()
    f_lo = func(lo)
    f_hi = f_lo.copy()
    step = np.maximum(1.0, np.abs(initial))

    for _ in range(max_doublings):
        move_down = f_lo > 0
        move_up = f_hi < 0
        if not (move_down.any() or move_up.any()):
            return lo, hi
        hi = np.where(move_down, lo, hi)
        f_hi = np.where(move_down, f_lo, f_hi)
        lo = np.where(move_up, hi, lo)
        f_lo = np.where(move_up, f_hi, f_lo)
        lo = np.where(move_down, lo - step, lo)
        hi = np.where(move_up, hi + step, hi)
        f_lo = np.where(move_down, func(lo), f_lo)
        f_hi = np.where(move_up, func(hi), f_hi)
        step = np.where(move_down | move_up, 2.0 * step, step)

    failed = int(np.count_nonzero((f_lo > 0) | (f_hi < 0)))
    raise RootFindingError(f"{failed} root(s) not bracketed after {max_doublings} doublings")


def solve_increasing(
    func: VectorFunction,
    derivative: VectorFunction,
    initial: np.ndarray,
    tol: float = 1e-12,
    max_doublings: int = 200,
    max_iterations: int = 200
) -> tuple[np.ndarray, int]:
    """
    Solve func(t) = 0 elementwise for an increasing func.

    Args:
        func: Vectorized residual
        derivative: Vectorized derivative of func
        initial: Initial guesses
        tol: Stop once |func(t)| <= tol or the bracket collapses to rounding level
        max_doublings: Bracket expansion limit
        max_iterations: Newton/bisection iteration limit

    Returns:
        (roots, iterations used)

    Raises:
        RootFindingError: On bracketing failure or if the iteration limit is hit
    """
    lo, hi = expand_brackets(func, initial, max_doublings)
    t = np.clip(np.asarray(initial, dtype=float), lo, hi)

    for iteration in range(1, max_iterations + 1):
        value = func(t)
        collapsed = (hi - lo) <= 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(t))
        done = (np.abs(value) <= tol) | collapsed
        if done.all():
            return t, iteration - 1
        lo = np.where(value < 0, t, lo)
        hi = np.where(value > 0, t, hi)
        slope = derivative(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = t - value / slope
        unsafe = ~np.isfinite(newton) | (slope <= 0) | (newton <= lo) | (newton >= hi)
        step = np.where(unsafe, 0.5 * (lo + hi), newton)
        t = np.where(done, t, step)

    residual = float(np.max(np.abs(func(t))))
    raise RootFindingError(f"No convergence after {max_iterations} iterations (max residual {residual:.3e})")


__all__ = ["RootFindingError", "expand_brackets", "solve_increasing"]
