"""Scalar numeric kernels: Lambert W, bracketed root finding, radial quadrature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

from scipy import integrate

from .errors import BracketError, DomainError, NumericError

__all__ = [
    "Bracket",
    "lambert_w0",
    "lambert_w_minus1",
    "find_root",
    "expand_bracket",
    "integrate_radial",
    "ROOT_TOL",
]

ROOT_TOL = 1e-10
_INV_E = math.exp(-1.0)
# inputs within a few ulps below -1/e are treated as the branch point
_BRANCH_SLACK = 4 * 2.220446049250313e-16
_MAX_ITER = 60


def _halley(x: float, w: float) -> float:
    """Refine ``w e^w = x`` in place of the product form."""
    for _ in range(_MAX_ITER):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0 or f == 0.0:
            return w
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_next = w - step
        if abs(step) <= 1e-15 * (1.0 + abs(w_next)):
            return w_next
        w = w_next
    return w


def _log_newton(log_x: float, w: float, sign: float) -> float:
    """Solve ``w + log(sign*w) = log_x``; avoids overflow/underflow of e^w."""
    for _ in range(_MAX_ITER):
        g = w + math.log(sign * w) - log_x
        step = g * w / (w + 1.0)
        w_next = w - step
        if abs(step) <= 1e-15 * (1.0 + abs(w_next)):
            return w_next
        w = w_next
    return w


def _branch_point_series(x: float, sign: float) -> float:
    # expansion in p = sqrt(2(e x + 1)) about the branch point
    p = sign * math.sqrt(max(0.0, 2.0 * (math.e * x + 1.0)))
    return -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3


def _check_branch_domain(x: float) -> float:
    if not math.isfinite(x):
        raise DomainError(f"Lambert W argument must be finite, got {x!r}")
    if x < -_INV_E:
        if x >= -_INV_E - _BRANCH_SLACK:
            return -_INV_E
        raise DomainError(f"Lambert W is real only for x >= -1/e, got {x!r}")
    return x


def lambert_w0(x: float) -> float:
    """Principal branch of the Lambert W function, ``W0(x) >= -1``.

    Halley iteration started from a branch-point expansion near ``-1/e``,
    ``log1p`` for moderate arguments and the ``log - log log`` asymptote
    for large ones.  Large arguments are refined on the logarithmic form of
    the defining equation.
    """
    x = _check_branch_domain(float(x))
    if x == 0.0:
        return 0.0
    if x == -_INV_E:
        return -1.0
    if x > 3.0:
        lx = math.log(x)
        llx = math.log(lx)
        w = lx - llx + llx / lx
        return _log_newton(lx, w, 1.0)
    if x < -0.32:
        w = _branch_point_series(x, 1.0)
    else:
        w = math.log1p(x)
        if x > 0.5:
            w *= 0.8
    return _halley(x, w)


def lambert_w_minus1(x: float) -> float:
    """Lower real branch ``W_{-1}(x) <= -1`` for ``-1/e <= x < 0``."""
    x = _check_branch_domain(float(x))
    if x >= 0.0:
        raise DomainError(f"W_-1 is real only on [-1/e, 0), got {x!r}")
    if x == -_INV_E:
        return -1.0
    if x > -0.25:
        lx = math.log(-x)
        llx = math.log(-lx)
        w = lx - llx + llx / lx
        return _log_newton(lx, w, -1.0)
    return _halley(x, _branch_point_series(x, -1.0))


@dataclass(frozen=True)
class Bracket:
    """Interval ``[lo, hi]`` whose end values ``f_lo``, ``f_hi`` differ in sign."""

    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.lo, self.hi, self.f_lo, self.f_hi)):
            raise BracketError("bracket values must be finite")
        if self.f_lo * self.f_hi > 0:
            raise BracketError(
                f"no sign change on [{self.lo}, {self.hi}]: f={self.f_lo}, {self.f_hi}"
            )

    @classmethod
    def of(cls, f: Callable[[float], float], lo: float, hi: float) -> "Bracket":
        return cls(lo, hi, f(lo), f(hi))


def expand_bracket(f, lo, hi, *, grow=2.0, max_steps=200, upper=True):
    """Grow one end of ``[lo, hi]`` geometrically until ``f`` changes sign.

    With ``upper=True`` the upper end moves away from ``lo``; otherwise the
    lower end moves away from ``hi``.  Both ends are assumed positive when
    growing multiplicatively is meaningful, so callers pass log-scale
    variables when the root may be tiny.
    """
    f_lo, f_hi = f(lo), f(hi)
    width = hi - lo
    for _ in range(max_steps):
        if f_lo * f_hi <= 0:
            return Bracket(lo, hi, f_lo, f_hi)
        width *= grow
        if upper:
            lo, f_lo = hi, f_hi
            hi = lo + width
            f_hi = f(hi)
        else:
            hi, f_hi = lo, f_lo
            lo = hi - width
            f_lo = f(lo)
    raise BracketError(f"no sign change found after scanning to [{lo}, {hi}]")


def find_root(f: Callable[[float], float], bracket: Bracket, tol: float = ROOT_TOL) -> float:
    """Root of a function enclosed by ``bracket``.

    Secant steps are taken from the current bracket ends whenever they land
    strictly inside and shrink the bracket fast enough; otherwise the
    interval is bisected.  Stops when ``|f(x)| <= tol`` or the bracket is
    narrower than ``tol * max(1, |x|)``.
    """
    a, b, fa, fb = bracket.lo, bracket.hi, bracket.f_lo, bracket.f_hi
    if a > b:
        a, b, fa, fb = b, a, fb, fa
    if fa == 0:
        return a
    if fb == 0:
        return b
    last_width = b - a
    for _ in range(400):
        x = a - fa * (b - a) / (fb - fa)
        width = b - a
        if not (a < x < b) or width > 0.5 * last_width:
            x = 0.5 * (a + b)
        last_width = width
        fx = f(x)
        if not math.isfinite(fx):
            raise NumericError(f"non-finite function value at x={x}")
        if abs(fx) <= tol:
            return x
        if (fx < 0) == (fa < 0):
            a, fa = x, fx
        else:
            b, fb = x, fx
        if b - a <= tol * max(1.0, abs(x)):
            return a if abs(fa) < abs(fb) else b
    return a if abs(fa) < abs(fb) else b


def integrate_radial(
    f: Callable[[float], float],
    a: float,
    b: float,
    tol: float = 1e-10,
    breakpoints: Iterable[float] = (),
) -> float:
    """``int_a^b f(r) 2 pi r dr``, split at the caller's breakpoints.

    Each smooth piece goes to adaptive Gauss-Kronrod quadrature.  A
    non-finite integrand sample raises :class:`NumericError`.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError("integration limits must be finite")
    if a > b:
        raise DomainError(f"lower limit {a} exceeds upper limit {b}")
    if a == b:
        return 0.0

    def integrand(r):
        v = f(r)
        if not math.isfinite(v):
            raise NumericError(f"integrand is not finite at r={r}")
        return 2.0 * math.pi * r * v

    cuts = sorted({a, b, *(p for p in breakpoints if a < p < b)})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        value, _ = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=tol, limit=200)
        total += value
    return total
