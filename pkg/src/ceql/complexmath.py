"""Complex scalar helpers and the surrogate operators used inside the network.

Scalars are plain Python ``complex`` values; the ``*_array`` variants work on
``complex128`` numpy arrays and return a validity mask instead of raising, which
is what the vectorised forward pass needs.

Branch convention: principal branch, ``arg z`` in ``(-pi, pi]``.  A negative
real number carrying a ``-0.0`` imaginary part is treated as sitting on the
upper side of the cut, so ``log(-1 - 0j) == i*pi``.
"""
from __future__ import annotations

import cmath
import enum
import math

import numpy as np

from .errors import DivisionNearZero, LogOfZero

POLE_EPS = 1e-30


class OperatorKind(enum.Enum):
    IDENTITY = "id"
    CONSTANT = "const"
    SQUARE = "square"
    MULTIPLY = "mul"
    DIVIDE = "div"
    LOG = "log"
    SQRT = "sqrt"

    @property
    def arity(self) -> int:
        return 2 if self in (OperatorKind.MULTIPLY, OperatorKind.DIVIDE) else 1

    @classmethod
    def parse(cls, name: str) -> "OperatorKind":
        aliases = {"identity": "id", "constant": "const", "multiply": "mul",
                   "divide": "div", "pow2": "square"}
        key = name.strip().lower()
        return cls(aliases.get(key, key))


def _upper_cut(z: complex) -> complex:
    # -0.0 imaginary part would otherwise select arg = -pi
    return complex(z.real, z.imag + 0.0)


def surrogate_div(x: complex, y: complex) -> complex:
    """``Re(Re(x) / y)`` embedded back into the complex plane."""
    if abs(y) < POLE_EPS:
        raise DivisionNearZero(f"|y| = {abs(y):.3g} below {POLE_EPS}")
    return complex((x.real / y).real, 0.0)


def principal_log(z: complex) -> complex:
    if abs(z) < POLE_EPS:
        raise LogOfZero(f"|z| = {abs(z):.3g} below {POLE_EPS}")
    return cmath.log(_upper_cut(z))


def principal_sqrt(z: complex) -> complex:
    """Principal square root, equal to ``exp(0.5 * principal_log(z))``.

    Evaluated with the correctly rounded complex sqrt rather than through
    exp/log; both agree on the principal branch but the direct route keeps
    ``result**2 == z`` to a few ulp.
    """
    if z == 0:
        return 0j
    if abs(z) < POLE_EPS:
        raise LogOfZero(f"|z| = {abs(z):.3g} below {POLE_EPS}")
    return cmath.sqrt(_upper_cut(z))


def real_projected_unary(kind: OperatorKind, x: complex) -> complex:
    if kind is OperatorKind.IDENTITY:
        return complex(x.real, 0.0)
    if kind is OperatorKind.SQUARE:
        return complex(x.real * x.real, 0.0)
    raise ValueError(f"{kind} has no real-projected unary form")


def real_projected_binary(kind: OperatorKind, x: complex, y: complex) -> complex:
    if kind is OperatorKind.MULTIPLY:
        return complex(x.real * y.real, 0.0)
    raise ValueError(f"{kind} has no real-projected binary form")


# --- vectorised forms -------------------------------------------------------

def upper_cut_array(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    out.real = z.real
    out.imag = z.imag + 0.0
    return out


def log_array(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal log of ``z``; returns ``(value, ok)`` with bad entries zeroed."""
    ok = np.abs(z) >= POLE_EPS
    safe = np.where(ok, upper_cut_array(z), 1.0 + 0j)
    return np.where(ok, np.log(safe), 0j), ok


def sqrt_array(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ok = np.abs(z) >= POLE_EPS
    safe = np.where(ok, upper_cut_array(z), 1.0 + 0j)
    return np.where(ok, np.sqrt(safe), 0j), ok


def div_array(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ok = np.abs(y) >= POLE_EPS
    safe = np.where(ok, y, 1.0 + 0j)
    return np.where(ok, (x.real / safe).real, 0.0) + 0j, ok


def near_cut(z: np.ndarray, radius: float) -> np.ndarray:
    """True where ``z`` lies within ``radius`` of the cut ``(-inf, 0]``."""
    dist = np.where(z.real <= 0.0, np.abs(z.imag), np.abs(z))
    return dist < radius


def is_finite_complex(z: complex) -> bool:
    return math.isfinite(z.real) and math.isfinite(z.imag)
