"""Composite training objective."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .complexmath import OperatorKind
from .errors import EmptyBatch
from .graph import Network, Trace, forward_batch

MSE = "mse"
RELATIVE_MSE = "relative_mse"
RELATIVE_EPS = 1e-8


@dataclass(frozen=True)
class LossSpec:
    data_term: str = MSE
    lambda_im: float = 0.0
    lambda_l1: float = 0.0
    lambda_arg: float = 0.0

    def __post_init__(self):
        if self.data_term not in (MSE, RELATIVE_MSE):
            raise ValueError(f"unknown data term {self.data_term!r}")
        for name in ("lambda_im", "lambda_l1", "lambda_arg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossParts:
    total: float
    data: float
    data_mse: float
    l1_mass: float
    im_mass: float
    arg_penalty: float
    n_flagged: int


def branch_columns(net: Network, k: int) -> np.ndarray:
    """Alive Log/Sqrt summation columns of layer ``k``."""
    spec = net.layers[k]
    cols = [j for j, op in enumerate(spec.unary_ops) if op in (OperatorKind.LOG, OperatorKind.SQRT)]
    cols = np.array(cols, dtype=int)
    if cols.size:
        cols = cols[net.alive_columns(k)[cols]]
    return cols


def data_scale(y: np.ndarray, spec: LossSpec) -> float:
    """Divisor applied to the plain MSE by the data term."""
    if spec.data_term == RELATIVE_MSE:
        return float(np.mean(y * y)) + RELATIVE_EPS
    return 1.0


def arg_penalty_value(net: Network, trace: Trace) -> tuple[float, int]:
    """Mean squared imaginary part of Log/Sqrt arguments and the node count."""
    total, count = 0.0, 0
    v = trace.valid
    nv = int(np.count_nonzero(v))
    for k in range(len(net.layers)):
        cols = branch_columns(net, k)
        if cols.size == 0:
            continue
        im = trace.sums[k][v][:, cols].imag
        total += float(np.sum(im * im))
        count += cols.size
    if count == 0 or nv == 0:
        return 0.0, 0
    return total / (count * nv), count


def composite_loss_parts(net: Network, X, y, spec: LossSpec, trace: Trace | None = None) -> LossParts:
    y = np.asarray(y, dtype=float)
    if trace is None:
        trace = forward_batch(net, X)
    v = trace.valid
    if not v.any():
        raise EmptyBatch("every sample in the batch was flagged")
    r = trace.prediction[v] - y[v]
    mse = float(np.mean(r * r))
    data = mse / data_scale(y[v], spec)
    w = net.params[net.active]
    l1 = float(np.sum(np.abs(w)))
    im = float(np.sum(w.imag * w.imag))
    arg, _ = arg_penalty_value(net, trace) if spec.lambda_arg else (0.0, 0)
    total = data + spec.lambda_l1 * l1 + spec.lambda_im * im + spec.lambda_arg * arg
    return LossParts(total, data, mse, l1, im, arg, trace.n_flagged)


def composite_loss(net: Network, X, y, spec: LossSpec) -> float:
    return composite_loss_parts(net, X, y, spec).total
