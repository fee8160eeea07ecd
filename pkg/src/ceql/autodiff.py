"""Reverse-mode gradients of the composite loss.

Each complex weight is treated as two independent real parameters.  Gradients
are packed as ``G = dL/dRe(w) + 1j * dL/dIm(w)``, which makes the chain rule
compact:

* summation ``z = sum(w * h)``:  ``G_w = G_z * conj(h)``, ``G_h = G_z * conj(w)``
* holomorphic ``h = f(z)``:       ``G_z = G_h * conj(f'(z))``
* real-projected ``h = u(Re z)``: ``G_z = Re(G_h) * u'(Re z)``
* division ``h = Re(Re(a) / b)``: ``G_a = Re(G_h) * Re(1/b)``,
  ``G_b = Re(G_h) * conj(-Re(a) / b**2)``
"""
from __future__ import annotations

import numpy as np

from .complexmath import OperatorKind as Op, upper_cut_array
from .errors import EmptyBatch
from .graph import Network, Trace, forward_batch
from .loss import LossSpec, LossParts, branch_columns, composite_loss_parts, data_scale


def _safe(z, ok):
    return np.where(ok, z, 1.0)


def backward(net: Network, X, y, spec: LossSpec, trace: Trace | None = None) -> tuple[LossParts, np.ndarray]:
    """Loss value and its gradient over ``net.params`` (zero on inactive slots)."""
    y = np.asarray(y, dtype=float)
    if trace is None:
        trace = forward_batch(net, X)
    parts = composite_loss_parts(net, X, y, spec, trace)
    v = trace.valid
    nv = int(np.count_nonzero(v))
    N = len(v)

    dpred = np.zeros(N)
    dpred[v] = 2.0 * (trace.prediction[v] - y[v]) / (nv * data_scale(y[v], spec))

    grad = np.zeros_like(net.params)
    W = net.weights
    n_layers = len(net.layers)

    # arg-penalty bookkeeping: mean over alive Log/Sqrt nodes and valid samples
    branch = [branch_columns(net, k) for k in range(n_layers)] if spec.lambda_arg else None
    n_branch = sum(c.size for c in branch) if branch else 0

    G_Z = dpred.astype(np.complex128).reshape(N, 1)
    k = n_layers
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while True:
            src = trace.sources[k]
            net.block(grad, k)[...] = np.conj(src).T @ G_Z
            if k == 0:
                break
            G_src = G_Z @ np.conj(W[k]).T
            k -= 1
            spec_k = net.layers[k]
            G_H = G_src[:, :spec_k.n_act]
            Z = trace.sums[k]
            G_Z = np.zeros_like(Z)
            alive = net.alive_columns(k)
            g = net._groups[k]
            for op, (cols, out) in g.unary.items():
                gh = G_H[:, out]
                z = Z[:, cols]
                if op is Op.IDENTITY:
                    G_Z[:, cols] = gh.real
                elif op is Op.SQUARE:
                    G_Z[:, cols] = 2.0 * z.real * gh.real
                elif op is Op.CONSTANT:
                    G_Z[:, cols] = gh
                else:
                    ok = (np.abs(z) > 0) & alive[cols]
                    zs = upper_cut_array(_safe(z, ok))
                    deriv = 1.0 / zs if op is Op.LOG else 0.5 / np.sqrt(zs)
                    G_Z[:, cols] = np.where(ok, gh * np.conj(deriv), 0.0)
            for op, (left, right, out) in g.binary.items():
                gh = G_H[:, out].real
                a, b = Z[:, left], Z[:, right]
                if op is Op.MULTIPLY:
                    G_Z[:, left] = gh * b.real
                    G_Z[:, right] = gh * a.real
                else:
                    ok = (np.abs(b) > 0) & alive[right]
                    bs = _safe(b, ok)
                    G_Z[:, left] = np.where(ok, gh * (1.0 / bs).real, 0.0)
                    G_Z[:, right] = np.where(ok, gh * np.conj(-a.real / (bs * bs)), 0.0)
            if n_branch:
                cols = branch[k]
                if cols.size:
                    G_Z[:, cols] += 1j * (2.0 * spec.lambda_arg / (n_branch * nv)) * Z[:, cols].imag
            G_Z[~v] = 0.0

    w = net.params
    if spec.lambda_l1:
        mag = np.abs(w)
        grad += spec.lambda_l1 * np.where(mag > 0, w / np.where(mag > 0, mag, 1.0), 0.0)
    if spec.lambda_im:
        grad += 1j * (2.0 * spec.lambda_im) * w.imag
    grad[~net.active] = 0.0
    return parts, grad


def gradient_pairs(net: Network, grad: np.ndarray) -> np.ndarray:
    """Per-edge ``(dL/dRe, dL/dIm)`` array of shape ``(n_edges, 2)``."""
    g = grad[net.edge_pos]
    return np.stack([g.real, g.imag], axis=1)


def finite_difference_oracle(net: Network, X, y, spec: LossSpec, h: float = 1e-6) -> np.ndarray:
    """Central differences of the composite loss over every active coordinate.

    Samples flagged at the unperturbed weights are dropped up front so both
    this oracle and :func:`backward` see the same batch.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-8, 1e-4]")
    X = np.asarray(X, dtype=float).reshape(-1, net.input_dim)
    y = np.asarray(y, dtype=float)
    keep = forward_batch(net, X).valid
    if not keep.any():
        raise EmptyBatch("every sample in the batch was flagged")
    X, y = X[keep], y[keep]

    def f():
        return composite_loss_parts(net, X, y, spec).total

    grad = np.zeros_like(net.params)
    for pos in np.flatnonzero(net.active):
        w0 = net.params[pos]
        for step, unit in ((h, 1.0), (h, 1j)):
            net.params[pos] = w0 + step * unit
            up = f()
            net.params[pos] = w0 - step * unit
            down = f()
            grad[pos] += unit * (up - down) / (2 * step)
        net.params[pos] = w0
    return grad


def far_from_guards(net: Network, X, radius: float = 0.1) -> np.ndarray:
    """Samples whose alive Divide denominators have ``|z| >= radius`` and whose
    alive Log/Sqrt arguments stay at least ``radius`` from the branch cut.

    Finite differences are unreliable inside those neighbourhoods, so gradient
    checks restrict themselves to the returned rows.
    """
    from .complexmath import near_cut

    tr = forward_batch(net, X)
    ok = tr.valid.copy()
    for k, spec in enumerate(net.layers):
        Z = tr.sums[k]
        alive = net.alive_columns(k)
        g = net._groups[k]
        for op, (cols, _) in g.unary.items():
            if op in (Op.LOG, Op.SQRT):
                cols = cols[alive[cols]]
                ok &= ~near_cut(Z[:, cols], radius).any(axis=1)
        for op, (_, right, _) in g.binary.items():
            if op is Op.DIVIDE:
                right = right[alive[right]]
                ok &= ~(np.abs(Z[:, right]) < radius).any(axis=1)
    return ok
