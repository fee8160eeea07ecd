"""Fused forward/backward kernel for the training loop.

Same semantics as :func:`ceql.graph.forward_batch` + :func:`ceql.autodiff.backward`
(flagging, dead columns, penalties), written as explicit loops so numba can
compile it.  The numpy path stays the reference; tests pin the two together.
"""
from __future__ import annotations

import numpy as np
import numba as nb

from .complexmath import POLE_EPS, OperatorKind as Op
from .loss import LossSpec, RELATIVE_MSE, RELATIVE_EPS

ID, CONST, SQUARE, MUL_L, MUL_R, DIV_N, DIV_D, LOG, SQRT, OUT = range(10)

_UNARY = {Op.IDENTITY: ID, Op.CONSTANT: CONST, Op.SQUARE: SQUARE, Op.LOG: LOG, Op.SQRT: SQRT}


@nb.njit(cache=True)
def _upper(z):
    return complex(z.real, z.imag + 0.0)


@nb.njit(cache=True)
def _kernel(X, y, params, active, boff, brows, bcols, soff, zoff, aoff, nprev,
            opcode, actidx, skip, lam_l1, lam_im, lam_arg, relative,
            grad, prevZ, has_prev, out):
    N, d = X.shape
    nblk = brows.shape[0]
    totR = soff[nblk]
    totC = zoff[nblk]
    totA = aoff[nblk - 1] if nblk > 1 else 0

    alive = np.zeros(totC, dtype=np.bool_)
    for k in range(nblk):
        R, C = brows[k], bcols[k]
        for r in range(R):
            for c in range(C):
                if active[boff[k] + r * C + c]:
                    alive[zoff[k] + c] = True
    n_branch = 0
    for c in range(totC):
        if alive[c] and (opcode[c] == LOG or opcode[c] == SQRT):
            n_branch += 1

    src = np.zeros((N, totR), dtype=np.complex128)
    Z = np.zeros((N, totC), dtype=np.complex128)
    H = np.zeros((N, max(totA, 1)), dtype=np.complex128)
    valid = np.ones(N, dtype=np.bool_)
    pred = np.zeros(N)

    for n in range(N):
        for k in range(nblk):
            R, C, s0, z0 = brows[k], bcols[k], soff[k], zoff[k]
            if k == 0:
                for i in range(d):
                    src[n, s0 + i] = X[n, i]
            else:
                a0 = aoff[k - 1]
                for i in range(nprev[k]):
                    src[n, s0 + i] = H[n, a0 + i]
                if skip:
                    for i in range(d):
                        src[n, s0 + nprev[k] + i] = X[n, i]
            src[n, s0 + R - 1] = 1.0
            for c in range(C):
                acc = 0j
                for r in range(R):
                    p = boff[k] + r * C + c
                    if active[p]:
                        acc += src[n, s0 + r] * params[p]
                Z[n, z0 + c] = acc
            if k == nblk - 1:
                break
            a0 = aoff[k]
            ok = True
            for c in range(C):
                op = opcode[z0 + c]
                a = a0 + actidx[z0 + c]
                z = Z[n, z0 + c]
                if op == ID:
                    H[n, a] = z.real
                elif op == CONST:
                    H[n, a] = z
                elif op == SQUARE:
                    H[n, a] = z.real * z.real
                elif op == LOG or op == SQRT:
                    if not alive[z0 + c]:
                        H[n, a] = 0.0
                    elif abs(z) < POLE_EPS:
                        ok = False
                        H[n, a] = 0.0
                    elif op == LOG:
                        H[n, a] = np.log(_upper(z))
                    else:
                        H[n, a] = np.sqrt(_upper(z))
                elif op == MUL_L:
                    H[n, a] = z.real * Z[n, z0 + c + 1].real
                elif op == DIV_N:
                    den = Z[n, z0 + c + 1]
                    if not alive[z0 + c + 1]:
                        H[n, a] = 0.0
                    elif abs(den) < POLE_EPS:
                        ok = False
                        H[n, a] = 0.0
                    else:
                        H[n, a] = (z.real / den).real
            for i in range(nprev[k + 1]):
                h = H[n, a0 + i]
                if not (np.isfinite(h.real) and np.isfinite(h.imag)):
                    ok = False
            if not ok:
                valid[n] = False
                for i in range(nprev[k + 1]):
                    H[n, a0 + i] = 0.0
        p = Z[n, zoff[nblk - 1]].real
        if not np.isfinite(p):
            valid[n] = False
        pred[n] = p if valid[n] else 0.0

    nv = 0
    ysq = 0.0
    sse = 0.0
    for n in range(N):
        if valid[n]:
            nv += 1
            ysq += y[n] * y[n]
            r = pred[n] - y[n]
            sse += r * r
    out[6] = N - nv
    if nv == 0:
        out[0] = np.nan
        return
    mse = sse / nv
    scale = ysq / nv + RELATIVE_EPS if relative else 1.0

    arg_sum = 0.0
    crossings = 0
    for n in range(N):
        for c in range(totC):
            if alive[c] and (opcode[c] == LOG or opcode[c] == SQRT):
                z = Z[n, c]
                if valid[n]:
                    arg_sum += z.imag * z.imag
                if has_prev:
                    z_old = prevZ[n, c]
                    if z_old.real < 0 and z.real < 0 and (np.signbit(z_old.imag) != np.signbit(z.imag)):
                        crossings += 1
                prevZ[n, c] = z
    arg_val = arg_sum / (n_branch * nv) if n_branch > 0 else 0.0

    l1 = 0.0
    im = 0.0
    for p in range(params.shape[0]):
        if active[p]:
            w = params[p]
            l1 += abs(w)
            im += w.imag * w.imag

    # backward
    for p in range(params.shape[0]):
        grad[p] = 0.0
    GH = np.zeros(max(totA, 1), dtype=np.complex128)
    GZ = np.zeros(totC, dtype=np.complex128)
    arg_coef = 2.0 * lam_arg / (n_branch * nv) if n_branch > 0 else 0.0
    for n in range(N):
        if not valid[n]:
            continue
        for i in range(GH.shape[0]):
            GH[i] = 0.0
        k = nblk - 1
        GZ[zoff[k]] = 2.0 * (pred[n] - y[n]) / (nv * scale)
        while True:
            R, C, s0, z0 = brows[k], bcols[k], soff[k], zoff[k]
            if k < nblk - 1:
                a0 = aoff[k]
                for c in range(C):
                    op = opcode[z0 + c]
                    gh = GH[a0 + actidx[z0 + c]]
                    z = Z[n, z0 + c]
                    g = 0j
                    if op == ID:
                        g = gh.real
                    elif op == CONST:
                        g = gh
                    elif op == SQUARE:
                        g = 2.0 * z.real * gh.real
                    elif op == LOG or op == SQRT:
                        if alive[z0 + c] and abs(z) > 0:
                            zu = _upper(z)
                            if op == LOG:
                                g = gh * np.conj(1.0 / zu)
                            else:
                                g = gh * np.conj(0.5 / np.sqrt(zu))
                        if alive[z0 + c]:
                            g += 1j * arg_coef * z.imag
                    elif op == MUL_L:
                        g = gh.real * Z[n, z0 + c + 1].real
                    elif op == MUL_R:
                        g = GH[a0 + actidx[z0 + c]].real * Z[n, z0 + c - 1].real
                    elif op == DIV_N:
                        den = Z[n, z0 + c + 1]
                        if alive[z0 + c + 1] and abs(den) > 0:
                            g = gh.real * (1.0 / den).real
                    elif op == DIV_D:
                        if alive[z0 + c] and abs(z) > 0:
                            num = Z[n, z0 + c - 1].real
                            g = gh.real * np.conj(-num / (z * z))
                    GZ[z0 + c] = g
                # previous layer's activation gradients are rebuilt below
                for i in range(GH.shape[0]):
                    GH[i] = 0.0
            np_ = nprev[k]
            for c in range(C):
                gz = GZ[z0 + c]
                if gz == 0:
                    continue
                for r in range(R):
                    p = boff[k] + r * C + c
                    if active[p]:
                        grad[p] += gz * np.conj(src[n, s0 + r])
                        if r < np_:
                            GH[aoff[k - 1] + r] += gz * np.conj(params[p])
            if k == 0:
                break
            k -= 1

    for p in range(params.shape[0]):
        if active[p]:
            w = params[p]
            if lam_l1 != 0.0:
                m = abs(w)
                if m > 0:
                    grad[p] += lam_l1 * w / m
            if lam_im != 0.0:
                grad[p] += 1j * 2.0 * lam_im * w.imag
        else:
            grad[p] = 0.0

    data = mse / scale
    out[0] = data + lam_l1 * l1 + lam_im * im + lam_arg * arg_val
    out[1] = data
    out[2] = mse
    out[3] = l1
    out[4] = im
    out[5] = arg_val
    out[7] = crossings


@nb.njit(cache=True)
def adam_step(p, g, m, v, t, lr, b1, b2, eps, mask):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        if mask[i // 2]:
            p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


class FastEvaluator:
    """Layout tables for one network structure; weights/masks are read live."""

    def __init__(self, net):
        self.net = net
        nblk = net.n_blocks
        self.brows = np.array([s[0] for s in net.shapes], dtype=np.int64)
        self.bcols = np.array([s[1] for s in net.shapes], dtype=np.int64)
        self.boff = net.offsets[:-1].astype(np.int64)
        self.soff = np.concatenate([[0], np.cumsum(self.brows)]).astype(np.int64)
        self.zoff = np.concatenate([[0], np.cumsum(self.bcols)]).astype(np.int64)
        acts = [spec.n_act for spec in net.layers]
        self.aoff = np.concatenate([[0], np.cumsum(acts)]).astype(np.int64)
        self.nprev = np.array([net.n_prev_acts(k) for k in range(nblk)], dtype=np.int64)
        opcode = np.full(self.zoff[-1], OUT, dtype=np.int64)
        actidx = np.zeros(self.zoff[-1], dtype=np.int64)
        for k, spec in enumerate(net.layers):
            z0 = self.zoff[k]
            for j, op in enumerate(spec.unary_ops):
                opcode[z0 + j] = _UNARY[op]
                actidx[z0 + j] = j
            for b, op in enumerate(spec.binary_ops):
                left, right = z0 + spec.m + 2 * b, z0 + spec.m + 2 * b + 1
                opcode[left], opcode[right] = (MUL_L, MUL_R) if op is Op.MULTIPLY else (DIV_N, DIV_D)
                actidx[left] = actidx[right] = spec.m + b
        self.opcode, self.actidx = opcode, actidx
        self.out = np.zeros(8)
        self.prevZ = None

    def reset_crossings(self):
        self.prevZ = None

    def loss_grad(self, X, y, spec: LossSpec, grad: np.ndarray) -> np.ndarray:
        """Fill ``grad`` in place; returns ``[total, data, mse, l1, im, arg, flagged, crossings]``."""
        net = self.net
        has_prev = self.prevZ is not None
        if not has_prev:
            self.prevZ = np.zeros((X.shape[0], self.zoff[-1]), dtype=np.complex128)
        _kernel(X, y, net.params, net.active, self.boff, self.brows, self.bcols, self.soff,
                self.zoff, self.aoff, self.nprev, self.opcode, self.actidx, net.skip_inputs,
                spec.lambda_l1, spec.lambda_im, spec.lambda_arg, spec.data_term == RELATIVE_MSE,
                grad, self.prevZ, has_prev, self.out)
        return self.out


@nb.njit(cache=True)
def frf_terms(Zh, inv, omega, y, A, gamma, alive, g_trend, g_A, g_gamma, G_Zh):
    """Resonance sum, MSE and gradients for the frequency-response model.

    Fills the gradient buffers in place and returns ``(mse, n_flagged)``;
    ``mse`` is nan when every sample is flagged.
    """
    T, U = Zh.shape
    N = omega.shape[0]
    yhat = np.empty(N)
    valid = np.ones(N, dtype=np.bool_)
    for n in range(N):
        w = omega[n]
        acc = g_trend[2] * w + g_trend[3]
        for t in range(T):
            if not alive[t]:
                continue
            d = w - Zh[t, inv[n]]
            D = d * d + gamma[t]
            if abs(D) < POLE_EPS:
                valid[n] = False
                continue
            acc += (A[t] / D).real
        yhat[n] = acc
        if not np.isfinite(acc):
            valid[n] = False
    nv = 0
    sse = 0.0
    for n in range(N):
        if valid[n]:
            nv += 1
            r = yhat[n] - y[n]
            sse += r * r
    g_trend[0] = 0.0
    g_trend[1] = 0.0
    for t in range(T):
        g_A[t] = 0.0
        g_gamma[t] = 0.0
        for u in range(U):
            G_Zh[t, u] = 0.0
    if nv == 0:
        return np.nan, N
    for n in range(N):
        if not valid[n]:
            continue
        w = omega[n]
        g = 2.0 * (yhat[n] - y[n]) / nv
        g_trend[0] += g * w
        g_trend[1] += g
        for t in range(T):
            if not alive[t]:
                continue
            d = w - Zh[t, inv[n]]
            D = d * d + gamma[t]
            inv_D = 1.0 / D
            g_A[t] += g * inv_D.real
            q2 = A[t] * inv_D * inv_D
            g_gamma[t] -= g * q2.real
            G_Zh[t, inv[n]] += g * np.conj(2.0 * d * q2)
    return sse / nv, N - nv
