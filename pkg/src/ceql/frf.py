"""Frequency-response surrogate: linear trend plus damage-shifted resonances.

    H(w, d) = a*w + b + sum_i A_i / ((w - h_i(d))^2 + gamma_i)

Each ``h_i`` is a small two-layer network over the damage input ``d`` whose
output, like any network prediction, is the real part of its output
summation.  Frequencies are in kHz, damage in percent.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import expr as ex
from .complexmath import POLE_EPS, OperatorKind as Op
from .errors import DegenerateModel, InvalidConfig, InvalidWindow
from .graph import InitPolicy, LayerSpec, Network, build_network, forward_batch
from .train import Adam, PhaseSchedule, _Plateau, cascade_cleanup, default_schedule, output_connected

log = logging.getLogger(__name__)

FRF_LAYER = LayerSpec((Op.IDENTITY, Op.CONSTANT, Op.SQUARE), (Op.MULTIPLY,))
OMEGA_RANGE = (0.0, 2.0)
PEAK_CENTERS = (0.75, 1.18)
WINDOW_HALF_WIDTH = 0.15
MODEL_GRID_STEP = 1e-4
CSV_HEADER = ["omega_khz", "damage_pct", "magnitude_linear", "repetition_id"]


def frf_layers() -> list[LayerSpec]:
    return [FRF_LAYER, FRF_LAYER]


def default_windows(half_width: float = WINDOW_HALF_WIDTH) -> list[tuple[float, float]]:
    return [(c - half_width, c + half_width) for c in PEAK_CENTERS]


# --- data -----------------------------------------------------------------------

@dataclass(frozen=True)
class FrfSample:
    omega: float
    d: float
    y: float
    repetition: int = 0


@dataclass
class FrfData:
    omega: np.ndarray
    d: np.ndarray
    y: np.ndarray
    repetition: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.repetition = np.asarray(self.repetition, dtype=int)

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_samples(cls, samples) -> "FrfData":
        s = list(samples)
        return cls([p.omega for p in s], [p.d for p in s], [p.y for p in s], [p.repetition for p in s])

    def samples(self) -> list[FrfSample]:
        return [FrfSample(float(w), float(d), float(y), int(r))
                for w, d, y, r in zip(self.omega, self.d, self.y, self.repetition)]

    @property
    def levels(self) -> np.ndarray:
        return np.unique(self.d)

    def subset(self, mask) -> "FrfData":
        return FrfData(self.omega[mask], self.d[mask], self.y[mask], self.repetition[mask])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for om, d, y, r in zip(self.omega, self.d, self.y, self.repetition):
                w.writerow([f"{om:.17g}", f"{d:.17g}", f"{y:.17g}", int(r)])

    @classmethod
    def from_csv(cls, path) -> "FrfData":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or list(reader.fieldnames) != CSV_HEADER:
                raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
            rows = list(reader)
        return cls([float(r["omega_khz"]) for r in rows], [float(r["damage_pct"]) for r in rows],
                   [float(r["magnitude_linear"]) for r in rows], [int(r["repetition_id"]) for r in rows])


# --- model ----------------------------------------------------------------------

@dataclass
class FrfTerm:
    A: float
    gamma: float
    h: object          # Network, or an expression tree in the variable x1 = d
    alive: bool = True

    def location(self, d) -> np.ndarray:
        """Resonance location ``h(d)`` at each damage value."""
        d = np.atleast_1d(np.asarray(d, dtype=float))
        if isinstance(self.h, Network):
            return forward_batch(self.h, d.reshape(-1, 1)).sums[-1][:, 0].real
        return ex.evaluate(self.h, d.reshape(-1, 1))[0]

    def expression(self) -> ex.Expr:
        return ex.extract(self.h) if isinstance(self.h, Network) else self.h


@dataclass
class FrfModel:
    a: float
    b: float
    terms: list = field(default_factory=list)

    @property
    def alive_terms(self) -> list:
        return [t for t in self.terms if t.alive]

    def to_dict(self) -> dict:
        out = {"format": "ceql-frf/1", "a": self.a, "b": self.b, "terms": []}
        for t in self.alive_terms:
            e = t.expression()
            item = {"A": t.A, "gamma": t.gamma, "h_ast": ex.to_json(e),
                    "h_text": ex.render(e, names=("d",))}
            if isinstance(t.h, Network):
                item["network"] = t.h.to_dict()
            out["terms"].append(item)
        out["text"] = render_model(self)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FrfModel":
        terms = []
        for t in d["terms"]:
            h = Network.from_dict(t["network"]) if "network" in t else ex.from_json(t["h_ast"])
            terms.append(FrfTerm(float(t["A"]), float(t["gamma"]), h))
        return cls(float(d["a"]), float(d["b"]), terms)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "FrfModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def render_model(m: FrfModel, precision: int = 5) -> str:
    """One line per component, trend first."""
    lines = [f"H(w, d) = {ex.format_const(m.a, precision)}*w + {ex.format_const(m.b, precision)}"]
    for t in m.alive_terms:
        h = ex.render(t.expression(), precision, names=("d",))
        lines.append(f"  + {ex.format_const(t.A, precision)}/((w - ({h}))^2 + "
                     f"{ex.format_const(t.gamma, precision)})")
    return "\n".join(lines)


def frf_forward(m: FrfModel, omega, d) -> tuple[np.ndarray, np.ndarray]:
    """Model magnitude at each ``(omega, d)`` pair; returns ``(values, valid)``.

    A denominator with ``|D| < POLE_EPS`` flags its sample (value nan).
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    d = np.broadcast_to(np.asarray(d, dtype=float), omega.shape)
    levels, inv = np.unique(d, return_inverse=True)
    out = m.a * omega + m.b
    valid = np.ones(omega.shape, dtype=bool)
    for t in m.alive_terms:
        z = t.location(levels)[inv]
        den = (omega - z) ** 2 + t.gamma
        ok = np.abs(den) >= POLE_EPS
        with np.errstate(all="ignore"):
            out = out + np.where(ok, (t.A / np.where(ok, den, 1.0)).real, 0.0)
        valid &= ok
    valid &= np.isfinite(out)
    return np.where(valid, out, np.nan), valid


def real_poles(m: FrfModel, d: float) -> list[float]:
    """Real frequencies where a negative-gamma term's denominator vanishes."""
    poles = []
    for t in m.alive_terms:
        if t.gamma < 0:
            h = float(t.location([d])[0])
            r = math.sqrt(-t.gamma)
            poles += [h - r, h + r]
    return sorted(poles)


def resonance_centers(m: FrfModel, d: float) -> list[float]:
    """Frequencies minimising each term's denominator magnitude (``Re h_i(d)``)."""
    return sorted(float(t.location([d])[0]) for t in m.alive_terms)


def published_model() -> FrfModel:
    """The nine-term surrogate reported for the cantilever-beam dataset.

    Each denominator ``(p(d) + w - c)^2 + g`` is stored as ``h(d) = c - p(d)``.
    """
    D = ex.Var(1)

    def h(*coefs):
        # coefs: constant, d, d^2, d^3, d^4 of h(d)
        terms = []
        for k, c in enumerate(coefs):
            if c:
                terms.append(ex.make_product([ex.Const(c), D if k == 1 else ex.make_power(D, k)])
                             if k else ex.Const(c))
        return ex.make_sum(terms)

    rows = [
        (0.08445, -0.01625, h(0.89, 0.00386, 0.0, -0.00217, 0.0007)),
        (0.0577, -0.1399, h(1.26425, 0.25854, -0.05572)),
        (0.47169, -0.36363, h(-0.17194, 0.37289, -0.03456)),
        (2.42351, -0.0339, h(0.23462, -0.061, 0.02541)),
        (-0.76141, 0.04658, h(0.50138, -0.08937, 0.03146)),
        (-0.26376, 0.00551, h(0.76732, 0.20983)),
        (0.48817, 0.31504, h(0.20312, 0.27162)),
        (0.08136, -0.14816, h(0.76341, 0.52067)),
        (0.29455, 0.06101, h(0.69792)),
    ]
    return FrfModel(5.21654, -0.3154, [FrfTerm(A, g, hh) for A, g, hh in rows])


# --- synthetic generator ----------------------------------------------------------

@dataclass(frozen=True)
class Resonance:
    A: float
    gamma: float
    center: float
    slope: float = 0.0     # kHz per percent damage

    def h(self, d):
        return self.center + self.slope * np.asarray(d, dtype=float)


@dataclass(frozen=True)
class SynthSpec:
    a: float
    b: float
    resonances: tuple

    def __call__(self, omega, d):
        omega = np.asarray(omega, dtype=float)
        out = self.a * omega + self.b
        for r in self.resonances:
            out = out + r.A / ((omega - r.h(d)) ** 2 + r.gamma)
        return out

    def as_model(self) -> FrfModel:
        return FrfModel(self.a, self.b, [
            FrfTerm(r.A, r.gamma, ex.make_sum([ex.make_product([ex.Const(r.slope), ex.Var(1)]),
                                               ex.Const(r.center)]))
            for r in self.resonances])


def three_resonance_spec() -> SynthSpec:
    """Generator with three linearly drifting peaks, two inside the default windows."""
    return SynthSpec(0.5, 0.2, (
        Resonance(0.02, 0.004, 0.40, -0.010),
        Resonance(0.03, 0.003, 0.75, -0.020),
        Resonance(0.02, 0.002, 1.18, -0.025),
    ))


def synth_frf(spec: SynthSpec, damage_levels, noise_sd: float = 0.0, n_per_level: int = 400,
              seed: int = 0, repetitions: int = 1) -> FrfData:
    """Samples on a uniform ``[0, 2]`` kHz grid per level and repetition, clipped at 0."""
    for r in spec.resonances:
        if r.gamma <= 0:
            raise InvalidConfig("generator resonances need gamma > 0")
    rng = np.random.default_rng(seed)
    grid = np.linspace(*OMEGA_RANGE, n_per_level)
    om, dd, yy, rr = [], [], [], []
    for lvl in damage_levels:
        for rep in range(repetitions):
            y = spec(grid, lvl)
            if noise_sd:
                y = y + rng.normal(0.0, noise_sd, grid.shape)
            om.append(grid)
            dd.append(np.full(grid.shape, float(lvl)))
            yy.append(np.clip(y, 0.0, None))
            rr.append(np.full(grid.shape, rep))
    return FrfData(np.concatenate(om), np.concatenate(dd), np.concatenate(yy), np.concatenate(rr))


# --- peaks ------------------------------------------------------------------------

def _check_window(window):
    lo, hi = window
    if not (OMEGA_RANGE[0] <= lo < hi <= OMEGA_RANGE[1]):
        raise InvalidWindow(f"window {window} must satisfy 0 <= lo < hi <= 2")


def detect_peak(source, window, damage_level: float) -> float:
    """Mean over repetitions of the argmax frequency inside ``window``."""
    _check_window(window)
    lo, hi = window
    if isinstance(source, FrfData):
        sel = (source.d == damage_level) & (source.omega >= lo) & (source.omega <= hi)
        if not sel.any():
            raise InvalidWindow(f"no samples in {window} at damage {damage_level}")
        peaks = []
        for rep in np.unique(source.repetition[sel]):
            s = sel & (source.repetition == rep)
            peaks.append(source.omega[s][np.argmax(source.y[s])])
        return float(np.mean(peaks))
    grid = np.arange(lo, hi + 0.5 * MODEL_GRID_STEP, MODEL_GRID_STEP)
    vals, ok = frf_forward(source, grid, damage_level)
    if not ok.any():
        raise InvalidWindow(f"model is flagged everywhere in {window}")
    return float(grid[ok][np.argmax(vals[ok])])


@dataclass
class PeakRow:
    damage: float
    window: tuple
    measured: float
    predicted: float


def peak_report(model: FrfModel, data: FrfData, windows=None, levels=None) -> list[PeakRow]:
    windows = windows or default_windows()
    levels = data.levels if levels is None else levels
    rows = []
    present = set(np.unique(data.d).tolist())
    for lvl in levels:
        if float(lvl) not in present:
            warnings.warn(f"damage level {lvl} not present in data; row omitted")
            continue
        for w in windows:
            rows.append(PeakRow(float(lvl), tuple(w), detect_peak(data, w, lvl), detect_peak(model, w, lvl)))
    return rows


def write_peak_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["damage_pct", "window_lo", "window_hi", "measured_peak_khz", "predicted_peak_khz"])
        for r in rows:
            w.writerow([f"{r.damage:.17g}", r.window[0], r.window[1], f"{r.measured:.17g}", f"{r.predicted:.17g}"])


# --- stacked subnetworks -------------------------------------------------------------

class _Stack:
    """All ``h_i`` share one layout, so their weights live in a ``(T, P)`` array."""

    def __init__(self, template: Network):
        self.t = template
        for g in template._groups:
            bad = set(g.unary) - {Op.IDENTITY, Op.CONSTANT, Op.SQUARE} | set(g.binary) - {Op.MULTIPLY}
            if bad:
                raise InvalidConfig(f"unsupported operators in resonance subnetwork: {bad}")

    def _W(self, P, k):
        r, c = self.t.shapes[k]
        o = self.t.offsets
        return P[:, o[k]:o[k + 1]].reshape(len(P), r, c)

    def forward(self, P, M, d):
        net, T, U = self.t, P.shape[0], d.size
        W = P * M
        x = np.broadcast_to(d.reshape(1, U, 1).astype(np.complex128), (T, U, 1))
        one = np.ones((T, U, 1), dtype=np.complex128)
        srcs, sums, prev = [], [], None
        for k in range(net.n_blocks):
            parts = [] if k == 0 else [prev]
            if k == 0 or net.skip_inputs:
                parts.append(x)
            parts.append(one)
            S = np.concatenate(parts, axis=2)
            Z = S @ self._W(W, k)
            srcs.append(S)
            sums.append(Z)
            if k == len(net.layers):
                break
            spec, g = net.layers[k], net._groups[k]
            H = np.zeros((T, U, spec.n_act), dtype=np.complex128)
            for op, (cols, out) in g.unary.items():
                z = Z[:, :, cols]
                H[:, :, out] = z.real if op is Op.IDENTITY else z if op is Op.CONSTANT else z.real ** 2
            for op, (left, right, out) in g.binary.items():
                H[:, :, out] = Z[:, :, left].real * Z[:, :, right].real
            prev = H
        self.cache = (W, srcs, sums)
        return sums[-1][:, :, 0]

    def backward(self, G_out, M):
        net = self.t
        W, srcs, sums = self.cache
        grad = np.zeros(M.shape, dtype=np.complex128)
        G_Z = G_out[:, :, None]
        k = len(net.layers)
        while True:
            r, c = net.shapes[k]
            o = net.offsets
            grad[:, o[k]:o[k + 1]] = np.einsum("tur,tuc->trc", np.conj(srcs[k]), G_Z).reshape(len(M), r * c)
            if k == 0:
                break
            G_S = G_Z @ np.conj(self._W(W, k)).transpose(0, 2, 1)
            k -= 1
            spec, g, Z = net.layers[k], net._groups[k], sums[k]
            G_H = G_S[:, :, :spec.n_act]
            G_Z = np.zeros_like(Z)
            for op, (cols, out) in g.unary.items():
                gh = G_H[:, :, out]
                if op is Op.IDENTITY:
                    G_Z[:, :, cols] = gh.real
                elif op is Op.CONSTANT:
                    G_Z[:, :, cols] = gh
                else:
                    G_Z[:, :, cols] = 2.0 * Z[:, :, cols].real * gh.real
            for op, (left, right, out) in g.binary.items():
                gh = G_H[:, :, out].real
                G_Z[:, :, left] = gh * Z[:, :, right].real
                G_Z[:, :, right] = gh * Z[:, :, left].real
        return grad * M


# --- fitting -----------------------------------------------------------------------

@dataclass
class FrfConfig:
    n_terms: int = 20
    min_edges: int = 50
    schedule: PhaseSchedule | None = None
    scale: float = 1.0
    init_gamma: float = 0.005
    init_scale: float = 0.1
    centers: tuple = OMEGA_RANGE
    lr: float | None = 1e-3
    n_seed_peaks: int = 10
    init_im_ratio: float = 0.01
    seed: int = 0

    def resolved_schedule(self) -> PhaseSchedule:
        s = self.schedule or default_schedule(min_edges=self.min_edges)
        if self.lr is not None:
            s = PhaseSchedule(tuple(replace(p, lr=self.lr) for p in s.phases),
                              s.convergence_threshold, s.convergence_patience)
        return s.scaled(self.scale) if self.scale != 1.0 else s


@dataclass
class FrfFit:
    model: FrfModel
    history: list
    prune_events: list


class _FrfState:
    """Flat parameter view for the optimiser: ``[a, b, A(T), gamma(T), h weights (T*P)]``."""

    def __init__(self, model: FrfModel, data: FrfData):
        nets = [t.h for t in model.terms]
        self.T = len(nets)
        self.P = nets[0].params.size
        self.stack = _Stack(nets[0])
        self.theta = np.concatenate([
            [model.a, model.b], [t.A for t in model.terms], [t.gamma for t in model.terms],
            np.concatenate([n.params for n in nets]),
        ]).astype(np.complex128)
        self.mask = np.concatenate([
            [True, True], [t.alive for t in model.terms], [t.alive for t in model.terms],
            np.concatenate([n.active for n in nets]),
        ])
        self.levels, self.inv = np.unique(data.d, return_inverse=True)
        self.omega, self.y = data.omega, data.y
        self.onehot = np.zeros((len(self.y), self.levels.size))
        self.onehot[np.arange(len(self.y)), self.inv] = 1.0

    # views
    @property
    def hw(self):
        return self.theta[2 + 2 * self.T:].reshape(self.T, self.P)

    @property
    def hm(self):
        return self.mask[2 + 2 * self.T:].reshape(self.T, self.P)

    @property
    def alive(self):
        return self.mask[2:2 + self.T]

    def terms(self, P=None, M=None, rows=None):
        P = self.hw if P is None else P
        M = self.hm if M is None else M
        Zh = self.stack.forward(P, M, self.levels).real
        Z = Zh[:, self.inv]
        rows = slice(None) if rows is None else rows
        A = self.theta[2:2 + self.T].real[rows, None]
        g = self.theta[2 + self.T:2 + 2 * self.T].real[rows, None]
        D = (self.omega - Z) ** 2 + g
        return Z, D, A

    def predict_parts(self):
        Z, D, A = self.terms()
        ok = np.abs(D) >= POLE_EPS
        alive = self.alive[:, None]
        with np.errstate(all="ignore"):
            q = np.where(ok & alive, A / np.where(ok, D, 1.0), 0.0)
        valid = np.all(ok | ~alive, axis=0)
        yhat = self.theta[0].real * self.omega + self.theta[1].real + q.real.sum(axis=0)
        valid &= np.isfinite(yhat)
        return Z, D, A, q, yhat, valid

    def loss_grad(self, lam_l1: float, lam_im: float):
        from ._fast import frf_terms
        T = self.T
        Zh = self.stack.forward(self.hw, self.hm, self.levels).real.astype(np.complex128)
        grad = np.zeros_like(self.theta)
        trend = np.array([0.0, 0.0, self.theta[0].real, self.theta[1].real])
        g_A, g_gam = np.zeros(T), np.zeros(T)
        G_Zh = np.zeros_like(Zh)
        mse, flagged = frf_terms(Zh, self.inv, self.omega, self.y, self.theta[2:2 + T].real.copy(),
                                 self.theta[2 + T:2 + 2 * T].real.copy(), self.alive.copy(),
                                 trend, g_A, g_gam, G_Zh)
        if not math.isfinite(mse):
            raise DegenerateModel("every FRF sample flagged")
        grad[0], grad[1] = trend[0], trend[1]
        grad[2:2 + T], grad[2 + T:2 + 2 * T] = g_A, g_gam
        gh = self.stack.backward(G_Zh.real.astype(np.complex128), self.hm)
        w = self.hw[self.hm]
        l1 = float(np.sum(np.abs(w)))
        im = float(np.sum(w.imag ** 2))
        if lam_l1:
            mag = np.abs(self.hw)
            gh += lam_l1 * np.where(self.hm & (mag > 0), self.hw / np.where(mag > 0, mag, 1.0), 0.0)
        if lam_im:
            gh += 1j * 2.0 * lam_im * np.where(self.hm, self.hw.imag, 0.0)
        grad[2 + 2 * T:] = gh.ravel()
        grad[~self.mask] = 0.0
        total = mse + lam_l1 * l1 + lam_im * im
        return total, mse, l1, im, int(flagged), grad

    def loss_grad_reference(self, lam_l1: float, lam_im: float):
        """Plain numpy version of :meth:`loss_grad`, kept for cross-checking."""
        Z, D, A, q, yhat, valid = self.predict_parts()
        nv = int(valid.sum())
        if nv == 0:
            raise DegenerateModel("every FRF sample flagged")
        r = np.where(valid, yhat - self.y, 0.0)
        mse = float(np.sum(r * r) / nv)
        g = 2.0 * r / nv
        grad = np.zeros_like(self.theta)
        grad[0] = np.sum(g * self.omega)
        grad[1] = np.sum(g)
        alive = self.alive[:, None]
        with np.errstate(all="ignore"):
            Ds = np.where(alive, D, 1.0)
            grad[2:2 + self.T] = np.where(self.alive, np.sum(g * (1.0 / Ds).real, axis=1), 0.0)
            grad[2 + self.T:2 + 2 * self.T] = np.where(self.alive, np.sum(g * (-A / Ds ** 2).real, axis=1), 0.0)
            dq = np.where(alive, A * 2.0 * (self.omega - Z) / Ds ** 2, 0.0)
        G_Zh = ((g * dq).real @ self.onehot).astype(np.complex128)
        self.stack.forward(self.hw, self.hm, self.levels)
        gh = self.stack.backward(G_Zh, self.hm)
        w = self.hw[self.hm]
        l1 = float(np.sum(np.abs(w)))
        im = float(np.sum(w.imag ** 2))
        if lam_l1:
            mag = np.abs(self.hw)
            gh += lam_l1 * np.where(self.hm & (mag > 0), self.hw / np.where(mag > 0, mag, 1.0), 0.0)
        if lam_im:
            gh += 1j * 2.0 * lam_im * np.where(self.hm, self.hw.imag, 0.0)
        grad[2 + 2 * self.T:] = gh.ravel()
        grad[~self.mask] = 0.0
        total = mse + lam_l1 * l1 + lam_im * im
        return total, mse, l1, im, int(len(valid) - nv), grad

    # edge bookkeeping
    def edge_count(self) -> int:
        return int(self.hm.sum())

    def write_back(self, model: FrfModel):
        model.a, model.b = float(self.theta[0].real), float(self.theta[1].real)
        for i, t in enumerate(model.terms):
            t.A = float(self.theta[2 + i].real)
            t.gamma = float(self.theta[2 + self.T + i].real)
            t.h.params[:] = np.where(self.hm[i], self.hw[i], 0.0)
            t.h.active[:] = self.hm[i]
            t.alive = bool(self.alive[i])

    def kill_term(self, i: int):
        self.alive[i] = False
        self.theta[2 + i] = 0.0
        self.hm[i] = False

    def cleanup(self, model: FrfModel) -> list[int]:
        """Cascade-clean every subnetwork; terms whose ``h`` lost its output die."""
        dead = []
        for i, t in enumerate(model.terms):
            if not self.alive[i]:
                continue
            t.h.active[:] = self.hm[i]
            cascade_cleanup(t.h)
            self.hm[i] = t.h.active
            self.hw[i][~self.hm[i]] = 0.0
            if not output_connected(t.h):
                self.kill_term(i)
                dead.append(i)
        return dead


def baseline(omega: np.ndarray, y: np.ndarray, iterations: int = 10) -> tuple[float, float]:
    """Slope and intercept of a line through the lower envelope of ``y``.

    Points above the current line are dropped each round, so resonance peaks
    stop pulling the fit upward.
    """
    keep = np.ones(omega.size, dtype=bool)
    a, b = np.polyfit(omega, y, 1)
    for _ in range(iterations):
        below = keep & (y <= a * omega + b)
        if below.sum() < 2:
            break
        keep = below
        a, b = np.polyfit(omega[keep], y[keep], 1)
    return float(a), float(b)


def spectral_peaks(data: FrfData, level: float, k: int) -> list[tuple[float, float]]:
    """Up to ``k`` most prominent local maxima ``(omega, height above trend)`` at one level."""
    from scipy.signal import find_peaks

    sel = data.d == level
    om, y = data.omega[sel], data.y[sel]
    grid = np.unique(om)
    mean = np.array([y[om == w].mean() for w in grid])
    a, b = baseline(grid, mean)
    trend = a * grid + b
    idx, props = find_peaks(mean - trend, prominence=0.0)
    order = np.argsort(props["prominences"])[::-1][:k]
    return [(float(grid[i]), float((mean - trend)[i])) for i in sorted(idx[order])]


def init_frf_model(n_terms: int, config: FrfConfig, d_ref: float = 0.0, data: FrfData | None = None) -> FrfModel:
    """Resonance subnetworks with small weights anchored at their starting locations.

    With ``data``, the most prominent spectral peaks at ``d_ref`` seed the first
    locations (amplitude set to reproduce the peak height); the remaining terms
    sit on an even grid with zero amplitude.
    """
    lo, hi = config.centers
    seeds = spectral_peaks(data, d_ref, config.n_seed_peaks) if data is not None and config.n_seed_peaks else []
    seeds = seeds[:n_terms]
    n_grid = n_terms - len(seeds)
    grid = lo + (np.arange(n_grid) + 0.5) * (hi - lo) / max(n_grid, 1)
    starts = [(c, max(hgt, 0.0) * config.init_gamma) for c, hgt in seeds] + [(c, 0.0) for c in grid]
    s = config.init_scale
    policy = InitPolicy(-s, s, -s * config.init_im_ratio, s * config.init_im_ratio)
    terms = []
    for i, (c, A) in enumerate(starts):
        net = build_network(1, frf_layers(), True, init=policy, seed=config.seed * 1000 + i)
        _anchor(net, c, d_ref)
        terms.append(FrfTerm(A, config.init_gamma, net))
    return FrfModel(0.0, 0.0, terms)


def _anchor(net: Network, target: float, d_ref: float):
    """Shift the last layer's constant node so that ``h(d_ref) == target``."""
    k = len(net.layers) - 1
    spec = net.layers[k]
    j = spec.unary_ops.index(Op.CONSTANT)
    out = net.block(net.params, k + 1)
    w_out = out[j, 0]
    z = forward_batch(net, np.array([[d_ref]])).sums[-1][0, 0]
    net.block(net.params, k)[-1, j] += (target - z) / w_out


TERM = -1  # candidate id for removing a whole resonant term


def _term_alive_mask(state):
    return np.flatnonzero(state.alive)


def _frf_impact_prune(state: _FrfState, model: FrfModel, fraction: float, min_edges: int) -> int:
    """Impact pruning over subnetwork edges and whole terms, honouring a global edge floor.

    Removing a term (its amplitude) counts as one pruning step; its subnetwork
    edges then stop counting toward the floor.
    """
    active = state.edge_count()
    k = min(int(math.floor(fraction * active)), active - min_edges)
    if k <= 0:
        return 0
    _, _, _, q, yhat, valid = state.predict_parts()
    base_res = np.where(valid, yhat - state.y, 0.0)
    base = float(np.sum(base_res ** 2) / max(valid.sum(), 1))
    n_valid = max(int(valid.sum()), 1)
    cands = []
    for i in _term_alive_mask(state):
        # dropping the amplitude removes the whole term
        res = base_res - np.where(valid, q[i].real, 0.0)
        cands.append((abs(float(np.sum(res ** 2) / n_valid) - base), abs(state.theta[2 + i]), i, TERM))
        P, M = state.hw[i:i + 1], state.hm[i:i + 1].copy()
        A = state.theta[2 + i].real
        gam = state.theta[2 + state.T + i].real
        for pos in np.flatnonzero(M[0]):
            M[0, pos] = False
            z = state.stack.forward(P, M, state.levels)[0, state.inv].real
            M[0, pos] = True
            D = (state.omega - z) ** 2 + gam
            ok = np.abs(D) >= POLE_EPS
            with np.errstate(all="ignore"):
                new_q = np.where(ok, A / np.where(ok, D, 1.0), 0.0).real
            res = base_res + np.where(valid, new_q - q[i].real, 0.0)
            impact = abs(float(np.sum(res ** 2) / n_valid) - base)
            if not ok[valid].all():
                impact = math.inf
            cands.append((impact, abs(P[0, pos]), i, pos))
    cands.sort(key=lambda c: (c[0], c[1], c[2], c[3]))

    def left_after(j):
        total = 0
        for i in _term_alive_mask(state):
            mine = [pos for _, _, t, pos in cands[:j] if t == i]
            if TERM in mine:
                continue
            net = model.terms[i].h.copy()
            net.active[:] = state.hm[i]
            net.active[mine] = False
            cascade_cleanup(net)
            total += int(net.active.sum())
        return total

    lo, hi = 0, k
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if left_after(mid) >= min_edges:
            lo = mid
        else:
            hi = mid - 1
    for _, _, i, pos in cands[:lo]:
        if pos == TERM:
            state.kill_term(i)
        elif state.alive[i]:
            state.hm[i, pos] = False
    return lo


def fit_frf(data: FrfData, config: FrfConfig | None = None, callback=None) -> FrfFit:
    """Joint three-phase fit of trend, amplitudes, widths and resonance subnetworks."""
    config = config or FrfConfig()
    if len(data) < 100 or data.levels.size < 2:
        raise InvalidConfig("need >= 100 samples spanning >= 2 damage levels")
    schedule = config.resolved_schedule()
    levels = data.levels
    d_ref = float(levels[np.argmin(np.abs(levels - levels.mean()))])
    model = init_frf_model(config.n_terms, config, d_ref, data)
    model.a, model.b = baseline(data.omega, data.y)
    state = _FrfState(model, data)
    history, events = [], []
    epoch = 0
    for phase_no, phase in enumerate(schedule.phases, start=1):
        epoch = _frf_phase(state, model, phase_no, phase, schedule, config, history, events, epoch, callback)
    state.write_back(model)
    return FrfFit(model, history, events)


def _frf_phase(state, model, phase_no, phase, schedule, config, history, events, epoch, callback):
    spec = phase.effective_loss
    opt = Adam(state.theta.size)
    lr = phase.lr
    pr = phase.pruning
    impact = pr is not None and pr.kind == "impact_iterative"
    plateau = _Plateau(schedule.convergence_threshold,
                       phase.lr_plateau.patience if phase.lr_plateau else schedule.convergence_patience)
    best_loss, best = math.inf, None

    def prune():
        n = _frf_impact_prune(state, model, pr.fraction, config.min_edges)
        dead = state.cleanup(model)
        events.append(dict(epoch=epoch, phase=phase_no, kind="impact", pruned=n,
                           dead_terms=dead, active_after=state.edge_count()))
        _check_alive(state)
        return _Plateau(plateau.threshold, plateau.patience)

    i = 0
    while i < phase.epochs:
        total, mse, l1, im, flagged, grad = state.loss_grad(spec.lambda_l1, spec.lambda_im)
        if not np.isfinite(grad).all() or not math.isfinite(total):
            raise DegenerateModel("non-finite loss or gradient while fitting")
        history.append((epoch, phase_no, total, mse, l1, im, state.edge_count(), lr, flagged))
        if callback is not None:
            callback(epoch, phase_no, total)
        if phase_no == 3 and total < best_loss:
            best_loss, best = total, (state.theta.copy(), state.mask.copy())
        opt.step(state.theta, grad, lr, state.mask)
        i += 1
        epoch += 1
        stalled = plateau.update(total)
        if impact and i % pr.interval_epochs == 0:
            plateau = prune()
        elif stalled:
            if phase.lr_plateau is not None and lr > phase.lr_plateau.min_lr * (1 + 1e-12):
                lr = max(lr * phase.lr_plateau.factor, phase.lr_plateau.min_lr)
                plateau.wait = 0
            elif impact:
                nxt = (i // pr.interval_epochs + 1) * pr.interval_epochs
                if nxt > phase.epochs:
                    break
                epoch += nxt - i
                i = nxt
                plateau = prune()
            else:
                break
    if phase_no == 3 and best is not None:
        state.theta[:], state.mask[:] = best
    if pr is not None and pr.kind == "threshold_once" and phase.epochs > 0:
        _phase1_prune(state, model, pr.threshold)
        dead = state.cleanup(model)
        events.append(dict(epoch=epoch, phase=phase_no, kind="threshold", dead_terms=dead,
                           active_after=state.edge_count()))
        _check_alive(state)
    return epoch


def _check_alive(state):
    if not state.alive.any():
        y = state.y
        if np.ptp(y) > 1e-12 * max(1.0, float(np.max(np.abs(y)))):
            raise DegenerateModel("every resonant term was pruned")


def _phase1_prune(state: _FrfState, model: FrfModel, threshold: float):
    """Threshold prune subnetwork weights; drop terms whose peak contribution is below ``threshold``."""
    state.hm[np.abs(state.hw) < threshold] = False
    _, _, _, q, _, _ = state.predict_parts()
    for i in _term_alive_mask(state):
        if np.max(np.abs(q[i].real)) < threshold:
            state.kill_term(i)


def extract_locations(model: FrfModel) -> list[ex.Expr]:
    return [t.expression() for t in model.alive_terms]


def polynomial_degree(e: ex.Expr) -> int | None:
    """Degree in ``x1`` of a polynomial tree, or None for non-polynomials."""
    import sympy as sp
    s = sp.expand(ex.to_sympy(e))
    x = sp.Symbol("x1")
    if not s.free_symbols:
        return 0
    try:
        return int(sp.Poly(s, x).degree())
    except sp.PolynomialError:
        return None
