"""Three-phase training: Adam on (Re, Im) coordinates, sparsity and imaginary
penalties, magnitude and impact pruning, cascade cleanup, plateau LR decay."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from .autodiff import backward
from .complexmath import OperatorKind as Op
from .errors import DegenerateModel, EmptyBatch, InvalidConfig, NonFiniteGradient
from .graph import Network, active_edge_count, forward_batch
from .loss import (LossParts, LossSpec, MSE, RELATIVE_MSE, branch_columns, composite_loss,
                   composite_loss_parts)

log = logging.getLogger(__name__)

__all__ = ["LossSpec", "MSE", "RELATIVE_MSE", "PrunePolicy", "PlateauPolicy", "PhaseConfig",
           "PhaseSchedule", "Adam", "composite_loss", "threshold_prune", "impact_prune",
           "cascade_cleanup", "run_training", "default_schedule", "History", "TrainResult"]

THRESHOLD_ONCE = "threshold_once"
IMPACT_ITERATIVE = "impact_iterative"


@dataclass(frozen=True)
class PrunePolicy:
    kind: str
    threshold: float = 1e-2
    interval_epochs: int = 10_000
    fraction: float = 0.1
    min_edges: int = 15

    def __post_init__(self):
        if self.kind not in (THRESHOLD_ONCE, IMPACT_ITERATIVE):
            raise InvalidConfig(f"unknown prune policy {self.kind!r}")
        if self.kind == IMPACT_ITERATIVE:
            if not 0 < self.fraction < 1:
                raise InvalidConfig("pruning fraction must lie in (0, 1)")
            if self.interval_epochs < 1:
                raise InvalidConfig("pruning interval must be >= 1")


@dataclass(frozen=True)
class PlateauPolicy:
    patience: int = 2000
    factor: float = 0.1
    min_lr: float = 1e-5


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    loss: LossSpec
    lr: float = 1e-2
    pruning: PrunePolicy | None = None
    lr_plateau: PlateauPolicy | None = None
    sparsity: bool = True

    @property
    def effective_loss(self) -> LossSpec:
        return self.loss if self.sparsity else replace(self.loss, lambda_l1=0.0)


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[PhaseConfig, PhaseConfig, PhaseConfig]
    convergence_threshold: float = 1e-7
    convergence_patience: int = 2000

    def __post_init__(self):
        if len(self.phases) != 3:
            raise InvalidConfig("schedule needs exactly three phases")
        p1, p2, p3 = self.phases
        if p3.sparsity:
            # fine-tuning never carries the sparsity term, whatever lambda says
            object.__setattr__(self, "phases", (p1, p2, replace(p3, sparsity=False)))
        if p1.pruning is not None and p1.pruning.kind != THRESHOLD_ONCE:
            raise InvalidConfig("phase 1 only supports threshold pruning")
        if p2.pruning is not None and p2.pruning.kind != IMPACT_ITERATIVE:
            raise InvalidConfig("phase 2 only supports impact pruning")

    def scaled(self, factor: float) -> "PhaseSchedule":
        """Multiply epoch counts and pruning intervals by ``factor``."""
        def sc(n):
            return int(round(n * factor))
        phases = []
        for p in self.phases:
            pr = p.pruning
            if pr is not None and pr.kind == IMPACT_ITERATIVE:
                pr = replace(pr, interval_epochs=max(1, sc(pr.interval_epochs)))
            phases.append(replace(p, epochs=sc(p.epochs), pruning=pr))
        return replace(self, phases=tuple(phases))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSchedule":
        phases = []
        for p in d["phases"]:
            p = dict(p)
            p["loss"] = LossSpec(**p["loss"])
            if p.get("pruning") is not None:
                p["pruning"] = PrunePolicy(**p["pruning"])
            if p.get("lr_plateau") is not None:
                p["lr_plateau"] = PlateauPolicy(**p["lr_plateau"])
            phases.append(PhaseConfig(**p))
        return cls(tuple(phases), d.get("convergence_threshold", 1e-7),
                   d.get("convergence_patience", 2000))


def default_schedule(phase3_lambda_im: float = 1e3, data_term: str = MSE,
                     threshold: float = 1e-2, min_edges: int = 15) -> PhaseSchedule:
    """Benchmark defaults (three phases, 100k/200k/50k epochs)."""
    return PhaseSchedule((
        PhaseConfig(100_000, LossSpec(data_term, 1e-10, 1e-10, 1e-10), 1e-2,
                    PrunePolicy(THRESHOLD_ONCE, threshold=threshold)),
        PhaseConfig(200_000, LossSpec(data_term, 1e-3, 1e-7, 1e3), 1e-2,
                    PrunePolicy(IMPACT_ITERATIVE, interval_epochs=10_000, fraction=0.1,
                                min_edges=min_edges)),
        PhaseConfig(50_000, LossSpec(data_term, phase3_lambda_im, 1e-7, 1e3), 1e-2,
                    None, PlateauPolicy(2000, 0.1, 1e-5), sparsity=False),
    ))


class Adam:
    """Adam over the interleaved (Re, Im) view of a complex parameter vector."""

    def __init__(self, n_params: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(2 * n_params)
        self.v = np.zeros(2 * n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float, active: np.ndarray):
        g = grad.view(np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient entry")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        upd = lr * mhat / (np.sqrt(vhat) + self.eps)
        mask = np.repeat(active, 2)
        p = params.view(np.float64)
        p -= np.where(mask, upd, 0.0)


# --- pruning -----------------------------------------------------------------

def threshold_prune(net: Network, threshold: float) -> int:
    """Deactivate every active edge with ``|w| < threshold``; returns the count."""
    w = net.edge_weights()
    hit = np.flatnonzero(net.edge_active() & (np.abs(w) < threshold))
    if hit.size:
        net.deactivate(hit)
    return int(hit.size)


def edge_impacts(net: Network, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Absolute change in batch MSE when each active edge is zeroed alone."""
    y = np.asarray(y, dtype=float)
    base = forward_batch(net, X)
    nv0 = int(np.count_nonzero(base.valid))
    if nv0 == 0:
        raise EmptyBatch("every sample in the batch was flagged")
    r = base.prediction[base.valid] - y[base.valid]
    l0 = float(np.mean(r * r))
    edges = np.flatnonzero(net.edge_active())
    impacts = np.empty(edges.size)
    for i, e in enumerate(edges):
        pos = net.edge_pos[e]
        w0 = net.params[pos]
        net.params[pos] = 0.0
        net.active[pos] = False
        tr = forward_batch(net, X)
        net.params[pos] = w0
        net.active[pos] = True
        if np.count_nonzero(tr.valid) < nv0:
            impacts[i] = math.inf
            continue
        r = tr.prediction[tr.valid] - y[tr.valid]
        impacts[i] = abs(float(np.mean(r * r)) - l0)
    return edges, impacts


def impact_prune(net: Network, X, y, fraction: float, min_edges: int) -> list[int]:
    """Remove the ``floor(fraction * active)`` lowest-impact edges, never going
    below ``min_edges`` (counted after cascade cleanup).  Ties break on smaller
    ``|w|``, then edge index."""
    n_active = int(np.count_nonzero(net.edge_active()))
    if n_active <= min_edges:
        return []
    k = min(int(math.floor(fraction * n_active)), n_active - min_edges)
    if k <= 0:
        return []
    edges, impacts = edge_impacts(net, X, y)
    mags = np.abs(net.edge_weights()[edges])
    ranked = edges[np.lexsort((edges, mags, impacts))]

    def left_after(j):
        trial = net.copy()
        trial.deactivate(ranked[:j])
        cascade_cleanup(trial)
        return active_edge_count(trial)

    # cleanup can take extra edges with it; keep the floor after cleanup too
    lo, hi = 0, k
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if left_after(mid) >= min_edges:
            lo = mid
        else:
            hi = mid - 1
    chosen = sorted(int(e) for e in ranked[:lo])
    net.deactivate(chosen)
    return chosen


def _reachability(net: Network):
    """Forward 'fed' flags per block source row and backward 'used' flags per
    summation column, through active edges only."""
    n_layers = len(net.layers)
    masks = net.masks
    # fed[k]: node (activation) of layer k can carry a signal from an input/bias
    fed_nodes = []
    fed_src = None
    for k in range(n_layers + 1):
        prev = fed_nodes[-1] if k else np.zeros(0, dtype=bool)
        fed_src = np.ones(net.fan_in(k) + 1, dtype=bool)
        fed_src[:net.n_prev_acts(k)] = prev
        col_fed = (masks[k] & fed_src[:, None]).any(axis=0)
        if k == n_layers:
            break
        spec = net.layers[k]
        act = np.zeros(spec.n_act, dtype=bool)
        act[:spec.m] = col_fed[:spec.m]
        for b in range(spec.n):
            act[spec.m + b] = col_fed[spec.m + 2 * b] and col_fed[spec.m + 2 * b + 1]
        fed_nodes.append(act)
    # used[k]: summation column of block k contributes to the output
    used_cols = [None] * (n_layers + 1)
    used_cols[n_layers] = np.ones(1, dtype=bool)
    for k in range(n_layers, 0, -1):
        prev_spec = net.layers[k - 1]
        src_used = (masks[k] & used_cols[k][None, :]).any(axis=1)[:prev_spec.n_act]
        act_ok = src_used & fed_nodes[k - 1]
        cols = np.zeros(prev_spec.n_sum, dtype=bool)
        cols[:prev_spec.m] = act_ok[:prev_spec.m]
        for b in range(prev_spec.n):
            cols[prev_spec.m + 2 * b] = cols[prev_spec.m + 2 * b + 1] = act_ok[prev_spec.m + b]
        used_cols[k - 1] = cols
    return fed_nodes, used_cols


def cascade_cleanup(net: Network) -> int:
    """Deactivate edges that are not on an active input-to-output path."""
    removed = 0
    while True:
        fed_nodes, used_cols = _reachability(net)
        changed = 0
        for k in range(net.n_blocks):
            fed_src = np.ones(net.fan_in(k) + 1, dtype=bool)
            if k:
                fed_src[:net.n_prev_acts(k)] = fed_nodes[k - 1]
            keep = fed_src[:, None] & used_cols[k][None, :]
            m = net.block(net.active, k)
            drop = m & ~keep
            if drop.any():
                m[drop] = False
                net.block(net.params, k)[drop] = 0.0
                changed += int(np.count_nonzero(drop))
        removed += changed
        if not changed:
            return removed


def output_connected(net: Network) -> bool:
    return bool(net.block(net.active, net.n_blocks - 1).any())


# --- history -----------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "phase", "loss", "data_mse", "l1_mass", "im_mass",
                   "arg_penalty", "active_edges", "lr", "flagged_samples")


class History:
    def __init__(self, capacity: int = 0):
        self._cols = {c: np.zeros(capacity) for c in HISTORY_COLUMNS}
        self.n = 0
        self.prune_events: list[dict] = []
        self.branch_crossings = 0
        self.flagged_total = 0
        self.phase_epochs = [0, 0, 0]

    def append(self, **row):
        if self.n == len(self._cols["epoch"]):
            grow = max(1024, self.n)
            for c in HISTORY_COLUMNS:
                self._cols[c] = np.concatenate([self._cols[c], np.zeros(grow)])
        for c in HISTORY_COLUMNS:
            self._cols[c][self.n] = row[c]
        self.n += 1

    def __len__(self):
        return self.n

    def column(self, name: str) -> np.ndarray:
        return self._cols[name][:self.n]

    def rows(self):
        for i in range(self.n):
            yield {c: self._cols[c][i] for c in HISTORY_COLUMNS}

    def to_csv(self, path):
        ints = {"epoch", "phase", "active_edges", "flagged_samples"}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for i in range(self.n):
                w.writerow([int(self._cols[c][i]) if c in ints else repr(float(self._cols[c][i]))
                            for c in HISTORY_COLUMNS])

    def summary(self) -> dict:
        return {"epochs": self.n, "phase_epochs": list(self.phase_epochs),
                "prune_events": self.prune_events,
                "branch_crossings": self.branch_crossings,
                "flagged_total": self.flagged_total,
                "final_loss": float(self._cols["loss"][self.n - 1]) if self.n else None}


@dataclass
class TrainResult:
    net: Network
    history: History
    status: str = "ok"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class _Plateau:
    def __init__(self, threshold, patience):
        self.threshold, self.patience = threshold, patience
        self.best = math.inf
        self.wait = 0

    def update(self, loss) -> bool:
        """Record ``loss``; True once ``patience`` epochs pass without improvement."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.wait = 0
            return False
        self.best = min(self.best, loss)
        self.wait += 1
        return self.wait >= self.patience


def _branch_state(net, trace):
    out = []
    for k in range(len(net.layers)):
        cols = branch_columns(net, k)
        if cols.size:
            out.append((k, cols, trace.sums[k][:, cols]))
    return out


def _count_crossings(prev, cur) -> int:
    if not prev:
        return 0
    total = 0
    prev_map = {(k, tuple(c)): z for k, c, z in prev}
    for k, cols, z in cur:
        z0 = prev_map.get((k, tuple(cols)))
        if z0 is None:
            continue
        flip = (np.signbit(z0.imag) != np.signbit(z.imag)) & (z0.real < 0) & (z.real < 0)
        total += int(np.count_nonzero(flip))
    return total


def run_training(net: Network, X, y, schedule: PhaseSchedule, seed: int = 0,
                 callback=None, engine: str = "auto") -> TrainResult:
    """Run phases 1-3 on ``net`` in place (full batch).

    The returned network is the best phase-3 snapshot by composite loss.  On a
    degenerate graph or an empty batch the run is reported as failed instead of
    raising.
    """
    X = np.asarray(X, dtype=float).reshape(-1, net.input_dim)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise InvalidConfig("training needs at least two samples")
    del seed  # full-batch training has no stochastic component
    total = sum(p.epochs for p in schedule.phases)
    hist = History(total)
    epoch = 0
    eng = make_engine(net, engine)
    try:
        for phase_no, phase in enumerate(schedule.phases, start=1):
            epoch = _run_phase(net, X, y, phase_no, phase, schedule, hist, epoch, callback, eng)
    except (DegenerateModel, EmptyBatch, NonFiniteGradient) as exc:
        log.warning("training failed: %s", exc)
        return TrainResult(net, hist, "failed", f"{type(exc).__name__}: {exc}")
    return TrainResult(net, hist)


def _after_prune(net, hist, epoch, phase_no, kind, pruned):
    cleaned = cascade_cleanup(net)
    hist.prune_events.append({"epoch": epoch, "phase": phase_no, "kind": kind,
                              "pruned": int(pruned), "cleanup": int(cleaned),
                              "active_after": active_edge_count(net)})
    if not output_connected(net):
        raise DegenerateModel("no active path to the output after pruning")


class _NumpyEngine:
    """Reference path: vectorised numpy forward/backward."""

    def __init__(self, net):
        self.net = net
        self.prev = None

    def reset_crossings(self):
        self.prev = None

    def evaluate(self, X, y, spec):
        trace = forward_batch(self.net, X)
        parts, grad = backward(self.net, X, y, spec, trace)
        cur = _branch_state(self.net, trace)
        crossings = _count_crossings(self.prev, cur)
        self.prev = cur
        return parts, grad, crossings

    def adam(self, n):
        return Adam(n)


class _NumbaEngine:
    def __init__(self, net):
        from ._fast import FastEvaluator
        self.net = net
        self.fe = FastEvaluator(net)
        self.grad = np.zeros_like(net.params)

    def reset_crossings(self):
        self.fe.reset_crossings()

    def evaluate(self, X, y, spec):
        out = self.fe.loss_grad(X, y, spec, self.grad)
        if not np.isfinite(out[0]):
            if out[6] >= len(y):
                raise EmptyBatch("every sample in the batch was flagged")
            raise NonFiniteGradient("non-finite loss")
        parts = LossParts(float(out[0]), float(out[1]), float(out[2]), float(out[3]),
                          float(out[4]), float(out[5]), int(out[6]))
        return parts, self.grad, int(out[7])

    def adam(self, n):
        return _FastAdam(n)


class _FastAdam(Adam):
    def step(self, params, grad, lr, active):
        from ._fast import adam_step
        g = grad.view(np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient entry")
        self.t += 1
        adam_step(params.view(np.float64), g, self.m, self.v, self.t, lr,
                  self.beta1, self.beta2, self.eps, active)


def make_engine(net, engine="auto"):
    if engine == "numpy":
        return _NumpyEngine(net)
    if engine == "numba":
        return _NumbaEngine(net)
    try:
        import numba  # noqa: F401
    except ImportError:
        return _NumpyEngine(net)
    return _NumbaEngine(net)


def _run_phase(net, X, y, phase_no, phase, schedule, hist, epoch, callback, engine):
    loss_spec = phase.effective_loss
    adam = engine.adam(net.params.size)
    engine.reset_crossings()
    lr = phase.lr
    pr = phase.pruning
    impact = pr is not None and pr.kind == IMPACT_ITERATIVE
    plateau = _Plateau(schedule.convergence_threshold,
                       phase.lr_plateau.patience if phase.lr_plateau else schedule.convergence_patience)
    best_loss, best = math.inf, None
    i = 0
    while i < phase.epochs:
        parts, grad, crossings = engine.evaluate(X, y, loss_spec)
        hist.branch_crossings += crossings
        hist.flagged_total += parts.n_flagged
        hist.append(epoch=epoch, phase=phase_no, loss=parts.total, data_mse=parts.data_mse,
                    l1_mass=parts.l1_mass, im_mass=parts.im_mass, arg_penalty=parts.arg_penalty,
                    active_edges=active_edge_count(net), lr=lr, flagged_samples=parts.n_flagged)
        hist.phase_epochs[phase_no - 1] += 1
        if callback is not None:
            callback(epoch, phase_no, parts)
        if phase_no == 3 and parts.total < best_loss:
            best_loss, best = parts.total, (net.params.copy(), net.active.copy())
        adam.step(net.params, grad, lr, net.active)
        i += 1
        epoch += 1

        stalled = plateau.update(parts.total)
        if impact and i % pr.interval_epochs == 0:
            pruned = impact_prune(net, X, y, pr.fraction, pr.min_edges)
            _after_prune(net, hist, epoch, phase_no, "impact", len(pruned))
            plateau = _Plateau(plateau.threshold, plateau.patience)
            engine.reset_crossings()
        elif stalled:
            if phase.lr_plateau is not None and lr > phase.lr_plateau.min_lr * (1 + 1e-12):
                lr = max(lr * phase.lr_plateau.factor, phase.lr_plateau.min_lr)
                plateau.wait = 0
            elif impact:
                # converged between pruning cycles: jump to the next cycle
                nxt = (i // pr.interval_epochs + 1) * pr.interval_epochs
                if nxt > phase.epochs:
                    break
                epoch += nxt - i
                i = nxt
                pruned = impact_prune(net, X, y, pr.fraction, pr.min_edges)
                _after_prune(net, hist, epoch, phase_no, "impact", len(pruned))
                plateau = _Plateau(plateau.threshold, plateau.patience)
                engine.reset_crossings()
            else:
                break

    if phase_no == 3 and best is not None:
        net.params[:], net.active[:] = best
    if pr is not None and pr.kind == THRESHOLD_ONCE and phase.epochs > 0:
        n = threshold_prune(net, pr.threshold)
        _after_prune(net, hist, epoch, phase_no, "threshold", n)
    return epoch
