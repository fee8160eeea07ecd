"""Benchmark expressions, dataset sampling, metrics and aggregation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import expr as ex
from .complexmath import POLE_EPS
from .errors import CeqlError, SamplingStarved
from .expr import Const, Divide, Log, Sqrt, Var

SPLITS = ("train", "interp", "extrap")
Y_LIMIT = 100.0
PROBE_DRAWS = 1_000_000
MIN_ACCEPTANCE = 1e-4


def poly(*terms) -> ex.Expr:
    """Polynomial from ``(coef, {var: power})`` pairs; an empty dict is the constant term."""
    out = []
    for coef, powers in terms:
        factors = [Const(float(coef))]
        for v, p in sorted(powers.items()):
            factors.append(Var(v) if p == 1 else ex.Power(Var(v), Const(float(p))))
        out.append(ex.make_product(factors))
    return ex.make_sum(out)


@dataclass(frozen=True)
class Benchmark:
    id: str
    expr: ex.Expr
    input_dim: int
    illposedness: str = "none"
    pole_count: int = 0

    def __call__(self, X) -> np.ndarray:
        return ex.evaluate(self.expr, X)[0]


def registry() -> list[Benchmark]:
    x1, x2 = {1: 1}, {2: 1}
    sq1, sq2 = {1: 2}, {2: 2}
    return [
        Benchmark("E-1", poly((1.87, x1), (2.01, {})), 1),
        Benchmark("E-2", poly((1.56, x1), (1.59, x2), (-2.91, {})), 2),
        Benchmark("E-3", poly((2.48, sq1), (1.92, x1), (-0.68, {})), 1),
        Benchmark("E-4", poly((0.55, sq1), (2.45, {1: 1, 2: 1}), (1.65, x1), (2.95, sq2),
                              (0.80, x2), (0.86, {})), 2),
        Benchmark("E-5", ex.make_product([Const(-2.05), Log(poly((1.56, sq1), (-0.55, x1), (-2.15, {})))]),
                  1, "undefined_region"),
        Benchmark("E-6", ex.make_product([Const(2.31), Sqrt(poly((2.52, sq1), (-1.52, x1), (-2.24, {})))]),
                  1, "undefined_region"),
        Benchmark("E-7", Divide(poly((-2.94, x1), (0.53, {})), poly((2.32, x1), (1.80, {}))), 1, "pole", 1),
        Benchmark("E-8", Divide(poly((1.00, x1), (2.48, x2), (-1.36, {})),
                                poly((2.26, x1), (-0.91, x2), (1.94, {}))), 2, "pole", 1),
        Benchmark("E-9", Divide(poly((2.84, sq1), (1.84, x1), (-2.33, {})),
                                poly((-0.66, sq1), (2.94, x1), (1.35, {}))), 1, "pole", 1),
        Benchmark("E-10", Divide(poly((-1.08, sq1), (-2.85, x1), (-2.08, {})),
                                 poly((2.56, sq1), (1.78, x1), (-0.74, {}))), 1, "pole", 2),
    ]


def get_benchmark(bench_id: str) -> Benchmark:
    key = bench_id.upper()
    if not key.startswith("E-"):
        key = "E-" + key.lstrip("E")
    for b in registry():
        if b.id == key:
            return b
    raise KeyError(f"unknown benchmark {bench_id!r}")


def sample_coefficients(template: ex.Expr, seed: int) -> ex.Expr:
    """Refill every coefficient of ``template`` with ``s*u``, ``u ~ U(0.5, 3)``, two decimals.

    Exponents are structural and left untouched.
    """
    rng = np.random.default_rng(seed)

    def draw() -> float:
        s = 1.0 if rng.random() < 0.5 else -1.0
        return s * round(float(rng.uniform(0.5, 3.0)), 2)

    def visit(e):
        if isinstance(e, Const):
            return Const(draw())
        if isinstance(e, ex.Power):
            return ex.Power(visit(e.base), e.exponent)
        if isinstance(e, Var):
            return e
        kids = [visit(c) for c in ex.children(e)]
        if isinstance(e, ex.Sum):
            return ex.Sum(tuple(kids))
        if isinstance(e, ex.Product):
            return ex.Product(tuple(kids))
        if isinstance(e, Log):
            return Log(kids[0])
        if isinstance(e, Sqrt):
            return Sqrt(kids[0])
        return Divide(*kids)

    return visit(template)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str
    domain: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path):
        path = Path(path)
        header = [f"x{i + 1}" for i in range(self.input_dim)] + ["y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row, t in zip(self.X, self.y):
                w.writerow([f"{v:.17g}" for v in row] + [f"{t:.17g}"])

    @classmethod
    def from_csv(cls, path, split: str = "train") -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[-1] != "y" or any(h != f"x{i + 1}" for i, h in enumerate(header[:-1])):
            raise ValueError(f"{path}: expected header x1[,x2,...],y")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(data[:, :-1].copy(), data[:, -1].copy(), split)


def split_domain(split: str, dim: int) -> list:
    if split in ("train", "interp"):
        return [[(-2.0, 2.0)]] * dim
    if split == "extrap":
        return [[(-4.0, -2.0), (2.0, 4.0)]] * dim
    raise ValueError(f"unknown split {split!r}")


def _draw(rng, split, n, dim):
    if split == "extrap":
        mag = rng.uniform(2.0, 4.0, (n, dim))
        sign = np.where(rng.random((n, dim)) < 0.5, -1.0, 1.0)
        return sign * mag
    return rng.uniform(-2.0, 2.0, (n, dim))


def sample_dataset(b: Benchmark, split: str, n: int, seed: int) -> Dataset:
    """Rejection-sample ``n`` valid rows of ``b`` on ``split``'s domain."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, SPLITS.index(split), int(b.id.split("-")[1])])
    Xs, ys, have, drawn = [], [], 0, 0
    chunk = max(2 * n, 256)
    while have < n:
        X = _draw(rng, split, chunk, b.input_dim)
        y, ok = ex.evaluate(b.expr, X)
        ok &= np.abs(np.where(ok, y, 0.0)) <= Y_LIMIT
        drawn += chunk
        Xs.append(X[ok])
        ys.append(y[ok])
        have += int(ok.sum())
        if drawn >= PROBE_DRAWS and have / drawn < MIN_ACCEPTANCE:
            raise SamplingStarved(f"{b.id}/{split}: acceptance {have / drawn:.2e} after {drawn} draws")
    X = np.concatenate(Xs)[:n]
    y = np.concatenate(ys)[:n]
    return Dataset(X, y, split, split_domain(split, b.input_dim))


# --- metrics --------------------------------------------------------------------

@dataclass
class RunMetrics:
    interp_mse: float
    extrap_mse: float
    node_count: int
    train_mse: float = math.nan
    seed: int = 0
    interp_flagged: int = 0
    extrap_flagged: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def model_predictions(model, X) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(model, (Const, Var, ex.Sum, ex.Product, ex.Power, Log, Sqrt, Divide)):
        return ex.evaluate(model, X)
    from .graph import predict
    p = predict(model, X)
    return p, np.isfinite(p)


def mse_on(model, data: Dataset) -> tuple[float, int]:
    p, ok = model_predictions(model, data.X)
    if not ok.any():
        return math.nan, int(len(ok))
    r = p[ok] - data.y[ok]
    return float(np.mean(r * r)), int((~ok).sum())


def evaluate_model(model, interp: Dataset, extrap: Dataset, train: Dataset | None = None,
                   seed: int = 0) -> RunMetrics:
    """MSE on both test splits; model-side flagged points are excluded and counted."""
    i_mse, i_bad = mse_on(model, interp)
    e_mse, e_bad = mse_on(model, extrap)
    t_mse = mse_on(model, train)[0] if train is not None else math.nan
    if isinstance(model, (Const, Var, ex.Sum, ex.Product, ex.Power, Log, Sqrt, Divide)):
        nc = ex.node_count(model)
    else:
        nc = ex.node_count(ex.extract(model))
    return RunMetrics(i_mse, e_mse, nc, t_mse, seed, i_bad, e_bad)


STD_CONVENTION = "population"


def aggregate(runs: list[RunMetrics]) -> dict:
    """Mean and population standard deviation of each metric."""
    if not runs:
        raise ValueError("need at least one run")
    out = {"n_runs": len(runs), "std_convention": STD_CONVENTION}
    for name in ("interp_mse", "extrap_mse", "node_count", "train_mse"):
        v = np.array([getattr(r, name) for r in runs], dtype=float)
        out[f"{name}_mean"] = float(np.mean(v))
        out[f"{name}_std"] = float(np.std(v))
    return out


# --- benchmark runs ------------------------------------------------------------------

N_TRAIN = 128
N_TEST = 8192


@dataclass
class RunRecord:
    benchmark: str
    seed: int
    status: str
    metrics: RunMetrics | None
    expression: str = ""
    expression_ast: dict | None = None
    active_edges: int = 0
    seconds: float = 0.0
    message: str = ""
    history: object = None
    network: object = None

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark, "seed": self.seed, "status": self.status,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "expression": self.expression, "expression_ast": self.expression_ast,
            "active_edges": self.active_edges, "seconds": self.seconds, "message": self.message,
        }


def run_benchmark(b: Benchmark, seed: int, schedule=None, scale: float = 1.0, library: str = "as_printed",
                  n_train: int = N_TRAIN, n_test: int = N_TEST, engine: str = "auto",
                  init=None) -> RunRecord:
    """Sample data, train a fresh network, extract and score one seed."""
    from .graph import active_edge_count, build_network, default_library
    from .train import default_schedule, run_training

    start = time.perf_counter()
    train = sample_dataset(b, "train", n_train, seed)
    interp = sample_dataset(b, "interp", n_test, seed)
    extrap = sample_dataset(b, "extrap", n_test, seed)
    schedule = (schedule or default_schedule()).scaled(scale) if scale != 1.0 else (schedule or default_schedule())
    net = build_network(b.input_dim, default_library(library), True, init=init, seed=seed)
    res = run_training(net, train.X, train.y, schedule, seed=seed, engine=engine)
    rec = RunRecord(b.id, seed, res.status, None, history=res.history, network=res.net,
                    active_edges=active_edge_count(res.net), message=res.message)
    if res.ok:
        try:
            e = ex.extract(res.net)
        except CeqlError as err:
            rec.status, rec.message = "failed", f"{type(err).__name__}: {err}"
        else:
            rec.metrics = evaluate_model(e, interp, extrap, train, seed)
            rec.expression, rec.expression_ast = ex.render(e), ex.to_json(e)
    rec.seconds = time.perf_counter() - start
    return rec


# --- division pathology --------------------------------------------------------------

def per_sample_gradient(x, a):
    """Per-sample derivative term of the 1/(x+a) fit; equals ``a / (x (x+a)^3)``."""
    return (1.0 / x - 1.0 / (x + a)) / (x + a) ** 2


@dataclass
class Trajectory:
    a: np.ndarray
    loss: np.ndarray
    flagged: np.ndarray

    @property
    def final_a(self) -> complex:
        return complex(self.a[-1])

    @property
    def final_loss(self) -> float:
        return float(self.loss[-1])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "re_a", "im_a", "loss"])
            for i, (a, l) in enumerate(zip(self.a, self.loss)):
                w.writerow([i, f"{a.real:.17g}", f"{a.imag:.17g}", f"{l:.17g}"])


def division_pathology_demo(init_a: complex, restrict_real: bool = False, steps: int = 20000,
                            lr: float = 1e-2, seed: int = 0, n_points: int = 100) -> Trajectory:
    """Adam fit of ``Re(1/(x+a))`` to ``1/x`` over a single complex parameter ``a``.

    With ``restrict_real`` the imaginary part is pinned to zero after every step.
    Row ``i`` of the trajectory holds ``a`` before step ``i`` and its loss; the
    last row is the final state.
    """
    from .train import Adam

    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, n_points)
    target = 1.0 / x
    a = np.array([complex(init_a.real, 0.0 if restrict_real else complex(init_a).imag)])
    opt = Adam(1)
    mask = np.ones(1, dtype=bool)
    traj = np.empty(steps + 1, dtype=np.complex128)
    losses = np.empty(steps + 1)
    flagged = np.empty(steps + 1, dtype=np.int64)
    for i in range(steps + 1):
        d = x + a[0]
        ok = np.abs(d) >= POLE_EPS
        h = np.where(ok, 1.0 / np.where(ok, d, 1.0), 0.0)
        r = h.real - target
        nv = max(int(ok.sum()), 1)
        traj[i], losses[i], flagged[i] = a[0], float(np.sum(r[ok] ** 2) / nv), int((~ok).sum())
        if i == steps:
            break
        # dh/da = -1/d^2, output projected to the real part
        g_h = np.where(ok, 2.0 * r / nv, 0.0)
        g = np.sum(g_h * np.conj(-h * h))
        grad = np.array([g if not restrict_real else complex(g.real, 0.0)])
        opt.step(a, grad, lr, mask)
        if restrict_real:
            a[0] = complex(a[0].real, 0.0)
    return Trajectory(traj, losses, flagged)
