"""Symbolic expression trees: extraction from a network, evaluation, node
counting, simplification, rendering and JSON export.

Trees are immutable.  ``Sum`` and ``Product`` are n-ary and kept flat.
Variables are 1-based (``Var(1)`` renders as ``x1``).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import reduce
from typing import Union

import numpy as np

from .complexmath import OperatorKind as Op
from .errors import DegenerateModel, ImaginaryResidue

COEFF_DROP = 1e-9
DEN_EPS = 1e-12


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Sum:
    children: tuple


@dataclass(frozen=True)
class Product:
    children: tuple


@dataclass(frozen=True)
class Power:
    base: "Expr"
    exponent: "Expr"


@dataclass(frozen=True)
class Log:
    arg: "Expr"


@dataclass(frozen=True)
class Sqrt:
    arg: "Expr"


@dataclass(frozen=True)
class Divide:
    numerator: "Expr"
    denominator: "Expr"


Expr = Union[Const, Var, Sum, Product, Power, Log, Sqrt, Divide]
ZERO = Const(0.0)
ONE = Const(1.0)


def children(e: Expr) -> tuple:
    if isinstance(e, (Sum, Product)):
        return e.children
    if isinstance(e, Power):
        return (e.base, e.exponent)
    if isinstance(e, (Log, Sqrt)):
        return (e.arg,)
    if isinstance(e, Divide):
        return (e.numerator, e.denominator)
    return ()


# --- construction with light normalisation -----------------------------------

def make_sum(terms) -> Expr:
    flat, const = [], 0.0
    for t in terms:
        parts = t.children if isinstance(t, Sum) else (t,)
        for p in parts:
            if isinstance(p, Const):
                const += p.value
            else:
                flat.append(p)
    if const != 0.0 or not flat:
        flat.append(Const(const))
    return flat[0] if len(flat) == 1 else Sum(tuple(flat))


def make_product(factors) -> Expr:
    flat, coef = [], 1.0
    for f in factors:
        parts = f.children if isinstance(f, Product) else (f,)
        for p in parts:
            if isinstance(p, Const):
                coef *= p.value
            else:
                flat.append(p)
    if coef == 0.0:
        return ZERO
    if not flat:
        return Const(coef)
    # constant times a sum distributes
    if len(flat) == 1 and isinstance(flat[0], Sum) and coef != 1.0:
        return make_sum(make_product([Const(coef), t]) for t in flat[0].children)
    if coef != 1.0:
        flat.insert(0, Const(coef))
    return flat[0] if len(flat) == 1 else Product(tuple(flat))


def make_power(base: Expr, exponent: float) -> Expr:
    if isinstance(base, Power) and isinstance(base.exponent, Const):
        return make_power(base.base, base.exponent.value * exponent)
    if isinstance(base, Const):
        return Const(base.value ** exponent)
    if exponent == 1:
        return base
    return Power(base, Const(float(exponent)))


def make_divide(num: Expr, den: Expr) -> Expr:
    if isinstance(num, Const) and num.value == 0.0:
        return ZERO
    if isinstance(den, Const):
        return make_product([Const(1.0 / den.value), num])
    if isinstance(num, Product) and isinstance(num.children[0], Const):
        # keep the scalar outside so sums of fractions can be compared
        return make_product([num.children[0], Divide(make_product(num.children[1:]), den)])
    return Divide(num, den)


def coefficient(term: Expr) -> float:
    """Leading numeric factor of an additive term."""
    if isinstance(term, Const):
        return term.value
    if isinstance(term, Product) and isinstance(term.children[0], Const):
        return term.children[0].value
    return 1.0


def drop_small(e: Expr, tol: float = COEFF_DROP) -> Expr:
    """Remove additive terms whose coefficient magnitude is below ``tol``."""
    if isinstance(e, Sum):
        kept = [drop_small(t, tol) for t in e.children if abs(coefficient(t)) >= tol]
        return make_sum(kept) if kept else ZERO
    if isinstance(e, Product):
        if abs(coefficient(e)) < tol:
            return ZERO
        return make_product(drop_small(c, tol) for c in e.children)
    if isinstance(e, Const):
        return ZERO if abs(e.value) < tol else e
    if isinstance(e, Power):
        return Power(drop_small(e.base, tol), e.exponent)
    if isinstance(e, Log):
        return Log(drop_small(e.arg, tol))
    if isinstance(e, Sqrt):
        return Sqrt(drop_small(e.arg, tol))
    if isinstance(e, Divide):
        return make_divide(drop_small(e.numerator, tol), drop_small(e.denominator, tol))
    return e


# --- node count ---------------------------------------------------------------

def node_count(e: Expr) -> int:
    """Size of a flattened tree.

    Every node counts once: ``Sum``/``Product`` count 1 however many children
    they have, a ``Power`` counts itself plus base and exponent (so ``x^2`` is
    3 nodes), signed constants are single nodes.  With this convention
    ``1.87*x1 + 2.01`` has 5 nodes and ``2.48*x1^2 + 1.92*x1 - 0.68`` has 10.
    """
    return 1 + sum(node_count(c) for c in children(e))


# --- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    value: float
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.reason is None


def evaluate(e: Expr, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised real evaluation; returns ``(values, valid)`` with nan where flagged."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    val, bad = _eval(e, X)
    with np.errstate(invalid="ignore"):
        bad = bad | ~np.isfinite(val)
    return np.where(bad, np.nan, val), ~bad


def _eval(e, X):
    n = X.shape[0]
    none = np.zeros(n, dtype=bool)
    with np.errstate(all="ignore"):
        if isinstance(e, Const):
            return np.full(n, e.value), none
        if isinstance(e, Var):
            return X[:, e.index - 1].copy(), none
        if isinstance(e, (Sum, Product)):
            vals, bad = [], none.copy()
            for c in e.children:
                v, b = _eval(c, X)
                vals.append(v)
                bad |= b
            op = np.add if isinstance(e, Sum) else np.multiply
            return reduce(op, vals), bad
        if isinstance(e, Power):
            b, bb = _eval(e.base, X)
            p, pb = _eval(e.exponent, X)
            integral = p == np.round(p)
            bad = bb | pb | ((b < 0) & ~integral) | ((b == 0) & (p < 0))
            return np.power(b, p), bad
        if isinstance(e, Log):
            a, ab = _eval(e.arg, X)
            bad = ab | ~(a > 0)
            return np.log(np.where(bad, 1.0, a)), bad
        if isinstance(e, Sqrt):
            a, ab = _eval(e.arg, X)
            bad = ab | ~(a > 0)
            return np.sqrt(np.where(bad, 1.0, a)), bad
        if isinstance(e, Divide):
            a, ab = _eval(e.numerator, X)
            d, db = _eval(e.denominator, X)
            bad = ab | db | ~(np.abs(d) >= DEN_EPS)
            return a / np.where(bad, 1.0, d), bad
    raise TypeError(f"not an expression node: {e!r}")


def eval_expr(e: Expr, inputs) -> Evaluation:
    x = np.asarray(inputs, dtype=float).reshape(1, -1)
    reason = _first_flag(e, x[0])
    if reason is not None:
        return Evaluation(math.nan, reason)
    val, ok = evaluate(e, x)
    if not ok[0]:
        return Evaluation(math.nan, "non-finite value")
    return Evaluation(float(val[0]))


def _first_flag(e, x):
    for c in children(e):
        r = _first_flag(c, x)
        if r is not None:
            return r
    X = x.reshape(1, -1)
    if isinstance(e, (Log, Sqrt)):
        a, _ = evaluate(e.arg, X)
        if not a[0] > 0:
            return f"{type(e).__name__.lower()} of non-positive argument {a[0]:.6g}"
    if isinstance(e, Divide):
        d, _ = evaluate(e.denominator, X)
        if not abs(d[0]) >= DEN_EPS:
            return f"division by |den| < {DEN_EPS:g}"
    return None


# --- sympy bridge -----------------------------------------------------------------

def to_sympy(e: Expr):
    import sympy as sp
    if isinstance(e, Const):
        v = e.value
        return sp.Integer(int(v)) if v == int(v) and abs(v) < 2 ** 53 else sp.Float(v, 17)
    if isinstance(e, Var):
        return sp.Symbol(f"x{e.index}")
    if isinstance(e, Sum):
        return sp.Add(*[to_sympy(c) for c in e.children])
    if isinstance(e, Product):
        return sp.Mul(*[to_sympy(c) for c in e.children])
    if isinstance(e, Power):
        p = e.exponent.value if isinstance(e.exponent, Const) else None
        exp = sp.Integer(int(p)) if p is not None and p == int(p) else to_sympy(e.exponent)
        return sp.Pow(to_sympy(e.base), exp)
    if isinstance(e, Log):
        return sp.log(to_sympy(e.arg))
    if isinstance(e, Sqrt):
        return sp.sqrt(to_sympy(e.arg))
    if isinstance(e, Divide):
        return to_sympy(e.numerator) / to_sympy(e.denominator)
    raise TypeError(e)


def from_sympy(s) -> Expr:
    import sympy as sp
    if s.is_Number:
        return Const(float(s))
    if s.is_Symbol:
        return Var(int(str(s)[1:]))
    if s.is_Add:
        return make_sum(from_sympy(a) for a in s.args)
    if s.is_Mul:
        num, den = [], []
        for f in s.args:
            if f.is_Pow and f.exp.is_Number and f.exp < 0:
                den.append(from_sympy(sp.Pow(f.base, -f.exp)))
            else:
                num.append(from_sympy(f))
        prod = make_product(num)
        return make_divide(prod, make_product(den)) if den else prod
    if s.is_Pow:
        b, p = s.base, s.exp
        if p.is_Number and p < 0:
            return make_divide(ONE, from_sympy(sp.Pow(b, -p)))
        if p == sp.Rational(1, 2) or (p.is_Float and float(p) == 0.5):
            return Sqrt(from_sympy(b))
        if p.is_Number:
            return make_power(from_sympy(b), float(p))
        return Power(from_sympy(b), from_sympy(p))
    if isinstance(s, sp.log):
        return Log(from_sympy(s.args[0]))
    raise TypeError(f"unsupported sympy node {s.func}")


def max_var(e: Expr) -> int:
    if isinstance(e, Var):
        return e.index
    return max((max_var(c) for c in children(e)), default=0)


def _probe(dim: int, radius: float = 4.0, n: int = 256) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.uniform(-radius, radius, (n, dim))


def fold_numeric_constants(e: Expr, dim: int | None = None, rtol: float = 1e-12) -> Expr:
    """Replace subtrees that are constant to ``rtol`` over ``[-4, 4]^dim`` by a ``Const``.

    Pruned networks often build constants out of ratios like ``(a*x + b)/(c*x + d)``
    with ``a/c == b/d`` up to rounding; exact cancellation cannot see those.
    """
    dim = dim or max_var(e)
    if dim == 0:
        return e
    X = _probe(dim)

    def visit(node):
        if isinstance(node, (Const, Var)):
            return node
        kids = [visit(c) for c in children(node)]
        node = _rebuild(node, kids)
        if isinstance(node, Const):
            return node
        v, ok = evaluate(node, X)
        if ok.mean() < 0.9:
            return node
        v = v[ok]
        mid = float(np.median(v))
        if np.ptp(v) <= rtol * max(1.0, abs(mid)):
            return Const(mid)
        return node

    return visit(e)


def _rebuild(node, kids):
    if isinstance(node, Sum):
        return make_sum(kids)
    if isinstance(node, Product):
        return make_product(kids)
    if isinstance(node, Power):
        if isinstance(kids[1], Const):
            return make_power(kids[0], kids[1].value)
        return Power(*kids)
    if isinstance(node, Log):
        return Log(kids[0])
    if isinstance(node, Sqrt):
        return Sqrt(kids[0])
    return make_divide(*kids)


def simplify(e: Expr, coeff_drop: float = COEFF_DROP) -> Expr:
    """Cancel and expand rational structure, then drop negligible terms.

    Uses sympy's ``cancel`` so that artefacts such as ``x/x`` or a polynomial
    over one of its own factors collapse; the result is either an expanded
    polynomial-like sum or a single ``Divide`` of two expanded sums.
    """
    import sympy as sp
    e = drop_small(fold_numeric_constants(e), coeff_drop)
    if isinstance(e, Const):
        return e
    s = sp.cancel(to_sympy(e))
    num, den = sp.fraction(s)
    num, den = sp.expand(num), sp.expand(den)
    if num.has(sp.I, sp.pi) or den.has(sp.I, sp.pi):
        # sympy split a log or root of a negative constant into complex parts
        return e
    if den.is_Number:
        out = from_sympy(sp.expand(num / den))
    else:
        out = make_divide(from_sympy(num), from_sympy(den))
    return drop_small(out, coeff_drop)


# --- rendering -------------------------------------------------------------------

def format_const(v: float, precision: int = 5) -> str:
    if v == 0:
        return "0"
    if abs(v) < 0.5 * 10 ** -precision or abs(v) >= 1e12:
        return f"{v:.{max(precision - 2, 1)}e}"
    s = f"{v:.{precision}f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def _monomial_key(term: Expr):
    """Exponent signature of a term (None when it is not a monomial)."""
    exps = {}

    def visit(f):
        if isinstance(f, Var):
            exps[f.index] = exps.get(f.index, 0) + 1
            return True
        if isinstance(f, Power) and isinstance(f.base, Var) and isinstance(f.exponent, Const):
            exps[f.base.index] = exps.get(f.base.index, 0) + f.exponent.value
            return True
        return isinstance(f, Const)

    factors = term.children if isinstance(term, Product) else (term,)
    if not all(visit(f) for f in factors):
        return None
    return exps


def _term_order(term: Expr):
    if isinstance(term, Const):
        return (2, (), term.value)
    exps = _monomial_key(term)
    if exps is None:
        return (1, (), coefficient(term))
    nvar = max(exps) if exps else 0
    sig = tuple(-exps.get(i, 0) for i in range(1, nvar + 1))
    return (0, sig, coefficient(term))


def ordered_terms(e: Sum) -> list:
    return sorted(e.children, key=_term_order)


def _negate(term: Expr) -> Expr:
    if isinstance(term, Const):
        return Const(-term.value)
    if isinstance(term, Product) and isinstance(term.children[0], Const):
        c = -term.children[0].value
        rest = term.children[1:]
        return Product((Const(c),) + rest)
    return Product((Const(-1.0), term))


def _is_negative(term: Expr) -> bool:
    return coefficient(term) < 0 and (isinstance(term, Const) or
                                      (isinstance(term, Product) and isinstance(term.children[0], Const)))


def render(e: Expr, precision: int = 5, names=None) -> str:
    """Deterministic infix text, e.g. ``1.87*x1 + 2.01``.

    ``names`` optionally maps variable index ``i`` (1-based) to ``names[i-1]``.
    """
    text = _render(e, precision)
    if names:
        text = re.sub(r"x(\d+)", lambda m: names[int(m.group(1)) - 1], text)
    return text


def _atomic(e) -> bool:
    return isinstance(e, (Var, Log, Sqrt)) or (isinstance(e, Const) and e.value >= 0)


def _render(e, p) -> str:
    if isinstance(e, Const):
        return format_const(e.value, p)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Sum):
        out = []
        for i, t in enumerate(ordered_terms(e)):
            neg = _is_negative(t)
            body = _render(_negate(t) if neg else t, p)
            if i == 0:
                out.append("-" + body if neg else body)
            else:
                out.append((" - " if neg else " + ") + body)
        return "".join(out)
    if isinstance(e, Product):
        parts = []
        for f in e.children:
            s = _render(f, p)
            if isinstance(f, (Sum, Divide)) or (isinstance(f, Const) and f.value < 0 and parts):
                s = f"({s})"
            parts.append(s)
        return "*".join(parts)
    if isinstance(e, Power):
        base = _render(e.base, p)
        if not isinstance(e.base, Var):
            base = f"({base})"
        ex = e.exponent
        if isinstance(ex, Const) and ex.value == int(ex.value):
            exs = str(int(ex.value))
        else:
            exs = _render(ex, p)
            if not _atomic(ex):
                exs = f"({exs})"
        return f"{base}^{exs}"
    if isinstance(e, Log):
        return f"log({_render(e.arg, p)})"
    if isinstance(e, Sqrt):
        return f"sqrt({_render(e.arg, p)})"
    if isinstance(e, Divide):
        num, den = _render(e.numerator, p), _render(e.denominator, p)
        if not _atomic(e.numerator):
            num = f"({num})"
        if not _atomic(e.denominator):
            den = f"({den})"
        return f"{num}/{den}"
    raise TypeError(e)


# --- JSON AST ----------------------------------------------------------------------

def to_json(e: Expr) -> dict:
    if isinstance(e, Const):
        return {"node": "const", "value": e.value}
    if isinstance(e, Var):
        return {"node": "var", "index": e.index}
    tag = {Sum: "sum", Product: "product", Power: "power", Log: "log",
           Sqrt: "sqrt", Divide: "divide"}[type(e)]
    return {"node": tag, "children": [to_json(c) for c in children(e)]}


def from_json(d: dict) -> Expr:
    tag = d["node"]
    if tag == "const":
        return Const(float(d["value"]))
    if tag == "var":
        return Var(int(d["index"]))
    kids = [from_json(c) for c in d["children"]]
    if tag == "sum":
        return Sum(tuple(kids))
    if tag == "product":
        return Product(tuple(kids))
    if tag == "power":
        return Power(*kids)
    if tag == "log":
        return Log(kids[0])
    if tag == "sqrt":
        return Sqrt(kids[0])
    if tag == "divide":
        return Divide(*kids)
    raise ValueError(f"unknown node tag {tag!r}")


def dumps(e: Expr) -> str:
    return json.dumps(to_json(e))


def loads(s: str) -> Expr:
    return from_json(json.loads(s))


# --- extraction ---------------------------------------------------------------------

def imaginary_residue(net, im_tolerance: float) -> list[int]:
    w = net.edge_weights()
    return [int(e) for e in np.flatnonzero(net.edge_active() & (np.abs(w.imag) > im_tolerance))]


def extract(net, im_tolerance: float = 1e-4, coeff_drop: float = COEFF_DROP,
            simplified: bool = True) -> Expr:
    """Expression induced by the active edges; weights enter as ``Re(w)``."""
    from .train import cascade_cleanup, output_connected

    net = net.copy()
    cascade_cleanup(net)
    if not output_connected(net):
        raise DegenerateModel("no active path to the output")
    bad = imaginary_residue(net, im_tolerance)
    if bad:
        raise ImaginaryResidue(f"{len(bad)} active edges with |Im(w)| > {im_tolerance:g}", bad)

    inputs = [Var(i + 1) for i in range(net.input_dim)]
    prev: list = []
    for k in range(net.n_blocks):
        sources = list(prev) if k else []
        if k == 0 or net.skip_inputs:
            sources += inputs
        sources.append(ONE)
        W, M = net.block(net.params, k), net.block(net.active, k)
        sums = []
        for c in range(net.n_sum(k)):
            terms = [make_product([Const(float(W[r, c].real)), sources[r]])
                     for r in np.flatnonzero(M[:, c])]
            sums.append(make_sum(terms) if terms else ZERO)
        if k == len(net.layers):
            raw = sums[0]
            break
        spec = net.layers[k]
        last = k == len(net.layers) - 1
        acts = []
        for j, op in enumerate(spec.unary_ops):
            z = sums[j]
            if op in (Op.IDENTITY, Op.CONSTANT):
                acts.append(z)
            elif op is Op.SQUARE:
                acts.append(_square(z))
            elif op is Op.LOG:
                if z == ZERO:
                    acts.append(ZERO)
                else:
                    # only Re(log z) = log|z| reaches a real-weighted output
                    acts.append(Log(make_product([Const(-1.0), z])) if last and _nonpositive(z) else Log(z))
            elif op is Op.SQRT:
                # sqrt of a non-positive real is imaginary and projects away at the output
                acts.append(ZERO if z == ZERO or (last and _nonpositive(z)) else Sqrt(z))
        for b, op in enumerate(spec.binary_ops):
            a, d = sums[spec.m + 2 * b], sums[spec.m + 2 * b + 1]
            if op is Op.MULTIPLY:
                acts.append(make_product([a, d]))
            else:
                acts.append(make_divide(a, d) if d != ZERO else ZERO)
        prev = acts
    raw = drop_small(raw, coeff_drop)
    return simplify(raw, coeff_drop) if simplified else raw


def _nonpositive(z: Expr) -> bool:
    """True when sympy can prove ``z <= 0`` for every real input."""
    import sympy as sp
    s = to_sympy(z)
    real = {sym: sp.Symbol(sym.name, real=True) for sym in s.free_symbols}
    return bool((-s.xreplace(real)).is_nonnegative)


def _square(z: Expr) -> Expr:
    if isinstance(z, Const):
        return Const(z.value * z.value)
    if isinstance(z, Product) and isinstance(z.children[0], Const):
        c = z.children[0].value
        return make_product([Const(c * c), make_power(make_product(z.children[1:]), 2)])
    return make_power(z, 2)


def divides(e: Expr):
    """All ``Divide`` nodes in ``e`` (pre-order)."""
    if isinstance(e, Divide):
        yield e
    for c in children(e):
        yield from divides(c)


def real_roots_1d(e: Expr, lo: float, hi: float, n: int = 20001) -> list[float]:
    """Sign changes of a univariate expression on ``[lo, hi]``, refined by bisection."""
    xs = np.linspace(lo, hi, n)
    v, ok = evaluate(e, xs.reshape(-1, 1))
    roots = []
    for i in range(n - 1):
        if ok[i] and ok[i + 1] and (v[i] == 0 or v[i] * v[i + 1] < 0):
            a, b = xs[i], xs[i + 1]
            fa = v[i]
            for _ in range(60):
                m = 0.5 * (a + b)
                fm = evaluate(e, np.array([[m]]))[0][0]
                if fa * fm <= 0:
                    b = m
                else:
                    a, fa = m, fm
            roots.append(0.5 * (a + b))
    return roots
