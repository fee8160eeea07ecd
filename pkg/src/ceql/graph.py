"""Layered operator network with complex edge weights.

Every layer is a dense block of summation nodes ``z = sources @ W`` followed by
operator nodes.  Sources for layer ``k`` are the previous layer's activations,
the raw inputs (first layer always; deeper layers when ``skip_inputs``), and a
constant-one "bias" source that only feeds Constant nodes.  The output node is
one more summation block with a single column and no operator; the prediction
is the real part of that sum.

All weights live in one flat ``complex128`` vector (``net.params``) so the
optimiser and the finite-difference oracle can treat the model as a plain
parameter vector.  ``net.weights[k]`` are reshaped views into it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import complexmath as cm
from .complexmath import OperatorKind
from .errors import InvalidConfig

Op = OperatorKind


@dataclass(frozen=True)
class LayerSpec:
    unary_ops: tuple[OperatorKind, ...]
    binary_ops: tuple[OperatorKind, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "unary_ops", tuple(self.unary_ops))
        object.__setattr__(self, "binary_ops", tuple(self.binary_ops))
        for op in self.unary_ops:
            if op.arity != 1:
                raise InvalidConfig(f"{op.value} is binary, listed as unary")
        for op in self.binary_ops:
            if op.arity != 2:
                raise InvalidConfig(f"{op.value} is unary, listed as binary")

    @property
    def m(self) -> int:
        return len(self.unary_ops)

    @property
    def n(self) -> int:
        return len(self.binary_ops)

    @property
    def n_sum(self) -> int:
        return self.m + 2 * self.n

    @property
    def n_act(self) -> int:
        return self.m + self.n

    def node_kinds(self) -> list[OperatorKind]:
        """Operator attached to each summation column (binary ops appear twice)."""
        kinds = list(self.unary_ops)
        for op in self.binary_ops:
            kinds += [op, op]
        return kinds

    def to_dict(self) -> dict:
        return {"unary": [op.value for op in self.unary_ops],
                "binary": [op.value for op in self.binary_ops]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(tuple(Op.parse(s) for s in d.get("unary", ())),
                   tuple(Op.parse(s) for s in d.get("binary", ())))


def default_library(variant: str = "as_printed") -> list[LayerSpec]:
    """Two-layer benchmark library.

    ``as_printed`` repeats the constant pair in layer 1; ``id_substituted``
    reads the second pair as identities.
    """
    if variant == "as_printed":
        first = (Op.CONSTANT, Op.CONSTANT, Op.SQUARE, Op.SQUARE, Op.CONSTANT, Op.CONSTANT)
    elif variant == "id_substituted":
        first = (Op.CONSTANT, Op.CONSTANT, Op.SQUARE, Op.SQUARE, Op.IDENTITY, Op.IDENTITY)
    else:
        raise InvalidConfig(f"unknown library variant {variant!r}")
    return [
        LayerSpec(first, (Op.MULTIPLY, Op.MULTIPLY)),
        LayerSpec((Op.IDENTITY, Op.LOG, Op.LOG, Op.SQRT, Op.SQRT), (Op.DIVIDE, Op.DIVIDE)),
    ]


@dataclass(frozen=True)
class InitPolicy:
    re_low: float = -1.0
    re_high: float = 1.0
    im_low: float = -0.5
    im_high: float = 0.5

    def to_dict(self) -> dict:
        return dict(re_low=self.re_low, re_high=self.re_high,
                    im_low=self.im_low, im_high=self.im_high)


@dataclass
class _Groups:
    """Column bookkeeping for one layer, precomputed once."""
    unary: dict = field(default_factory=dict)    # kind -> (sum cols, act cols)
    binary: dict = field(default_factory=dict)   # kind -> (left cols, right cols, act cols)


def _groups_for(spec: LayerSpec) -> _Groups:
    g = _Groups()
    for j, op in enumerate(spec.unary_ops):
        cols, acts = g.unary.setdefault(op, ([], []))
        cols.append(j)
        acts.append(j)
    for k, op in enumerate(spec.binary_ops):
        left, right, acts = g.binary.setdefault(op, ([], [], []))
        left.append(spec.m + 2 * k)
        right.append(spec.m + 2 * k + 1)
        acts.append(spec.m + k)
    g.unary = {op: tuple(np.array(a) for a in v) for op, v in g.unary.items()}
    g.binary = {op: tuple(np.array(a) for a in v) for op, v in g.binary.items()}
    return g


class Network:
    """Complex-weighted operator network.  Build with :func:`build_network`."""

    def __init__(self, input_dim: int, layers: Sequence[LayerSpec], skip_inputs: bool = True):
        if input_dim < 1:
            raise InvalidConfig("input_dim must be >= 1")
        if not layers:
            raise InvalidConfig("network needs at least one layer")
        for spec in layers:
            if spec.n_sum == 0:
                raise InvalidConfig("empty operator library")
        self.input_dim = int(input_dim)
        self.layers = list(layers)
        self.skip_inputs = bool(skip_inputs)

        self.shapes: list[tuple[int, int]] = []
        for k in range(len(self.layers) + 1):
            self.shapes.append((self.fan_in(k) + 1, self.n_sum(k)))
        sizes = [r * c for r, c in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

        n = int(self.offsets[-1])
        self.params = np.zeros(n, dtype=np.complex128)
        self.structural = np.zeros(n, dtype=bool)
        for k in range(self.n_blocks):
            s = self.structural[self.offsets[k]:self.offsets[k + 1]].reshape(self.shapes[k])
            const_cols = np.array([op is Op.CONSTANT for op in self.node_kinds(k)], dtype=bool)
            s[:-1, ~const_cols] = True
            s[-1, const_cols] = True
        self.active = self.structural.copy()
        self.edge_pos = np.flatnonzero(self.structural)
        self._groups = [_groups_for(spec) for spec in self.layers]

    # --- shape helpers -------------------------------------------------------
    @property
    def n_blocks(self) -> int:
        """Weight blocks: one per layer plus the output block."""
        return len(self.layers) + 1

    def n_sum(self, k: int) -> int:
        return 1 if k == len(self.layers) else self.layers[k].n_sum

    def node_kinds(self, k: int) -> list:
        return [None] if k == len(self.layers) else self.layers[k].node_kinds()

    def fan_in(self, k: int) -> int:
        """Sources feeding block ``k``, bias excluded."""
        if k == 0:
            return self.input_dim
        prev = self.layers[k - 1].n_act
        return prev + (self.input_dim if self.skip_inputs else 0)

    def n_prev_acts(self, k: int) -> int:
        return 0 if k == 0 else self.layers[k - 1].n_act

    def block(self, arr: np.ndarray, k: int) -> np.ndarray:
        return arr[self.offsets[k]:self.offsets[k + 1]].reshape(self.shapes[k])

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.block(self.params, k) for k in range(self.n_blocks)]

    @property
    def masks(self) -> list[np.ndarray]:
        return [self.block(self.active, k) for k in range(self.n_blocks)]

    def source_index(self, k: int, kind: str, i: int = 0) -> int:
        """Row of block ``k`` for an activation, raw input, or the bias source."""
        prev = self.n_prev_acts(k)
        if kind == "act":
            if not 0 <= i < prev:
                raise IndexError(f"block {k} has {prev} activation sources")
            return i
        if kind == "input":
            if k > 0 and not self.skip_inputs:
                raise IndexError("inputs only reach block 0 without skip connections")
            if not 0 <= i < self.input_dim:
                raise IndexError("input index out of range")
            return prev + i
        if kind == "bias":
            return self.fan_in(k)
        raise ValueError(kind)

    def describe_source(self, k: int, row: int) -> tuple[str, int]:
        prev = self.n_prev_acts(k)
        if row == self.fan_in(k):
            return "bias", 0
        if row < prev:
            return "act", row
        return "input", row - prev

    # --- edges ---------------------------------------------------------------
    @property
    def n_edges(self) -> int:
        return len(self.edge_pos)

    def edge_location(self, e: int) -> tuple[int, int, int]:
        """(block, source row, target column) of edge ``e``."""
        pos = int(self.edge_pos[e])
        k = int(np.searchsorted(self.offsets, pos, side="right") - 1)
        row, col = divmod(pos - int(self.offsets[k]), self.shapes[k][1])
        return k, row, col

    def edge_id(self, k: int, row: int, col: int) -> int:
        pos = int(self.offsets[k]) + row * self.shapes[k][1] + col
        idx = int(np.searchsorted(self.edge_pos, pos))
        if idx >= len(self.edge_pos) or self.edge_pos[idx] != pos:
            raise IndexError(f"no edge at block {k}, row {row}, col {col}")
        return idx

    def edge_weights(self) -> np.ndarray:
        return self.params[self.edge_pos]

    def edge_active(self) -> np.ndarray:
        return self.active[self.edge_pos]

    def set_edge(self, k: int, row: int, col: int, weight: complex, active: bool = True):
        e = self.edge_id(k, row, col)
        pos = self.edge_pos[e]
        self.active[pos] = active
        self.params[pos] = weight if active else 0.0

    def deactivate(self, edges: Iterable[int]):
        pos = self.edge_pos[np.asarray(list(edges), dtype=int)]
        self.active[pos] = False
        self.params[pos] = 0.0

    def clear(self):
        """Deactivate and zero every edge (start of hand wiring)."""
        self.active[:] = False
        self.params[:] = 0.0

    def alive_columns(self, k: int) -> np.ndarray:
        return self.block(self.active, k).any(axis=0)

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        other.active = self.active.copy()
        return other

    # --- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        edges = []
        for e in range(self.n_edges):
            k, row, col = self.edge_location(e)
            w = self.params[self.edge_pos[e]]
            kind, idx = self.describe_source(k, row)
            edges.append({"block": k, "source": row, "source_kind": kind, "source_index": idx,
                          "target": col, "re": float(w.real), "im": float(w.imag),
                          "active": bool(self.active[self.edge_pos[e]])})
        return {"format": "ceql-network/1", "input_dim": self.input_dim,
                "skip_inputs": self.skip_inputs,
                "layers": [s.to_dict() for s in self.layers], "edges": edges}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        net = cls(d["input_dim"], [LayerSpec.from_dict(s) for s in d["layers"]],
                  d.get("skip_inputs", True))
        net.clear()
        for ed in d["edges"]:
            e = net.edge_id(ed["block"], ed["source"], ed["target"])
            pos = net.edge_pos[e]
            net.active[pos] = ed["active"]
            net.params[pos] = complex(ed["re"], ed["im"])
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_network(input_dim: int, layer_specs: Sequence[LayerSpec], skip_inputs: bool = True,
                  init: InitPolicy | None = None, seed: int = 0) -> Network:
    init = init or InitPolicy()
    net = Network(input_dim, layer_specs, skip_inputs)
    rng = np.random.default_rng(seed)
    n = net.n_edges
    re = rng.uniform(init.re_low, init.re_high, n)
    im = rng.uniform(init.im_low, init.im_high, n)
    net.params[net.edge_pos] = re + 1j * im
    return net


def active_edge_count(net: Network) -> int:
    return int(np.count_nonzero(net.active))


# --- forward pass ------------------------------------------------------------

@dataclass
class Trace:
    """Per-sample values of every summation and operator node."""
    sources: list      # block k -> (N, fan_in+1) complex
    sums: list         # block k -> (N, n_sum) complex
    acts: list         # layer k -> (N, n_act) complex
    prediction: np.ndarray
    valid: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(~self.valid))


def _assemble(prev, Xc, ones, k, net):
    if k == 0:
        return np.concatenate([Xc, ones], axis=1)
    parts = [prev, Xc, ones] if net.skip_inputs else [prev, ones]
    return np.concatenate(parts, axis=1)


def forward_batch(net: Network, X) -> Trace:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, net.input_dim)
    N = X.shape[0]
    Xc = X.astype(np.complex128)
    ones = np.ones((N, 1), dtype=np.complex128)
    valid = np.ones(N, dtype=bool)
    W = net.weights
    sources, sums, acts = [], [], []
    prev = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k, spec in enumerate(net.layers):
            src = _assemble(prev, Xc, ones, k, net)
            Z = src @ W[k]
            H = np.zeros((N, spec.n_act), dtype=np.complex128)
            alive = net.alive_columns(k)
            g = net._groups[k]
            for op, (cols, out) in g.unary.items():
                z = Z[:, cols]
                if op is Op.IDENTITY:
                    H[:, out] = z.real
                elif op is Op.SQUARE:
                    H[:, out] = z.real * z.real
                elif op is Op.CONSTANT:
                    H[:, out] = z
                else:
                    f = cm.log_array if op is Op.LOG else cm.sqrt_array
                    val, ok = f(z)
                    ok |= ~alive[cols]
                    H[:, out] = val
                    valid &= ok.all(axis=1)
            for op, (left, right, out) in g.binary.items():
                a, b = Z[:, left], Z[:, right]
                if op is Op.MULTIPLY:
                    H[:, out] = a.real * b.real
                else:
                    val, ok = cm.div_array(a, b)
                    ok |= ~alive[right]
                    H[:, out] = val
                    valid &= ok.all(axis=1)
            finite = np.isfinite(H).all(axis=1)
            if not finite.all():
                valid &= finite
                H[~finite] = 0.0
            sources.append(src)
            sums.append(Z)
            acts.append(H)
            prev = H
        src = _assemble(prev, Xc, ones, len(net.layers), net)
        Z = src @ W[-1]
        pred = Z[:, 0].real
        valid &= np.isfinite(pred)
    pred = np.where(valid, pred, 0.0)
    sources.append(src)
    sums.append(Z)
    return Trace(sources, sums, acts, pred, valid)


def forward(net: Network, inputs) -> tuple[float, Trace]:
    """Single-sample forward pass.  A flagged sample returns ``nan``."""
    tr = forward_batch(net, np.asarray(inputs, dtype=float).reshape(1, net.input_dim))
    pred = float(tr.prediction[0]) if tr.valid[0] else float("nan")
    return pred, tr


def predict(net: Network, X) -> np.ndarray:
    """Vectorised predictions with ``nan`` at flagged samples."""
    tr = forward_batch(net, X)
    return np.where(tr.valid, tr.prediction, np.nan)
