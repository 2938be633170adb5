"""Minimal reverse-mode autodiff over small dense float64 tensors.

The engine is a Wengert list: a `Tape` records each primitive in execution
order, so iterating the records backwards is a valid reverse topological
traversal that touches every node exactly once. Tensors are immutable once
written; a tape is a single-threaded builder, and independent tapes may run
concurrently over shared read-only parameters.

Forward numerics route through the selected kernel backend (compiled or
numpy), so results are reproducible bit-for-bit within one backend.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as K


class ShapeError(ValueError):
    """Inputs structurally incompatible with the requested op."""


class DegenerateDistributionError(ValueError):
    """A softmax was requested with every entry masked out."""


class Tensor:
    """Immutable dense float64 array value. Wraps a C-contiguous ndarray."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named learnable tensor; optimizer updates replace `.data` in place
    between tapes (the exclusive update phase)."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p),
    so the expected value of `x * mask` equals `x`."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def _check_vector(name, x):
    if x.data.ndim != 1:
        raise ShapeError(f"{name} expects a 1-D tensor, got shape {x.shape}")


class Tape:
    """Ordered record of primitive ops with enough context to run backward.

    Construct with record=False for inference: the same ops run, nothing is
    recorded, and backward() is unavailable.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()

    def __len__(self):
        return len(self._nodes)

    def _emit(self, out: Tensor, inputs, bwd) -> Tensor:
        if self.record:
            self._nodes.append((out, tuple(inputs), bwd))
            self._produced.add(id(out))
        return out

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim not in (1, 2):
            raise ShapeError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        out = Tensor(K.matmul(a.data, b.data))

        def bwd(g):
            return K.matmul_bwd(g, a.data, b.data)

        return self._emit(out, (a, b), bwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
        return self._emit(Tensor(a.data + b.data), (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
        return self._emit(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)
        return self._emit(out, (a, b), lambda g: (g * b.data, g * a.data))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit(Tensor(a.data * c), (a,), lambda g: (g * c,))

    def sigmoid(self, x: Tensor) -> Tensor:
        out = Tensor(K.sigmoid(x.data))
        od = out.data
        return self._emit(out, (x,), lambda g: (g * od * (1.0 - od),))

    def tanh(self, x: Tensor) -> Tensor:
        out = Tensor(np.tanh(x.data))
        od = out.data
        return self._emit(out, (x,), lambda g: (g * (1.0 - od * od),))

    def log(self, x: Tensor) -> Tensor:
        out = Tensor(np.log(x.data))
        return self._emit(out, (x,), lambda g: (g / x.data,))

    def sum(self, x: Tensor) -> Tensor:
        out = Tensor(np.sum(x.data))
        shape = x.data.shape
        return self._emit(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def pick(self, x: Tensor, index: int) -> Tensor:
        _check_vector("pick", x)
        if not 0 <= index < x.size:
            raise ShapeError(f"pick index {index} out of range for size {x.size}")
        out = Tensor(x.data[index])

        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[index] = np.asarray(g).item()
            return (gx,)

        return self._emit(out, (x,), bwd)

    def concat(self, *xs: Tensor) -> Tensor:
        for x in xs:
            _check_vector("concat", x)
        out = Tensor(np.concatenate([x.data for x in xs]))
        sizes = [x.size for x in xs]
        bounds = np.cumsum([0] + sizes)

        def bwd(g):
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

        return self._emit(out, xs, bwd)

    def embedding(self, table: Tensor, index: int) -> Tensor:
        if table.data.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
        if not 0 <= index < table.shape[0]:
            raise ShapeError(f"embedding row {index} out of range for {table.shape}")
        out = Tensor(table.data[index].copy())

        def bwd(g):
            gt = np.zeros_like(table.data)
            gt[index] = g
            return (gt,)

        return self._emit(out, (table,), bwd)

    def dropout(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Multiply by a precomputed inverted-dropout mask (see dropout_mask).
        Pass mask=None upstream for eval mode; this op itself never draws."""
        if x.shape != mask.shape:
            raise ShapeError(f"dropout mask shape {mask.shape} != input {x.shape}")
        out = Tensor(x.data * mask)
        return self._emit(out, (x,), lambda g: (g * mask,))

    def masked_softmax(self, logits: Tensor, mask: np.ndarray) -> Tensor:
        """Probability distribution over entries with mask != 0; masked
        entries are exactly 0. mask is a uint8/bool array."""
        _check_vector("masked_softmax", logits)
        mask = np.ascontiguousarray(mask, dtype=np.uint8)
        if mask.shape != logits.shape:
            raise ShapeError(f"mask shape {mask.shape} != logits {logits.shape}")
        if not mask.any():
            raise DegenerateDistributionError("all softmax entries are masked")
        out = Tensor(K.masked_softmax(logits.data, mask))
        od = out.data
        return self._emit(out, (logits,), lambda g: (K.masked_softmax_bwd(g, od),))

    # -- fused kernels (each is a primitive with its own backward) ----------

    def linear(self, w: Tensor, x: Tensor, b: Tensor) -> Tensor:
        if w.data.ndim != 2 or x.data.ndim != 1 or b.data.ndim != 1:
            raise ShapeError("linear expects w 2-D, x 1-D, b 1-D")
        if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
            raise ShapeError(f"linear shapes differ: {w.shape}, {x.shape}, {b.shape}")
        out = Tensor(K.linear(w.data, x.data, b.data))

        def bwd(g):
            gw, gx = K.linear_bwd(g, w.data, x.data)
            return gw, gx, g

        return self._emit(out, (w, x, b), bwd)

    def gated_unit(self, inp: Tensor, w1: Tensor, b1: Tensor,
                   w2: Tensor, b2: Tensor) -> Tensor:
        """sigmoid(w1 inp + b1) * tanh(w2 inp + b2)."""
        out_d, gate, act = K.gated_unit(inp.data, w1.data, b1.data, w2.data, b2.data)
        out = Tensor(out_d)

        def bwd(g):
            ginp, gw1, gb1, gw2, gb2 = K.gated_unit_bwd(
                g, inp.data, w1.data, w2.data, gate, act)
            return ginp, gw1, gb1, gw2, gb2

        return self._emit(out, (inp, w1, b1, w2, b2), bwd)

    def gru_cell(self, x: Tensor, h: Tensor, wz: Tensor, uz: Tensor, bz: Tensor,
                 wr: Tensor, ur: Tensor, br: Tensor,
                 wn: Tensor, un: Tensor, bn: Tensor) -> Tensor:
        """One update/reset-gate GRU step; returns the new hidden state."""
        h_new, z, r, c, rh = K.gru_cell(
            x.data, h.data, wz.data, uz.data, bz.data,
            wr.data, ur.data, br.data, wn.data, un.data, bn.data)
        out = Tensor(h_new)

        def bwd(g):
            return K.gru_cell_bwd(g, x.data, h.data, wz.data, uz.data,
                                  wr.data, ur.data, wn.data, un.data, z, r, c, rh)

        return self._emit(out, (x, h, wz, uz, bz, wr, ur, br, wn, un, bn), bwd)

    # -- generic dispatch ----------------------------------------------------

    OP_KINDS = {
        "matrix-product": "matmul",
        "add": "add",
        "concatenate": "concat",
        "elementwise-multiply": "mul",
        "sigmoid": "sigmoid",
        "tanh": "tanh",
        "masked-softmax": "masked_softmax",
        "embedding-lookup": "embedding",
        "dropout-mask": "dropout",
    }

    def apply(self, kind: str, *inputs):
        """Run a primitive by its op-kind name."""
        try:
            method = self.OP_KINDS[kind]
        except KeyError:
            raise ShapeError(f"unknown op-kind {kind!r}") from None
        return getattr(self, method)(*inputs)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Tensor, params=()) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf reachable from `loss`.

        Returns a map keyed by the given parameter tensors; parameters the
        loss does not depend on get zero gradients of matching shape.
        """
        if not self.record:
            raise ShapeError("backward on a non-recording tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ShapeError("loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, bwd in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gt in zip(inputs, bwd(g)):
                if gt is None:
                    continue
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = np.array(gt, dtype=np.float64, copy=True)
                else:
                    np.add(acc, gt, out=acc)

        result = {}
        for p in params:
            g = grads.get(id(p))
            result[p] = np.zeros_like(p.data) if g is None else g
        return result
