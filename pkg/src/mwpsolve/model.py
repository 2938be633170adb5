"""The equation-generating policy network.

Encoder: word embeddings with a binary is-number flag appended, through a
2-layer bidirectional GRU; the two directions of the final layer are summed
per token, and their last hidden states are summed into the state that seeds
the decoder.

Decoder: three gated fully-connected heads run in sequence each step. The
operator head conditions on (previous operator embedding, decoder state); the
left-operand head on (current operator embedding, operator hidden); the right
head additionally sees the left hidden. Operand heads project onto a fixed
slot grid of `capacity` logits, masked down to the live dictionary size, so
an intermediate value created at step t is addressable from step t+1 on. The
right head's hidden becomes the next decoder state.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from .autodiff import DegenerateDistributionError, Parameter, ShapeError, Tape, Tensor
from .backend.numpy_kernels import sigmoid as _np_sigmoid

START_OP = -1  # sentinel: decode step 1 uses the dedicated start row of op_emb


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 128
    hidden_dim: int = 512
    n_ops: int = 4
    capacity: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass
class GRUDirectionParams:
    wz: Parameter
    uz: Parameter
    bz: Parameter
    wr: Parameter
    ur: Parameter
    br: Parameter
    wn: Parameter
    un: Parameter
    bn: Parameter

    def as_args(self):
        return (self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wn, self.un, self.bn)


@dataclass
class EncoderParams:
    word_emb: Parameter                                  # (vocab, emb)
    layers: list[tuple[GRUDirectionParams, GRUDirectionParams]]  # (fwd, bwd) x 2


@dataclass
class HeadParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    w3: Parameter
    b3: Parameter


@dataclass
class DecoderParams:
    op_emb: Parameter        # (n_ops + 1, emb); last row is the start token
    op_head: HeadParams      # projects to n_ops
    left_head: HeadParams    # projects to capacity slots
    right_head: HeadParams   # projects to capacity slots


class PolicyParams:
    """All learnable arrays, addressable by dotted name for the optimizer
    and checkpointing."""

    def __init__(self, config: ModelConfig, encoder: EncoderParams,
                 decoder: DecoderParams):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "PolicyParams":
        """Glorot-uniform weight matrices, uniform(+-0.1) embeddings, zero
        biases; draw order is fixed by parameter name so runs reproduce."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A7A]))

        def glorot(name, m, n):
            limit = np.sqrt(6.0 / (m + n))
            return Parameter(name, rng.uniform(-limit, limit, size=(m, n)))

        def zeros(name, n):
            return Parameter(name, np.zeros(n))

        def gru(prefix, in_dim, hid):
            kw = {}
            for gate in ("z", "r", "n"):
                kw[f"w{gate}"] = glorot(f"{prefix}.w{gate}", hid, in_dim)
                kw[f"u{gate}"] = glorot(f"{prefix}.u{gate}", hid, hid)
                kw[f"b{gate}"] = zeros(f"{prefix}.b{gate}", hid)
            return GRUDirectionParams(**kw)

        def head(prefix, in_dim, hid, out_dim):
            return HeadParams(
                w1=glorot(f"{prefix}.w1", hid, in_dim), b1=zeros(f"{prefix}.b1", hid),
                w2=glorot(f"{prefix}.w2", hid, in_dim), b2=zeros(f"{prefix}.b2", hid),
                w3=glorot(f"{prefix}.w3", out_dim, hid), b3=zeros(f"{prefix}.b3", out_dim),
            )

        e, h = config.emb_dim, config.hidden_dim
        word_emb = Parameter("encoder.word_emb",
                             rng.uniform(-0.1, 0.1, size=(config.vocab_size, e)))
        layers = []
        for layer, in_dim in enumerate((e + 1, 2 * h)):
            layers.append((gru(f"encoder.l{layer}.fwd", in_dim, h),
                           gru(f"encoder.l{layer}.bwd", in_dim, h)))
        op_emb = Parameter("decoder.op_emb",
                           rng.uniform(-0.1, 0.1, size=(config.n_ops + 1, e)))
        decoder = DecoderParams(
            op_emb=op_emb,
            op_head=head("decoder.op", e + h, h, config.n_ops),
            left_head=head("decoder.left", e + h, h, config.capacity),
            right_head=head("decoder.right", e + 2 * h, h, config.capacity),
        )
        return cls(config, EncoderParams(word_emb, layers), decoder)

    def parameters(self) -> dict[str, Parameter]:
        out = {"encoder.word_emb": self.encoder.word_emb,
               "decoder.op_emb": self.decoder.op_emb}
        for fwd, bwd in self.encoder.layers:
            for direction in (fwd, bwd):
                for p in direction.as_args():
                    out[p.name] = p
        for head in (self.decoder.op_head, self.decoder.left_head,
                     self.decoder.right_head):
            for f in fields(head):
                p = getattr(head, f.name)
                out[p.name] = p
        return out

    @property
    def start_op(self) -> int:
        return self.config.n_ops


# -- encoder ------------------------------------------------------------------

_FLAG = {0: Tensor([0.0]), 1: Tensor([1.0])}  # shared immutable leaves


def encode(tape: Tape, params: PolicyParams, token_ids, flags,
           emb_masks: np.ndarray | None = None) -> tuple[list[Tensor], Tensor]:
    """Per-token summed bidirectional states and the decoder seed state.

    emb_masks, when given, is a (seq_len, emb_dim) inverted-dropout mask
    applied to the word embeddings.
    """
    if len(token_ids) == 0:
        raise ShapeError("cannot encode an empty token sequence")
    if len(token_ids) != len(flags):
        raise ShapeError("flags must align with tokens")
    enc = params.encoder
    hidden = params.config.hidden_dim

    xs = []
    for i, (tid, flag) in enumerate(zip(token_ids, flags)):
        e = tape.embedding(enc.word_emb, int(tid))
        if emb_masks is not None:
            e = tape.dropout(e, emb_masks[i])
        xs.append(tape.concat(e, _FLAG[int(bool(flag))]))

    def run(direction: GRUDirectionParams, seq, reverse: bool):
        order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
        h = Tensor(np.zeros(hidden))
        out: list[Tensor] = [None] * len(seq)
        for i in order:
            h = tape.gru_cell(seq[i], h, *direction.as_args())
            out[i] = h
        return out, h

    seq = xs
    for layer, (fwd, bwd) in enumerate(enc.layers):
        f_states, f_last = run(fwd, seq, reverse=False)
        b_states, b_last = run(bwd, seq, reverse=True)
        if layer + 1 < len(enc.layers):
            seq = [tape.concat(f, b) for f, b in zip(f_states, b_states)]
    states = [tape.add(f, b) for f, b in zip(f_states, b_states)]
    final = tape.add(f_last, b_last)
    return states, final


# -- decoder heads -------------------------------------------------------------

@lru_cache(maxsize=None)
def _slot_mask(capacity: int, dict_size: int) -> np.ndarray:
    mask = np.zeros(capacity, dtype=np.uint8)
    mask[:dict_size] = 1
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=None)
def _full_mask(n: int) -> np.ndarray:
    mask = np.ones(n, dtype=np.uint8)
    mask.setflags(write=False)
    return mask


def _op_row(params: PolicyParams, op_id: int) -> int:
    return params.start_op if op_id == START_OP else int(op_id)


def _gated(tape, head: HeadParams, inp: Tensor) -> Tensor:
    return tape.gated_unit(inp, head.w1, head.b1, head.w2, head.b2)


def operator_head(tape: Tape, params: PolicyParams, prev_op: int,
                  h_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Distribution over operators plus the operator hidden state."""
    dec = params.decoder
    em = tape.embedding(dec.op_emb, _op_row(params, prev_op))
    h_op = _gated(tape, dec.op_head, tape.concat(em, h_prev))
    logits = tape.linear(dec.op_head.w3, h_op, dec.op_head.b3)
    return tape.masked_softmax(logits, _full_mask(params.config.n_ops)), h_op


def left_head(tape: Tape, params: PolicyParams, op_id: int, h_op: Tensor,
              dict_size: int) -> tuple[Tensor, Tensor]:
    """Distribution over left-operand slots plus the left hidden state."""
    dec = params.decoder
    em = tape.embedding(dec.op_emb, _op_row(params, op_id))
    h_ol = _gated(tape, dec.left_head, tape.concat(em, h_op))
    logits = tape.linear(dec.left_head.w3, h_ol, dec.left_head.b3)
    mask = _slot_mask(params.config.capacity, dict_size)
    return tape.masked_softmax(logits, mask), h_ol


def right_head(tape: Tape, params: PolicyParams, op_id: int, h_op: Tensor,
               h_ol: Tensor, dict_size: int) -> tuple[Tensor, Tensor]:
    """Distribution over right-operand slots plus the next decoder state."""
    dec = params.decoder
    em = tape.embedding(dec.op_emb, _op_row(params, op_id))
    h_or = _gated(tape, dec.right_head, tape.concat(em, h_op, h_ol))
    logits = tape.linear(dec.right_head.w3, h_or, dec.right_head.b3)
    mask = _slot_mask(params.config.capacity, dict_size)
    return tape.masked_softmax(logits, mask), h_or


@dataclass
class StepDistributions:
    """All three distributions for one decode step.

    The operand heads consume the chosen operator's embedding, so left/right
    probabilities are stored per candidate operator (row = operator id); the
    exact triplet joint is op_probs[o] * left_probs[o, l] * right_probs[o, r].
    Slot columns at or beyond dict_size are exactly zero.
    """

    op_probs: np.ndarray      # (n_ops,)
    left_probs: np.ndarray    # (n_ops, capacity)
    right_probs: np.ndarray   # (n_ops, capacity)
    h_op: np.ndarray          # (hidden,)
    h_ol: np.ndarray          # (n_ops, hidden)
    h_or: np.ndarray          # (n_ops, hidden) -- next decoder state per op
    dict_size: int

    def joint(self) -> np.ndarray:
        """(n_ops, dict_size, dict_size) exact triplet probabilities."""
        d = self.dict_size
        weighted_left = self.left_probs[:, :d] * self.op_probs[:, None]
        return weighted_left[:, :, None] * self.right_probs[:, None, :d]


def _batched_gated(inp: np.ndarray, head: HeadParams) -> np.ndarray:
    """Row-batched gated unit: same math as the tape kernel, dgemm-backed."""
    gate = _np_sigmoid(inp @ head.w1.data.T + head.b1.data)
    act = np.tanh(inp @ head.w2.data.T + head.b2.data)
    return gate * act


def _row_masked_softmax(logits: np.ndarray, capacity: int, dict_size: int) -> np.ndarray:
    live = logits[:, :dict_size]
    e = np.exp(live - live.max(axis=1, keepdims=True))
    probs = np.zeros((logits.shape[0], capacity))
    probs[:, :dict_size] = e / e.sum(axis=1, keepdims=True)
    return probs


def decode_step(params: PolicyParams, h_prev: np.ndarray, prev_op: int,
                dict_size: int) -> StepDistributions:
    """Pure decode step: the operator head once, then the operand heads for
    every candidate operator, batched as matrix products. No tape; agrees
    with the head sub-calls to floating-point noise (same formulas, gemm
    accumulation instead of gemv)."""
    if dict_size < 1:
        raise DegenerateDistributionError("operand dictionary is empty")
    cfg = params.config
    if dict_size > cfg.capacity:
        raise ShapeError(f"dict_size {dict_size} exceeds capacity")
    dec = params.decoder
    n_ops, emb, hid = cfg.n_ops, dec.op_emb.data.shape[1], cfg.hidden_dim

    tape = Tape(record=False)
    op_probs, h_op_t = operator_head(tape, params, prev_op, Tensor(h_prev))
    h_op = h_op_t.data

    ops_emb = dec.op_emb.data[:n_ops]
    left_inp = np.empty((n_ops, emb + hid))
    left_inp[:, :emb] = ops_emb
    left_inp[:, emb:] = h_op
    h_ol = _batched_gated(left_inp, dec.left_head)
    left = _row_masked_softmax(h_ol @ dec.left_head.w3.data.T + dec.left_head.b3.data,
                               cfg.capacity, dict_size)

    right_inp = np.empty((n_ops, emb + 2 * hid))
    right_inp[:, :emb] = ops_emb
    right_inp[:, emb:emb + hid] = h_op
    right_inp[:, emb + hid:] = h_ol
    h_or = _batched_gated(right_inp, dec.right_head)
    right = _row_masked_softmax(h_or @ dec.right_head.w3.data.T + dec.right_head.b3.data,
                                cfg.capacity, dict_size)
    return StepDistributions(op_probs.data, left, right, h_op, h_ol, h_or,
                             dict_size)


# -- triplet sampling -----------------------------------------------------------

def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Categorical draw; zero-probability entries are never selected."""
    c = np.cumsum(probs)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def sample_triplet(dists: StepDistributions, rng: np.random.Generator):
    """Sample (op, left, right) from the step's chained distributions;
    returns the indices and the joint log-probability."""
    op = _draw(rng, dists.op_probs)
    d = dists.dict_size
    left = _draw(rng, dists.left_probs[op, :d])
    right = _draw(rng, dists.right_probs[op, :d])
    logp = (np.log(dists.op_probs[op]) + np.log(dists.left_probs[op, left])
            + np.log(dists.right_probs[op, right]))
    return op, left, right, float(logp)


def _unflatten(index: int, d: int) -> tuple[int, int, int]:
    op, rest = divmod(index, d * d)
    left, right = divmod(rest, d)
    return op, left, right


def sample_k_without_replacement(dists: StepDistributions, w: int,
                                 rng: np.random.Generator):
    """Up to w distinct triplets drawn sequentially from the joint with
    renormalization; each keeps its original joint probability for scoring.
    If the support is smaller than w the entire support is returned."""
    d = dists.dict_size
    flat = dists.joint().ravel()
    remaining = flat.copy()
    out = []
    for _ in range(w):
        c = np.cumsum(remaining)
        total = c[-1]
        if total <= 0.0:
            break
        idx = int(np.searchsorted(c, rng.random() * total, side="right"))
        op, left, right = _unflatten(idx, d)
        out.append((op, left, right, float(flat[idx])))
        remaining[idx] = 0.0
    return out


def top_k_triplets(dists: StepDistributions, w: int):
    """The w highest-probability triplets, deterministic (ties by index)."""
    d = dists.dict_size
    flat = dists.joint().ravel()
    order = np.argsort(-flat, kind="stable")[:w]
    return [(*_unflatten(int(i), d), float(flat[i])) for i in order if flat[i] > 0.0]


def argmax_triplet(dists: StepDistributions):
    return top_k_triplets(dists, 1)[0]
