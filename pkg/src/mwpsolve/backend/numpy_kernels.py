"""Pure-numpy implementations of the hot numeric kernels.

Reference backend: every function here has a signature-identical twin in the
compiled `_ckernels` extension. All arrays are C-contiguous float64; masks are
uint8 with 1 = allowed. Forward kernels return the extra intermediates their
backward twin needs, so callers never recompute activations.
"""

import numpy as np

NAME = "numpy"


def sigmoid(x):
    """Numerically stable logistic function (same branch rule as the C twin):
    exp is only ever taken of a non-positive argument."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def matmul(a, b):
    """a @ b for a 2-D `a` and 1-D or 2-D `b`."""
    return a @ b


def matmul_bwd(g, a, b):
    """Gradients of a @ b. Handles the matrix-vector and matrix-matrix cases."""
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def linear(w, x, b):
    """w @ x + b for w (m, n), x (n,), b (m,)."""
    return w @ x + b


def linear_bwd(g, w, x):
    """Gradients (gw, gx) of w @ x + b; the bias gradient is g itself."""
    return np.outer(g, x), w.T @ g


def gated_unit(inp, w1, b1, w2, b2):
    """sigmoid(w1 inp + b1) * tanh(w2 inp + b2); returns (out, gate, act)."""
    gate = sigmoid(w1 @ inp + b1)
    act = np.tanh(w2 @ inp + b2)
    return gate * act, gate, act


def gated_unit_bwd(g, inp, w1, w2, gate, act):
    """Gradients (ginp, gw1, gb1, gw2, gb2) of the gated unit."""
    g1 = (g * act) * gate * (1.0 - gate)
    g2 = (g * gate) * (1.0 - act * act)
    ginp = w1.T @ g1 + w2.T @ g2
    return ginp, np.outer(g1, inp), g1, np.outer(g2, inp), g2


def gru_cell(x, h, wz, uz, bz, wr, ur, br, wn, un, bn):
    """One GRU step (update/reset-gate form).

    z = sigmoid(wz x + uz h + bz)
    r = sigmoid(wr x + ur h + br)
    c = tanh(wn x + un (r*h) + bn)
    h' = z*h + (1-z)*c

    Returns (h_new, z, r, c, rh) where rh = r*h is saved for backward.
    """
    z = sigmoid(wz @ x + uz @ h + bz)
    r = sigmoid(wr @ x + ur @ h + br)
    rh = r * h
    c = np.tanh(wn @ x + un @ rh + bn)
    h_new = z * h + (1.0 - z) * c
    return h_new, z, r, c, rh


def gru_cell_bwd(g, x, h, wz, uz, wr, ur, wn, un, z, r, c, rh):
    """Gradients of one GRU step w.r.t. x, h and the nine weight arrays."""
    gz = g * (h - c)
    gc_pre = (g * (1.0 - z)) * (1.0 - c * c)
    gh = g * z

    gwn = np.outer(gc_pre, x)
    gun = np.outer(gc_pre, rh)
    gx = wn.T @ gc_pre
    grh = un.T @ gc_pre
    gr = grh * h
    gh = gh + grh * r

    gz_pre = gz * z * (1.0 - z)
    gr_pre = gr * r * (1.0 - r)
    gwz = np.outer(gz_pre, x)
    guz = np.outer(gz_pre, h)
    gwr = np.outer(gr_pre, x)
    gur = np.outer(gr_pre, h)
    gx = gx + wz.T @ gz_pre + wr.T @ gr_pre
    gh = gh + uz.T @ gz_pre + ur.T @ gr_pre
    return gx, gh, gwz, guz, gz_pre, gwr, gur, gr_pre, gwn, gun, gc_pre


def masked_softmax(logits, mask):
    """Softmax over entries with mask != 0; masked entries are exactly 0.

    Caller guarantees at least one allowed entry.
    """
    allowed = mask != 0
    m = np.max(logits[allowed])
    e = np.where(allowed, np.exp(np.where(allowed, logits, m) - m), 0.0)
    return e / e.sum()


def masked_softmax_bwd(g, probs):
    """Softmax Jacobian-vector product; masked entries get exactly 0."""
    return probs * (g - float(np.dot(g, probs)))
