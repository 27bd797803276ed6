"""Layer primitives used by the four model heads.

Everything here is a pure function from (inputs, parameter tensors) to an
output tensor; dropout is the only stochastic piece and is a no-op outside
training mode.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, logsumexp

__all__ = [
    "ConfigurationError",
    "affine",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "dropout",
    "mhsa_block",
    "lstm_cell_step",
    "lstm_sequence",
    "bilstm_sequence",
    "attention_pool",
    "embedding",
    "multiscale_conv_encode",
]

MASK_OFFSET = -1e30  # exp(MASK_OFFSET - max) underflows to exactly 0.0


class ConfigurationError(ValueError):
    """Mismatched shapes, names or hyperparameters."""


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise x @ w + b."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
        raise ConfigurationError(
            f"affine shapes do not conform: x{x.shape} w{w.shape} b{b.shape}"
        )
    return x @ w + b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(z, axis=axis).exp()


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    """z - logsumexp(z), stable via max subtraction."""
    return z - logsumexp(z, axis=axis, keepdims=True)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    return x * ((x * (1.0 / np.sqrt(2.0))).erf() + 1.0) * 0.5


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity otherwise."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs an RNG")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * Tensor(keep)


def mhsa_block(
    x: Tensor,
    p: dict[str, Tensor],
    n_heads: int,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm transformer encoder block over [B, L, d] (or [L, d]).

    Multi-head self-attention plus residual, then a GELU feed-forward plus
    residual. No positional encoding, so the block is permutation
    equivariant over L. Parameter keys: ln1/ln2 (gamma, beta), wq..wo with
    biases, ff w1/b1/w2/b2.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, L, d = x.shape
    if d % n_heads != 0:
        raise ConfigurationError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    h = layer_norm(x, p["ln1.gamma"], p["ln1.beta"])
    q = affine(h, p["attn.wq"], p["attn.bq"])
    # no key bias: it shifts each query's scores uniformly, which the row
    # softmax cancels, leaving a parameter with exactly zero gradient
    k = h @ p["attn.wk"]
    v = affine(h, p["attn.wv"], p["attn.bv"])

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)  # [B, H, L, dh]

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    ctx = affine(ctx, p["attn.wo"], p["attn.bo"])
    x = x + dropout(ctx, dropout_p, rng, train)

    h = layer_norm(x, p["ln2.gamma"], p["ln2.beta"])
    h = gelu(affine(h, p["ff.w1"], p["ff.b1"]))
    h = affine(h, p["ff.w2"], p["ff.b2"])
    x = x + dropout(h, dropout_p, rng, train)
    return x.reshape(L, d) if squeeze else x


def lstm_cell_step(
    x: Tensor, h_prev: Tensor, c_prev: Tensor, wx: Tensor, wh: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate order in the 4h axis is i, f, g, o."""
    hidden = wh.shape[0]
    z = x @ wx + h_prev @ wh + b
    i = z[..., 0 * hidden : 1 * hidden].sigmoid()
    f = z[..., 1 * hidden : 2 * hidden].sigmoid()
    g = z[..., 2 * hidden : 3 * hidden].tanh()
    o = z[..., 3 * hidden : 4 * hidden].sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def lstm_sequence(xs: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run the cell over [B, T, d_in]; returns states [B, T, h].

    Initial h and c are zero vectors. ``reverse`` scans right to left and
    returns states aligned with the input positions.
    """
    B, T, _ = xs.shape
    hidden = wh.shape[0]
    h = Tensor(np.zeros((B, hidden)))
    c = Tensor(np.zeros((B, hidden)))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    states: list[Tensor | None] = [None] * T
    for t in steps:
        h, c = lstm_cell_step(xs[:, t, :], h, c, wx, wh, b)
        states[t] = h.reshape(B, 1, hidden)
    return concat(states, axis=1)


def bilstm_sequence(xs: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Single-layer bidirectional LSTM; concatenates both directions per step."""
    fwd = lstm_sequence(xs, p["fwd.wx"], p["fwd.wh"], p["fwd.b"])
    bwd = lstm_sequence(xs, p["bwd.wx"], p["bwd.wh"], p["bwd.b"], reverse=True)
    return concat([fwd, bwd], axis=2)


def attention_pool(
    states: Tensor, score_vec: Tensor, valid_mask: np.ndarray | None = None
) -> tuple[Tensor, np.ndarray]:
    """Softmax-weighted sum of [B, L, d] states along L.

    ``valid_mask`` [B, L] drops padded positions from the softmax; a row
    with no valid position pools to the zero vector and is flagged in the
    returned boolean array.
    """
    squeeze = states.ndim == 2
    if squeeze:
        states = states.reshape(1, *states.shape)
    B, L, d = states.shape
    if valid_mask is None:
        valid_mask = np.ones((B, L), dtype=bool)
    all_masked = ~valid_mask.any(axis=1)

    scores = (states @ score_vec.reshape(d, 1)).reshape(B, L)
    offset = np.where(valid_mask, 0.0, MASK_OFFSET)
    weights = softmax(scores + Tensor(offset), axis=-1)
    if all_masked.any():
        # fully padded rows: zero output, no gradient into their states
        weights = weights * Tensor(valid_mask.astype(np.float64))
    pooled = (weights.reshape(B, 1, L) @ states).reshape(B, d)
    if squeeze:
        return pooled.reshape(d), all_masked
    return pooled, all_masked


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ConfigurationError(
            f"ids out of range for embedding table with {table.shape[0]} rows"
        )
    return table[ids]


def multiscale_conv_encode(
    ids: np.ndarray,
    embed_table: Tensor,
    conv_w: dict[int, Tensor],
    conv_b: dict[int, Tensor],
    pad_id: int,
) -> Tensor:
    """Embed ids, run one 1-D conv per kernel size, ReLU, global max-pool.

    ``conv_w[k]`` has shape [k, embed_dim, filters]; outputs of all sizes
    are concatenated to [B, n_sizes * filters]. Sequences shorter than the
    largest kernel are padded with ``pad_id`` first.
    """
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    max_k = max(conv_w)
    if ids.shape[1] < max_k:
        pad = np.full((ids.shape[0], max_k - ids.shape[1]), pad_id, dtype=ids.dtype)
        ids = np.concatenate([ids, pad], axis=1)
    emb = embedding(embed_table, ids)  # [B, L, e]
    L = ids.shape[1]
    feats = []
    for k in sorted(conv_w):
        w, b = conv_w[k], conv_b[k]
        out_len = L - k + 1
        y = emb[:, 0:out_len, :] @ w[0]
        for j in range(1, k):
            y = y + emb[:, j : j + out_len, :] @ w[j]
        y = (y + b).relu()
        feats.append(y.max(axis=1))  # [B, filters]
    out = concat(feats, axis=1)
    return out.reshape(out.shape[1]) if squeeze else out
