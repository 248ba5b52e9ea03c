"""Token embedding and the two-layer bidirectional LSTM encoder.

Each token position ends up with a width 2*d_hid state: the concatenation of
the layer-2 forward and backward hidden states at that position.  Padded
positions never update the recurrent state and their outputs are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    d_emb: int = 64
    d_hid: int = 128
    n_layers: int = 2

    def __post_init__(self):
        if self.d_emb < 1 or self.d_hid < 1:
            raise ValueError("encoder widths must be >= 1")
        if self.n_layers != 2:
            raise ValueError("encoder is fixed at 2 layers")

    @property
    def d_enc(self) -> int:
        return 2 * self.d_hid


@dataclass
class LstmWeights:
    """One direction of one layer. Gate order in the 4H axis: i, f, g, o."""

    wx: Tensor  # (d_in, 4H)
    wh: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def d_hid(self) -> int:
        return self.wh.shape[0]


@dataclass
class EncoderStates:
    """Per-position states plus per-layer final (h, c) for both directions."""

    outputs: Tensor  # (B, S, 2*d_hid); zero at padded positions
    final_fwd: list[tuple[Tensor, Tensor]]  # per layer (h, c), each (B, d_hid)
    final_bwd: list[tuple[Tensor, Tensor]]
    lengths: np.ndarray  # (B,)


def embed(input_ids: np.ndarray, matrix: Tensor) -> Tensor:
    """Row lookup: out[..., :] = matrix[input_ids[...], :]."""
    ids = np.asarray(input_ids)
    vocab_size = matrix.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range for embedding matrix of size {vocab_size}")
    return ad.rows(matrix, ids)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: LstmWeights) -> tuple[Tensor, Tensor]:
    """Standard LSTM step: gates i/f/o sigmoid, candidate tanh, no peepholes."""
    hid = w.d_hid
    if x.shape[-1] != w.wx.shape[0]:
        raise ValueError(f"lstm input width {x.shape[-1]} != weight width {w.wx.shape[0]}")
    if h_prev.shape[-1] != hid or c_prev.shape[-1] != hid:
        raise ValueError("lstm state width mismatch")
    gates = x @ w.wx + h_prev @ w.wh + w.b
    i = ad.sigmoid(gates[:, 0 * hid : 1 * hid])
    f = ad.sigmoid(gates[:, 1 * hid : 2 * hid])
    g = ad.tanh(gates[:, 2 * hid : 3 * hid])
    o = ad.sigmoid(gates[:, 3 * hid : 4 * hid])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def _run_direction(
    steps: list[Tensor],
    lengths: np.ndarray,
    w: LstmWeights,
    reverse: bool,
    dtype,
) -> tuple[list[Tensor], Tensor, Tensor]:
    """Run one direction over per-position inputs; returns per-position outputs
    (zeroed at padding) and the final carried (h, c)."""
    bsz = steps[0].shape[0]
    hid = w.d_hid
    h = Tensor(np.zeros((bsz, hid), dtype=dtype))
    c = Tensor(np.zeros((bsz, hid), dtype=dtype))
    outs: list[Tensor | None] = [None] * len(steps)
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    for t in order:
        mask = (t < lengths).astype(dtype)[:, None]
        h_new, c_new = lstm_cell(steps[t], h, c, w)
        # positions beyond the true length neither update state nor emit output
        h = h_new * mask + h * (1.0 - mask)
        c = c_new * mask + c * (1.0 - mask)
        outs[t] = h_new * mask
    return outs, h, c


def bilstm_encode(
    embeddings: Tensor,
    lengths: np.ndarray,
    weights: list[tuple[LstmWeights, LstmWeights]],
) -> EncoderStates:
    """Two stacked Bi-LSTM layers over (B, S, d_emb) embeddings.

    Layer 2 consumes the per-position concatenation of layer-1 directions;
    the output at position i is [forward_h_i, backward_h_i] of layer 2.
    """
    lengths = np.asarray(lengths)
    bsz, seq_len = embeddings.shape[0], embeddings.shape[1]
    if seq_len == 0 or (lengths < 1).any():
        raise ValueError("cannot encode zero-length sequences")
    dtype = embeddings.dtype
    steps = [embeddings[:, t, :] for t in range(seq_len)]
    final_fwd, final_bwd = [], []
    for layer_w in weights:
        w_f, w_b = layer_w
        f_outs, f_h, f_c = _run_direction(steps, lengths, w_f, reverse=False, dtype=dtype)
        b_outs, b_h, b_c = _run_direction(steps, lengths, w_b, reverse=True, dtype=dtype)
        final_fwd.append((f_h, f_c))
        final_bwd.append((b_h, b_c))
        steps = [ad.concat([f_outs[t], b_outs[t]], axis=1) for t in range(seq_len)]
    outputs = ad.stack(steps, axis=1)
    return EncoderStates(outputs=outputs, final_fwd=final_fwd, final_bwd=final_bwd, lengths=lengths)


def load_pretrained_embeddings(path, vocab, matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Overwrite rows of an initialized embedding matrix from a text vector file.

    Format: optional "count dim" header, then one token and d_emb reals per
    line.  Tokens absent from the file keep their initialization.  Returns the
    new matrix and the covered fraction of non-reserved vocab tokens.
    """
    d_emb = matrix.shape[1]
    out = matrix.copy()
    covered = set()
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    start = 0
    if lines:
        head = lines[0].split()
        if len(head) == 2:
            try:
                _count, dim = int(head[0]), int(head[1])
            except ValueError:
                pass
            else:
                if dim != d_emb:
                    raise ValueError(f"embedding file dimension {dim} != configured {d_emb}")
                start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split()
        token, values = parts[0], parts[1:]
        if len(values) != d_emb:
            raise ValueError(
                f"{path}: line {lineno}: expected {d_emb} values, got {len(values)}"
            )
        if token in vocab:
            idx = vocab.id_of(token)
            if idx >= 5:  # reserved rows are never overwritten
                out[idx] = np.asarray([float(v) for v in values], dtype=matrix.dtype)
                covered.add(idx)
    denom = max(1, len(vocab) - 5)
    return out, len(covered) / denom
