"""Linear-chain CRF over the three token categories.

Scores live in a per-position lattice: entry [c_prev, c] is the log-potential
of moving from label c_prev to label c at that position, with a dedicated
start row used only at position 1.  The partition function is computed by the
forward algorithm in log space; decoding is exact Viterbi with a fixed
tie-break (prefer K over E over N).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EMITTABLE_LABELS, CategoryLabel

N_LABELS = 3
N_ROWS = 4  # start row + one per emittable label
START_ROW = 0


def transition_row(label: CategoryLabel | int) -> int:
    """Lattice row index for a previous label; rows are [START, K, E, N]."""
    if label == CategoryLabel.START:
        return START_ROW
    return int(label) + 1


def labels_to_array(labels: Sequence[CategoryLabel]) -> np.ndarray:
    arr = np.asarray([int(l) for l in labels], dtype=np.int64)
    if arr.size and (arr < 0).any() or (arr > 2).any():
        raise ValueError("label sequence must contain only K/E/N")
    return arr


def score_lattice(h: Tensor, trans_w: Tensor, trans_b: Tensor) -> Tensor:
    """Per-position transition scores: out[b, i, r, c] = w[r, c] . h[b, i] + b[r, c].

    `h` is (B, m, d_enc); `trans_w` is (4, 3, d_enc); `trans_b` is (4, 3).
    The start row is populated at every position but only read at i = 1.
    """
    if h.ndim != 3:
        raise ValueError("score_lattice expects batched states (B, m, d_enc)")
    d_enc = h.shape[2]
    if trans_w.shape != (N_ROWS, N_LABELS, d_enc):
        raise ValueError(
            f"transition weights shape {trans_w.shape} incompatible with states of width {d_enc}"
        )
    bsz, m = h.shape[0], h.shape[1]
    flat = ad.reshape(h, (bsz * m, d_enc))
    w_flat = ad.transpose(ad.reshape(trans_w, (N_ROWS * N_LABELS, d_enc)), (1, 0))
    scores = ad.reshape(flat @ w_flat, (bsz, m, N_ROWS, N_LABELS))
    return scores + trans_b


def _check_lattice(lattice: np.ndarray) -> np.ndarray:
    lattice = np.asarray(lattice, dtype=np.float64)
    if lattice.ndim != 3 or lattice.shape[1:] != (N_ROWS, N_LABELS):
        raise ValueError(f"lattice must have shape (m, {N_ROWS}, {N_LABELS})")
    if lattice.shape[0] < 1:
        raise ValueError("lattice must cover at least one position")
    return lattice


def log_partition_batch(lattice: Tensor, lengths: np.ndarray) -> Tensor:
    """log of the summed exp path scores, per sample, via the forward recursion."""
    bsz, m = lattice.shape[0], lattice.shape[1]
    dtype = lattice.dtype
    alpha = lattice[:, 0, START_ROW, :]  # (B, 3)
    for i in range(1, m):
        trans = lattice[:, i, 1:, :]  # (B, 3 prev, 3 cur); start row unread here
        scores = ad.reshape(alpha, (bsz, N_LABELS, 1)) + trans
        new = ad.logsumexp(scores, axis=1)
        mask = (i < lengths).astype(dtype)[:, None]
        alpha = new * mask + alpha * (1.0 - mask)
    return ad.logsumexp(alpha, axis=1)


def _alphas_betas(lattice: Tensor, lengths: np.ndarray):
    """All forward/backward log messages (used only for marginal fusion)."""
    bsz, m = lattice.shape[0], lattice.shape[1]
    dtype = lattice.dtype
    alphas = [lattice[:, 0, START_ROW, :]]
    for i in range(1, m):
        trans = lattice[:, i, 1:, :]
        scores = ad.reshape(alphas[-1], (bsz, N_LABELS, 1)) + trans
        new = ad.logsumexp(scores, axis=1)
        mask = (i < lengths).astype(dtype)[:, None]
        alphas.append(new * mask + alphas[-1] * (1.0 - mask))
    betas: list[Tensor] = [None] * m  # type: ignore[list-item]
    betas[m - 1] = Tensor(np.zeros((bsz, N_LABELS), dtype=dtype))
    for i in range(m - 2, -1, -1):
        trans = lattice[:, i + 1, 1:, :]
        scores = trans + ad.reshape(betas[i + 1], (bsz, 1, N_LABELS))
        new = ad.logsumexp(scores, axis=2)
        mask = (i + 1 < lengths).astype(dtype)[:, None]
        betas[i] = new * mask + betas[i + 1] * (1.0 - mask)
    return alphas, betas


def marginals_batch(lattice: Tensor, lengths: np.ndarray) -> Tensor:
    """Posterior label probabilities per position, (B, m, 3), differentiable."""
    alphas, betas = _alphas_betas(lattice, lengths)
    log_z = log_partition_batch(lattice, lengths)
    bsz = lattice.shape[0]
    per_pos = [
        a + b - ad.reshape(log_z, (bsz, 1)) for a, b in zip(alphas, betas)
    ]
    return ad.exp(ad.stack(per_pos, axis=1))


def gold_path_score_batch(lattice: Tensor, labels: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Sum of transition scores along the gold label path, per sample."""
    labels = np.asarray(labels, dtype=np.int64)
    bsz, m = labels.shape
    prev_rows = np.empty((bsz, m), dtype=np.int64)
    prev_rows[:, 0] = START_ROW
    prev_rows[:, 1:] = labels[:, :-1] + 1
    picked = ad.gather_rc(lattice, prev_rows, labels)  # (B, m)
    mask = (np.arange(m)[None, :] < lengths[:, None]).astype(lattice.dtype)
    return ad.tsum(picked * mask, axis=1)


def log_likelihood_batch(lattice: Tensor, labels: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Gold path score minus log partition; always <= 0."""
    return gold_path_score_batch(lattice, labels, lengths) - log_partition_batch(
        lattice, lengths
    )


def viterbi_decode_batch(lattice: np.ndarray, lengths: np.ndarray) -> list[list[CategoryLabel]]:
    """Exact MAP label sequences; ties prefer the lower label index (K < E < N)."""
    lattice = np.asarray(lattice)
    bsz, m = lattice.shape[0], lattice.shape[1]
    delta = lattice[:, 0, START_ROW, :].astype(np.float64).copy()  # (B, 3)
    back = np.zeros((bsz, m, N_LABELS), dtype=np.int64)
    for i in range(1, m):
        scores = delta[:, :, None] + lattice[:, i, 1:, :]  # (B, prev, cur)
        back[:, i, :] = np.argmax(scores, axis=1)  # first max = lowest prev index
        new = np.max(scores, axis=1)
        active = (i < lengths)[:, None]
        delta = np.where(active, new, delta)
    out = []
    for b in range(bsz):
        length = int(lengths[b])
        path = np.empty(length, dtype=np.int64)
        path[-1] = int(np.argmax(delta[b]))
        for i in range(length - 1, 0, -1):
            path[i - 1] = back[b, i, path[i]]
        out.append([CategoryLabel(int(v)) for v in path])
    return out


# --- single-lattice conveniences (delegate to the batched code path) -----------


def log_partition(lattice: np.ndarray) -> float:
    """Forward-algorithm log partition for one (m, 4, 3) lattice."""
    lattice = _check_lattice(lattice)
    m = lattice.shape[0]
    with ad.no_grad():
        out = log_partition_batch(Tensor(lattice[None]), np.array([m]))
    return float(out.data[0])


def log_likelihood(lattice: np.ndarray, gold: Sequence[CategoryLabel]) -> float:
    """Log probability of a gold K/E/N sequence under one lattice."""
    lattice = _check_lattice(lattice)
    m = lattice.shape[0]
    if len(gold) != m:
        raise ValueError(f"gold length {len(gold)} != lattice length {m}")
    if any(l == CategoryLabel.START for l in gold):
        raise ValueError("gold sequence must not contain START")
    labels = labels_to_array(gold)[None, :]
    with ad.no_grad():
        out = log_likelihood_batch(Tensor(lattice[None]), labels, np.array([m]))
    return float(out.data[0])


def viterbi_decode(lattice: np.ndarray) -> list[CategoryLabel]:
    lattice = _check_lattice(lattice)
    m = lattice.shape[0]
    return viterbi_decode_batch(lattice[None], np.array([m]))[0]


def fuse_category(h: Tensor, labels: np.ndarray, label_vecs: Tensor) -> Tensor:
    """Add each position's category vector to its encoder state: out = h + vec[label].

    `labels` holds K/E/N indices shaped like h's leading dims; `label_vecs`
    is (3, d_enc).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != h.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} != state positions {h.shape[:-1]}")
    if label_vecs.shape != (N_LABELS, h.shape[-1]):
        raise ValueError("category vectors must be (3, d_enc) matching the state width")
    if labels.size and ((labels < 0).any() or (labels > 2).any()):
        raise ValueError("fusion labels must be K/E/N")
    return h + ad.rows(label_vecs, labels)


def fuse_marginal(h: Tensor, lattice: Tensor, lengths: np.ndarray, label_vecs: Tensor) -> Tensor:
    """Soft fusion: add the marginal-weighted mixture of category vectors."""
    probs = marginals_batch(lattice, lengths)  # (B, m, 3)
    bsz, m = probs.shape[0], probs.shape[1]
    mix = ad.reshape(ad.reshape(probs, (bsz * m, N_LABELS)) @ label_vecs, h.shape)
    return h + mix
