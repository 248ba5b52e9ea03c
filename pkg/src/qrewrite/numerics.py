"""Parameter storage, initialization, optimization and gradient verification.

Training runs in float32; verification (finite differences) requires float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad


class CheckpointError(Exception):
    """Raised on unreadable, truncated or version-mismatched parameter files."""


class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of parameters reached by the last backward pass."""
        return {n: p.grad for n, p in self._params.items() if p.grad is not None}

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self._params[n].data = v.copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, p in self._params.items():
            out.add(n, Tensor(p.data.astype(dtype)))
        return out


def glorot_uniform_init(shape, rng_seed: int, dtype=np.float32) -> Tensor:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    Matrices use their two dims as fans; vectors use fan_in = fan_out = length.
    Higher-rank tensors are treated as stacks of vectors over the last axis.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise ValueError("shape must have at least one dimension")
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero-size dimension in shape {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    values = rng.uniform(-a, a, size=shape)
    return Tensor(values.astype(dtype), requires_grad=True)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable softmax (max subtraction); preserves argmax."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AdamState:
    """First/second moment estimates and per-parameter step counts."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, applied in place.

    Only parameters present in `grads` are touched, so shared-parameter
    training schedules leave untouched parameters (and their moments) alone.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter: {name}")
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.data.shape}"
            )
        g = g.astype(p.data.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: int
    checked: int


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    entries: list[ParamCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def format(self) -> str:
        lines = []
        for e in sorted(self.entries, key=lambda e: -e.max_rel_err):
            status = "ok" if e.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"{status:4s} {e.name:24s} max_rel_err={e.max_rel_err:.3e} "
                f"worst_index={e.worst_index} checked={e.checked}"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict} (tol={self.tol:g})")
        return "\n".join(lines)


def finite_diff_gradcheck(
    loss_fn,
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    coords_per_tensor: int = 200,
    seed: int = 0,
    corrupt_param: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must be a deterministic closure over `params` returning a scalar
    Tensor.  Parameters must be float64.  Tensors larger than
    `coords_per_tensor` are checked on a seeded random coordinate subsample.
    `corrupt_param` doubles that parameter's analytic gradient first; it exists
    only as a negative control for this check.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 parameters ({name} is {p.data.dtype})")
    params.zero_grads()
    loss = loss_fn()
    base = float(loss.data)
    if not math.isfinite(base):
        raise ValueError("non-finite loss in gradcheck")
    loss.backward()
    analytic = {
        n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for n, p in params.items()
    }
    params.zero_grads()
    if corrupt_param is not None:
        analytic[corrupt_param] = analytic[corrupt_param] * 2.0

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= coords_per_tensor:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=coords_per_tensor, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst_err, worst_idx = 0.0, 0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst_err:
                worst_err, worst_idx = rel, int(i)
        entries.append(ParamCheck(name, worst_err, worst_idx, len(idxs)))
    return GradCheckReport(entries, tol)


# --- binary tensor container -------------------------------------------------
#
# Layout: magic, u64-LE header length, JSON header (format version, metadata,
# tensor manifest), then per tensor a u64-LE byte length plus raw values.
# Round-trips are bit-exact.

_MAGIC = b"QRWTENS1"
FORMAT_VERSION = 1
_DTYPE_CODES = {"float32": np.float32, "float64": np.float64}


def save_tensor_file(path, tensors, metadata: dict) -> None:
    if isinstance(tensors, ParamStore):
        tensors = dict(tensors.items())
    manifest = []
    buffers = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        manifest.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        buffers.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "metadata": metadata, "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(struct.pack("<Q", len(buf)))
            f.write(buf)


def load_tensor_file(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if len(view) < len(_MAGIC) + 8 or bytes(view[: len(_MAGIC)]) != _MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", view, off)
    off += 8
    if off + hlen > len(view):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(bytes(view[off : off + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    off += hlen
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} not supported (expected {FORMAT_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        dtype = _DTYPE_CODES.get(spec["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype {spec['dtype']!r}")
        shape = tuple(spec["shape"])
        if off + 8 > len(view):
            raise CheckpointError(f"{path}: truncated before tensor {spec['name']!r}")
        (nbytes,) = struct.unpack_from("<Q", view, off)
        off += 8
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: tensor {spec['name']!r} length {nbytes} != expected {expected}"
            )
        if off + nbytes > len(view):
            raise CheckpointError(f"{path}: truncated data for tensor {spec['name']!r}")
        arr = np.frombuffer(view[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        tensors[spec["name"]] = arr
    if off != len(view):
        raise CheckpointError(f"{path}: {len(view) - off} trailing bytes")
    return tensors, header["metadata"]
