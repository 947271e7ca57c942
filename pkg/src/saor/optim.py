"""Named parameter store with Adam state and binary checkpoint I/O.

Checkpoint layout (little-endian):
    magic  b"SAOR"
    version u32
    n_params u32
    per parameter: name_len u32, name utf-8, rank u32, dims u32*rank,
                   float32 data
    n_state u32
    per state entry: same record layout; names are "<param>.adam_m",
                     "<param>.adam_v", "<param>.adam_t"
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from .autodiff import Tensor

log = logging.getLogger("saor")

MAGIC = b"SAOR"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for malformed checkpoint files or architecture mismatches."""


class ParamStore:
    """Ordered mapping of parameter names to tensors plus Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=requires_grad)
        self.params[name] = t
        if requires_grad:
            self.adam_m[name] = np.zeros_like(t.data)
            self.adam_v[name] = np.zeros_like(t.data)
            self.adam_t[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable(self):
        return [(n, p) for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with bias correction; clears consumed gradients.

    Parameters without a gradient are skipped (logged at debug level) so
    gated subnetworks stay bit-identical to their initialization.
    """
    b1, b2 = betas
    for name, p in store.trainable():
        g = p.grad
        if g is None:
            log.debug("adam_step: no gradient for %s, skipping", name)
            continue
        store.adam_t[name] += 1
        t = store.adam_t[name]
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def _write_record(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint (record header)")
    (nlen,) = struct.unpack("<I", raw)
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
    return name, data


def save_checkpoint(store: ParamStore, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(store.params)))
        for name, p in store.params.items():
            _write_record(f, name, p.data)
        state_names = [n for n, p in store.params.items() if p.requires_grad]
        f.write(struct.pack("<I", 3 * len(state_names)))
        for name in state_names:
            _write_record(f, name + ".adam_m", store.adam_m[name])
            _write_record(f, name + ".adam_v", store.adam_v[name])
            _write_record(f, name + ".adam_t",
                          np.asarray([store.adam_t[name]], dtype=np.float32))


def load_checkpoint(store: ParamStore, path):
    """Load parameter values and Adam state into an existing store.

    Shapes must match the store's current architecture.
    """
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_params,) = struct.unpack("<I", f.read(4))
        for _ in range(n_params):
            name, data = _read_record(f)
            if name not in store.params:
                raise CheckpointError(f"checkpoint parameter {name!r} not in model")
            p = store.params[name]
            if p.data.shape != data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: model {p.data.shape} "
                    f"vs checkpoint {data.shape}")
            p.data = data.astype(p.data.dtype).copy()
        (n_state,) = struct.unpack("<I", f.read(4))
        for _ in range(n_state):
            name, data = _read_record(f)
            base, kind = name.rsplit(".", 1)
            if base not in store.params:
                raise CheckpointError(f"adam state for unknown parameter {base!r}")
            if kind == "adam_m":
                store.adam_m[base] = data.copy()
            elif kind == "adam_v":
                store.adam_v[base] = data.copy()
            elif kind == "adam_t":
                store.adam_t[base] = int(data[0])
            else:
                raise CheckpointError(f"unknown state record {name!r}")
