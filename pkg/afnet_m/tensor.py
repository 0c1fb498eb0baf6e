"""
Tensor and tape for the reverse-mode engine.

All feature maps live in `Tensor` objects backed by float64 numpy arrays in
N x C x H x W layout. Operations in `afnet_m.functional` record themselves on the
active `Tape`; `backward` replays the tape in reverse.

    with Tape() as tape:
        loss, probs = F.softmax_cross_entropy(model(texture, depth, masks), labels)
    backward(tape, loss)
"""
import contextvars
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError, TensorFileError

_active_tape = contextvars.ContextVar("afnet_m_active_tape", default=None)


class Tensor:
    """A dense float64 array with an optional gradient.

    `data` is never resized in place; only `grad` is written to during `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags.c_contiguous:
            data = data.copy()
        if any(d <= 0 for d in data.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        # backward_fn(grad_of_output) -> tuple of input gradients (None for "no gradient")
        self.backward_fn = backward_fn


class Tape:
    """Records primitive applications in execution order while active.

    Entries are appended as operations run, so every entry's inputs already
    exist when its output is created.
    """

    def __init__(self):
        self.entries = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, inputs, output, backward_fn):
        self.entries.append(TapeEntry(inputs, output, backward_fn))

    def backward(self, loss):
        return backward(self, loss)


def active_tape():
    return _active_tape.get()


def record(out_data, inputs, backward_fn):
    """Wrap `out_data` in a Tensor and put it on the active tape when any input needs a gradient."""
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(inputs, out, backward_fn)
    return out


def _accumulate(t, g):
    if g.shape != t.shape:
        raise ContractError(f"gradient of shape {g.shape} does not match tensor of shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(tape, loss):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Tensors the loss does not depend on keep `grad is None`; callers treat that as zero.
    Gradients accumulate onto existing `.grad` arrays, so parameters must be zeroed
    between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g_out = entry.output.grad
        if g_out is None:
            continue
        grads = entry.backward_fn(g_out)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            _accumulate(t, g)
    return loss


# ---------------------------------------------------------------------------------------------
# AFTN binary tensor files: b"AFTN", version byte, rank (u64 LE), dims (u64 LE), data (f64 LE).

MAGIC = b"AFTN"
VERSION = 1


def tensor_to_bytes(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    header = MAGIC + bytes([VERSION])
    dims = np.asarray([arr.ndim, *arr.shape], dtype="<u8").tobytes()
    return header + dims + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf):
    if len(buf) < 13 or buf[:4] != MAGIC:
        raise TensorFileError("not an AFTN tensor file (bad magic)")
    if buf[4] != VERSION:
        raise TensorFileError(f"unsupported AFTN version {buf[4]}")
    rank = int(np.frombuffer(buf, dtype="<u8", count=1, offset=5)[0])
    offset = 13
    if len(buf) < offset + 8 * rank:
        raise TensorFileError("truncated AFTN header")
    shape = tuple(int(d) for d in np.frombuffer(buf, dtype="<u8", count=rank, offset=offset))
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise TensorFileError(f"AFTN payload holds {(len(buf) - offset) // 8} values, shape {shape} needs {count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return data.reshape(shape)


def save_tensor(path, x):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(x))
    return path


def load_tensor(path, requires_grad=False):
    path = Path(path)
    if not path.exists():
        raise TensorFileError(f"File {path} does not exist")
    return Tensor(tensor_from_bytes(path.read_bytes()), requires_grad=requires_grad)
