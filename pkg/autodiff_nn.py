# Dense-tensor math with tape-based reverse-mode automatic differentiation
# Contains the Tensor/Tape graph, MLP layers, the Adam optimizer, a
# finite-difference gradient checker and the binary checkpoint format.
# Every trainable model in the package is built on top of this module.

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ArchitectureMismatchError,
    DimensionError,
    FormatError,
    NumericError,
    TrainingError,
    UsageError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, np.ndarray, Sequence[float]]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# ============================================================================
# TAPE AND TENSOR - the recorded computation graph
# ============================================================================

@dataclass
class _Node:
    """One recorded primitive: output slot, parent slots, vector-Jacobian product."""
    slot: int
    parents: Tuple[Optional[int], ...]  # None for constant operands
    vjp: VJP


class Tape:
    """Ordered record of primitive operations.

    Values live in ``values`` indexed by slot. Watched parameters are leaves
    (no node); every primitive appends a node after its inputs, so the node
    list is always in topological order.
    """

    def __init__(self):
        self.values: List[np.ndarray] = []
        self.nodes: List[_Node] = []
        self.params: Dict[str, int] = {}  # parameter name -> slot

    def watch(self, name: str, value: ArrayLike) -> "Tensor":
        """Register a named parameter leaf (idempotent for an existing name)."""
        if name in self.params:
            slot = self.params[name]
            return Tensor(self.values[slot], self, slot)
        slot = len(self.values)
        self.values.append(np.asarray(value, dtype=np.float64))
        self.params[name] = slot
        return Tensor(self.values[slot], self, slot)

    def record(self, value: np.ndarray, parents: Sequence["Tensor"], vjp: VJP) -> "Tensor":
        slot = len(self.values)
        self.values.append(value)
        parent_slots = tuple(p.slot if p.tape is self else None for p in parents)
        self.nodes.append(_Node(slot=slot, parents=parent_slots, vjp=vjp))
        return Tensor(value, self, slot)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array, optionally attached to a tape slot.

    Tensors without a tape are constants: operations on them are evaluated but
    nothing is recorded.
    """

    __slots__ = ("data", "tape", "slot")

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None, slot: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.slot = slot

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, recorded={self.tape is not None})"

    # ----- arithmetic -----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    # ----- unary / reductions -----

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return reduce_sum(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return mul(self, self)


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise UsageError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _emit(value: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape.record(value, parents, vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# PRIMITIVES
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _emit(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _emit(
        av / bv, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max(a, floor) against a constant floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _emit(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= low) & (a.data <= high)
    return _emit(np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean mask holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.data.shape, b.data.shape
    return _emit(
        np.where(mask, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
    )


def reduce_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic indexing only (ints, slices, Ellipsis, None)."""
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis of x."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xv, wv = x.data, weight.data
    n_out, n_in = wv.shape

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        return (g @ wv, g2.T @ xv.reshape(-1, n_in), g2.sum(axis=0))

    return _emit(xv @ wv.T + bias.data, (x, weight, bias), vjp)


def backward(tape: Tape, output_grad: Optional[ArrayLike] = None, output: Optional[Tensor] = None) -> Dict[str, np.ndarray]:
    """Reverse pass from ``output`` (default: the last recorded value).

    Returns one gradient per watched parameter, zeros for parameters the
    output does not depend on.
    """
    if not tape.nodes:
        raise UsageError("backward called on an empty tape")
    out_slot = tape.nodes[-1].slot if output is None else output.slot
    if output is not None and output.tape is not tape:
        raise UsageError("output tensor was not recorded on this tape")
    out_value = tape.values[out_slot]
    if output_grad is None:
        seed = np.ones_like(out_value)
    else:
        seed = np.asarray(output_grad, dtype=np.float64)
        if seed.shape != out_value.shape:
            raise DimensionError(f"output_grad shape {seed.shape} does not match output shape {out_value.shape}")

    grads: Dict[int, np.ndarray] = {out_slot: seed}
    for node in reversed(tape.nodes):
        if node.slot > out_slot:
            continue
        g = grads.pop(node.slot, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = grads[parent] + pg if parent in grads else pg

    return {
        name: grads.get(slot, np.zeros_like(tape.values[slot]))
        for name, slot in tape.params.items()
    }


# ============================================================================
# MLP LAYERS
# ============================================================================

@dataclass
class MlpParams:
    """Weights and biases of a fully connected ReLU network.

    ReLU on hidden layers, identity on the output layer.
    """
    layers: List[Tuple[np.ndarray, np.ndarray]]  # (weight: out x in, bias: out)

    def __post_init__(self):
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not agree")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise DimensionError(
                    f"layer {i}: in-dim {w.shape[1]} does not chain with previous out-dim "
                    f"{self.layers[i - 1][0].shape[0]}"
                )

    @property
    def dims(self) -> List[int]:
        if not self.layers:
            return []
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def named_parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(self.layers):
            named[f"{prefix}.{i}.weight"] = w
            named[f"{prefix}.{i}.bias"] = b
        return named

    def replaced(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> "MlpParams":
        """Copy with the arrays found under ``prefix`` swapped in."""
        layers = []
        for i, (w, b) in enumerate(self.layers):
            layers.append((
                np.asarray(arrays.get(f"{prefix}.{i}.weight", w), dtype=np.float64),
                np.asarray(arrays.get(f"{prefix}.{i}.bias", b), dtype=np.float64),
            ))
        return MlpParams(layers)

    def equals(self, other: "MlpParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


def mlp_dims(in_dim: int, out_dim: int, hidden_dim: int = 64, num_layers: int = 3) -> List[int]:
    """Layer widths: ``num_layers`` fully connected layers of width ``hidden_dim``."""
    return [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Uniform in ±sqrt(6/(fan_in+fan_out)) per weight matrix, zero biases."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, input: Union[Tensor, ArrayLike], tape: Optional[Tape], name: Optional[str] = None) -> Tensor:
    """Run the MLP on the tape.

    With a ``name`` every weight is watched as ``{name}.{i}.weight``/``bias``
    and receives gradients; without one the weights enter as constants
    (frozen network).
    """
    h = as_tensor(input)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        if h.data.shape[-1] != w.shape[1]:
            raise DimensionError(
                f"layer {i} of {name or 'mlp'} expects input dim {w.shape[1]}, got {h.data.shape[-1]}"
            )
        if name is not None and tape is not None:
            wt, bt = tape.watch(f"{name}.{i}.weight", w), tape.watch(f"{name}.{i}.bias", b)
        else:
            wt, bt = Tensor(w), Tensor(b)
        h = linear(h, wt, bt)
        if i < last:
            h = relu(h)
    return h


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Tape-free evaluation; bit-identical to ``mlp_forward``."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        if h.shape[-1] != w.shape[1]:
            raise DimensionError(f"layer {i} expects input dim {w.shape[1]}, got {h.shape[-1]}")
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


# ============================================================================
# GRADIENT CHECK
# ============================================================================

LossFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


def gradient_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], fd_step: float = 1e-5,
                   per_entry: bool = False) -> float:
    """Max relative error between autodiff and central finite differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. With ``per_entry`` every
    parameter is scored on its own as |analytic - numeric| / (|numeric| + 1e-8).
    The default scores each array against its own scale,
    max|analytic - numeric| / (max|numeric| + 1e-8), which never exceeds the
    per-entry score and does not flag finite-difference roundoff on entries
    whose gradient is close to zero. The result is the max over arrays (0 for
    an empty parameter set).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, analytic = loss_fn(base)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")

    worst = 0.0
    for name, value in base.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + fd_step
            up, _ = loss_fn(base)
            flat[j] = original - fd_step
            down, _ = loss_fn(base)
            flat[j] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss is not finite around {name}[{j}]")
            num_flat[j] = (up - down) / (2.0 * fd_step)
        gap = np.abs(analytic[name] - numeric)
        if not value.size:
            err = 0.0
        elif per_entry:
            err = np.max(gap / (np.abs(numeric) + 1e-8))
        else:
            err = np.max(gap) / (np.max(np.abs(numeric)) + 1e-8)
        logger.debug("gradient check %s: relative error %.3e", name, err)
        worst = max(worst, float(err))
    return worst


# ============================================================================
# ADAM OPTIMIZER
# ============================================================================

@dataclass
class OptimState:
    """Adam moment accumulators and hyperparameters."""
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """One Adam update. Returns new parameter arrays and a new state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")

    step = state.step + 1
    new_params: Dict[str, np.ndarray] = {}
    m_new: Dict[str, np.ndarray] = {}
    v_new: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.beta1 * state.first_moment.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        updated = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if not np.all(np.isfinite(updated)):
            raise TrainingError(f"parameter {name} became non-finite at step {step}")
        new_params[name], m_new[name], v_new[name] = updated, m, v

    new_state = OptimState(
        first_moment=m_new,
        second_moment=v_new,
        step=step,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_params, new_state


# ============================================================================
# CHECKPOINTS - magic, version, JSON architecture descriptor, raw <f8 arrays
# ============================================================================

CHECKPOINT_MAGIC = b"RBCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(mlps: Mapping[str, MlpParams], path: Union[str, Path], meta: Optional[Mapping] = None):
    """Write named MLPs plus free-form architecture metadata to ``path``."""
    descriptor = {
        "meta": dict(meta or {}),
        "mlps": {name: [[int(w.shape[0]), int(w.shape[1])] for w, _ in p.layers] for name, p in mlps.items()},
    }
    header = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(mlps):
            for w, b in mlps[name].layers:
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    logger.debug("checkpoint written to %s", path)


def load_checkpoint(path: Union[str, Path], expected_meta: Optional[Mapping] = None) -> Tuple[Dict[str, MlpParams], Dict]:
    """Read a checkpoint; ``expected_meta`` entries must match the stored ones."""
    blob = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC)
    if blob[:prefix] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic header)")
    if len(blob) < prefix + 8:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", blob[prefix:prefix + 8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = prefix + 8
    if len(blob) < offset + header_len:
        raise FormatError(f"{path}: truncated architecture descriptor")
    try:
        descriptor = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable architecture descriptor ({exc})") from exc
    offset += header_len

    meta = descriptor.get("meta", {})
    for key, expected in (expected_meta or {}).items():
        if meta.get(key) != expected:
            raise ArchitectureMismatchError(
                f"{path}: architecture field {key!r} is {meta.get(key)!r}, expected {expected!r}"
            )

    mlps: Dict[str, MlpParams] = {}
    for name in sorted(descriptor["mlps"]):
        layers = []
        for n_out, n_in in descriptor["mlps"][name]:
            arrays = []
            for shape in ((n_out, n_in), (n_out,)):
                nbytes = 8 * int(np.prod(shape))
                if len(blob) < offset + nbytes:
                    raise FormatError(f"{path}: truncated weight data in {name}")
                arrays.append(np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64))
                offset += nbytes
            layers.append((arrays[0], arrays[1]))
        mlps[name] = MlpParams(layers)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after weight data")
    return mlps, meta
