"""Dense-skip convolutional artifact-removal network with a hand-written tape.

Architecture, with level widths ``w_s = base_channels * 2**s``::

    stem       3x3 conv 1 -> w_0, ReLU
    enc s      dense block (3x3 convs, growth g, ReLU, concatenated),
               1x1 transition -> w_s, ReLU  (kept as the skip for level s),
               3x3 stride-2 conv -> w_{s+1}, ReLU  (all but the deepest level)
    dec s      nearest 2x upsample, 3x3 conv -> w_s, ReLU, concat with skip s,
               dense block, 1x1 transition -> w_s, ReLU
    head       1x1 conv w_0 -> 1, added to the network input

Activations are laid out as (channels, batch, height, width) internally.
All arithmetic is float64. The rectifier derivative at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidState
from .io import read_sidecar, read_tensor, write_tensor

# cached im2col buffers above this size are rebuilt during backward instead
_COLS_CACHE_BYTES = 128 * 2**20


@dataclass(frozen=True)
class NetworkConfig:
    n_scales: int = 3
    base_channels: int = 8
    dense_growth_rate: int = 4
    dense_layers_per_block: int = 2
    input_shape: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.n_scales < 1:
            raise InvalidArgument("n_scales must be >= 1")
        if min(self.base_channels, self.dense_growth_rate) < 1 or self.dense_layers_per_block < 0:
            raise InvalidArgument("channel counts must be positive")
        factor = 2 ** (self.n_scales - 1)
        if any(n % factor for n in self.input_shape):
            raise InvalidArgument(f"input shape {self.input_shape} is not divisible by {factor}")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1


def conv_specs(config: NetworkConfig) -> list[ConvSpec]:
    g, n_dense = config.dense_growth_rate, config.dense_layers_per_block
    specs = [ConvSpec("stem", 1, config.width(0), 3)]

    def dense(prefix, c):
        for i in range(n_dense):
            specs.append(ConvSpec(f"{prefix}.dense{i}", c + i * g, g, 3))
        return c + n_dense * g

    # dense() appends its layers before the enclosing append runs, so the list
    # is in forward execution order
    for s in range(config.n_scales):
        c_in = config.width(s)
        specs.append(ConvSpec(f"enc{s}.trans", dense(f"enc{s}", c_in), config.width(s), 1))
        if s < config.n_scales - 1:
            specs.append(ConvSpec(f"enc{s}.down", config.width(s), config.width(s + 1), 3, 2))
    for s in range(config.n_scales - 2, -1, -1):
        specs.append(ConvSpec(f"dec{s}.up", config.width(s + 1), config.width(s), 3))
        specs.append(ConvSpec(f"dec{s}.trans", dense(f"dec{s}", 2 * config.width(s)), config.width(s), 1))
    specs.append(ConvSpec("head", config.width(0), 1, 1))
    return specs


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(config: NetworkConfig) -> tuple[LayerSlot, ...]:
    slots, offset = [], 0
    for sp in conv_specs(config):
        for suffix, shape in (("weight", (sp.c_out, sp.c_in, sp.kernel, sp.kernel)), ("bias", (sp.c_out,))):
            slot = LayerSlot(f"{sp.name}.{suffix}", offset, shape)
            slots.append(slot)
            offset += slot.size
    return tuple(slots)


class ParameterSet:
    """Flat float64 parameter vector plus a name -> (offset, shape) layout."""

    def __init__(self, values: np.ndarray, layout: tuple[LayerSlot, ...]):
        values = np.asarray(values, dtype=np.float64)
        total = sum(s.size for s in layout)
        if values.ndim != 1 or len(values) != total:
            raise InvalidArgument(f"expected {total} parameters, got shape {values.shape}")
        self.values = values
        self.layout = layout
        self._index = {s.name: s for s in layout}

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_params(self) -> int:
        return len(self.values)

    def slot(self, name: str) -> LayerSlot:
        return self._index[name]

    def get(self, name: str) -> np.ndarray:
        s = self._index[name]
        return self.values[s.offset:s.offset + s.size].reshape(s.shape)

    def copy(self) -> "ParameterSet":
        return type(self)(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterSet":
        return type(self)(values, self.layout)


class GradientSet(ParameterSet):
    """Gradients indexed identically to a ParameterSet."""


def init_network(config: NetworkConfig, seed: int) -> ParameterSet:
    """He-normal kernels (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    layout = build_layout(config)
    values = np.zeros(sum(s.size for s in layout))
    for s in layout:
        if s.name.endswith(".weight"):
            fan_in = s.shape[1] * s.shape[2] * s.shape[3]
            values[s.offset:s.offset + s.size] = rng.normal(0.0, np.sqrt(2.0 / fan_in), s.size)
    return ParameterSet(values, layout)


def zeros_like(params: ParameterSet) -> ParameterSet:
    return ParameterSet(np.zeros_like(params.values), params.layout)


# ---------------------------------------------------------------------------
# tape

class Var:
    __slots__ = ("data", "id", "requires_grad")

    def __init__(self, data: np.ndarray, id: int, requires_grad: bool = True):
        self.data = data
        self.id = id
        self.requires_grad = requires_grad


class Tape:
    """Activations and backward closures of one forward pass; usable once."""

    def __init__(self, params: ParameterSet, record: bool = True):
        self.layout = params.layout
        self.n_params = params.n_params
        self.record = record
        self.nodes: list = []
        self.output_id: int | None = None
        self.output_shape: tuple | None = None
        self.consumed = False
        self._next = 0

    def var(self, data: np.ndarray, requires_grad: bool = True) -> Var:
        v = Var(data, self._next, requires_grad)
        self._next += 1
        return v

    def push(self, out: Var, inputs: tuple[Var, ...], fn) -> Var:
        if self.record:
            self.nodes.append((fn, tuple(v.id if v.requires_grad else None for v in inputs), out.id))
        return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _im2col(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c, b = x.shape[:2]
    xp = _pad(x, k // 2)
    cols = np.empty((k * k, c, b, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i * k + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(k * k * c, -1)


def _col2im(gcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c, b, h, w = shape
    p = k // 2
    gcols = gcols.reshape(k * k, c, b, ho, wo)
    gxp = np.zeros((c, b, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i * k + j]
    return gxp[:, :, p:p + h, p:p + w] if p else gxp


def _conv(tape: Tape, params: ParameterSet, spec: ConvSpec, x: Var) -> Var:
    w = params.get(spec.name + ".weight")
    b = params.get(spec.name + ".bias")
    c, nb, h, wd = x.data.shape
    k, stride, o = spec.kernel, spec.stride, spec.c_out
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    wm = w.transpose(0, 2, 3, 1).reshape(o, -1)
    if k == 1 and stride == 1:
        cols = x.data.reshape(c, -1)
    else:
        cols = _im2col(x.data, k, stride, ho, wo)
    out = (wm @ cols + b[:, None]).reshape(o, nb, ho, wo)
    keep = cols if cols.nbytes <= _COLS_CACHE_BYTES else None
    w_slot = params.slot(spec.name + ".weight")
    b_slot = params.slot(spec.name + ".bias")
    xdata, need_gx = x.data, x.requires_grad

    def backward(g, pgrad):
        g2 = g.reshape(o, -1)
        cols_ = keep
        if cols_ is None:
            cols_ = xdata.reshape(c, -1) if (k == 1 and stride == 1) else _im2col(xdata, k, stride, ho, wo)
        gw = (g2 @ cols_.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        pgrad[w_slot.offset:w_slot.offset + w_slot.size] += gw.ravel()
        pgrad[b_slot.offset:b_slot.offset + b_slot.size] += g2.sum(axis=1)
        if not need_gx:
            return (None,)
        gcols = wm.T @ g2
        if k == 1 and stride == 1:
            return (gcols.reshape(xdata.shape),)
        return (_col2im(gcols, xdata.shape, k, stride, ho, wo),)

    return tape.push(tape.var(out), (x,), backward)


def _relu(tape: Tape, x: Var) -> Var:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return tape.push(tape.var(out), (x,), lambda g, _: (g * mask,))


def _concat(tape: Tape, xs: list[Var]) -> Var:
    sizes = np.cumsum([v.data.shape[0] for v in xs])[:-1]
    out = np.concatenate([v.data for v in xs], axis=0)
    return tape.push(tape.var(out), tuple(xs), lambda g, _: tuple(np.split(g, sizes, axis=0)))


def _upsample(tape: Tape, x: Var) -> Var:
    c, b, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return tape.push(tape.var(out), (x,), lambda g, _: (g.reshape(c, b, h, 2, w, 2).sum(axis=(3, 5)),))


def _add(tape: Tape, x: Var, y: Var) -> Var:
    return tape.push(tape.var(x.data + y.data), (x, y), lambda g, _: (g, g))


def _dense_block(tape, params, specs, prefix, n_layers, x):
    feats = [x]
    cur = x
    for i in range(n_layers):
        new = _relu(tape, _conv(tape, params, specs[f"{prefix}.dense{i}"], cur))
        feats.append(new)
        cur = _concat(tape, feats)
    return cur


def forward(params: ParameterSet, config: NetworkConfig, batch: np.ndarray,
            record: bool = True) -> tuple[np.ndarray, Tape]:
    """Run the network on a batch of (B, H, W) images."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or tuple(batch.shape[1:]) != config.input_shape:
        raise InvalidArgument(f"batch shape {batch.shape} does not match (B, *{config.input_shape})")
    if params.layout != build_layout(config):
        raise InvalidArgument("parameter layout does not match the network config")
    specs = {sp.name: sp for sp in conv_specs(config)}
    n_dense = config.dense_layers_per_block
    tape = Tape(params, record)

    x0 = tape.var(batch[None], requires_grad=False)
    x = _relu(tape, _conv(tape, params, specs["stem"], x0))
    skips = []
    for s in range(config.n_scales):
        x = _dense_block(tape, params, specs, f"enc{s}", n_dense, x)
        x = _relu(tape, _conv(tape, params, specs[f"enc{s}.trans"], x))
        skips.append(x)
        if s < config.n_scales - 1:
            x = _relu(tape, _conv(tape, params, specs[f"enc{s}.down"], x))
    for s in range(config.n_scales - 2, -1, -1):
        x = _relu(tape, _conv(tape, params, specs[f"dec{s}.up"], _upsample(tape, x)))
        x = _dense_block(tape, params, specs, f"dec{s}", n_dense, _concat(tape, [x, skips[s]]))
        x = _relu(tape, _conv(tape, params, specs[f"dec{s}.trans"], x))
    out = _add(tape, x0, _conv(tape, params, specs["head"], x))
    tape.output_id = out.id
    tape.output_shape = out.data.shape
    return out.data[0], tape


def backward(tape: Tape, grad_output: np.ndarray) -> GradientSet:
    """Gradient of a scalar loss w.r.t. every parameter, given dLoss/dOutput."""
    if tape.consumed:
        raise InvalidState("tape has already been consumed by backward()")
    if not tape.record:
        raise InvalidState("tape was created without recording")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != tape.output_shape[1:]:
        raise InvalidArgument(f"upstream gradient shape {grad_output.shape} != {tape.output_shape[1:]}")
    tape.consumed = True
    pgrad = np.zeros(tape.n_params)
    grads = {tape.output_id: grad_output[None]}
    for fn, inputs, out in reversed(tape.nodes):
        g = grads.pop(out, None)
        if g is None:
            continue
        for i, gi in zip(inputs, fn(g, pgrad)):
            if i is None or gi is None:
                continue
            grads[i] = grads[i] + gi if i in grads else gi
    tape.nodes = []
    return GradientSet(pgrad, tape.layout)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-example squared L2 error summed over pixels, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    r = pred - target
    return float(np.sum(r * r) / n), 2.0 * r / n


def predict(params: ParameterSet, config: NetworkConfig, batch: np.ndarray,
            chunk: int = 16) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    outs = [forward(params, config, batch[i:i + chunk], record=False)[0]
            for i in range(0, len(batch), chunk)]
    return np.concatenate(outs, axis=0)


def loss_and_grad(params: ParameterSet, config: NetworkConfig, inputs: np.ndarray,
                  targets: np.ndarray) -> tuple[float, GradientSet]:
    out, tape = forward(params, config, inputs)
    value, g = mse_loss(out, targets)
    return value, backward(tape, g)


def save_checkpoint(path: str | Path, params: ParameterSet, config: NetworkConfig,
                    extra: dict | None = None) -> Path:
    meta = {
        "kind": "checkpoint",
        "network_config": config.to_dict(),
        "layout": [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in params.layout],
        "n_params": params.n_params,
    }
    if extra:
        meta.update(extra)
    return write_tensor(path, params.values, meta)


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, NetworkConfig, dict]:
    meta = read_sidecar(path)
    config = NetworkConfig(**meta["network_config"])
    layout = tuple(LayerSlot(d["name"], d["offset"], tuple(d["shape"])) for d in meta["layout"])
    if layout != build_layout(config):
        raise InvalidArgument(f"{path}: stored layout does not match its network config")
    return ParameterSet(read_tensor(path), layout), config, meta
