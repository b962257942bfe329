"""Layers, model assembly and checkpoints.

A :class:`Model` is a feature extractor (layers before ``feature_boundary``)
followed by a classifier head. The default head is a fully connected layer,
batch normalization and ReLU; :func:`softmax_rows` turns the head output into
cluster posteriors.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ContractError, DomainError, FormatError, ShapeError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def xavier_init(shape, rng: np.random.Generator) -> Tensor:
    """Uniform Glorot initialisation in ``±sqrt(6 / (fan_in + fan_out))``.

    For 2-D shapes ``(fan_in, fan_out)``; for conv kernels ``(out, in, kh, kw)``
    the receptive field multiplies both fans.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ShapeError(f"xavier_init needs >= 2 dims, got {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- functional ops ------------------------------------------------------

def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax, computed as ``exp(r - rowmax) / sum``."""
    r = logits.data
    if r.ndim != 2:
        raise ShapeError(f"softmax_rows expects M x K logits, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise DomainError("softmax_rows received non-finite logits")
    e = np.exp(r - r.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return T.record(p, (logits,), bw, "softmax")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d_forward(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (M, C, H, W) with ``weight`` (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    M, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(H + 2 * pad, W + 2 * pad)}")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(M * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(M, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (gm.T @ cols).reshape(weight.shape) if weight.tracked() else None
        db = gm.sum(axis=0) if bias is not None and bias.tracked() else None
        dx = None
        if x.tracked():
            dcols = (gm @ wmat).reshape(M, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return T.record(out, parents, bw, "conv2d")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, features: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        return cls(
            gamma=Tensor(np.ones(features), requires_grad=True),
            beta=Tensor(np.zeros(features), requires_grad=True),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
            eps=eps,
            momentum=momentum,
        )


def batchnorm_forward(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over (M, F) or per-channel over (M, C, H, W).

    Train mode normalises with biased batch statistics and updates the
    running estimates; eval mode uses the running estimates only.
    """
    if x.ndim == 2:
        axes, pshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    F = x.shape[1]
    if state.gamma.shape != (F,):
        raise ShapeError(f"batchnorm has {state.gamma.shape[0]} features, input has {F}")
    xd = x.data
    gamma = state.gamma.data.reshape(pshape)
    beta = state.beta.data.reshape(pshape)

    if training:
        if x.shape[0] < 2:
            raise ContractError("batchnorm in train mode needs a batch of at least 2 samples")
        n = xd.size // F
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        m = state.momentum
        # running variance uses the unbiased estimate
        state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(-1) * n / (n - 1)
    else:
        n = None
        mean = state.running_mean.reshape(pshape)
        var = state.running_var.reshape(pshape)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean) * inv_std
    out = gamma * xhat + beta

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if state.gamma.tracked() else None
        dbeta = g.sum(axis=axes) if state.beta.tracked() else None
        dx = None
        if x.tracked():
            dxhat = g * gamma
            if training:
                dx = inv_std / n * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return T.record(out, (x, state.gamma, state.beta), bw, "batchnorm")


# -- layers --------------------------------------------------------------

@dataclass
class LayerSpec:
    """Declarative description of one layer.

    ``kind`` is one of ``linear``, ``conv2d``, ``batchnorm``, ``relu``,
    ``flatten``; ``args`` carries the kind-specific hyperparameters.
    """

    kind: str
    args: dict = field(default_factory=dict)

    @staticmethod
    def linear(in_features: int, out_features: int) -> "LayerSpec":
        return LayerSpec("linear", {"in": int(in_features), "out": int(out_features)})

    @staticmethod
    def conv2d(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int = 0) -> "LayerSpec":
        return LayerSpec("conv2d", {"in_ch": int(in_ch), "out_ch": int(out_ch), "kernel": int(kernel),
                                    "stride": int(stride), "pad": int(pad)})

    @staticmethod
    def batchnorm(features: int) -> "LayerSpec":
        return LayerSpec("batchnorm", {"features": int(features)})

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec("relu")

    @staticmethod
    def flatten() -> "LayerSpec":
        return LayerSpec("flatten")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.args}

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        d = dict(d)
        return LayerSpec(d.pop("kind"), d)


class Layer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, spec, rng):
        super().__init__(spec)
        self.params["weight"] = xavier_init((spec.args["in"], spec.args["out"]), rng)
        self.params["bias"] = Tensor(np.zeros(spec.args["out"]), requires_grad=True)

    def out_shape(self, in_shape):
        if in_shape != (self.spec.args["in"],):
            raise ShapeError(f"linear expects input ({self.spec.args['in']},), got {in_shape}")
        return (self.spec.args["out"],)

    def forward(self, x, training):
        return T.matmul(x, self.params["weight"]) + self.params["bias"]


class Conv2d(Layer):
    def __init__(self, spec, rng):
        super().__init__(spec)
        a = spec.args
        self.params["weight"] = xavier_init((a["out_ch"], a["in_ch"], a["kernel"], a["kernel"]), rng)
        self.params["bias"] = Tensor(np.zeros(a["out_ch"]), requires_grad=True)

    def out_shape(self, in_shape):
        a = self.spec.args
        if len(in_shape) != 3 or in_shape[0] != a["in_ch"]:
            raise ShapeError(f"conv2d expects ({a['in_ch']}, H, W) input, got {in_shape}")
        _, H, W = in_shape
        if a["kernel"] > H + 2 * a["pad"] or a["kernel"] > W + 2 * a["pad"]:
            raise ShapeError(f"kernel {a['kernel']} larger than padded input {in_shape}")
        return (a["out_ch"], conv_output_size(H, a["kernel"], a["stride"], a["pad"]),
                conv_output_size(W, a["kernel"], a["stride"], a["pad"]))

    def forward(self, x, training):
        a = self.spec.args
        return conv2d_forward(x, self.params["weight"], self.params["bias"], a["stride"], a["pad"])


class BatchNorm(Layer):
    def __init__(self, spec, rng=None):
        super().__init__(spec)
        self.state = BatchNormState.fresh(spec.args["features"])
        self.params["gamma"] = self.state.gamma
        self.params["beta"] = self.state.beta

    @property
    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_buffer(self, name, value):
        setattr(self.state, name, np.array(value, dtype=np.float64))

    def out_shape(self, in_shape):
        if in_shape[0] != self.spec.args["features"]:
            raise ShapeError(f"batchnorm expects {self.spec.args['features']} features, got {in_shape}")
        return in_shape

    def forward(self, x, training):
        return batchnorm_forward(x, self.state, training)


class ReLU(Layer):
    def __init__(self, spec, rng=None):
        super().__init__(spec)

    def forward(self, x, training):
        return T.relu(x)


class Flatten(Layer):
    def __init__(self, spec, rng=None):
        super().__init__(spec)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training):
        return T.reshape(x, (x.shape[0], -1))


_LAYERS = {"linear": Linear, "conv2d": Conv2d, "batchnorm": BatchNorm, "relu": ReLU, "flatten": Flatten}


class Model:
    """Feature extractor plus classifier head over a fixed input shape."""

    def __init__(self, specs, input_shape, feature_boundary: int, seed: int = 0):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.input_shape = tuple(int(s) for s in input_shape)
        if not 0 <= feature_boundary <= len(self.specs):
            raise ShapeError(f"feature_boundary {feature_boundary} outside 0..{len(self.specs)}")
        self.feature_boundary = int(feature_boundary)
        self.seed = int(seed)
        self.training = True
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        shape = self.input_shape
        self.shapes = [shape]
        for i, spec in enumerate(self.specs):
            if spec.kind not in _LAYERS:
                raise ShapeError(f"unknown layer kind {spec.kind!r} at position {i}")
            layer = _LAYERS[spec.kind](spec, rng)
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({spec.kind}): {exc}") from exc
            self.layers.append(layer)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"model output must be flat (K,), got {shape}")
        self.K = shape[0]
        self.embedding: Tensor | None = None

    @property
    def embedding_dim(self) -> int:
        return int(np.prod(self.shapes[self.feature_boundary]))

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers) for name, p in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": b for i, layer in enumerate(self.layers) for name, b in layer.buffers.items()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def _check_input(self, x: Tensor) -> None:
        if x.shape[1:] != self.input_shape or x.shape[0] < 1:
            raise ShapeError(f"model expects (M, {', '.join(map(str, self.input_shape))}) input, got {x.shape}")
        if self.training and x.shape[0] < 2 and any(s.kind == "batchnorm" for s in self.specs):
            raise ContractError("train-mode forward with batchnorm needs at least 2 samples")

    def forward(self, x) -> Tensor:
        """Return logits (M, K); the boundary activation is kept in ``self.embedding``."""
        x = T.as_tensor(x)
        self._check_input(x)
        h = x
        for i, layer in enumerate(self.layers):
            if i == self.feature_boundary:
                self.embedding = h
            h = layer.forward(h, self.training)
        if self.feature_boundary == len(self.layers):
            self.embedding = h
        return h

    __call__ = forward

    def embed(self, x) -> np.ndarray:
        """Flattened feature-extractor output, computed without recording."""
        x = T.as_tensor(x)
        self._check_input(x)
        with T.no_grad():
            h = x
            for layer in self.layers[:self.feature_boundary]:
                h = layer.forward(h, self.training)
        return h.data.reshape(len(h.data), -1).copy()

    def predict_proba(self, x) -> np.ndarray:
        with T.no_grad():
            return softmax_rows(self.forward(x)).data

    def config(self) -> dict:
        return {
            "layers": [s.to_dict() for s in self.specs],
            "input_shape": list(self.input_shape),
            "feature_boundary": self.feature_boundary,
            "seed": self.seed,
        }


def model_forward(model: Model, x) -> Tensor:
    return model.forward(x)


# -- standard stacks -----------------------------------------------------

def classifier_head(in_features: int, K: int, head_relu: bool = True) -> list[LayerSpec]:
    head = [LayerSpec.linear(in_features, K), LayerSpec.batchnorm(K)]
    if head_relu:
        head.append(LayerSpec.relu())
    return head


def mlp(input_dim: int, hidden, K: int, batchnorm: bool = True, head_relu: bool = True,
        head_batchnorm: bool = True, seed: int = 0) -> Model:
    """MLP feature extractor with the FC/BN/ReLU classifier head."""
    specs = []
    d = input_dim
    for h in hidden:
        specs.append(LayerSpec.linear(d, h))
        if batchnorm:
            specs.append(LayerSpec.batchnorm(h))
        specs.append(LayerSpec.relu())
        d = h
    boundary = len(specs)
    head = classifier_head(d, K, head_relu)
    if not head_batchnorm:
        head = [s for s in head if s.kind != "batchnorm"]
    return Model(specs + head, (input_dim,), boundary, seed)


def convnet(input_shape, channels, K: int, fc: int = 0, kernel: int = 3, stride: int = 2,
            head_relu: bool = True, seed: int = 0) -> Model:
    """Conv/BN/ReLU blocks, optionally an FC/BN/ReLU feature layer, then the head."""
    C, H, W = input_shape
    specs = []
    c = C
    pad = kernel // 2
    for out_ch in channels:
        specs += [LayerSpec.conv2d(c, out_ch, kernel, stride, pad), LayerSpec.batchnorm(out_ch), LayerSpec.relu()]
        c = out_ch
        H, W = conv_output_size(H, kernel, stride, pad), conv_output_size(W, kernel, stride, pad)
    specs.append(LayerSpec.flatten())
    d = c * H * W
    if fc:
        specs += [LayerSpec.linear(d, fc), LayerSpec.batchnorm(fc), LayerSpec.relu()]
        d = fc
    boundary = len(specs)
    return Model(specs + classifier_head(d, K, head_relu), tuple(input_shape), boundary, seed)


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"RCLM"
CKPT_VERSION = 1


def save_model(model: Model, path, extra: dict | None = None) -> None:
    """Write an RCLM checkpoint.

    Layout (little-endian): magic, u32 version, u32 header length, UTF-8
    JSON header (layer specs, input shape, boundary, ``extra``), u32 tensor
    count, then per tensor: u32 name length, name, u32 ndim, u32 dims,
    float64 payload. Parameters come first in declaration order, then
    batch-norm running statistics.
    """
    header = dict(model.config())
    header["extra"] = extra or {}
    hb = json.dumps(header, sort_keys=True).encode()
    tensors = [(k, v.data) for k, v in model.parameters().items()] + list(model.buffers().items())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> tuple[Model, dict]:
    """Read an RCLM checkpoint; returns the model (eval mode) and ``extra``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic at byte 0")
    version, hlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    header = json.loads(take(hlen).decode())
    model = Model(header["layers"], header["input_shape"], header["feature_boundary"], header.get("seed", 0))
    params, buffers = model.parameters(), model.buffers()
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        arr = np.frombuffer(take(8 * int(np.prod(dims))), dtype="<f8").reshape(dims).astype(np.float64)
        if name in params:
            if params[name].shape != arr.shape:
                raise FormatError(f"parameter {name} shape {arr.shape} != {params[name].shape}")
            params[name].data = arr.copy()
        elif name in buffers:
            idx, bname = name.split(".", 1)
            model.layers[int(idx)].set_buffer(bname, arr)
        else:
            raise FormatError(f"unknown tensor {name!r} in checkpoint")
    if pos != len(buf):
        raise FormatError(f"trailing bytes after offset {pos}")
    return model.eval(), header.get("extra", {})
