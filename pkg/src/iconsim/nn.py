"""Network layers, model assembly and checkpoint serialization.

The model is a stack of convolutional blocks (conv -> batch norm ->
optional ReLU -> max pool) followed by fully-connected layers with
dropout in between; the final layer emits the embedding. Each layer is
one recorded autodiff op with a hand-written adjoint, all checked
against finite differences in the test suite.
"""

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnknownVersionError,
)
from .tensor import Tensor, record_op, _finish

CHECKPOINT_MAGIC = b"ICNW"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class ConvBlockSpec:
    """One conv -> batch-norm -> pool block."""

    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the four-block topology with 4096/1024 hidden
    fully-connected widths and a 256-dimensional embedding.
    """

    input_size: int = 180
    conv_blocks: list = field(
        default_factory=lambda: [ConvBlockSpec(c) for c in (32, 64, 128, 128)]
    )
    fc_sizes: list = field(default_factory=lambda: [4096, 1024])
    embedding_dim: int = 256
    dropout_rate: float = 0.30
    use_relu: bool = True
    l2_normalize_embedding: bool = False

    def __post_init__(self):
        self.conv_blocks = [
            b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b)
            for b in self.conv_blocks
        ]
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        if min(self.spatial_sizes()) < 1:
            raise ValueError(
                f"spatial size collapses below 1 (trace: {self.spatial_sizes()})"
            )

    def spatial_sizes(self):
        """Spatial side length after each block (conv then 2x2/2 pool)."""
        sizes = []
        s = self.input_size
        for blk in self.conv_blocks:
            s = (s + 2 * blk.padding - blk.kernel_size) // blk.stride + 1
            s = (s - 2) // 2 + 1 if s >= 2 else 0
            sizes.append(s)
        return sizes

    def flat_features(self):
        return self.conv_blocks[-1].out_channels * self.spatial_sizes()[-1] ** 2

    def parameter_count(self):
        n = 0
        c_in = 1
        for blk in self.conv_blocks:
            n += blk.out_channels * c_in * blk.kernel_size**2 + blk.out_channels
            n += 2 * blk.out_channels  # gamma, beta
            c_in = blk.out_channels
        width = self.flat_features()
        for w in list(self.fc_sizes) + [self.embedding_dim]:
            n += width * w + w
            width = w
        return n

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "conv_blocks": [
                {
                    "out_channels": b.out_channels,
                    "kernel_size": b.kernel_size,
                    "stride": b.stride,
                    "padding": b.padding,
                }
                for b in self.conv_blocks
            ],
            "fc_sizes": list(self.fc_sizes),
            "embedding_dim": self.embedding_dim,
            "dropout_rate": self.dropout_rate,
            "use_relu": self.use_relu,
            "l2_normalize_embedding": self.l2_normalize_embedding,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config() -> ModelConfig:
    """Small configuration for fast CPU experiments on 64 px corpora.

    Takes 58 px inputs -- the same 0.9 crop ratio the full model uses
    (180 from 200) applied to 64 px stored icons.
    """
    return ModelConfig(
        input_size=58,
        conv_blocks=[ConvBlockSpec(c) for c in (16, 32, 64, 64)],
        fc_sizes=[512, 128],
        embedding_dim=32,
    )


# ---------------------------------------------------------------------------
# layer ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Zero-padded cross-correlation of x[N,C,H,W] with weight[Cout,C,k,k]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight", x.shape, weight.shape)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d channel mismatch", x.shape, weight.shape)
    k = weight.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("padded input smaller than kernel", x.shape, weight.shape)
    out = Tensor(kernels.conv2d_forward(x.data, weight.data, bias.data, stride, padding))
    xd, wd = x.data, weight.data

    def bwd(g):
        dx, dw, db = kernels.conv2d_backward(xd, wd, stride, padding, g)
        return dx, dw, db

    record_op(out, (x, weight, bias), bwd)
    return _finish(out)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window max; gradient routes to the argmax (lowest index on ties)."""
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeError(f"maxpool window {window} exceeds input", x.shape)
    out_data, argmax = kernels.maxpool2d_forward(x.data, window, stride)
    out = Tensor(out_data)
    shape = x.shape
    record_op(out, (x,), lambda g: (kernels.maxpool2d_backward(shape, argmax, g),))
    return _finish(out)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over [N,C,H,W].

    Train mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place; eval mode uses the running
    statistics and is a pure affine map.
    """
    n, c, h, w = x.shape
    xd = x.data
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batch norm needs >= 2 elements per channel in train mode")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    elif mode == "eval":
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(
        (gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]).astype(
            xd.dtype, copy=False
        )
    )

    if mode == "train":
        m = n * h * w

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gmean = g.sum(axis=(0, 2, 3)) / m
            gx_mean = (g * xhat).sum(axis=(0, 2, 3)) / m
            dx = (gamma.data * inv_std)[None, :, None, None] * (
                g - gmean[None, :, None, None] - xhat * gx_mean[None, :, None, None]
            )
            return dx.astype(g.dtype, copy=False), dgamma, dbeta

    else:

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = (gamma.data * inv_std)[None, :, None, None] * g
            return dx.astype(g.dtype, copy=False), dgamma, dbeta

    record_op(out, (x, gamma, beta), bwd)
    return _finish(out)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x[N,in] @ weight[in,out] + bias[out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight", x.shape, weight.shape)
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError("linear shape mismatch", x.shape, weight.shape, bias.shape)
    out = Tensor(x.data @ weight.data + bias.data)
    xd, wd = x.data, weight.data
    record_op(out, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))
    return _finish(out)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    rescales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = Tensor(x.data * keep * factor)
    record_op(out, (x,), lambda g: (g * keep * factor,))
    return _finish(out)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of x[N,d] to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm
    out = Tensor(y.astype(xd.dtype, copy=False))

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm,)

    record_op(out, (x,), bwd)
    return _finish(out)


def flatten(x: Tensor) -> Tensor:
    return x.reshape((x.shape[0], int(np.prod(x.shape[1:]))))


# ---------------------------------------------------------------------------
# model


def _xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Model:
    """The embedding network: parameters plus the forward (embed) pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "Model":
        """Xavier-uniform initialization; identical seed, identical weights."""
        model = cls(config)
        rng = np.random.default_rng(seed)
        c_in = 1
        for i, blk in enumerate(config.conv_blocks):
            k = blk.kernel_size
            fan_in, fan_out = c_in * k * k, blk.out_channels * k * k
            model.params[f"conv{i}.weight"] = Tensor(
                _xavier_uniform(rng, (blk.out_channels, c_in, k, k), fan_in, fan_out),
                requires_grad=True,
            )
            model.params[f"conv{i}.bias"] = Tensor(
                np.zeros(blk.out_channels, dtype=np.float32), requires_grad=True
            )
            model.params[f"bn{i}.gamma"] = Tensor(
                np.ones(blk.out_channels, dtype=np.float32), requires_grad=True
            )
            model.params[f"bn{i}.beta"] = Tensor(
                np.zeros(blk.out_channels, dtype=np.float32), requires_grad=True
            )
            model.buffers[f"bn{i}.running_mean"] = np.zeros(blk.out_channels, dtype=np.float32)
            model.buffers[f"bn{i}.running_var"] = np.ones(blk.out_channels, dtype=np.float32)
            c_in = blk.out_channels
        width = config.flat_features()
        for i, w in enumerate(list(config.fc_sizes) + [config.embedding_dim]):
            model.params[f"fc{i}.weight"] = Tensor(
                _xavier_uniform(rng, (width, w), width, w), requires_grad=True
            )
            model.params[f"fc{i}.bias"] = Tensor(
                np.zeros(w, dtype=np.float32), requires_grad=True
            )
            width = w
        return model

    @property
    def embedding_dim(self):
        return self.config.embedding_dim

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All learned state (parameters then buffers), by unique name."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast (for 64-bit grad checks)."""
        other = Model(self.config)
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        for name, buf in self.buffers.items():
            other.buffers[name] = buf.astype(dtype)
        return other

    def embed(self, batch: Tensor, mode: str = "eval", rng=None) -> Tensor:
        """Forward pass from image batch [N,1,S,S] to embeddings [N,d]."""
        cfg = self.config
        if batch.data.ndim != 4 or batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
            raise ShapeError(
                f"expected input [N,1,{cfg.input_size},{cfg.input_size}]", batch.shape
            )
        x = batch
        for i, blk in enumerate(cfg.conv_blocks):
            x = conv2d(
                x,
                self.params[f"conv{i}.weight"],
                self.params[f"conv{i}.bias"],
                stride=blk.stride,
                padding=blk.padding,
            )
            x = batchnorm2d(
                x,
                self.params[f"bn{i}.gamma"],
                self.params[f"bn{i}.beta"],
                self.buffers[f"bn{i}.running_mean"],
                self.buffers[f"bn{i}.running_var"],
                mode=mode,
            )
            if cfg.use_relu:
                x = x.relu()
            x = maxpool2d(x, 2, 2)
        x = flatten(x)
        n_fc = len(cfg.fc_sizes) + 1
        for i in range(n_fc):
            x = linear(x, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            if i < n_fc - 1:
                if cfg.use_relu:
                    x = x.relu()
                x = dropout(x, cfg.dropout_rate, mode, rng)
        if cfg.l2_normalize_embedding:
            x = l2_normalize_rows(x)
        return x


def build_model(config: ModelConfig, seed: int) -> Model:
    return Model.build(config, seed)


# ---------------------------------------------------------------------------
# checkpoint IO


@dataclass
class Checkpoint:
    model: Model
    optimizer_state: Optional[dict] = None
    epoch: int = 0


def _write_tensor(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(struct.pack("<B", _TAGS_BY_DTYPE[arr.dtype]))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
    )
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _DTYPE_TAGS:
        raise UnknownVersionError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    return name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_checkpoint(model: Model, optimizer_state: Optional[dict], path, epoch: int = 0):
    """Serialize model (and optionally optimizer moments) bit-exactly."""
    arrays = dict(model.state_arrays())
    meta: dict = {"model": model.config.to_dict(), "epoch": int(epoch)}
    if optimizer_state is not None:
        meta["opt_step"] = int(optimizer_state["step"])
        for pname, m in optimizer_state["m"].items():
            arrays[f"opt.m.{pname}"] = m
        for pname, v in optimizer_state["v"].items():
            arrays[f"opt.v.{pname}"] = v
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_tensor(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    """Inverse of save_checkpoint; bad magic/version/truncation raise
    distinct errors."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise UnknownVersionError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if name in arrays:
                raise FormatError(f"duplicate tensor name {name!r}")
            arrays[name] = arr

    config = ModelConfig.from_dict(meta["model"])
    model = Model(config)
    opt_state = None
    if "opt_step" in meta:
        opt_state = {"step": int(meta["opt_step"]), "m": {}, "v": {}}
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            opt_state["m"][name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            opt_state["v"][name[len("opt.v.") :]] = arr
        elif name.startswith("bn") and ("running_mean" in name or "running_var" in name):
            model.buffers[name] = arr
        else:
            model.params[name] = Tensor(arr, requires_grad=True)
    return Checkpoint(model=model, optimizer_state=opt_state, epoch=int(meta["epoch"]))
