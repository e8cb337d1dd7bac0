"""Parameter containers and the layers the architecture is built from.

Modules register parameters and submodules automatically on attribute
assignment. Parameter names are assigned once by ``finalize()`` on the root
module and encode the module path ("backbone.stage2.block0.conv1.weight"),
which the checkpoint format and the optimizer key on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Parameter:
    """A named, trainable tensor."""

    def __init__(self, data: np.ndarray, name: str = ""):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.tensor.shape})"


@dataclass
class ForwardCtx:
    """Per-forward runtime state: train/eval switch plus the dropout seed.

    Dropout masks are seeded from (seed, op_id, step) so they depend only on
    the module's position in the tree and the training step, never on
    evaluation order.
    """

    train: bool = False
    seed: int = 0
    step: int = 0

    def dropout_rng(self, op_id: int) -> np.random.Generator | None:
        if not self.train:
            return None
        return np.random.default_rng(np.random.SeedSequence([self.seed, op_id, self.step]))


EVAL_CTX = ForwardCtx(train=False)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        """Non-trainable state saved with checkpoints (e.g. running stats)."""
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        if key not in self._buffers:
            raise KeyError(key)
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        """Yield (path, owning module, attribute key) for every buffer."""
        for key in self._buffers:
            yield (f"{prefix}{key}", self, key)
        for key, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    def finalize(self):
        """Assign hierarchical names and dropout op-ids; check uniqueness."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ConfigError(f"duplicate parameter name: {name}")
            seen.add(name)
            p.name = name
        op_id = 0
        for m in self.modules():
            if isinstance(m, Dropout):
                m.op_id = op_id
                op_id += 1
        return self

    def to_dtype(self, dtype):
        """Convert all parameters and buffers (for 64-bit gradient checks)."""
        for p in self.parameters():
            p.tensor.data = p.tensor.data.astype(dtype)
        for m in self.modules():
            for key, val in list(m._buffers.items()):
                if isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    m.set_buffer(key, val.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.tensor.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for item in items:
            self.append(item)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# initializers -------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# layers --------------------------------------------------------------------


class Conv2d(Module):
    """3x3/1x1 convolution with He fan-in init."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return T.conv2d(x, self.weight.tensor, b, self.stride, self.padding)


class Linear(Module):
    """Affine map on the last axis, Xavier-uniform init (attention/FFN)."""

    def __init__(self, cin: int, cout: int, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, (cin, cout), cin, cout, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.tensor
        if self.bias is not None:
            out = out + self.bias.tensor
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True).expand(x.shape)
        d = x - mu
        var = (d * d).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return d * inv.expand(x.shape) * self.gamma.tensor + self.beta.tensor


def _group_count(channels: int, max_groups: int = 8) -> int:
    # min(8, channels), reduced to the largest divisor when channels is not
    # a multiple (keeps odd widths usable).
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class GroupNorm(Module):
    """Per-sample normalization over channel groups; default backbone norm."""

    def __init__(self, channels: int, max_groups: int = 8, eps: float = 1e-5, *,
                 dtype=np.float32):
        super().__init__()
        self.groups = _group_count(channels, max_groups)
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"GroupNorm: expected [B,{self.channels},H,W], got {x.shape}")
        B, C, H, W = x.shape
        G = self.groups
        xg = x.reshape(B, G, (C // G) * H * W)
        mu = xg.mean(axis=-1, keepdims=True).expand(xg.shape)
        d = xg - mu
        var = (d * d).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        xn = (d * inv.expand(xg.shape)).reshape(B, C, H, W)
        gamma = self.gamma.tensor.reshape(C, 1, 1).expand(C, H, W)
        beta = self.beta.tensor.reshape(C, 1, 1).expand(C, H, W)
        return xn * gamma + beta


class BatchNorm2d(Module):
    """Classic batch norm; optional backbone norm behind the config flag.

    Uses batch statistics in train mode and running statistics in eval.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, *,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"BatchNorm2d: expected [B,{self.channels},H,W], got {x.shape}")
        B, C, H, W = x.shape
        if train:
            xt = x.transpose(1, 0, 2, 3).reshape(C, B * H * W)
            mu = xt.mean(axis=-1, keepdims=True)
            d = xt - mu.expand(xt.shape)
            var = (d * d).mean(axis=-1, keepdims=True)
            m = self.momentum
            self.set_buffer("running_mean",
                            ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(x.dtype))
            self.set_buffer("running_var",
                            ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(x.dtype))
            inv = (var + self.eps) ** -0.5
            xn = (d * inv.expand(xt.shape)).reshape(C, B, H, W).transpose(1, 0, 2, 3)
        else:
            mu = np.broadcast_to(self.running_mean.reshape(C, 1, 1), (C, H, W))
            inv = np.broadcast_to(
                (1.0 / np.sqrt(self.running_var + self.eps)).reshape(C, 1, 1), (C, H, W)
            )
            xn = (x - Tensor(mu.copy())) * Tensor(inv.copy())
        gamma = self.gamma.tensor.reshape(C, 1, 1).expand(C, H, W)
        beta = self.beta.tensor.reshape(C, 1, 1).expand(C, H, W)
        return xn * gamma + beta


class Dropout(Module):
    """Counter-seeded dropout; op_id is assigned by Module.finalize()."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0,1), got {p}")
        self.p = p
        self.op_id = -1

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        return T.dropout(x, self.p, ctx.dropout_rng(self.op_id))
