"""Layer modules built on the functional ops."""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import InputError
from . import ops
from .engine import Tensor, default_dtype

# When not None, layers append one record per call: (kind, name, in_shape, out_shape, extra)
_profile: Optional[List[dict]] = None


@contextlib.contextmanager
def profile():
    """Collect per-layer call records (used by the FLOP counter)."""
    global _profile
    old, _profile = _profile, []
    try:
        yield _profile
    finally:
        _profile = old


def _record(kind, module, x, out, **extra):
    if _profile is not None:
        _profile.append(dict(kind=kind, name=module._name, in_shape=tuple(x.shape),
                             out_shape=tuple(out.shape), **extra))


def Parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


class Module:
    """Container with named parameters, numpy buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_name", "")

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, value: np.ndarray):
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def add(self, key: str, module: "Module") -> "Module":
        setattr(self, key, module)
        return module

    def named_modules(self, prefix="") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for k, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{k}" if prefix else k)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for name, mod in self.named_modules():
            for k in mod._params:
                yield (f"{name}.{k}" if name else k), getattr(mod, k)

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for name, mod in self.named_modules():
            for k in mod._buffers:
                yield (f"{name}.{k}" if name else k), getattr(mod, k)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, p in self.named_parameters():
            out[k] = p.data.copy()
        for k, b in self.named_buffers():
            out[k] = b.copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        bufs = {}
        for name, mod in self.named_modules():
            for k in mod._buffers:
                bufs[f"{name}.{k}" if name else k] = (mod, k)
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            extra = set(state) - (set(own) | set(bufs))
            if missing or extra:
                raise InputError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k in own:
                if own[k].shape != tuple(v.shape):
                    raise InputError(f"{k}: shape {tuple(v.shape)} != {own[k].shape}")
                own[k].data = np.array(v, dtype=own[k].dtype)
            elif k in bufs:
                mod, key = bufs[k]
                cur = mod._buffers[key]
                if cur.shape != tuple(v.shape):
                    raise InputError(f"{k}: shape {tuple(v.shape)} != {cur.shape}")
                cur[...] = v
        return self

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _assign_names(self):
        for name, mod in self.named_modules():
            object.__setattr__(mod, "_name", name)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Conv(Module):
    """2D or 3D convolution, chosen by the length of ``kernel``."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=False,
                 rng: Optional[np.random.Generator] = None, temporal_padding="zeros"):
        super().__init__()
        kernel = tuple(kernel)
        nd = len(kernel)
        if nd not in (2, 3) or min(kernel) < 1 or cin < 1 or cout < 1:
            raise InputError(f"bad conv geometry cin={cin} cout={cout} kernel={kernel}")
        self.stride = ops._tuple(stride, nd)
        self.padding = ops._tuple(padding, nd)
        self.temporal_padding = temporal_padding
        rng = rng or np.random.default_rng(0)
        fan_in = cin * int(np.prod(kernel))
        self.weight = Parameter(rng.normal(0, np.sqrt(2.0 / fan_in), (cout, cin) + kernel))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def forward(self, x):
        if self.weight.ndim == 5:
            out = ops.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.temporal_padding)
        else:
            out = ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        _record("conv", self, x, out, weight_shape=self.weight.shape, bias=self.bias is not None)
        return out


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x):
        out = ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)
        _record("bn", self, x, out)
        return out


class ReLU(Module):
    def forward(self, x):
        out = ops.relu(x)
        _record("relu", self, x, out)
        return out


class MaxPool(Module):
    def __init__(self, kernel, stride=None, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        out = ops.max_pool(x, self.kernel, self.stride, self.padding)
        _record("pool", self, x, out)
        return out


class GlobalAvgPool(Module):
    def forward(self, x):
        out = ops.global_avg_pool(x)
        _record("pool", self, x, out)
        return out


class Linear(Module):
    def __init__(self, cin, cout, rng=None, init_std=0.01):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0, init_std, (cout, cin)))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        out = ops.linear(x, self.weight, self.bias)
        _record("linear", self, x, out, weight_shape=self.weight.shape)
        return out
