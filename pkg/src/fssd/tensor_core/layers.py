"""Parameter-owning wrappers around the functional kernels."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Container with dotted parameter names.

    Subclasses assign ``Tensor`` parameters, numpy buffers (registered in
    ``_buffers``) and child modules as attributes; naming follows the
    attribute path, e.g. ``backbone.stage0.conv1.weight``.
    """

    training: bool = True

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        """Every persistent array (parameters and buffers) by name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(
        self,
        in_c: int,
        out_c: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        dtype=np.float64,
        bias: bool = True,
    ):
        super().__init__()
        if in_c < 1 or out_c < 1:
            raise ValueError(f"conv widths must be positive, got {in_c}->{out_c}")
        self.weight = Tensor(F.xavier_uniform(rng, (out_c, in_c, k, k), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    @property
    def params(self) -> F.ConvParams:
        return F.ConvParams(self.weight, self.bias, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.params)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9, dtype=np.float64):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def params(self) -> F.BatchNormParams:
        return F.BatchNormParams(
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.eps,
            self.momentum,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.params, self.training)
