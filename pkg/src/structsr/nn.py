"""Minimal layer containers on top of the autodiff tensors.

Modules auto-register child modules and parameter tensors on attribute
assignment, so ``named_parameters`` / ``state_dict`` walk the whole tree.
Non-learnable persistent arrays (e.g. spectral-norm power-iteration vectors)
are registered explicitly as buffers and travel with the state dict.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict, strict: bool = True):
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        missing = (set(own_params) | set(own_bufs)) - set(state)
        unexpected = set(state) - set(own_params) - set(own_bufs)
        if strict and (missing or unexpected):
            raise ValueError(
                f"state dict mismatch: missing={sorted(missing)} "
                f"unexpected={sorted(unexpected)}"
            )
        for name, p in own_params.items():
            if name not in state:
                continue
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != expected {tuple(p.shape)}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)
        for name in own_bufs:
            if name in state:
                self._assign_buffer(name, state[name])

    def _assign_buffer(self, dotted: str, arr: np.ndarray):
        mod = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            mod = mod._modules[part]
        mod._buffers[parts[-1]] = arr.astype(mod._buffers[parts[-1]].dtype, copy=True)
        object.__setattr__(mod, parts[-1], mod._buffers[parts[-1]])


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._list))] = m
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def kaiming_std(fan_in: int, slope: float = 0.2) -> float:
    return math.sqrt(2.0 / (1.0 + slope * slope)) / math.sqrt(fan_in)


class Conv2d(Module):
    """3x3-style conv layer; padding defaults to 'same' for odd kernels.

    ``weight_scale`` rescales the Kaiming init (0.1 on the residual-emitting
    convs keeps deep RRDB stacks stable at the start of training).
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=True,
                 *, rng, dtype=np.float32, weight_scale=1.0, slope=0.2,
                 spectral_norm=False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        std = kaiming_std(in_ch * kernel * kernel, slope) * weight_scale
        self.weight = Tensor(
            rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std,
            requires_grad=True, dtype=dtype,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype) if bias else None
        self.use_sn = spectral_norm
        if spectral_norm:
            u = rng.standard_normal(out_ch)
            self.register_buffer("sn_u", (u / np.linalg.norm(u)).astype(dtype))

    def effective_weight(self) -> Tensor:
        if not self.use_sn:
            return self.weight
        w2 = self.weight.data.reshape(self.weight.shape[0], -1)
        u = self.sn_u
        if self.training:
            v = w2.T @ u
            v /= np.linalg.norm(v) + 1e-12
            u = w2 @ v
            u /= np.linalg.norm(u) + 1e-12
            self.sn_u[...] = u
        else:
            v = w2.T @ u
            v /= np.linalg.norm(v) + 1e-12
        sigma = float(u @ (w2 @ v))
        return self.weight * (1.0 / max(sigma, 1e-12))

    def sn_sigma_estimate(self, iters: int = 3) -> float:
        """Power-iteration estimate of the effective weight's top singular value.

        Pure: uses a copy of the stored iteration vector.
        """
        w2 = self.weight.data.reshape(self.weight.shape[0], -1)
        u = self.sn_u.copy()
        v = w2.T @ u
        v /= np.linalg.norm(v) + 1e-12
        sigma = float(u @ (w2 @ v))
        weff = w2 / max(sigma, 1e-12)
        for _ in range(iters):
            v = weff.T @ u
            v /= np.linalg.norm(v) + 1e-12
            u = weff @ v
            est = np.linalg.norm(u)
            u /= est + 1e-12
        return float(est)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.effective_weight(), self.bias,
                         stride=self.stride, padding=self.padding)

    __call__ = forward


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, *, rng,
                 dtype=np.float32, spectral_norm=False):
        super().__init__()
        std = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(
            rng.standard_normal((in_features, out_features)) * std,
            requires_grad=True, dtype=dtype,
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype) if bias else None
        self.use_sn = spectral_norm
        if spectral_norm:
            u = rng.standard_normal(out_features)
            self.register_buffer("sn_u", (u / np.linalg.norm(u)).astype(dtype))

    def effective_weight(self) -> Tensor:
        if not self.use_sn:
            return self.weight
        w2 = self.weight.data.T  # (out, in)
        u = self.sn_u
        if self.training:
            v = w2.T @ u
            v /= np.linalg.norm(v) + 1e-12
            u = w2 @ v
            u /= np.linalg.norm(u) + 1e-12
            self.sn_u[...] = u
        else:
            v = w2.T @ u
            v /= np.linalg.norm(v) + 1e-12
        sigma = float(u @ (w2 @ v))
        return self.weight * (1.0 / max(sigma, 1e-12))

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.effective_weight()
        if self.bias is not None:
            out = out + self.bias
        return out

    __call__ = forward
