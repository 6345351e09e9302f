"""Parameter containers for the trainable modules.

A Module tracks parameter Tensors and sub-modules by attribute name, which
gives checkpointing a stable flat namespace (dots join the path).  All
initializers draw from an explicit numpy Generator so training runs are
reproducible from a seed.
"""

import numpy as np

from . import tensor as T
from .conv import conv2d


class Module:
    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def param(rng, shape, scale, dtype=np.float32):
    return T.Tensor(
        (rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True
    )


def zeros_param(shape, dtype=np.float32):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32):
        self.weight = param(rng, (d_in, d_out), np.sqrt(2.0 / d_in), dtype)
        self.bias = zeros_param((d_out,), dtype)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0,
                 circular_w=False, dtype=np.float32, init_scale=None):
        fan_in = c_in * k * k
        scale = np.sqrt(2.0 / fan_in) if init_scale is None else init_scale
        self.weight = param(rng, (c_out, c_in, k, k), scale, dtype)
        self.bias = zeros_param((c_out,), dtype)
        self.stride = stride
        self.padding = padding
        self.circular_w = circular_w

    def __call__(self, x):
        return conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            circular_w=self.circular_w,
        )


class Embedding(Module):
    def __init__(self, rng, vocab, dim, dtype=np.float32):
        self.table = param(rng, (vocab, dim), 0.02, dtype)

    def __call__(self, indices):
        return T.embedding_lookup(self.table, indices)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gamma = T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((dim,), dtype)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)
