"""Parameter containers, layers and the AdamW optimizer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Base class; parameters are discovered from attributes recursively."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise T.DimensionError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, init="fan_in"):
        if init == "xavier":
            w = xavier_uniform(rng, (n_in, n_out), n_in, n_out)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            w = uniform_fan_in(rng, (n_in, n_out), n_in)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out) if init in ("xavier", "zeros") else uniform_fan_in(rng, n_out, n_in)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=True):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        fan_in = kh * kw * c_in
        self.weight = parameter(uniform_fan_in(rng, (kh, kw, c_in, c_out), fan_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Stack of linear layers with relu between them."""

    def __init__(self, rng, dims):
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class AdamW:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4, max_grad_norm=None):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def grad_norm(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return np.sqrt(total)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        state = {"step": np.array(float(self.step_count))}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float64)
