"""Network layers, weight initialization, the Adam optimizer, and checkpoints.

Weights are drawn from N(0, 0.02); biases start at zero. Adam defaults to
lr=1e-4, beta1=0.5, beta2=0.999, epsilon=1e-8.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BuildError, DimensionError
from .tensor import Tensor

WEIGHT_STD = 0.02


def _normal_init(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, WEIGHT_STD, size=shape)


def init_weights(shape, seed: int) -> Tensor:
    """A weight tensor sampled i.i.d. from N(0, 0.02) with a fixed seed."""
    if not shape:
        raise DimensionError("init_weights requires a non-empty shape")
    rng = np.random.default_rng(seed)
    return Tensor(_normal_init(rng, tuple(shape)), requires_grad=True)


@dataclass
class LayerSpec:
    """One layer of a sequential network.

    kind is one of dense | conv | conv_transpose | activation | reshape.
    Unused fields are ignored for a given kind.
    """

    kind: str
    units: int = 0            # dense output width
    channels: int = 0         # conv / conv_transpose output channels
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = ""      # for kind == "activation"
    slope: float = 0.2        # leaky_relu only
    shape: tuple = ()         # reshape target (per sample, -1 allowed once)


class _Dense:
    def __init__(self, in_dim, units, rng):
        self.w = Tensor(_normal_init(rng, (in_dim, units)), requires_grad=True)
        self.b = Tensor(np.zeros(units), requires_grad=True)

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class _Conv:
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng):
        self.k = Tensor(_normal_init(rng, (out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        y = T.conv2d(x, self.k, self.stride, self.padding)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return [("k", self.k), ("b", self.b)]


class _ConvTranspose:
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng):
        self.k = Tensor(_normal_init(rng, (in_ch, out_ch, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        y = T.conv2d_transpose(x, self.k, self.stride, self.padding)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return [("k", self.k), ("b", self.b)]


class _Activation:
    def __init__(self, name, slope):
        self.fn = T.ACTIVATIONS[name]
        self.name, self.slope = name, slope

    def __call__(self, x):
        if self.name == "leaky_relu":
            return self.fn(x, self.slope)
        return self.fn(x)

    def params(self):
        return []


class _Reshape:
    def __init__(self, shape):
        self.shape = tuple(shape)

    def __call__(self, x):
        return x.reshape((x.shape[0],) + self.shape)

    def params(self):
        return []


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _convt_out(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


class Network:
    """A sequential stack of layers; callable on a batched Tensor."""

    def __init__(self, layers, input_shape, output_shape):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)

    def __call__(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"network expects per-sample shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"layer{i}.{name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def build_network(specs, input_shape, seed: int) -> Network:
    """Assemble a Network from LayerSpecs, checking shape consistency.

    ``input_shape`` is the per-sample shape; an empty spec list yields the
    identity network. Layer parameters are seeded deterministically from
    ``seed``, one child stream per layer.
    """
    streams = np.random.SeedSequence(seed).spawn(max(len(specs), 1))
    layers = []
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        rng = np.random.default_rng(streams[i])
        where = f"layer {i} ({spec.kind})"
        if spec.kind == "dense":
            if len(shape) != 1:
                raise BuildError(f"{where}: dense needs a flat input, have {shape}")
            if spec.units < 1:
                raise BuildError(f"{where}: units must be positive")
            layers.append(_Dense(shape[0], spec.units, rng))
            shape = (spec.units,)
        elif spec.kind == "conv":
            if len(shape) != 3:
                raise BuildError(f"{where}: conv needs (C,H,W) input, have {shape}")
            c, h, w = shape
            oh = _conv_out(h, spec.kernel, spec.stride, spec.padding)
            ow = _conv_out(w, spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise BuildError(f"{where}: output collapses to {oh}x{ow}")
            layers.append(_Conv(c, spec.channels, spec.kernel, spec.stride, spec.padding, rng))
            shape = (spec.channels, oh, ow)
        elif spec.kind == "conv_transpose":
            if len(shape) != 3:
                raise BuildError(f"{where}: conv_transpose needs (C,H,W) input, have {shape}")
            c, h, w = shape
            oh = _convt_out(h, spec.kernel, spec.stride, spec.padding)
            ow = _convt_out(w, spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise BuildError(f"{where}: output collapses to {oh}x{ow}")
            layers.append(
                _ConvTranspose(c, spec.channels, spec.kernel, spec.stride, spec.padding, rng)
            )
            shape = (spec.channels, oh, ow)
        elif spec.kind == "activation":
            if spec.activation not in T.ACTIVATIONS:
                raise BuildError(f"{where}: unknown activation {spec.activation!r}")
            layers.append(_Activation(spec.activation, spec.slope))
        elif spec.kind == "reshape":
            target = list(spec.shape)
            n_elems = int(np.prod(shape))
            if target.count(-1) > 1:
                raise BuildError(f"{where}: at most one -1 allowed in reshape")
            if -1 in target:
                rest = int(np.prod([d for d in target if d != -1]))
                if rest == 0 or n_elems % rest:
                    raise BuildError(f"{where}: cannot reshape {shape} to {tuple(spec.shape)}")
                target[target.index(-1)] = n_elems // rest
            if int(np.prod(target)) != n_elems:
                raise BuildError(f"{where}: cannot reshape {shape} to {tuple(spec.shape)}")
            layers.append(_Reshape(target))
            shape = tuple(target)
        else:
            raise BuildError(f"{where}: unknown layer kind")
    return Network(layers, input_shape, shape)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, names):
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    def load_state_arrays(self, names, arrays, t):
        for i, name in enumerate(names):
            self.m[i] = np.array(arrays[f"{name}.m"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"{name}.v"], dtype=np.float64)
        self.t = int(t)


def adam_step(params, grads, state: Adam):
    """One Adam update, in place on ``params``; increments ``state.t`` by 1."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict = field(default_factory=dict)      # name -> ndarray
    meta: dict = field(default_factory=dict)        # json-serializable header
    optim: dict = field(default_factory=dict)       # opt name -> {"arrays": {...}, "t": int, hypers}


def save_checkpoint(path, params: dict, meta: dict, optim: dict | None = None):
    """Write parameters, a metadata header, and optimizer state to one .npz."""
    arrays = {f"p::{name}": np.asarray(val) for name, val in params.items()}
    optim = optim or {}
    opt_meta = {}
    for oname, o in optim.items():
        for aname, arr in o["arrays"].items():
            arrays[f"o::{oname}::{aname}"] = np.asarray(arr)
        opt_meta[oname] = {k: v for k, v in o.items() if k != "arrays"}
    header = dict(meta)
    header["__optim__"] = opt_meta
    arrays["meta"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    ck = Checkpoint()
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["meta"]))
        opt_meta = header.pop("__optim__", {})
        ck.meta = header
        ck.optim = {name: {"arrays": {}, **info} for name, info in opt_meta.items()}
        for key in data.files:
            if key.startswith("p::"):
                ck.params[key[3:]] = data[key]
            elif key.startswith("o::"):
                _, oname, aname = key.split("::", 2)
                ck.optim[oname]["arrays"][aname] = data[key]
    return ck
