"""Dense ReLU networks on flat float64 parameter vectors.

Everything here is a pure function of its inputs. A network is described by a
:class:`NetworkSpec` and its weights live in one contiguous :class:`ParamVector`
laid out layer by layer as ``W`` (row-major, shape ``(out, in)``) followed by ``b``.
That single layout is what gets averaged across clients and written to disk.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

ACTIVATIONS = ("linear", "tanh")

MAGIC = b"FEDP"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    output_activation: str = "linear"
    # bounded outputs are scale * tanh(z)
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if min(self.dims) < 1:
            raise ValueError(f"all layer widths must be >= 1, got {self.dims}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {ACTIVATIONS}")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @cached_property
    def layer_slices(self) -> tuple[tuple[slice, tuple[int, int], slice], ...]:
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            out.append((w, (fan_out, fan_in), b))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.layer_slices[-1][2].stop


@dataclass(frozen=True, eq=False)
class ParamVector:
    spec: NetworkSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.spec.n_params,):
            raise ShapeError(
                f"expected {self.spec.n_params} parameters for {self.spec.dims}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite entries")
        if values.flags.writeable:
            # private read-only copy so shared vectors can never be edited in place
            values = values.copy()
            values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into :attr:`values`, one pair per layer."""
        v = self.values
        return [(v[w].reshape(shape), v[b]) for w, shape, b in self.spec.layer_slices]

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, values)

    def __len__(self):
        return self.spec.n_params


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    values = np.empty(spec.n_params)
    for w, (fan_out, fan_in), b in spec.layer_slices:
        bound = 1.0 / np.sqrt(fan_in)
        values[w] = rng.uniform(-bound, bound, size=fan_out * fan_in)
        values[b] = rng.uniform(-bound, bound, size=fan_out)
    return ParamVector(spec, values)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each layer
    pre: list[np.ndarray]      # pre-activations of each layer
    output: np.ndarray


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} must have trailing dimension {dim}, got shape {x.shape}")
    return x, single


def forward_cached(params: ParamVector, x: np.ndarray) -> ForwardCache:
    """Batched forward pass keeping what the backward pass needs. ``x`` is ``(B, in)``."""
    spec = params.spec
    layers = params.layers()
    inputs, pre = [], []
    h = x
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
        elif spec.output_activation == "tanh":
            h = spec.output_scale * np.tanh(z)
        else:
            h = z
    return ForwardCache(inputs, pre, h)


def mlp_forward(params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or a ``(B, in)`` batch."""
    batch, single = _as_batch(x, params.spec.input_dim, "input")
    out = forward_cached(params, batch).output
    return out[0] if single else out


def mlp_backward(
    params: ParamVector,
    x,
    upstream_grad,
    cache: ForwardCache | None = None,
    param_grads: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Reverse-mode gradient of ``sum(upstream_grad * f(x))``.

    Returns ``(grad_params, grad_input)``; parameter gradients are summed over the
    batch and laid out like :attr:`ParamVector.values`. Pass the ``cache`` from
    :func:`forward_cached` to skip recomputing the forward pass, and
    ``param_grads=False`` when only the input gradient is wanted.
    """
    spec = params.spec
    batch, single = _as_batch(x, spec.input_dim, "input")
    dy, _ = _as_batch(upstream_grad, spec.output_dim, "upstream_grad")
    if dy.shape[0] != batch.shape[0]:
        raise ShapeError(f"batch size mismatch: input {batch.shape[0]}, upstream {dy.shape[0]}")
    if cache is None:
        cache = forward_cached(params, batch)

    layers = params.layers()
    grads = np.empty(spec.n_params) if param_grads else None
    if spec.output_activation == "tanh":
        t = np.tanh(cache.pre[-1])
        dz = dy * spec.output_scale * (1.0 - t * t)
    else:
        dz = dy
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if grads is not None:
            w_sl, shape, b_sl = spec.layer_slices[i]
            grads[w_sl] = (dz.T @ cache.inputs[i]).ravel()
            grads[b_sl] = dz.sum(axis=0)
        dh = dz @ W
        if i > 0:
            dz = dh * (cache.pre[i - 1] > 0.0)
    dx = dh[0] if single else dh
    return grads, dx


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(state: AdamState, params: ParamVector, grads) -> tuple[ParamVector, AdamState]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape or state.first_moment.shape != grads.shape:
        raise ShapeError(
            f"shape mismatch: params {params.values.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient; step aborted")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon
    )
    return params.with_values(new), new_state


def weighted_param_average(entries: Sequence[tuple[ParamVector, float]]) -> ParamVector:
    if not entries:
        raise ValueError("cannot average an empty list of parameter vectors")
    spec = entries[0][0].spec
    weights = np.array([float(w) for _, w in entries])
    if any(p.spec != spec for p, _ in entries):
        raise ShapeError("all parameter vectors must share one NetworkSpec")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError(f"weights must be finite and non-negative, got {weights}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 (got {weights.sum():.12g})")
    out = np.zeros(spec.n_params)
    for (p, _), w in zip(entries, weights):
        out += w * p.values
    return ParamVector(spec, out)


def _header(spec: NetworkSpec) -> bytes:
    dims = spec.dims
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack(f"<I{len(dims)}I", len(dims), *dims)


def serialize_params(params: ParamVector) -> bytes:
    return _header(params.spec) + params.values.astype("<f8").tobytes()


def deserialize_params(data: bytes, spec: NetworkSpec) -> ParamVector:
    if len(data) < 9 or data[:4] != MAGIC:
        raise ParseError("missing FEDP magic header")
    if data[4] != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {data[4]}")
    (n_dims,) = struct.unpack_from("<I", data, 5)
    head = 9 + 4 * n_dims
    if len(data) < head:
        raise ParseError("truncated header")
    dims = struct.unpack_from(f"<{n_dims}I", data, 9)
    if tuple(dims) != spec.dims:
        raise ParseError(f"payload dims {dims} do not match spec dims {spec.dims}")
    body = data[head:]
    if len(body) != 8 * spec.n_params:
        raise ParseError(f"expected {8 * spec.n_params} payload bytes, got {len(body)}")
    return ParamVector(spec, np.frombuffer(body, dtype="<f8").astype(np.float64))


def save_params(params: ParamVector, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_params(params))


def load_params(path, spec: NetworkSpec) -> ParamVector:
    with open(path, "rb") as f:
        return deserialize_params(f.read(), spec)
