"""Dense-network substrate: MLP forward/backward, Adam, Polyak, checkpoints.

Architecture per hidden layer: affine -> LayerNorm (mean 0 / variance 1
over the layer, then learned scale and shift) -> ReLU. The output layer
is affine, optionally followed by tanh scaled per coordinate so outputs
never exceed +/- output_scale.

Everything is float64. `backward` returns exact reverse-mode gradients
of <upstream, output>, checkable against central finite differences.
ReLU uses subgradient 0 at exactly zero pre-activation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

LAYERNORM_EPS = 1e-5

_MAGIC = b"BTNC"
_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, mismatched, or unsupported checkpoint file."""


@dataclass
class Mlp:
    """Parameter container; `layer_sizes` = (n_in, hidden..., n_out)."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_scale: list[np.ndarray]
    ln_shift: list[np.ndarray]
    output_scale: np.ndarray | None = None

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Canonical parameter list: per hidden layer (W, b, scale, shift),
        then the output (W, b). Order matches `backward` gradients."""
        out: list[np.ndarray] = []
        n_hidden = len(self.weights) - 1
        for l in range(n_hidden):
            out += [self.weights[l], self.biases[l], self.ln_scale[l], self.ln_shift[l]]
        out += [self.weights[-1], self.biases[-1]]
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            layer_sizes=self.layer_sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            ln_scale=[g.copy() for g in self.ln_scale],
            ln_shift=[s.copy() for s in self.ln_shift],
            output_scale=None if self.output_scale is None else self.output_scale.copy(),
        )


def mlp_init(
    layer_sizes: tuple[int, ...],
    rng: np.random.Generator,
    *,
    output_scale: np.ndarray | None = None,
    final_init_scale: float | None = None,
) -> Mlp:
    """Uniform fan-in init; `final_init_scale` overrides the output layer
    span (small values start a tanh-scaled actor near zero action)."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases, ln_scale, ln_shift = [], [], [], []
    n_layers = len(layer_sizes) - 1
    for l in range(n_layers):
        fan_in = layer_sizes[l]
        span = 1.0 / np.sqrt(fan_in)
        if l == n_layers - 1 and final_init_scale is not None:
            span = final_init_scale
        weights.append(rng.uniform(-span, span, size=(layer_sizes[l + 1], fan_in)))
        biases.append(np.zeros(layer_sizes[l + 1]))
        if l < n_layers - 1:
            ln_scale.append(np.ones(layer_sizes[l + 1]))
            ln_shift.append(np.zeros(layer_sizes[l + 1]))
    if output_scale is not None:
        output_scale = np.asarray(output_scale, dtype=float)
        if output_scale.shape != (layer_sizes[-1],):
            raise ValueError("output_scale must have one bound per output")
        if not np.all(np.isfinite(output_scale)) or np.any(output_scale <= 0.0):
            raise ValueError("output_scale must be finite and positive")
    return Mlp(
        layer_sizes=tuple(layer_sizes),
        weights=weights,
        biases=biases,
        ln_scale=ln_scale,
        ln_shift=ln_shift,
        output_scale=output_scale,
    )


@dataclass
class _Cache:
    x_in: list[np.ndarray] = field(default_factory=list)   # input to each affine
    ahat: list[np.ndarray] = field(default_factory=list)   # normalized pre-scale
    inv_std: list[np.ndarray] = field(default_factory=list)
    h: list[np.ndarray] = field(default_factory=list)      # pre-ReLU
    tanh_val: np.ndarray | None = None
    squeeze: bool = False


def _forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    x = np.asarray(x, dtype=float)
    cache = _Cache()
    if x.ndim == 1:
        x = x[None, :]
        cache.squeeze = True
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ValueError(f"input must have {net.n_in} features, got shape {x.shape}")

    n_hidden = len(net.weights) - 1
    for l in range(n_hidden):
        cache.x_in.append(x)
        a = x @ net.weights[l].T + net.biases[l]
        mean = a.mean(axis=1, keepdims=True)
        var = ((a - mean) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        ahat = (a - mean) * inv
        h = ahat * net.ln_scale[l] + net.ln_shift[l]
        cache.ahat.append(ahat)
        cache.inv_std.append(inv)
        cache.h.append(h)
        x = np.maximum(h, 0.0)

    cache.x_in.append(x)
    y = x @ net.weights[-1].T + net.biases[-1]
    if net.output_scale is not None:
        th = np.tanh(y)
        cache.tanh_val = th
        y = th * net.output_scale
    return y, cache


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector (n_in,) or batch (B, n_in)."""
    y, cache = _forward(net, x)
    return y[0] if cache.squeeze else y


def backward(
    net: Mlp, x: np.ndarray, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of sum(upstream * forward(net, x)) w.r.t. params and input.

    Parameter gradients come back in `Mlp.params()` order, summed over the
    batch. The second return value is the input gradient, matching x's shape.
    """
    y, cache = _forward(net, x)
    upstream = np.asarray(upstream, dtype=float)
    if cache.squeeze:
        upstream = upstream[None, :]
    if upstream.shape != y.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output {y.shape}")
    return _backward_from_cache(net, cache, upstream)


def _backward_from_cache(
    net: Mlp, cache: _Cache, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    dy = upstream
    if net.output_scale is not None:
        dy = dy * net.output_scale * (1.0 - cache.tanh_val**2)

    x_last = cache.x_in[-1]
    dW_out = dy.T @ x_last
    db_out = dy.sum(axis=0)
    dx = dy @ net.weights[-1]

    n_hidden = len(net.weights) - 1
    grads_hidden: list[list[np.ndarray]] = []
    for l in range(n_hidden - 1, -1, -1):
        dh = dx * (cache.h[l] > 0.0)
        dscale = (dh * cache.ahat[l]).sum(axis=0)
        dshift = dh.sum(axis=0)
        dahat = dh * net.ln_scale[l]
        m1 = dahat.mean(axis=1, keepdims=True)
        m2 = (dahat * cache.ahat[l]).mean(axis=1, keepdims=True)
        da = cache.inv_std[l] * (dahat - m1 - cache.ahat[l] * m2)
        dW = da.T @ cache.x_in[l]
        db = da.sum(axis=0)
        dx = da @ net.weights[l]
        grads_hidden.append([dW, db, dscale, dshift])

    grads: list[np.ndarray] = []
    for item in reversed(grads_hidden):
        grads += item
    grads += [dW_out, db_out]
    if cache.squeeze:
        dx = dx[0]
    return grads, dx


def forward_with_cache(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    """Forward pass that keeps the activations for a later backward call."""
    return _forward(net, x)


def backward_from_cache(
    net: Mlp, cache: _Cache, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    if cache.squeeze:
        upstream = np.asarray(upstream, dtype=float)[None, :]
    return _backward_from_cache(net, cache, upstream)


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam update, applied to `params` in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state lengths differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
    state.step += 1
    lr = state.learning_rate
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def polyak(target: list[np.ndarray], online: list[np.ndarray], tau: float) -> None:
    """theta' <- tau * theta + (1 - tau) * theta', elementwise in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for tp, op in zip(target, online):
        tp *= 1.0 - tau
        tp += tau * op


# --- checkpoint container -------------------------------------------------
#
# Layout: magic | u16 version | u64 header length | JSON header | payload |
# sha256(header + payload). The header lists array names/shapes and carries
# free-form metadata; the payload is the arrays as little-endian float64 in
# header order.


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    names = list(arrays.keys())
    header = {
        "format_version": _FORMAT_VERSION,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "meta": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names
    )
    digest = hashlib.sha256(header_bytes + payload).digest()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(digest)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[6:14])
    header_bytes = blob[14 : 14 + hlen]
    payload = blob[14 + hlen : -32]
    digest = blob[-32:]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    header = json.loads(header_bytes.decode("utf-8"))
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError("header format_version disagrees with container")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointError("payload shorter than the header promises")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(float)
        )
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("payload longer than the header promises")
    return arrays, header["meta"]


def _mlp_arrays(net: Mlp, prefix: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    n_hidden = len(net.weights) - 1
    for l in range(n_hidden):
        out[f"{prefix}w{l}"] = net.weights[l]
        out[f"{prefix}b{l}"] = net.biases[l]
        out[f"{prefix}g{l}"] = net.ln_scale[l]
        out[f"{prefix}s{l}"] = net.ln_shift[l]
    out[f"{prefix}w_out"] = net.weights[-1]
    out[f"{prefix}b_out"] = net.biases[-1]
    if net.output_scale is not None:
        out[f"{prefix}output_scale"] = net.output_scale
    return out


def mlp_to_arrays(net: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    return _mlp_arrays(net, prefix)


def mlp_from_arrays(
    arrays: dict[str, np.ndarray], layer_sizes: tuple[int, ...], prefix: str = ""
) -> Mlp:
    layer_sizes = tuple(int(s) for s in layer_sizes)
    n_layers = len(layer_sizes) - 1
    weights, biases, ln_scale, ln_shift = [], [], [], []
    try:
        for l in range(n_layers - 1):
            weights.append(arrays[f"{prefix}w{l}"])
            biases.append(arrays[f"{prefix}b{l}"])
            ln_scale.append(arrays[f"{prefix}g{l}"])
            ln_shift.append(arrays[f"{prefix}s{l}"])
        weights.append(arrays[f"{prefix}w_out"])
        biases.append(arrays[f"{prefix}b_out"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing array {exc}") from exc
    for l in range(n_layers):
        expect = (layer_sizes[l + 1], layer_sizes[l])
        if weights[l].shape != expect:
            raise CheckpointError(
                f"layer {l} weight shape {weights[l].shape} does not match "
                f"declared layer sizes {layer_sizes}"
            )
    output_scale = arrays.get(f"{prefix}output_scale")
    if output_scale is not None and output_scale.shape != (layer_sizes[-1],):
        raise CheckpointError("output_scale shape does not match output layer")
    return Mlp(
        layer_sizes=layer_sizes,
        weights=[w.copy() for w in weights],
        biases=[b.copy() for b in biases],
        ln_scale=[g.copy() for g in ln_scale],
        ln_shift=[s.copy() for s in ln_shift],
        output_scale=None if output_scale is None else output_scale.copy(),
    )


def save_mlp(path, net: Mlp, meta: dict | None = None) -> None:
    full_meta = dict(meta or {})
    full_meta["layer_sizes"] = list(net.layer_sizes)
    save_arrays(path, _mlp_arrays(net, ""), full_meta)


def load_mlp(path) -> tuple[Mlp, dict]:
    arrays, meta = load_arrays(path)
    if "layer_sizes" not in meta:
        raise CheckpointError("checkpoint metadata lacks layer_sizes")
    net = mlp_from_arrays(arrays, tuple(meta["layer_sizes"]), "")
    return net, meta
