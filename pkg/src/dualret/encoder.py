"""Shared-tower text encoder with an analytic backward pass.

The tower maps a padded token-id matrix to unit-norm embeddings of a fixed
``bottleneck_dim``:

    token embedding (+ sinusoidal positions) -> ``num_layers`` blocks
    -> masked mean pooling -> linear projection -> L2 normalisation

``arch="transformer"`` uses pre-LN self-attention blocks with a GELU FFN.
``arch="bag_mlp"`` pools the raw embeddings first and then applies
``num_layers`` residual MLP blocks; it is the cheap twin used in fast tests.
The same parameters encode queries and documents.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .tokenizer import PAD_ID, TokenSequence

logger = logging.getLogger(__name__)

LN_EPS = 1e-6
MASK_BIAS = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)

# Desk-scale mirror of the Base / Large / XL / XXL sizes: (num_layers, model_dim).
DESK_SWEEP = ((2, 64), (4, 128), (6, 256), (8, 384))


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    model_dim: int = 64
    ffn_dim: int = 256
    num_layers: int = 2
    num_heads: int = 4
    bottleneck_dim: int = 64
    max_len: int = 512
    arch: str = "transformer"

    def __post_init__(self):
        if self.arch not in ("transformer", "bag_mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        for name in ("vocab_size", "model_dim", "ffn_dim", "bottleneck_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.arch == "transformer" and (self.num_heads < 1 or self.model_dim % self.num_heads):
            raise ValueError(f"num_heads={self.num_heads} must divide model_dim={self.model_dim}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    @classmethod
    def desk_scale(cls, size: int, vocab_size: int, bottleneck_dim: int = 64, **kw) -> "EncoderConfig":
        """Config ``size`` (0..3) of the default sweep; FFN is 4x model width."""
        layers, dim = DESK_SWEEP[size]
        return cls(vocab_size=vocab_size, model_dim=dim, ffn_dim=4 * dim, num_layers=layers,
                   num_heads=max(1, dim // 32), bottleneck_dim=bottleneck_dim, **kw)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable array, in canonical order."""
    d, f = config.model_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    for layer in range(config.num_layers):
        p = f"layer{layer}."
        if config.arch == "transformer":
            shapes.update({
                p + "ln1.gain": (d,), p + "ln1.bias": (d,),
                p + "attn.q": (d, d), p + "attn.k": (d, d), p + "attn.v": (d, d), p + "attn.o": (d, d),
                p + "ln2.gain": (d,), p + "ln2.bias": (d,),
                p + "ffn.w1": (d, f), p + "ffn.w2": (f, d),
            })
        else:
            shapes.update({
                p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
                p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
            })
    shapes["proj"] = (d, config.bottleneck_dim)
    return shapes


def count_params(config: EncoderConfig) -> int:
    d, f = config.model_dim, config.ffn_dim
    if config.arch == "transformer":
        per_layer = 4 * d * d + 2 * d * f + 4 * d
    else:
        per_layer = 2 * d * f + f + d
    return config.vocab_size * d + config.num_layers * per_layer + d * config.bottleneck_dim


def _truncated_normal(rng, shape, std, dtype):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated normal (2 sigma) weights with std 1/sqrt(fan_in).

    Embedding rows are a one-hot lookup, so their fan-in is 1. Layer-norm gains
    start at one and all biases at zero.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = 1 if name == "embed" else shape[0]
            params[name] = _truncated_normal(rng, shape, 1.0 / math.sqrt(fan_in), dtype)
    return params


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def as_id_matrix(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        ids = batch
    else:
        batch = list(batch)
        if batch and isinstance(batch[0], TokenSequence):
            lens = {len(s.ids) for s in batch}
            if len(lens) > 1:
                raise ValueError(f"sequences in a batch must share max_len, got {sorted(lens)}")
            ids = np.stack([s.ids for s in batch])
        else:
            ids = np.asarray(batch)
    if ids.ndim != 2:
        raise ValueError(f"expected a [batch, length] id matrix, got shape {ids.shape}")
    return ids.astype(np.int64, copy=False)


def _layer_norm(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x))


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attention(a, params, p, heads, key_bias):
    q = _split_heads(a @ params[p + "attn.q"], heads)
    k = _split_heads(a @ params[p + "attn.k"], heads)
    v = _split_heads(a @ params[p + "attn.v"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
    scores -= scores.max(-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(-1, keepdims=True)
    ctx = _merge_heads(probs @ v)
    return ctx @ params[p + "attn.o"], (a, q, k, v, probs, ctx, scale)


def _attention_backward(dout, params, p, heads, cache, grads):
    a, q, k, v, probs, ctx, scale = cache
    grads[p + "attn.o"] += _flat(ctx).T @ _flat(dout)
    dctx = _split_heads(dout @ params[p + "attn.o"].T, heads)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    da = 0.0
    for name, dx in (("attn.q", dq), ("attn.k", dk), ("attn.v", dv)):
        dx = _merge_heads(dx)
        grads[p + name] += _flat(a).T @ _flat(dx)
        da = da + dx @ params[p + name].T
    return da


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _check_ids(ids, config):
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = int(ids.max()) if ids.max() >= config.vocab_size else int(ids.min())
        raise ValueError(f"token id {bad} outside [0, {config.vocab_size})")
    if ids.shape[1] > config.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds config.max_len={config.max_len}")


def encode_forward(params, config: EncoderConfig, batch):
    """Return (embeddings [B, bottleneck_dim], cache for ``encode_backward``)."""
    ids = as_id_matrix(batch)
    _check_ids(ids, config)
    dtype = params["embed"].dtype
    mask = (ids != PAD_ID).astype(dtype)
    lengths = mask.sum(1)
    denom = np.maximum(lengths, 1.0)[:, None]
    cache = {"ids": ids, "mask": mask, "denom": denom, "layers": []}

    h = params["embed"][ids]
    if config.arch == "transformer":
        if config.num_layers:
            h = h + sinusoidal_positions(ids.shape[1], config.model_dim, dtype)
        key_bias = ((1.0 - mask) * MASK_BIAS)[:, None, None, :].astype(dtype)
        for layer in range(config.num_layers):
            p = f"layer{layer}."
            a, ln1 = _layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
            att, att_cache = _attention(a, params, p, config.num_heads, key_bias)
            h = h + att
            c, ln2 = _layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
            u = c @ params[p + "ffn.w1"]
            g, t = _gelu(u)
            h = h + g @ params[p + "ffn.w2"]
            cache["layers"].append((ln1, att_cache, ln2, c, u, g, t))
        pooled = (h * mask[:, :, None]).sum(1) / denom
    else:
        pooled = (h * mask[:, :, None]).sum(1) / denom
        for layer in range(config.num_layers):
            p = f"layer{layer}."
            u = pooled @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
            g, t = _gelu(u)
            cache["layers"].append((pooled, u, g, t))
            pooled = pooled + g @ params[p + "mlp.w2"] + params[p + "mlp.b2"]

    z = pooled @ params["proj"]
    norms = np.sqrt((z * z).sum(1, keepdims=True))
    zero = norms[:, 0] == 0
    out = z / np.where(norms == 0, 1.0, norms)
    if zero.any():
        logger.warning("%d rows projected to the zero vector; using the first basis vector", int(zero.sum()))
        out[zero] = 0.0
        out[zero, 0] = 1.0
    cache.update(pooled=pooled, out=out, norms=norms, zero=zero)
    return out, cache


def encode_batch(params, config: EncoderConfig, batch) -> np.ndarray:
    """Unit-norm embeddings for a batch of token sequences (or an id matrix)."""
    return encode_forward(params, config, batch)[0]


def encode_backward(params, config: EncoderConfig, batch, upstream_grad, cache=None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream_grad * encode_batch(...))`` for every parameter."""
    if cache is None:
        _, cache = encode_forward(params, config, batch)
    out, norms = cache["out"], cache["norms"]
    upstream_grad = np.asarray(upstream_grad, dtype=out.dtype)
    if upstream_grad.shape != out.shape:
        raise ValueError(f"upstream gradient shape {upstream_grad.shape} != output shape {out.shape}")
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dz = (upstream_grad - out * (out * upstream_grad).sum(1, keepdims=True)) / np.where(norms == 0, 1.0, norms)
    dz[cache["zero"]] = 0.0
    pooled = cache["pooled"]
    grads["proj"] += pooled.T @ dz
    dpooled = dz @ params["proj"].T

    ids, mask, denom = cache["ids"], cache["mask"], cache["denom"]
    if config.arch == "transformer":
        dh = (dpooled / denom)[:, None, :] * mask[:, :, None]
        for layer in reversed(range(config.num_layers)):
            p = f"layer{layer}."
            ln1, att_cache, ln2, c, u, g, t = cache["layers"][layer]
            grads[p + "ffn.w2"] += _flat(g).T @ _flat(dh)
            du = _gelu_backward(dh @ params[p + "ffn.w2"].T, u, t)
            grads[p + "ffn.w1"] += _flat(c).T @ _flat(du)
            dc = du @ params[p + "ffn.w1"].T
            dx, dgain, dbias = _layer_norm_backward(dc, params[p + "ln2.gain"], ln2)
            grads[p + "ln2.gain"] += dgain
            grads[p + "ln2.bias"] += dbias
            dh = dh + dx
            da = _attention_backward(dh, params, p, config.num_heads, att_cache, grads)
            dx, dgain, dbias = _layer_norm_backward(da, params[p + "ln1.gain"], ln1)
            grads[p + "ln1.gain"] += dgain
            grads[p + "ln1.bias"] += dbias
            dh = dh + dx
    else:
        for layer in reversed(range(config.num_layers)):
            p = f"layer{layer}."
            x, u, g, t = cache["layers"][layer]
            grads[p + "mlp.w2"] += g.T @ dpooled
            grads[p + "mlp.b2"] += dpooled.sum(0)
            du = _gelu_backward(dpooled @ params[p + "mlp.w2"].T, u, t)
            grads[p + "mlp.w1"] += x.T @ du
            grads[p + "mlp.b1"] += du.sum(0)
            dpooled = dpooled + du @ params[p + "mlp.w1"].T
        dh = (dpooled / denom)[:, None, :] * mask[:, :, None]

    np.add.at(grads["embed"], ids.ravel(), _flat(dh))
    return grads


def trim_padding(ids: np.ndarray) -> np.ndarray:
    """Drop trailing all-PAD columns; outputs are unchanged by masking."""
    nonpad = (ids != PAD_ID).any(0)
    width = int(np.max(np.nonzero(nonpad)[0])) + 1 if nonpad.any() else 1
    return ids[:, :width]
