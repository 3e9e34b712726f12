"""GRL transformer layer, stages, and the full restoration network.

Each transformer layer runs three branches in parallel on its input:
window attention on the first half of the channels, anchored stripe
attention on the second half, and a channel-attention-gated convolution
block on all channels. Their sum is added to the input and followed by a
pre-norm MLP.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..attention import stripe_attention_tokens, stripe_for_layer, window_attention_tokens, window_for_layer
from ..init import kaiming_uniform, trunc_normal
from ..tensor import ops
from ..tensor.core import DimensionError, Parameter, Tensor, as_tensor, resolve_dtype
from .config import GRLConfig

MIN_SIZE = 8


def _layer_shapes(cfg, prefix):
    c = cfg.embed_dim
    h = c // 2
    sq = c // cfg.ca_squeeze
    hid = cfg.mlp_hidden
    size = cfg.window.size
    return [
        (f"{prefix}.norm1.gamma", (c,), "ones"),
        (f"{prefix}.norm1.beta", (c,), "zeros"),
        (f"{prefix}.window.w_qkv", (h, 3 * h), "normal"),
        (f"{prefix}.window.b_qkv", (3 * h,), "zeros"),
        (f"{prefix}.window.rel_bias", ((2 * size - 1) ** 2, cfg.heads), "normal"),
        (f"{prefix}.stripe.w_qkv", (h, 3 * h), "normal"),
        (f"{prefix}.stripe.b_qkv", (3 * h,), "zeros"),
        (f"{prefix}.stripe.w_anchor", (h, h), "normal"),
        (f"{prefix}.stripe.b_anchor", (h,), "zeros"),
        (f"{prefix}.stripe.w_out", (h, h), "normal"),
        (f"{prefix}.stripe.b_out", (h,), "zeros"),
        (f"{prefix}.proj.w", (c, c), "normal"),
        (f"{prefix}.proj.b", (c,), "zeros"),
        (f"{prefix}.conv.conv1.weight", (c, c, 3, 3), "kaiming"),
        (f"{prefix}.conv.conv1.bias", (c,), "zeros"),
        (f"{prefix}.conv.conv2.weight", (c, c, 3, 3), "kaiming"),
        (f"{prefix}.conv.conv2.bias", (c,), "zeros"),
        (f"{prefix}.conv.ca1.w", (c, sq), "normal"),
        (f"{prefix}.conv.ca1.b", (sq,), "zeros"),
        (f"{prefix}.conv.ca2.w", (sq, c), "normal"),
        (f"{prefix}.conv.ca2.b", (c,), "zeros"),
        (f"{prefix}.norm2.gamma", (c,), "ones"),
        (f"{prefix}.norm2.beta", (c,), "zeros"),
        (f"{prefix}.mlp.fc1.w", (c, hid), "normal"),
        (f"{prefix}.mlp.fc1.b", (hid,), "zeros"),
        (f"{prefix}.mlp.fc2.w", (hid, c), "normal"),
        (f"{prefix}.mlp.fc2.b", (c,), "zeros"),
    ]


def parameter_shapes(cfg):
    """Ordered ``(name, shape, init)`` triples for every parameter of ``cfg``."""
    c, cin = cfg.embed_dim, cfg.channels_in
    out = [("conv_first.weight", (c, cin, 3, 3), "kaiming"), ("conv_first.bias", (c,), "zeros")]
    for i in range(cfg.stages):
        for j in range(cfg.layers_per_stage):
            out += _layer_shapes(cfg, f"stage{i}.layer{j}")
        out += [(f"stage{i}.conv.weight", (c, c, 3, 3), "kaiming"), (f"stage{i}.conv.bias", (c,), "zeros")]
    out += [("conv_after_body.weight", (c, c, 3, 3), "kaiming"), ("conv_after_body.bias", (c,), "zeros")]
    for k in range(int(np.log2(cfg.scale))):
        out += [(f"head.up{k}.weight", (4 * c, c, 3, 3), "kaiming"), (f"head.up{k}.bias", (4 * c,), "zeros")]
    out += [("head.conv.weight", (cin, c, 3, 3), "zeros"), ("head.conv.bias", (cin,), "zeros")]
    return out


def count_parameters(cfg):
    return int(sum(np.prod(shape) for _, shape, _ in parameter_shapes(cfg)))


def init_parameters(cfg, seed=0, dtype="f32"):
    """Fresh parameter arrays: truncated normal (std 0.02) for linear/attention
    weights, Kaiming-uniform for convolutions, zeros for biases and the final
    head convolution, ones for norm scales."""
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape, kind in parameter_shapes(cfg):
        if kind == "normal":
            arr = trunc_normal(rng, shape, 0.02, dt)
        elif kind == "kaiming":
            arr = kaiming_uniform(rng, shape, dt)
        elif kind == "ones":
            arr = np.ones(shape, dt)
        else:
            arr = np.zeros(shape, dt)
        params[name] = arr
    return params


class GRL:
    """A configured network plus its named parameters."""

    def __init__(self, cfg, params=None, seed=0, dtype="f32"):
        self.cfg = cfg
        if params is None:
            params = init_parameters(cfg, seed, dtype)
        expected = {n: s for n, s, _ in parameter_shapes(cfg)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
        self.params = OrderedDict()
        for name, _, _ in parameter_shapes(cfg):
            arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            if arr.shape != tuple(expected[name]):
                raise ValueError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            self.params[name] = Parameter(arr.copy(), name)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def state(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def __call__(self, img):
        return forward(img, self)


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _conv(x, p, name, pad=1):
    return ops.conv2d(x, p[name + ".weight"], p[name + ".bias"], pad)


def _tokens(x):
    b, c, h, w = x.shape
    return ops.swap_last(ops.reshape(x, (b, c, h * w)))


def _fmap(t, h, w):
    b, n, c = t.shape
    return ops.reshape(ops.swap_last(t), (b, c, h, w))


def channel_attention_conv(x, p, squeeze_act="relu"):
    """conv3x3 -> gelu -> conv3x3, scaled per channel by a squeeze-excitation gate."""
    y = ops.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1)
    y = ops.gelu(y)
    y = ops.conv2d(y, p["conv2.weight"], p["conv2.bias"], 1)
    pooled = ops.mean(y, axis=(-2, -1))  # (..., c)
    gate = ops.linear(pooled, p["ca1.w"], p["ca1.b"])
    gate = ops.activation(gate, squeeze_act)
    gate = ops.sigmoid(ops.linear(gate, p["ca2.w"], p["ca2.b"]))
    return ops.mul(y, ops.reshape(gate, gate.shape + (1, 1)))


def transformer_layer(x, p, cfg, layer_index):
    """One GRL layer on a ``(b, C, h, w)`` map; ``p`` holds the layer's parameters."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if c != cfg.embed_dim or c % 2:
        raise DimensionError(f"layer expects {cfg.embed_dim} channels, got {c}")
    half = c // 2
    t = _tokens(x)
    u = ops.layer_norm(t, p["norm1.gamma"], p["norm1.beta"])
    win = window_attention_tokens(
        ops.getitem(u, (Ellipsis, slice(0, half))), h, w,
        window_for_layer(cfg.window, layer_index), cfg.heads, _sub(p, "window"),
    )
    stripe = stripe_attention_tokens(
        ops.getitem(u, (Ellipsis, slice(half, c))), h, w,
        stripe_for_layer(cfg.stripe, layer_index), cfg.anchor, cfg.heads, cfg.measure, _sub(p, "stripe"),
    )
    attn = ops.linear(ops.concat([win, stripe], axis=-1), p["proj.w"], p["proj.b"])
    conv = _tokens(channel_attention_conv(x, _sub(p, "conv")))
    y1 = ops.add(ops.add(t, attn), conv)
    m = ops.layer_norm(y1, p["norm2.gamma"], p["norm2.beta"])
    m = ops.linear(ops.gelu(ops.linear(m, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])
    return _fmap(ops.add(y1, m), h, w)


def stage(x, p, cfg, stage_index):
    """``x + conv3x3(layers(x))``."""
    y = x
    for j in range(cfg.layers_per_stage):
        y = transformer_layer(y, _sub(p, f"layer{j}"), cfg, stage_index * cfg.layers_per_stage + j)
    return ops.add(x, _conv(y, p, "conv"))


def forward(img, model):
    """Restore ``img`` (``c_in x h x w`` or ``b x c_in x h x w``)."""
    cfg, p = model.cfg, model.params
    img = as_tensor(img)
    single = img.ndim == 3
    x = ops.reshape(img, (1,) + img.shape) if single else img
    if x.ndim != 4 or x.shape[1] != cfg.channels_in:
        raise DimensionError(f"expected {cfg.channels_in} x h x w input, got {img.shape}")
    if x.shape[2] < MIN_SIZE or x.shape[3] < MIN_SIZE:
        raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} is smaller than {MIN_SIZE}x{MIN_SIZE}")
    x0 = _conv(x, p, "conv_first")
    f = x0
    for i in range(cfg.stages):
        f = stage(f, _sub(p, f"stage{i}"), cfg, i)
    deep = ops.add(_conv(f, p, "conv_after_body"), x0)
    if cfg.task == "denoise":
        out = ops.add(x, _conv(deep, p, "head.conv"))
    else:
        u = deep
        for k in range(int(np.log2(cfg.scale))):
            u = ops.pixel_shuffle(_conv(u, p, f"head.up{k}"), 2)
        out = _conv(u, p, "head.conv")
    return ops.reshape(out, out.shape[1:]) if single else out
