"""The 2D encoder/decoder segmentation network and its parameter store.

Layer names are part of the checkpoint contract::

    enc{l}.conv{1,2}.{weight,bias}   l = 1..depth     3x3 convs, ReLU
    bottom.conv{1,2}.{weight,bias}                    3x3 convs, ReLU
    up{l}.{weight,bias}              l = depth..1     2x2 stride-2 transposed conv
    dec{l}.conv{1,2}.{weight,bias}                    3x3 convs on [skip, upsampled]
    final.{weight,bias}                               1x1 conv to class logits
"""

from dataclasses import dataclass, asdict, field

import numpy as np

from . import ops


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_channels: int = 64
    depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def channels(self, level):
        """Feature width at encoder level ``level`` (1-based); ``depth + 1`` is the bottleneck."""
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self):
        return asdict(self)


def layer_shapes(config):
    """Ordered mapping of canonical parameter names to shapes."""
    shapes = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for level in range(1, config.depth + 1):
        c = config.channels(level)
        conv(f"enc{level}.conv1", cin, c)
        conv(f"enc{level}.conv2", c, c)
        cin = c
    cb = config.channels(config.depth + 1)
    conv("bottom.conv1", cin, cb)
    conv("bottom.conv2", cb, cb)
    below = cb
    for level in range(config.depth, 0, -1):
        c = config.channels(level)
        shapes[f"up{level}.weight"] = (below, c, 2, 2)
        shapes[f"up{level}.bias"] = (c,)
        conv(f"dec{level}.conv1", 2 * c, c)
        conv(f"dec{level}.conv2", c, c)
        below = c
    conv("final", config.channels(1), config.num_classes, k=1)
    return shapes


def closed_form_count(config):
    """Parameter count from the channel ladder alone, without building tensors."""

    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    total = 0
    cin = config.in_channels
    for level in range(1, config.depth + 1):
        c = config.channels(level)
        total += conv(cin, c) + conv(c, c)
        cin = c
    cb = config.channels(config.depth + 1)
    total += conv(cin, cb) + conv(cb, cb)
    for level in range(1, config.depth + 1):
        c, below = config.channels(level), config.channels(level + 1)
        total += 4 * below * c + c
        total += conv(2 * c, c) + conv(c, c)
    total += conv(config.channels(1), config.num_classes, k=1)
    return total


def glorot_limit(name, shape):
    if name.startswith("up"):
        cin, cout, kh, kw = shape
    else:
        cout, cin, kh, kw = shape
    area = kh * kw
    return np.sqrt(6.0 / (cin * area + cout * area))


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict = field(default_factory=dict)

    def param_count(self):
        return param_count(self.params)

    def forward(self, batch):
        return forward(self, batch)

    def astype(self, dtype):
        return UNetModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return UNetModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build(config, dtype=np.float32):
    """Glorot-uniform weights and zero biases, drawn in canonical name order."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            a = glorot_limit(name, shape)
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return UNetModel(config, params)


def param_count(params):
    if isinstance(params, UNetModel):
        params = params.params
    return int(sum(p.size for p in params.values()))


def _check_input(config, x):
    if x.ndim != 4:
        raise ops.ShapeError(f"input must be (N, C, H, W), got shape {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ops.ShapeError(
            f"input has {x.shape[1]} channels, model expects {config.in_channels}")
    m = 2 ** config.depth
    H, W = x.shape[2:]
    if H % m or W % m:
        raise ops.ShapeError(
            f"spatial dims {H}x{W} must be multiples of {m} for depth {config.depth}")


def _block(params, prefix, x, caches):
    c1, c2 = f"{prefix}.conv1", f"{prefix}.conv2"
    x, caches[c1] = ops.conv2d(x, params[c1 + ".weight"], params[c1 + ".bias"])
    x, caches[c1 + ".relu"] = ops.relu(x)
    x, caches[c2] = ops.conv2d(x, params[c2 + ".weight"], params[c2 + ".bias"])
    x, caches[c2 + ".relu"] = ops.relu(x)
    return x


def _block_backward(prefix, g, caches, grads):
    for conv in (f"{prefix}.conv2", f"{prefix}.conv1"):
        g = ops.relu_backward(g, caches[conv + ".relu"])
        g, grads[conv + ".weight"], grads[conv + ".bias"] = ops.conv2d_backward(g, caches[conv])
    return g


def forward_train(model, batch):
    """Forward pass keeping every cache.  Returns ``(probs, caches)``."""
    config, params = model.config, model.params
    x = np.asarray(batch)
    _check_input(config, x)
    dtype = params["final.weight"].dtype
    h = x.astype(dtype, copy=False)
    caches = {}
    skips = {}
    for level in range(1, config.depth + 1):
        h = _block(params, f"enc{level}", h, caches)
        skips[level] = h
        h, caches[f"pool{level}"] = ops.maxpool2(h)
    h = _block(params, "bottom", h, caches)
    for level in range(config.depth, 0, -1):
        up = f"up{level}"
        u, caches[up] = ops.upconv2(h, params[up + ".weight"], params[up + ".bias"])
        h, caches[f"cat{level}"] = ops.concat_channels(skips[level], u)
        h = _block(params, f"dec{level}", h, caches)
    logits, caches["final"] = ops.conv1x1(h, params["final.weight"], params["final.bias"])
    probs, caches["softmax"] = ops.softmax_channels(logits)
    return probs, caches


def backward(model, caches, dprobs):
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d probs."""
    depth = model.config.depth
    grads = {}
    g = ops.softmax_channels_backward(dprobs, caches["softmax"])
    g, grads["final.weight"], grads["final.bias"] = ops.conv1x1_backward(g, caches["final"])
    dskip = {}
    for level in range(1, depth + 1):
        g = _block_backward(f"dec{level}", g, caches, grads)
        dskip[level], g = ops.concat_channels_backward(g, caches[f"cat{level}"])
        up = f"up{level}"
        g, grads[up + ".weight"], grads[up + ".bias"] = ops.upconv2_backward(g, caches[up])
    g = _block_backward("bottom", g, caches, grads)
    for level in range(depth, 0, -1):
        g = ops.maxpool2_backward(g, caches[f"pool{level}"]) + dskip[level]
        g = _block_backward(f"enc{level}", g, caches, grads)
    return {name: grads[name] for name in model.params}


def forward(model, batch):
    """Per-pixel class probabilities, shape (N, num_classes, H, W)."""
    probs, _ = forward_train(model, batch)
    return probs


def predict(model, images, batch_size=16):
    """Forward in chunks to bound memory."""
    images = np.asarray(images)
    out = [forward(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes) + images.shape[2:])
