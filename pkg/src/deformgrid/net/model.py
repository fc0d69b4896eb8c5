"""Encoder-decoder over the 5-channel grid input.

Four resolution stages (n, n/2, n/4, n/8), two 3x3x3 convolutions with
SoftSign per stage, average-pool downsampling, nearest-neighbor upsampling,
and concatenation skips. A linear 1x1x1 head emits a 3-vector field at every
decoder resolution plus the bottleneck; the full-resolution head is zeroed
outside the organ (distance channel > 0).

Parameters live in one flat list in registration order (kernel, bias pairs:
encoder stages, then decoder stages coarse to fine, then heads coarse to
fine); `param_names`/`param_shapes` describe the layout for checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sample import CH_SDF
from . import ops

STAGES = 4


@dataclass
class NetworkConfig:
    grid_n: int = 32
    stage_channels: tuple = (8, 16, 32, 64)
    kernel_size: int = 3
    in_channels: int = 5
    out_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != STAGES:
            raise ValueError(f"need {STAGES} stage channel counts")
        if self.grid_n % 2 ** (STAGES - 1) != 0 or self.grid_n < 2 ** (STAGES - 1):
            raise ValueError(f"grid_n {self.grid_n} not divisible into stages")
        if self.kernel_size != 3:
            raise ValueError("kernel_size is fixed at 3")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")

    @property
    def bottleneck_n(self) -> int:
        return self.grid_n // 2 ** (STAGES - 1)

    @property
    def resolutions(self) -> tuple:
        return tuple(self.grid_n // 2**i for i in range(STAGES))


def paper_scale_config() -> NetworkConfig:
    """64-grid schedule sized to land near 9.1M parameters."""
    return NetworkConfig(grid_n=64, stage_channels=(40, 80, 160, 320))


def _layer_specs(cfg: NetworkConfig) -> list:
    """(name, kernel_shape) pairs in registration order."""
    c = cfg.stage_channels
    ks = cfg.kernel_size
    specs = []
    prev = cfg.in_channels
    for i in range(STAGES):
        specs.append((f"enc{i}a", (ks, ks, ks, prev, c[i])))
        specs.append((f"enc{i}b", (ks, ks, ks, c[i], c[i])))
        prev = c[i]
    for i in range(STAGES - 2, -1, -1):
        specs.append((f"dec{i}a", (ks, ks, ks, c[i + 1] + c[i], c[i])))
        specs.append((f"dec{i}b", (ks, ks, ks, c[i], c[i])))
    specs.append((f"head{STAGES - 1}", (1, 1, 1, c[STAGES - 1], cfg.out_channels)))
    for i in range(STAGES - 2, -1, -1):
        specs.append((f"head{i}", (1, 1, 1, c[i], cfg.out_channels)))
    return specs


def param_names(cfg: NetworkConfig) -> list:
    names = []
    for name, _ in _layer_specs(cfg):
        names.extend([f"{name}.kernel", f"{name}.bias"])
    return names


def param_shapes(cfg: NetworkConfig) -> list:
    shapes = []
    for _, kshape in _layer_specs(cfg):
        shapes.append(kshape)
        shapes.append((kshape[4],))
    return shapes


def count_parameters(cfg: NetworkConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg))


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> list:
    """Uniform +-1/sqrt(fan_in) kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for _, kshape in _layer_specs(cfg):
        fan_in = int(np.prod(kshape[:4]))
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=kshape).astype(dtype))
        params.append(np.zeros(kshape[4], dtype=dtype))
    return params


# ---------------------------------------------------------------------------
# forward / backward


def organ_mask(x: np.ndarray) -> np.ndarray:
    """(d,h,w) float 1 inside (distance channel <= 0), 0 outside."""
    return (x[..., CH_SDF] <= 0.0).astype(x.dtype)


def _conv_act(x, kernel, bias, cache, key):
    pre = ops.conv3d_forward(x, kernel, bias)
    cache[key] = (x, pre)
    return ops.softsign(pre)


def forward(params: list, cfg: NetworkConfig, x: np.ndarray, cache: dict = None):
    """Outputs at resolutions (n, n/2, n/4, n/8), finest first.

    `cache` (a dict passed by the caller) collects what backward needs.
    """
    n = cfg.grid_n
    if x.shape != (n, n, n, cfg.in_channels):
        raise ValueError(f"input {x.shape} does not match config grid {n}")
    remember = cache is not None
    c = cache if remember else {}

    # encoder
    skips = []
    h = x
    for i in range(STAGES):
        h = _conv_act(h, params[4 * i], params[4 * i + 1], c, f"enc{i}a")
        h = _conv_act(h, params[4 * i + 2], params[4 * i + 3], c, f"enc{i}b")
        skips.append(h)
        if i < STAGES - 1:
            h = ops.avg_pool2x(h)

    # decoder with concat skips, coarse to fine
    feats = {STAGES - 1: h}
    base = 4 * STAGES
    for j, i in enumerate(range(STAGES - 2, -1, -1)):
        up = ops.nn_upsample2x(h)
        h = np.concatenate([up, skips[i]], axis=-1)
        h = _conv_act(h, params[base + 4 * j], params[base + 4 * j + 1], c, f"dec{i}a")
        h = _conv_act(h, params[base + 4 * j + 2], params[base + 4 * j + 3], c, f"dec{i}b")
        feats[i] = h

    # heads, coarse to fine in the parameter list; outputs finest first
    hbase = base + 4 * (STAGES - 1)
    outputs = [None] * STAGES
    for j, i in enumerate([STAGES - 1] + list(range(STAGES - 2, -1, -1))):
        kernel = params[hbase + 2 * j]
        bias = params[hbase + 2 * j + 1]
        out = ops.conv3d_forward(feats[i], kernel, bias)
        if remember:
            c[f"head{i}"] = (feats[i], None)
        outputs[i] = out

    mask = organ_mask(x)
    if remember:
        c["mask"] = mask
        c["skip_channels"] = [s.shape[-1] for s in skips]
    outputs[0] = outputs[0] * mask[..., None]
    return outputs


def backward(params: list, cfg: NetworkConfig, cache: dict, grad_outputs: list):
    """Parameter gradients given per-output cotangents (finest first)."""
    grads = [np.zeros_like(p) for p in params]
    mask = cache["mask"]

    base = 4 * STAGES
    hbase = base + 4 * (STAGES - 1)
    # head gradients; also seed the decoder feature cotangents
    feat_grads = {}
    head_order = [STAGES - 1] + list(range(STAGES - 2, -1, -1))
    for j, i in enumerate(head_order):
        g = grad_outputs[i]
        if i == 0:
            g = g * mask[..., None]
        feat, _ = cache[f"head{i}"]
        gx, gk, gb = ops.conv3d_backward(g, feat, params[hbase + 2 * j])
        grads[hbase + 2 * j] = gk
        grads[hbase + 2 * j + 1] = gb
        feat_grads[i] = gx

    def conv_act_backward(g, key, k_idx):
        x_in, pre = cache[key]
        g_pre = ops.softsign_backward(g, pre)
        gx, gk, gb = ops.conv3d_backward(g_pre, x_in, params[k_idx])
        grads[k_idx] = grads[k_idx] + gk
        grads[k_idx + 1] = grads[k_idx + 1] + gb
        return gx

    # decoder, fine to coarse
    skip_grads = {}
    g = feat_grads[0]
    for i in range(STAGES - 1):
        j = STAGES - 2 - i  # parameter block index within the decoder
        g = conv_act_backward(g, f"dec{i}b", base + 4 * j + 2)
        g = conv_act_backward(g, f"dec{i}a", base + 4 * j)
        up_c = g.shape[-1] - cache["skip_channels"][i]
        g_up = g[..., :up_c]
        skip_grads[i] = g[..., up_c:]
        g = ops.nn_upsample2x_backward(g_up)
        g = g + feat_grads[i + 1]

    # encoder, deep to shallow
    for i in range(STAGES - 1, -1, -1):
        if i < STAGES - 1:
            g = ops.avg_pool2x_backward(g)
            g = g + skip_grads[i]
        g = conv_act_backward(g, f"enc{i}b", 4 * i + 2)
        g = conv_act_backward(g, f"enc{i}a", 4 * i)
    return grads
