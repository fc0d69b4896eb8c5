"""Dense 3D network primitives with exact adjoints.

Convolution runs as im2col plus one matrix product per depth slab, keeping
the column buffer under a fixed byte budget. All ops are dtype-agnostic so
float64 replicas can drive finite-difference checks; loops run in a fixed
order for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COL_BUDGET_BYTES = 128 * 1024 * 1024


def _slab_depth(h, w, cin, ks, itemsize) -> int:
    per_plane = h * w * ks**3 * cin * itemsize
    return max(1, COL_BUDGET_BYTES // max(per_plane, 1))


def _columns(xp: np.ndarray, z0: int, z1: int, ks: int, h: int, w: int):
    """(z1-z0, h, w, ks^3 * cin) column block from the padded input."""
    parts = []
    for dz in range(ks):
        for dy in range(ks):
            for dx in range(ks):
                parts.append(xp[z0 + dz : z1 + dz, dy : dy + h, dx : dx + w])
    return np.concatenate(parts, axis=-1)


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded same-size convolution.

    x: (d, h, w, cin); kernel: (ks, ks, ks, cin, cout); bias: (cout,).
    """
    d, h, w, cin = x.shape
    ks = kernel.shape[0]
    if kernel.shape[:3] != (ks, ks, ks) or kernel.shape[3] != cin:
        raise ValueError(f"kernel {kernel.shape} does not fit input {x.shape}")
    cout = kernel.shape[4]
    if bias.shape != (cout,):
        raise ValueError(f"bias {bias.shape} does not match cout {cout}")
    if ks == 1:
        return x @ kernel.reshape(cin, cout) + bias

    pad = ks // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    kmat = kernel.reshape(ks**3 * cin, cout)
    out = np.empty((d, h, w, cout), dtype=x.dtype)
    step = _slab_depth(h, w, cin, ks, x.dtype.itemsize)
    for z0 in range(0, d, step):
        z1 = min(z0 + step, d)
        cols = _columns(xp, z0, z1, ks, h, w)
        out[z0:z1] = (
            cols.reshape((z1 - z0) * h * w, -1) @ kmat
        ).reshape(z1 - z0, h, w, cout)
    return out + bias


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Exact adjoint of conv3d_forward: (grad_x, grad_kernel, grad_bias)."""
    d, h, w, cin = x.shape
    ks = kernel.shape[0]
    cout = kernel.shape[4]
    if grad_out.shape != (d, h, w, cout):
        raise ValueError(f"grad_out {grad_out.shape} does not match forward output")
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    if ks == 1:
        kmat = kernel.reshape(cin, cout)
        grad_x = grad_out @ kmat.T
        grad_kernel = (
            x.reshape(-1, cin).T @ grad_out.reshape(-1, cout)
        ).reshape(kernel.shape)
        return grad_x, grad_kernel, grad_bias

    pad = ks // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    kmat = kernel.reshape(ks**3 * cin, cout)
    grad_kmat = np.zeros_like(kmat)
    grad_xp = np.zeros_like(xp)
    step = _slab_depth(h, w, cin, ks, x.dtype.itemsize)
    for z0 in range(0, d, step):
        z1 = min(z0 + step, d)
        g = grad_out[z0:z1].reshape((z1 - z0) * h * w, cout)
        cols = _columns(xp, z0, z1, ks, h, w).reshape((z1 - z0) * h * w, -1)
        grad_kmat += cols.T @ g
        gcols = (g @ kmat.T).reshape(z1 - z0, h, w, ks**3, cin)
        i = 0
        for dz in range(ks):
            for dy in range(ks):
                for dx in range(ks):
                    grad_xp[z0 + dz : z1 + dz, dy : dy + h, dx : dx + w] += gcols[
                        :, :, :, i
                    ]
                    i += 1
    grad_x = grad_xp[pad : pad + d, pad : pad + h, pad : pad + w]
    return grad_x, grad_kmat.reshape(kernel.shape), grad_bias


# ---------------------------------------------------------------------------
# resolution changes


def _block_sum(x: np.ndarray) -> np.ndarray:
    """Pairwise sum over 2x2x2 blocks; exact doubling on constant blocks."""
    d, h, w = x.shape[:3]
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"2x blocks need even spatial dims, got {x.shape[:3]}")
    r = x.reshape(d // 2, 2, h // 2, 2, w // 2, 2, -1)
    t = r[:, :, :, :, :, 0] + r[:, :, :, :, :, 1]
    t = t[:, :, :, 0] + t[:, :, :, 1]
    t = t[:, 0] + t[:, 1]
    return t.reshape(d // 2, h // 2, w // 2, *x.shape[3:])


def avg_pool2x(x: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2x2 blocks."""
    return _block_sum(x) / 8.0


def avg_pool2x_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of avg_pool2x: each block member receives grad/8."""
    return nn_upsample2x(grad_out) / 8.0


def nn_upsample2x(x: np.ndarray) -> np.ndarray:
    """Replicate every value into a 2x2x2 block."""
    out = np.repeat(x, 2, axis=0)
    out = np.repeat(out, 2, axis=1)
    return np.repeat(out, 2, axis=2)


def nn_upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of nn_upsample2x: sum over each 2x2x2 block."""
    return _block_sum(grad_out)


# ---------------------------------------------------------------------------
# activation


def softsign(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.abs(x))


def softsign_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    d = 1.0 + np.abs(x)
    return grad_out / (d * d)


# ---------------------------------------------------------------------------
# losses


def masked_mse_loss(u: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean over ALL grid points of masked squared error: (loss, grad_u).

    mask is (d,h,w) with 1 inside the organ; the normalizer is the full
    point count, so masked-out points dilute rather than renormalize.
    """
    npts = u.shape[0] * u.shape[1] * u.shape[2]
    diff = (u - target) * mask[..., None]
    loss = float(np.sum(diff * diff, dtype=np.float64) / npts)
    grad = (2.0 / npts) * diff
    return loss, grad.astype(u.dtype, copy=False)


def occupancy_pyramid(mask_full: np.ndarray, levels: int) -> list:
    """Masks at n, n/2, ... : a coarse cell is inside when ANY fine cell is."""
    out = [mask_full.astype(np.float64)]
    m = mask_full.astype(bool)
    for _ in range(levels - 1):
        d, h, w = m.shape
        m = m.reshape(d // 2, 2, h // 2, 2, w // 2, 2).any(axis=(1, 3, 5))
        out.append(m.astype(np.float64))
    return out


def target_pyramid(target: np.ndarray, levels: int) -> list:
    """Average-pooled copies of the full-resolution target."""
    out = [target]
    t = target
    for _ in range(levels - 1):
        t = avg_pool2x(t)
        out.append(t)
    return out


def total_loss(outputs: list, targets: list, masks: list, lambdas) -> tuple:
    """Weighted multi-resolution loss: (scalar, per-output grads)."""
    if not (len(outputs) == len(targets) == len(masks) == len(lambdas)):
        raise ValueError("outputs, targets, masks, lambdas must align")
    total = 0.0
    grads = []
    for u, t, m, lam in zip(outputs, targets, masks, lambdas):
        loss, grad = masked_mse_loss(u, t, m)
        total += lam * loss
        grads.append(lam * grad)
    return total, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: list) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
        )


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    learning_rate: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Standard Adam with bias correction; updates params in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
