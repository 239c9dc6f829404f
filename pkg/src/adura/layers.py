"""Network building blocks and the full dual-head classifier.

The forward path is::

    stem conv -> deformable conv -> dense blocks (each ending in a
    transition) -> global average pool -> BCE head + evidence head

Convolutions are lowered to a single matrix product over an im2col buffer.
The deformable convolution builds the same buffer from bilinear samples at
offset tap positions, so with zero offsets it reproduces the plain
convolution bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, concat, make_node, mean, relu

# ---------------------------------------------------------------- primitives


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            "conv2d", (size,), (kernel,), detail=f"(in + 2*pad - k) = {span} not divisible by stride {stride}"
        )
    return span // stride + 1


def _tap_range(n_out, n_in, tap, stride, padding):
    """Output indices whose source ``o*stride - padding + tap`` is in bounds."""
    lo = max(0, -(-(padding - tap) // stride))
    hi = min(n_out, (n_in - 1 + padding - tap) // stride + 1)
    return lo, max(lo, hi)


def _use_im2col(in_ch, out_ch):
    # im2col expands the input C-fold per tap, projection expands the output
    return in_ch < out_ch


def _rows(x):
    B, C, H, W = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(B * H * W, C)


def _tap_weights(w):
    """[O,C,k,k] -> [k*k, C, O]."""
    O, C, k, _ = w.shape
    return np.ascontiguousarray(w.reshape(O, C, k * k).transpose(2, 1, 0))


def _project(x_rows, w_taps):
    """Per-tap channel projection, [k*k, N, O]; row n of slice t is pixel n times tap t."""
    K, _, O = w_taps.shape
    Y = np.empty((K, x_rows.shape[0], O))
    for t in range(K):
        np.matmul(x_rows, w_taps[t], out=Y[t])
    return Y


def _projection_grads(x_rows, w_taps, dY, w_shape, need_x, x_shape):
    """Gradients of the per-tap projection; ``dY`` is pixel-major [N, k*k, O]."""
    O, C, k, _ = w_shape
    B, _, H, W = x_shape
    K = k * k
    dY = dY.reshape(-1, K * O)
    gw = (x_rows.T @ dY).reshape(C, K, O).transpose(2, 0, 1).reshape(w_shape)
    gx = None
    if need_x:
        w_cat = w_taps.transpose(1, 0, 2).reshape(C, K * O)
        gx_rows = dY @ w_cat.T
        gx = np.ascontiguousarray(gx_rows.reshape(B, H, W, C).transpose(0, 3, 1, 2))
    return gw, gx


def _im2col_grads(cols, g_rows, w, need_cols):
    O = w.shape[0]
    gw = (g_rows.T @ cols).reshape(w.shape)
    dcols = g_rows @ w.reshape(O, -1) if need_cols else None
    return gw, dcols


def _finish(out_nhwc, b):
    if b is not None:
        out_nhwc += b
    return np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))


def _check_conv_args(op, x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(op, x.shape, w.shape, detail="input channels must match weight dim 1")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ShapeError(op, w.shape, detail="kernel must be square with odd size")


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` [B,C,H,W] with ``w`` [O,C,k,k].

    Narrow inputs (C < O) go through an im2col buffer and one GEMM. Wider
    inputs are projected once per tap and the projections are shift-added
    in tap order.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv_args("conv2d", x, w)
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    s, p = stride, padding
    Ho = conv_output_size(H, k, s, p)
    Wo = conv_output_size(W, k, s, p)
    K = k * k
    bias = None if b is None else b.data

    if _use_im2col(C, O):
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * K)
        out = _finish((cols @ w.data.reshape(O, -1).T).reshape(B, Ho, Wo, O), bias)

        def backward(g):
            g_rows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
            gb = g_rows.sum(axis=0) if b is not None else None
            gw, dcols = _im2col_grads(cols, g_rows, w.data, x.requires_grad)
            gx = None
            if x.requires_grad:
                dcols = dcols.reshape(B, Ho, Wo, C, K)
                gxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
                for t in range(K):
                    i, j = divmod(t, k)
                    gxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[..., t]
                gx = np.ascontiguousarray(gxp[:, p : p + H, p : p + W, :].transpose(0, 3, 1, 2))
            return (gx, gw) if b is None else (gx, gw, gb)

    else:
        x_rows = _rows(x.data)
        w_taps = _tap_weights(w.data)
        Y = _project(x_rows, w_taps).reshape(K, B, H, W, O)
        spans = []
        out = np.zeros((B, Ho, Wo, O))
        for t in range(K):
            i, j = divmod(t, k)
            h0, h1 = _tap_range(Ho, H, i, s, p)
            w0, w1 = _tap_range(Wo, W, j, s, p)
            if h1 <= h0 or w1 <= w0:
                continue
            sh, sw = h0 * s - p + i, w0 * s - p + j
            src = (slice(sh, sh + s * (h1 - h0), s), slice(sw, sw + s * (w1 - w0), s))
            spans.append((t, slice(h0, h1), slice(w0, w1)) + src)
            out[:, h0:h1, w0:w1] += Y[t][:, src[0], src[1]]
        out = _finish(out, bias)

        def backward(g):
            g_nhwc = g.transpose(0, 2, 3, 1)
            gb = g_nhwc.sum(axis=(0, 1, 2)) if b is not None else None
            dY = np.zeros((B, H, W, K, O))
            for t, oh, ow, ih, iw in spans:
                dY[:, ih, iw, t] = g_nhwc[:, oh, ow]
            gw, gx = _projection_grads(x_rows, w_taps, dY, w.shape, x.requires_grad, x.shape)
            return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward, "conv2d")


def bilinear_weights(py, px):
    """Corner weights for sampling at fractional (py, px).

    Returns integer corners ``(y0, x0)``, the fractional parts and the
    weights of corners (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1), which
    sum to 1.
    """
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy = py - y0
    wx = px - x0
    ws = ((1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx)
    return y0.astype(np.int64), x0.astype(np.int64), wy, wx, ws


def deform_conv2d(x, offsets, w, b=None, stride=1, padding=0):
    """Deformable convolution (learned offsets, no modulation).

    ``offsets`` has shape [B, 2*k*k, Ho, Wo]; channel ``2t`` is the row
    displacement and ``2t+1`` the column displacement of kernel tap ``t``
    (taps in row-major order). Samples falling outside the image read 0.

    Bilinear sampling is a sparse linear map with four non-zeros per
    sample. It is applied either to the input (feeding an im2col GEMM) or,
    since it commutes with the per-pixel channel projection, to the per-tap
    projections. The choice mirrors :func:`conv2d`, so zero offsets
    reproduce it exactly.
    """
    x, offsets, w = as_tensor(x), as_tensor(offsets), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv_args("deform_conv2d", x, w)
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    K = k * k
    s, p = stride, padding
    Ho = conv_output_size(H, k, s, p)
    Wo = conv_output_size(W, k, s, p)
    if offsets.shape != (B, 2 * K, Ho, Wo):
        raise ShapeError("deform_conv2d", offsets.shape, (B, 2 * K, Ho, Wo), detail="offset map")
    bias = None if b is None else b.data
    im2col = _use_im2col(C, O)

    ky, kx = np.divmod(np.arange(K), k)
    base_y = (np.arange(Ho) * s - p)[None, None, :, None] + ky[None, :, None, None]
    base_x = (np.arange(Wo) * s - p)[None, None, None, :] + kx[None, :, None, None]
    off = offsets.data.reshape(B, K, 2, Ho, Wo)
    y0, x0, wy, wx, ws = bilinear_weights(base_y + off[:, :, 0], base_x + off[:, :, 1])

    # one sampler row per (image, tap, output pixel); columns address the
    # source rows: input pixels, or per-tap projections stacked tap-major
    pix_base = np.arange(B)[:, None, None, None] * (H * W)
    if not im2col:
        pix_base = pix_base + np.arange(K)[None, :, None, None] * (B * H * W)
    indices, valids = [], []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        valids.append(((yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)).ravel())
        indices.append((pix_base + np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)).ravel())
    n_rows = B * K * Ho * Wo
    n_src = B * H * W if im2col else K * B * H * W
    indptr = np.arange(0, 4 * n_rows + 1, 4)
    indices = np.stack(indices, axis=1).ravel()
    valid = np.stack(valids, axis=1)

    def sampler(weights):
        data = np.stack([wc.ravel() for wc in weights], axis=1)
        data[~valid] = 0.0
        return sparse.csr_matrix((data.ravel(), indices, indptr), shape=(n_rows, n_src))

    A = sampler(ws)
    x_rows = _rows(x.data)
    if im2col:
        src = x_rows
        sampled = A @ src
        cols = np.ascontiguousarray(sampled.reshape(B, K, Ho, Wo, C).transpose(0, 2, 3, 4, 1)).reshape(B * Ho * Wo, C * K)
        out = _finish((cols @ w.data.reshape(O, -1).T).reshape(B, Ho, Wo, O), bias)
    else:
        w_taps = _tap_weights(w.data)
        src = _project(x_rows, w_taps).reshape(n_src, O)
        sampled = (A @ src).reshape(B, K, Ho, Wo, O)
        out = np.zeros((B, Ho, Wo, O))
        for t in range(K):
            out += sampled[:, t]
        out = _finish(out, bias)

    def backward(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gb = g_nhwc.sum(axis=(0, 1, 2)) if b is not None else None
        gx = gw = goff = None
        if im2col:
            gw, dcols = _im2col_grads(cols, g_nhwc.reshape(-1, O), w.data, True)
            d_sampled = np.ascontiguousarray(dcols.reshape(B, Ho, Wo, C, K).transpose(0, 4, 1, 2, 3)).reshape(n_rows, C)
            if x.requires_grad:
                gx = np.ascontiguousarray((A.T @ d_sampled).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        else:
            d_sampled = np.broadcast_to(g_nhwc[:, None], (B, K, Ho, Wo, O)).reshape(n_rows, O)
            dY = np.asarray(A.T @ d_sampled).reshape(K, B * H * W, O).transpose(1, 0, 2)
            gw, gx = _projection_grads(x_rows, w_taps, dY, w.shape, x.requires_grad, x.shape)
        if offsets.requires_grad:
            one_x, one_y = 1.0 - wx, 1.0 - wy
            # derivatives of the corner weights w.r.t. row and column position
            d_py = np.einsum("rc,rc->r", sampler((-one_x, -wx, one_x, wx)) @ src, d_sampled)
            d_px = np.einsum("rc,rc->r", sampler((-one_y, one_y, -wy, wy)) @ src, d_sampled)
            goff = np.stack([d_py.reshape(B, K, Ho, Wo), d_px.reshape(B, K, Ho, Wo)], axis=2).reshape(offsets.shape)
        grads = (gx, goff, gw)
        return grads if b is None else grads + (gb,)

    parents = (x, offsets, w) if b is None else (x, offsets, w, b)
    return make_node(out, parents, backward, "deform_conv2d")


def avg_pool2d(x, size=2):
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError("avg_pool2d", x.shape, (size, size), detail="spatial extent not divisible by pool size")
    return mean(x.reshape(B, C, H // size, size, W // size, size), axis=(3, 5))


def global_avg_pool(x):
    """Mean over the spatial axes: [B,C,H,W] -> [B,C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, ("B", "C", "H", "W"))
    return mean(x, axis=(2, 3))


# ------------------------------------------------------------------- modules


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = [(prefix + n, v) for n, v in getattr(self, "_buffers", {}).items()]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def set_buffer(self, name, value):
        """Replace the buffer at dotted path ``name``."""
        owner, _, key = name.rpartition(".")
        module = self
        for part in owner.split(".") if owner else ():
            module = module[int(part)] if isinstance(module, (list, tuple)) else getattr(module, part)
        bufs = getattr(module, "_buffers", None)
        if bufs is None or key not in bufs:
            raise KeyError(name)
        bufs[key] = value

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class ConvLayer(Module):
    """Convolution with odd square kernel and fan-in scaled normal init."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, padding=None, rng=None, zero_init=False):
        if kernel_size % 2 != 1:
            raise ConfigError("kernel_size", f"must be odd, got {kernel_size}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel_size, kernel_size)
        if zero_init:
            self.weight = _zeros(shape)
        else:
            self.weight = _normal(rng, shape, np.sqrt(2.0 / (in_ch * kernel_size * kernel_size)))
        self.bias = _zeros((out_ch,))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DeformableBlock(Module):
    """Deformable convolution whose offsets come from a zero-initialised conv.

    ``forward`` returns ``(y, offsets)``.
    """

    def __init__(self, in_ch, out_ch, kernel_size=3, rng=None):
        k = kernel_size
        self.offset_conv = ConvLayer(in_ch, 2 * k * k, k, rng=rng, zero_init=True)
        self.kernel_size = k
        self.padding = k // 2
        self.weight = _normal(rng, (out_ch, in_ch, k, k), np.sqrt(2.0 / (in_ch * k * k)))
        self.bias = _zeros((out_ch,))

    def forward(self, x):
        offsets = self.offset_conv(x)
        y = deform_conv2d(x, offsets, self.weight, self.bias, 1, self.padding)
        return y, offsets


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalise [B,C,H,W] with batch statistics per channel, then scale and shift.

    Returns the output tensor and the (mean, biased variance) used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    axes = (0, 2, 3)
    n = x.size // C
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.einsum("bchw,bchw->c", xc, xc).reshape(1, C, 1, 1) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    g4 = gamma.data.reshape(1, C, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        g_sum = g.sum(axis=axes)
        gx_hat_sum = np.einsum("bchw,bchw->c", g, xhat)
        gx = None
        if x.requires_grad:
            gx = (g4 * inv_std) * (
                g - (g_sum / n).reshape(1, C, 1, 1) - xhat * (gx_hat_sum / n).reshape(1, C, 1, 1)
            )
        return gx, gx_hat_sum, g_sum

    node = make_node(out, (x, gamma, beta), backward, "batch_norm")
    return node, mu.reshape(-1), var.reshape(-1)


class BatchNorm2d(Module):
    """Per-channel batch normalisation with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = _zeros((channels,))
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError("batch_norm", x.shape, (self.channels,))
        if self.training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.size // self.channels
            m = self.momentum
            buf = self._buffers
            buf["running_mean"] = (1 - m) * buf["running_mean"] + m * mu
            buf["running_var"] = (1 - m) * buf["running_var"] + m * var * (n / max(n - 1, 1))
            return out
        shape = (1, self.channels, 1, 1)
        rm = self._buffers["running_mean"].reshape(shape)
        scale = 1.0 / np.sqrt(self._buffers["running_var"].reshape(shape) + self.eps)
        return (x - rm) * scale * self.gamma.reshape(shape) + self.beta.reshape(shape)


class DenseLayer(Module):
    """norm -> ReLU -> conv producing ``growth_rate`` new channels."""

    def __init__(self, in_ch, growth_rate, kernel_size, rng):
        self.norm = BatchNorm2d(in_ch)
        self.conv = ConvLayer(in_ch, growth_rate, kernel_size, rng=rng)

    def forward(self, x):
        return self.conv(relu(self.norm(x)))


class Transition(Module):
    """norm -> ReLU -> 1x1 conv -> 2x2 average pool."""

    def __init__(self, in_ch, out_ch, rng):
        self.norm = BatchNorm2d(in_ch)
        self.conv = ConvLayer(in_ch, out_ch, 1, rng=rng)

    def forward(self, x):
        return avg_pool2d(self.conv(relu(self.norm(x))), 2)


class DenseBlock(Module):
    """``layer_count`` concatenative layers followed by a transition.

    Layer ``l`` sees ``in_ch + l * growth_rate`` channels. The transition
    compresses channels by ``compression`` and halves the spatial extent.
    """

    def __init__(self, in_ch, layer_count, growth_rate, kernel_size=3, compression=0.5, rng=None):
        self.in_ch = in_ch
        self.layer_count = layer_count
        self.growth_rate = growth_rate
        self.layers = [DenseLayer(in_ch + i * growth_rate, growth_rate, kernel_size, rng) for i in range(layer_count)]
        self.pre_transition_channels = in_ch + layer_count * growth_rate
        self.out_ch = max(1, int(self.pre_transition_channels * compression))
        self.transition = Transition(self.pre_transition_channels, self.out_ch, rng)

    def features(self, x):
        if x.shape[1] != self.in_ch:
            raise ShapeError("dense_block", x.shape, (self.in_ch,), detail="input channel count")
        for layer in self.layers:
            x = concat([x, layer(x)], axis=1)
        return x

    def forward(self, x):
        return self.transition(self.features(x))


class DualHead(Module):
    """Two linear maps over the same pooled features.

    ``forward`` returns BCE logits [B,C] and raw evidence [B,C,2] where the
    last axis is (negative, positive).
    """

    def __init__(self, in_features, num_classes, rng=None, std=0.01):
        self.in_features = in_features
        self.num_classes = num_classes
        if rng is None:
            self.bce_weight = _zeros((in_features, num_classes))
            self.evid_weight = _zeros((in_features, 2 * num_classes))
        else:
            self.bce_weight = _normal(rng, (in_features, num_classes), std)
            self.evid_weight = _normal(rng, (in_features, 2 * num_classes), std)
        self.bce_bias = _zeros((num_classes,))
        self.evid_bias = _zeros((2 * num_classes,))

    def forward(self, features):
        if features.ndim != 2 or features.shape[1] != self.in_features:
            raise ShapeError("dual_head", features.shape, (self.in_features,), detail="feature width")
        logits = features @ self.bce_weight + self.bce_bias
        raw = features @ self.evid_weight + self.evid_bias
        return logits, raw.reshape(features.shape[0], self.num_classes, 2)


def dual_head_forward(features, head):
    return head(as_tensor(features))


def dense_block_forward(x, block):
    return block(as_tensor(x))


def conv2d_forward(x, layer):
    return layer(as_tensor(x))


def deformable_forward(x, block):
    return block(as_tensor(x))


# ------------------------------------------------------------------ network


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 32
    input_channels: int = 1
    stem_channels: int = 16
    dense_blocks: int = 2
    layers_per_block: int = 4
    growth_rate: int = 8
    num_classes: int = 5
    kernel_size: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f.name, f"must be an integer, got {v!r}")
        positive = ("input_size", "input_channels", "stem_channels", "growth_rate", "num_classes", "kernel_size")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        for key in ("dense_blocks", "layers_per_block"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size", f"must be odd, got {self.kernel_size}")
        if self.input_size % (2 ** (self.dense_blocks + 1)):
            raise ConfigError("input_size", f"{self.input_size} not divisible by 2**(dense_blocks + 1)")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a flat mapping, ignoring keys that are not network keys."""
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key in names:
                try:
                    kwargs[key] = int(value)
                except (TypeError, ValueError):
                    raise ConfigError(key, f"must be an integer, got {value!r}") from None
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


class NetworkOutput(NamedTuple):
    logits: Tensor
    evidence_raw: Tensor
    offsets: Tensor
    features: Tensor


class Network(Module):
    def __init__(self, config, rng):
        self.config = config
        c = config
        self.stem = ConvLayer(c.input_channels, c.stem_channels, c.kernel_size, rng=rng)
        self.deform = DeformableBlock(c.stem_channels, c.stem_channels, c.kernel_size, rng=rng)
        blocks = []
        ch = c.stem_channels
        for _ in range(c.dense_blocks):
            block = DenseBlock(ch, c.layers_per_block, c.growth_rate, c.kernel_size, rng=rng)
            blocks.append(block)
            ch = block.out_ch
        self.blocks = blocks
        self.feature_width = ch
        self.head = DualHead(ch, c.num_classes, rng=rng)

    def forward(self, x):
        """Run the full model on images [B, input_channels, S, S]."""
        x = as_tensor(x)
        c = self.config
        expected = (c.input_channels, c.input_size, c.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError("network", x.shape, ("B",) + expected)
        # stem stage: convolution then 2x2 pooling, as in the DenseNet stem
        h = avg_pool2d(self.stem(x), 2)
        feats, offsets = self.deform(h)
        h = feats
        for block in self.blocks:
            h = block(h)
        logits, evidence_raw = self.head(global_avg_pool(h))
        return NetworkOutput(logits, evidence_raw, offsets, feats)


def build_network(config, rng):
    """Instantiate a :class:`Network`; ``config`` may be a mapping."""
    if not isinstance(config, NetworkConfig):
        config = NetworkConfig.from_mapping(config)
    return Network(config, rng)


def expected_shapes(config, batch):
    """Closed-form output shapes of every stage for ``batch`` inputs."""
    c = config
    size = c.input_size
    ch = c.stem_channels
    k = c.kernel_size
    shapes = {"stem": (batch, ch, size, size)}
    size //= 2
    shapes["stem_pool"] = (batch, ch, size, size)
    shapes["deform"] = (batch, ch, size, size)
    shapes["offsets"] = (batch, 2 * k * k, size, size)
    for i in range(c.dense_blocks):
        pre = ch + c.layers_per_block * c.growth_rate
        shapes[f"block{i}.pre_transition"] = (batch, pre, size, size)
        ch = max(1, int(pre * 0.5))
        size //= 2
        shapes[f"block{i}"] = (batch, ch, size, size)
    shapes["pooled"] = (batch, ch)
    shapes["logits"] = (batch, c.num_classes)
    shapes["evidence_raw"] = (batch, c.num_classes, 2)
    return shapes
