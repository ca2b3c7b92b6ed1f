"""Deterministic 2-D layer kernels with analytic forward/backward passes.

Data layout is (batch, channels, height, width) throughout.  Each layer keeps
one in-flight forward cache; calling backward consumes the cache produced by
the matching forward.  Parameters and their gradients are plain numpy arrays
so an optimizer can update them in place.

Convolutions are evaluated as BLAS contractions over strided window views.
The transposed convolution is implemented as the exact adjoint of the strided
convolution (scatter over kernel offsets), which keeps the two verifiable
against each other with dot-product identities.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class LayerError(Exception):
    """Shape/state misuse of a layer (bad input shape, missing cache, ...)."""


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise LayerError(f"{what} must be 4-D (B,C,H,W), got shape {x.shape}")


class Layer:
    """Base layer: stateless unless a subclass adds parameters."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable arrays that belong in a checkpoint."""
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        """Convert parameter/state arrays in place; stateless layers do nothing."""


class Conv2D(Layer):
    """Strided 2-D convolution (cross-correlation), optionally biased.

    bias=False is used when batch normalization follows: the normalization
    cancels any per-channel constant, so the bias would be a flat direction.
    """

    def __init__(
        self, in_channels, out_channels, kernel, stride, padding, bias=True, dtype=np.float32
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding  # (ph, pw), already resolved to ints
        self.bias = bias
        self.W = np.zeros((out_channels, in_channels, *kernel), dtype=dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {"W": self.W, "b": self.b} if self.bias else {"W": self.W}

    def grads(self):
        return {"W": self.gW, "b": self.gb} if self.bias else {"W": self.gW}

    def astype(self, dtype):
        self.W = self.W.astype(dtype)
        self.b = self.b.astype(dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def forward(self, x, train):
        _check_4d(x, "conv input")
        if x.shape[1] != self.in_channels:
            raise LayerError(f"conv expects {self.in_channels} channels, got {x.shape[1]}")
        ph, pw = self.padding
        kh, kw = self.kernel
        sh, sw = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        oh = (xp.shape[2] - kh) // sh + 1
        ow = (xp.shape[3] - kw) // sw + 1
        # One GEMM per kernel offset, accumulated output-channel-first: this
        # avoids materializing the (B,C,OH,OW,kh,kw) window tensor and keeps
        # every internal transpose on axes with long contiguous runs.
        acc = np.zeros((self.out_channels, x.shape[0], oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw]
                acc += np.tensordot(self.W[:, :, i, j], sl, axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
        if self.bias:
            out += self.b[None, :, None, None]
        if train:
            self._cache = (x.shape, xp)
        return out

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("conv backward without a cached training forward")
        x_shape, xp = self._cache
        self._cache = None
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if self.bias:
            self.gb = dy.sum(axis=(0, 2, 3)).astype(self.b.dtype, copy=False)

        B, _, oh, ow = dy.shape
        gW = np.empty_like(self.W)
        # Accumulate dx channel-first and swap axes once at the end.
        dxp_t = np.zeros((xp.shape[1], B, xp.shape[2], xp.shape[3]), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw]
                gW[:, :, i, j] = np.tensordot(dy, sl, axes=([0, 2, 3], [0, 2, 3]))
                # (C,O) . (B,O,OH,OW) -> (C,B,OH,OW)
                contrib = np.tensordot(self.W[:, :, i, j], dy, axes=([0], [1]))
                dxp_t[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += contrib
        self.gW = gW
        H, W = x_shape[2], x_shape[3]
        dxp = np.ascontiguousarray(dxp_t.transpose(1, 0, 2, 3))
        return dxp[:, :, ph : ph + H, pw : pw + W]


class ConvTranspose2D(Layer):
    """Strided transposed convolution; adjoint of Conv2D with the same geometry.

    output size = (in - 1) * stride - 2 * padding + kernel + output_padding,
    with the output_padding rows/columns appended at the bottom/right edge.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
        output_padding=(0, 0),
        bias=True,
        dtype=np.float32,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.bias = bias
        self.W = np.zeros((in_channels, out_channels, *kernel), dtype=dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {"W": self.W, "b": self.b} if self.bias else {"W": self.W}

    def grads(self):
        return {"W": self.gW, "b": self.gb} if self.bias else {"W": self.gW}

    def astype(self, dtype):
        self.W = self.W.astype(dtype)
        self.b = self.b.astype(dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def _geometry(self, ih: int, iw: int):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oph, opw = self.output_padding
        full_h = (ih - 1) * sh + kh + oph
        full_w = (iw - 1) * sw + kw + opw
        oh = full_h - 2 * ph
        ow = full_w - 2 * pw
        if oh <= 0 or ow <= 0:
            raise LayerError(f"transposed conv output collapsed to {oh}x{ow}")
        return full_h, full_w, oh, ow

    def forward(self, x, train):
        _check_4d(x, "transposed conv input")
        if x.shape[1] != self.in_channels:
            raise LayerError(
                f"transposed conv expects {self.in_channels} channels, got {x.shape[1]}"
            )
        B, _, ih, iw = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        full_h, full_w, oh, ow = self._geometry(ih, iw)
        ypad_t = np.zeros((self.out_channels, B, full_h, full_w), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                # (O,B,IH,IW) contribution scattered onto the strided grid
                contrib = np.tensordot(self.W[:, :, i, j], x, axes=([0], [1]))
                ypad_t[:, :, i : i + ih * sh : sh, j : j + iw * sw : sw] += contrib
        ypad = np.ascontiguousarray(ypad_t.transpose(1, 0, 2, 3))
        out = ypad[:, :, ph : ph + oh, pw : pw + ow].copy()
        if self.bias:
            out += self.b[None, :, None, None]
        if train:
            self._cache = (x, (full_h, full_w, oh, ow))
        return out

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("transposed conv backward without a cached training forward")
        x, (full_h, full_w, oh, ow) = self._cache
        self._cache = None
        B, _, ih, iw = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding

        dypad = np.zeros((B, self.out_channels, full_h, full_w), dtype=dy.dtype)
        dypad[:, :, ph : ph + oh, pw : pw + ow] = dy
        if self.bias:
            self.gb = dy.sum(axis=(0, 2, 3)).astype(self.b.dtype, copy=False)

        gW = np.empty_like(self.W)
        dx_t = np.zeros((self.in_channels, B, ih, iw), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = dypad[:, :, i : i + ih * sh : sh, j : j + iw * sw : sw]
                gW[:, :, i, j] = np.tensordot(x, sl, axes=([0, 2, 3], [0, 2, 3]))
                # (Cin,Cout) . (B,Cout,IH,IW) -> (Cin,B,IH,IW)
                dx_t += np.tensordot(self.W[:, :, i, j], sl, axes=([1], [1]))
        self.gW = gW
        return np.ascontiguousarray(dx_t.transpose(1, 0, 2, 3))


class MaxPool2D(Layer):
    """Non-overlapping max pooling; odd trailing rows/columns are dropped.

    The gradient routes entirely to the (first) arg-max position of each
    window, so the routed gradient mass equals the upstream mass.
    """

    def __init__(self, factor: int = 2):
        self.factor = factor
        self._cache = None

    def forward(self, x, train):
        _check_4d(x, "maxpool input")
        f = self.factor
        B, C, H, W = x.shape
        oh, ow = H // f, W // f
        if oh < 1 or ow < 1:
            raise LayerError(f"maxpool factor {f} exceeds input {H}x{W}")
        if not train and f == 2:
            a = x[:, :, 0 : oh * 2 : 2, 0 : ow * 2 : 2]
            b = x[:, :, 0 : oh * 2 : 2, 1 : ow * 2 : 2]
            c = x[:, :, 1 : oh * 2 : 2, 0 : ow * 2 : 2]
            d = x[:, :, 1 : oh * 2 : 2, 1 : ow * 2 : 2]
            return np.maximum(np.maximum(a, b), np.maximum(c, d))
        blocks = x[:, :, : oh * f, : ow * f].reshape(B, C, oh, f, ow, f)
        if not train:
            return blocks.max(axis=(3, 5))
        win = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, f * f)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("maxpool backward without a cached training forward")
        x_shape, idx = self._cache
        self._cache = None
        f = self.factor
        B, C, H, W = x_shape
        oh, ow = H // f, W // f
        dwin = np.zeros((B, C, oh, ow, f * f), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, : oh * f, : ow * f] = (
            dwin.reshape(B, C, oh, ow, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh * f, ow * f)
        )
        return dx


class Upsample2D(Layer):
    """Nearest-neighbor upsampling by an integer factor."""

    def __init__(self, factor: int = 2):
        self.factor = factor
        self._cache = None

    def forward(self, x, train):
        _check_4d(x, "upsample input")
        f = self.factor
        if train:
            self._cache = x.shape
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("upsample backward without a cached training forward")
        B, C, H, W = self._cache
        self._cache = None
        f = self.factor
        return dy.reshape(B, C, H, f, W, f).sum(axis=(3, 5))


class BatchNorm2D(Layer):
    """Per-channel batch normalization with learned scale and shift.

    Training uses batch statistics and updates the running estimates with
    momentum 0.1; inference uses the running estimates and refuses to run
    before any training batch has been seen.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_tracked = 0
        self.track_running = True
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.ggamma, "beta": self.gbeta}

    def state(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "batches_tracked": np.array([self.batches_tracked], dtype=np.int64),
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.running_mean = state["running_mean"].astype(self.running_mean.dtype)
        self.running_var = state["running_var"].astype(self.running_var.dtype)
        self.batches_tracked = int(state["batches_tracked"][0])

    def astype(self, dtype):
        self.gamma = self.gamma.astype(dtype)
        self.beta = self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def forward(self, x, train):
        _check_4d(x, "batchnorm input")
        if x.shape[1] != self.channels:
            raise LayerError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.track_running:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(
                    self.running_mean.dtype
                )
                self.running_var = ((1 - m) * self.running_var + m * var).astype(
                    self.running_var.dtype
                )
                self.batches_tracked += 1
        else:
            if self.batches_tracked == 0:
                raise LayerError("batchnorm inference before any training batch")
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]
        if train:
            self._cache = (xhat, inv_std.astype(x.dtype))
        return out.astype(x.dtype, copy=False)

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("batchnorm backward without a cached training forward")
        xhat, inv_std = self._cache
        self._cache = None
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        self.ggamma = (dy * xhat).sum(axis=(0, 2, 3)).astype(self.gamma.dtype, copy=False)
        self.gbeta = dy.sum(axis=(0, 2, 3)).astype(self.beta.dtype, copy=False)
        g = self.gamma[None, :, None, None]
        sum_dy = dy.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = (g * inv_std[None, :, None, None] / n) * (n * dy - sum_dy - xhat * sum_dy_xhat)
        return dx.astype(dy.dtype, copy=False)


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("relu backward without a cached training forward")
        mask = self._cache
        self._cache = None
        return dy * mask


class Sigmoid(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        out = expit(x).astype(x.dtype, copy=False)
        if train:
            self._cache = out
        return out

    def backward(self, dy):
        if self._cache is None:
            raise LayerError("sigmoid backward without a cached training forward")
        out = self._cache
        self._cache = None
        return dy * out * (1.0 - out)
