"""Neural-network primitives on top of :mod:`gapnet.tensorcore`.

Functional forms (``conv2d``, ``batchnorm2d``, ...) are differentiable
primitives with hand-written gradient rules. The ``Module`` classes hold
parameters and buffers and give them stable dotted names for checkpoints.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensorcore as tc
from .tensorcore import Parameter, ShapeError, Tensor, count_macs, primitive, unbroadcast


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    """Cross-correlation of ``x`` [N, Cin, H, W] with ``weight`` [Cout, Cin/groups, kh, kw]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N, C, H, W], got {x.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(f"input has {cin} channels; weight {weight.shape} with groups={groups}")
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"degenerate conv output {ho}x{wo} from input {h}x{w}")
    xd = x.data
    wd = weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    hp, wp = xp.shape[2], xp.shape[3]

    def window(i: int, j: int) -> tuple[slice, slice]:
        return (
            slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
            slice(j * dw, j * dw + sw * (wo - 1) + 1, sw),
        )

    count_macs(n * cout * ho * wo * cin_g * kh * kw)
    depthwise = groups == cin and cin_g == 1 and cout == cin
    cols = None
    if groups == 1:
        cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                rs, cs = window(i, j)
                cols[:, :, i, j] = xp[:, :, rs, cs]
        cols = cols.reshape(n, cin * kh * kw, ho * wo)
        out = np.matmul(wd.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    elif depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                rs, cs = window(i, j)
                out += xp[:, :, rs, cs] * wd[None, :, 0, i, j, None, None]
    else:
        og = cout // groups
        xg = xp.reshape(n, groups, cin_g, hp, wp)
        wg = wd.reshape(groups, og, cin_g, kh, kw)
        out = np.zeros((n, groups, og, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                rs, cs = window(i, j)
                out += np.einsum("ngchw,goc->ngohw", xg[:, :, :, rs, cs], wg[:, :, :, i, j])
        out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad(g):
        gxp = np.zeros_like(xp)
        if groups == 1:
            g2 = g.reshape(n, cout, ho * wo)
            gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(wd.reshape(cout, -1).T, g2).reshape(n, cin, kh, kw, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = window(i, j)
                    gxp[:, :, rs, cs] += gcols[:, :, i, j]
        elif depthwise:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = window(i, j)
                    gw[:, 0, i, j] = (g * xp[:, :, rs, cs]).sum(axis=(0, 2, 3))
                    gxp[:, :, rs, cs] += g * wd[None, :, 0, i, j, None, None]
        else:
            og = cout // groups
            xg = xp.reshape(n, groups, cin_g, hp, wp)
            wg = wd.reshape(groups, og, cin_g, kh, kw)
            gg = g.reshape(n, groups, og, ho, wo)
            gxg = gxp.reshape(n, groups, cin_g, hp, wp)
            gwg = np.zeros_like(wg)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = window(i, j)
                    gwg[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, xg[:, :, :, rs, cs])
                    gxg[:, :, :, rs, cs] += np.einsum("ngohw,goc->ngchw", gg, wg[:, :, :, i, j])
            gw = gwg.reshape(wd.shape)
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return primitive(out, parents, grad)


# ---------------------------------------------------------------------------
# normalisation


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over (N, H, W) per channel.

    Training mode normalises with the biased batch variance and updates the
    running buffers in place (unbiased variance, like the common frameworks).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    count_macs(x.size)
    if training:
        if m < 2:
            raise ShapeError(f"batch norm in train mode needs >= 2 values per channel, got {m}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd, bd = gamma.data, beta.data
    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    def grad(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gg, gb

    return primitive(out.astype(xd.dtype), (x, gamma, beta), grad)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its trailing channel axis."""
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"layernorm: {c} channels vs gamma {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    count_macs(x.size)

    def grad(g):
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gb = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gamma.data
        gx = (inv / c) * (c * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return primitive(out.astype(xd.dtype), (x, gamma, beta), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out [Cin, Cout]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    y = tc.matmul(x, weight)
    return tc.add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# resampling


def pool_bins(size: int, m: int) -> list[tuple[int, int]]:
    """Half-open [floor(i*size/m), ceil((i+1)*size/m)) bins."""
    return [((i * size) // m, -((-(i + 1) * size) // m)) for i in range(m)]


def adaptive_avg_pool2d(x: Tensor, m: int) -> Tensor:
    n, c, h, w = x.shape
    if not 1 <= m <= min(h, w):
        raise ShapeError(f"pool size {m} outside [1, {min(h, w)}]")
    rows, cols = pool_bins(h, m), pool_bins(w, m)
    xd = x.data
    out = np.empty((n, c, m, m), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    count_macs(x.size)

    def grad(g):
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return primitive(out, (x,), grad)


def bilinear_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for half-pixel-centre bilinear resampling."""
    coord = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coord = np.clip(coord, 0.0, src - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coord - lo


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Plain-array bilinear resize of the two trailing axes."""
    h2, w2 = size
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"zero output extent {size}")
    lo, hi, wy = bilinear_taps(x.shape[-2], h2)
    wy = wy.astype(x.dtype)[:, None]
    top, bot = x[..., lo, :], x[..., hi, :]
    rows = top + wy * (bot - top)
    lo, hi, wx = bilinear_taps(x.shape[-1], w2)
    left, right = rows[..., lo], rows[..., hi]
    return left + wx.astype(x.dtype) * (right - left)


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    n, c, h, w = x.shape
    h2, w2 = int(size[0]), int(size[1])
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"zero output extent {size}")
    if (h2, w2) == (h, w):
        return x
    out = resize_bilinear(x.data, (h2, w2))
    count_macs(out.size)
    ylo, yhi, wy = bilinear_taps(h, h2)
    xlo, xhi, wx = bilinear_taps(w, w2)

    def grad(g):
        wxc = wx.astype(g.dtype)
        grow = np.zeros((n, c, h2, w), dtype=g.dtype)
        np.add.at(grow, (slice(None), slice(None), slice(None), xlo), g * (1 - wxc))
        np.add.at(grow, (slice(None), slice(None), slice(None), xhi), g * wxc)
        wyc = wy.astype(g.dtype)[:, None]
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), ylo), grow * (1 - wyc))
        np.add.at(gx, (slice(None), slice(None), yhi), grow * wyc)
        return (gx,)

    return primitive(out, (x,), grad)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Container of parameters, buffers and child modules.

    Attribute assignment registers children in insertion order, which fixes
    the parameter order (and so the initialisation and checkpoint order).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
            object.__setattr__(value, "_scope_name", name)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        counter = tc.active_counter()
        if counter is None:
            return self.forward(*args, **kwargs)
        with counter.scope(getattr(self, "_scope_name", type(self).__name__)):
            return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"checkpoint is missing tensor {missing[0]!r}")
        unexpected = [k for k in state if k not in own]
        if unexpected:
            raise KeyError(f"checkpoint has unexpected tensor {unexpected[0]!r}")
        for k, arr in own.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ShapeError(f"{k}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, m in self.children():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m._buffers:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, m in self.children():
            yield from m.modules()


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=0, dilation=1, groups=1, bias=True, rng=None):
        super().__init__()
        kh, kw = _pair(kernel)
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"groups={groups} must divide {in_channels} and {out_channels}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = (kh, kw), _pair(stride)
        self.padding, self.dilation = _pair(padding), _pair(dilation)
        self.groups = groups
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels // groups * kh * kw
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels // groups, kh, kw), fan_in))
        if bias:
            self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))
        else:
            self.bias = None

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
            conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return layernorm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        std = 1.0 / math.sqrt(in_features)
        self.weight = Parameter((rng.standard_normal((in_features, out_features)) * std).astype(np.float32))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return tc.relu(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for _, layer in self.children():
            x = layer(x)
        return x


class ConvBNReLU(Sequential):
    def __init__(self, cin, cout, kernel=1, stride=1, groups=1, relu=True, rng=None):
        k = _pair(kernel)
        layers = [
            Conv2d(cin, cout, k, stride, ((k[0] - 1) // 2, (k[1] - 1) // 2), groups=groups, bias=False, rng=rng),
            BatchNorm2d(cout),
        ]
        if relu:
            layers.append(ReLU())
        super().__init__(*layers)


__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "ConvBNReLU",
    "LayerNorm",
    "Linear",
    "Module",
    "ReLU",
    "Sequential",
    "adaptive_avg_pool2d",
    "batchnorm2d",
    "bilinear_upsample",
    "conv2d",
    "layernorm",
    "linear",
    "resize_bilinear",
    "unbroadcast",
]
