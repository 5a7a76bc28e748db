"""Differentiable operations over :class:`~repmobile.tensor.Tensor`.

Convolutions use the cross-correlation convention (no kernel flip) with zero
padding. Broadcasting is limited to per-channel bias/affine terms and scalars.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ConfigError, DimensionError, PreconditionError
from .params import BnParams
from .tensor import Tensor, make_result

__all__ = [
    "conv2d",
    "rep_depthwise",
    "batchnorm",
    "relu",
    "add",
    "scale",
    "global_avg_pool",
    "softmax_t",
    "log_softmax",
    "cross_entropy",
    "kl_divergence",
    "kl_divergence_logits",
    "mean",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[N,Cin,F,T]`` with ``weight[Cout,Cin/groups,K0,K1]``."""
    s0, s1 = _pair(stride)
    p0, p1 = _pair(padding)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, k0, k1 = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"channels ({cin}, {cout}) not divisible by groups={groups}")
    if cin_g * groups != cin:
        raise DimensionError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if k0 < 1 or k1 < 1 or s0 < 1 or s1 < 1 or p0 < 0 or p1 < 0:
        raise ConfigError("kernel, stride and padding must be positive")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * p0 - k0) // s0 + 1
    wo = (w + 2 * p1 - k1) // s1 + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for kernel {k0}x{k1} with padding ({p0},{p1})")

    if groups == cin == cout and cin_g == 1:
        out, back = _conv_depthwise(x.data, weight.data, (s0, s1), (p0, p1), (ho, wo))
    elif groups == 1 and k0 == k1 == 1 and s0 == s1 == 1 and p0 == p1 == 0:
        out, back = _conv_pointwise(x.data, weight.data)
    else:
        out, back = _conv_grouped(x.data, weight.data, (s0, s1), (p0, p1), (ho, wo), groups)

    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw = back(g, x.requires_grad, weight.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)) if bias.requires_grad else None

    return make_result(out, "conv2d", inputs, backward)


def _conv_pointwise(x, w):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    w2 = w.reshape(cout, cin)
    x3 = x.reshape(n, cin, h * wd)
    out = np.matmul(w2, x3).reshape(n, cout, h, wd)

    def back(g, need_x, need_w):
        g3 = g.reshape(n, cout, h * wd)
        gx = np.matmul(w2.T, g3).reshape(x.shape) if need_x else None
        gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if need_w else None
        return gx, gw

    return out, back


def _im2col(xp, k, s, o):
    (k0, k1), (s0, s1), (ho, wo) = k, s, o
    win = sliding_window_view(xp, (k0, k1), axis=(2, 3))[:, :, : s0 * ho : s0, : s1 * wo : s1]
    n, c = xp.shape[:2]
    # (N, C, Ho, Wo, K0, K1) -> (N, C*K0*K1, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k0 * k1, ho * wo)


def _col2im(cols, xp_shape, k, s, o):
    (k0, k1), (s0, s1), (ho, wo) = k, s, o
    n, c = xp_shape[:2]
    cols = cols.reshape(n, c, k0, k1, ho, wo)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(k0):
        for j in range(k1):
            dxp[:, :, i : i + s0 * ho : s0, j : j + s1 * wo : s1] += cols[:, :, i, j]
    return dxp


def _conv_grouped(x, w, stride, padding, outsz, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, k0, k1 = w.shape
    p0, p1 = padding
    ho, wo = outsz
    xp = np.pad(x, ((0, 0), (0, 0), (p0, p0), (p1, p1))) if (p0 or p1) else x
    cout_g = cout // groups
    cols = []
    out = np.empty((n, cout, ho * wo), dtype=np.result_type(x, w))
    for gi in range(groups):
        c = _im2col(xp[:, gi * cin_g : (gi + 1) * cin_g], (k0, k1), stride, outsz)
        wg = w[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
        out[:, gi * cout_g : (gi + 1) * cout_g] = np.matmul(wg, c)
        cols.append(c)
    out = out.reshape(n, cout, ho, wo)

    def back(g, need_x, need_w):
        g3 = g.reshape(n, cout, ho * wo)
        gx = np.zeros(xp.shape, dtype=g.dtype) if need_x else None
        gw = np.empty_like(w) if need_w else None
        for gi in range(groups):
            gg = g3[:, gi * cout_g : (gi + 1) * cout_g]
            wg = w[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
            if need_w:
                gw[gi * cout_g : (gi + 1) * cout_g] = np.tensordot(gg, cols[gi], axes=([0, 2], [0, 2])).reshape(cout_g, cin_g, k0, k1)
            if need_x:
                dcols = np.matmul(wg.T, gg)
                gx[:, gi * cin_g : (gi + 1) * cin_g] = _col2im(dcols, (n, cin_g) + xp.shape[2:], (k0, k1), stride, outsz)
        if need_x:
            gx = gx[:, :, p0 : p0 + h, p1 : p1 + wd]
        return gx, gw

    return out, back


class _DwGeometry:
    """Shared padded flat layout for depthwise kernels with 'same'-aligned outputs."""

    def __init__(self, x, kernels, paddings, stride):
        n, c, h, w = x.shape
        self.n, self.c, self.h, self.w = n, c, h, w
        self.s0, self.s1 = stride
        self.P0 = max(p[0] for p in paddings)
        self.P1 = max(p[1] for p in paddings)
        grids = {(h + 2 * p[0] - k[0] + 1, w + 2 * p[1] - k[1] + 1) for k, p in zip(kernels, paddings)}
        if len(grids) != 1:
            raise DimensionError("depthwise branches produce differently shaped outputs")
        self.h1, self.w1 = grids.pop()
        if self.h1 < 1 or self.w1 < 1:
            raise DimensionError(f"input {h}x{w} too small for the depthwise kernels")
        self.ho = (self.h1 - 1) // self.s0 + 1
        self.wo = (self.w1 - 1) // self.s1 + 1
        self.hp, self.wp = h + 2 * self.P0, w + 2 * self.P1
        self.m = (self.h1 - 1) * self.wp + self.w1
        if self.P0 or self.P1:
            xp = np.zeros((n, c, self.hp, self.wp), dtype=x.dtype)
            xp[:, :, self.P0 : self.P0 + h, self.P1 : self.P1 + w] = x
        else:
            xp = np.ascontiguousarray(x)
        self.xp = xp.reshape(n, c, self.hp * self.wp)
        self.offsets = [(self.P0 - p[0], self.P1 - p[1]) for p in paddings]

    def _args(self, b):
        r0, c0 = self.offsets[b]
        return self.wp, self.m, r0, c0, self.s0, self.s1, self.ho, self.wo

    def forward(self, w3, b):
        """Branch ``b`` output as a compact (N, C, Ho*Wo) array."""
        return _kernels.dw_forward(self.xp, w3, *self._args(b))

    def forward_affine(self, w3, b, scale, shift, out):
        _kernels.dw_forward_affine(self.xp, w3, *self._args(b), scale, shift, out)

    def new_input_grad(self, dtype):
        return np.zeros((self.n, self.c, self.hp * self.wp), dtype=dtype)

    def backward(self, g3, w3, b, dxp, need_w):
        """Accumulate the input gradient into ``dxp`` (if given); return the float64 weight gradient or None."""
        need_x = dxp is not None
        if not (need_x or need_w):
            return None
        g3 = np.ascontiguousarray(g3)
        dst = dxp if need_x else np.empty((self.n, self.c, 0), dtype=g3.dtype)
        dw = _kernels.dw_backward(g3, self.xp, w3, *self._args(b), dst, need_x, need_w)
        return dw if need_w else None

    def crop(self, dxp):
        d = dxp.reshape(self.n, self.c, self.hp, self.wp)
        return np.ascontiguousarray(d[:, :, self.P0 : self.P0 + self.h, self.P1 : self.P1 + self.w])


def _conv_depthwise(x, w, stride, padding, outsz):
    c, _, k0, k1 = w.shape
    geo = _DwGeometry(x, [(k0, k1)], [padding], stride)
    w3 = np.ascontiguousarray(w.reshape(c, k0, k1))
    out = geo.forward(w3, 0).reshape(geo.n, c, geo.ho, geo.wo)

    def back(g, need_x, need_w):
        dxp = geo.new_input_grad(g.dtype) if need_x else None
        gw = geo.backward(g.reshape(geo.n, c, geo.ho * geo.wo), w3, 0, dxp, need_w)
        gx = geo.crop(dxp) if need_x else None
        return gx, (gw.astype(w.dtype).reshape(w.shape) if need_w else None)

    return out, back


def rep_depthwise(x: Tensor, branches, training: bool) -> Tensor:
    """Sum over parallel depthwise branches of ``BN_b(conv_b(x))``.

    ``branches`` is a sequence of ``(ConvParams, BnParams | None)``; a branch
    without BN adds its conv bias instead. Numerically this is the composition
    ``add(batchnorm(conv2d(x, ...)), ...)`` fused into one graph node so the
    padded input is shared and no per-branch normalized copies are kept.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"rep_depthwise expects 4-D input, got {x.shape}")
    if not branches:
        raise ConfigError("rep_depthwise needs at least one branch")
    c = x.shape[1]
    strides = {tuple(cv.stride) for cv, _ in branches}
    if len(strides) != 1:
        raise ConfigError(f"branches disagree on stride: {sorted(strides)}")
    for cv, bn in branches:
        if cv.groups != c or cv.weight.shape[:2] != (c, 1):
            raise DimensionError(f"branch weight {cv.weight.shape} is not depthwise over {c} channels")
        if bn is not None and bn.channels != c:
            raise DimensionError(f"BN has {bn.channels} channels, input has {c}")
    xd = x.data
    kernels = [cv.weight.shape[2:] for cv, _ in branches]
    geo = _DwGeometry(xd, kernels, [tuple(cv.padding) for cv, _ in branches], strides.pop())
    n, ho, wo = geo.n, geo.ho, geo.wo
    count = n * ho * wo
    out = np.zeros((n, c, ho * wo), dtype=xd.dtype)
    saved = []
    inputs: list[Tensor] = [x]
    for b, (cv, bn) in enumerate(branches):
        w3 = np.ascontiguousarray(cv.weight.data.reshape(c, *kernels[b]))
        inputs.append(cv.weight)
        if bn is None:
            shift = cv.bias.data if cv.bias is not None else np.zeros(c, xd.dtype)
            geo.forward_affine(w3, b, np.ones(c, xd.dtype), shift, out)
            if cv.bias is not None:
                inputs.append(cv.bias)
            saved.append((w3, None, None))
            continue
        if training:
            y = geo.forward(w3, b)
            stats = _bn_prepare(y, bn, training, count)
            _kernels.affine_accumulate(y, stats["scale"], stats["shift"], out)
        else:
            y = None
            stats = _bn_prepare(out, bn, training, count)  # eval: running stats only
            geo.forward_affine(w3, b, stats["scale"], stats["shift"], out)
        saved.append((w3, stats, y))
        inputs += [bn.gamma, bn.beta]
    out = out.reshape(n, c, ho, wo)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(n, c, ho * wo)
        grads: list[np.ndarray | None] = [None]
        dxp = geo.new_input_grad(g.dtype) if x.requires_grad else None
        for b, (cv, bn) in enumerate(branches):
            w3, stats, y = saved[b]
            gg = gb = None
            if bn is None:
                gy = g3
                gb = g3.sum(axis=(0, 2)) if cv.bias is not None else None
            elif training:
                sg, sgx = _kernels.bn_backward_sums(g3, y, stats["mean"], stats["inv"])
                gy = _kernels.bn_backward_input(g3, y, stats["mean"], stats["inv"], stats["gamma"], sg, sgx, float(count))
                gg, gb = sgx.astype(xd.dtype), sg.astype(xd.dtype)
            else:
                gy = g3 * stats["scale"][None, :, None]
                gg, gb = _eval_affine_grads(g3, stats, geo, w3, b)
            gw = geo.backward(gy, w3, b, dxp, cv.weight.requires_grad)
            grads.append(gw.astype(xd.dtype).reshape(cv.weight.shape) if gw is not None else None)
            if bn is None:
                if cv.bias is not None:
                    grads.append(gb)
            else:
                grads += [gg, gb]
        grads[0] = geo.crop(dxp) if dxp is not None else None
        return grads

    return make_result(out, "rep_depthwise", inputs, backward)


def _eval_affine_grads(g3, stats, geo, w3, b):
    # eval-mode BN parameter grads need the pre-BN conv output; recompute it
    y = geo.forward(w3, b)
    xhat = (y - stats["mean"][None, :, None].astype(y.dtype)) * stats["inv"][None, :, None].astype(y.dtype)
    return (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2))


def _bn_prepare(x3: np.ndarray, bn: BnParams, training: bool, count: int) -> dict:
    """Per-channel scale/shift for BN on an (N, C, L) array; updates running stats in train mode."""
    g64 = bn.gamma.data.astype(np.float64)
    if training:
        if count == 0:
            raise ConfigError("batchnorm in train mode needs a non-empty batch")
        if bn.eps <= 0:
            raise ConfigError("batchnorm in train mode needs eps > 0")
        mu, var = _kernels.bn_stats(x3)
        m = bn.momentum
        unbiased = var * (count / max(count - 1, 1))
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu
        bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased
    else:
        if np.any(bn.running_var < 0):
            raise PreconditionError("negative running variance")
        if bn.eps < 0:
            raise ConfigError("BN eps must be non-negative")
        mu = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + bn.eps)
    return {
        "mean": mu,
        "inv": inv,
        "gamma": g64,
        "scale": (g64 * inv).astype(x3.dtype),
        "shift": (bn.beta.data - mu * g64 * inv).astype(x3.dtype),
    }


# -- normalization -------------------------------------------------------------


def batchnorm(x: Tensor, bn: BnParams, training: bool) -> Tensor:
    """Per-channel batch normalization of ``x[N,C,F,T]``.

    In training mode the batch statistics over (N, F, T) normalize the input and
    the running statistics are updated in place with ``bn.momentum`` (unbiased
    variance). Eval mode uses the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if bn.channels != c:
        raise DimensionError(f"BN has {bn.channels} channels, input has {c}")
    gamma, beta = bn.gamma, bn.beta
    xd = x.data
    x3 = np.ascontiguousarray(xd).reshape(n, c, h * w)
    count = n * h * w
    st = _bn_prepare(x3, bn, training, count)
    out = _kernels.affine(x3, st["scale"], st["shift"]).reshape(xd.shape)
    mu, inv = st["mean"], st["inv"]

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(n, c, h * w)
        sg, sgx = _kernels.bn_backward_sums(g3, x3, mu, inv)
        gx = None
        if x.requires_grad:
            if training:
                gx = _kernels.bn_backward_input(g3, x3, mu, inv, st["gamma"], sg, sgx, float(count))
            else:
                gx = g3 * st["scale"][None, :, None]
            gx = gx.reshape(xd.shape)
        gg = sgx.astype(xd.dtype) if gamma.requires_grad else None
        gb = sg.astype(xd.dtype) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, "batchnorm_train" if training else "batchnorm_eval", (x, gamma, beta), backward)


# -- elementwise ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(g):
        return (g * (xd > 0),)

    return make_result(out, "relu", (x,), backward)


def add(x: Tensor, y) -> Tensor:
    """Elementwise sum; ``y`` may be a same-shaped tensor or a scalar."""
    if not isinstance(y, Tensor):
        if np.ndim(y) != 0:
            raise DimensionError("add only broadcasts scalars")
        c = y
        return make_result(x.data + np.asarray(c, dtype=x.dtype), "add_scalar", (x,), lambda g: (g,))
    if x.shape != y.shape:
        raise DimensionError(f"add shape mismatch {x.shape} vs {y.shape}")
    return make_result(x.data + y.data, "add", (x, y), lambda g: (g, g))


def scale(x: Tensor, a: float) -> Tensor:
    a = float(a)
    return make_result(x.data * x.dtype.type(a), "scale", (x,), lambda g: (g * g.dtype.type(a),))


def mean(x: Tensor) -> Tensor:
    """Mean of all entries, as a 0-d tensor."""
    n = x.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result(out, "global_avg_pool", (x,), backward)


# -- probabilistic heads ---------------------------------------------------------


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_t(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax ``softmax(logits / tau)`` along the last axis."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    p = _softmax_np(logits.data / logits.dtype.type(tau))

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / logits.dtype.type(tau),)

    return make_result(p, "softmax_t", (logits,), backward)


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    t = logits.dtype.type(tau)
    ls = _log_softmax_np(logits.data / t)
    p = np.exp(ls)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / t,)

    return make_result(ls, "log_softmax", (logits,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [N,C] logits and N labels, got {logits.shape}, {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ConfigError("cross_entropy needs at least one sample")
    if labels.min() < 0 or labels.max() >= c:
        raise PreconditionError("label index out of range")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def backward(g):
        d = np.exp(ls)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


def _check_distribution(d: np.ndarray, what: str, atol: float = 1e-4) -> None:
    # loose enough for float32 softmax rows and finite-difference probes
    if d.ndim != 2:
        raise DimensionError(f"{what} must be [N,C], got {d.shape}")
    if np.any(d < 0) or np.any(np.abs(d.sum(axis=1) - 1) > atol):
        raise PreconditionError(f"{what} rows must be non-negative and sum to 1")


def kl_divergence(p: Tensor, q) -> Tensor:
    """Batch-mean ``KL(q || p) = sum_c q_c (log q_c - log p_c)``.

    ``q`` is the reference (teacher) distribution and is treated as a constant;
    gradients flow into the model distribution ``p``. ``0 log 0`` is taken as 0.
    """
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=p.dtype)
    if p.shape != qd.shape:
        raise DimensionError(f"kl_divergence shape mismatch {p.shape} vs {qd.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(qd, "q")
    n = p.shape[0]
    pos = qd > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, qd * (np.log(np.where(pos, qd, 1)) - np.log(p.data)), 0.0)
    loss = terms.sum(axis=1).mean()

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(pos, -qd / p.data, 0.0)
        return ((d * (g / n)).astype(p.dtype),)

    return make_result(np.asarray(loss, dtype=p.dtype), "kl_divergence", (p,), backward)


def kl_divergence_logits(student: Tensor, teacher, tau: float) -> Tensor:
    """``kl_divergence(softmax_t(student, tau), softmax_t(teacher, tau))`` in log space.

    Equal in value to the composed form but stays finite when the sharpened
    distributions have entries far below the float range.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    td = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=student.dtype)
    if student.shape != td.shape or student.data.ndim != 2:
        raise DimensionError(f"kl_divergence_logits expects matching [N,C], got {student.shape} vs {td.shape}")
    t = student.dtype.type(tau)
    log_p = _log_softmax_np(student.data / t)
    log_q = _log_softmax_np(td.astype(student.dtype) / t)
    q = np.exp(log_q)
    n = student.shape[0]
    loss = (q * (log_q - log_p)).sum(axis=1).mean()

    def backward(g):
        return ((np.exp(log_p) - q) * (g / (n * t)),)

    return make_result(np.asarray(max(loss, 0.0), dtype=student.dtype), "kl_divergence_logits", (student,), backward)
