"""Differentiable layer primitives: convolution, transpose convolution,
batch normalization and factor-two downsampling, for 2D and 3D fields.

Convolutions are cross-correlations (no kernel flip). Two forward paths exist
behind one interface: ``method="im2col"`` (default, windowed GEMM) and
``method="direct"`` (explicit loops, slow; the reference for tests).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_op

# im2col buffers are built per batch chunk to bound peak memory
_CHUNK_BYTES = 64 * 2**20


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int, padding: int, op: str):
    r = x.ndim - 2
    if r not in (2, 3):
        raise ShapeError(f"{op}: expected 4D or 5D input, got {x.ndim}D")
    if w.ndim != x.ndim:
        raise ShapeError(f"{op}: kernel rank {w.ndim} does not match input rank {x.ndim}")
    ks = w.shape[2:]
    if len(set(ks)) != 1:
        raise ShapeError(f"{op}: kernel must be cubic, got spatial extents {ks}")
    k = ks[0]
    if k % 2 == 0:
        raise ShapeError(f"{op}: kernel spatial extent must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be non-negative, got {padding}")
    return r, k


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_extent(
    n: int, k: int, stride: int, padding: int, output_padding: int = 0
) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    r = x.ndim - 2
    return np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * r)


def _taps(r: int, k: int):
    return list(itertools.product(range(k), repeat=r))


def _tap_slice(offs, stride: int, out: tuple[int, ...]):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out)
    )


def _chunks(batch: int, per_sample_bytes: int):
    step = max(1, _CHUNK_BYTES // max(per_sample_bytes, 1))
    for lo in range(0, batch, step):
        yield slice(lo, min(batch, lo + step))


def _im2col(xp: np.ndarray, k: int, stride: int, out: tuple[int, ...]) -> np.ndarray:
    """Patch matrix (b, C*k^r, prod(out)) with rows ordered (channel, tap)."""
    r = xp.ndim - 2
    b, C = xp.shape[:2]
    P = int(np.prod(out))
    taps = _taps(r, k)
    cols = np.empty((b, C, len(taps)) + out)
    for t, offs in enumerate(taps):
        cols[:, :, t] = xp[_tap_slice(offs, stride, out)]
    return cols.reshape(b, C * len(taps), P)


# Stride-1 fast path. A padded field flattened to length L holds every tap
# window as one contiguous slice of the same "frame": output node i lives at
# flat index sum(i_a * st_a), so tap t is frame + off_t. Frame slots that
# fall on padding columns are junk in outputs and must be zero in inputs.


def _frame(padded: tuple[int, ...], out: tuple[int, ...], k: int):
    st = [int(np.prod(padded[a + 1 :])) for a in range(len(padded))]
    span = sum((o - 1) * s for o, s in zip(out, st)) + 1
    offs = [sum(t * s for t, s in zip(tap, st)) for tap in _taps(len(padded), k)]
    return st, span, offs


def _frame_view(frame: np.ndarray, out: tuple[int, ...], st) -> np.ndarray:
    return np.lib.stride_tricks.as_strided(
        frame, shape=frame.shape[:2] + tuple(out), strides=frame.strides[:2] + tuple(8 * s for s in st),
        writeable=frame.flags.writeable,
    )


def _to_frame(g: np.ndarray, st, span: int) -> np.ndarray:
    fr = np.zeros(g.shape[:2] + (span,))
    _frame_view(fr, g.shape[2:], st)[...] = g
    return fr


def _flat(xp: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(xp).reshape(xp.shape[0], xp.shape[1], -1)


def _correlate_s1(xp: np.ndarray, w: np.ndarray, out: tuple[int, ...]) -> np.ndarray:
    O, C, k = w.shape[0], w.shape[1], w.shape[-1]
    st, span, offs = _frame(xp.shape[2:], out, k)
    wt = np.ascontiguousarray(np.moveaxis(w.reshape(O, C, -1), 2, 0))  # (T, O, C)
    xf = _flat(xp)
    y = np.matmul(wt[0], xf[:, :, offs[0] : offs[0] + span])
    tmp = np.empty_like(y)
    for t in range(1, len(offs)):
        np.matmul(wt[t], xf[:, :, offs[t] : offs[t] + span], out=tmp)
        y += tmp
    return _frame_view(y, out, st).copy()


def _scatter_s1(g: np.ndarray, w: np.ndarray, padded: tuple[int, ...]) -> np.ndarray:
    B, O = g.shape[:2]
    C, k = w.shape[1], w.shape[-1]
    st, span, offs = _frame(padded, g.shape[2:], k)
    wt = np.ascontiguousarray(np.moveaxis(w.reshape(O, C, -1), 2, 0).transpose(0, 2, 1))  # (T, C, O)
    gf = _to_frame(g, st, span)
    res = np.zeros((B, C, int(np.prod(padded))))
    tmp = np.empty((B, C, span))
    for t, off in enumerate(offs):
        np.matmul(wt[t], gf, out=tmp)
        res[:, :, off : off + span] += tmp
    return res.reshape((B, C) + tuple(padded))


def _kernel_grad_s1(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    O, C = g.shape[1], xp.shape[1]
    st, span, offs = _frame(xp.shape[2:], g.shape[2:], k)
    gf = _to_frame(g, st, span)
    xf = _flat(xp)
    acc = np.empty((len(offs), O, C))
    for t, off in enumerate(offs):
        acc[t] = np.matmul(gf, xf[:, :, off : off + span].transpose(0, 2, 1)).sum(axis=0)
    return acc.transpose(1, 2, 0).reshape((O, C) + (k,) * (xp.ndim - 2))


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, out: tuple[int, ...]) -> np.ndarray:
    """Cross-correlate padded ``xp`` (B,C,*) with ``w`` (O,C,*k) -> (B,O,*out)."""
    if stride == 1:
        return _correlate_s1(xp, w, out)
    k = w.shape[-1]
    B, C = xp.shape[:2]
    O = w.shape[0]
    wmat = w.reshape(O, -1)
    P = int(np.prod(out))
    y = np.empty((B, O, P))
    for sl in _chunks(B, wmat.shape[1] * P * 8):
        y[sl] = np.matmul(wmat, _im2col(xp[sl], k, stride, out))
    return y.reshape((B, O) + out)


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, padded: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_correlate` w.r.t. its input: (B,O,*out) -> (B,C,*padded)."""
    if stride == 1:
        return _scatter_s1(g, w, tuple(padded))
    r = g.ndim - 2
    k = w.shape[-1]
    B, O = g.shape[:2]
    out = g.shape[2:]
    C = w.shape[1]
    P = int(np.prod(out))
    taps = _taps(r, k)
    # rows ordered (tap, channel) so each tap's block is contiguous
    wt = np.ascontiguousarray(np.moveaxis(w.reshape(O, C, -1), 2, 0).transpose(0, 2, 1)).reshape(-1, O)
    res = np.zeros((B, C) + tuple(padded))
    g3 = g.reshape(B, O, P)
    for sl in _chunks(B, wt.shape[0] * P * 8):
        cols = np.matmul(wt, g3[sl])  # (b, taps*C, P)
        b = cols.shape[0]
        target = res[sl]
        for t, offs in enumerate(taps):
            target[_tap_slice(offs, stride, out)] += cols[:, t * C : (t + 1) * C].reshape((b, C) + out)
    return res


def _kernel_grad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gradient of a correlation w.r.t. its kernel: (O, C, *k)."""
    if stride == 1:
        return _kernel_grad_s1(xp, g, k)
    r = xp.ndim - 2
    out = g.shape[2:]
    B, C = xp.shape[:2]
    O = g.shape[1]
    P = int(np.prod(out))
    g3 = g.reshape(B, O, P)
    acc = np.zeros((O, C * k**r))
    for sl in _chunks(B, C * k**r * P * 8):
        cols = _im2col(xp[sl], k, stride, out)
        acc += np.matmul(g3[sl], cols.transpose(0, 2, 1)).sum(axis=0)
    return acc.reshape((O, C) + (k,) * r)


def _crop(a: np.ndarray, padding: int, out: tuple[int, ...]) -> np.ndarray:
    sl = (slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in out)
    return a[sl]


def conv(
    input: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    method: str = "im2col",
) -> Tensor:
    """N-d cross-correlation. ``input`` (B,C,*S), ``kernel`` (O,C,*k), ``bias`` (O,)."""
    x, w = as_tensor(input), as_tensor(kernel)
    r, k = _check_conv_args(x.data, w.data, stride, padding, "conv")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv: channel axis mismatch, input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    out = tuple(conv_output_extent(n, k, stride, padding) for n in x.shape[2:])
    for ax, n in enumerate(out):
        if n < 1:
            raise ShapeError(f"conv: spatial axis {ax + 2} too small for kernel {k}")
    xp = _pad(x.data, padding)
    if method == "direct":
        y = conv_direct(x.data, w.data, stride, padding)
    elif method == "im2col":
        y = _correlate(xp, w.data, stride, out)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    parents: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv: bias shape {b.shape} does not match {w.shape[0]} output channels")
        y = y + b.data.reshape((1, -1) + (1,) * r)
        parents = parents + (b,)
    wd = w.data
    in_shape = x.shape[2:]
    need_gx = x.requires_grad

    def bw(g):
        gx = _crop(_scatter(g, wd, stride, xp.shape[2:]), padding, in_shape) if need_gx else None
        gw = _kernel_grad(xp, g, k, stride)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + r)))

    return make_op("conv", y, parents, bw)


def conv_transpose(
    input: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
    method: str = "im2col",
) -> Tensor:
    """Adjoint of :func:`conv`. ``kernel`` is (Cin, Cout, *k), ``bias`` (Cout,).

    Output extent is ``(n - 1)*stride - 2*padding + k + output_padding``;
    ``output_padding=stride-1`` inverts a same-padded strided conv on even extents.
    """
    x, w = as_tensor(input), as_tensor(kernel)
    r, k = _check_conv_args(x.data, w.data, stride, padding, "conv_transpose")
    if stride not in (1, 2):
        raise ValueError(f"conv_transpose: stride must be 1 or 2, got {stride}")
    if not 0 <= output_padding < stride or output_padding > 0 and stride == 1:
        raise ValueError(f"conv_transpose: output_padding must be < stride, got {output_padding}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose: channel axis mismatch, input has {x.shape[1]} channels, kernel expects {w.shape[0]}"
        )
    n_in = x.shape[2:]
    out = tuple(conv_transpose_output_extent(n, k, stride, padding, output_padding) for n in n_in)
    for ax, n in enumerate(out):
        if n < 1:
            raise ShapeError(f"conv_transpose: spatial axis {ax + 2} would be empty")
    padded = tuple(n + 2 * padding for n in out)
    if method == "direct":
        y = conv_transpose_direct(x.data, w.data, stride, padding, output_padding)
    elif method == "im2col":
        y = _crop(_scatter(x.data, w.data, stride, padded), padding, out).copy()
    else:
        raise ValueError(f"unknown conv method {method!r}")
    parents: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"conv_transpose: bias shape {b.shape} does not match {w.shape[1]} channels")
        y = y + b.data.reshape((1, -1) + (1,) * r)
        parents = parents + (b,)
    wd, xd = w.data, x.data
    need_gx = x.requires_grad

    def bw(g):
        gp = _pad(g, padding)
        gx = _correlate(gp, wd, stride, n_in) if need_gx else None
        # kernel (Cin, Cout, k): role of conv kernel's (O, C) is (Cin, Cout)
        gw = _kernel_grad(gp, xd, k, stride)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + r)))

    return make_op("conv_transpose", y, parents, bw)


def conv_direct(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Reference correlation by explicit loops over output sites and taps."""
    r = x.ndim - 2
    k = w.shape[-1]
    xp = _pad(x, padding)
    out = tuple(conv_output_extent(n, k, stride, padding) for n in x.shape[2:])
    B, C = x.shape[:2]
    O = w.shape[0]
    y = np.zeros((B, O) + out)
    for b in range(B):
        for o in range(O):
            for site in itertools.product(*(range(n) for n in out)):
                acc = 0.0
                for c in range(C):
                    for tap in itertools.product(range(k), repeat=r):
                        src = tuple(s * stride + t for s, t in zip(site, tap))
                        acc += w[(o, c) + tap] * xp[(b, c) + src]
                y[(b, o) + site] = acc
    return y


def conv_transpose_direct(
    x: np.ndarray, w: np.ndarray, stride: int, padding: int, output_padding: int = 0
) -> np.ndarray:
    """Reference transpose correlation: every input site scatters its taps."""
    r = x.ndim - 2
    k = w.shape[-1]
    B, Cin = x.shape[:2]
    Cout = w.shape[1]
    out = tuple(
        conv_transpose_output_extent(n, k, stride, padding, output_padding) for n in x.shape[2:]
    )
    full = np.zeros((B, Cout) + tuple(n + 2 * padding for n in out))
    for b in range(B):
        for ci in range(Cin):
            for site in itertools.product(*(range(n) for n in x.shape[2:])):
                v = x[(b, ci) + site]
                for co in range(Cout):
                    for tap in itertools.product(range(k), repeat=r):
                        dst = tuple(s * stride + t for s, t in zip(site, tap))
                        full[(b, co) + dst] += v * w[(ci, co) + tap]
    return _crop(full, padding, out).copy()


class Reducer(Protocol):
    """Cross-worker sum used by synchronized batch normalization."""

    def allreduce_sum(self, values: np.ndarray) -> np.ndarray: ...


@dataclass
class BNState:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BNState":
        return BNState(self.mean.copy(), self.var.copy())


BN_EPS = 1e-5


def batchnorm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    training: bool,
    momentum: float = 0.1,
    reducer: Reducer | None = None,
) -> Tensor:
    """Per-channel batch normalization over (batch, spatial).

    In training mode the batch statistics normalize the input and are blended
    into ``state`` with weight ``momentum`` (running variance is unbiased).
    With a ``reducer`` the statistics and the backward sums span all workers.
    """
    x, gm, bt = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gm.shape != (C,) or bt.shape != (C,) or state.mean.shape != (C,):
        raise ShapeError(
            f"batchnorm: channel mismatch, input has {C} channels, gamma {gm.shape}, "
            f"beta {bt.shape}, running stats {state.mean.shape}"
        )
    r = x.ndim - 2
    axes = (0,) + tuple(range(2, 2 + r))
    bshape = (1, C) + (1,) * r
    xd = x.data

    def total(v):
        return v if reducer is None else reducer.allreduce_sum(v)

    if not training:
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (xd - state.mean.reshape(bshape)) * inv.reshape(bshape)
        y = xhat * gm.data.reshape(bshape) + bt.data.reshape(bshape)
        gd = gm.data

        def bw_eval(g):
            return (
                g * (gd * inv).reshape(bshape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return make_op("batchnorm", y, (x, gm, bt), bw_eval)

    local_n = xd.size // C
    s = total(np.concatenate([xd.sum(axis=axes), [float(local_n)]]))
    n = s[-1]
    mu = s[:-1] / n
    xc = xd - mu.reshape(bshape)
    var = total((xc * xc).sum(axis=axes)) / n
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv.reshape(bshape)
    y = xhat * gm.data.reshape(bshape) + bt.data.reshape(bshape)

    unbiased = var * n / max(n - 1.0, 1.0)
    state.mean = (1.0 - momentum) * state.mean + momentum * mu
    state.var = (1.0 - momentum) * state.var + momentum * unbiased
    gd = gm.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        sums = total(np.concatenate([dbeta, dgamma]))
        mg = (sums[:C] / n).reshape(bshape)
        mgx = (sums[C:] / n).reshape(bshape)
        gx = (gd * inv).reshape(bshape) * (g - mg - xhat * mgx)
        return gx, dgamma, dbeta

    return make_op("batchnorm", y, (x, gm, bt), bw)


def downsample2(input: Tensor, mode: str = "mean") -> Tensor:
    """Halve every spatial axis by mean or max pooling over 2^r blocks."""
    x = as_tensor(input)
    r = x.ndim - 2
    for ax, n in enumerate(x.shape[2:]):
        if n % 2:
            raise ShapeError(f"downsample2: spatial axis {ax + 2} has odd extent {n}")
    B, C = x.shape[:2]
    split = (B, C) + tuple(v for n in x.shape[2:] for v in (n // 2, 2))
    pair_axes = tuple(3 + 2 * i for i in range(r))
    blocks = x.data.reshape(split)
    shape = x.shape
    if mode == "mean":
        y = blocks.mean(axis=pair_axes)
        scale = 0.5**r

        def bw(g):
            ge = np.expand_dims(g, pair_axes)
            return (np.broadcast_to(ge * scale, split).reshape(shape).copy(),)

    elif mode == "max":
        y = blocks.max(axis=pair_axes)
        # first maximal entry of each block takes the gradient
        moved = np.moveaxis(blocks, pair_axes, tuple(range(-r, 0)))
        flat = moved.reshape(moved.shape[: 2 + r] + (-1,))
        arg = flat.argmax(axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        onehot = onehot.reshape(moved.shape)

        def bw(g):
            ge = onehot * g.reshape(g.shape + (1,) * r)
            back = np.moveaxis(ge, tuple(range(-r, 0)), pair_axes)
            return (back.reshape(shape),)

    else:
        raise ValueError(f"downsample2: unknown mode {mode!r}")
    return make_op("downsample2", y, (x,), bw)
