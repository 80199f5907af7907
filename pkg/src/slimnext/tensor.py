"""Dense float tensors, the ConvNeXt kernel set, and reverse-mode gradients.

Images are channels-last (batch, height, width, channels), so restricting a
layer to its first ``c`` channels is a zero-copy strided view of the last
axis. All kernels run in the dtype of their inputs: float32 in production,
float64 when a test oracle re-executes the same code at higher precision.

Every kernel uses fixed-order numpy reductions, so identical inputs produce
bit-identical outputs run to run.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ChannelOverflowError, ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-dimensional array of reals plus autodiff metadata.

    Tensors are immutable values once created; only the optimizer mutates
    parameter storage, and it owns that exclusively. ``trainable`` marks
    leaves whose gradients :meth:`GradTape.backward` should report.
    """

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.size == 0:
            raise ShapeError("tensors must have all extents >= 1")
        self.data = arr
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class GradTape:
    """Ordered record of executed differentiable operations.

    Each entry holds the op's output and a backward closure mapping the
    output gradient to ``(input, grad)`` pairs. Replaying entries in reverse
    execution order accumulates gradients for every trainable leaf that was
    read; leaves never read stay at exactly zero (they are simply absent
    from the result). Backward closures must return freshly allocated
    arrays — returning a view of the incoming gradient corrupts sibling
    accumulation paths.

    A tape also instruments parameter access: for every trainable leaf it
    remembers the largest prefix box read (whole shape unless the leaf was
    consumed through :func:`slice_prefix`). A tape belongs to one thread.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._leaves: dict[int, Tensor] = {}
        self._boxes: dict[int, tuple[int, ...]] = {}

    def record(self, out: Tensor, bwd, reads=()) -> None:
        """Append an op; ``reads`` lists (tensor, prefix_box|None) accesses."""
        for tensor, box in reads:
            if tensor.trainable:
                self._note_read(tensor, box)
        self._entries.append((out, bwd))

    def _note_read(self, tensor: Tensor, box: tuple[int, ...] | None) -> None:
        if box is None:
            box = tensor.data.shape
        key = id(tensor)
        self._leaves[key] = tensor
        prev = self._boxes.get(key)
        if prev is None:
            self._boxes[key] = tuple(box)
        else:
            self._boxes[key] = tuple(max(a, b) for a, b in zip(prev, box))

    def leaf_usage(self) -> dict[Tensor, tuple[int, ...]]:
        """Prefix box of entries read per trainable leaf, as instrumented."""
        return {self._leaves[k]: box for k, box in self._boxes.items()}

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every trainable leaf that was read.

        The loss must be scalar-valued. Returns full-shape gradient arrays;
        entries of a leaf outside its accessed prefix box are exactly zero.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for out, bwd in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gt in bwd(g):
                key = id(tensor)
                acc = grads.get(key)
                if acc is None:
                    grads[key] = gt
                else:
                    acc += gt
        return {
            leaf: grads[key]
            for key, leaf in self._leaves.items()
            if key in grads
        }


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run the tape's reverse pass from a scalar loss."""
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# MAC instrumentation

class MacCounter:
    """Multiply-accumulate tally incremented inside every conv/linear kernel."""

    def __init__(self):
        self.total = 0


_ACTIVE_COUNTER: MacCounter | None = None


@contextmanager
def count_macs():
    """Count MACs executed by kernels inside the block: ``with count_macs() as c``."""
    global _ACTIVE_COUNTER
    prev = _ACTIVE_COUNTER
    counter = MacCounter()
    _ACTIVE_COUNTER = counter
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER = prev


def _add_macs(n: int) -> None:
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.total += n


# ---------------------------------------------------------------------------
# Shape checks

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _require_rank(t: Tensor, rank: int, what: str) -> None:
    if t.data.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}")


# ---------------------------------------------------------------------------
# Kernels

def conv2d_pointwise(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """1x1 convolution: per-position channel mixing, out = x @ w + b.

    x: (N,H,W,Cin), w: (Cin,Cout), b: (Cout,). Counts N*H*W*Cin*Cout MACs.
    """
    _require_rank(x, 4, "pointwise input")
    _require_rank(w, 2, "pointwise weight")
    _require_rank(b, 1, "pointwise bias")
    n, h, wi, cin = x.shape
    if w.shape[0] != cin:
        raise ShapeError(
            f"channel axis mismatch: input has {cin} channels, weight expects {w.shape[0]}"
        )
    cout = w.shape[1]
    if b.shape[0] != cout:
        raise ShapeError(
            f"bias axis mismatch: weight produces {cout} channels, bias has {b.shape[0]}"
        )
    xf = x.data.reshape(-1, cin)
    y = (xf @ w.data + b.data).reshape(n, h, wi, cout)
    _add_macs(n * h * wi * cin * cout)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gf = g.reshape(-1, cout)
            gx = (gf @ w.data.T).reshape(x.data.shape)
            gw = xf.T @ gf
            gb = gf.sum(axis=0)
            return ((x, gx), (w, gw), (b, gb))
        tape.record(out, bwd, reads=((x, None), (w, None), (b, None)))
    return out


def conv2d_depthwise(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Per-channel kxk convolution with zero padding (k-1)/2, spatial size kept.

    x: (N,H,W,C), w: (k,k,C), b: (C,). k must be odd. Counts N*H*W*C*k^2 MACs.
    """
    _require_rank(x, 4, "depthwise input")
    _require_rank(w, 3, "depthwise weight")
    _require_rank(b, 1, "depthwise bias")
    n, h, wi, c = x.shape
    k = w.shape[0]
    if w.shape[1] != k:
        raise ShapeError(f"depthwise kernel must be square, got {w.shape[:2]}")
    if k % 2 == 0:
        raise ContractError(f"unsupported even depthwise kernel size {k}")
    if w.shape[2] != c or b.shape[0] != c:
        raise ShapeError(
            f"channel axis mismatch: input has {c} channels, "
            f"weight has {w.shape[2]}, bias has {b.shape[0]}"
        )
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, wi + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + wi, :] = x.data
    y = np.zeros((n, h, wi, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            y += xp[:, i:i + h, j:j + wi, :] * w.data[i, j]
    y += b.data
    _add_macs(n * h * wi * c * k * k)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gb = g.sum(axis=(0, 1, 2))
            gw = np.empty_like(w.data)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    win = xp[:, i:i + h, j:j + wi, :]
                    gw[i, j] = (win * g).sum(axis=(0, 1, 2))
                    gxp[:, i:i + h, j:j + wi, :] += g * w.data[i, j]
            gx = gxp[:, pad:pad + h, pad:pad + wi, :]
            return ((x, gx), (w, gw), (b, gb))
        tape.record(out, bwd, reads=((x, None), (w, None), (b, None)))
    return out


def conv2d_strided(x: Tensor, w: Tensor, b: Tensor, stride: int,
                   tape: GradTape | None = None) -> Tensor:
    """Non-overlapping patch projection: kxk convolution with k == stride.

    x: (N,H,W,Cin), w: (k,k,Cin,Cout), b: (Cout,). H and W must divide by
    the stride. Counts N*(H/s)*(W/s)*k^2*Cin*Cout MACs.
    """
    _require_rank(x, 4, "strided-conv input")
    _require_rank(w, 4, "strided-conv weight")
    _require_rank(b, 1, "strided-conv bias")
    n, h, wi, cin = x.shape
    k = w.shape[0]
    if w.shape[1] != k:
        raise ShapeError(f"strided kernel must be square, got {w.shape[:2]}")
    if k != stride:
        raise ContractError(
            f"kernel size {k} must equal stride {stride} (non-overlapping patches)"
        )
    if w.shape[2] != cin:
        raise ShapeError(
            f"channel axis mismatch: input has {cin} channels, weight expects {w.shape[2]}"
        )
    if h % stride or wi % stride:
        raise ShapeError(
            f"spatial extents {(h, wi)} not divisible by stride {stride}"
        )
    cout = w.shape[3]
    if b.shape[0] != cout:
        raise ShapeError(
            f"bias axis mismatch: weight produces {cout} channels, bias has {b.shape[0]}"
        )
    ho, wo = h // stride, wi // stride
    patches = (
        x.data.reshape(n, ho, stride, wo, stride, cin)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n * ho * wo, stride * stride * cin)
    )
    wf = w.data.reshape(stride * stride * cin, cout)
    y = (patches @ wf + b.data).reshape(n, ho, wo, cout)
    _add_macs(n * ho * wo * k * k * cin * cout)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gf = g.reshape(n * ho * wo, cout)
            gw = (patches.T @ gf).reshape(w.data.shape)
            gb = gf.sum(axis=0)
            gx = (
                (gf @ wf.T)
                .reshape(n, ho, wo, stride, stride, cin)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(n, h, wi, cin)
            )
            return ((x, gx), (w, gw), (b, gb))
        tape.record(out, bwd, reads=((x, None), (w, None), (b, None)))
    return out


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6,
                        tape: GradTape | None = None) -> Tensor:
    """Normalize each position over its channel entries (biased variance).

    Statistics are taken over the last axis only, so the op adapts to
    whatever channel count the current slice carries.
    """
    if eps <= 0.0:
        raise ContractError(f"layer norm eps must be > 0, got {eps}")
    _require_rank(gamma, 1, "layer norm gamma")
    _require_rank(beta, 1, "layer norm beta")
    c = x.shape[-1]
    if gamma.shape[0] != c or beta.shape[0] != c:
        raise ShapeError(
            f"channel axis mismatch: input has {c} channels, "
            f"gamma has {gamma.shape[0]}, beta has {beta.shape[0]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            gflat = g.reshape(-1, c)
            gbeta = gflat.sum(axis=0)
            ggamma = (gflat * xhat.reshape(-1, c)).sum(axis=0)
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
            return ((x, gx), (gamma, ggamma), (beta, gbeta))
        tape.record(out, bwd, reads=((x, None), (gamma, None), (beta, None)))
    return out


def gelu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF (via erf)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    cdf = cdf.astype(x.dtype, copy=False)
    out = Tensor(x.data * cdf)
    if tape is not None:
        def bwd(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            return ((x, g * (cdf + x.data * pdf.astype(x.dtype, copy=False))),)
        tape.record(out, bwd, reads=((x, None),))
    return out


def global_avg_pool(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Mean over the spatial axes: (N,H,W,C) -> (N,C)."""
    _require_rank(x, 4, "global pool input")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))
    if tape is not None:
        def bwd(g):
            gx = np.tile((g / (h * w))[:, None, None, :], (1, h, w, 1))
            return ((x, gx),)
        tape.record(out, bwd, reads=((x, None),))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Affine map on feature vectors: (N,Din) @ (Din,Dout) + (Dout,)."""
    _require_rank(x, 2, "linear input")
    _require_rank(w, 2, "linear weight")
    _require_rank(b, 1, "linear bias")
    n, din = x.shape
    if w.shape[0] != din:
        raise ShapeError(
            f"feature axis mismatch: input has {din} features, weight expects {w.shape[0]}"
        )
    dout = w.shape[1]
    if b.shape[0] != dout:
        raise ShapeError(
            f"bias axis mismatch: weight produces {dout} features, bias has {b.shape[0]}"
        )
    y = x.data @ w.data + b.data
    _add_macs(n * din * dout)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            return ((x, g @ w.data.T), (w, x.data.T @ g), (b, g.sum(axis=0)))
        tape.record(out, bwd, reads=((x, None), (w, None), (b, None)))
    return out


def residual_add_zero_pad(block_out: Tensor, skip: Tensor,
                          tape: GradTape | None = None) -> Tensor:
    """skip + [block_out ‖ zeros] along the channel axis.

    The branch may be narrower than the skip; its missing channels
    contribute zero, so the skip passes through them unchanged.
    """
    _require_rank(block_out, 4, "residual branch")
    _require_rank(skip, 4, "residual skip")
    ca = block_out.shape[-1]
    c = skip.shape[-1]
    if ca > c:
        raise ChannelOverflowError(
            f"branch has {ca} channels but skip has only {c}"
        )
    if block_out.shape[:3] != skip.shape[:3]:
        raise ShapeError(
            f"batch/spatial mismatch: branch {block_out.shape[:3]} vs skip {skip.shape[:3]}"
        )
    y = skip.data.copy()
    y[..., :ca] += block_out.data
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            # copies: both returned grads must not alias g's buffer
            return ((skip, g.copy()), (block_out, g[..., :ca].copy()))
        tape.record(out, bwd, reads=((block_out, None), (skip, None)))
    return out


def slice_prefix(x: Tensor, limits: tuple[int, ...],
                 tape: GradTape | None = None) -> Tensor:
    """Restrict a tensor to the leading box x[:l0, :l1, ...] without copying.

    Backward scatters the gradient into a zero array of the full shape, so
    entries outside the box receive exactly zero. The instrumented access
    box on a trainable leaf is exactly ``limits``.
    """
    if len(limits) != x.data.ndim:
        raise ShapeError(
            f"slice limits {limits} do not match tensor rank {x.data.ndim}"
        )
    for axis, (lim, ext) in enumerate(zip(limits, x.shape)):
        if not 1 <= lim <= ext:
            raise ShapeError(
                f"slice limit {lim} out of range for axis {axis} with extent {ext}"
            )
    box = tuple(slice(0, l) for l in limits)
    out = Tensor(x.data[box])
    if tape is not None:
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[box] = g
            return ((x, gx),)
        tape.record(out, bwd, reads=((x, tuple(limits)),))
    return out


def slice_channels(x: Tensor, c: int, tape: GradTape | None = None) -> Tensor:
    """Keep the first c channels of a channels-last tensor."""
    return slice_prefix(x, x.shape[:-1] + (c,), tape)


def channel_scale(x: Tensor, g: Tensor, tape: GradTape | None = None) -> Tensor:
    """Multiply each channel by a learnable per-channel factor."""
    _require_rank(g, 1, "channel scale")
    c = x.shape[-1]
    if g.shape[0] != c:
        raise ShapeError(
            f"channel axis mismatch: input has {c} channels, scale has {g.shape[0]}"
        )
    out = Tensor(x.data * g.data)
    if tape is not None:
        def bwd(grad):
            gg = (grad * x.data).reshape(-1, c).sum(axis=0)
            return ((x, grad * g.data), (g, gg))
        tape.record(out, bwd, reads=((x, None), (g, None)))
    return out


def scale_rows(x: Tensor, scale: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Multiply each sample by a fixed scalar (drop-path mask application).

    ``scale`` is a constant of shape (N,); no gradient flows into it.
    """
    if scale.shape != (x.shape[0],):
        raise ShapeError(
            f"batch axis mismatch: input batch {x.shape[0]}, scale has shape {scale.shape}"
        )
    s = scale.astype(x.dtype, copy=False).reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = Tensor(x.data * s)
    if tape is not None:
        def bwd(g):
            return ((x, g * s),)
        tape.record(out, bwd, reads=((x, None),))
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, smoothing: float = 0.0,
                          tape: GradTape | None = None) -> Tensor:
    """Mean smoothed cross-entropy over the batch, stabilized by max-subtraction.

    The target distribution puts 1 - smoothing on the true class and spreads
    smoothing uniformly over all classes. Reduction is the mean over the
    batch (the summed objective rescaled by 1/N, keeping learning rates
    batch-size-stable).
    """
    _require_rank(logits, 2, "logits")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {smoothing}")
    n, k = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {t.shape}")
    if t.min() < 0 or t.max() >= k:
        raise ContractError(
            f"target class out of range [0, {k}): min {t.min()}, max {t.max()}"
        )
    t = t.astype(np.int64)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    lse = m + np.log(ez.sum(axis=1, keepdims=True))
    picked = z[np.arange(n), t]
    nll = lse[:, 0] - (1.0 - smoothing) * picked - (smoothing / k) * z.sum(axis=1)
    out = Tensor(np.asarray(nll.mean(), dtype=z.dtype))
    if tape is not None:
        def bwd(g):
            p = ez / ez.sum(axis=1, keepdims=True)
            dist = np.full_like(z, smoothing / k)
            dist[np.arange(n), t] += 1.0 - smoothing
            return ((logits, (p - dist) * (g / n)),)
        tape.record(out, bwd, reads=((logits, None),))
    return out
