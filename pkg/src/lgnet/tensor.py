"""Dense float64 arrays with reverse-mode automatic differentiation.

A tiny eager autodiff engine: every operation computes its result
immediately and, when any input participates in gradient tracking,
records a closure that routes the output gradient back to its inputs.
Gradients are accumulated by calling :meth:`Tensor.backward` on a
result, optionally seeding it with an externally computed gradient.

Everything is float64 and every primitive validates that its result is
finite; NaN or Inf anywhere is treated as a hard error rather than a
value to propagate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvSpec",
    "relu",
    "sigmoid",
    "affine",
    "matmul",
    "conv2d",
    "global_avg_pool",
    "roi_max_pool",
    "roi_max_pool_batch",
    "stack",
    "check_gradients",
    "conv_output_extent",
]


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer.

    Leaf tensors are created directly (``Tensor(data, requires_grad=True)``
    for parameters); results of primitives carry hidden references to
    their inputs so that ``backward`` can replay the graph in reverse
    topological order. Values are immutable by convention after a
    forward pass; gradient accumulation is single-writer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @classmethod
    def _make(
        cls,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: Callable[[], None],
        op: str,
    ) -> "Tensor":
        """Internal constructor for op results; drops the graph when no
        parent tracks gradients."""
        _ensure_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- backward ------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor's inputs.

        ``grad`` seeds the output gradient; it defaults to ones and is
        only optional for scalar outputs. Seeding with an externally
        computed gradient is how analytic loss gradients enter the graph.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {seed.shape} != output shape {self.data.shape}"
                )
        order = self._topo_order()
        self._accumulate(seed)
        for node in order:
            if node._backward is not None:
                node._backward()

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS; returns nodes in reverse topological order
        # (output first) so gradients flow parents-last.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        order.reverse()
        return order

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        data = a.data + b.data
        _check_same_or_scalar(a, b, "add")

        def backward():
            out_grad = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(out_grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(out_grad, b.data.shape))

        out = Tensor._make(data, (a, b), backward, "add")
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        a = self
        data = -a.data

        def backward():
            if a.requires_grad:
                a._accumulate(-out.grad)

        out = Tensor._make(data, (a,), backward, "neg")
        return out

    def __sub__(self, other):
        return self.__add__(-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other).__add__(-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _check_same_or_scalar(a, b, "mul")
        data = a.data * b.data

        def backward():
            out_grad = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(out_grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(out_grad * a.data, b.data.shape))

        out = Tensor._make(data, (a, b), backward, "mul")
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def sum(self, axis: int | None = None) -> "Tensor":
        a = self
        data = np.asarray(a.data.sum(axis=axis))

        def backward():
            if not a.requires_grad:
                return
            g = out.grad
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

        out = Tensor._make(data, (a,), backward, "sum")
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape) if np.prod(shape, dtype=int) == 1 else grad.reshape(shape)


# -- elementwise nonlinearities -----------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). Subgradient at 0 is 0."""
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * mask)

    out = Tensor._make(data, (x,), backward, "relu")
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, computed in the overflow-safe split form."""
    data = _sigmoid_stable(x.data)

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * data * (1.0 - data))

    out = Tensor._make(data, (x,), backward, "sigmoid")
    return out


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- linear maps ---------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a single vector, or row-batched for a matrix.

    ``x`` may be shape [n] (returns [m]) or [N, n] (returns [N, m]);
    ``weight`` is [m, n], ``bias`` is [m].
    """
    w, b = weight, bias
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"affine: bad weight/bias shapes {w.shape}, {b.shape}")
    if x.data.ndim == 1:
        if x.data.shape[0] != w.data.shape[1]:
            raise ValueError(f"affine: x has {x.data.shape[0]} features, weight expects {w.data.shape[1]}")
        data = w.data @ x.data + b.data

        def backward():
            g = out.grad
            if w.requires_grad:
                w._accumulate(np.outer(g, x.data))
            if x.requires_grad:
                x._accumulate(w.data.T @ g)
            if b.requires_grad:
                b._accumulate(g)

    elif x.data.ndim == 2:
        if x.data.shape[1] != w.data.shape[1]:
            raise ValueError(f"affine: x has {x.data.shape[1]} features, weight expects {w.data.shape[1]}")
        data = x.data @ w.data.T + b.data[None, :]

        def backward():
            g = out.grad
            if w.requires_grad:
                w._accumulate(g.T @ x.data)
            if x.requires_grad:
                x._accumulate(g @ w.data)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))

    else:
        raise ValueError(f"affine: x must be rank 1 or 2, got rank {x.data.ndim}")

    out = Tensor._make(data, (x, w, b), backward, "affine")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out = Tensor._make(data, (a, b), backward, "matmul")
    return out


# -- convolution ----------------------------------------------------------------


class ConvSpec:
    """Geometry of a 2-D cross-correlation: stride, dilation, zero padding."""

    __slots__ = ("stride", "dilation", "padding")

    def __init__(self, stride: int = 1, dilation: int = 1, padding: int = 0):
        if stride < 1 or dilation < 1 or padding < 0:
            raise ValueError(f"bad conv spec: stride={stride} dilation={dilation} padding={padding}")
        self.stride = int(stride)
        self.dilation = int(dilation)
        self.padding = int(padding)


def conv_output_extent(extent: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    """Output size of one spatial axis; raises if the kernel does not fit."""
    effective = dilation * (kernel - 1) + 1
    out = (extent + 2 * padding - effective) // stride + 1
    if out < 1:
        raise ValueError(
            f"conv produces non-positive extent: input {extent}, kernel {kernel}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )
    return out


def _im2col_indices(channels, kh, kw, out_h, out_w, stride, dilation):
    i0 = np.tile(np.repeat(np.arange(kh) * dilation, kw), channels)
    j0 = np.tile(np.tile(np.arange(kw) * dilation, kh), channels)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    ii = i0[:, None] + i1[None, :]
    jj = j0[:, None] + j1[None, :]
    kk = np.repeat(np.arange(channels), kh * kw)[:, None]
    return kk, ii, jj


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Dilated 2-D cross-correlation with zero padding.

    ``x`` is [C, H, W] or batched [N, C, H, W]; ``kernels`` is
    [K, C, kh, kw]; ``bias`` is [K]. The output has the matching rank.
    Differentiable with respect to all three tensor arguments.
    """
    spec = ConvSpec(stride, dilation, padding)
    squeezed = x.data.ndim == 3
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 3 or 4, got rank {x.data.ndim}")
    wd = kernels.data
    if wd.ndim != 4:
        raise ValueError(f"conv2d: kernels must be rank 4, got rank {wd.ndim}")
    n, c, h, w = xd.shape
    k, kc, kh, kw = wd.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if bias.data.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({k},)")
    out_h = conv_output_extent(h, kh, spec.stride, spec.dilation, spec.padding)
    out_w = conv_output_extent(w, kw, spec.stride, spec.dilation, spec.padding)

    p = spec.padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    kk, ii, jj = _im2col_indices(c, kh, kw, out_h, out_w, spec.stride, spec.dilation)
    cols = xp[:, kk, ii, jj]  # [N, C*kh*kw, out_h*out_w]
    wmat = wd.reshape(k, -1)
    data = (np.matmul(wmat, cols) + bias.data[None, :, None]).reshape(n, k, out_h, out_w)
    if squeezed:
        data = data[0]

    def backward():
        g = out.grad
        gmat = (g[None] if squeezed else g).reshape(n, k, -1)
        if kernels.requires_grad:
            dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            kernels._accumulate(dw.reshape(wd.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)  # [N, C*kh*kw, L]
            dxp = np.zeros_like(xp)
            np.add.at(dxp, (slice(None), kk, ii, jj), dcols)
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
            x._accumulate(dx[0] if squeezed else dx)

    out = Tensor._make(data, (x, kernels, bias), backward, "conv2d")
    return out


# -- pooling ------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    if x.data.ndim == 3:
        axes = (1, 2)
    elif x.data.ndim == 4:
        axes = (2, 3)
    else:
        raise ValueError(f"global_avg_pool: input must be rank 3 or 4, got {x.data.ndim}")
    spatial = x.data.shape[-1] * x.data.shape[-2]
    if spatial == 0:
        raise ValueError("global_avg_pool: empty spatial extent")
    data = x.data.mean(axis=axes)

    def backward():
        if x.requires_grad:
            g = out.grad
            expanded = g[..., None, None] / spatial
            x._accumulate(np.broadcast_to(expanded, x.data.shape).copy())

    out = Tensor._make(data, (x,), backward, "global_avg_pool")
    return out


def _bin_edges(start: int, count: int, bins: int) -> list[tuple[int, int]]:
    # Near-equal integer partition of [start, start+count) into `bins`
    # pieces; every piece is forced to span at least one cell, so pieces
    # overlap when count < bins.
    edges = []
    for b in range(bins):
        lo = start + (b * count) // bins
        hi = start + ((b + 1) * count) // bins
        if hi <= lo:
            hi = lo + 1
        edges.append((lo, hi))
    return edges


def _quantize_roi(box, fh: int, fw: int, image_w: int, image_h: int) -> tuple[int, int, int, int]:
    """Scale a pixel-space box onto the cell grid, round, and repair boxes
    that collapse under quantization to a single cell."""
    sx = fw / float(image_w)
    sy = fh / float(image_h)
    ix0 = min(max(int(round(box.x_min * sx)), 0), fw - 1)
    iy0 = min(max(int(round(box.y_min * sy)), 0), fh - 1)
    ix1 = min(max(int(round(box.x_max * sx)), 0), fw)
    iy1 = min(max(int(round(box.y_max * sy)), 0), fh)
    if ix1 <= ix0:
        ix1 = ix0 + 1
    if iy1 <= iy0:
        iy1 = iy0 + 1
    return ix0, iy0, ix1, iy1


def _pool_rect(
    data: np.ndarray, rect: tuple[int, int, int, int], out_h: int, out_w: int, chans: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Max and row-major argmax (flat spatial index) per bin of one rect."""
    c = data.shape[0]
    fw = data.shape[2]
    ix0, iy0, ix1, iy1 = rect
    pooled = np.empty((c, out_h, out_w))
    argpos = np.empty((c, out_h, out_w), dtype=np.intp)
    for bi, (r0, r1) in enumerate(_bin_edges(iy0, iy1 - iy0, out_h)):
        for bj, (c0, c1) in enumerate(_bin_edges(ix0, ix1 - ix0, out_w)):
            block = data[:, r0:r1, c0:c1].reshape(c, -1)
            idx = block.argmax(axis=1)
            pooled[:, bi, bj] = block[chans, idx]
            width = c1 - c0
            argpos[:, bi, bj] = (r0 + idx // width) * fw + (c0 + idx % width)
    return pooled, argpos


def roi_max_pool(
    x: Tensor,
    box,
    out_h: int,
    out_w: int,
    image_w: int,
    image_h: int,
) -> Tensor:
    """Quantized max pooling of a box region into an out_h x out_w grid.

    Box coordinates live in image pixel space; they are scaled onto the
    feature map's cell grid and rounded. The region is split into
    near-equal integer bins (each at least one cell), the maximum of each
    bin is taken per channel, and gradients flow to the argmax cell, with
    ties resolved to the first cell in row-major order.
    """
    if x.data.ndim != 3:
        raise ValueError(f"roi_max_pool: feature map must be rank 3, got {x.data.ndim}")
    if out_h < 1 or out_w < 1:
        raise ValueError("roi_max_pool: output grid must be at least 1x1")
    c, fh, fw = x.data.shape
    rect = _quantize_roi(box, fh, fw, image_w, image_h)
    chans = np.arange(c)
    data, argpos = _pool_rect(x.data, rect, out_h, out_w, chans)

    def backward():
        if x.requires_grad:
            dx = np.zeros((c, fh * fw))
            ch_idx = np.broadcast_to(chans[:, None, None], argpos.shape)
            np.add.at(dx, (ch_idx, argpos), out.grad)
            x._accumulate(dx.reshape(c, fh, fw))

    out = Tensor._make(data, (x,), backward, "roi_max_pool")
    return out


def _merge_max(v1, i1, v2, i2):
    # combine (max, first-argmax) summaries of two cell sets; on value ties
    # the smaller flat index (earlier in row-major order) wins
    greater = v2 > v1
    v = np.where(greater, v2, v1)
    if i1 is None:
        return v, None
    i = np.where(greater, i2, np.where(v1 == v2, np.minimum(i1, i2), i1))
    return v, i


def _sparse_max_tables(data: np.ndarray, kr_max: int, kc_max: int, track_argmax: bool):
    """2-D sparse tables for O(1) range-max queries.

    tables[(kr, kc)] holds, for every valid start cell, the (max, argmax)
    summary of the 2^kr x 2^kc block anchored there.
    """
    c, h, w = data.shape
    idx0 = None
    if track_argmax:
        flat = (np.arange(h, dtype=np.intp)[:, None] * w + np.arange(w, dtype=np.intp)[None, :])
        idx0 = np.broadcast_to(flat, data.shape)
    tables = {(0, 0): (data, idx0)}
    for kc in range(1, kc_max + 1):
        v, i = tables[(0, kc - 1)]
        half = 1 << (kc - 1)
        tables[(0, kc)] = _merge_max(
            v[:, :, :-half], None if i is None else i[:, :, :-half],
            v[:, :, half:], None if i is None else i[:, :, half:],
        )
    for kr in range(1, kr_max + 1):
        for kc in range(0, kc_max + 1):
            v, i = tables[(kr - 1, kc)]
            half = 1 << (kr - 1)
            tables[(kr, kc)] = _merge_max(
                v[:, :-half, :], None if i is None else i[:, :-half, :],
                v[:, half:, :], None if i is None else i[:, half:, :],
            )
    return tables


def roi_max_pool_batch(
    x: Tensor,
    boxes: Sequence,
    out_h: int,
    out_w: int,
    image_w: int,
    image_h: int,
) -> Tensor:
    """Pool many boxes from one feature map: returns [d, C, out_h, out_w].

    Bin-for-bin identical to :func:`roi_max_pool` per box, including the
    first-cell tie-break, but bins are answered as O(1) range-max queries
    against sparse tables and the whole gradient scatter happens in one
    pass, so the per-proposal cost is a few gathers.
    """
    if x.data.ndim != 3:
        raise ValueError(f"roi_max_pool_batch: feature map must be rank 3, got {x.data.ndim}")
    if not boxes:
        raise ValueError("roi_max_pool_batch: need at least one box")
    c, fh, fw = x.data.shape
    track = x.requires_grad

    # unique quantized rects; duplicate proposals share everything
    rect_of_box: list[int] = []
    rect_index: dict[tuple[int, int, int, int], int] = {}
    rects: list[tuple[int, int, int, int]] = []
    for box in boxes:
        rect = _quantize_roi(box, fh, fw, image_w, image_h)
        if rect not in rect_index:
            rect_index[rect] = len(rects)
            rects.append(rect)
        rect_of_box.append(rect_index[rect])

    # one query per (unique rect, output bin)
    u = len(rects)
    n_bins = out_h * out_w
    q_r0 = np.empty(u * n_bins, dtype=np.intp)
    q_r1 = np.empty_like(q_r0)
    q_c0 = np.empty_like(q_r0)
    q_c1 = np.empty_like(q_r0)
    for ri, (ix0, iy0, ix1, iy1) in enumerate(rects):
        rows = _bin_edges(iy0, iy1 - iy0, out_h)
        cols = _bin_edges(ix0, ix1 - ix0, out_w)
        base = ri * n_bins
        for bi, (r0, r1) in enumerate(rows):
            for bj, (c0, c1) in enumerate(cols):
                q = base + bi * out_w + bj
                q_r0[q], q_r1[q], q_c0[q], q_c1[q] = r0, r1, c0, c1

    # level = floor(log2(span)), via an exact small lookup table
    lut = np.array([0] + [n.bit_length() - 1 for n in range(1, max(fh, fw) + 1)], dtype=np.intp)
    kr_all = lut[q_r1 - q_r0]
    kc_all = lut[q_c1 - q_c0]
    tables = _sparse_max_tables(x.data, int(kr_all.max()), int(kc_all.max()), track)

    pooled_u = np.empty((c, u * n_bins))
    argpos_u = np.empty((c, u * n_bins), dtype=np.intp) if track else None
    for kr, kc in {(int(a), int(b)) for a, b in zip(kr_all, kc_all)}:
        sel = np.flatnonzero((kr_all == kr) & (kc_all == kc))
        v_tab, i_tab = tables[(kr, kc)]
        r0, c0 = q_r0[sel], q_c0[sel]
        r1, c1 = q_r1[sel] - (1 << kr), q_c1[sel] - (1 << kc)
        v, i = v_tab[:, r0, c0], None if i_tab is None else i_tab[:, r0, c0]
        for rr, cc in ((r0, c1), (r1, c0), (r1, c1)):
            v, i = _merge_max(v, i, v_tab[:, rr, cc], None if i_tab is None else i_tab[:, rr, cc])
        pooled_u[:, sel] = v
        if track:
            argpos_u[:, sel] = i

    gather = np.asarray(rect_of_box, dtype=np.intp)
    data = (
        pooled_u.reshape(c, u, out_h, out_w).transpose(1, 0, 2, 3)[gather].copy()
    )
    if track:
        argpos = argpos_u.reshape(c, u, out_h, out_w).transpose(1, 0, 2, 3)[gather]

    def backward():
        if x.requires_grad:
            dx = np.zeros((c, fh * fw))
            ch_idx = np.broadcast_to(np.arange(c)[None, :, None, None], argpos.shape)
            np.add.at(dx, (ch_idx, argpos), out.grad)
            x._accumulate(dx.reshape(c, fh, fw))

    out = Tensor._make(data, (x,), backward, "roi_max_pool_batch")
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: need at least one tensor")
    data = np.stack([t.data for t in tensors], axis=0)

    def backward():
        g = out.grad
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    out = Tensor._make(data, tuple(tensors), backward, "stack")
    return out


# -- verification ---------------------------------------------------------------


def check_gradients(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of a scalar composite against
    central finite differences.

    ``f`` rebuilds the forward pass from the current parameter values on
    every call and must return a scalar tensor. Returns the worst relative
    error over every entry of every parameter, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("check_gradients: f must be scalar-valued")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite objective at perturbed point")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
