"""Sliding capsule convolution and its analytic gradients.

The forward pass slides a 7-axis kernel ``(kh, kw, Cin, Cout, g, n, p)`` over
a 7-axis feature map ``(B, C, H, W, g, m, n)`` with valid padding and equal
stride on both spatial axes (cross-correlation: no kernel flip). At each
output position and group g, the (m, n) input capsule slices inside the
receptive field right-multiply the kernel's (n, p) slices and the products
are summed over the window and the input channels, giving (B, Cout, Ho, Wo,
g, m, p). There is no routing and no bias term.

Internally the window extraction is a zero-copy strided view which is then
packed once per call into a (g, B*Ho*Wo*m, Cin*kh*kw*n) matrix, so both
directions of the pass are single batched GEMMs plus one scatter. The
scatter back onto the input (col2im) walks kernel offsets in a fixed order
over disjoint strided slabs, which keeps backward bitwise deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided
from threadpoolctl import threadpool_limits

from .tensor_core import CapsuleShape, FeatureMapShape, KernelShape, ShapeError


def single_thread_blas():
    """Pin BLAS pools to one thread for the enclosed compute region.

    Batch-axis chunking is the engine's only parallelism knob; letting BLAS
    spawn its own pool underneath it both oversubscribes cores and makes
    reduction order (hence bitwise output) depend on the library build.
    """
    return threadpool_limits(limits=1)


def chunk_slices(n: int, workers: int):
    """Split range(n) into at most `workers` contiguous, near-even slices."""
    if n < 1:
        raise ValueError("nothing to chunk")
    k = max(1, min(int(workers), n))
    base, extra = divmod(n, k)
    out = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(slice(start, start + size))
        start += size
    return out

def map_batch_chunks(fn, n: int, threads: int, cap: int | None = None) -> list:
    """Apply fn to contiguous index slices of range(n); results in slice order.

    `cap` bounds rows per chunk: one oversized chunk materializes
    cache-hostile packed intermediates (measured 1.6x slower at 200 rows
    than 4x50 on one core), so extra chunks just queue on the same pool.
    Chunk boundaries depend on (n, threads, cap) only, never on timing.
    """
    pieces = max(1, min(int(threads), n))
    if cap is not None:
        pieces = max(pieces, -(-n // cap))
    slices = chunk_slices(n, pieces)
    if threads <= 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=min(threads, len(slices))) as pool:
        return list(pool.map(fn, slices))


@dataclass
class ConvGradients:
    wrt_input: np.ndarray | None
    wrt_kernel: np.ndarray


def infer_output_shape(fmap: FeatureMapShape, kernel: KernelShape,
                       stride: int) -> FeatureMapShape:
    """Valid-padding output shape; raises ShapeError if the pair cannot convolve."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if fmap.channels != kernel.in_channels:
        raise ShapeError(
            f"channel mismatch: map has {fmap.channels}, kernel expects "
            f"{kernel.in_channels}")
    cap = fmap.capsule
    if cap.g != kernel.g or cap.n != kernel.n:
        raise ShapeError(
            f"capsule mismatch: map (g={cap.g}, n={cap.n}) vs kernel "
            f"(g={kernel.g}, n={kernel.n})")
    if kernel.kh > fmap.height or kernel.kw > fmap.width:
        raise ShapeError(
            f"kernel {kernel.kh}x{kernel.kw} larger than map "
            f"{fmap.height}x{fmap.width}")
    ho = (fmap.height - kernel.kh) // stride + 1
    wo = (fmap.width - kernel.kw) // stride + 1
    return FeatureMapShape(fmap.batch, kernel.out_channels, ho, wo,
                           CapsuleShape(cap.g, cap.m, kernel.p))


def _shapes_of(x: np.ndarray, kernel: np.ndarray) -> tuple[FeatureMapShape, KernelShape]:
    if x.ndim != 7:
        raise ShapeError(f"feature map must have 7 axes, got shape {x.shape}")
    if kernel.ndim != 7:
        raise ShapeError(f"kernel must have 7 axes, got shape {kernel.shape}")
    b, c, h, w, g, m, n = x.shape
    kh, kw, ci, co, kg, kn, p = kernel.shape
    return (FeatureMapShape(b, c, h, w, CapsuleShape(g, m, n)),
            KernelShape(kh, kw, ci, co, kg, kn, p))


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int,
                 ho: int, wo: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw, g, m, n); reads only, never written through
    b, c = x.shape[:2]
    g, m, n = x.shape[4:]
    s = x.strides
    return as_strided(
        x,
        shape=(b, c, ho, wo, kh, kw, g, m, n),
        strides=(s[0], s[1], stride * s[2], stride * s[3], s[2], s[3],
                 s[4], s[5], s[6]))


def _pack_cols(x, kh, kw, stride, ho, wo):
    """im2col: (g, B*Ho*Wo*m, C*kh*kw*n) copy of all receptive fields."""
    b, c = x.shape[:2]
    g, m, n = x.shape[4:]
    view = _window_view(x, kh, kw, stride, ho, wo)
    # -> (g, B, Ho, Wo, m, C, kh, kw, n); reshape forces the single copy
    cols = view.transpose(6, 0, 2, 3, 7, 1, 4, 5, 8)
    return cols.reshape(g, b * ho * wo * m, c * kh * kw * n)


def _pack_kernel(kernel):
    """Kernel as (g, C*kh*kw*n, Co*p), contraction axes matching _pack_cols."""
    kh, kw, c, co, g, n, p = kernel.shape
    kmat = kernel.transpose(4, 2, 0, 1, 5, 3, 6)  # (g, C, kh, kw, n, Co, p)
    return kmat.reshape(g, c * kh * kw * n, co * p)


def conv_forward(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Capsule convolution of x (B,C,H,W,g,m,n) with kernel (kh,kw,C,Co,g,n,p)."""
    fshape, kshape = _shapes_of(x, kernel)
    oshape = infer_output_shape(fshape, kshape, stride)
    b, _, h, w, g, m, n = x.shape
    kh, kw, c, co, _, _, p = kernel.shape
    ho, wo = oshape.height, oshape.width

    cols = _pack_cols(x, kh, kw, stride, ho, wo)
    out = np.matmul(cols, _pack_kernel(kernel))          # (g, B*Ho*Wo*m, Co*p)
    out = out.reshape(g, b, ho, wo, m, co, p)
    return np.ascontiguousarray(out.transpose(1, 5, 2, 3, 0, 4, 6))


def conv_backward(x: np.ndarray, kernel: np.ndarray, stride: int,
                  grad_out: np.ndarray, need_input: bool = True) -> ConvGradients:
    """Gradients of the convolution w.r.t. its input and kernel.

    grad_out has the forward output's shape (B, Co, Ho, Wo, g, m, p). The
    kernel gradient is one GEMM against the packed input columns; the input
    gradient is a GEMM against the transposed kernel followed by the col2im
    scatter. Pass need_input=False on the first layer to skip the scatter.
    """
    fshape, kshape = _shapes_of(x, kernel)
    oshape = infer_output_shape(fshape, kshape, stride)
    b, _, h, w, g, m, n = x.shape
    kh, kw, c, co, _, _, p = kernel.shape
    ho, wo = oshape.height, oshape.width
    if grad_out.shape != oshape.as_tuple():
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{oshape.as_tuple()}")

    # (B, Co, Ho, Wo, g, m, p) -> (g, B*Ho*Wo*m, Co*p)
    d = grad_out.transpose(4, 0, 2, 3, 5, 1, 6).reshape(g, b * ho * wo * m, co * p)
    cols = _pack_cols(x, kh, kw, stride, ho, wo)

    dk = np.matmul(cols.transpose(0, 2, 1), d)           # (g, C*kh*kw*n, Co*p)
    dk = dk.reshape(g, c, kh, kw, n, co, p).transpose(2, 3, 1, 5, 0, 4, 6)
    dk = np.ascontiguousarray(dk)

    dx = None
    if need_input:
        kmat = _pack_kernel(kernel)
        dcols = np.matmul(d, kmat.transpose(0, 2, 1))    # (g, B*Ho*Wo*m, C*kh*kw*n)
        dcols = dcols.reshape(g, b, ho, wo, m, c, kh, kw, n)
        dcols = dcols.transpose(1, 5, 2, 3, 6, 7, 0, 4, 8)  # (B,C,Ho,Wo,kh,kw,g,m,n)
        dx = np.zeros_like(x)
        # fixed offset order; for one (di, dj) the strided slabs are disjoint
        for di in range(kh):
            for dj in range(kw):
                dx[:, :, di:di + stride * ho:stride,
                   dj:dj + stride * wo:stride] += dcols[:, :, :, :, di, dj]
    return ConvGradients(wrt_input=dx, wrt_kernel=dk)
