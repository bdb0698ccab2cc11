"""Dense capsule tensors and the shape algebra the rest of the engine builds on.

Feature maps are 7-axis float arrays laid out ``(B, C, H, W, g, m, n)``:
batch, channel, two spatial axes, then a rank-3 capsule. Kernels are
``(kh, kw, Cin, Cout, g, n, p)``. Every layout convention lives here so the
convolution and activation code can stay shape-blind.

A "capsule" is the trailing rank-3 block. Feature-map capsules are
``(g, m, n)``; kernel capsules are ``(g, n, p)`` and act on the right, so a
matched pair contracts ``(m, n) @ (n, p) -> (m, p)`` independently per g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Axes of the capsule block, counted from the end of any tensor here.
CAPSULE_AXES = (-3, -2, -1)


class ShapeError(ValueError):
    """Raised when tensor shapes cannot combine under the capsule rules."""


def _positive(name, *vals):
    for v in vals:
        if int(v) != v or v < 1:
            raise ShapeError(f"{name} dims must be positive ints, got {vals}")


@dataclass(frozen=True)
class CapsuleShape:
    """Rank-3 capsule ``(g, m, n)``; g indexes independent slices."""

    g: int
    m: int
    n: int

    def __post_init__(self):
        _positive("capsule", self.g, self.m, self.n)

    @property
    def size(self) -> int:
        return self.g * self.m * self.n

    def as_tuple(self):
        return (self.g, self.m, self.n)


@dataclass(frozen=True)
class FeatureMapShape:
    """Shape of one activation tensor: ``(B, C, H, W) + capsule``."""

    batch: int
    channels: int
    height: int
    width: int
    capsule: CapsuleShape

    def __post_init__(self):
        _positive("feature map", self.batch, self.channels, self.height, self.width)

    def as_tuple(self):
        return (self.batch, self.channels, self.height, self.width) + self.capsule.as_tuple()

    @property
    def size(self) -> int:
        return int(np.prod(self.as_tuple()))


@dataclass(frozen=True)
class KernelShape:
    """Shape of one layer's weights: ``(kh, kw, Cin, Cout, g, n, p)``.

    The kernel capsule shares g and n with the incoming feature-map capsule
    and maps its trailing axis n -> p.
    """

    kh: int
    kw: int
    in_channels: int
    out_channels: int
    g: int
    n: int
    p: int

    def __post_init__(self):
        _positive("kernel", self.kh, self.kw, self.in_channels, self.out_channels,
                  self.g, self.n, self.p)

    def as_tuple(self):
        return (self.kh, self.kw, self.in_channels, self.out_channels,
                self.g, self.n, self.p)

    @property
    def size(self) -> int:
        return int(np.prod(self.as_tuple()))


def reshape_capsules(x: np.ndarray, capsule: CapsuleShape) -> np.ndarray:
    """Reinterpret the trailing capsule block of `x` as a new capsule shape.

    Pure row-major relabeling: element count of the capsule block must be
    preserved and the flat order of values is unchanged. Leading axes pass
    through untouched. Returns a view when numpy can.
    """
    if x.ndim < 3:
        raise ShapeError(f"need at least 3 axes for a capsule block, got shape {x.shape}")
    old = x.shape[-3:]
    old_size = old[0] * old[1] * old[2]
    if old_size != capsule.size:
        raise ShapeError(
            f"capsule reshape {old} -> {capsule.as_tuple()} changes element "
            f"count {old_size} -> {capsule.size}")
    return x.reshape(x.shape[:-3] + capsule.as_tuple())


def capsule_matmul(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Contract feature capsules against kernel capsules, slice by slice.

    `u` has trailing block (g, m, n) and `w` trailing block (g, n, p); for
    each g the (m, n) slice right-multiplies the (n, p) slice. Leading axes
    broadcast under numpy's stacked-matmul rules, so w is typically just
    (g, n, p) shared across the batch.
    """
    if u.ndim < 3 or w.ndim < 3:
        raise ShapeError("capsule_matmul needs rank-3 capsule blocks on both sides")
    gu, m, n = u.shape[-3:]
    gw, nw, p = w.shape[-3:]
    if gu != gw or n != nw:
        raise ShapeError(
            f"capsule blocks do not chain: ({gu},{m},{n}) x ({gw},{nw},{p})")
    return np.matmul(u, w)


def frobenius_norm(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Frobenius norm of each rank-3 capsule (root of sum of squares over g, m, n)."""
    if x.ndim < 3:
        raise ShapeError(f"need at least 3 axes for a capsule block, got shape {x.shape}")
    return np.sqrt(np.sum(np.square(x), axis=CAPSULE_AXES, keepdims=keepdims))
