"""Sheared / flipped / rotated kernel bags and their summed convolution.

A base kernel ``G0`` of odd spatial size is resampled under the map

    u' = (-1)^m * u
    v' = tan(phi) * u + v

with ``(u, v)`` = (column, row) offsets from the kernel centre. Resampling
pulls values through the inverse map with bilinear interpolation; samples
that fall outside the kernel support read as zero. Every transform is a
fixed linear map on the flattened spatial grid, so the group-summed kernel
is ``base @ sum(M_g).T`` and gradients reach ``base`` exactly.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, _make, ensure_tensor

DEFAULT_SHEAR_ANGLES = (150.0, 0.0, 30.0)


@dataclass(frozen=True)
class KernelGroupSpec:
    """Set of kernel transforms summed by a transconv layer.

    ``angles`` are shear angles in degrees in [0, 180); 0 must be present.
    With ``flip`` every angle appears with m=0 and m=1. With ``rotate`` each
    (phi, m) member is applied on top of the four quarter-turn rotations.
    """

    angles: Tuple[float, ...] = (0.0,)
    flip: bool = False
    rotate: bool = False

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise ValueError("kernel group needs at least one angle")
        if 0.0 not in angles:
            raise ValueError("kernel group must contain the identity angle 0")
        for a in angles:
            _check_angle(a)
        if len(set(angles)) != len(angles):
            raise ValueError(f"duplicate shear angles in {angles}")

    @classmethod
    def from_flags(cls, shear: bool = False, flip: bool = False, rotate: bool = False,
                   angles: Sequence[float] = DEFAULT_SHEAR_ANGLES) -> "KernelGroupSpec":
        return cls(tuple(angles) if shear else (0.0,), flip, rotate)

    @property
    def members(self) -> List[Tuple[float, int]]:
        flips = (0, 1) if self.flip else (0,)
        return [(phi, m) for phi in self.angles for m in flips]

    @property
    def transforms(self) -> List[Tuple[float, int, int]]:
        """(phi, m, quarter_turns) triples, identity first."""
        turns = (0, 1, 2, 3) if self.rotate else (0,)
        out = [(phi, m, k) for k in turns for phi, m in self.members]
        out.sort(key=lambda t: (t != (0.0, 0, 0),))
        return out

    @property
    def is_identity(self) -> bool:
        return self.transforms == [(0.0, 0, 0)]

    def __len__(self) -> int:
        return len(self.transforms)


def _check_angle(phi: float) -> None:
    if not 0.0 <= phi < 180.0:
        raise ValueError(f"shear angle must lie in [0, 180) degrees, got {phi}")
    if phi == 90.0:
        raise ValueError("shear angle 90 degrees is singular (tan is unbounded)")


@functools.lru_cache(maxsize=256)
def shear_matrix(phi: float, m: int, size: int) -> np.ndarray:
    """[size^2, size^2] resampling matrix: ``out_flat = M @ in_flat``."""
    _check_angle(phi)
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if m not in (0, 1):
        raise ValueError(f"flip flag must be 0 or 1, got {m}")
    ctr = size // 2
    t = 0.0 if phi == 0.0 else math.tan(math.radians(phi))
    sign = -1 if m else 1
    mat = np.zeros((size * size, size * size))
    for r in range(size):
        for c in range(size):
            u = sign * (c - ctr)
            v = (r - ctr) - u * t
            y, x = ctr + v, ctr + u
            y0, x0 = math.floor(y), math.floor(x)
            fy, fx = y - y0, x - x0
            for yy, xx, w in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                              (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
                if w != 0.0 and 0 <= yy < size and 0 <= xx < size:
                    mat[r * size + c, yy * size + xx] += w
    mat.setflags(write=False)
    return mat


@functools.lru_cache(maxsize=16)
def _rotation_matrix(k: int, size: int) -> np.ndarray:
    idx = np.rot90(np.arange(size * size).reshape(size, size), k).reshape(-1)
    mat = np.zeros((size * size, size * size))
    mat[np.arange(size * size), idx] = 1.0
    return mat


@functools.lru_cache(maxsize=64)
def group_matrix(spec: KernelGroupSpec, size: int) -> np.ndarray:
    total = np.zeros((size * size, size * size))
    for phi, m, k in spec.transforms:
        total += shear_matrix(phi, m, size) @ _rotation_matrix(k, size)
    total.setflags(write=False)
    return total


def _apply_spatial(base: Tensor, mat: np.ndarray) -> Tensor:
    *lead, h, w = base.shape
    flat = base.reshape(*lead, h * w)
    return (flat @ Tensor(mat.T, dtype=base.dtype)).reshape(*lead, h, w)


def _check_kernel(base) -> None:
    h, w = base.shape[-2:]
    if h != w or h % 2 == 0:
        raise ValueError(f"transformed kernels must be square with odd size, got {h}x{w}")


def transform_kernel(base, phi: float, m: int):
    """Shear by ``phi`` degrees and optionally flip a [..., W, W] kernel.

    Accepts a Tensor (result is differentiable) or an ndarray.
    """
    _check_kernel(base)
    _check_angle(phi)
    if phi == 0.0 and m == 0:
        return base if isinstance(base, Tensor) else np.array(base, dtype=np.float64)
    mat = shear_matrix(float(phi), int(m), base.shape[-1])
    if isinstance(base, Tensor):
        return _apply_spatial(base, mat)
    b = np.asarray(base, dtype=np.float64)
    *lead, h, w = b.shape
    return (b.reshape(*lead, h * w) @ mat.T).reshape(b.shape)


def rotate_kernel(base, k: int):
    """Exact rotation of the last two axes by ``k`` counter-clockwise quarter turns."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"quarter turns must be in 0..3, got {k}")
    if not isinstance(base, Tensor):
        return np.rot90(np.asarray(base), k, axes=(-2, -1)).copy()
    if base.shape[-1] != base.shape[-2]:
        raise ValueError("rotate_kernel needs square spatial extents")
    out = np.ascontiguousarray(np.rot90(base.data, k, axes=(-2, -1)))
    return _make(out, (base,), lambda g: (np.rot90(g, -k, axes=(-2, -1)),))


def transformed_kernels(base, spec: KernelGroupSpec) -> list:
    """One transformed copy of ``base`` per member of ``spec`` (identity first)."""
    _check_kernel(base)
    out = []
    for phi, m, k in spec.transforms:
        rotated = rotate_kernel(base, k) if k else base
        out.append(transform_kernel(rotated, phi, m))
    return out


def group_kernel(base: Tensor, spec: KernelGroupSpec) -> Tensor:
    """Sum of all transformed copies of ``base`` as a single kernel."""
    base = ensure_tensor(base)
    _check_kernel(base)
    if spec.is_identity:
        return base
    return _apply_spatial(base, group_matrix(spec, base.shape[-1]))


def transconv_forward(x: Tensor, base: Tensor, spec: KernelGroupSpec, bias: Tensor = None,
                      stride: int = 1, padding: int = 0, dilation: int = 1,
                      fused: bool = True) -> Tensor:
    """Sum over the kernel group of ``conv2d(x, transformed kernel)``.

    Convolution is linear in the kernel, so the default path convolves once
    with the summed kernel. ``fused=False`` evaluates every member separately.
    """
    if fused:
        return ops.conv2d(x, group_kernel(base, spec), bias, stride, padding, dilation)
    out = None
    for kern in transformed_kernels(ensure_tensor(base), spec):
        y = ops.conv2d(x, kern, None, stride, padding, dilation)
        out = y if out is None else out + y
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out
