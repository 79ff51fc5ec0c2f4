"""Sparse-tensor layer primitives with hand-written backward passes.

A convolution kernel has shape (K^3, Cin, Cout) with offsets enumerated
lexicographically over (dx, dy, dz) in [-(K-1)/2, (K-1)/2]^3.  The output
feature at coordinate c is sum_k W[k] . feat(c + offset_k); absent neighbors
contribute nothing.  Stride-2 convolutions place outputs at the unique
floor-halved input coordinates with kernel offsets still enumerated in input
coordinate space; transposed (upsampling) convolutions scatter through the
adjoint of that coordinate mapping onto a caller-supplied finer coordinate
set.

Neighbor index maps depend only on coordinates, so they are built once per
coordinate set (`CoordContext`) and shared by every layer at that resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateBatchError
from ..voxel import SparseVoxelTensor, VoxelHashMap


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Centered lexicographic offsets, shape (kernel_size^3, 3)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    r = kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


# One (dst, src) row-index pair per kernel offset.  dst indexes output rows,
# src input rows; both are duplicate-free within an offset, which makes
# fancy-indexed accumulation exact.
OffsetMaps = list[tuple[np.ndarray, np.ndarray]]


class CoordContext:
    """Per-resolution coordinate bookkeeping shared by all layers at that level."""

    __slots__ = ("coords", "hash", "n", "_stride1_cache")

    def __init__(self, coords: np.ndarray, hash_map: VoxelHashMap | None = None):
        self.coords = np.ascontiguousarray(coords, dtype=np.int64)
        self.hash = hash_map if hash_map is not None else VoxelHashMap(self.coords)
        self.n = self.coords.shape[0]
        self._stride1_cache: dict[int, OffsetMaps] = {}

    def stride1_maps(self, kernel_size: int) -> OffsetMaps:
        maps = self._stride1_cache.get(kernel_size)
        if maps is None:
            offs = kernel_offsets(kernel_size)
            maps = []
            all_rows = np.arange(self.n, dtype=np.int64)
            for off in offs:
                if not off.any():
                    maps.append((all_rows, all_rows))
                    continue
                src = self.hash.lookup(self.coords + off)
                dst = np.nonzero(src >= 0)[0].astype(np.int64)
                maps.append((dst, src[dst]))
            self._stride1_cache[kernel_size] = maps
        return maps


def downsample_coords(coords: np.ndarray) -> np.ndarray:
    """Sorted unique floor-halved coordinates (stride-2 output sites)."""
    from ..voxel import pack_coords, unpack_coords

    halved = coords >> 1  # arithmetic shift == floor division for int64
    return unpack_coords(np.unique(pack_coords(halved)))


def stride2_maps(fine: CoordContext, coarse: CoordContext, kernel_size: int) -> OffsetMaps:
    """(coarse row, fine row) pairs per offset: fine coord = 2*coarse + offset."""
    offs = kernel_offsets(kernel_size)
    maps = []
    doubled = coarse.coords << 1
    for off in offs:
        src = fine.hash.lookup(doubled + off)
        dst = np.nonzero(src >= 0)[0].astype(np.int64)
        maps.append((dst, src[dst]))
    return maps


def swap_maps(maps: OffsetMaps) -> OffsetMaps:
    return [(src, dst) for dst, src in maps]


def conv_apply(maps: OffsetMaps, feats_in: np.ndarray, kernel: np.ndarray, n_out: int) -> np.ndarray:
    if kernel.shape[0] != len(maps) or kernel.shape[1] != feats_in.shape[1]:
        raise ValueError(
            f"kernel shape {kernel.shape} does not match {len(maps)} offsets "
            f"and {feats_in.shape[1]} input channels"
        )
    out = np.zeros((n_out, kernel.shape[2]))
    for k, (dst, src) in enumerate(maps):
        if dst.size:
            out[dst] += feats_in[src] @ kernel[k]
    return out


def conv_grads(
    maps: OffsetMaps,
    feats_in: np.ndarray,
    kernel: np.ndarray,
    d_out: np.ndarray,
    n_in: int,
) -> tuple[np.ndarray, np.ndarray]:
    d_in = np.zeros((n_in, kernel.shape[1]))
    d_kernel = np.zeros_like(kernel)
    for k, (dst, src) in enumerate(maps):
        if dst.size:
            g = d_out[dst]
            d_in[src] += g @ kernel[k].T
            d_kernel[k] = feats_in[src].T @ g
    return d_in, d_kernel


@dataclass
class ConvTape:
    maps: OffsetMaps
    feats_in: np.ndarray
    kernel: np.ndarray
    n_in: int
    used: bool = False

    def consume(self) -> None:
        if self.used:
            raise RuntimeError("tape already consumed by a backward pass")
        self.used = True


def sparse_conv_forward(
    inp: SparseVoxelTensor, kernel: np.ndarray, stride: int = 1
) -> tuple[SparseVoxelTensor, ConvTape]:
    """Sparse convolution over a voxel tensor.

    Stride 1 preserves the coordinate set; stride 2 outputs the unique
    floor-halved coordinates.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    kernel_size = round(kernel.shape[0] ** (1 / 3))
    if kernel_size**3 != kernel.shape[0]:
        raise ValueError(f"kernel has {kernel.shape[0]} taps, not a perfect cube")
    ctx_in = CoordContext(inp.coords, inp.hash)
    if stride == 1:
        maps = ctx_in.stride1_maps(kernel_size)
        out_coords = inp.coords
        n_out = ctx_in.n
    else:
        out_coords = downsample_coords(inp.coords)
        ctx_out = CoordContext(out_coords)
        maps = stride2_maps(ctx_in, ctx_out, kernel_size)
        n_out = out_coords.shape[0]
    out = conv_apply(maps, inp.features, kernel, n_out)
    tape = ConvTape(maps, inp.features, kernel, ctx_in.n)
    return SparseVoxelTensor(out_coords, out, inp.voxel_size), tape


def sparse_conv_backward(tape: ConvTape, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoint of sparse_conv_forward: (input grads, kernel grads)."""
    tape.consume()
    return conv_grads(tape.maps, tape.feats_in, tape.kernel, d_out, tape.n_in)


def transpose_conv_forward(
    inp: SparseVoxelTensor, kernel: np.ndarray, target: SparseVoxelTensor | np.ndarray
) -> tuple[SparseVoxelTensor, ConvTape]:
    """Stride-2 upsampling onto a stored finer coordinate set.

    `target` supplies the output coordinates (the matching encoder level);
    features scatter through the adjoint of the downsampling coordinate map.
    """
    kernel_size = round(kernel.shape[0] ** (1 / 3))
    if kernel_size**3 != kernel.shape[0]:
        raise ValueError(f"kernel has {kernel.shape[0]} taps, not a perfect cube")
    if isinstance(target, SparseVoxelTensor):
        ctx_fine = CoordContext(target.coords, target.hash)
        out_coords = target.coords
    else:
        ctx_fine = CoordContext(np.asarray(target, dtype=np.int64))
        out_coords = ctx_fine.coords
    ctx_coarse = CoordContext(inp.coords, inp.hash)
    maps = swap_maps(stride2_maps(ctx_fine, ctx_coarse, kernel_size))
    out = conv_apply(maps, inp.features, kernel, ctx_fine.n)
    tape = ConvTape(maps, inp.features, kernel, ctx_coarse.n)
    return SparseVoxelTensor(out_coords, out, inp.voxel_size), tape


def transpose_conv_backward(tape: ConvTape, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tape.consume()
    return conv_grads(tape.maps, tape.feats_in, tape.kernel, d_out, tape.n_in)


@dataclass
class BnTape:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    batch_mean: np.ndarray | None = None
    batch_var_unbiased: np.ndarray | None = None
    used: bool = False

    def consume(self) -> None:
        if self.used:
            raise RuntimeError("tape already consumed by a backward pass")
        self.used = True


def batch_norm_forward(
    feats: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    eps: float = 1e-5,
) -> tuple[np.ndarray, BnTape]:
    """Per-channel normalization over active sites.

    Train mode normalizes with batch statistics and records them on the tape
    (callers fold them into the running statistics between steps; the
    parameter registry itself is never mutated here).  Eval mode normalizes
    with the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    if mode == "train":
        n = feats.shape[0]
        if n < 2:
            raise DegenerateBatchError("batch norm in train mode needs >= 2 active sites")
        mean = feats.mean(axis=0)
        var = feats.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (feats - mean) * inv_std
        tape = BnTape("train", xhat, inv_std, gamma, mean, var * n / (n - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (feats - running_mean) * inv_std
        tape = BnTape("eval", xhat, inv_std, gamma)
    return gamma * xhat + beta, tape


def batch_norm_backward(tape: BnTape, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(input grads, gamma grads, beta grads)."""
    tape.consume()
    d_beta = d_out.sum(axis=0)
    d_gamma = (d_out * tape.xhat).sum(axis=0)
    d_xhat = d_out * tape.gamma
    if tape.mode == "train":
        n = d_out.shape[0]
        d_in = (
            tape.inv_std
            / n
            * (n * d_xhat - d_xhat.sum(axis=0) - tape.xhat * (d_xhat * tape.xhat).sum(axis=0))
        )
    else:
        d_in = d_xhat * tape.inv_std
    return d_in, d_gamma, d_beta


def updated_running_stats(
    tape: BnTape, running_mean: np.ndarray, running_var: np.ndarray, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exponential moving average update from the batch statistics on the tape."""
    if tape.batch_mean is None:
        raise ValueError("tape carries no batch statistics (eval mode?)")
    new_mean = (1.0 - momentum) * running_mean + momentum * tape.batch_mean
    new_var = (1.0 - momentum) * running_var + momentum * tape.batch_var_unbiased
    return new_mean, new_var


def relu_forward(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = feats > 0
    return np.where(mask, feats, 0.0), mask


def relu_backward(mask: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return np.where(mask, d_out, 0.0)
