"""Rigid transforms between agent-local BEV grids.

Cell (r, c) of an H x W grid has its centre at local metric coordinates
``x = (c - (W - 1) / 2) * cell``, ``y = (r - (H - 1) / 2) * cell``. A pose maps
local coordinates to world coordinates by rotating by ``heading`` and then
translating by ``(x, y)``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import ORIGIN, Pose, ShapeError


def cell_centres(H: int, W: int, cell: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(W) - (W - 1) / 2.0) * cell
    ys = (np.arange(H) - (H - 1) / 2.0) * cell
    X, Y = np.meshgrid(xs, ys)
    return X, Y


def local_to_world(pose: Pose, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(pose.heading), np.sin(pose.heading)
    return pose.x + c * X - s * Y, pose.y + s * X + c * Y


def world_to_local(pose: Pose, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(pose.heading), np.sin(pose.heading)
    dx, dy = X - pose.x, Y - pose.y
    return c * dx + s * dy, -s * dx + c * dy


@lru_cache(maxsize=4096)
def _warp_index(H: int, W: int, src: tuple, dst: tuple, cell: float) -> tuple[np.ndarray, np.ndarray]:
    X, Y = cell_centres(H, W, cell)
    wx, wy = local_to_world(Pose(*dst), X, Y)
    lx, ly = world_to_local(Pose(*src), wx, wy)
    col = np.floor(lx / cell + (W - 1) / 2.0 + 0.5).astype(np.int64)
    row = np.floor(ly / cell + (H - 1) / 2.0 + 0.5).astype(np.int64)
    valid = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    flat = np.where(valid, row * W + col, 0)
    flat.setflags(write=False)
    valid.setflags(write=False)
    return flat.ravel(), valid.ravel()


def warp_index(H: int, W: int, src: Pose, dst: Pose, cell: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour gather map from the ``src`` frame into the ``dst`` frame.

    Returns ``(flat_src_index, valid)`` over the H*W destination cells.
    """
    return _warp_index(H, W, (src.x, src.y, src.heading), (dst.x, dst.y, dst.heading), float(cell))


def warp(F: np.ndarray, src: Pose, dst: Pose, fill: float = 0.0, cell: float = 1.0) -> np.ndarray:
    """Resample a grid expressed in ``src``'s frame into ``dst``'s frame.

    Works on (H, W) and (H, W, C) arrays. Destination cells that land outside
    the source grid are set to ``fill``.
    """
    F = np.asarray(F)
    if F.ndim not in (2, 3):
        raise ShapeError(f"warp expects (H, W) or (H, W, C), got {F.shape}")
    if src == dst:
        return F.copy()
    H, W = F.shape[:2]
    idx, valid = warp_index(H, W, src, dst, cell)
    flat = F.reshape(H * W, *F.shape[2:])
    out = flat[idx].copy()
    out[~valid] = fill
    return out.reshape(F.shape)


def warp_backward(G: np.ndarray, src: Pose, dst: Pose, cell: float = 1.0) -> np.ndarray:
    """Adjoint of :func:`warp`: scatter-add a gradient in ``dst``'s frame back to ``src``'s."""
    G = np.asarray(G, dtype=np.float64)
    if src == dst:
        return G.copy()
    H, W = G.shape[:2]
    idx, valid = warp_index(H, W, src, dst, cell)
    flat = G.reshape(H * W, *G.shape[2:])
    out = np.zeros_like(flat)
    np.add.at(out, idx[valid], flat[valid])
    return out.reshape(G.shape)


def distance_grid(H: int, W: int, cell: float = 1.0) -> np.ndarray:
    """Metric distance of every cell centre from the grid's own origin."""
    X, Y = cell_centres(H, W, cell)
    return np.hypot(X, Y)


__all__ = ["ORIGIN", "cell_centres", "distance_grid", "local_to_world", "warp", "warp_backward",
           "warp_index", "world_to_local"]
