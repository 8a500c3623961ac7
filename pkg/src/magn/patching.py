"""Sliding-window unfold/fold of channels-last feature maps.

A map of size ``H x W`` is cut into ``L`` windows of ``hp x wp`` taken every
``stride`` pixels over the zero-padded map.  ``fold`` puts windows back,
averaging positions covered by more than one window, so that
``fold(unfold(x)) == x``.

Patch tensors are laid out ``(..., L, hp, wp, C)`` with windows enumerated
row-major over the sliding grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

__all__ = [
    "GeometryError",
    "PatchGeometry",
    "PatchSet",
    "unfold",
    "fold",
    "overlap_counts",
    "valid_sizes",
]


class GeometryError(ValueError):
    pass


def _axis_ok(n: int, window: int, stride: int, pad: int) -> bool:
    span = n + 2 * pad - window
    return span >= 0 and span % stride == 0


def valid_sizes(limit: int, window: int, stride: int, pad: int = 0) -> list[int]:
    """Extents ``n <= limit`` that tile exactly with the given window/stride."""
    return [n for n in range(1, limit + 1) if _axis_ok(n, window, stride, pad)]


@dataclass(frozen=True)
class PatchGeometry:
    """Window, stride and padding for a source map of ``height x width``."""

    height: int
    width: int
    window: tuple[int, int] = (7, 7)
    stride: tuple[int, int] = (4, 4)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("window", "stride", "padding"):
            v = getattr(self, name)
            if isinstance(v, int):
                object.__setattr__(self, name, (v, v))
        if self.height < 1 or self.width < 1 or min(self.window) < 1:
            raise GeometryError(f"extents must be positive: {self}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise GeometryError(f"strides must be >= 1 and paddings >= 0: {self}")
        if self.stride[0] > self.window[0] or self.stride[1] > self.window[1]:
            # gaps between windows would leave positions that fold cannot restore
            raise GeometryError(f"stride {self.stride} exceeds window {self.window}")
        for axis, n in (("height", self.height), ("width", self.width)):
            i = 0 if axis == "height" else 1
            w, s, p = self.window[i], self.stride[i], self.padding[i]
            if not _axis_ok(n, w, s, p):
                raise GeometryError(self._diagnose(axis, n, w, s, p))

    @staticmethod
    def _diagnose(axis: str, n: int, w: int, s: int, p: int) -> str:
        msg = f"{axis} {n} with window {w}, stride {s}, padding {p} does not tile exactly"
        pads = [q for q in range(p, p + s + 1) if _axis_ok(n, w, s, q)]
        if pads:
            msg += f"; smallest valid padding is {pads[0]}"
        crops = valid_sizes(n, w, s, p)
        if crops:
            msg += f"; or crop to {crops[-1]}"
        return msg

    @property
    def grid(self) -> tuple[int, int]:
        (hp, wp), (sh, sw), (ph, pw) = self.window, self.stride, self.padding
        return (
            (self.height + 2 * ph - hp) // sh + 1,
            (self.width + 2 * pw - wp) // sw + 1,
        )

    @property
    def count(self) -> int:
        """Number of windows ``L``."""
        nh, nw = self.grid
        return nh * nw

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (
            self.height + 2 * self.padding[0],
            self.width + 2 * self.padding[1],
        )

    def positions(self) -> list[tuple[int, int]]:
        """Top-left corners (in padded coordinates), row-major."""
        nh, nw = self.grid
        sh, sw = self.stride
        return [(i * sh, j * sw) for i in range(nh) for j in range(nw)]


@dataclass(frozen=True)
class PatchSet:
    patches: Tensor
    geometry: PatchGeometry

    def __post_init__(self):
        g = self.geometry
        if self.patches.shape[-4:-1] != (g.count, *g.window):
            raise GeometryError(
                f"patches {self.patches.shape} do not match geometry "
                f"(L={g.count}, window={g.window})"
            )


def _gather(xp: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    # xp: (B, Hpad, Wpad, C) -> (B, L, hp, wp, C)
    (hp, wp), (sh, sw) = geom.window, geom.stride
    nh, nw = geom.grid
    win = sliding_window_view(xp, (hp, wp), axis=(1, 2))[:, ::sh, ::sw][:, :nh, :nw]
    B, C = xp.shape[0], xp.shape[-1]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B, nh * nw, hp, wp, C)


def _scatter(p: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    # adjoint of _gather: (B, L, hp, wp, C) -> (B, Hpad, Wpad, C), summing overlaps
    (hp, wp), (sh, sw) = geom.window, geom.stride
    nh, nw = geom.grid
    B, C = p.shape[0], p.shape[-1]
    grid = p.reshape(B, nh, nw, hp, wp, C)
    out = np.zeros((B, *geom.padded_shape, C), dtype=p.dtype)
    for u in range(hp):
        for v in range(wp):
            out[:, u : u + sh * (nh - 1) + 1 : sh, v : v + sw * (nw - 1) + 1 : sw] += grid[
                :, :, :, u, v
            ]
    return out


@lru_cache(maxsize=64)
def _padded_counts(geom: PatchGeometry) -> np.ndarray:
    ones = np.ones((1, geom.count, *geom.window, 1))
    counts = _scatter(ones, geom)[0]
    counts.setflags(write=False)
    return counts


def overlap_counts(geom: PatchGeometry) -> np.ndarray:
    """How many windows cover each source position, shape ``(H, W, 1)``."""
    ph, pw = geom.padding
    return _padded_counts(geom)[ph : ph + geom.height, pw : pw + geom.width].copy()


def _check_map(shape: tuple[int, ...], geom: PatchGeometry) -> None:
    if len(shape) not in (3, 4) or shape[-3:-1] != (geom.height, geom.width):
        raise GeometryError(f"map of shape {shape} does not match geometry {geom}")


def unfold(x: Tensor, geom: PatchGeometry) -> PatchSet:
    """Cut ``x`` (``(H, W, C)`` or ``(B, H, W, C)``) into its ``L`` windows."""
    _check_map(x.shape, geom)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    (ph, pw) = geom.padding
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else xd
    out = _gather(xp, geom)
    H, W = geom.height, geom.width

    def vjp(g):
        g = g if batched else g[None]
        gx = _scatter(g, geom)[:, ph : ph + H, pw : pw + W]
        return (gx if batched else gx[0],)

    return PatchSet(record(out if batched else out[0], (x,), vjp), geom)


def fold(ps: PatchSet) -> Tensor:
    """Reassemble windows into a map, averaging overlapping contributions."""
    geom, p = ps.geometry, ps.patches
    batched = p.ndim == 5
    pd = p.data if batched else p.data[None]
    counts = _padded_counts(geom).astype(pd.dtype)
    (ph, pw), H, W = geom.padding, geom.height, geom.width
    out = (_scatter(pd, geom) / counts)[:, ph : ph + H, pw : pw + W]

    def vjp(g):
        g = g if batched else g[None]
        gp = np.zeros((g.shape[0], *geom.padded_shape, g.shape[-1]), dtype=g.dtype)
        gp[:, ph : ph + H, pw : pw + W] = g
        res = _gather(gp / counts, geom)
        return (res if batched else res[0],)

    return record(out if batched else out[0], (p,), vjp)
