"""The multi-level attention-guided graph restoration network.

Layout: head conv -> residual blocks -> graph blocks -> residual blocks ->
tail conv.  The network predicts a residual that is added to the degraded
input.  A graph block fuses a pixel-level graph convolution (every spatial
position is a node) with a patch-level one (every sliding window is a node).

Parameters live in a flat ordered ``dict[str, np.ndarray]``; forward passes
take the same names mapped to :class:`~magn.tensor.Tensor`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .configfile import build
from .graph import GraphGenParams, graph_param_shapes, multi_head_graph_conv
from .patching import GeometryError, PatchGeometry, PatchSet, fold, unfold
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "param_shapes",
    "init_params",
    "count_parameters",
    "as_tensors",
    "residual_block",
    "pixel_aggregate",
    "patch_aggregate",
    "graph_block",
    "forward",
    "restore",
    "restore_image",
    "mse_loss",
]

# which graph branches a block carries
VARIANTS = {
    "full": ("pixel", "patch"),
    "no_global": ("patch",),
    "no_local": ("pixel",),
    "double_local": ("patch", "patch2"),
}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    in_channels: int = 3
    res_before: int = 16
    res_after: int = 16
    graph_blocks: int = 3
    heads: int = 4
    window: int = 7
    stride: int = 4
    padding: int = 0
    pixel_qk_dim: int = 0  # 0 -> channels // 4
    patch_qk_dim: int = 0  # 0 -> channels // 2
    variant: str = "full"
    node_budget: int = 4096
    precision: str = "float32"

    def __post_init__(self):
        if self.channels < 1 or self.in_channels not in (1, 3):
            raise ValueError(f"bad channel settings: channels={self.channels}, in_channels={self.in_channels}")
        if min(self.res_before, self.res_after, self.graph_blocks) < 0:
            raise ValueError("block counts must be >= 0")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"heads={self.heads} must divide channels={self.channels}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.window < 1 or not 1 <= self.stride <= self.window or self.padding < 0:
            raise ValueError(f"bad patch settings window={self.window} stride={self.stride}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def pixel_qk(self) -> int:
        return self.pixel_qk_dim or max(1, self.channels // 4)

    @property
    def patch_qk(self) -> int:
        return self.patch_qk_dim or max(1, self.channels // 2)

    def geometry(self, height: int, width: int) -> PatchGeometry:
        return PatchGeometry(height, width, self.window, self.stride, self.padding)

    def check_size(self, height: int, width: int) -> None:
        """Raise unless an ``height x width`` input can pass through the network."""
        if self.graph_blocks and any(b != "pixel" for b in VARIANTS[self.variant]):
            self.geometry(height, width)
        if self.graph_blocks and "pixel" in VARIANTS[self.variant]:
            if height * width > self.node_budget:
                raise GeometryError(
                    f"{height}x{width} = {height * width} pixel nodes exceeds the node budget "
                    f"{self.node_budget}; restore in tiles"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return build(cls, {k: str(v) for k, v in d.items()})


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Ordered ``(name, shape, fan_in)``; ``fan_in`` is None for PReLU slopes."""
    d, c = config.channels, config.in_channels
    out: list[tuple[str, tuple[int, ...], int | None]] = [
        ("head.w", (3, 3, c, d), 9 * c),
        ("head.b", (d,), 9 * c),
        ("head.slope", (d,), None),
    ]

    def resblocks(stage: str, n: int):
        for i in range(n):
            p = f"{stage}.{i}."
            out.extend([
                (p + "conv1.w", (3, 3, d, d), 9 * d),
                (p + "conv1.b", (d,), 9 * d),
                (p + "slope", (d,), None),
                (p + "conv2.w", (3, 3, d, d), 9 * d),
                (p + "conv2.b", (d,), 9 * d),
            ])

    resblocks("res1", config.res_before)
    cells = config.window * config.window
    for j in range(config.graph_blocks):
        for branch in VARIANTS[config.variant]:
            if branch == "pixel":
                spec = graph_param_shapes(d, config.heads, config.pixel_qk, 1)
            else:
                spec = graph_param_shapes(d, config.heads, config.patch_qk, cells)
            out.extend((f"graph.{j}.{branch}.{n}", s, f) for n, s, f in spec)
        out.extend([
            (f"graph.{j}.fuse.w", (3, 3, d, d), 9 * d),
            (f"graph.{j}.fuse.b", (d,), 9 * d),
        ])
    resblocks("res2", config.res_after)
    out.extend([("tail.w", (3, 3, d, c), 9 * d), ("tail.b", (c,), 9 * d)])
    return out


def count_parameters(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in param_shapes(config))


def init_params(config: ModelConfig, seed: int = 0, zero_tail: bool = True) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, PReLU slopes of 0.25.

    With ``zero_tail`` the tail convolution starts at zero, so the untrained
    network is the identity restorer.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in param_shapes(config):
        if fan_in is None:
            arr = np.full(shape, 0.25)
        elif name.endswith("b") or (zero_tail and name.startswith("tail.")):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(config.dtype)
    return params


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# blocks -----------------------------------------------------------------------


def residual_block(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.conv2d(x, p[prefix + "conv1.w"], p[prefix + "conv1.b"], pad=1)
    h = T.prelu(h, p[prefix + "slope"])
    h = T.conv2d(h, p[prefix + "conv2.w"], p[prefix + "conv2.b"], pad=1)
    return T.add(h, x)


def pixel_aggregate(x: Tensor, gp: GraphGenParams) -> Tensor:
    """Graph convolution with one node per spatial position."""
    *lead, H, W, d = x.shape
    nodes = T.reshape(x, (*lead, H * W, 1, d))
    return T.reshape(multi_head_graph_conv(nodes, gp), x.shape)


def patch_aggregate(x: Tensor, gp: GraphGenParams, geom: PatchGeometry) -> Tensor:
    """Graph convolution with one node per sliding window, folded back."""
    ps = unfold(x, geom)
    L, (hp, wp), d = geom.count, geom.window, x.shape[-1]
    lead = x.shape[:-3]
    nodes = T.reshape(ps.patches, (*lead, L, hp * wp, d))
    out = multi_head_graph_conv(nodes, gp)
    return fold(PatchSet(T.reshape(out, (*lead, L, hp, wp, d)), geom))


def graph_block(x: Tensor, p: dict[str, Tensor], config: ModelConfig, index: int) -> Tensor:
    """``x + normalize(fuse(sum of pixel/patch branch outputs))``."""
    prefix = f"graph.{index}."
    geom = None
    terms = []
    for branch in VARIANTS[config.variant]:
        if branch == "pixel":
            gp = GraphGenParams.from_mapping(p, prefix + "pixel.", config.heads)
            terms.append(pixel_aggregate(x, gp))
        else:
            geom = geom or config.geometry(x.shape[-3], x.shape[-2])
            gp = GraphGenParams.from_mapping(p, f"{prefix}{branch}.", config.heads, geom.window[0] * geom.window[1])
            terms.append(patch_aggregate(x, gp, geom))
    fused = terms[0]
    for t in terms[1:]:
        fused = T.add(fused, t)
    r = T.conv2d(fused, p[prefix + "fuse.w"], p[prefix + "fuse.b"], pad=1)
    return T.add(x, T.feature_normalize(r))


def forward(image: Tensor, p: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Predicted residual for ``image`` (``(H, W, C)`` or ``(B, H, W, C)``)."""
    if image.shape[-1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} channels, got image {image.shape}")
    config.check_size(image.shape[-3], image.shape[-2])
    h = T.conv2d(image, p["head.w"], p["head.b"], pad=1)
    h = T.prelu(h, p["head.slope"])
    for i in range(config.res_before):
        h = residual_block(h, p, f"res1.{i}.")
    for j in range(config.graph_blocks):
        h = graph_block(h, p, config, j)
    for i in range(config.res_after):
        h = residual_block(h, p, f"res2.{i}.")
    return T.conv2d(h, p["tail.w"], p["tail.b"], pad=1)


def restore(image: np.ndarray, params: dict[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """Whole-image restoration: ``clip(I + F(I), 0, 1)``."""
    x = np.asarray(image, dtype=config.dtype)
    res = forward(Tensor(x), as_tensors(params), config).data
    return np.clip(x + res, 0.0, 1.0)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    return T.mean(T.square(T.sub(pred, target)))


# tiled inference ---------------------------------------------------------------


def _tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    step = tile - overlap
    count = math.ceil((n - tile) / step) + 1
    return sorted({round(i * (n - tile) / (count - 1)) for i in range(count)})


def _pyramid(th: int, tw: int) -> np.ndarray:
    # weight 1 at a tile's rim rising linearly to the centre; tile edges see
    # zero padding, so their predictions are the least reliable
    ramp = lambda n: np.minimum(np.arange(1, n + 1), np.arange(n, 0, -1)).astype(np.float64)
    return np.outer(ramp(th), ramp(tw))[..., None]


def restore_image(
    image: np.ndarray,
    params: dict[str, np.ndarray],
    config: ModelConfig,
    tile: int | tuple[int, int] = 31,
    overlap: int | None = None,
    batch: int = 4,
) -> np.ndarray:
    """Restore an image of any size by blending overlapping tiles.

    Residuals of overlapping tiles are blended with weights that fall off
    towards each tile's edges; the sum with the input is clipped to [0, 1].  Images smaller than a tile are edge-padded up to it.
    """
    th, tw = (tile, tile) if isinstance(tile, int) else tile
    if th < config.window or tw < config.window:
        raise GeometryError(f"tile {th}x{tw} is smaller than the window {config.window}")
    config.check_size(th, tw)
    if overlap is None:
        overlap = max(config.window - config.stride, min(th, tw) // 4)
    if overlap >= min(th, tw):
        raise GeometryError(f"overlap {overlap} must be smaller than the tile")
    x = np.asarray(image, dtype=config.dtype)
    H, W, C = x.shape
    Hp, Wp = max(H, th), max(W, tw)
    xp = np.pad(x, ((0, Hp - H), (0, Wp - W), (0, 0)), mode="edge") if (Hp, Wp) != (H, W) else x

    corners = [(i, j) for i in _tile_starts(Hp, th, overlap) for j in _tile_starts(Wp, tw, overlap)]
    weight = _pyramid(th, tw)
    acc = np.zeros((Hp, Wp, C), dtype=np.float64)
    hits = np.zeros((Hp, Wp, 1), dtype=np.float64)
    pt = as_tensors(params)
    for k in range(0, len(corners), batch):
        group = corners[k : k + batch]
        stack = np.stack([xp[i : i + th, j : j + tw] for i, j in group])
        res = forward(Tensor(stack), pt, config).data
        for (i, j), r in zip(group, res):
            acc[i : i + th, j : j + tw] += weight * r
            hits[i : i + th, j : j + tw] += weight
    residual = (acc / hits).astype(config.dtype)[:H, :W]
    return np.clip(x + residual, 0.0, 1.0)
