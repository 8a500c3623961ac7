"""Attention-built dynamic graphs and multi-head graph convolution.

Node features come in two layouts:

* ``(m, d)``: ``m`` nodes with ``d`` features each (one pixel per node);
* ``(..., m, a, d)``: each node is a group of ``a`` cells with ``d``
  channels, e.g. a flattened ``hp x wp`` window (``a = hp * wp``).

The 1x1 projection convolutions act on the channel axis of every cell; the
fully connected similarity projections see the whole flattened node
(``a * d`` values).  Graph convolution weights act on channels, so a head maps
``(m, a, d)`` to ``(m, a, d / N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, concat, matmul, prelu, reshape, scale, softmax_rows, transpose

__all__ = [
    "MASK_PENALTY",
    "Adjacency",
    "HeadParams",
    "GraphGenParams",
    "graph_param_shapes",
    "build_adjacency",
    "graph_conv",
    "multi_head_graph_conv",
    "MaskLog",
]

MASK_PENALTY = 1e6

_HEAD_FIELDS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "weight")


class MaskLog:
    """Record the masks of one forward pass and replay them in the next.

    Finite-difference checks use this to hold the (non-differentiable) masks
    fixed while parameters are nudged::

        with MaskLog() as log:
            f(x)            # records
        with log.replay():
            f(x + h)        # reuses the recorded masks in order
    """

    _active: "MaskLog | None" = None

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self._cursor: int | None = None

    def __enter__(self) -> "MaskLog":
        MaskLog._active = self
        return self

    def __exit__(self, *exc) -> None:
        MaskLog._active = None
        self._cursor = None

    def replay(self) -> "MaskLog":
        self._cursor = 0
        return self

    def _next(self, mask: np.ndarray) -> np.ndarray:
        if self._cursor is None:
            self.masks.append(mask)
            return mask
        mask = self.masks[self._cursor]
        self._cursor += 1
        return mask


@dataclass(frozen=True)
class Adjacency:
    """Row-stochastic attention weights ``(..., m, m)`` for one head."""

    weights: Tensor
    # 1 where the similarity fell strictly below its row mean
    mask: np.ndarray

    @property
    def nodes(self) -> int:
        return self.weights.shape[-1]


@dataclass(frozen=True)
class HeadParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    weight: Tensor

    @property
    def qk_dim(self) -> int:
        return self.fc1_w.shape[1]


@dataclass(frozen=True)
class GraphGenParams:
    heads: tuple[HeadParams, ...]
    slope: Tensor
    cells: int = 1

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ValueError("at least one head is required")
        d = self.channels
        n = len(self.heads)
        if d % n:
            raise ValueError(f"head count {n} does not divide channel count {d}")
        for i, h in enumerate(self.heads):
            expect = {
                "conv1_w": (d, d), "conv1_b": (d,), "conv2_w": (d, d), "conv2_b": (d,),
                "fc1_w": (self.cells * d, h.qk_dim), "fc1_b": (h.qk_dim,),
                "fc2_w": (self.cells * d, h.qk_dim), "fc2_b": (h.qk_dim,),
                "weight": (d, d // n),
            }
            for name, shape in expect.items():
                got = getattr(h, name).shape
                if got != shape:
                    raise ValueError(f"head {i} {name}: expected {shape}, got {got}")

    @property
    def channels(self) -> int:
        return self.heads[0].conv1_w.shape[0]

    @classmethod
    def from_mapping(cls, params, prefix: str, n_heads: int, cells: int = 1) -> "GraphGenParams":
        """Collect ``{prefix}h{i}.{field}`` and ``{prefix}slope`` entries."""
        heads = [
            HeadParams(*(params[f"{prefix}h{i}.{f}"] for f in _HEAD_FIELDS))
            for i in range(n_heads)
        ]
        return cls(heads, params[f"{prefix}slope"], cells)


def graph_param_shapes(d: int, n_heads: int, qk_dim: int, cells: int = 1):
    """Ordered ``(name, shape, fan_in)`` for one graph generator + convolution."""
    if d % n_heads:
        raise ValueError(f"head count {n_heads} does not divide channel count {d}")
    out = []
    for i in range(n_heads):
        out += [
            (f"h{i}.conv1_w", (d, d), d),
            (f"h{i}.conv1_b", (d,), d),
            (f"h{i}.conv2_w", (d, d), d),
            (f"h{i}.conv2_b", (d,), d),
            (f"h{i}.fc1_w", (cells * d, qk_dim), cells * d),
            (f"h{i}.fc1_b", (qk_dim,), cells * d),
            (f"h{i}.fc2_w", (cells * d, qk_dim), cells * d),
            (f"h{i}.fc2_b", (qk_dim,), cells * d),
            (f"h{i}.weight", (d, d // n_heads), d),
        ]
    out.append(("slope", (d,), None))
    return out


def _as_nodes(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (x.shape[0], 1, x.shape[1])), True
    if x.ndim < 3:
        raise ValueError(f"node features need shape (m, d) or (..., m, a, d), got {x.shape}")
    return x, False


def _project(nodes: Tensor, conv_w: Tensor, conv_b: Tensor, fc_w: Tensor, fc_b: Tensor) -> Tensor:
    h = add(matmul(nodes, conv_w), conv_b)
    flat = reshape(h, (*h.shape[:-2], h.shape[-2] * h.shape[-1]))
    return add(matmul(flat, fc_w), fc_b)


def build_adjacency(x: Tensor, params: GraphGenParams, head: int) -> Adjacency:
    """Masked scaled-dot-product attention over the nodes of ``x``.

    Similarities below their row mean are pushed down by ``MASK_PENALTY``
    before the row softmax; the mask itself is treated as a constant when
    differentiating.
    """
    if not np.all(np.isfinite(x.data)):
        raise ValueError("node features contain non-finite values")
    nodes, _ = _as_nodes(x)
    hp = params.heads[head]
    q = _project(nodes, hp.conv1_w, hp.conv1_b, hp.fc1_w, hp.fc1_b)
    k = _project(nodes, hp.conv2_w, hp.conv2_b, hp.fc2_w, hp.fc2_b)
    # scaling q before the product is cheaper than scaling the m x m result
    s = matmul(scale(q, 1.0 / math.sqrt(hp.qk_dim)), transpose(k))
    mask = s.data < s.data.mean(axis=-1, keepdims=True)
    if MaskLog._active is not None:
        mask = MaskLog._active._next(mask)
    penalty = mask * s.dtype.type(-MASK_PENALTY)
    return Adjacency(softmax_rows(add(s, penalty)), mask)


def graph_conv(x: Tensor, adj: Adjacency | Tensor, w: Tensor) -> Tensor:
    """Propagate node features along ``adj`` and mix channels: ``A X W``."""
    a = adj.weights if isinstance(adj, Adjacency) else adj
    nodes, flat_in = _as_nodes(x)
    m, cells, d = nodes.shape[-3:]
    if a.shape[-1] != m or a.shape[-2] != m:
        raise ValueError(f"adjacency {a.shape} does not match {m} nodes")
    if w.shape[0] != d:
        raise ValueError(f"weight {w.shape} does not match {d} channels")
    lead = nodes.shape[:-3]
    flat = reshape(nodes, (*lead, m, cells * d))
    mixed = reshape(matmul(a, flat), (*lead, m, cells, d))
    out = matmul(mixed, w)
    if flat_in:
        out = reshape(out, (m, w.shape[1]))
    return out


def multi_head_graph_conv(x: Tensor, params: GraphGenParams) -> Tensor:
    """Concatenate ``A_i X W_i`` over heads, then apply PReLU once."""
    parts = [
        graph_conv(x, build_adjacency(x, params, i), h.weight)
        for i, h in enumerate(params.heads)
    ]
    joined = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    return prelu(joined, params.slope)
