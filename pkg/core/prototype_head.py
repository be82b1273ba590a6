# core/prototype_head.py
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.encoder import FeatureGrid
from core.numerics import Graph, Var, bilinear_resize, softmax


@dataclass
class ProtoGrid:
    """Per-location prototype distribution, shape (h', w', D)"""

    values: np.ndarray

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class PresenceVector:
    p: np.ndarray
    # (row, col) of each channel's maximum
    argmax_locations: List[Tuple[int, int]]


@dataclass
class ActivationMap:
    prototype: int
    raster: np.ndarray

    @property
    def size(self) -> Tuple[int, int]:
        return self.raster.shape[1], self.raster.shape[0]


def channel_softmax(z: FeatureGrid) -> ProtoGrid:
    return ProtoGrid(softmax(z.values, axis=-1))


def presence_pool(g: ProtoGrid) -> PresenceVector:
    flat = g.values.reshape(-1, g.channels)
    # np.argmax keeps the first occurrence, i.e. row-major tie-breaking
    idx = np.argmax(flat, axis=0)
    p = flat[idx, np.arange(g.channels)]
    locations = [(int(i) // g.w, int(i) % g.w) for i in idx]
    return PresenceVector(np.array(p, copy=True), locations)


def activation_map(g: ProtoGrid, d: int, target: Tuple[int, int]) -> ActivationMap:
    """
    Upsample channel `d` to `target` = (W, H) and clamp to [0, 1]

    Grid nodes are snapped to pixels, so when the target is at least the grid
    size on both axes the raster maximum is exactly the channel maximum p_d.
    """
    if not 0 <= d < g.channels:
        raise IndexError(f"prototype {d} is out of range for {g.channels} channels")
    width, height = target
    raster = bilinear_resize(g.values[:, :, d].astype(np.float64), height, width, snap_nodes=True)
    return ActivationMap(d, np.clip(raster, 0.0, 1.0))


# -----------------------------
# Graph versions used in training
# -----------------------------
def channel_softmax_var(graph: Graph, z: Var) -> Var:
    return graph.softmax(z, axis=-1, name="proto_grid")


def presence_var(graph: Graph, proto: Var) -> Var:
    """(B, h', w', D) -> (B, D) max over locations"""
    b, h, w, d = proto.shape
    return graph.max(proto.reshape(b, h * w, d), axis=1, name="presence")
