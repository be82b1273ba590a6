# core/encoder.py
"""
Patch transformer mapping a grayscale image to a spatial feature grid.

No class token: the token sequence is reshaped straight back to the patch
grid. The positional table lives at a native grid and is resampled to the
token grid of each input resolution inside the graph.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import ConfigError, ShapeError
from core.numerics import Graph, Var, interpolation_matrix

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    resolutions: List[int] = field(default_factory=lambda: [32, 48, 64])
    native_resolution: Optional[int] = None
    channels: int = 1
    init_std: float = 0.02
    norm_eps: float = 1e-6
    # tokens are standardised as (pixel - pixel_mean) / pixel_std before the patch projection
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def validate(self) -> "EncoderConfig":
        if self.patch_size < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ConfigError("patch_size, embed_dim and heads must be positive")
        if self.depth < 1:
            raise ConfigError(f"depth must be at least 1, got {self.depth}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.pixel_std <= 0:
            raise ConfigError(f"pixel_std must be positive, got {self.pixel_std}")
        if self.mlp_ratio < 0:
            raise ConfigError(f"mlp_ratio must be non-negative, got {self.mlp_ratio}")
        if not self.resolutions:
            raise ConfigError("at least one resolution is required")
        for res in list(self.resolutions) + [self.native]:
            if res < self.patch_size or res % self.patch_size:
                raise ConfigError(f"resolution {res} is not divisible by patch size {self.patch_size}")
        return self

    @property
    def native(self) -> int:
        return self.native_resolution or max(self.resolutions)

    @property
    def native_grid(self) -> Tuple[int, int]:
        g = self.native // self.patch_size
        return g, g

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def grid_for(self, height: int, width: int) -> Tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise ShapeError(f"image size {width}x{height} is not divisible by patch size {self.patch_size}")
        return height // self.patch_size, width // self.patch_size


@dataclass
class PositionalEmbedding:
    grid_w: int
    grid_h: int
    table: np.ndarray

    def __post_init__(self):
        if self.table.shape[0] != self.grid_w * self.grid_h:
            raise ShapeError(f"positional table has {self.table.shape[0]} rows, "
                             f"grid {self.grid_w}x{self.grid_h} needs {self.grid_w * self.grid_h}")


@dataclass
class FeatureGrid:
    """Encoder output stored (h', w', D) in row-major patch order"""

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


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange an (H, W) or (H, W, C) image into row-major patch tokens"""
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image size {w}x{h} is not divisible by patch size {patch_size}")
    p = patch_size
    tokens = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return tokens.reshape(-1, p * p * c)


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    return np.stack([patchify(img, patch_size) for img in images])


def positional_resize_matrix(old_hw: Tuple[int, int], new_hw: Tuple[int, int]) -> np.ndarray:
    """Linear map from a flattened (old_h*old_w) table to a (new_h*new_w) table"""
    return np.kron(interpolation_matrix(old_hw[0], new_hw[0]),
                   interpolation_matrix(old_hw[1], new_hw[1]))


def resize_positional_embeddings(pe: PositionalEmbedding, new_grid: Tuple[int, int]) -> PositionalEmbedding:
    """Bilinearly resample the table to `new_grid` = (w, h)"""
    new_w, new_h = new_grid
    if new_w < 1 or new_h < 1:
        raise ShapeError(f"target grid must be positive, got {new_grid}")
    if (new_w, new_h) == (pe.grid_w, pe.grid_h):
        return PositionalEmbedding(pe.grid_w, pe.grid_h, pe.table.copy())
    m = positional_resize_matrix((pe.grid_h, pe.grid_w), (new_h, new_w))
    table = (m @ pe.table.astype(np.float64)).astype(pe.table.dtype)
    return PositionalEmbedding(new_w, new_h, table)


def resize_positional_var(graph: Graph, table: Var, old_hw: Tuple[int, int], new_hw: Tuple[int, int]) -> Var:
    if tuple(old_hw) == tuple(new_hw):
        return table
    return graph.matmul(graph.const(positional_resize_matrix(old_hw, new_hw)), table,
                        name="pos_embed.resized")


# -----------------------------
# Parameters
# -----------------------------
def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    config.validate()
    d = config.embed_dim
    token_len = config.patch_size ** 2 * config.channels
    gh, gw = config.native_grid
    std = config.init_std
    params: Dict[str, np.ndarray] = {
        "patch_embed.weight": _trunc_normal(rng, (token_len, d), std),
        "patch_embed.bias": np.zeros(d, np.float32),
        "pos_embed": (rng.standard_normal((gh * gw, d)) * std).astype(np.float32),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}."
        params[pre + "norm1.gamma"] = np.ones(d, np.float32)
        params[pre + "norm1.beta"] = np.zeros(d, np.float32)
        for proj in ("q", "k", "v", "proj"):
            params[f"{pre}attn.{proj}.weight"] = _trunc_normal(rng, (d, d), std)
            params[f"{pre}attn.{proj}.bias"] = np.zeros(d, np.float32)
        if config.hidden_dim > 0:
            params[pre + "norm2.gamma"] = np.ones(d, np.float32)
            params[pre + "norm2.beta"] = np.zeros(d, np.float32)
            params[pre + "mlp.fc1.weight"] = _trunc_normal(rng, (d, config.hidden_dim), std)
            params[pre + "mlp.fc1.bias"] = np.zeros(config.hidden_dim, np.float32)
            params[pre + "mlp.fc2.weight"] = _trunc_normal(rng, (config.hidden_dim, d), std)
            params[pre + "mlp.fc2.bias"] = np.zeros(d, np.float32)
    params["norm.gamma"] = np.ones(d, np.float32)
    params["norm.beta"] = np.zeros(d, np.float32)
    return params


def positional_embedding(params: Dict[str, np.ndarray], config: EncoderConfig) -> PositionalEmbedding:
    gh, gw = config.native_grid
    return PositionalEmbedding(gw, gh, params["pos_embed"])


# -----------------------------
# Forward pass
# -----------------------------
def gelu(graph: Graph, x: Var) -> Var:
    # tanh approximation, built from the closed op set
    inner = (x + graph.power(x, 3.0) * 0.044715) * math.sqrt(2.0 / math.pi)
    return x * (graph.tanh(inner) + 1.0) * 0.5


def _norm(graph: Graph, x: Var, params: Dict[str, Var], prefix: str, eps: float) -> Var:
    return graph.layer_norm(x, eps) * params[prefix + ".gamma"] + params[prefix + ".beta"]


def _attention(graph: Graph, x: Var, params: Dict[str, Var], prefix: str, config: EncoderConfig) -> Var:
    b, n, d = x.shape
    heads = config.heads
    dh = d // heads

    def split(name: str) -> Var:
        y = x @ params[f"{prefix}attn.{name}.weight"] + params[f"{prefix}attn.{name}.bias"]
        return y.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = graph.softmax(scores, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ params[f"{prefix}attn.proj.weight"] + params[f"{prefix}attn.proj.bias"]


def _mlp(graph: Graph, x: Var, params: Dict[str, Var], prefix: str) -> Var:
    hidden = gelu(graph, x @ params[prefix + "mlp.fc1.weight"] + params[prefix + "mlp.fc1.bias"])
    return hidden @ params[prefix + "mlp.fc2.weight"] + params[prefix + "mlp.fc2.bias"]


def encoder_forward(graph: Graph, params: Dict[str, Var], images: np.ndarray,
                    config: EncoderConfig) -> Var:
    """
    Encode a batch of images into feature grids

    Args:
        graph: Graph recording the computation
        params: Encoder parameters bound as graph nodes
        images: (B, H, W) or (B, H, W, C) pixel batch
        config: Encoder configuration

    Returns:
        Var of shape (B, h', w', D)
    """
    images = np.asarray(images, dtype=np.float32)
    b, height, width = images.shape[:3]
    gh, gw = config.grid_for(height, width)
    tokens = (patchify_batch(images, config.patch_size) - config.pixel_mean) / config.pixel_std
    x = graph.const(tokens, "tokens") @ params["patch_embed.weight"] + params["patch_embed.bias"]
    x = x + resize_positional_var(graph, params["pos_embed"], config.native_grid, (gh, gw))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        x = x + _attention(graph, _norm(graph, x, params, pre + "norm1", config.norm_eps), params, pre, config)
        if config.hidden_dim > 0:
            x = x + _mlp(graph, _norm(graph, x, params, pre + "norm2", config.norm_eps), params, pre)
    x = _norm(graph, x, params, "norm", config.norm_eps)
    return x.reshape(b, gh, gw, config.embed_dim)


def bind_params(graph: Graph, params: Dict[str, np.ndarray], trainable: bool = True) -> Dict[str, Var]:
    if trainable:
        return {name: graph.input(name, value) for name, value in params.items()}
    return {name: graph.const(value, name) for name, value in params.items()}


def encode_batch(params: Dict[str, np.ndarray], images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    graph = Graph()
    return encoder_forward(graph, bind_params(graph, params, trainable=False), images, config).value


def encode(params: Dict[str, np.ndarray], image: np.ndarray, config: EncoderConfig) -> FeatureGrid:
    return FeatureGrid(encode_batch(params, np.asarray(image)[None], config)[0])
