"""Vision-token adapter: raw pixels in, decoder-width pseudo-text tokens out.

A stride-p patch convolution followed by a linear projection turns an image
into one token per patch; a single self-attention pass then mixes visual
context across the tokens. Images of any resolution are zero-padded on the
bottom/right to the next patch multiple, so the token count is always
ceil(H/p) * ceil(W/p).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import core
from .core import Tensor


class ConfigError(ValueError):
    """Adapter parameters disagree with the model configuration."""


@dataclass
class VtaParams:
    """Learnable state of the adapter.

    patch_kernel: p x p x 3 x c_conv, patch_bias: c_conv
    proj_w: c_conv x d, proj_b: d
    query_w / key_w / value_w: d x d self-attention projections
    pos_row / pos_col: optional factored patch-position tables (max_grid x d)
    """

    patch_kernel: Tensor
    patch_bias: Tensor
    proj_w: Tensor
    proj_b: Tensor
    query_w: Tensor
    key_w: Tensor
    value_w: Tensor
    pos_row: Optional[Tensor] = None
    pos_col: Optional[Tensor] = None

    @property
    def patch_size(self) -> int:
        return self.patch_kernel.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.proj_w.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {
            "vta.patch_kernel": self.patch_kernel,
            "vta.patch_bias": self.patch_bias,
            "vta.proj_w": self.proj_w,
            "vta.proj_b": self.proj_b,
            "vta.query_w": self.query_w,
            "vta.key_w": self.key_w,
            "vta.value_w": self.value_w,
        }
        if self.pos_row is not None:
            out["vta.pos_row"] = self.pos_row
            out["vta.pos_col"] = self.pos_col
        return out


def init_vta_params(embed_dim: int, patch_size: int, conv_channels: int,
                    max_patch_grid: int, positional: bool,
                    rng: np.random.Generator, scale: float = 0.02) -> VtaParams:
    def w(*shape):
        return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)

    return VtaParams(
        patch_kernel=w(patch_size, patch_size, 3, conv_channels),
        patch_bias=Tensor(np.zeros(conv_channels), requires_grad=True),
        proj_w=w(conv_channels, embed_dim),
        proj_b=Tensor(np.zeros(embed_dim), requires_grad=True),
        query_w=w(embed_dim, embed_dim),
        key_w=w(embed_dim, embed_dim),
        value_w=w(embed_dim, embed_dim),
        pos_row=w(max_patch_grid, embed_dim) if positional else None,
        pos_col=w(max_patch_grid, embed_dim) if positional else None,
    )


def pad_to_patch_grid(image: Tensor, patch_size: int) -> Tensor:
    """Zero-pad right/bottom so both extents are multiples of patch_size. No-op when aligned."""
    if patch_size < 1:
        raise ValueError(f"patch size must be >= 1, got {patch_size}")
    h, w = image.shape[0], image.shape[1]
    new_h = -(-h // patch_size) * patch_size
    new_w = -(-w // patch_size) * patch_size
    return core.pad_bottom_right(image, new_h, new_w)


def vta_embed(image: Tensor, params: VtaParams) -> Tensor:
    """Convert an image to N x d pseudo-tokens in raster (row-major patch) order."""
    p = params.patch_size
    padded = pad_to_patch_grid(image, p)
    grid_h, grid_w = padded.shape[0] // p, padded.shape[1] // p
    feats = core.conv2d_nonoverlap(padded, params.patch_kernel, params.patch_bias)
    tokens = core.reshape(feats, (grid_h * grid_w, params.patch_bias.shape[0]))
    tokens = core.matmul(tokens, params.proj_w) + params.proj_b
    if params.pos_row is not None:
        if grid_h > params.pos_row.shape[0] or grid_w > params.pos_col.shape[0]:
            raise ConfigError(
                f"patch grid {grid_h}x{grid_w} exceeds positional table of "
                f"{params.pos_row.shape[0]} rows/cols; raise max_patch_grid")
        rows = np.repeat(np.arange(grid_h), grid_w)
        cols = np.tile(np.arange(grid_w), grid_h)
        tokens = tokens + core.take_rows(params.pos_row, rows) + core.take_rows(params.pos_col, cols)
    return tokens


def vta_refine(tokens: Tensor, params: VtaParams, residual: bool = False,
               return_weights: bool = False):
    """Single-head self-attention over the pseudo-tokens.

    The literal form (default) has no residual and no feed-forward; the
    attention values are the tokens passed through the learned value
    projection. ``residual`` adds the input back on top.
    """
    q = core.matmul(tokens, params.query_w)
    k = core.matmul(tokens, params.key_w)
    v = core.matmul(tokens, params.value_w)
    out, weights = core.scaled_dot_attention(q, k, v, return_weights=True)
    if residual:
        out = out + tokens
    if return_weights:
        return out, weights
    return out


def token_count(height: int, width: int, patch_size: int) -> int:
    return (-(-height // patch_size)) * (-(-width // patch_size))
