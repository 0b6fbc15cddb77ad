"""Bidirectional co-attention between the pseudo-token and text streams.

Visual queries attend text keys and vice versa, producing two row-stochastic
weight matrices. The fused representation either sums the two cross-attended
blocks (strict-sum, dimensionally valid only when both streams have equal
length) or stacks them with provenance (concat, any lengths).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import ShapeError, Tensor


class FusionModeError(ValueError):
    """strict-sum fusion requested with unequal stream lengths."""


@dataclass
class CoAttentionParams:
    """Per-stream d x d query/key projections."""

    vis_query_w: Tensor
    vis_key_w: Tensor
    txt_query_w: Tensor
    txt_key_w: Tensor

    def named(self) -> dict[str, Tensor]:
        return {
            "fusion.vis_query_w": self.vis_query_w,
            "fusion.vis_key_w": self.vis_key_w,
            "fusion.txt_query_w": self.txt_query_w,
            "fusion.txt_key_w": self.txt_key_w,
        }


@dataclass
class FusedRepresentation:
    """Fusion output plus which stream each row came from.

    strict-sum: matrix is N x d and every row is tagged "sum".
    concat: matrix is (N + L) x d; the first N rows are the visual-side block,
    the trailing L rows the text-side block.
    """

    mode: str
    matrix: Tensor
    provenance: tuple[str, ...]

    def visual_block(self) -> Tensor:
        n = self.provenance.count("visual") or self.provenance.count("sum")
        return core.slice_rows(self.matrix, 0, n)

    def text_block(self) -> Tensor:
        if self.mode != "concat":
            raise FusionModeError("text_block is only separable in concat mode")
        n = self.provenance.count("visual")
        return core.slice_rows(self.matrix, n, self.matrix.shape[0])


def init_co_attention_params(embed_dim: int, rng: np.random.Generator,
                             scale: float = 0.02) -> CoAttentionParams:
    def w():
        return Tensor(rng.normal(scale=scale, size=(embed_dim, embed_dim)), requires_grad=True)

    return CoAttentionParams(w(), w(), w(), w())


def co_attention_weights(vis_tokens: Tensor, text_emb: Tensor,
                         params: CoAttentionParams) -> tuple[Tensor, Tensor]:
    """Return (visual-to-text, text-to-visual) attention weight matrices.

    Both are row-stochastic: N x L for visual queries over text keys, and
    L x N for text queries over visual keys.
    """
    if vis_tokens.ndim != 2 or text_emb.ndim != 2 or vis_tokens.shape[1] != text_emb.shape[1]:
        raise ShapeError(
            f"co-attention needs matching widths, got {vis_tokens.shape} and {text_emb.shape}")
    d = vis_tokens.shape[1]
    scale = 1.0 / np.sqrt(d)
    vis_q = core.matmul(vis_tokens, params.vis_query_w)
    vis_k = core.matmul(vis_tokens, params.vis_key_w)
    txt_q = core.matmul(text_emb, params.txt_query_w)
    txt_k = core.matmul(text_emb, params.txt_key_w)
    vis_to_txt = core.softmax_rows(core.matmul(vis_q, core.transpose(txt_k)) * scale)
    txt_to_vis = core.softmax_rows(core.matmul(txt_q, core.transpose(vis_k)) * scale)
    return vis_to_txt, txt_to_vis


def fuse(vis_to_txt: Tensor, txt_to_vis: Tensor, text_emb: Tensor, vis_tokens: Tensor,
         mode: str = "concat") -> FusedRepresentation:
    """Combine the cross-attended streams.

    strict-sum requires N == L (the summed blocks must have equal row counts);
    concat stacks the visual-side block over the text-side block and records
    provenance per row.
    """
    n, l = vis_to_txt.shape
    if txt_to_vis.shape != (l, n):
        raise ShapeError(f"weight shapes disagree: {vis_to_txt.shape} vs {txt_to_vis.shape}")
    vis_block = core.matmul(vis_to_txt, text_emb)   # N x d, mixture of text rows
    txt_block = core.matmul(txt_to_vis, vis_tokens)  # L x d, mixture of visual rows
    if mode == "strict_sum":
        if n != l:
            raise FusionModeError(
                f"strict-sum fusion needs equal stream lengths; the summed blocks are "
                f"{n} x d and {l} x d (use concat mode for unequal lengths)")
        return FusedRepresentation("strict_sum", vis_block + txt_block, ("sum",) * n)
    if mode == "concat":
        matrix = core.concat_rows([vis_block, txt_block])
        return FusedRepresentation("concat", matrix, ("visual",) * n + ("text",) * l)
    raise FusionModeError(f"unknown fusion mode {mode!r}")
