"""Closed-form parameter and forward-FLOP accounting.

FLOPs are counted in multiply-accumulate units (one MAC per weight use), so a
single attention layer over s rows of width d costs 2*s^2*d for scores plus
context and 4*s*d^2 for the Q/K/V/O projections.

The encoder-based reference is the same model with a ViT-style vision encoder
of matched width and depth added in front (patch embedding, transformer
blocks, projector). The encoder-free configuration is therefore a strict
component subset and must come out smaller on both counts.
"""

from __future__ import annotations

from .model import ModelConfig
from .vta import token_count


def attention_layer_flops(s: int, d: int) -> int:
    """MACs for one self-attention layer over s rows of width d."""
    return 2 * s * s * d + 4 * s * d * d


def ffn_flops(s: int, d: int) -> int:
    return 8 * s * d * d


def decoder_layer_params(d: int) -> int:
    # two layer norms, four attention projections with bias, 4d feed-forward
    return 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)


def count_params_flops(config: ModelConfig, image_hw: tuple[int, int], text_len: int,
                       prompt_len: int = 0) -> dict:
    d = config.embed_dim
    p = config.patch_size
    c = config.conv_channels
    v = config.vocab_size
    grid = config.max_patch_grid
    h, w = image_hw
    n = token_count(h, w, p)
    cond = 1 + prompt_len
    s = n + prompt_len + text_len

    param_components = {
        "adapter": (p * p * 3 * c + c) + (c * d + d) + 3 * d * d
        + (2 * grid * d if config.vta_positional else 0),
        "co_attention": 4 * d * d,
        "embeddings": v * d + config.max_seq_len * d,
        "decoder_layers": config.n_layers * decoder_layer_params(d),
        "decoder_final": 2 * d + d * v + v,
    }
    flop_components = {
        "adapter_embed": n * (p * p * 3 * c) + n * (c * d),
        "adapter_refine": 3 * n * d * d + 2 * n * n * d,
        "co_attention": 2 * (n + text_len) * d * d + 4 * n * text_len * d
        + 2 * (n + cond) * d * d + 3 * n * cond * d,
        "decoder_layers": config.n_layers * (attention_layer_flops(s, d) + ffn_flops(s, d)),
        "lm_head": text_len * d * v,
    }
    encoder_free = {
        "params": sum(param_components.values()),
        "flops": sum(flop_components.values()),
        "param_components": param_components,
        "flop_components": flop_components,
    }

    encoder_params = (p * p * 3 * d + d) + grid * grid * d \
        + config.n_layers * decoder_layer_params(d) + 2 * d + (d * d + d)
    encoder_flops = n * (p * p * 3 * d) \
        + config.n_layers * (attention_layer_flops(n, d) + ffn_flops(n, d)) \
        + n * d * d
    encoder_based = {
        "params": encoder_free["params"] + encoder_params,
        "flops": encoder_free["flops"] + encoder_flops,
        "param_components": dict(param_components, vision_encoder=encoder_params),
        "flop_components": dict(flop_components, vision_encoder=encoder_flops),
    }
    return {
        "tokens": n,
        "seq_rows": s,
        "encoder_free": encoder_free,
        "encoder_based": encoder_based,
    }
