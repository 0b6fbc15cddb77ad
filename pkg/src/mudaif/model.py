"""Shared decoder-only transformer over pseudo-token and text streams.

The input sequence is [visual rows ; prompt rows ; text rows]. Visual and
prompt rows see each other bidirectionally and are visible to every text row;
text rows are causal among themselves. Text rows are fed as
[BOS] + text[:-1], so the logit at text position i is the next-token
prediction for text[i] and forward() returns exactly len(text) rows.

Fusion wiring (concat mode): visual rows are the refined pseudo-tokens plus
the visual-to-text co-attention applied over the conditioning stream
([BOS] + prompt), and each text row receives its text-to-visual mixture of
the pseudo-tokens residually. Both pieces depend only on the image, the
conditioning, and the row's own token, which keeps next-token prediction
strictly autoregressive. The strict-sum mode instead replaces the visual rows
with the literal summed fusion over the full text; that literal form is kept
for fidelity tests and is not causal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import core, fusion, vta
from .core import Tensor


PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


class ConfigError(ValueError):
    """Model configuration is inconsistent or disagrees with the inputs."""


class SequenceLengthError(ValueError):
    """Assembled sequence does not fit in max_seq_len."""


@dataclass
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 16
    max_seq_len: int = 64
    patch_size: int = 16
    conv_channels: int = 0          # 0 means "same as embed_dim"
    max_patch_grid: int = 16
    fusion_mode: str = "concat"     # or "strict_sum"
    vta_residual: bool = False
    vta_positional: bool = True
    lambda_pretrain: float = 1.0
    lambda_task: float = 1.0

    def __post_init__(self):
        if self.conv_channels == 0:
            self.conv_channels = self.embed_dim
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.fusion_mode not in ("concat", "strict_sum"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.vocab_size <= len((PAD_ID, BOS_ID, EOS_ID)):
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room for real tokens")
        if self.lambda_pretrain < 0 or self.lambda_task < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderLayerParams:
    ln1_gain: Tensor
    ln1_shift: Tensor
    attn_q_w: Tensor
    attn_q_b: Tensor
    attn_k_w: Tensor
    attn_k_b: Tensor
    attn_v_w: Tensor
    attn_v_b: Tensor
    attn_o_w: Tensor
    attn_o_b: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class ModelParams:
    """All learnable tensors of the full pipeline, addressable by name."""

    vta: vta.VtaParams
    fusion: fusion.CoAttentionParams
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[DecoderLayerParams]
    final_gain: Tensor
    final_shift: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.vta.named())
        out.update(self.fusion.named())
        out["decoder.tok_emb"] = self.tok_emb
        out["decoder.pos_emb"] = self.pos_emb
        for i, layer in enumerate(self.layers):
            for fname in DecoderLayerParams.__dataclass_fields__:
                out[f"decoder.layer{i}.{fname}"] = getattr(layer, fname)
        out["decoder.final_gain"] = self.final_gain
        out["decoder.final_shift"] = self.final_shift
        out["decoder.out_w"] = self.out_w
        out["decoder.out_b"] = self.out_b
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named().values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded Gaussian init (std 0.02); the output head starts at zero so an
    untrained model emits exactly uniform next-token distributions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    d = config.embed_dim

    def w(*shape):
        return Tensor(rng.normal(scale=0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = [
        DecoderLayerParams(
            ln1_gain=ones(d), ln1_shift=zeros(d),
            attn_q_w=w(d, d), attn_q_b=zeros(d),
            attn_k_w=w(d, d), attn_k_b=zeros(d),
            attn_v_w=w(d, d), attn_v_b=zeros(d),
            attn_o_w=w(d, d), attn_o_b=zeros(d),
            ln2_gain=ones(d), ln2_shift=zeros(d),
            ffn_w1=w(d, 4 * d), ffn_b1=zeros(4 * d),
            ffn_w2=w(4 * d, d), ffn_b2=zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    return ModelParams(
        vta=vta.init_vta_params(d, config.patch_size, config.conv_channels,
                                config.max_patch_grid, config.vta_positional, rng),
        fusion=fusion.init_co_attention_params(d, rng),
        tok_emb=w(config.vocab_size, d),
        pos_emb=w(config.max_seq_len, d),
        layers=layers,
        final_gain=ones(d),
        final_shift=zeros(d),
        out_w=zeros(d, config.vocab_size),
        out_b=zeros(config.vocab_size),
    )


def prefix_causal_mask(prefix_len: int, text_len: int) -> np.ndarray:
    """Permission mask: prefix rows are mutually visible, text rows causal."""
    s = prefix_len + text_len
    allowed = np.zeros((s, s), dtype=bool)
    allowed[:, :prefix_len] = True
    allowed[prefix_len:, prefix_len:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    return allowed


def _multi_head_attention(x: Tensor, layer: DecoderLayerParams, n_heads: int,
                          mask: np.ndarray, attn_sink: Optional[list], tag: str) -> Tensor:
    q = core.matmul(x, layer.attn_q_w) + layer.attn_q_b
    k = core.matmul(x, layer.attn_k_w) + layer.attn_k_b
    v = core.matmul(x, layer.attn_v_w) + layer.attn_v_b
    dh = x.shape[1] // n_heads
    heads = []
    for h in range(n_heads):
        qs = core.slice_cols(q, h * dh, (h + 1) * dh)
        ks = core.slice_cols(k, h * dh, (h + 1) * dh)
        vs = core.slice_cols(v, h * dh, (h + 1) * dh)
        out, weights = core.scaled_dot_attention(qs, ks, vs, mask=mask, return_weights=True)
        if attn_sink is not None:
            attn_sink.append((f"{tag}.head{h}", weights.data.copy()))
        heads.append(out)
    return core.matmul(core.concat_cols(heads), layer.attn_o_w) + layer.attn_o_b


def _ffn(x: Tensor, layer: DecoderLayerParams) -> Tensor:
    hidden = core.gelu(core.matmul(x, layer.ffn_w1) + layer.ffn_b1)
    return core.matmul(hidden, layer.ffn_w2) + layer.ffn_b2


def _check_ids(ids: Sequence[int], vocab_size: int, what: str) -> list[int]:
    ids = [int(i) for i in ids]
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ConfigError(f"{what} id {i} outside vocabulary of size {vocab_size}")
    return ids


def _decode_rows(image: Tensor, text_row_ids: Sequence[int],
                 prompt_ids: Sequence[int], params: ModelParams, config: ModelConfig,
                 attn_sink: Optional[list] = None) -> Tensor:
    """Run the full pipeline; returns next-token logits for every text row."""
    prompt_ids = _check_ids(prompt_ids, config.vocab_size, "prompt")
    text_row_ids = _check_ids(text_row_ids, config.vocab_size, "text")

    tokens = vta.vta_embed(image, params.vta)
    tokens, refine_weights = vta.vta_refine(tokens, params.vta, residual=config.vta_residual,
                                            return_weights=True)
    if attn_sink is not None:
        attn_sink.append(("vta_refine", refine_weights.data.copy()))
    n = tokens.shape[0]
    l_rows = len(text_row_ids)
    c = len(prompt_ids)
    total = n + c + l_rows
    if total > config.max_seq_len:
        raise SequenceLengthError(
            f"sequence of {total} rows ({n} visual + {c} prompt + {l_rows} text) "
            f"exceeds max_seq_len {config.max_seq_len}")

    text_emb = core.take_rows(params.tok_emb, text_row_ids)
    vis_to_txt, txt_to_vis = fusion.co_attention_weights(tokens, text_emb, params.fusion)
    if attn_sink is not None:
        attn_sink.append(("visual_to_text", vis_to_txt.data.copy()))
        attn_sink.append(("text_to_visual", txt_to_vis.data.copy()))
    fused = fusion.fuse(vis_to_txt, txt_to_vis, text_emb, tokens, mode=config.fusion_mode)
    if config.fusion_mode == "strict_sum":
        visual_rows = fused.matrix
        text_rows = text_emb
    else:
        cond_emb = core.take_rows(params.tok_emb, [BOS_ID] + prompt_ids)
        vis_to_cond, _ = fusion.co_attention_weights(tokens, cond_emb, params.fusion)
        if attn_sink is not None:
            attn_sink.append(("visual_to_conditioning", vis_to_cond.data.copy()))
        visual_rows = tokens + core.matmul(vis_to_cond, cond_emb)
        text_rows = text_emb + fused.text_block()

    blocks = [visual_rows]
    if c:
        blocks.append(core.take_rows(params.tok_emb, prompt_ids))
    blocks.append(text_rows)
    x = core.concat_rows(blocks)
    x = x + core.take_rows(params.pos_emb, np.arange(total))

    mask = prefix_causal_mask(n + c, l_rows)
    for i, layer in enumerate(params.layers):
        normed = core.layer_norm(x, layer.ln1_gain, layer.ln1_shift)
        x = x + _multi_head_attention(normed, layer, config.n_heads, mask,
                                      attn_sink, f"layer{i}")
        normed = core.layer_norm(x, layer.ln2_gain, layer.ln2_shift)
        x = x + _ffn(normed, layer)
    x = core.layer_norm(x, params.final_gain, params.final_shift)
    text_states = core.slice_rows(x, n + c, total)
    return core.matmul(text_states, params.out_w) + params.out_b


def forward(image: Tensor, text: Sequence[int], prompt: Optional[Sequence[int]],
            params: ModelParams, config: ModelConfig,
            attn_sink: Optional[list] = None) -> Tensor:
    """Next-token logits at every text position: an L x vocab tensor."""
    text = _check_ids(text, config.vocab_size, "text")
    if not text:
        raise ConfigError("forward needs a nonempty text sequence")
    rows = [BOS_ID] + text[:-1]
    return _decode_rows(image, rows, list(prompt or []), params, config, attn_sink)


def next_token_distribution(image: Tensor, prefix: Sequence[int], params: ModelParams,
                            config: ModelConfig,
                            prompt: Optional[Sequence[int]] = None) -> np.ndarray:
    """Probability vector over the vocabulary for the token after ``prefix``."""
    rows = [BOS_ID] + list(prefix)
    with core.no_grad():
        logits = _decode_rows(image, rows, list(prompt or []), params, config)
    last = logits.data[-1]
    z = np.exp(last - last.max())
    return z / z.sum()


@dataclass
class DecodeRule:
    """How to pick the next token from a distribution."""

    kind: str = "greedy"            # greedy | temperature | top_k
    temperature: float = 1.0
    top_k: int = 0

    def validate(self, vocab_size: int) -> None:
        if self.kind not in ("greedy", "temperature", "top_k"):
            raise ValueError(f"unknown decode rule {self.kind!r}")
        if self.kind in ("temperature", "top_k") and self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.kind == "top_k" and not 1 <= self.top_k:
            raise ValueError(f"top-k needs k >= 1, got {self.top_k}")


def _pick(probs: np.ndarray, rule: DecodeRule, rng: np.random.Generator) -> int:
    if rule.kind == "greedy":
        return int(np.argmax(probs))
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    if rule.kind == "top_k":
        k = min(rule.top_k, probs.size)
        cutoff = np.sort(logp)[-k]
        logp = np.where(logp >= cutoff, logp, -np.inf)
    scaled = logp / rule.temperature
    scaled -= scaled.max()
    p = np.exp(scaled)
    p /= p.sum()
    return int(rng.choice(probs.size, p=p))


def generate(image: Tensor, prompt: Sequence[int], params: ModelParams, config: ModelConfig,
             rule: DecodeRule = DecodeRule(), max_new: int = 32, seed: int = 0) -> list[int]:
    """Autoregressive decoding; stops at EOS or after max_new tokens.

    Greedy decoding is deterministic; sampled rules are reproducible from the
    seed. The returned ids exclude BOS/EOS.
    """
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    rule.validate(config.vocab_size)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    out: list[int] = []
    for _ in range(max_new):
        try:
            probs = next_token_distribution(image, out, params, config, prompt=prompt)
        except SequenceLengthError:
            break  # context window full
        nxt = _pick(probs, rule, rng)
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out
