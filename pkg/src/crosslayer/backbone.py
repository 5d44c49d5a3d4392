"""Tiny transformer backbones: a vision encoder that exposes every layer's
tokens and a causal decoder with post-block injection hooks."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, NumericalError
from .projection import FeatureHierarchy


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x: Tensor, causal: bool = False) -> Tensor:
        B, S, D = x.shape
        H, dh = self.num_heads, self.head_dim
        q = self.wq(x).view(B, S, H, dh).transpose(1, 2)
        k = self.wk(x).view(B, S, H, dh).transpose(1, 2)
        v = self.wv(x).view(B, S, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if causal:
            future = torch.ones(S, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        att = scores.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, S, D)
        return self.wo(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, causal: bool = False, mlp_ratio: int = 4):
        super().__init__()
        self.causal = causal
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=self.causal)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x

    def zero_residual_branches(self) -> None:
        """Make the block an exact identity map (residual path only)."""
        with torch.no_grad():
            for lin in (self.attn.wo, self.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


def _uniform_fan_in_(t: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class VisionEncoder(nn.Module):
    """Patch-attribute transformer.

    Each patch is embedded as the sum of its shape, texture and colour
    embeddings. There is no positional embedding by default: the encoder is
    permutation-equivariant, so token averaging in the bottleneck erases
    which patch carried which attribute.
    """

    def __init__(
        self,
        num_layers: int = 8,
        embed_dim: int = 32,
        num_heads: int = 4,
        patch_grid: tuple[int, int] = (4, 4),
        num_shapes: int = 4,
        num_textures: int = 4,
        num_colors: int = 4,
        detail_bottleneck_layer: int | None = None,
        bottleneck_groups: Sequence[Sequence[int]] | None = None,
        positional: bool = False,
    ):
        super().__init__()
        if num_layers < 2:
            raise ConfigError("vision encoder needs at least 2 layers")
        if detail_bottleneck_layer is not None and not 1 <= detail_bottleneck_layer <= num_layers - 1:
            raise ConfigError(
                f"detail_bottleneck_layer={detail_bottleneck_layer} outside [1, {num_layers - 1}]"
            )
        self.num_layers = num_layers
        self.embed_dim = embed_dim
        self.patch_grid = tuple(patch_grid)
        self.num_tokens = patch_grid[0] * patch_grid[1]
        self.detail_bottleneck_layer = detail_bottleneck_layer
        if bottleneck_groups is None:
            bottleneck_groups = [list(range(self.num_tokens))]
        covered = sorted(i for g in bottleneck_groups for i in g)
        if covered != list(range(self.num_tokens)):
            raise ConfigError("bottleneck groups must partition the patch positions")
        self.bottleneck_groups = [list(g) for g in bottleneck_groups]

        self.shape_embed = nn.Embedding(num_shapes, embed_dim)
        self.texture_embed = nn.Embedding(num_textures, embed_dim)
        self.color_embed = nn.Embedding(num_colors, embed_dim)
        for emb in (self.shape_embed, self.texture_embed, self.color_embed):
            _uniform_fan_in_(emb.weight, 1)
        self.pos_embed = nn.Parameter(torch.zeros(self.num_tokens, embed_dim)) if positional else None
        if positional:
            _uniform_fan_in_(self.pos_embed, 1)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads) for _ in range(num_layers))

    def embed_patches(self, patches: Tensor) -> Tensor:
        if patches.dim() != 3 or patches.shape[1] != self.num_tokens or patches.shape[2] != 3:
            raise ConfigError(
                f"image has patch tensor of shape {tuple(patches.shape)}, encoder expects "
                f"(batch, {self.num_tokens}, 3) for grid {self.patch_grid}"
            )
        x = (
            self.shape_embed(patches[..., 0])
            + self.texture_embed(patches[..., 1])
            + self.color_embed(patches[..., 2])
        )
        if self.pos_embed is not None:
            x = x + self.pos_embed
        return x

    def mix_tokens(self, x: Tensor) -> Tensor:
        """Replace every token by the mean of its bottleneck group."""
        if len(self.bottleneck_groups) == 1:
            return x.mean(dim=1, keepdim=True).expand_as(x)
        out = torch.empty_like(x)
        for group in self.bottleneck_groups:
            out[:, group] = x[:, group].mean(dim=1, keepdim=True)
        return out

    def forward(self, patches: Tensor) -> FeatureHierarchy:
        x = self.embed_patches(patches)
        layers = []
        for idx, block in enumerate(self.blocks, start=1):
            x = block(x)
            layers.append((idx, x))
            if idx == self.detail_bottleneck_layer:
                x = self.mix_tokens(x)
        return FeatureHierarchy(layers)


def vision_encode(encoder: VisionEncoder, patches: Tensor) -> FeatureHierarchy:
    return encoder(patches)


@dataclass
class DecoderState:
    hidden: Tensor  # (batch, N_i + N_t, D_t)
    layer_index: int
    visual_mask: "object"  # fusion.VisualMask; typed loosely to avoid an import cycle

    def with_hidden(self, hidden: Tensor) -> "DecoderState":
        return replace(self, hidden=hidden)


@dataclass
class InjectionHook:
    layer_index: int
    fn: Callable[[DecoderState], DecoderState]

    def __call__(self, state: DecoderState) -> DecoderState:
        return self.fn(state)


class DecoderLM(nn.Module):
    def __init__(
        self,
        num_layers: int = 8,
        embed_dim: int = 64,
        num_heads: int = 4,
        vocab_size: int = 64,
        max_len: int = 64,
    ):
        super().__init__()
        self.num_layers = num_layers
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.token_embedding = nn.Embedding(vocab_size, embed_dim)
        _uniform_fan_in_(self.token_embedding.weight, 1)
        self.pos_embedding = nn.Parameter(torch.zeros(max_len, embed_dim))
        _uniform_fan_in_(self.pos_embedding, 1)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, causal=True) for _ in range(num_layers))
        self.ln_f = nn.LayerNorm(embed_dim)
        self.output_head = nn.Linear(embed_dim, vocab_size, bias=False)

    def embed(self, prefix: Tensor, text_tokens: Tensor) -> Tensor:
        if prefix.shape[-1] != self.embed_dim:
            raise ConfigError(f"prefix width {prefix.shape[-1]} != decoder width {self.embed_dim}")
        h = torch.cat([prefix, self.token_embedding(text_tokens)], dim=1)
        if h.shape[1] > self.pos_embedding.shape[0]:
            raise ConfigError(f"sequence length {h.shape[1]} exceeds max_len {self.pos_embedding.shape[0]}")
        return h + self.pos_embedding[: h.shape[1]]

    def forward(
        self,
        prefix: Tensor,
        text_tokens: Tensor,
        hooks: Sequence[InjectionHook] = (),
        visual_mask=None,
    ) -> Tensor:
        """Logits of shape (batch, N_i + N_t, vocab).

        A hook registered at layer l rewrites the hidden state after block l
        and before block l + 1.
        """
        last = 0
        for hook in hooks:
            if not 1 <= hook.layer_index <= self.num_layers:
                raise ConfigError(f"hook at layer {hook.layer_index} outside [1, {self.num_layers}]")
            if hook.layer_index < last:
                raise ConfigError("hooks must be sorted by layer_index")
            last = hook.layer_index

        h = self.embed(prefix, text_tokens)
        pending = list(hooks)
        for idx, block in enumerate(self.blocks, start=1):
            h = block(h)
            _check_finite(h, idx)
            while pending and pending[0].layer_index == idx:
                state = pending.pop(0)(DecoderState(h, idx, visual_mask))
                h = state.hidden
                _check_finite(h, idx)
        return self.output_head(self.ln_f(h))


def _check_finite(h: Tensor, layer: int) -> None:
    if not torch.isfinite(h).all():
        raise NumericalError(f"non-finite hidden state after decoder layer {layer}")


def decoder_forward(lm: DecoderLM, projected_prefix: Tensor, text_tokens: Tensor, hooks=(), visual_mask=None) -> Tensor:
    return lm(projected_prefix, text_tokens, hooks, visual_mask)
