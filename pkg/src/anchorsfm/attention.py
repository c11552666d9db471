"""Masked multi-head attention and the alternating frame/global block.

The localization mask is the heart of this module. Token order is always
"anchor frames first, then query frames"; under the mask

* anchor tokens attend to every anchor token (full cross-view exchange),
* query tokens attend to their own frame and to the flagged (cached) subset
  of anchor tokens,
* nothing attends to query tokens of other frames, and anchors never see
  queries at all, which makes the anchor token trajectory, and hence the
  cached scene representation, independent of the query set.

Disallowed positions get -inf before the softmax, so they carry exactly zero
weight and the anchor-independence property holds bitwise. Kernels run in
float32; callers flip modules to float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

ANCHOR, QUERY = 0, 1


class AttentionError(ValueError):
    pass


class ShapeError(AttentionError):
    pass


class MaskedRowError(AttentionError):
    pass


class InvalidConfigurationError(AttentionError):
    pass


class CacheMissError(AttentionError):
    pass


@dataclass
class TokenGrid:
    """Per-frame token state: one camera token, four registers, K patch tokens."""

    frame_id: int
    camera_token: torch.Tensor     # (1, C)
    register_tokens: torch.Tensor  # (4, C)
    patch_tokens: torch.Tensor     # (K, C)

    def __post_init__(self):
        c = self.camera_token.shape[-1]
        if self.camera_token.shape != (1, c) or self.register_tokens.shape != (4, c):
            raise ShapeError("camera/register token shapes are (1, C) and (4, C)")
        if self.patch_tokens.ndim != 2 or self.patch_tokens.shape[1] != c:
            raise ShapeError("patch tokens must be (K, C)")

    @property
    def tokens(self) -> torch.Tensor:
        """Canonical per-frame order: camera, registers, patches."""
        return torch.cat([self.camera_token, self.register_tokens, self.patch_tokens])

    @classmethod
    def from_tokens(cls, frame_id: int, tokens: torch.Tensor) -> "TokenGrid":
        return cls(frame_id, tokens[:1], tokens[1:5], tokens[5:])

    @property
    def count(self) -> int:
        return 5 + self.patch_tokens.shape[0]


@dataclass
class AttentionMask:
    """Boolean Q x S attention mask plus per-key-token provenance."""

    allowed: torch.Tensor   # (Q, S) bool
    frame_ids: np.ndarray   # (S,) originating frame per key token
    roles: np.ndarray       # (S,) ANCHOR or QUERY
    cached: np.ndarray      # (S,) visible-to-queries flag (layer-cache membership)

    def __post_init__(self):
        if self.allowed.dtype != torch.bool or self.allowed.ndim != 2:
            raise ShapeError("mask must be a 2-D boolean tensor")
        rows = self.allowed.any(dim=1)
        if not bool(rows.all()):
            bad = int((~rows).nonzero()[0, 0])
            raise MaskedRowError(f"query row {bad} has no allowed keys")


@dataclass
class RepresentationCache:
    """Per-layer cached anchor tokens (the keys/values queries may attend to)."""

    layer_tokens: list[torch.Tensor]  # L entries of (M_j, C)
    frame_index: np.ndarray           # (M_j,) originating anchor frame per token

    def __post_init__(self):
        for j, t in enumerate(self.layer_tokens):
            if t.ndim != 2 or t.shape[0] != len(self.frame_index):
                raise ShapeError(f"cache layer {j} tokens do not match provenance")

    @property
    def num_layers(self) -> int:
        return len(self.layer_tokens)

    def layer(self, index: int) -> torch.Tensor:
        if not 0 <= index < len(self.layer_tokens):
            raise CacheMissError(f"no cache for layer {index}")
        t = self.layer_tokens[index]
        if t.shape[0] == 0:
            raise CacheMissError(f"cache layer {index} is empty")
        return t


def build_localization_mask(anchor_layout, query_layout, anchor_cached=None) -> AttentionMask:
    """Square localization mask over anchors-then-queries token order.

    ``anchor_layout`` / ``query_layout`` are lists of (frame_id, token_count).
    ``anchor_cached`` optionally flags, per anchor token, membership in the
    downsampled scene representation; query rows may only attend to flagged
    anchor tokens (default: all of them).
    """
    if not anchor_layout:
        raise InvalidConfigurationError("localization needs at least one anchor frame")
    frame_ids, roles = [], []
    for fid, count in anchor_layout:
        frame_ids += [fid] * count
        roles += [ANCHOR] * count
    n_anchor = len(frame_ids)
    for fid, count in query_layout:
        frame_ids += [fid] * count
        roles += [QUERY] * count
    frame_ids = np.asarray(frame_ids)
    roles = np.asarray(roles)
    total = len(frame_ids)

    cached = np.ones(total, dtype=bool)
    if anchor_cached is not None:
        anchor_cached = np.asarray(anchor_cached, dtype=bool)
        if anchor_cached.shape != (n_anchor,):
            raise ShapeError("anchor_cached must flag every anchor token")
        cached[:n_anchor] = anchor_cached
    cached[n_anchor:] = False  # query tokens are never part of the representation

    allowed = torch.zeros(total, total, dtype=torch.bool)
    is_anchor = torch.from_numpy(roles == ANCHOR)
    allowed[is_anchor.unsqueeze(1) & is_anchor.unsqueeze(0)] = True
    same_frame = torch.from_numpy(frame_ids[:, None] == frame_ids[None, :])
    is_query = ~is_anchor
    allowed |= is_query.unsqueeze(1) & same_frame
    visible = torch.from_numpy(cached)
    allowed |= is_query.unsqueeze(1) & visible.unsqueeze(0)
    return AttentionMask(allowed=allowed, frame_ids=frame_ids, roles=roles, cached=cached)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an arbitrary boolean mask."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise InvalidConfigurationError(
                f"channels {channels} not divisible by heads {heads}"
            )
        self.channels = channels
        self.heads = heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, queries, keys_values, allowed=None, return_weights=False):
        """queries (..., Q, C), keys_values (..., S, C), allowed (Q, S) bool."""
        if queries.shape[-1] != self.channels or keys_values.shape[-1] != self.channels:
            raise ShapeError(
                f"token channel dim must be {self.channels}, got "
                f"{queries.shape[-1]} / {keys_values.shape[-1]}"
            )
        nq, ns = queries.shape[-2], keys_values.shape[-2]
        if allowed is not None:
            if allowed.shape != (nq, ns):
                raise ShapeError(f"mask shape {tuple(allowed.shape)} != ({nq}, {ns})")
            if not bool(allowed.any(dim=-1).all()):
                raise MaskedRowError("attention mask leaves a query row fully masked")

        head_dim = self.channels // self.heads
        def split(x):
            return x.unflatten(-1, (self.heads, head_dim)).transpose(-3, -2)

        q = split(self.q_proj(queries))
        k = split(self.k_proj(keys_values))
        v = split(self.v_proj(keys_values))
        logits = q @ k.transpose(-1, -2) / head_dim**0.5
        if allowed is not None:
            logits = logits.masked_fill(~allowed, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(-3, -2).flatten(-2)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class TransformerSubLayer(nn.Module):
    """Pre-norm attention + residual, then pre-norm feed-forward + residual."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x, kv=None, allowed=None):
        kv_in = x if kv is None else kv
        x = x + self.attn(self.norm1(x), self.norm1(kv_in), allowed)
        return x + self.mlp(self.norm2(x))


class AlternatingBlock(nn.Module):
    """One layer of frame-wise self-attention followed by global attention.

    The global step concatenates all frames along the view dimension, applies
    (optionally masked) attention over the combined token set, and splits the
    result back per frame. Returns the updated frames together with the
    post-frame-attention tokens, which are what the scene representation
    caches for this layer.
    """

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.frame_attn = TransformerSubLayer(channels, heads, mlp_ratio)
        self.global_attn = TransformerSubLayer(channels, heads, mlp_ratio)

    def forward(self, frames: list[torch.Tensor], mask: AttentionMask | None = None):
        counts = [f.shape[0] for f in frames]
        if len({f.shape[1] for f in frames}) != 1:
            raise ShapeError("all frames must share the channel dimension")
        if len(set(counts)) == 1:
            stage = list(self.frame_attn(torch.stack(frames)))
        else:
            stage = [self.frame_attn(f) for f in frames]
        combined = torch.cat(stage)
        if mask is None:
            out = self.global_attn(combined)
        else:
            out = self._masked_global(combined, mask)
        return list(out.split(counts)), stage

    def _masked_global(self, combined, mask: AttentionMask):
        n_anchor = int(np.searchsorted(mask.roles, QUERY))
        anchors_first = bool((mask.roles[:n_anchor] == ANCHOR).all()) and bool(
            (mask.roles[n_anchor:] == QUERY).all()
        )
        block_structured = (
            anchors_first
            and n_anchor > 0
            and bool(mask.allowed[:n_anchor, :n_anchor].all())
            and not bool(mask.allowed[:n_anchor, n_anchor:].any())
        )
        if not block_structured:
            return self.global_attn(combined, allowed=mask.allowed)
        # anchor rows never see query columns, and their masked columns would
        # carry exactly zero weight; computing them through the anchors-only
        # call keeps the accumulation shapes, and hence the bits, identical
        # to a run without any query frames appended.
        anchor_out = self.global_attn(combined[:n_anchor])
        if n_anchor == combined.shape[0]:
            return anchor_out
        query_out = self.global_attn(
            combined[n_anchor:], kv=combined, allowed=mask.allowed[n_anchor:]
        )
        return torch.cat([anchor_out, query_out])


def cached_attend(query_tokens, cache: RepresentationCache, layer_index: int,
                  block: AlternatingBlock):
    """Global-attention step of one query frame against the cached tokens.

    ``query_tokens`` are the frame's post-frame-attention tokens for this
    layer; keys/values are those tokens concatenated with the cached layer
    entry, which reproduces the masked joint pass restricted to this frame.
    Supports a leading batch dimension over query frames.
    """
    layer = cache.layer(layer_index)
    if query_tokens.ndim == 3:
        kv = torch.cat(
            [query_tokens, layer.unsqueeze(0).expand(query_tokens.shape[0], -1, -1)],
            dim=1,
        )
    else:
        kv = torch.cat([query_tokens, layer])
    return block.global_attn(query_tokens, kv=kv)
