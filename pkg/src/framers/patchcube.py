"""Space-time cube embedding and the pixel patchify/unpatchify pair.

Token order is time-major, then row-major over the spatial grid:
flat index = t * s_tok + row * grid_w + col.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .clipio import ClipSpec, VideoClip


@dataclass(frozen=True)
class ModelConfig:
    t_raw: int = 16
    height: int = 224
    width: int = 224
    channels: int = 3
    temporal_patch: int = 2
    spatial_patch: int = 16
    embed_dim: int = 768
    encoder_depth: int = 12
    encoder_heads: int = 12
    decoder_dim: int = 384
    decoder_depth: int = 4
    decoder_heads: int = 6
    mlp_ratio: float = 4.0
    pos_embed: str = "sincos"  # or "learnable" (zero-initialised)
    mask_token_trainable: bool = True
    # encoder input is (pixels - pixel_mean) / pixel_std; targets stay in [0, 1]
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        for axis, size, patch in (
            ("t_raw", self.t_raw, self.temporal_patch),
            ("height", self.height, self.spatial_patch),
            ("width", self.width, self.spatial_patch),
        ):
            if size % patch:
                raise ValueError(f"{axis}={size} not divisible by patch size {patch}")
        if self.embed_dim % self.encoder_heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by encoder_heads={self.encoder_heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim={self.decoder_dim} not divisible by decoder_heads={self.decoder_heads}")
        if not self.pixel_std > 0:
            raise ValueError(f"pixel_std must be positive, got {self.pixel_std}")
        if self.pos_embed not in ("sincos", "learnable"):
            raise ValueError(f"pos_embed must be 'sincos' or 'learnable', got {self.pos_embed!r}")

    @property
    def t_tok(self) -> int:
        return self.t_raw // self.temporal_patch

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.spatial_patch, self.width // self.spatial_patch

    @property
    def s_tok(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_tokens(self) -> int:
        return self.t_tok * self.s_tok

    @property
    def patch_dim(self) -> int:
        return self.temporal_patch * self.spatial_patch**2 * self.channels

    @property
    def clip_spec(self) -> ClipSpec:
        return ClipSpec(t_raw=self.t_raw, height=self.height, width=self.width, channels=self.channels)


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [t_tok, s_tok, D]
    config: ModelConfig

    def __post_init__(self):
        want = (self.config.t_tok, self.config.s_tok)
        if self.tokens.ndim != 3 or self.tokens.shape[:2] != want:
            raise ValueError(f"token grid shape {self.tokens.shape} inconsistent with (t_tok, s_tok)={want}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("token grid has non-finite values")


def _check_clip_shape(shape, config: ModelConfig) -> None:
    names = ("t_raw", "height", "width", "channels")
    want = (config.t_raw, config.height, config.width, config.channels)
    if len(shape) != 4:
        raise ValueError(f"clip must be 4-D [t, h, w, c], got shape {tuple(shape)}")
    for name, got, exp in zip(names, shape, want):
        if got != exp:
            raise ValueError(f"clip axis {name} is {got}, config expects {exp}")


def _split(x, config: ModelConfig):
    """Reshape trailing [t, h, w, c] into the patch layout, keeping leading batch dims."""
    pt, ps = config.temporal_patch, config.spatial_patch
    gh, gw = config.grid
    lead = tuple(x.shape[:-4])
    x = x.reshape(*lead, config.t_tok, pt, gh, ps, gw, ps, config.channels)
    n = len(lead)
    # -> lead, t_tok, gh, gw, pt, ps, ps, c
    order = tuple(range(n)) + tuple(n + i for i in (0, 2, 4, 1, 3, 5, 6))
    x = x.transpose(order) if isinstance(x, np.ndarray) else x.permute(order)
    return x.reshape(*lead, config.t_tok, config.s_tok, config.patch_dim)


def patchify(clip, config: ModelConfig):
    """[..., t_raw, H, W, C] -> [..., t_tok, s_tok, P]; works on numpy arrays and tensors."""
    x = clip.pixels if isinstance(clip, VideoClip) else clip
    _check_clip_shape(x.shape[-4:], config)
    return _split(x, config)


def unpatchify(patches, config: ModelConfig):
    """Exact inverse of :func:`patchify`."""
    pt, ps = config.temporal_patch, config.spatial_patch
    gh, gw = config.grid
    want = (config.t_tok, config.s_tok, config.patch_dim)
    if tuple(patches.shape[-3:]) != want:
        raise ValueError(f"patches shape {tuple(patches.shape)} does not end in {want}")
    lead = tuple(patches.shape[:-3])
    x = patches.reshape(*lead, config.t_tok, gh, gw, pt, ps, ps, config.channels)
    n = len(lead)
    order = tuple(range(n)) + tuple(n + i for i in (0, 3, 1, 4, 2, 5, 6))
    x = x.transpose(order) if isinstance(x, np.ndarray) else x.permute(order)
    return x.reshape(*lead, config.t_raw, config.height, config.width, config.channels)


def positional_embedding(config: ModelConfig, dim: int | None = None) -> np.ndarray:
    """Fixed sinusoidal table ``[t_tok * s_tok, dim]`` over the flattened token index."""
    dim = config.embed_dim if dim is None else dim
    if dim % 2:
        raise ValueError(f"sinusoidal embedding needs an even dimension, got {dim}")
    pos = np.arange(config.num_tokens, dtype=np.float64)[:, None]
    freqs = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class CubeEmbed(nn.Module):
    """Linear map of each non-overlapping pt x ps x ps pixel cube to a D-vector.

    Equivalent to a Conv3d whose kernel equals its stride, written as a
    patchify followed by a dense layer so the token order is explicit.
    """

    def __init__(self, config: ModelConfig, bias: bool = True):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.patch_dim, config.embed_dim, bias=bias)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(clips, self.config))


def cube_embed(clip, params: CubeEmbed) -> TokenGrid:
    """Embed one clip with the given embedding weights."""
    px = clip.pixels if isinstance(clip, VideoClip) else np.asarray(clip)
    _check_clip_shape(px.shape, params.config)
    dtype = params.proj.weight.dtype
    with torch.no_grad():
        tokens = params(torch.as_tensor(px, dtype=dtype))
    return TokenGrid(tokens.numpy(), params.config)
