"""Frame-masked autoencoder: model, masked MSE, pretraining loop, reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .clipio import VideoClip
from .framemask import FrameMask, mask_from_keep
from .patchcube import CubeEmbed, ModelConfig, patchify, positional_embedding, unpatchify

log = logging.getLogger(__name__)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        x = F.scaled_dot_product_attention(q, k, v)
        return self.proj(x.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class FrameMAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.embed = CubeEmbed(c)
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.encoder_heads, c.mlp_ratio) for _ in range(c.encoder_depth))
        self.norm = nn.LayerNorm(c.embed_dim) if c.encoder_depth else nn.Identity()

        self.decoder_embed = nn.Linear(c.embed_dim, c.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(c.decoder_dim), requires_grad=c.mask_token_trainable)
        self.decoder_blocks = nn.ModuleList(
            Block(c.decoder_dim, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(c.decoder_dim)
        self.head = nn.Linear(c.decoder_dim, c.patch_dim)

        if c.pos_embed == "sincos":
            self.register_buffer("pos_embed", torch.from_numpy(positional_embedding(c)).float())
            self.register_buffer(
                "decoder_pos_embed", torch.from_numpy(positional_embedding(c, c.decoder_dim)).float()
            )
        else:
            self.pos_embed = nn.Parameter(torch.zeros(c.num_tokens, c.embed_dim))
            self.decoder_pos_embed = nn.Parameter(torch.zeros(c.num_tokens, c.decoder_dim))
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    # -- token bookkeeping -------------------------------------------------

    def token_mask(self, masks: torch.Tensor) -> torch.Tensor:
        """[B, t_tok] slot mask -> [B, t_tok * s_tok] token mask."""
        return masks.repeat_interleave(self.config.s_tok, dim=1)

    def split_ids(self, masks: torch.Tensor):
        """Flat ids with visible tokens first (original order), and the restore permutation."""
        tok = self.token_mask(masks)
        counts = tok.sum(dim=1)
        if not torch.all(counts == counts[0]):
            raise ValueError("every mask in a batch must hide the same number of slots")
        ids = torch.argsort(tok.to(torch.int8), dim=1, stable=True)
        restore = torch.argsort(ids, dim=1)
        return ids, restore, tok.shape[1] - int(counts[0])

    # -- forward pieces ----------------------------------------------------

    def embed_tokens(self, clips: torch.Tensor) -> torch.Tensor:
        """[B, t, H, W, C] -> [B, N, D] with positional embeddings added."""
        x = (clips - self.config.pixel_mean) / self.config.pixel_std
        return self.embed(x).flatten(1, 2) + self.pos_embed

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("encoder input has non-finite values")
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def decode(self, latent: torch.Tensor, ids: torch.Tensor, restore: torch.Tensor) -> torch.Tensor:
        B, v, _ = latent.shape
        N = self.config.num_tokens
        if ids.shape != (B, N) or restore.shape != (B, N):
            raise ValueError(f"bookkeeping shape {tuple(ids.shape)} inconsistent with batch {B} x {N} tokens")
        x = self.decoder_embed(latent)
        fill = self.mask_token.to(x.dtype).expand(B, N - v, -1)
        x = torch.cat([x, fill], dim=1)
        x = torch.gather(x, 1, restore.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        x = x + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.head(self.decoder_norm(x))
        return x.reshape(B, self.config.t_tok, self.config.s_tok, self.config.patch_dim)

    def forward(self, clips: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Predict pixel patches ``[B, t_tok, s_tok, P]`` for every position."""
        ids, restore, v = self.split_ids(masks)
        x = self.embed_tokens(clips)
        visible = torch.gather(x, 1, ids[:, :v].unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        # with every slot masked the decoder runs on mask tokens alone
        latent = self.encode(visible) if v else visible
        return self.decode(latent, ids, restore)

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        """Encoder output for unmasked clips, ``[B, t_tok, s_tok, D]``."""
        x = self.encode(self.embed_tokens(clips))
        return x.reshape(x.shape[0], self.config.t_tok, self.config.s_tok, -1)


def masks_tensor(masks: Sequence[FrameMask]) -> torch.Tensor:
    return torch.tensor([m.masked for m in masks], dtype=torch.bool)


def reconstruction_loss(pred, target, mask, scope: str = "masked_only"):
    """Mean squared error over the masked tokens (or all tokens).

    ``pred``/``target`` are ``[..., t_tok, s_tok, P]``; ``mask`` is a FrameMask
    or a bool array/tensor ``[..., t_tok]`` broadcastable against the batch.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    as_torch = isinstance(pred, torch.Tensor)
    sq = (pred - target) ** 2
    if scope == "all":
        return sq.mean()
    if scope != "masked_only":
        raise ValueError(f"unknown loss scope {scope!r}")
    m = mask.masked if isinstance(mask, FrameMask) else mask
    if as_torch:
        weight = torch.as_tensor(m, dtype=torch.bool).to(sq.dtype)[..., None, None].expand_as(sq)
    else:
        weight = np.broadcast_to(np.asarray(m, dtype=bool)[..., None, None], sq.shape).astype(sq.dtype)
    n_selected = weight.sum()
    if float(n_selected) == 0:
        raise ValueError("masked_only loss over an empty selection (no masked slots)")
    return (sq * weight).sum() / n_selected


# -- unbatched functional views ---------------------------------------------


def encode(visible_tokens, model: FrameMAE) -> torch.Tensor:
    """Run the encoder over ``[v, D]`` visible tokens (positional embeddings already added)."""
    x = torch.as_tensor(visible_tokens)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"encoder expects [v >= 1, D] tokens, got shape {tuple(x.shape)}")
    return model.encode(x.unsqueeze(0))[0]


def decode(latent, mask: FrameMask, model: FrameMAE) -> torch.Tensor:
    """Scatter ``[v, D]`` latents back, fill masked slots, predict ``[t_tok, s_tok, P]``."""
    latent = torch.as_tensor(latent)
    c = model.config
    if mask.t_tok != c.t_tok:
        raise ValueError(f"mask has {mask.t_tok} slots, model expects {c.t_tok}")
    if latent.shape[0] != (c.t_tok - mask.masked_count) * c.s_tok:
        raise ValueError(
            f"latent has {latent.shape[0]} rows but mask leaves {(c.t_tok - mask.masked_count) * c.s_tok} visible"
        )
    ids, restore, _ = model.split_ids(masks_tensor([mask]))
    return model.decode(latent.unsqueeze(0), ids, restore)[0]


def predict(model: FrameMAE, clips, masks: Sequence[FrameMask]) -> torch.Tensor:
    """Batched no-grad prediction in the model's dtype."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(clips), dtype=dtype)
    with torch.no_grad():
        return model(x, masks_tensor(masks))


# -- pretraining --------------------------------------------------------------


@dataclass
class PretrainHyperparams:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1.5e-4
    warmup_frac: float = 0.05
    min_lr_ratio: float = 0.0  # cosine decays to this fraction of lr
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    masked_count: int | list[int] = 3
    loss_scope: str = "masked_only"
    checkpoint_every: int = 0
    log_every: int = 100


@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    rng: np.random.Generator
    seed: int
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)


def warmup_cosine(total_steps: int, warmup_frac: float, floor: float = 0.0):
    warmup = max(int(math.ceil(total_steps * warmup_frac)), 1) if warmup_frac > 0 else 0

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(total_steps - warmup, 1)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return factor


def make_optimizer(model: nn.Module, lr, weight_decay, betas, eps, steps, warmup_frac, min_lr_ratio=0.0):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 and "pos_embed" not in name else no_decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=lr,
        betas=tuple(betas),
        eps=eps,
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(steps, warmup_frac, min_lr_ratio))
    return opt, sched


def _stack(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32, copy=False)
    return np.stack([c.pixels if isinstance(c, VideoClip) else c.clip.pixels for c in dataset])


def pretrain(
    dataset,
    config: ModelConfig,
    hyper: PretrainHyperparams,
    seed: int,
    checkpoint_dir=None,
    model: FrameMAE | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Masked-reconstruction pretraining with a fresh random frame mask per clip per step.

    ``stop_after`` ends the loop early without changing the lr schedule, so the
    trace is a prefix of the full run's trace.
    """
    data = _stack(dataset)
    if len(data) == 0:
        raise ValueError("pretraining dataset is empty")
    torch.manual_seed(seed)
    model = model if model is not None else FrameMAE(config)
    rng = np.random.default_rng(seed)
    opt, sched = make_optimizer(
        model, hyper.lr, hyper.weight_decay, hyper.betas, hyper.eps, hyper.steps, hyper.warmup_frac,
        hyper.min_lr_ratio,
    )
    state = TrainState(model, opt, sched, rng, seed)
    counts = [hyper.masked_count] if isinstance(hyper.masked_count, int) else list(hyper.masked_count)
    dtype = next(model.parameters()).dtype
    t_tok = config.t_tok
    model.train()
    for step in range(min(hyper.steps, stop_after if stop_after is not None else hyper.steps)):
        bs = min(hyper.batch_size, len(data))
        idx = rng.choice(len(data), size=bs, replace=False)
        m = int(counts[rng.integers(len(counts))]) if len(counts) > 1 else counts[0]
        masks = np.zeros((bs, t_tok), dtype=bool)
        for row in masks:
            row[rng.choice(t_tok, size=m, replace=False)] = True
        clips = torch.as_tensor(data[idx], dtype=dtype)
        masks_t = torch.from_numpy(masks)

        pred = model(clips, masks_t)
        loss = reconstruction_loss(pred, patchify(clips, config), masks_t, hyper.loss_scope)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        value = float(loss.detach())
        if not math.isfinite(value):
            grads = [p.grad.norm() for p in model.parameters() if p.grad is not None]
            gnorm = float(torch.stack(grads).norm()) if grads else float("nan")
            raise FloatingPointError(
                f"non-finite loss {value} at step {step}, lr={sched.get_last_lr()[0]:.3e}, grad norm={gnorm:.3e}"
            )
        opt.step()
        sched.step()
        state.step = step + 1
        state.loss_trace.append(value)
        if hyper.log_every and state.step % hyper.log_every == 0:
            log.info("pretrain step %d loss %.6f", state.step, value)
        if checkpoint_dir and hyper.checkpoint_every and state.step % hyper.checkpoint_every == 0:
            save_framemae(Path(checkpoint_dir) / f"step_{state.step:06d}", model, step=state.step, seed=seed)
    model.eval()
    return state


def masked_mse(model: FrameMAE, clips, masks: Sequence[FrameMask], scope: str = "masked_only") -> float:
    """Evaluation loss of ``model`` on clips under the given masks (no grad)."""
    data = _stack(clips)
    pred = predict(model, data, masks)
    target = patchify(torch.as_tensor(data, dtype=pred.dtype), model.config)
    return float(reconstruction_loss(pred, target, masks_tensor(masks), scope))


def reconstruct_clip(clip: VideoClip, keep_slots: Sequence[int], model: FrameMAE, allow_empty: bool = False) -> VideoClip:
    """Rebuild a clip from its kept slots; kept frames are copied bit-exactly."""
    c = model.config
    if not keep_slots and not allow_empty:
        raise ValueError("keep_slots is empty; unconditional generation is disabled")
    mask = mask_from_keep(keep_slots, c.t_tok)
    out = clip.pixels.copy()
    if mask.masked_count:
        pred = predict(model, clip.pixels[None], [mask])[0]
        frames = unpatchify(pred, c).clamp(0.0, 1.0).numpy().astype(np.float32)
        for s in mask.masked_slots:
            sl = slice(s * c.temporal_patch, (s + 1) * c.temporal_patch)
            out[sl] = frames[sl]
    return VideoClip(out, clip_id=clip.clip_id, source_offset=clip.source_offset)


# -- checkpoints ----------------------------------------------------------------


def save_framemae(directory, model: FrameMAE, **extra) -> str:
    return checkpoint.save(directory, model, "framemae", asdict(model.config), **extra)


def load_framemae(directory) -> tuple[FrameMAE, dict]:
    manifest = checkpoint.read_manifest(directory)
    if manifest["kind"] != "framemae":
        raise ValueError(f"{directory} holds a {manifest['kind']!r} checkpoint, not framemae")
    model = FrameMAE(ModelConfig(**manifest["config"]))
    checkpoint.load_state(directory, model)
    model.eval()
    return model, manifest


def model_hash(model: nn.Module) -> str:
    return checkpoint.state_hash(model, asdict(model.config))
