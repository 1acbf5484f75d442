"""Key-frame selector head trained on frozen FrameMAE encoder features.

Pipeline per clip: encoder features ``[t_tok, s_tok, D]`` -> per-token linear
projection to ``proj_dim`` -> max over the spatial axis -> flatten
``t_tok * proj_dim`` -> ``blocks`` x (linear, GELU, dropout) -> linear to
one logit per keep-combination.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .clipio import VideoClip
from .framemae import FrameMAE, make_optimizer
from .framemask import num_combos
from .labelgen import LabelRecord
from .patchcube import TokenGrid

log = logging.getLogger(__name__)

# published full-scale results (SSv2, 50k/10k split); quoted as context, not reproducible here
REFERENCE_TABLE = [
    {"blocks": 3, "top1": 0.271, "top5": 0.5052, "dropout": 0.1, "best_epoch": 224},
    {"blocks": 3, "top1": 0.268, "top5": 0.497, "dropout": 0.0, "best_epoch": 204},
    {"blocks": 4, "top1": 0.251, "top5": 0.486, "dropout": 0.0, "best_epoch": 200},
]


@dataclass(frozen=True)
class SelectorConfig:
    in_dim: int = 768
    t_tok: int = 8
    k: int = 2
    proj_dim: int = 384
    blocks: int = 3
    hidden: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    @property
    def classes(self) -> int:
        return num_combos(self.t_tok, self.k)


class SelectorHead(nn.Module):
    def __init__(self, config: SelectorConfig):
        super().__init__()
        self.config = config
        self.projector = nn.Linear(config.in_dim, config.proj_dim)
        layers: list[nn.Module] = []
        width = config.t_tok * config.proj_dim
        for _ in range(config.blocks):
            layers += [nn.Linear(width, config.hidden), nn.GELU(), nn.Dropout(config.dropout)]
            width = config.hidden
        self.mlp = nn.Sequential(*layers)
        self.out = nn.Linear(width, config.classes)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        """[..., t_tok, s_tok, D] -> [..., t_tok, proj_dim]: project each token, then spatial max."""
        return self.projector(features).amax(dim=-2)

    def classify(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.out(self.mlp(pooled.flatten(-2)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.classify(self.pool(features))


def extract_features(clip: VideoClip, model: FrameMAE) -> TokenGrid:
    """Frozen encoder output for the unmasked clip."""
    feats = batch_features([clip], model)[0]
    return TokenGrid(feats, model.config)


def batch_features(clips: Sequence[VideoClip], model: FrameMAE, batch_size: int = 16) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            x = torch.as_tensor(np.stack([c.pixels for c in clips[i : i + batch_size]]), dtype=dtype)
            out.append(model.features(x).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.t_tok, model.config.s_tok, model.config.embed_dim))


def pool_project(features, head: SelectorHead) -> torch.Tensor:
    x = features.tokens if isinstance(features, TokenGrid) else features
    with torch.no_grad():
        return head.pool(torch.as_tensor(x, dtype=head.projector.weight.dtype))


def selector_forward(pooled, head: SelectorHead, train_mode: bool = False) -> torch.Tensor:
    head.train(train_mode)
    x = torch.as_tensor(pooled, dtype=head.projector.weight.dtype)
    with torch.no_grad():
        logits = head.classify(x)
    head.eval()
    return logits


def topk_predictions(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; equal logits rank the lower class first."""
    arr = np.asarray(logits, dtype=np.float64)
    return np.argsort(-arr, axis=-1, kind="stable")[..., :k]


def topk_accuracy(logits, labels, k: int) -> float:
    arr = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if k > arr.shape[-1]:
        raise ValueError(f"k={k} exceeds number of classes {arr.shape[-1]}")
    if len(labels) == 0:
        return float("nan")
    top = topk_predictions(arr, k)
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def predict_slots(head: SelectorHead, features) -> int:
    """Arg-max combo index for one clip's encoder features."""
    logits = selector_forward(pool_project(features, head), head)
    return int(topk_predictions(logits.numpy(), 1).reshape(-1)[0])


@dataclass
class SelectorHyperparams:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    val_fraction: float = 0.2


@dataclass
class SelectorResult:
    head: SelectorHead
    trace: list[dict]
    best_epoch: int
    best_top1: float
    best_top5: float
    framemae_hash: str


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _evaluate(head: SelectorHead, feats: torch.Tensor, labels: torch.Tensor, batch: int = 128):
    head.eval()
    logits = []
    with torch.no_grad():
        for i in range(0, len(feats), batch):
            logits.append(head(feats[i : i + batch]))
    logits = torch.cat(logits)
    loss = float(F.cross_entropy(logits, labels))
    arr = logits.numpy()
    return loss, topk_accuracy(arr, labels.numpy(), 1), topk_accuracy(arr, labels.numpy(), 5), arr


def train_selector(
    features: np.ndarray,
    records: Sequence[LabelRecord],
    config: SelectorConfig,
    hyper: SelectorHyperparams,
    seed: int,
    framemae_hash: str,
    val_features: np.ndarray | None = None,
    val_records: Sequence[LabelRecord] | None = None,
) -> SelectorResult:
    """Cross-entropy training on ``gt_label`` with a frozen encoder.

    ``features[i]`` are the encoder features of ``records[i]``'s clip. When no
    explicit validation set is given, a seeded ``val_fraction`` split is held
    out. The head from the best validation top-1 epoch is returned.
    """
    for r in list(records) + list(val_records or []):
        if r.model_hash != framemae_hash:
            raise ValueError(
                f"label {r.clip_id} was produced by checkpoint {r.model_hash}, "
                f"selector features come from {framemae_hash}"
            )
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    labels = torch.tensor([r.gt_label for r in records], dtype=torch.long)
    if val_features is None:
        tr, va = split_indices(len(records), hyper.val_fraction, seed)
        tr_x, tr_y, va_x, va_y = feats[tr], labels[tr], feats[va], labels[va]
    else:
        tr_x, tr_y = feats, labels
        va_x = torch.as_tensor(np.asarray(val_features), dtype=torch.float32)
        va_y = torch.tensor([r.gt_label for r in val_records], dtype=torch.long)

    torch.manual_seed(seed)
    head = SelectorHead(config)
    steps_per_epoch = max(math.ceil(len(tr_x) / hyper.batch_size), 1)
    opt, sched = make_optimizer(
        head, hyper.lr, hyper.weight_decay, hyper.betas, hyper.eps, hyper.epochs * steps_per_epoch, hyper.warmup_frac
    )
    rng = np.random.default_rng(seed)
    loss0, top1, top5, _ = _evaluate(head, va_x, va_y)
    trace = [{"epoch": 0, "loss": loss0, "val_loss": loss0, "top1": top1, "top5": top5}]
    best = (top1, top5, 0, copy.deepcopy(head.state_dict()))
    for epoch in range(1, hyper.epochs + 1):
        head.train()
        order = torch.from_numpy(rng.permutation(len(tr_x)))
        total, seen = 0.0, 0
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            loss = F.cross_entropy(head(tr_x[idx]), tr_y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite selector loss at epoch {epoch}, lr={sched.get_last_lr()[0]:.3e}"
                )
            opt.step()
            sched.step()
            total += value * len(idx)
            seen += len(idx)
        val_loss, top1, top5, _ = _evaluate(head, va_x, va_y)
        trace.append({"epoch": epoch, "loss": total / max(seen, 1), "val_loss": val_loss, "top1": top1, "top5": top5})
        if top1 > best[0]:
            best = (top1, top5, epoch, copy.deepcopy(head.state_dict()))
    head.load_state_dict(best[3])
    head.eval()
    return SelectorResult(head, trace, best[2], best[0], best[1], framemae_hash)


def ablation_sweep(
    grid: Sequence[tuple[int, float]],
    features: np.ndarray,
    records: Sequence[LabelRecord],
    base: SelectorConfig,
    hyper: SelectorHyperparams,
    seed: int,
    framemae_hash: str,
    **val,
) -> list[dict]:
    """One training run per (blocks, dropout) point, all with the same seed and split."""
    if len(grid) < 2:
        raise ValueError("ablation grid needs at least two points")
    rows = []
    for blocks, dropout in grid:
        cfg = SelectorConfig(**{**asdict(base), "blocks": int(blocks), "dropout": float(dropout)})
        res = train_selector(features, records, cfg, hyper, seed, framemae_hash, **val)
        rows.append(
            {"blocks": blocks, "top1": res.best_top1, "top5": res.best_top5, "dropout": dropout, "best_epoch": res.best_epoch}
        )
    return rows


TABLE_COLUMNS = ("blocks", "top-1", "top-5", "drop-out", "best epoch")


def _row_cells(row: dict) -> list[str]:
    return [
        str(row["blocks"]),
        f"{100 * row['top1']:.2f}%",
        f"{100 * row['top5']:.2f}%",
        f"{row['dropout']:g}" if row["dropout"] else "-",
        str(row["best_epoch"]),
    ]


def format_table(rows: Sequence[dict]) -> str:
    """Render sweep rows in the blocks/top-1/top-5/drop-out/best-epoch layout, with reference values."""
    lines = [" | ".join(TABLE_COLUMNS), " | ".join("---" for _ in TABLE_COLUMNS)]
    lines += [" | ".join(_row_cells(r)) for r in rows]
    ref = "; ".join(" ".join(_row_cells(r)) for r in REFERENCE_TABLE)
    lines += [
        "",
        "Reference (SSv2 50k/10k, not reproducible at this scale): " + ref,
    ]
    return "\n".join(lines)


def save_selector(directory, result: SelectorResult, **extra) -> str:
    return checkpoint.save(
        directory,
        result.head,
        "selector",
        asdict(result.head.config),
        framemae_hash=result.framemae_hash,
        best_epoch=result.best_epoch,
        **extra,
    )


def load_selector(directory) -> tuple[SelectorHead, dict]:
    manifest = checkpoint.read_manifest(directory)
    if manifest["kind"] != "selector":
        raise ValueError(f"{directory} holds a {manifest['kind']!r} checkpoint, not selector")
    head = SelectorHead(SelectorConfig(**manifest["config"]))
    checkpoint.load_state(directory, head)
    head.eval()
    return head, manifest
