"""Exhaustive keep-k oracle: score every slot combination by reconstruction loss.

Labels are written as one JSON object per line (``labels.jsonl``) next to a
``manifest.json`` naming the FrameMAE checkpoint that produced them.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .clipio import VideoClip
from .framemae import FrameMAE, masks_tensor, model_hash, reconstruction_loss
from .framemask import mask_from_combo, num_combos
from .patchcube import patchify

log = logging.getLogger(__name__)

LABELS_FILE = "labels.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass
class LabelRecord:
    clip_id: str
    losses: list[float]
    ranking: list[int]
    gt_label: int
    model_hash: str

    def __post_init__(self):
        losses = np.asarray(self.losses, dtype=np.float64)
        if not np.all(np.isfinite(losses)):
            raise ValueError(f"{self.clip_id}: non-finite loss in label record")
        if sorted(self.ranking) != list(range(len(self.losses))):
            raise ValueError(f"{self.clip_id}: ranking is not a permutation of 0..{len(self.losses) - 1}")
        if np.any(np.diff(losses[self.ranking]) < 0):
            raise ValueError(f"{self.clip_id}: ranking is not sorted by loss")
        if self.gt_label != self.ranking[0]:
            raise ValueError(f"{self.clip_id}: gt_label {self.gt_label} != ranking[0] {self.ranking[0]}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LabelRecord":
        return cls(**json.loads(line))


def as_float64(model: FrameMAE) -> FrameMAE:
    """Read-only double-precision copy used for label evaluation."""
    if next(model.parameters()).dtype == torch.float64:
        return model
    return copy.deepcopy(model).double().eval()


def combo_losses(clip: VideoClip, model: FrameMAE, combos: Sequence[int], k: int = 2) -> np.ndarray:
    """Masked-only MSE of ``clip`` under each keep-combo, evaluated as one batch."""
    c = model.config
    masks = [mask_from_combo(i, c.t_tok, k) for i in combos]
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(clip.pixels, dtype=dtype).expand(len(masks), *clip.pixels.shape)
    m = masks_tensor(masks)
    with torch.no_grad():
        pred = model(x, m)
        sq = (pred - patchify(x, c)) ** 2
    # per-combo mean over masked tokens; each row has the same masked count
    weight = m.to(dtype)[..., None, None].expand_as(sq)
    return ((sq * weight).sum(dim=(1, 2, 3)) / weight.sum(dim=(1, 2, 3))).numpy()


def evaluate_combo(clip: VideoClip, combo: int, model: FrameMAE, k: int = 2) -> float:
    """Single-combination loss through the generic loss function (independent of batching)."""
    c = model.config
    mask = mask_from_combo(combo, c.t_tok, k)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(clip.pixels, dtype=dtype)[None]
    with torch.no_grad():
        pred = model(x, masks_tensor([mask]))
    return float(reconstruction_loss(pred[0], patchify(x[0], c), mask))


def rank_combos(clip: VideoClip, model: FrameMAE, k: int = 2, batch_size: int | None = None, mhash: str | None = None) -> LabelRecord:
    """Score all C(t_tok, k) keep-combinations; ties go to the lowest index."""
    model64 = as_float64(model)
    total = num_combos(model64.config.t_tok, k)
    batch_size = batch_size or total
    losses = np.concatenate(
        [combo_losses(clip, model64, range(i, min(i + batch_size, total)), k) for i in range(0, total, batch_size)]
    )
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise FloatingPointError(f"{clip.clip_id}: non-finite reconstruction loss for combo {int(bad[0])}")
    ranking = np.argsort(losses, kind="stable")
    return LabelRecord(
        clip_id=clip.clip_id,
        losses=[float(v) for v in losses],
        ranking=[int(i) for i in ranking],
        gt_label=int(ranking[0]),
        model_hash=mhash if mhash is not None else model_hash(model),
    )


def read_labels(directory) -> tuple[list[LabelRecord], dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(f"label manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    labels_path = directory / LABELS_FILE
    records = []
    if labels_path.exists():
        with open(labels_path) as fh:
            records = [LabelRecord.from_json(line) for line in fh if line.strip()]
    return records, manifest


def _write(directory: Path, records: Iterable[LabelRecord], manifest: dict) -> None:
    ordered = sorted(records, key=lambda r: r.clip_id)
    tmp = directory / (LABELS_FILE + ".tmp")
    with open(tmp, "w") as fh:
        for rec in ordered:
            fh.write(rec.to_json() + "\n")
    tmp.replace(directory / LABELS_FILE)
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def build_label_dataset(
    clips: Sequence[VideoClip],
    model: FrameMAE,
    output_path,
    k: int = 2,
    flush_every: int = 50,
) -> dict:
    """Label every clip not yet present under ``output_path``.

    Resuming against labels from a different checkpoint is refused.
    The returned manifest carries ``evaluated``, the number of clips scored
    in this call.
    """
    directory = Path(output_path)
    directory.mkdir(parents=True, exist_ok=True)
    mhash = model_hash(model)
    existing: dict[str, LabelRecord] = {}
    if (directory / MANIFEST_FILE).exists():
        old, old_manifest = read_labels(directory)
        if old_manifest.get("model_hash") != mhash:
            raise ValueError(
                f"labels in {directory} came from checkpoint {old_manifest.get('model_hash')}, "
                f"current checkpoint is {mhash}; refusing to mix"
            )
        existing = {r.clip_id: r for r in old}

    model64 = as_float64(model)
    manifest = {
        "model_hash": mhash,
        "config": asdict(model.config),
        "k": k,
        "t_tok": model.config.t_tok,
        "classes": num_combos(model.config.t_tok, k),
    }
    evaluated = 0
    for clip in clips:
        if clip.clip_id in existing:
            continue
        existing[clip.clip_id] = rank_combos(clip, model64, k, mhash=mhash)
        evaluated += 1
        if flush_every and evaluated % flush_every == 0:
            _write(directory, existing.values(), {**manifest, "count": len(existing)})
            log.info("labelled %d clips", evaluated)
    manifest["count"] = len(existing)
    _write(directory, existing.values(), manifest)
    return {**manifest, "evaluated": evaluated}
