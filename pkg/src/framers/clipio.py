"""Clip ingestion, sampling, normalization and the planted-clip generator.

A clip is a float32 array ``[t_raw, height, width, channels]`` in [0, 1].
On disk a clip is a directory holding either numbered PNG frames or a single
``frames.raw`` blob of uint8 pixels, plus a ``manifest.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

BACKGROUND = 0.5
RAW_BLOB = "frames.raw"
MANIFEST = "manifest.json"


class InsufficientFramesError(ValueError):
    pass


@dataclass(frozen=True)
class ClipSpec:
    t_raw: int = 16
    stride: int = 2
    height: int = 224
    width: int = 224
    channels: int = 3

    def __post_init__(self):
        if self.t_raw <= 0:
            raise ValueError(f"t_raw must be positive, got {self.t_raw}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.height <= 0 or self.width <= 0 or self.channels <= 0:
            raise ValueError("height, width and channels must be positive")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.t_raw, self.height, self.width, self.channels)

    @property
    def span(self) -> int:
        """Number of source frames covered by one sampled clip."""
        return (self.t_raw - 1) * self.stride + 1

    def check_patches(self, temporal_patch: int, spatial_patch: int) -> None:
        if self.t_raw % temporal_patch:
            raise ValueError(f"t_raw={self.t_raw} not divisible by temporal_patch={temporal_patch}")
        if self.height % spatial_patch:
            raise ValueError(f"height={self.height} not divisible by spatial_patch={spatial_patch}")
        if self.width % spatial_patch:
            raise ValueError(f"width={self.width} not divisible by spatial_patch={spatial_patch}")


@dataclass
class VideoClip:
    pixels: np.ndarray
    clip_id: str = "clip"
    source_offset: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 4:
            raise ValueError(f"clip pixels must be [t, h, w, c], got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError(f"clip {self.clip_id!r} has non-finite pixels")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"clip {self.clip_id!r} pixels outside [0, 1]")
        self.pixels = px.astype(np.float32, copy=False)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class PlantedClip:
    clip: VideoClip
    planted_slots: tuple[int, ...] = field(default_factory=tuple)


def normalize(raw, clip_id: str = "clip", source_offset: int = 0) -> VideoClip:
    """Map 8-bit frames to a [0, 1] clip. Out-of-range values are rejected."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError(f"raw pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    if np.issubdtype(raw.dtype, np.floating) and not np.array_equal(raw, np.round(raw)):
        raise ValueError("raw pixel values must be integers")
    px = raw.astype(np.float32) / np.float32(255.0)
    return VideoClip(px, clip_id=clip_id, source_offset=source_offset)


def denormalize(clip) -> np.ndarray:
    """Inverse of :func:`normalize`; non-8-bit values are rounded to nearest."""
    px = clip.pixels if isinstance(clip, VideoClip) else np.asarray(clip)
    if px.size and (px.min() < 0.0 or px.max() > 1.0):
        raise ValueError("normalized pixels must lie in [0, 1]")
    return np.rint(px.astype(np.float64) * 255.0).astype(np.uint8)


def _resize(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    if frames.shape[1:3] == (height, width):
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))
    x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return x.clamp_(0.0, 1.0).numpy().transpose(0, 2, 3, 1)


def sample_clip(source_frames, spec: ClipSpec, rng_seed: int, clip_id: str = "clip") -> VideoClip:
    """Take ``spec.t_raw`` frames at ``spec.stride`` from a seeded random start.

    ``source_frames`` is ``[n, h, w, c]``; uint8 input is normalized first,
    float input must already be in [0, 1].
    """
    src = np.asarray(source_frames)
    required = spec.span
    if src.shape[0] < required:
        raise InsufficientFramesError(
            f"insufficient frames: need {required} source frames "
            f"(t_raw={spec.t_raw}, stride={spec.stride}), got {src.shape[0]}"
        )
    rng = np.random.default_rng(rng_seed)
    offset = int(rng.integers(0, src.shape[0] - required + 1))
    picked = src[offset : offset + required : spec.stride]
    if np.issubdtype(picked.dtype, np.integer):
        picked = normalize(picked).pixels
    if picked.shape[-1] != spec.channels:
        raise ValueError(f"source has {picked.shape[-1]} channels, spec wants {spec.channels}")
    picked = _resize(picked.astype(np.float32), spec.height, spec.width)
    return VideoClip(picked, clip_id=clip_id, source_offset=offset)


def make_planted_clip(
    spec: ClipSpec,
    planted_slots: Sequence[int],
    rng_seed: int,
    temporal_patch: int = 2,
    clip_id: str | None = None,
) -> PlantedClip:
    """Constant-gray clip whose only content is a moving square in the planted slots.

    The square spans three quarters of the frame side, has a saturated random colour and
    travels along a seeded straight line over the whole clip; it is drawn
    only in frames belonging to the planted slots.
    """
    if spec.t_raw % temporal_patch:
        raise ValueError(f"t_raw={spec.t_raw} not divisible by temporal_patch={temporal_patch}")
    t_tok = spec.t_raw // temporal_patch
    slots = tuple(sorted(int(s) for s in planted_slots))
    if not slots:
        raise ValueError("planted_slots must be nonempty")
    if len(set(slots)) != len(slots):
        raise ValueError(f"duplicate planted slot in {planted_slots}")
    for s in slots:
        if not 0 <= s < t_tok:
            raise ValueError(f"planted slot {s} outside [0, {t_tok})")

    rng = np.random.default_rng(rng_seed)
    H, W, C = spec.height, spec.width, spec.channels
    side_h, side_w = max(3 * H // 4, 1), max(3 * W // 4, 1)
    # colours are exact 8-bit levels so they survive the codec's 8-bit storage
    colour = rng.choice([26, 230], size=C) / 255.0
    start = rng.uniform(0, 1, size=2)
    end = rng.uniform(0, 1, size=2)

    px = np.full(spec.shape, BACKGROUND, dtype=np.float32)
    for s in slots:
        for t in range(s * temporal_patch, (s + 1) * temporal_patch):
            a = t / max(spec.t_raw - 1, 1)
            y, x = (1 - a) * start + a * end
            top = int(round(y * (H - side_h)))
            left = int(round(x * (W - side_w)))
            px[t, top : top + side_h, left : left + side_w] = colour
    cid = clip_id if clip_id is not None else f"planted_{rng_seed}"
    return PlantedClip(VideoClip(px, clip_id=cid), slots)


def random_planted_clips(
    spec: ClipSpec, n: int, seed: int, k: int = 2, temporal_patch: int = 2, prefix: str = "planted"
) -> list[PlantedClip]:
    """``n`` planted clips, each with a uniformly random k-subset of slots."""
    t_tok = spec.t_raw // temporal_patch
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        slots = np.sort(rng.choice(t_tok, size=k, replace=False))
        clip_seed = int(rng.integers(0, 2**31 - 1))
        out.append(make_planted_clip(spec, slots, clip_seed, temporal_patch, clip_id=f"{prefix}_{i:05d}"))
    return out


# ---------------------------------------------------------------- disk layout


def write_frames(frames: np.ndarray, directory, fmt: str = "png", fps: float = 12.0) -> Path:
    """Write uint8 frames ``[n, h, w, c]`` as numbered PNGs or one raw blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        raise TypeError("frames must be uint8")
    n, h, w, c = frames.shape
    if fmt == "png":
        for i, frame in enumerate(frames):
            Image.fromarray(frame.squeeze(-1) if c == 1 else frame).save(directory / f"{i:06d}.png")
    elif fmt == "raw":
        frames.tofile(directory / RAW_BLOB)
    else:
        raise ValueError(f"unknown frame format {fmt!r}")
    manifest = {"format": fmt, "fps": fps, "frames": n, "height": h, "width": w, "channels": c}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def read_frames(directory) -> np.ndarray:
    """Read a frame directory written by :func:`write_frames` (or any numbered images)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"format": "png"}
    if manifest.get("format") == "raw":
        shape = (manifest["frames"], manifest["height"], manifest["width"], manifest["channels"])
        data = np.fromfile(directory / RAW_BLOB, dtype=np.uint8)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{directory / RAW_BLOB}: expected {np.prod(shape)} bytes, found {data.size}")
        return data.reshape(shape)
    names = sorted(
        (p for p in directory.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"}),
        key=lambda p: int("".join(ch for ch in p.stem if ch.isdigit()) or 0),
    )
    if not names:
        raise FileNotFoundError(f"no image frames found in {directory}")
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in names]
    return np.stack(frames)


def write_planted_dataset(clips: Sequence[PlantedClip], root, fmt: str = "raw") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    labels = {}
    for pc in clips:
        write_frames(denormalize(pc.clip), root / pc.clip.clip_id, fmt=fmt)
        labels[pc.clip.clip_id] = list(pc.planted_slots)
    (root / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True))
    return root


def read_dataset(root) -> tuple[list[VideoClip], dict[str, list[int]]]:
    """Load every clip directory under ``root`` plus ``labels.json`` when present."""
    root = Path(root)
    labels_path = root / "labels.json"
    labels = json.loads(labels_path.read_text()) if labels_path.exists() else {}
    clips = []
    for entry in sorted(os.scandir(root), key=lambda e: e.name):
        if entry.is_dir():
            clips.append(normalize(read_frames(entry.path), clip_id=entry.name))
    return clips, labels
