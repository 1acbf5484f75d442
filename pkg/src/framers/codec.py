"""Key-frame codec: keep k slots losslessly, rebuild the rest with FrameMAE.

Container layout (little-endian)::

    b"FRRS" | u16 version | u32 metadata length | metadata JSON (utf-8) | kept frames

Kept frames are raw 8-bit pixels ``[k * temporal_patch, H, W, C]`` in slot order.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .clipio import ClipSpec, VideoClip, denormalize, normalize
from .framemae import FrameMAE, model_hash, reconstruct_clip
from .framemask import combo_to_slots, num_combos
from .labelgen import rank_combos
from .selector import SelectorHead, batch_features, predict_slots

MAGIC = b"FRRS"
VERSION = 1
_HEADER = struct.Struct("<4sHI")

Policy = Callable[[VideoClip], tuple[int, ...]]


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ModelMismatchError(ValueError):
    pass


@dataclass
class CompressedClip:
    clip_id: str
    spec: ClipSpec
    temporal_patch: int
    kept_slots: tuple[int, ...]
    frames: np.ndarray  # uint8 [len(kept_slots) * temporal_patch, H, W, C]
    model_hash: str
    policy: str
    format_version: int = VERSION

    def __post_init__(self):
        want = (len(self.kept_slots) * self.temporal_patch, self.spec.height, self.spec.width, self.spec.channels)
        if self.frames.shape != want or self.frames.dtype != np.uint8:
            raise ValueError(f"kept frames must be uint8 {want}, got {self.frames.dtype} {self.frames.shape}")

    @property
    def t_tok(self) -> int:
        return self.spec.t_raw // self.temporal_patch

    @property
    def retained_fraction(self) -> float:
        return len(self.kept_slots) * self.temporal_patch / self.spec.t_raw

    def metadata(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "spec": {
                "t_raw": self.spec.t_raw,
                "stride": self.spec.stride,
                "height": self.spec.height,
                "width": self.spec.width,
                "channels": self.spec.channels,
            },
            "temporal_patch": self.temporal_patch,
            "kept_slots": list(self.kept_slots),
            "model_hash": self.model_hash,
            "policy": self.policy,
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":")).encode()
        return _HEADER.pack(MAGIC, self.format_version, len(meta)) + meta + self.frames.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedClip":
        if len(blob) < _HEADER.size:
            raise ContainerError(f"truncated header: {len(blob)} bytes, need {_HEADER.size}", len(blob))
        magic, version, meta_len = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}", 4)
        start = _HEADER.size
        if start + meta_len > len(blob):
            raise ContainerError(f"metadata block of {meta_len} bytes runs past end of data", len(blob))
        try:
            meta = json.loads(blob[start : start + meta_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            pos = getattr(exc, "pos", getattr(exc, "start", 0))
            raise ContainerError(f"corrupt metadata: {exc}", start + pos) from exc
        try:
            spec = ClipSpec(**meta["spec"])
            slots = tuple(int(s) for s in meta["kept_slots"])
            pt = int(meta["temporal_patch"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"invalid metadata: {exc}", start) from exc
        body = start + meta_len
        shape = (len(slots) * pt, spec.height, spec.width, spec.channels)
        need = int(np.prod(shape))
        if len(blob) - body != need:
            raise ContainerError(f"frame payload is {len(blob) - body} bytes, expected {need}", body)
        frames = np.frombuffer(blob, dtype=np.uint8, offset=body).reshape(shape).copy()
        return cls(meta["clip_id"], spec, pt, slots, frames, meta["model_hash"], meta["policy"], version)


# -- selection policies ---------------------------------------------------------


def uniform_slots(t_tok: int, k: int) -> tuple[int, ...]:
    return tuple(i * t_tok // k for i in range(k))


def select_policy(
    name: str,
    t_tok: int = 8,
    k: int = 2,
    seed: int = 0,
    framemae: FrameMAE | None = None,
    selector: SelectorHead | None = None,
) -> Policy:
    """Build a slot-selection policy: uniform, random, oracle or learned."""
    if name == "uniform":
        slots = uniform_slots(t_tok, k)
        return lambda clip: slots
    if name == "random":

        def random_policy(clip: VideoClip) -> tuple[int, ...]:
            # keyed on clip id so results do not depend on corpus order
            rng = np.random.default_rng([seed, zlib.crc32(clip.clip_id.encode())])
            return tuple(sorted(int(s) for s in rng.choice(t_tok, size=k, replace=False)))

        return random_policy
    if name == "oracle":
        if framemae is None:
            raise ValueError("oracle policy needs a FrameMAE checkpoint")
        from .labelgen import as_float64

        model64 = as_float64(framemae)
        mhash = model_hash(framemae)
        return lambda clip: combo_to_slots(rank_combos(clip, model64, k, mhash=mhash).gt_label, t_tok, k)
    if name == "learned":
        if selector is None or framemae is None:
            raise ValueError("learned policy needs both a selector and a FrameMAE checkpoint")
        if selector.config.classes != num_combos(t_tok, k):
            raise ValueError("selector class count does not match (t_tok, k)")

        def learned(clip: VideoClip) -> tuple[int, ...]:
            feats = batch_features([clip], framemae)[0]
            return combo_to_slots(predict_slots(selector, feats), t_tok, k)

        return learned
    raise ValueError(f"unknown policy {name!r}; choose uniform, random, oracle or learned")


# -- compress / decompress --------------------------------------------------------


def quantize(clip: VideoClip) -> VideoClip:
    """Round a clip onto the 8-bit grid the container stores."""
    return normalize(denormalize(clip), clip_id=clip.clip_id, source_offset=clip.source_offset)


def compress(
    clip: VideoClip,
    policy: Policy,
    mhash: str,
    policy_name: str = "custom",
    spec: ClipSpec | None = None,
    temporal_patch: int = 2,
) -> CompressedClip:
    """Keep the policy's slots as raw 8-bit frames; the policy sees the quantized clip."""
    q = quantize(clip)
    t_raw, h, w, c = q.shape
    spec = spec or ClipSpec(t_raw=t_raw, height=h, width=w, channels=c)
    slots = tuple(sorted(int(s) for s in policy(q)))
    t_tok = t_raw // temporal_patch
    if len(set(slots)) != len(slots) or not slots or slots[0] < 0 or slots[-1] >= t_tok:
        raise ValueError(f"policy returned invalid slots {slots} for t_tok={t_tok}")
    raw = denormalize(q)
    frames = np.concatenate([raw[s * temporal_patch : (s + 1) * temporal_patch] for s in slots])
    return CompressedClip(q.clip_id, spec, temporal_patch, slots, frames, mhash, policy_name)


def decompress(cc: CompressedClip, model: FrameMAE) -> VideoClip:
    mh = model_hash(model)
    if mh != cc.model_hash:
        raise ModelMismatchError(f"container was encoded for checkpoint {cc.model_hash}, got {mh}; refusing to decode")
    pt = cc.temporal_patch
    if pt != model.config.temporal_patch:
        raise ModelMismatchError(f"container temporal_patch {pt} != model {model.config.temporal_patch}")
    kept = normalize(cc.frames).pixels
    px = np.full((cc.spec.t_raw, cc.spec.height, cc.spec.width, cc.spec.channels), 0.5, dtype=np.float32)
    for i, s in enumerate(cc.kept_slots):
        px[s * pt : (s + 1) * pt] = kept[i * pt : (i + 1) * pt]
    return reconstruct_clip(VideoClip(px, clip_id=cc.clip_id), cc.kept_slots, model)


# -- metrics and reports ------------------------------------------------------------


@dataclass
class Metrics:
    mse: float
    psnr: float  # math.inf when mse == 0
    retained_fraction: float = 1.0

    def as_dict(self) -> dict:
        return {
            "mse": self.mse,
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "retained_fraction": self.retained_fraction,
        }


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def evaluate(original, reconstructed, retained_fraction: float = 1.0) -> Metrics:
    a = original.pixels if isinstance(original, VideoClip) else np.asarray(original)
    b = reconstructed.pixels if isinstance(reconstructed, VideoClip) else np.asarray(reconstructed)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return Metrics(mse, psnr_from_mse(mse), retained_fraction)


@dataclass
class PolicyReport:
    rows: list[dict] = field(default_factory=list)  # one per (policy, clip)
    summary: list[dict] = field(default_factory=list)  # one per policy, ascending mean MSE

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary, "clips": self.rows}, indent=2)


def compare_policies(
    corpus: Sequence[VideoClip],
    policies: Mapping[str, Policy],
    model: FrameMAE,
    temporal_patch: int | None = None,
) -> PolicyReport:
    """Compress and decompress every clip under every policy and score against the original."""
    pt = temporal_patch or model.config.temporal_patch
    mh = model_hash(model)
    report = PolicyReport()
    for name, policy in policies.items():
        mses = []
        for clip in corpus:
            cc = compress(clip, policy, mh, name, temporal_patch=pt)
            m = evaluate(clip, decompress(cc, model), cc.retained_fraction)
            report.rows.append(
                {"policy": name, "clip_id": clip.clip_id, "kept_slots": list(cc.kept_slots), **m.as_dict()}
            )
            mses.append(m.mse)
        mean = float(np.mean(mses))
        psnr = psnr_from_mse(mean)
        report.summary.append(
            {
                "policy": name,
                "clips": len(corpus),
                "mean_mse": mean,
                "mean_psnr": "inf" if math.isinf(psnr) else psnr,
                "retained_fraction": report.rows[-1]["retained_fraction"] if corpus else None,
            }
        )
    report.summary.sort(key=lambda r: r["mean_mse"])
    return report
