import json
import math

import numpy as np
import pytest
import torch

from framers.clipio import ClipSpec, VideoClip, make_planted_clip
from framers.codec import (
    CompressedClip,
    ContainerError,
    Metrics,
    ModelMismatchError,
    compare_policies,
    compress,
    decompress,
    evaluate,
    psnr_from_mse,
    quantize,
    select_policy,
    uniform_slots,
)
from framers.framemae import FrameMAE, model_hash


@pytest.fixture
def model(micro):
    torch.manual_seed(0)
    return FrameMAE(micro)


@pytest.fixture
def clip(micro):
    return make_planted_clip(micro.clip_spec, (1, 6), 3, clip_id="c0").clip


def test_container_round_trip(model, clip, micro):
    cc = compress(clip, select_policy("uniform"), model_hash(model), "uniform", spec=micro.clip_spec)
    back = CompressedClip.from_bytes(cc.to_bytes())
    assert back.metadata() == cc.metadata()
    assert np.array_equal(back.frames, cc.frames)
    assert back.to_bytes() == cc.to_bytes()


def test_container_size_and_retained_fraction(model, clip, micro):
    cc = compress(clip, select_policy("uniform"), model_hash(model), "uniform", spec=micro.clip_spec)
    assert cc.retained_fraction == 0.25
    frame_bytes = 4 * micro.height * micro.width * micro.channels
    assert frame_bytes < len(cc.to_bytes()) < frame_bytes + 400


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"XXXX" + b[4:], 0),
        (lambda b: b[:4] + (7).to_bytes(2, "little") + b[6:], 4),
        (lambda b: b[:6], 6),
        (lambda b: b[:-1], None),
        (lambda b: b[:10] + b"\xff" + b[11:], 10),
    ],
)
def test_malformed_containers_report_offsets(model, clip, mutate, offset):
    blob = compress(clip, select_policy("uniform"), model_hash(model)).to_bytes()
    with pytest.raises(ContainerError) as info:
        CompressedClip.from_bytes(mutate(blob))
    if offset is not None:
        assert info.value.offset == offset
    assert "offset" in str(info.value)


def test_keeping_every_slot_is_lossless(model, clip):
    cc = compress(clip, lambda c: tuple(range(8)), model_hash(model))
    assert cc.retained_fraction == 1.0
    out = decompress(cc, model)
    assert np.array_equal(out.pixels, quantize(clip).pixels)


def test_kept_frames_survive_exactly(model, clip):
    cc = compress(clip, select_policy("uniform"), model_hash(model))
    out = decompress(cc, model)
    q = quantize(clip).pixels
    for s in cc.kept_slots:
        assert np.array_equal(out.pixels[2 * s : 2 * s + 2], q[2 * s : 2 * s + 2])
    assert np.all((out.pixels >= 0) & (out.pixels <= 1))


def test_decompress_refuses_other_checkpoint(model, clip, micro):
    cc = compress(clip, select_policy("uniform"), model_hash(model))
    other = FrameMAE(micro)
    with pytest.raises(ModelMismatchError, match="refusing"):
        decompress(cc, other)


def test_uniform_and_random_policies(clip):
    assert uniform_slots(8, 2) == (0, 4)
    assert select_policy("uniform")(clip) == (0, 4)
    rnd = select_policy("random", seed=3)
    picks = rnd(clip)
    assert picks == select_policy("random", seed=3)(clip) and len(set(picks)) == 2
    ids = [VideoClip(clip.pixels, clip_id=f"c{i}") for i in range(40)]
    assert len({rnd(c) for c in ids}) > 5


def test_policy_argument_errors(model):
    with pytest.raises(ValueError, match="unknown policy"):
        select_policy("best")
    with pytest.raises(ValueError, match="checkpoint"):
        select_policy("oracle")
    with pytest.raises(ValueError):
        select_policy("learned", framemae=model)


def test_compress_rejects_bad_policy_output(model, clip):
    for bad in [(), (1, 1), (9,), (-1, 2)]:
        with pytest.raises(ValueError, match="invalid slots"):
            compress(clip, lambda c, b=bad: b, model_hash(model))


def test_metric_examples():
    x = np.zeros((2, 4, 4, 3))
    m = evaluate(x, x)
    assert m.mse == 0 and math.isinf(m.psnr) and m.as_dict()["psnr"] == "inf"
    m = evaluate(x, x + 0.1)
    assert abs(m.mse - 0.01) < 1e-12 and abs(m.psnr - 20.0) < 1e-9
    assert psnr_from_mse(1.0) == 0.0
    json.dumps(Metrics(0.0, math.inf).as_dict())
    with pytest.raises(ValueError):
        evaluate(x, x[:1])


def test_report_is_sorted_and_complete(model, micro):
    corpus = [make_planted_clip(micro.clip_spec, (0, 5), i, clip_id=f"c{i}").clip for i in range(3)]
    policies = {name: select_policy(name, framemae=model) for name in ("uniform", "random", "oracle")}
    rep = compare_policies(corpus, policies, model)
    assert len(rep.rows) == 9 and len(rep.summary) == 3
    means = [r["mean_mse"] for r in rep.summary]
    assert means == sorted(means)
    assert all(r["retained_fraction"] == 0.25 for r in rep.summary)
    parsed = json.loads(rep.to_json())
    assert set(parsed) == {"summary", "clips"}
    by = {(r["policy"], r["clip_id"]): r["mse"] for r in rep.rows}
    for c in corpus:
        assert by[("oracle", c.clip_id)] <= min(by[("uniform", c.clip_id)], by[("random", c.clip_id)]) + 1e-9
