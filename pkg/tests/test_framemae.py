import dataclasses
import math

import numpy as np
import pytest
import torch

from framers.clipio import ClipSpec, VideoClip, make_planted_clip
from framers.framemae import (
    FrameMAE,
    PretrainHyperparams,
    decode,
    encode,
    load_framemae,
    masks_tensor,
    model_hash,
    pretrain,
    reconstruct_clip,
    reconstruction_loss,
    save_framemae,
    warmup_cosine,
)
from framers.framemask import FrameMask, apply_mask, make_frame_mask, mask_from_combo
from framers.patchcube import ModelConfig, TokenGrid, patchify

from gradcheck import fd_relative_errors

TINY = ModelConfig(
    t_raw=4, height=16, width=16, spatial_patch=8, embed_dim=8, encoder_depth=1, encoder_heads=1,
    decoder_dim=8, decoder_depth=1, decoder_heads=1, mlp_ratio=2.0,
)


def paper_shapes_config(**kw):
    return dataclasses.replace(ModelConfig(), encoder_depth=1, decoder_depth=1, **kw)


def test_encode_paper_shape():
    cfg = paper_shapes_config()
    model = FrameMAE(cfg)
    mask = make_frame_mask(8, 3, 0)
    tokens = torch.randn(8, 196, 768)
    vis, _ = apply_mask(tokens, mask)
    with torch.no_grad():
        assert encode(vis, model).shape == (980, 768)


def test_encode_toy_shape(toy):
    model = FrameMAE(toy)
    vis, _ = apply_mask(torch.randn(8, 64, 96), mask_from_combo(3))
    with torch.no_grad():
        assert encode(vis, model).shape == (128, 96)


def test_zero_depth_encoder_is_identity(micro):
    model = FrameMAE(dataclasses.replace(micro, encoder_depth=0))
    x = torch.randn(40, 16)
    assert torch.equal(encode(x, model), x)


def test_encode_rejects_non_finite(micro):
    model = FrameMAE(micro)
    with pytest.raises(ValueError):
        encode(torch.full((4, 16), float("nan")), model)


def test_decode_paper_shape():
    model = FrameMAE(paper_shapes_config())
    mask = make_frame_mask(8, 3, 0)
    with torch.no_grad():
        pred = decode(torch.randn(980, 768), mask, model)
    assert pred.shape == (8, 196, 1536)


def test_decode_rejects_inconsistent_latent(micro):
    model = FrameMAE(micro)
    with pytest.raises(ValueError):
        decode(torch.randn(5, 16), make_frame_mask(8, 3, 0), model)


def test_all_visible_uses_no_mask_token(micro):
    model = FrameMAE(micro)
    with torch.no_grad():
        model.mask_token.fill_(float("nan"))
        pred = model(torch.rand(1, 16, 16, 16, 3), masks_tensor([FrameMask((False,) * 8)]))
    assert torch.isfinite(pred).all()


def test_masked_predictions_depend_only_on_position(micro):
    clip = torch.rand(1, 16, 16, 16, 3)
    mask = masks_tensor([mask_from_combo(0)])
    flat = FrameMAE(dataclasses.replace(micro, pos_embed="learnable"))  # zero-initialised tables
    with torch.no_grad():
        pred = flat(clip, mask)[0].reshape(-1, micro.patch_dim)[2 * micro.s_tok :]
    assert torch.allclose(pred, pred[:1].expand_as(pred), atol=1e-6)
    sincos = FrameMAE(micro)
    with torch.no_grad():
        pred = sincos(clip, mask)[0].reshape(-1, micro.patch_dim)[2 * micro.s_tok :]
    assert not torch.allclose(pred, pred[:1].expand_as(pred), atol=1e-6)


def test_encoder_sees_only_visible_rows(micro):
    model = FrameMAE(micro)
    seen = []
    model.blocks[0].register_forward_hook(lambda m, inp, out: seen.append(inp[0].shape))
    with torch.no_grad():
        model(torch.rand(2, 16, 16, 16, 3), masks_tensor([make_frame_mask(8, 3, s) for s in (0, 1)]))
    assert seen == [torch.Size([2, 5 * micro.s_tok, 16])]


def test_loss_examples():
    t = torch.rand(8, 4, 6)
    mask = make_frame_mask(8, 3, 0)
    assert reconstruction_loss(t, t, mask) == 0
    assert math.isclose(float(reconstruction_loss(t.double() + 0.1, t.double(), mask)), 0.01, rel_tol=1e-9)
    with pytest.raises(ValueError):
        reconstruction_loss(t, t, FrameMask((False,) * 8))
    with pytest.raises(ValueError):
        reconstruction_loss(t, t[:, :3], mask)


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    pred, target = rng.random((2, 8, 5, 7))
    mask = make_frame_mask(8, 3, 4)
    total, n = 0.0, 0
    for t in range(8):
        if not mask.masked[t]:
            continue
        for s in range(5):
            for p in range(7):
                total += (pred[t, s, p] - target[t, s, p]) ** 2
                n += 1
    assert abs(reconstruction_loss(pred, target, mask) - total / n) < 1e-14
    assert abs(float(reconstruction_loss(torch.from_numpy(pred), torch.from_numpy(target), mask)) - total / n) < 1e-14
    assert abs(reconstruction_loss(pred, target, mask, "all") - np.mean((pred - target) ** 2)) < 1e-14


def test_gradients_match_finite_differences():
    torch.manual_seed(3)
    model = FrameMAE(TINY).double()
    assert (TINY.t_tok, TINY.s_tok) == (2, 4)
    with torch.no_grad():
        model.mask_token.normal_()  # nonzero so its gradient path is exercised
    clip = torch.rand(2, 4, 16, 16, 3, dtype=torch.float64)
    masks = masks_tensor([FrameMask((True, False)), FrameMask((False, True))])
    target = patchify(clip, TINY)

    errors = fd_relative_errors(model, lambda: reconstruction_loss(model(clip, masks), target, masks))
    assert errors and max(errors.values()) < 1e-3, errors


def test_batch_permutation_does_not_change_loss(micro):
    model = FrameMAE(micro).double()
    clips = torch.rand(6, 16, 16, 16, 3, dtype=torch.float64)
    masks = masks_tensor([make_frame_mask(8, 3, s) for s in range(6)])
    perm = torch.randperm(6)
    with torch.no_grad():
        a = reconstruction_loss(model(clips, masks), patchify(clips, micro), masks)
        b = reconstruction_loss(model(clips[perm], masks[perm]), patchify(clips[perm], micro), masks[perm])
    assert abs(float(a - b)) < 1e-10


def _clips(cfg, n):
    spec = cfg.clip_spec
    return [make_planted_clip(spec, (i % 8, (i + 3) % 8), i).clip for i in range(n)]


def test_pretrain_zero_lr_keeps_parameters(micro):
    torch.manual_seed(0)
    ref = FrameMAE(micro)
    before = {k: v.clone() for k, v in ref.state_dict().items()}
    state = pretrain(_clips(micro, 4), micro, PretrainHyperparams(steps=5, lr=0.0, batch_size=2), seed=0, model=ref)
    assert state.step == 5 and len(state.loss_trace) == 5
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_pretrain_deterministic(micro):
    hp = PretrainHyperparams(steps=15, lr=1e-3, batch_size=3)
    a = pretrain(_clips(micro, 5), micro, hp, seed=11)
    b = pretrain(_clips(micro, 5), micro, hp, seed=11)
    assert np.max(np.abs(np.array(a.loss_trace) - np.array(b.loss_trace))) <= 1e-6
    assert model_hash(a.model) == model_hash(b.model)


def test_warmup_cosine_schedule():
    f = warmup_cosine(100, 0.05)
    assert [f(i) for i in range(5)] == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert f(5) == 1.0 and abs(f(100)) < 1e-12
    g = warmup_cosine(100, 0.05, floor=0.3)
    assert g(5) == 1.0 and abs(g(100) - 0.3) < 1e-12
    assert all(0.3 <= g(i) <= 1.0 for i in range(5, 101))


def test_pretrain_stop_after_replays_prefix(micro):
    hp = PretrainHyperparams(steps=12, lr=1e-3, batch_size=2)
    full = pretrain(_clips(micro, 4), micro, hp, seed=5)
    part = pretrain(_clips(micro, 4), micro, hp, seed=5, stop_after=5)
    assert part.step == 5
    assert part.loss_trace == full.loss_trace[:5]


def test_pretrain_mixed_mask_counts(micro):
    hp = PretrainHyperparams(steps=4, lr=1e-3, batch_size=2, masked_count=[3, 6])
    assert len(pretrain(_clips(micro, 3), micro, hp, seed=0).loss_trace) == 4


def test_pretrain_aborts_on_nan(micro):
    model = FrameMAE(micro)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="step 0.*lr=.*grad norm"):
        pretrain(_clips(micro, 2), micro, PretrainHyperparams(steps=3, batch_size=2), seed=0, model=model)


def test_pretrain_rejects_empty(micro):
    with pytest.raises(ValueError):
        pretrain([], micro, PretrainHyperparams(steps=1), seed=0)


def test_pretrain_writes_periodic_checkpoints(micro, tmp_path):
    hp = PretrainHyperparams(steps=4, batch_size=2, checkpoint_every=2)
    pretrain(_clips(micro, 2), micro, hp, seed=0, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000002", "step_000004"]


def test_reconstruct_clip_contracts(micro):
    model = FrameMAE(micro)
    clip = _clips(micro, 1)[0]
    assert np.array_equal(reconstruct_clip(clip, range(8), model).pixels, clip.pixels)
    out = reconstruct_clip(clip, (2, 5), model)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1
    for s in (2, 5):
        assert np.array_equal(out.pixels[2 * s : 2 * s + 2], clip.pixels[2 * s : 2 * s + 2])
    with pytest.raises(ValueError):
        reconstruct_clip(clip, (), model)
    assert reconstruct_clip(clip, (), model, allow_empty=True).shape == clip.shape


def test_checkpoint_reload_is_exact(micro, tmp_path):
    model = FrameMAE(micro)
    h = save_framemae(tmp_path / "ck", model, step=3)
    again, manifest = load_framemae(tmp_path / "ck")
    assert manifest["model_hash"] == h == model_hash(again)
    assert manifest["step"] == 3
    x = torch.rand(2, 16, 16, 16, 3)
    m = masks_tensor([make_frame_mask(8, 3, 0)] * 2)
    with torch.no_grad():
        assert torch.equal(model(x, m), again(x, m))
    first = (tmp_path / "ck" / "params.npz").read_bytes()
    save_framemae(tmp_path / "ck", model, step=3)
    assert (tmp_path / "ck" / "params.npz").read_bytes() == first


def test_checkpoint_detects_corruption(micro, tmp_path):
    model = FrameMAE(micro)
    save_framemae(tmp_path / "ck", model)
    import json

    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["model_hash"] = "0" * 16
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="corrupt"):
        load_framemae(tmp_path / "ck")
