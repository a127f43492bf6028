import numpy as np
import pytest
import torch

from fmrnet.networks import FMRNet
from fmrnet.pipeline import (ExitPolicy, PipelineError, calibrate_threshold, decide_exit,
                             edge_head, infer_patch_level, infer_pixel, inspect, split_export,
                             split_resume)
from fmrnet.smoke import inject_destructive, striped_corpus


def _random_images(n, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [(64, 64), (80, 72), (32, 48)]
    return [rng.random((*sizes[i % 3], 1)).astype(np.float32) for i in range(n)]


def test_pixel_output_shapes(trained):
    model, cfg, images = trained
    for img in _random_images(3):
        res = infer_pixel(model, img, cfg)
        assert res.level == "pixel" and res.patch_scores is None
        for m in (res.fused, res.maps.gms, res.maps.ssim, res.maps.residual):
            assert m.shape == img.shape[:2] and np.all(np.isfinite(m))
        assert np.all(res.fused >= 0)
        assert res.reconstruction.shape == img.shape


def test_patch_level_aligned_with_grid(trained):
    model, cfg, _ = trained
    img = _random_images(2)[1]
    res = infer_patch_level(model, img, cfg)
    assert res.level == "patch" and res.maps is None
    assert len(res.patch_scores) == len(res.origins) == 9  # 80x72, patch 32: 3 x 3 windows
    assert np.all(res.patch_scores >= 0)


def test_split_equals_monolithic_on_ten_images(trained):
    model, cfg, _ = trained
    for img in _random_images(10, seed=1):
        mono = infer_pixel(model, img, cfg)
        split = split_resume(model, split_export(model, img, cfg), cfg)
        assert np.max(np.abs(split.fused - mono.fused)) <= 1e-6
        assert np.max(np.abs(split.reconstruction - mono.reconstruction)) <= 1e-6


def test_exported_scores_equal_patch_level(trained):
    model, cfg, _ = trained
    img = _random_images(1, seed=4)[0]
    from fmrnet.interchange import decode
    tensors, _ = decode(split_export(model, img, cfg))
    np.testing.assert_array_equal(tensors["scores"], infer_patch_level(model, img, cfg).patch_scores)
    assert split_resume(model, split_export(model, img, cfg), cfg).patch_scores is not None


def test_split_refuses_stale_fingerprint(trained):
    model, cfg, _ = trained
    data = split_export(model, _random_images(1)[0], cfg)
    other = FMRNet(cfg.network)
    other.memory = model.memory
    with pytest.raises(PipelineError, match="fingerprint"):
        split_resume(other, data, cfg)
    with pytest.raises(ValueError):
        split_export(model, _random_images(1)[0], cfg, boundary="after_decoder")


def test_patch_path_never_runs_decoder_or_gfrm(trained):
    model, cfg, _ = trained
    calls = []
    hooks = [m.register_forward_pre_hook(lambda mod, inp, name=name: calls.append(name))
             for name, m in [("decoder", model.decoder), ("addressing", model.addressing),
                             *[(f"gfrm{k}", g) for k, g in model.gfrm.items()]]]
    try:
        infer_patch_level(model, _random_images(1)[0], cfg)
        assert calls == []
        infer_pixel(model, _random_images(1)[0], cfg)
        assert "decoder" in calls and any(c.startswith("gfrm") for c in calls)
    finally:
        for h in hooks:
            h.remove()


def test_requires_memory(trained):
    _, cfg, _ = trained
    bare = FMRNet(cfg.network)
    img = _random_images(1)[0]
    for fn in (infer_pixel, infer_patch_level, edge_head):
        with pytest.raises(PipelineError, match="phase-2 checkpoint required"):
            fn(bare, img, cfg)


def test_decide_exit_cases():
    pol = ExitPolicy("threshold", 1.0)
    assert decide_exit(pol, [0.0, 0.0]) == "exit_early"
    assert decide_exit(pol, [0.2, 1.5]) == "continue"
    assert decide_exit(ExitPolicy("always_pixel"), [0.0]) == "continue"
    assert decide_exit(ExitPolicy("always_patch"), [99.0]) == "exit_early"
    with pytest.raises(ValueError):
        decide_exit(ExitPolicy("threshold"), [0.0])
    with pytest.raises(ValueError):
        ExitPolicy("sometimes")


def test_calibration_and_auto_dispatch(trained):
    model, cfg, images = trained
    thr = calibrate_threshold(model, images, cfg, margin=0.1)
    best = max(infer_patch_level(model, im, cfg).patch_scores.max() for im in images)
    assert thr == pytest.approx(1.1 * best)
    assert inspect(model, images[0], cfg, "auto", thr).level == "patch"
    res = inspect(model, images[0], cfg, "auto", 0.0)
    assert res.level == "pixel" and res.patch_scores is not None
    assert inspect(model, images[0], cfg, "pixel").level == "pixel"
    assert inspect(model, images[0], cfg, "patch").level == "patch"


def test_inference_is_deterministic(trained):
    model, cfg, _ = trained
    img = _random_images(1, seed=9)[0]
    a, b = infer_pixel(model, img, cfg), infer_pixel(model, img, cfg)
    assert np.array_equal(a.fused, b.fused)


@pytest.mark.slow
def test_smoke_model_behaviour(smoke_run):
    model, report, cfg, _ = smoke_run
    train = striped_corpus(5, 64, seed=cfg.seed)
    clean_scores = np.concatenate([infer_patch_level(model, im, cfg).patch_scores
                                   for im in striped_corpus(20, 64, seed=4242)])
    # defect-free training images stay below the calibrated threshold
    for im in train:
        assert infer_patch_level(model, im, cfg).patch_scores.max() <= report.threshold
    # a pure-noise patch scores above every defect-free test patch
    noise = np.random.default_rng(0).random((32, 32, 1)).astype(np.float32)
    assert infer_patch_level(model, noise, cfg).patch_scores[0] > clean_scores.max()
    # destructive defect in a training texture: response inside the mask above background median
    img, mask = inject_destructive(train[0], seed=5)
    fused = infer_pixel(model, img, cfg).fused
    assert fused[mask].mean() > np.median(fused[~mask])
