import json

import numpy as np
import pytest
import torch

from conftest import small_config
from fmrnet import training
from fmrnet.config import LossWeights
from fmrnet.networks import FMRNet
from fmrnet.smoke import striped_corpus
from fmrnet.training import (PatchSampler, TrainingDiverged, TrainLog, build_memory,
                             make_sampler, train, train_phase1, train_phase2)


def _changed(before, after):
    return {g for g in before if before[g] != after[g]}


def _setup(seed=0, **net):
    cfg = small_config(**net)
    torch.manual_seed(seed)
    return FMRNet(cfg.network), cfg, striped_corpus(6, 64, seed=seed)


@pytest.mark.parametrize("trainable", [False, True])
def test_update_sets_match_two_phase_schedule(trainable):
    model, cfg, images = _setup(gfrm_trainable=trainable)
    gfrm = {"gfrm"} if trainable else set()

    d0 = model.group_digests()
    train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=3)
    d1 = model.group_digests()
    assert _changed(d0, d1) == {"encoder", "decoder", "classifier", "discriminator"} | gfrm

    build_memory(model, images, cfg.train)
    d2 = model.group_digests()
    assert _changed(d1, d2) == {"memory"}

    train_phase2(model, make_sampler(images, cfg, 2), cfg.train, cfg.weights, iterations=3)
    d3 = model.group_digests()
    assert _changed(d2, d3) == {"decoder", "addressing", "discriminator"} | gfrm
    assert d3["encoder"] == d2["encoder"] and d3["memory"] == d2["memory"]
    # frozen flags are restored afterwards
    assert all(p.requires_grad for p in model.encoder.parameters())


def test_phase1_gradients_reach_exactly_the_phase1_groups(monkeypatch):
    model, cfg, images = _setup()
    seen = {}
    real_step = torch.optim.Adam.step

    def spy(opt, *a, **k):
        for group in opt.param_groups:
            for p in group["params"]:
                if p.grad is not None and p.grad.abs().sum() > 0:
                    seen[id(p)] = True
        return real_step(opt, *a, **k)

    monkeypatch.setattr(torch.optim.Adam, "step", spy)
    train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=1)
    touched = {g for g in FMRNet.GROUPS if any(id(p) in seen for p in model.group_parameters(g))}
    assert touched == {"encoder", "decoder", "classifier", "discriminator"}


def test_phase2_requires_memory():
    model, cfg, images = _setup()
    with pytest.raises(RuntimeError, match="memory"):
        train_phase2(model, make_sampler(images, cfg), cfg.train, cfg.weights, iterations=1)


def test_first_iteration_loss_is_reproducible():
    losses = []
    for _ in range(2):
        model, cfg, images = _setup(seed=3)
        rows = []
        train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=1,
                     callback=lambda it, row: rows.append(row))
        losses.append(rows[0]["loss"])
    assert losses[0] == losses[1]


def test_phase1_loss_decreases():
    model, cfg, images = _setup(seed=1)
    cfg.train.lr = 2e-3
    rows = []
    train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=200,
                 callback=lambda it, row: rows.append(row))
    loss = np.array([r["loss"] for r in rows])
    assert loss[-20:].mean() < loss[:20].mean()


def test_phase2_restoration_error_decreases():
    model, cfg, images = _setup(seed=2)
    train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=50)
    build_memory(model, images, cfg.train)
    rows = []
    train_phase2(model, make_sampler(images, cfg, 2), cfg.train, cfg.weights, iterations=150,
                 callback=lambda it, row: rows.append(row))
    rec = np.array([r["rec"] for r in rows])
    assert rec[-20:].mean() < rec[:20].mean()


@pytest.mark.slow
def test_plain_reconstruction_on_constant_images():
    # adversarial and latent terms off: the procedure is plain autoencoder training.
    # tiny-preset widths with the default batch and learning rate
    cfg = small_config(base_channels=16, max_channels=64)
    cfg.weights = LossWeights(rec1=100, adv1=0, lat1=0)
    cfg.train.batch_size = 16
    images = [np.full((32, 32, 1), v, np.float32) for v in (0.3, 0.5, 0.7)]
    torch.manual_seed(0)
    model = FMRNet(cfg.network)
    train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=2000)
    model.memory = None
    x = training.to_tensor(np.stack(images))
    with torch.no_grad():
        mse = float(((model.reconstruct(x) - x) ** 2).mean())
    assert mse < 1e-3


def test_divergence_aborts_with_dump(tmp_path, monkeypatch):
    model, cfg, images = _setup()
    monkeypatch.setattr(training, "loss_rec", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(TrainingDiverged) as err:
        train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights, iterations=2,
                     out_dir=tmp_path)
    assert err.value.iteration == 1
    dump = json.loads((tmp_path / "diverged_phase1_1.json").read_text())
    assert "rec" in dump


def test_train_writes_loss_csv_and_checkpoints(tmp_path):
    model, cfg, images = _setup()
    cfg.train.t1, cfg.train.t2, cfg.train.checkpoint_every = 4, 2, 2
    train(model, images, cfg, phase="all", out_dir=tmp_path)
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("phase,iteration") and len(lines) == 1 + 4 + 2
    assert (tmp_path / "phase1_0000004.pt").exists() and (tmp_path / "phase2_0000002.pt").exists()
    assert model.memory is not None
    assert model.memory.encoder_fingerprint == model.encoder_fingerprint()


def test_sampler_triplets_and_pairs():
    imgs = striped_corpus(2, 48, seed=0)
    s = PatchSampler(imgs, 32, small_config().synth, seed=0)
    p0, pp, pn = s.triplets(3)
    assert p0.shape == pp.shape == pn.shape == (3, 1, 32, 32)
    clean, synth = s.pairs(2)
    assert clean.shape == synth.shape and not torch.equal(clean, synth)
    with pytest.raises(ValueError):
        PatchSampler([np.zeros((16, 16, 1))], 32, small_config().synth)
    with pytest.raises(ValueError):
        PatchSampler([], 32, small_config().synth)


def test_trainlog_without_path_is_noop():
    log = TrainLog()
    log.add({"phase": 1, "iteration": 1, "loss": 1.0})
    log.flush()
