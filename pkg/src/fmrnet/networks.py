"""Encoder, decoder, discriminator, auxiliary classifier and addressing network."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any

import torch
import torch.nn as nn

from .cmfm import MemoryBank, patch_anomaly_score, substitute
from .config import NetworkConfig
from .gfrm import GFRM

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1, bias=False),
                         nn.BatchNorm2d(cout), nn.LeakyReLU(0.2))


def _up(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU())


def _check_side(x: torch.Tensor, blocks: int) -> None:
    h, w = x.shape[-2:]
    if h != w or h % 2 ** blocks:
        raise ValueError(f"input side {h}x{w} must be square and divisible by 2**{blocks}")


class Encoder(nn.Module):
    """Stack of 4x4 / stride-2 downsampling blocks."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels()
        self.blocks = nn.ModuleList(
            _down(cin, cout) for cin, cout in zip([cfg.in_channels] + ch[:-1], ch))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the latent map and every block output (index 0 is level 1)."""
        _check_side(x, len(self.blocks))
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return x, feats


class Decoder(nn.Module):
    """Transposed-convolution mirror of the encoder with GFRM skip inputs.

    Upsampling block ``j`` produces the map at encoder level ``j - 1``. At
    every GFRM level that map is the memory-generated map ``F``; the edited
    map ``G`` is concatenated to it before the next block.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels()
        self.levels = cfg.resolved_gfrm_levels()
        self.n_blocks = cfg.blocks
        ups = []
        for j in range(cfg.blocks, 0, -1):
            cin = ch[j - 1] * (2 if j in self.levels else 1)
            if j == 1:
                ups.append(nn.Sequential(nn.ConvTranspose2d(cin, cfg.in_channels, 4, 2, 1),
                                         nn.Sigmoid()))
            else:
                ups.append(_up(cin, ch[j - 2]))
        # ups[0] consumes the latent, ups[-1] emits the image
        self.ups = nn.ModuleList(ups)

    def forward(self, latent: torch.Tensor, skips: dict[int, torch.Tensor],
                gfrm: nn.ModuleDict) -> torch.Tensor:
        missing = [lv for lv in self.levels if lv not in skips]
        if missing:
            raise ValueError(f"missing skip features for levels {missing}")
        x = latent
        for i, up in enumerate(self.ups):
            level = self.n_blocks - i  # level of x entering this block
            if level in self.levels:
                x = torch.cat([x, gfrm[str(level)](skips[level], x)], dim=1)
            x = up(x)
        return x


class Discriminator(nn.Module):
    """Encoder-shaped feature extractor with a global sigmoid head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.features = Encoder(cfg)
        self.head = nn.Linear(cfg.latent_dim, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        latent, feats = self.features(x)
        return torch.sigmoid(self.head(latent.flatten(1))).squeeze(1), feats


class AuxClassifier(nn.Module):
    def __init__(self, in_dim: int, widths=(512, 256, 1)):
        super().__init__()
        layers: list[nn.Module] = []
        for i, w in enumerate(widths):
            layers.append(nn.Linear(in_dim if i == 0 else widths[i - 1], w))
            if i < len(widths) - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z.flatten(1)))


class AddressingNet(nn.Module):
    """Two fully connected layers and a softmax over the memory entries."""

    def __init__(self, in_dim: int, hidden: int, memory_size: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, memory_size))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(z.flatten(1)), dim=-1)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def module_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FMRNet(nn.Module):
    """Container for all subnetworks plus the (optional) memory bank."""

    GROUPS = ("encoder", "decoder", "gfrm", "classifier", "addressing", "discriminator")

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.gfrm = nn.ModuleDict({str(lv): GFRM(cfg.texton_size, cfg.gfrm_trainable)
                                   for lv in cfg.resolved_gfrm_levels()})
        self.classifier = AuxClassifier(cfg.latent_dim, cfg.classifier_widths)
        self.addressing = AddressingNet(cfg.latent_dim, cfg.addressing_hidden, cfg.memory_size)
        self.discriminator = Discriminator(cfg)
        self.memory: MemoryBank | None = None
        init_weights(self, cfg.init_std)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.cfg.latent_side
        return self.cfg.channels()[-1], s, s

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Latent map and the skip features needed by the GFRM levels."""
        latent, feats = self.encoder(x)
        return latent, {lv: feats[lv - 1] for lv in self.decoder.levels}

    def restore(self, z: torch.Tensor) -> torch.Tensor:
        """Memory substitution of flattened latents; identity before a bank exists."""
        if self.memory is None:
            return z
        return substitute(self.addressing(z), self.memory)

    def decode(self, z: torch.Tensor, skips: dict[int, torch.Tensor]) -> torch.Tensor:
        latent = z.reshape(len(z), *self.latent_shape)
        return self.decoder(latent, skips, self.gfrm)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        latent, skips = self.encode(x)
        return self.decode(self.restore(latent.flatten(1)), skips)

    def patch_scores(self, x: torch.Tensor) -> torch.Tensor:
        if self.memory is None:
            raise RuntimeError("patch scores need an established memory bank")
        latent, _ = self.encoder(x)
        return patch_anomaly_score(latent.flatten(1), self.memory)

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        return list(getattr(self, group).parameters())

    def group_digests(self) -> dict[str, str]:
        out = {g: module_digest(getattr(self, g)) for g in self.GROUPS}
        out["memory"] = self.memory.digest() if self.memory is not None else ""
        return out

    def encoder_fingerprint(self) -> str:
        return module_digest(self.encoder)


@dataclass
class Checkpoint:
    model: FMRNet
    phase: str
    iteration: int
    extra: dict[str, Any]


def save_checkpoint(path: str | os.PathLike, model: FMRNet, phase: str, iteration: int = 0,
                    extra: dict[str, Any] | None = None) -> None:
    if phase not in ("phase1", "phase2"):
        raise ValueError(f"phase must be 'phase1' or 'phase2', got {phase!r}")
    meta = {"version": CHECKPOINT_VERSION, "phase": phase, "iteration": int(iteration),
            "config_hash": model.cfg.fingerprint(),
            "network": dataclasses.asdict(model.cfg), "extra": extra or {}}
    payload: dict[str, Any] = {"meta": json.dumps(meta), "state": model.state_dict()}
    if model.memory is not None:
        payload["memory"] = torch.from_numpy(model.memory.entries.copy())
        payload["memory_fingerprint"] = model.memory.encoder_fingerprint
    torch.save(payload, path)


def _network_config(d: dict[str, Any]) -> NetworkConfig:
    fields = {f.name: f for f in dataclasses.fields(NetworkConfig)}
    kw = {}
    for k, v in d.items():
        if k in fields:
            kw[k] = tuple(v) if isinstance(v, list) else v
    return NetworkConfig(**kw)


def load_checkpoint(path: str | os.PathLike, cfg: NetworkConfig | None = None) -> Checkpoint:
    """Rebuild a model from ``path``; refuses a ``cfg`` whose fingerprint differs."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = json.loads(payload["meta"])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    stored = _network_config(meta["network"])
    if stored.fingerprint() != meta["config_hash"]:
        raise CheckpointError("checkpoint metadata is inconsistent with its config hash")
    if cfg is not None and cfg.fingerprint() != meta["config_hash"]:
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {meta['config_hash']}, "
            f"requested {cfg.fingerprint()}")
    model = FMRNet(stored)
    model.load_state_dict(payload["state"])
    if "memory" in payload:
        model.memory = MemoryBank(payload["memory"].numpy(), payload["memory_fingerprint"])
    model.eval()
    return Checkpoint(model, meta["phase"], meta["iteration"], meta.get("extra", {}))
