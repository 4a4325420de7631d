"""Hierarchical segmentation model: posterior, prior and likelihood networks.

Latent level l (1-based, l=1 finest) has spatial dims (r_x, r_y) / 2^(l-1)
and D channels.  Python lists indexed by i hold level l = i + 1.  All
tensors are NCHW; images are (B, C_in, H, W) float, label maps (B, H, W)
long.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import CheckpointError, ShapeMismatchError

SIGMA_FLOOR = 1e-5
CHECKPOINT_FORMAT_VERSION = 1
HEAD_INIT_STD = 1e-2


@dataclass
class GaussianParams:
    """Diagonal Gaussian over one latent level: mu/sigma of shape (B, D, H, W)."""

    mu: torch.Tensor
    sigma: torch.Tensor
    level: int

    def validate(self) -> None:
        if self.mu.shape != self.sigma.shape:
            raise ShapeMismatchError(
                f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}"
            )
        if not torch.all(self.sigma > 0):
            raise ValueError(f"sigma must be strictly positive at level {self.level}")


def reparam_sample(g: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """mu + sigma * noise; differentiable w.r.t. mu and sigma."""
    if noise.shape != g.mu.shape:
        raise ShapeMismatchError(
            f"noise shape {tuple(noise.shape)} != param shape {tuple(g.mu.shape)} "
            f"at level {g.level}"
        )
    return g.mu + g.sigma * noise


def _activation(name: str) -> nn.Module:
    return nn.ReLU(inplace=True) if name == "relu" else nn.Softplus()


class ConvBlock(nn.Module):
    """Two 3x3 conv + batch-norm + nonlinearity stages."""

    def __init__(self, cin: int, cout: int, activation: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            _activation(activation),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            _activation(activation),
        )

    def forward(self, x):
        return self.net(x)


class UpConv(nn.Module):
    """Nearest-neighbour x2 upsampling followed by one 3x3 conv stage."""

    def __init__(self, cin: int, cout: int, activation: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            _activation(activation),
        )

    def forward(self, x):
        return self.net(F.interpolate(x, scale_factor=2, mode="nearest"))


def _head(cin: int, cout: int) -> nn.Conv2d:
    """1x1 output head (no normalisation, no nonlinearity)."""
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.normal_(conv.weight, std=HEAD_INIT_STD)
    nn.init.zeros_(conv.bias)
    return conv


class _Encoder(nn.Module):
    """Downsampling feature pyramid over all R resolution levels."""

    def __init__(self, cin: int, cfg: ModelConfig):
        super().__init__()
        blocks = []
        prev = cin
        for c in cfg.channels:
            blocks.append(ConvBlock(prev, c, cfg.activation))
            prev = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        h = x
        for r, block in enumerate(self.blocks):
            if r > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h)
            feats.append(h)
        return feats


class LatentNet(nn.Module):
    """Shared structure of the prior and posterior networks.

    Encodes the input down R resolution levels, bridges back up to latent
    level L, then emits per-level Gaussian parameters coarse-to-fine, each
    finer level conditioned on the sampled (or injected) latent below it.
    """

    def __init__(self, cin: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = _Encoder(cin, cfg)
        # R - L upsampling stages from the deepest resolution to level L.
        bridge = []
        for r in range(cfg.R - 1, cfg.L - 1, -1):
            bridge.append(UpConv(ch[r], ch[r - 1], cfg.activation))
        self.bridge = nn.ModuleList(bridge)
        self.z_inject = nn.ModuleList(
            UpConv(cfg.D, ch[i], cfg.activation) for i in range(cfg.L - 1)
        )
        self.level_blocks = nn.ModuleList(
            ConvBlock(2 * ch[i], ch[i], cfg.activation) for i in range(cfg.L - 1)
        )
        self.mu_heads = nn.ModuleList(_head(ch[i], cfg.D) for i in range(cfg.L))
        self.sigma_heads = nn.ModuleList(_head(ch[i], cfg.D) for i in range(cfg.L))
        self.draw_count = 0

    def forward(
        self,
        inp: torch.Tensor,
        noise: list[torch.Tensor] | None = None,
        injected: list[torch.Tensor | None] | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[list[GaussianParams], list[torch.Tensor]]:
        cfg = self.cfg
        if noise is not None and len(noise) != cfg.L:
            raise ShapeMismatchError(f"noise list must have length {cfg.L}")
        if injected is not None and len(injected) != cfg.L:
            raise ShapeMismatchError(f"injected list must have length {cfg.L}")

        feats = self.encoder(inp)
        h = feats[-1]
        for up in self.bridge:
            h = up(h)

        params: list[GaussianParams | None] = [None] * cfg.L
        zs: list[torch.Tensor | None] = [None] * cfg.L
        for i in range(cfg.L - 1, -1, -1):
            if i == cfg.L - 1:
                feat = h
            else:
                z_up = self.z_inject[i](zs[i + 1])
                feat = self.level_blocks[i](torch.cat([feats[i], z_up], dim=1))
            mu = self.mu_heads[i](feat)
            sigma = F.softplus(self.sigma_heads[i](feat)) + SIGMA_FLOOR
            g = GaussianParams(mu, sigma, level=i + 1)
            params[i] = g
            if injected is not None and injected[i] is not None:
                z = injected[i]
                if z.shape != mu.shape:
                    raise ShapeMismatchError(
                        f"injected z at level {i + 1} has shape {tuple(z.shape)}, "
                        f"expected {tuple(mu.shape)}"
                    )
            elif noise is not None:
                z = reparam_sample(g, noise[i])
            else:
                eps = torch.randn(
                    mu.shape, generator=generator, dtype=mu.dtype, device=mu.device
                )
                z = reparam_sample(g, eps)
                self.draw_count += 1
            zs[i] = z
        return params, zs  # type: ignore[return-value]


class LikelihoodNet(nn.Module):
    """Decodes a latent pyramid into segmentation logits, coarse-to-fine.

    The only inputs are the latents themselves; finer levels add residual
    corrections onto the x2 nearest-neighbour upsample of the level below.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.lift = ConvBlock(cfg.D, ch[cfg.L - 1], cfg.activation)
        self.upconvs = nn.ModuleList(
            UpConv(ch[i + 1], ch[i], cfg.activation) for i in range(cfg.L - 1)
        )
        self.z_lifts = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cfg.D, ch[i], 3, padding=1),
                nn.BatchNorm2d(ch[i]),
                _activation(cfg.activation),
            )
            for i in range(cfg.L - 1)
        )
        self.blocks = nn.ModuleList(
            ConvBlock(2 * ch[i], ch[i], cfg.activation) for i in range(cfg.L - 1)
        )
        self.heads = nn.ModuleList(_head(ch[i], cfg.K) for i in range(cfg.L))

    def forward(self, z: list[torch.Tensor]) -> list[torch.Tensor]:
        cfg = self.cfg
        if len(z) != cfg.L:
            raise ShapeMismatchError(f"latent pyramid must have length {cfg.L}, got {len(z)}")
        d = self.lift(z[cfg.L - 1])
        logits: list[torch.Tensor | None] = [None] * cfg.L
        logits[cfg.L - 1] = self.heads[cfg.L - 1](d)
        for i in range(cfg.L - 2, -1, -1):
            up = self.upconvs[i](d)
            zl = self.z_lifts[i](z[i])
            d = self.blocks[i](torch.cat([up, zl], dim=1))
            coarse = F.interpolate(logits[i + 1], scale_factor=2, mode="nearest")
            logits[i] = coarse + self.heads[i](d)
        return logits  # type: ignore[return-value]


class PHiSegNet(nn.Module):
    """Posterior, prior and likelihood subnetworks of the hierarchical model.

    Prior and posterior share structure but no weights; the posterior
    additionally sees the one-hot ground truth concatenated to the image.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.deterministic:
            raise ValueError("use DeterministicNet for deterministic configs")
        self.cfg = cfg
        self.posterior = LatentNet(cfg.input_channels + cfg.K, cfg)
        self.prior = LatentNet(cfg.input_channels, cfg)
        self.likelihood = LikelihoodNet(cfg)

    @property
    def draw_count(self) -> int:
        return self.posterior.draw_count + self.prior.draw_count

    def _check_image(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1:] != (cfg.input_channels, cfg.r_x, cfg.r_y):
            raise ShapeMismatchError(
                f"image must be (B, {cfg.input_channels}, {cfg.r_x}, {cfg.r_y}), "
                f"got {tuple(x.shape)}"
            )

    def posterior_forward(
        self,
        x: torch.Tensor,
        s: torch.Tensor,
        noise: list[torch.Tensor] | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[list[GaussianParams], list[torch.Tensor]]:
        self._check_image(x)
        if s.shape != (x.shape[0], self.cfg.r_x, self.cfg.r_y):
            raise ShapeMismatchError(
                f"label map must be (B, {self.cfg.r_x}, {self.cfg.r_y}), got {tuple(s.shape)}"
            )
        s_oh = F.one_hot(s.long(), self.cfg.K).permute(0, 3, 1, 2).to(x.dtype)
        return self.posterior(torch.cat([x, s_oh], dim=1), noise=noise, generator=generator)

    def prior_forward(
        self,
        x: torch.Tensor,
        noise: list[torch.Tensor] | None = None,
        injected: list[torch.Tensor | None] | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[list[GaussianParams], list[torch.Tensor]]:
        self._check_image(x)
        return self.prior(x, noise=noise, injected=injected, generator=generator)

    def likelihood_forward(self, z: list[torch.Tensor]) -> list[torch.Tensor]:
        return self.likelihood(z)


class DeterministicNet(nn.Module):
    """Encoder-decoder baseline: same conv blocks, feature skips, no latents.

    Emits the same logit pyramid interface as the likelihood network so the
    loss and inference machinery apply unchanged (minus the KL terms).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = _Encoder(cfg.input_channels, cfg)
        self.upconvs = nn.ModuleList(
            UpConv(ch[r + 1], ch[r], cfg.activation) for r in range(cfg.R - 1)
        )
        self.dec_blocks = nn.ModuleList(
            ConvBlock(2 * ch[r], ch[r], cfg.activation) for r in range(cfg.R - 1)
        )
        self.heads = nn.ModuleList(_head(ch[i], cfg.K) for i in range(cfg.L))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1:] != (cfg.input_channels, cfg.r_x, cfg.r_y):
            raise ShapeMismatchError(
                f"image must be (B, {cfg.input_channels}, {cfg.r_x}, {cfg.r_y}), "
                f"got {tuple(x.shape)}"
            )
        feats = self.encoder(x)
        dec: dict[int, torch.Tensor] = {cfg.R - 1: feats[-1]}
        d = feats[-1]
        for r in range(cfg.R - 2, -1, -1):
            d = self.dec_blocks[r](torch.cat([self.upconvs[r](d), feats[r]], dim=1))
            dec[r] = d
        logits: list[torch.Tensor | None] = [None] * cfg.L
        logits[cfg.L - 1] = self.heads[cfg.L - 1](dec[cfg.L - 1])
        for i in range(cfg.L - 2, -1, -1):
            coarse = F.interpolate(logits[i + 1], scale_factor=2, mode="nearest")
            logits[i] = coarse + self.heads[i](dec[i])
        return logits  # type: ignore[return-value]


def build_model(config: ModelConfig, seed: int) -> nn.Module:
    """Construct a model with reproducible initialization."""
    config.validate()
    torch.manual_seed(seed)
    if config.deterministic:
        return DeterministicNet(config)
    return PHiSegNet(config)


def parameter_checksum(net: nn.Module) -> float:
    return float(sum(p.double().abs().sum().item() for p in net.parameters()))


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(
    path,
    net: nn.Module,
    step: int,
    val_loss: float,
    train_config: dict | None = None,
) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": net.cfg.to_dict(),
            "state_dict": net.state_dict(),
            "step": step,
            "val_loss": val_loss,
            "train_config": train_config,
        },
        path,
    )


@dataclass
class Checkpoint:
    net: nn.Module
    config: ModelConfig
    step: int
    val_loss: float
    train_config: dict | None


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - surface as a package error
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    config = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise CheckpointError(
            "checkpoint model config does not match the requested config"
        )
    net = build_model(config, seed=0)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return Checkpoint(
        net=net,
        config=config,
        step=int(payload["step"]),
        val_loss=float(payload["val_loss"]),
        train_config=payload.get("train_config"),
    )
