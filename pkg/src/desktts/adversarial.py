"""Adversarial training pieces: spectrally-normalized self-attention
discriminator over random spectrogram windows, hinge loss for the
discriminator, and the composite generator loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .acoustic import GaussianPosterior, kld_closed_form


def spectral_normalize(weight: torch.Tensor, iters: int, u: torch.Tensor) -> torch.Tensor:
    """Divide a weight by its power-iteration largest singular value.

    ``weight`` is treated as a 2-d matrix of shape (rows, -1). ``u`` is the
    persistent left singular vector estimate, updated in place. A zero weight
    is returned unchanged.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = weight.reshape(weight.shape[0], -1)
    if not torch.any(w != 0):
        return weight
    with torch.no_grad():
        u_est = u
        for _ in range(iters):
            v_est = F.normalize(w.t().mv(u_est), dim=0, eps=1e-12)
            u_est = F.normalize(w.mv(v_est), dim=0, eps=1e-12)
        u.copy_(u_est)
    # snapshot the buffer: a later forward may update it in place before this
    # graph's backward runs
    u_cur = u.detach().clone()
    v = F.normalize(w.detach().t().mv(u_cur), dim=0, eps=1e-12)
    sigma = torch.dot(u_cur, w.mv(v))
    return weight / sigma


class _SNMixin:
    """Spectral normalization over a module's ``weight``; the power-iteration
    vector advances only in training mode so eval is a pure function of the
    weight."""

    # Power iteration converges slowly when the top singular values are
    # clustered, as they are for random conv weights; a thorough warm start
    # keeps the persistent estimate accurate from the first training step.
    _init_power_iters = 200

    def _init_sn(self, rows, power_iters):
        self.power_iters = power_iters
        self.register_buffer("sn_u", F.normalize(torch.randn(rows), dim=0))
        with torch.no_grad():
            spectral_normalize(self.weight.detach(), self._init_power_iters, self.sn_u)

    def normalized_weight(self):
        if self.training:
            return spectral_normalize(self.weight, self.power_iters, self.sn_u)
        w = self.weight.reshape(self.weight.shape[0], -1)
        if not torch.any(w != 0):
            return self.weight
        u_cur = self.sn_u.detach().clone()
        v = F.normalize(w.detach().t().mv(u_cur), dim=0, eps=1e-12)
        sigma = torch.dot(u_cur, w.mv(v))
        return self.weight / sigma


class SNLinear(nn.Linear, _SNMixin):
    def __init__(self, in_features, out_features, bias=True, power_iters=1):
        super().__init__(in_features, out_features, bias=bias)
        self._init_sn(out_features, power_iters)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SNConv2d(nn.Conv2d, _SNMixin):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, bias=True, power_iters=1):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=bias)
        self._init_sn(out_ch, power_iters)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


class SelfAttention2d(nn.Module):
    """Self-attention over spatial positions with a learned residual gain
    starting at zero."""

    def __init__(self, channels):
        super().__init__()
        self.f = SNConv2d(channels, max(1, channels // 8), 1, bias=False)
        self.g = SNConv2d(channels, max(1, channels // 8), 1, bias=False)
        self.h = SNConv2d(channels, max(1, channels // 2), 1, bias=False)
        self.out = SNConv2d(max(1, channels // 2), channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        B, C, H, W = x.shape
        f = self.f(x).reshape(B, -1, H * W)  # (B, C/8, HW)
        g = self.g(x).reshape(B, -1, H * W)
        h = self.h(x).reshape(B, -1, H * W)  # (B, C/2, HW)
        attn = F.softmax(torch.bmm(f.transpose(1, 2), g), dim=1)  # keys normalized per query column
        o = self.out(torch.bmm(h, attn).reshape(B, -1, H, W))
        return self.gamma * o + x


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_mels: int = 80
    window_width: int = 32
    base_channels: int = 32
    leak: float = 0.1
    power_iters: int = 1


class SpectrogramDiscriminator(nn.Module):
    """Scores a spectrogram window as real or predicted; every linear and
    convolutional weight is spectrally normalized on each forward pass."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        c, p = cfg.base_channels, cfg.power_iters
        self.conv1 = SNConv2d(1, c, 3, stride=2, padding=1, power_iters=p)
        self.conv2 = SNConv2d(c, 2 * c, 3, stride=2, padding=1, power_iters=p)
        self.attn = SelfAttention2d(2 * c)
        self.conv3 = SNConv2d(2 * c, 2 * c, 3, stride=2, padding=1, power_iters=p)
        self.conv4 = SNConv2d(2 * c, 2 * c, 3, stride=2, padding=1, power_iters=p)
        self.head = SNLinear(2 * c, 1, power_iters=p)

    def forward(self, window):
        """window: (B, frames, n_mels) -> score (B,)."""
        x = window.unsqueeze(1)  # (B, 1, W, n_mels)
        leak = self.cfg.leak
        x = F.leaky_relu(self.conv1(x), leak)
        x = F.leaky_relu(self.conv2(x), leak)
        x = self.attn(x)
        x = F.leaky_relu(self.conv3(x), leak)
        x = F.leaky_relu(self.conv4(x), leak)
        x = x.mean(dim=(2, 3))  # global average pool
        return self.head(x).squeeze(-1)

    def weight_matrices(self):
        """All spectrally-normalized weights, as (name, module) pairs."""
        return [(name, m) for name, m in self.named_modules() if isinstance(m, (SNConv2d, SNLinear))]


@dataclass(frozen=True)
class WindowCrop:
    start: int
    width: int
    frames: np.ndarray | torch.Tensor


def random_window(frames, width: int, rng: np.random.Generator) -> WindowCrop:
    """Uniformly random crop of ``width`` frames; shorter inputs are returned
    whole."""
    if width < 1:
        raise ValueError("width must be >= 1")
    M = frames.shape[0]
    if M <= width:
        return WindowCrop(start=0, width=M, frames=frames)
    start = int(rng.integers(0, M - width + 1))
    return WindowCrop(start=start, width=width, frames=frames[start : start + width])


def paired_random_windows(real, fake, width: int, rng: np.random.Generator):
    """Crop real and fake spectrograms at the same start index so the
    discriminator judges texture, not content."""
    crop = random_window(real, width, rng)
    return crop, WindowCrop(start=crop.start, width=crop.width, frames=fake[crop.start : crop.start + crop.width])


def d_hinge_loss(score_fake: torch.Tensor, score_real: torch.Tensor) -> torch.Tensor:
    """Hinge loss pushing real scores above +1 and fake scores below -1,
    with expectations taken as batch means."""
    return F.relu(1.0 + score_fake).mean() + F.relu(1.0 - score_real).mean()


@dataclass
class GanLossReport:
    d_loss: float
    g_adv: float
    g_l1: float
    g_kld: float
    alpha: float
    beta: float
    g_total: float


def g_composite_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    score_fake: torch.Tensor,
    score_real: torch.Tensor,
    q: GaussianPosterior | None,
    alpha: float,
    beta: float,
    frame_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, GanLossReport]:
    """Generator loss: masked L1 + alpha * (D(real) - D(fake)) + beta * KLD.

    The real score is detached; the generator only receives gradient through
    the fake score.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = torch.abs(pred - target)
    if frame_mask is not None:
        m = frame_mask.unsqueeze(-1).to(pred.dtype)
        g_l1 = (diff * m).sum() / (m.sum() * pred.shape[-1])
    else:
        g_l1 = diff.mean()
    g_adv = (score_real.detach() - score_fake).mean()
    g_kld = kld_closed_form(q) if q is not None else torch.zeros((), dtype=pred.dtype)
    total = g_l1 + alpha * g_adv + beta * g_kld
    with torch.no_grad():
        d_loss = d_hinge_loss(score_fake, score_real)
    report = GanLossReport(
        d_loss=float(d_loss),
        g_adv=float(g_adv.detach()),
        g_l1=float(g_l1.detach()),
        g_kld=float(g_kld.detach()),
        alpha=float(alpha),
        beta=float(beta),
        g_total=float(total.detach()),
    )
    return total, report
