"""Neural vocoder pair: an autoregressive mixture-of-logistics teacher and a
feed-forward inverse-autoregressive-flow student distilled from it.

Both are conditioned on the same upsampled encoding of the mel spectrogram
and the utterance latent, produced by a conditioning encoder that is trained
with the teacher and then frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_NUM_LEVELS = 32768  # discretization grid for teacher likelihoods


class FrozenTeacherError(RuntimeError):
    """Raised when a teacher that should be frozen has changed."""


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class CondEncoderConfig:
    n_mels: int = 80
    latent_dim: int = 64
    lstm_units: int = 128
    lstm_layers: int = 2
    out_channels: int = 128
    hop: int = 200


class ConditioningEncoder(nn.Module):
    """Turns a mel spectrogram plus an utterance latent into a per-sample
    conditioning sequence of length frames * hop."""

    def __init__(self, cfg: CondEncoderConfig = CondEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(
            cfg.n_mels + cfg.latent_dim,
            cfg.lstm_units,
            num_layers=cfg.lstm_layers,
            batch_first=True,
            bidirectional=True,
        )
        self.proj = nn.Linear(2 * cfg.lstm_units, cfg.out_channels)

    def forward(self, mel: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """mel: (B, M, n_mels), z: (B, latent_dim) -> (B, M * hop, C)."""
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.cfg.latent_dim}")
        zrep = z.unsqueeze(1).expand(-1, mel.shape[1], -1)
        h, _ = self.lstm(torch.cat([mel, zrep], dim=-1))
        frames = self.proj(h)  # (B, M, C)
        return frames.repeat_interleave(self.cfg.hop, dim=1)


# ---------------------------------------------------------------------------
# mixture of logistics


@dataclass
class MolParams:
    """Mixture parameters with component axis last: (..., K)."""

    logits: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    def __post_init__(self):
        if not (self.logits.shape == self.means.shape == self.log_scales.shape):
            raise ValueError("mixture parameter shapes disagree")


def mol_log_prob(
    params: MolParams,
    x: torch.Tensor,
    num_levels: int = DEFAULT_NUM_LEVELS,
) -> torch.Tensor:
    """Log probability mass of ``x`` under a discretized logistic mixture.

    The signal range [-1, 1] is split into ``num_levels`` bins whose centers
    are spaced 2 / (num_levels - 1) apart; a bin's mass is the logistic CDF
    difference across its half-width, except the two edge bins which absorb
    the full tails so the masses always sum to one.
    """
    if num_levels < 2:
        raise ValueError("num_levels must be >= 2")
    half_bin = 1.0 / (num_levels - 1)
    xc = x.unsqueeze(-1) - params.means
    inv_s = torch.exp(-params.log_scales)
    cdf_hi = torch.sigmoid(inv_s * (xc + half_bin))
    cdf_lo = torch.sigmoid(inv_s * (xc - half_bin))
    mass_mid = cdf_hi - cdf_lo
    mass_low = cdf_hi            # left edge bin: everything below its upper face
    mass_high = 1.0 - cdf_lo     # right edge bin: everything above its lower face
    xb = x.unsqueeze(-1)
    mass = torch.where(xb <= -1.0 + half_bin, mass_low, mass_mid)
    mass = torch.where(xb >= 1.0 - half_bin, mass_high, mass)
    tiny = 1e-14 if x.dtype == torch.float64 else 1e-12
    log_mass = torch.log(torch.clamp(mass, min=tiny))
    return torch.logsumexp(F.log_softmax(params.logits, dim=-1) + log_mass, dim=-1)


def mol_log_density(params: MolParams, x: torch.Tensor) -> torch.Tensor:
    """Continuous log density of the same mixture, used for distillation."""
    c = (x.unsqueeze(-1) - params.means) * torch.exp(-params.log_scales)
    comp = F.logsigmoid(c) + F.logsigmoid(-c) - params.log_scales
    return torch.logsumexp(F.log_softmax(params.logits, dim=-1) + comp, dim=-1)


def mol_sample(params: MolParams, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw one value per leading position of ``params``."""
    shape = params.logits.shape
    g = torch.rand(shape, generator=generator, dtype=params.logits.dtype)
    gumbel = -torch.log(-torch.log(g.clamp(1e-7, 1.0 - 1e-7)))
    k = torch.argmax(F.log_softmax(params.logits, dim=-1) + gumbel, dim=-1, keepdim=True)
    mu = torch.gather(params.means, -1, k).squeeze(-1)
    s = torch.exp(torch.gather(params.log_scales, -1, k).squeeze(-1))
    u = torch.rand(mu.shape, generator=generator, dtype=mu.dtype).clamp(1e-7, 1.0 - 1e-7)
    return mu + s * (torch.log(u) - torch.log1p(-u))


def sample_logistic_noise(
    shape: tuple[int, ...],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Standard logistic noise, the base distribution of the flow student."""
    u = torch.rand(shape, generator=generator, dtype=dtype).clamp(1e-7, 1.0 - 1e-7)
    return torch.log(u) - torch.log1p(-u)


# ---------------------------------------------------------------------------
# causal dilated convolution stack (shared by teacher and flow conditioners)


class CausalConv1d(nn.Conv1d):
    """1-d convolution whose output at t sees inputs at <= t only."""

    def __init__(self, in_ch, out_ch, kernel_size, dilation=1):
        super().__init__(in_ch, out_ch, kernel_size, dilation=dilation)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class GatedLayer(nn.Module):
    """One dilated gated convolution with conditioning, residual and skip."""

    def __init__(self, residual_ch, gate_ch, skip_ch, cond_ch, kernel, dilation):
        super().__init__()
        if gate_ch % 2:
            raise ValueError("gate channels must be even")
        self.conv = CausalConv1d(residual_ch, gate_ch, kernel, dilation=dilation)
        self.cond = nn.Conv1d(cond_ch, gate_ch, 1)
        self.res = nn.Conv1d(gate_ch // 2, residual_ch, 1)
        self.skip = nn.Conv1d(gate_ch // 2, skip_ch, 1)

    def forward(self, h, cond):
        z = self.conv(h) + self.cond(cond)
        a, b = z.chunk(2, dim=1)
        g = torch.tanh(a) * torch.sigmoid(b)
        return h + self.res(g), self.skip(g)


class GatedStack(nn.Module):
    """Input projection, a list of gated layers, and a two-layer output head."""

    def __init__(self, dilations, residual_ch, gate_ch, skip_ch, cond_ch, kernel, out_ch):
        super().__init__()
        self.input = nn.Conv1d(1, residual_ch, 1)
        self.layers = nn.ModuleList(
            GatedLayer(residual_ch, gate_ch, skip_ch, cond_ch, kernel, d) for d in dilations
        )
        self.head1 = nn.Conv1d(skip_ch, skip_ch, 1)
        self.head2 = nn.Conv1d(skip_ch, out_ch, 1)

    def forward(self, x_shifted, cond):
        """x_shifted: (B, T) already causally shifted, cond: (B, C, T)."""
        h = self.input(x_shifted.unsqueeze(1))
        skip_sum = 0.0
        for layer in self.layers:
            h, skip = layer(h, cond)
            skip_sum = skip_sum + skip
        out = self.head2(F.relu(self.head1(F.relu(skip_sum))))
        return out  # (B, out_ch, T)


def shift_right(x: torch.Tensor) -> torch.Tensor:
    """Prepend a zero and drop the last sample so position t sees x[:t]."""
    return F.pad(x, (1, 0))[..., :-1]


# ---------------------------------------------------------------------------
# teacher


@dataclass(frozen=True)
class TeacherConfig:
    n_mixtures: int = 10
    residual_channels: int = 128
    gate_channels: int = 256
    skip_channels: int = 256
    cond_channels: int = 128
    kernel_size: int = 2
    blocks: int = 2
    layers_per_block: int = 10

    def dilations(self) -> list[int]:
        return [2 ** i for _ in range(self.blocks) for i in range(self.layers_per_block)]


class TeacherVocoder(nn.Module):
    """Autoregressive vocoder predicting a logistic mixture per sample."""

    def __init__(self, cfg: TeacherConfig = TeacherConfig()):
        super().__init__()
        self.cfg = cfg
        self.stack = GatedStack(
            cfg.dilations(),
            cfg.residual_channels,
            cfg.gate_channels,
            cfg.skip_channels,
            cfg.cond_channels,
            cfg.kernel_size,
            3 * cfg.n_mixtures,
        )

    def forward(self, audio: torch.Tensor, cond: torch.Tensor) -> MolParams:
        """audio: (B, T) in [-1, 1], cond: (B, T, C) -> params over (B, T, K).

        The output at position t depends on audio[:, :t] and cond[:, t] only.
        """
        if audio.shape[1] != cond.shape[1]:
            raise ValueError(f"audio length {audio.shape[1]} != cond length {cond.shape[1]}")
        out = self.stack(shift_right(audio), cond.transpose(1, 2))
        K = self.cfg.n_mixtures
        logits, means, log_scales = out.transpose(1, 2).split(K, dim=-1)
        return MolParams(logits=logits, means=means, log_scales=log_scales)

    def receptive_field(self) -> int:
        return 1 + sum((self.cfg.kernel_size - 1) * d for d in self.cfg.dilations())


def teacher_nll(
    params: MolParams, audio: torch.Tensor, num_levels: int = DEFAULT_NUM_LEVELS
) -> torch.Tensor:
    """Mean negative log mass per sample position."""
    return -mol_log_prob(params, audio, num_levels).mean()


def freeze_module(module: nn.Module) -> nn.Module:
    """Stop gradients and stamp parameter versions so later mutation is caught."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module._frozen_versions = {n: p._version for n, p in module.named_parameters()}
    return module


def freeze_teacher(teacher: TeacherVocoder, encoder: ConditioningEncoder | None = None):
    modules = [teacher] + ([encoder] if encoder is not None else [])
    for m in modules:
        freeze_module(m)
    return modules


def assert_frozen(module: nn.Module):
    stamps = getattr(module, "_frozen_versions", None)
    if stamps is None:
        raise FrozenTeacherError("module was never frozen")
    for name, p in module.named_parameters():
        if p.requires_grad:
            raise FrozenTeacherError(f"parameter {name} requires grad")
        if p._version != stamps.get(name):
            raise FrozenTeacherError(f"parameter {name} changed after freezing")


# ---------------------------------------------------------------------------
# flow student


@dataclass(frozen=True)
class StudentConfig:
    flow_layers: tuple[int, ...] = (10, 10, 10, 30)
    residual_channels: int = 64
    gate_channels: int = 64
    skip_channels: int = 64
    cond_channels: int = 128
    kernel_size: int = 2
    dilation_cycle: int = 10
    init_log_sigma: float = -1.5


class FlowConditioner(nn.Module):
    """Causal network producing the shift and log-scale of one flow."""

    def __init__(self, n_layers: int, cfg: StudentConfig):
        super().__init__()
        dilations = [2 ** (i % cfg.dilation_cycle) for i in range(n_layers)]
        self.stack = GatedStack(
            dilations,
            cfg.residual_channels,
            cfg.gate_channels,
            cfg.skip_channels,
            cfg.cond_channels,
            cfg.kernel_size,
            2,
        )
        # start near the identity with a small scale: quiet early samples keep
        # the frozen teacher in-distribution, avoiding the high-entropy optimum
        nn.init.zeros_(self.stack.head2.weight)
        with torch.no_grad():
            self.stack.head2.bias.copy_(
                torch.tensor([0.0, cfg.init_log_sigma], dtype=self.stack.head2.bias.dtype)
            )

    def forward(self, s: torch.Tensor, cond: torch.Tensor):
        """s: (B, T), cond: (B, C, T) -> (mu, sigma) each (B, T).

        mu[t] and sigma[t] depend on s[:t] and cond[t], keeping the flow
        autoregressive in its input.
        """
        out = self.stack(shift_right(s), cond)
        mu, log_sigma = out[:, 0], out[:, 1]
        return mu, torch.exp(log_sigma)


def iaf_step(s_in: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor):
    """One affine flow: returns the transformed sequence and per-item log det."""
    return mu + sigma * s_in, torch.log(sigma).sum(dim=-1)


@dataclass
class StudentForward:
    audio: torch.Tensor      # (B, T) final flow output
    mu_tot: torch.Tensor     # (B, T) composed shift
    sigma_tot: torch.Tensor  # (B, T) composed scale
    log_det: torch.Tensor    # (B,) sum of log sigma over flows and time


class StudentVocoder(nn.Module):
    """Stack of inverse-autoregressive flows over standard logistic noise.

    Given the noise prefix, each output sample is logistic with the composed
    shift and scale, which gives the student a closed-form entropy.
    """

    def __init__(self, cfg: StudentConfig = StudentConfig()):
        super().__init__()
        self.cfg = cfg
        self.flows = nn.ModuleList(FlowConditioner(n, cfg) for n in cfg.flow_layers)

    def forward(self, z: torch.Tensor, cond: torch.Tensor) -> StudentForward:
        """z: (B, T) base noise, cond: (B, T, C)."""
        if z.shape[1] != cond.shape[1]:
            raise ValueError(f"noise length {z.shape[1]} != cond length {cond.shape[1]}")
        cond_t = cond.transpose(1, 2)
        s = z
        mu_tot = torch.zeros_like(z)
        sigma_tot = torch.ones_like(z)
        log_det = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for flow in self.flows:
            mu, sigma = flow(s, cond_t)
            s, ld = iaf_step(s, mu, sigma)
            mu_tot = mu + sigma * mu_tot
            sigma_tot = sigma * sigma_tot
            log_det = log_det + ld
        return StudentForward(audio=s, mu_tot=mu_tot, sigma_tot=sigma_tot, log_det=log_det)

    def synthesize(self, cond: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Draw audio for conditioning ``cond`` (B, T, C); output clamped to [-1, 1]."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                z = sample_logistic_noise(cond.shape[:2], generator, dtype=cond.dtype)
                out = self.forward(z, cond)
        finally:
            self.train(was_training)
        return out.audio.clamp(-1.0, 1.0)


def student_entropy(sigma_tot: torch.Tensor) -> torch.Tensor:
    """Entropy of the per-sample logistic outputs, summed over time: (B,)."""
    return (torch.log(sigma_tot) + 2.0).sum(dim=-1)


# ---------------------------------------------------------------------------
# distillation


@dataclass(frozen=True)
class DistillConfig:
    n_mc: int = 4
    spectral_weight: float = 1.0
    spectral_fft: int = 512
    spectral_hop: int = 128
    log_floor: float = 1e-5


@dataclass
class DistillReport:
    kl_term: float
    spectral: float
    total: float
    n_mc: int


def log_stft_magnitude(x: torch.Tensor, fft_size: int, hop: int, log_floor: float) -> torch.Tensor:
    window = torch.hann_window(fft_size, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, fft_size, hop_length=hop, window=window, return_complex=True)
    return torch.log(torch.clamp(spec.abs(), min=log_floor))


def kl_term_mc(
    student: StudentVocoder,
    teacher: TeacherVocoder,
    cond: torch.Tensor,
    n_mc: int,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, StudentForward]:
    """Monte-Carlo KL from student to teacher over ``n_mc`` noise draws.

    Cross-entropy uses the teacher's continuous mixture density on sampled
    student audio; the student entropy is closed form. Both sum over time and
    average over the batch and draws. Also returns the forward pass of the
    first draw for reuse.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    B = cond.shape[0]
    cond_rep = cond.repeat(n_mc, 1, 1)
    z = sample_logistic_noise((n_mc * B, cond.shape[1]), generator, dtype=cond.dtype)
    out = student(z, cond_rep)
    params = teacher(out.audio, cond_rep)
    cross_entropy = -mol_log_density(params, out.audio).sum(dim=-1)
    entropy = student_entropy(out.sigma_tot)
    kl = (cross_entropy - entropy).mean()
    first = StudentForward(
        audio=out.audio[:B],
        mu_tot=out.mu_tot[:B],
        sigma_tot=out.sigma_tot[:B],
        log_det=out.log_det[:B],
    )
    return kl, first


def distill_loss(
    student: StudentVocoder,
    teacher: TeacherVocoder,
    cond: torch.Tensor,
    target_audio: torch.Tensor,
    cfg: DistillConfig = DistillConfig(),
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, DistillReport]:
    """KL to the frozen teacher plus an MSE over log-STFT magnitudes."""
    assert_frozen(teacher)
    kl, first = kl_term_mc(student, teacher, cond, cfg.n_mc, generator)
    ref = log_stft_magnitude(target_audio, cfg.spectral_fft, cfg.spectral_hop, cfg.log_floor)
    got = log_stft_magnitude(first.audio, cfg.spectral_fft, cfg.spectral_hop, cfg.log_floor)
    spectral = F.mse_loss(got, ref)
    total = kl + cfg.spectral_weight * spectral
    report = DistillReport(
        kl_term=float(kl.detach()),
        spectral=float(spectral.detach()),
        total=float(total.detach()),
        n_mc=cfg.n_mc,
    )
    return total, report
