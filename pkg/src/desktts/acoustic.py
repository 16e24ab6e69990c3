"""Sequence-to-sequence acoustic model: phoneme encoder, location-sensitive
attention, multi-frame autoregressive decoder with output slicing, and a
variational reference encoder over target spectrograms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class AcousticConfig:
    vocab_size: int
    n_mels: int = 80
    max_outputs_per_step: int = 5
    latent_dim: int = 64
    embed_dim: int = 128
    encoder_channels: int = 128
    encoder_kernel: int = 5
    encoder_layers: int = 3
    encoder_lstm_units: int = 128
    decoder_lstm_units: int = 256
    prenet_units: int = 128
    prenet_dropout: float = 0.5
    attention_units: int = 64
    attention_filters: int = 32
    attention_kernel: int = 31
    reference_channels: int = 64
    reference_layers: int = 4
    reference_lstm_units: int = 64
    log_floor: float = 1e-5

    @property
    def memory_dim(self) -> int:
        # encoder memory with the latent broadcast-concatenated onto it
        return 2 * self.encoder_lstm_units + self.latent_dim


@dataclass
class GaussianPosterior:
    """Per-utterance diagonal Gaussian over the latent, shape (B, latent_dim)."""

    mu: torch.Tensor
    log_var: torch.Tensor


def kld_closed_form(q: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)) = sum_d 0.5 (mu_d^2 + exp(log_var_d) - 1 - log_var_d),
    averaged over the batch."""
    per_sample = 0.5 * torch.sum(q.mu**2 + torch.exp(q.log_var) - 1.0 - q.log_var, dim=-1)
    return per_sample.mean()


def reparameterize(
    q: GaussianPosterior,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """z = mu + exp(log_var / 2) * noise, with standard normal noise."""
    if noise is None:
        noise = torch.randn(q.mu.shape, generator=generator, dtype=q.mu.dtype, device=q.mu.device)
    return q.mu + torch.exp(0.5 * q.log_var) * noise


@dataclass
class AttentionState:
    """Alignment weights (a simplex over encoder positions) and their running sum."""

    weights: torch.Tensor
    cumulative: torch.Tensor


@dataclass
class DecoderStepOutput:
    """One decoder step: always max_outputs_per_step raw frames plus a stop logit."""

    raw_frames: torch.Tensor  # (B, max_outputs_per_step, n_mels)
    stop_logit: torch.Tensor  # (B,)


def slice_outputs(step_out: DecoderStepOutput, outputs_per_step: int) -> torch.Tensor:
    """Keep the first ``outputs_per_step`` of the raw frames."""
    max_ops = step_out.raw_frames.shape[1]
    if not (1 <= outputs_per_step <= max_ops):
        raise ValueError(f"outputs_per_step must be in [1, {max_ops}], got {outputs_per_step}")
    return step_out.raw_frames[:, :outputs_per_step, :]


class Prenet(nn.Module):
    def __init__(self, in_dim, units, dropout):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, units)
        self.fc2 = nn.Linear(units, units)
        self.dropout = dropout

    def forward(self, x):
        x = F.dropout(F.relu(self.fc1(x)), self.dropout, training=self.training)
        return F.dropout(F.relu(self.fc2(x)), self.dropout, training=self.training)


class LocationSensitiveAttention(nn.Module):
    """Additive attention whose energies also see the previous and cumulative
    alignment weights through a 1-d convolution."""

    def __init__(self, query_dim, memory_dim, units, filters, kernel):
        super().__init__()
        self.query_layer = nn.Linear(query_dim, units, bias=False)
        self.memory_layer = nn.Linear(memory_dim, units, bias=False)
        self.location_conv = nn.Conv1d(2, filters, kernel, padding=(kernel - 1) // 2, bias=False)
        self.location_layer = nn.Linear(filters, units, bias=False)
        self.v = nn.Linear(units, 1, bias=False)

    def process_memory(self, memory):
        return self.memory_layer(memory)

    def forward(self, query, memory, processed_memory, state: AttentionState, mask):
        # (B, 2, N) -> (B, filters, N) -> (B, N, filters)
        loc = self.location_conv(torch.stack([state.weights, state.cumulative], dim=1))
        energies = self.v(
            torch.tanh(processed_memory + self.query_layer(query).unsqueeze(1) + self.location_layer(loc.transpose(1, 2)))
        ).squeeze(-1)
        if mask is not None:
            energies = energies.masked_fill(~mask, float("-inf"))
        weights = F.softmax(energies, dim=1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, AttentionState(weights=weights, cumulative=state.cumulative + weights)


class ReferenceEncoder(nn.Module):
    """Maps a mel spectrogram to a diagonal Gaussian posterior over the latent."""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        chans = [cfg.n_mels] + [cfg.reference_channels] * cfg.reference_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], kernel_size=3, stride=2, padding=1)
            for i in range(cfg.reference_layers)
        )
        self.lstm = nn.LSTM(
            cfg.reference_channels, cfg.reference_lstm_units, batch_first=True, bidirectional=True
        )
        self.mu_proj = nn.Linear(2 * cfg.reference_lstm_units, cfg.latent_dim)
        self.log_var_proj = nn.Linear(2 * cfg.reference_lstm_units, cfg.latent_dim)

    def forward(self, mel) -> GaussianPosterior:
        x = mel.transpose(1, 2)  # (B, n_mels, M)
        for conv in self.convs:
            x = F.relu(conv(x))
        _, (h, _) = self.lstm(x.transpose(1, 2))
        h = torch.cat([h[0], h[1]], dim=-1)  # forward/backward final states
        return GaussianPosterior(mu=self.mu_proj(h), log_var=self.log_var_proj(h))


@dataclass
class DecoderState:
    attention: AttentionState
    context: torch.Tensor
    h1: torch.Tensor
    c1: torch.Tensor
    h2: torch.Tensor
    c2: torch.Tensor


@dataclass
class TeacherForcedResult:
    pred: torch.Tensor  # (B, steps * outputs_per_step, n_mels)
    stop_logits: torch.Tensor  # (B, steps)
    attention: torch.Tensor  # (B, steps, N)
    target: torch.Tensor  # (B, steps * outputs_per_step, n_mels), silence-padded
    frame_mask: torch.Tensor  # (B, steps * outputs_per_step) bool, True on real frames
    stop_targets: torch.Tensor  # (B, steps)


@dataclass
class InferenceResult:
    mel: torch.Tensor  # (frames, n_mels)
    attention: torch.Tensor  # (steps, N)
    stop_step: int | None
    reached_max_steps: bool


class AcousticModel(nn.Module):
    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        convs = []
        in_ch = cfg.embed_dim
        for _ in range(cfg.encoder_layers):
            convs.append(
                nn.Conv1d(in_ch, cfg.encoder_channels, cfg.encoder_kernel, padding=(cfg.encoder_kernel - 1) // 2)
            )
            in_ch = cfg.encoder_channels
        self.encoder_convs = nn.ModuleList(convs)
        self.encoder_lstm = nn.LSTM(
            cfg.encoder_channels, cfg.encoder_lstm_units, batch_first=True, bidirectional=True
        )
        self.reference_encoder = ReferenceEncoder(cfg)
        self.prenet = Prenet(cfg.n_mels, cfg.prenet_units, cfg.prenet_dropout)
        self.attention = LocationSensitiveAttention(
            cfg.decoder_lstm_units, cfg.memory_dim, cfg.attention_units, cfg.attention_filters, cfg.attention_kernel
        )
        self.lstm1 = nn.LSTMCell(cfg.prenet_units + cfg.memory_dim, cfg.decoder_lstm_units)
        self.lstm2 = nn.LSTMCell(cfg.decoder_lstm_units + cfg.memory_dim, cfg.decoder_lstm_units)
        proj_in = cfg.decoder_lstm_units + cfg.memory_dim
        self.frame_proj = nn.Linear(proj_in, cfg.max_outputs_per_step * cfg.n_mels)
        self.stop_proj = nn.Linear(proj_in, 1)

    # ----------------------------------------------------------------- encoder

    def encode_phonemes(self, tokens, token_lengths=None):
        """Encoder memory, one vector per input token: (B, N, 2 * lstm_units)."""
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(
                f"token id out of vocabulary (vocab_size={self.cfg.vocab_size}): "
                f"range [{int(tokens.min())}, {int(tokens.max())}]"
            )
        x = self.embedding(tokens).transpose(1, 2)  # (B, embed, N)
        for conv in self.encoder_convs:
            x = F.relu(conv(x))
        x = x.transpose(1, 2)
        if token_lengths is not None and tokens.shape[0] > 1:
            packed = nn.utils.rnn.pack_padded_sequence(
                x, token_lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            out, _ = self.encoder_lstm(packed)
            out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        else:
            out, _ = self.encoder_lstm(x)
        return out

    def condition_memory(self, memory, z):
        """Broadcast-concatenate the latent onto every memory vector."""
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != configured {self.cfg.latent_dim}")
        return torch.cat([memory, z.unsqueeze(1).expand(-1, memory.shape[1], -1)], dim=-1)

    def vae_encode(self, mel) -> GaussianPosterior:
        return self.reference_encoder(mel)

    # ----------------------------------------------------------------- decoder

    def initial_decoder_state(self, memory, mask=None) -> DecoderState:
        B, N, _ = memory.shape
        kw = dict(dtype=memory.dtype, device=memory.device)
        # start fully attending to the first position (sequences are left-aligned)
        weights = torch.zeros(B, N, **kw)
        weights[:, 0] = 1.0
        u = self.cfg.decoder_lstm_units
        return DecoderState(
            attention=AttentionState(weights=weights, cumulative=torch.zeros(B, N, **kw)),
            context=torch.zeros(B, self.cfg.memory_dim, **kw),
            h1=torch.zeros(B, u, **kw),
            c1=torch.zeros(B, u, **kw),
            h2=torch.zeros(B, u, **kw),
            c2=torch.zeros(B, u, **kw),
        )

    def go_frame(self, batch, dtype, device):
        return torch.full((batch, self.cfg.n_mels), math.log(self.cfg.log_floor), dtype=dtype, device=device)

    def decoder_step(self, feedback, memory, processed_memory, mask, state: DecoderState):
        """One autoregressive step from a single feedback frame.

        Always emits max_outputs_per_step raw frames; callers slice.
        """
        pre = self.prenet(feedback)
        h1, c1 = self.lstm1(torch.cat([pre, state.context], dim=-1), (state.h1, state.c1))
        context, attn = self.attention(h1, memory, processed_memory, state.attention, mask)
        h2, c2 = self.lstm2(torch.cat([h1, context], dim=-1), (state.h2, state.c2))
        proj_in = torch.cat([h2, context], dim=-1)
        raw = self.frame_proj(proj_in).view(-1, self.cfg.max_outputs_per_step, self.cfg.n_mels)
        stop = self.stop_proj(proj_in).squeeze(-1)
        new_state = DecoderState(attention=attn, context=context, h1=h1, c1=c1, h2=h2, c2=c2)
        return DecoderStepOutput(raw_frames=raw, stop_logit=stop), new_state

    # ------------------------------------------------------------ full passes

    def teacher_forced(
        self, tokens, token_lengths, mel, mel_lengths, z, outputs_per_step
    ) -> TeacherForcedResult:
        """Teacher-forced pass at a given outputs_per_step.

        The target is silence-padded up to steps * outputs_per_step frames;
        feedback for step t is the last ground-truth frame of slice t - 1.
        """
        cfg = self.cfg
        B, M, _ = mel.shape
        steps = (M + outputs_per_step - 1) // outputs_per_step
        total = steps * outputs_per_step
        silence = math.log(cfg.log_floor)
        if total > M:
            pad = torch.full((B, total - M, cfg.n_mels), silence, dtype=mel.dtype, device=mel.device)
            target = torch.cat([mel, pad], dim=1)
        else:
            target = mel
        mask = None
        if token_lengths is not None:
            mask = torch.arange(tokens.shape[1], device=tokens.device).unsqueeze(0) < token_lengths.unsqueeze(1)
        memory = self.condition_memory(self.encode_phonemes(tokens, token_lengths), z)
        processed = self.attention.process_memory(memory)
        state = self.initial_decoder_state(memory, mask)
        feedback = self.go_frame(B, memory.dtype, memory.device)
        outs, stops, attn = [], [], []
        for t in range(steps):
            step_out, state = self.decoder_step(feedback, memory, processed, mask, state)
            outs.append(slice_outputs(step_out, outputs_per_step))
            stops.append(step_out.stop_logit)
            attn.append(state.attention.weights)
            feedback = target[:, (t + 1) * outputs_per_step - 1, :]
        pred = torch.cat(outs, dim=1)
        frame_idx = torch.arange(total, device=mel.device).unsqueeze(0)
        frame_mask = frame_idx < mel_lengths.unsqueeze(1)
        final_step = torch.clamp((mel_lengths + outputs_per_step - 1) // outputs_per_step - 1, min=0)
        stop_targets = (
            torch.arange(steps, device=mel.device).unsqueeze(0) >= final_step.unsqueeze(1)
        ).to(mel.dtype)
        return TeacherForcedResult(
            pred=pred,
            stop_logits=torch.stack(stops, dim=1),
            attention=torch.stack(attn, dim=1),
            target=target,
            frame_mask=frame_mask,
            stop_targets=stop_targets,
        )

    @torch.no_grad()
    def infer(self, tokens, z, outputs_per_step, max_steps=200) -> InferenceResult:
        """Autoregressive generation for a single utterance (batch of 1).

        Feeds back the model's own last predicted frame of each slice; halts
        when the stop gate fires or after max_steps (flagged, not an error).
        """
        assert tokens.shape[0] == 1, "inference runs one utterance at a time"
        memory = self.condition_memory(self.encode_phonemes(tokens), z)
        processed = self.attention.process_memory(memory)
        state = self.initial_decoder_state(memory)
        feedback = self.go_frame(1, memory.dtype, memory.device)
        frames, attn = [], []
        stop_step = None
        for t in range(max_steps):
            step_out, state = self.decoder_step(feedback, memory, processed, None, state)
            sliced = slice_outputs(step_out, outputs_per_step)
            frames.append(sliced)
            attn.append(state.attention.weights)
            if torch.sigmoid(step_out.stop_logit)[0] > 0.5:
                stop_step = t
                break
            feedback = sliced[:, -1, :]
        mel = torch.cat(frames, dim=1)[0]
        return InferenceResult(
            mel=mel,
            attention=torch.cat(attn, dim=0),
            stop_step=stop_step,
            reached_max_steps=stop_step is None,
        )


@dataclass
class AcousticLossReport:
    total: float
    l1: float
    kld: float
    stop_bce: float
    beta: float


def acoustic_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    q: GaussianPosterior | None,
    beta: float,
    stop_logits: torch.Tensor | None = None,
    stop_targets: torch.Tensor | None = None,
    frame_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, AcousticLossReport]:
    """L1 reconstruction + beta * KLD + stop-gate binary cross-entropy.

    The stop term is bookkeeping for the variable-length decoder and is
    reported separately from the two modeling terms.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = torch.abs(pred - target)
    if frame_mask is not None:
        m = frame_mask.unsqueeze(-1).to(pred.dtype)
        l1 = (diff * m).sum() / (m.sum() * pred.shape[-1])
    else:
        l1 = diff.mean()
    kld = kld_closed_form(q) if q is not None else torch.zeros((), dtype=pred.dtype, device=pred.device)
    if stop_logits is not None:
        stop_bce = F.binary_cross_entropy_with_logits(stop_logits, stop_targets)
    else:
        stop_bce = torch.zeros((), dtype=pred.dtype, device=pred.device)
    total = l1 + beta * kld + stop_bce
    report = AcousticLossReport(
        total=float(total.detach()),
        l1=float(l1.detach()),
        kld=float(kld.detach()),
        stop_bce=float(stop_bce.detach()),
        beta=float(beta),
    )
    return total, report
