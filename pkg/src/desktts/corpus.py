"""Synthetic toy corpus generation, manifest I/O, and corpus statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import MelConfig, Waveform, load_wav, save_wav

STATEMENT = "statement"
YES_NO_QUESTION = "yes_no_question"

PAUSE_TOKEN = "pau"

# 12-token inventory: a pause plus 11 voiced tokens. Each voiced token maps to
# a pair of sinusoid frequencies with f2 = 3 * f1, so every segment is periodic
# at f1 and an autocorrelation tracker reads f1 as its pitch.
DEFAULT_TOKEN_TABLE: dict[str, tuple[float, float] | None] = {
    PAUSE_TOKEN: None,
    "aa": (220.0, 660.0),
    "eh": (240.0, 720.0),
    "iy": (260.0, 780.0),
    "ow": (280.0, 840.0),
    "uw": (300.0, 900.0),
    "k": (320.0, 960.0),
    "s": (340.0, 1020.0),
    "t": (360.0, 1080.0),
    "m": (200.0, 600.0),
    "n": (380.0, 1140.0),
    "r": (210.0, 630.0),
}

TOKEN_SECONDS = 0.1
EDGE_RAMP_SECONDS = 0.01
QUESTION_PITCH_RISE = 1.25
PEAK_AMPLITUDE = 0.5


class NoVoicedFramesError(ValueError):
    """Raised when a corpus contains no frames above the voicing threshold."""


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    phonemes: tuple[str, ...]
    audio_path: str
    intonation_tag: str

    def __post_init__(self):
        if len(self.phonemes) == 0:
            raise ValueError(f"utterance {self.utt_id}: empty phoneme sequence")
        if self.intonation_tag not in (STATEMENT, YES_NO_QUESTION):
            raise ValueError(f"unknown intonation tag {self.intonation_tag!r}")


def write_manifest(path: str | Path, records: Iterable[UtteranceRecord]) -> None:
    lines = []
    for r in records:
        lines.append(f"{r.utt_id}\t{' '.join(r.phonemes)}\t{r.audio_path}\t{r.intonation_tag}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    seen = set()
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected 4 tab-separated columns, got {len(parts)}")
        utt_id, phonemes, audio_path, tag = parts
        if utt_id in seen:
            raise ValueError(f"{path}:{ln}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        records.append(
            UtteranceRecord(
                utt_id=utt_id,
                phonemes=tuple(phonemes.split()),
                audio_path=audio_path,
                intonation_tag=tag,
            )
        )
    return records


def _edge_envelope(n: int, sample_rate: int) -> np.ndarray:
    """Flat envelope with raised-cosine attack and decay edges."""
    env = np.ones(n)
    ramp = min(int(EDGE_RAMP_SECONDS * sample_rate), n // 2)
    if ramp > 0:
        edge = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = edge
        env[-ramp:] = edge[::-1]
    return env


def token_segment(
    token: str,
    sample_rate: int,
    token_table: dict[str, tuple[float, float] | None] = DEFAULT_TOKEN_TABLE,
    pitch_scale: np.ndarray | float = 1.0,
) -> np.ndarray:
    """Waveform segment for one token: two sinusoids under a smooth envelope.

    ``pitch_scale`` multiplies the instantaneous frequency of both sinusoids;
    an array (one value per sample) produces a pitch ramp via phase
    integration.
    """
    n = int(round(TOKEN_SECONDS * sample_rate))
    formants = token_table[token]
    if formants is None:
        return np.zeros(n)
    f1, f2 = formants
    scale = np.broadcast_to(np.asarray(pitch_scale, dtype=np.float64), (n,))
    # cumulative phase so a time-varying pitch_scale bends frequency smoothly
    phase_unit = 2.0 * np.pi * np.cumsum(scale) / sample_rate
    seg = 0.6 * np.sin(f1 * phase_unit) + 0.4 * np.sin(f2 * phase_unit)
    return seg * _edge_envelope(n, sample_rate)


def render_utterance(
    tokens: Sequence[str],
    sample_rate: int,
    token_table: dict[str, tuple[float, float] | None] = DEFAULT_TOKEN_TABLE,
    question: bool = False,
) -> np.ndarray:
    """Concatenate token segments; questions get a linearly rising pitch ramp."""
    n_total = len(tokens) * int(round(TOKEN_SECONDS * sample_rate))
    if question:
        ramp = np.linspace(1.0, QUESTION_PITCH_RISE, n_total)
    else:
        ramp = np.ones(n_total)
    seg_len = int(round(TOKEN_SECONDS * sample_rate))
    parts = []
    for i, tok in enumerate(tokens):
        parts.append(token_segment(tok, sample_rate, token_table, ramp[i * seg_len : (i + 1) * seg_len]))
    out = np.concatenate(parts) if parts else np.zeros(0)
    peak = np.max(np.abs(out)) if len(out) else 0.0
    if peak > 0:
        out = out * (PEAK_AMPLITUDE / peak)
    return out


def generate_toy_corpus(
    out_dir: str | Path,
    n_utts: int,
    seed: int,
    cfg: MelConfig,
    token_table: dict[str, tuple[float, float] | None] = DEFAULT_TOKEN_TABLE,
    question_fraction: float = 0.25,
    min_tokens: int = 4,
    max_tokens: int = 8,
    noise_std: float = 0.0,
) -> list[UtteranceRecord]:
    """Generate ``n_utts`` random utterances plus a ``manifest.tsv``.

    Pure function of its arguments: identical seeds yield byte-identical WAV
    files and manifest. ``n_utts == 0`` writes an empty manifest and no audio.

    ``noise_std`` adds an ambient Gaussian floor on top of the tones, drawn
    from a separate stream so the token content for a seed stays the same
    with or without noise. Spectral floors of noiseless recordings sit at the
    log clamp, which no stochastic vocoder can reach; a small floor keeps
    log-spectral metrics comparable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 917])
    voiced = [t for t, f in token_table.items() if f is not None]
    records = []
    for i in range(n_utts):
        n_tokens = int(rng.integers(min_tokens, max_tokens + 1))
        tokens = [voiced[int(k)] for k in rng.integers(0, len(voiced), size=n_tokens)]
        # sprinkle a pause in longer utterances so the model sees silence
        if n_tokens >= 6:
            tokens[int(rng.integers(1, n_tokens - 1))] = PAUSE_TOKEN
        question = bool(rng.random() < question_fraction)
        samples = render_utterance(tokens, cfg.sample_rate, token_table, question=question)
        if noise_std > 0.0:
            samples = samples + noise_std * noise_rng.standard_normal(len(samples))
        utt_id = f"toy_{i:04d}"
        wav_path = out_dir / f"{utt_id}.wav"
        save_wav(wav_path, Waveform(samples=samples, sample_rate=cfg.sample_rate))
        records.append(
            UtteranceRecord(
                utt_id=utt_id,
                phonemes=tuple(tokens),
                audio_path=str(wav_path),
                intonation_tag=YES_NO_QUESTION if question else STATEMENT,
            )
        )
    write_manifest(out_dir / "manifest.tsv", records)
    return records


def track_f0(
    samples: np.ndarray,
    sample_rate: int,
    win: int = 800,
    hop: int = 200,
    fmin: float = 70.0,
    fmax: float = 600.0,
    rms_threshold: float = 0.01,
) -> np.ndarray:
    """Per-frame f0 (Hz) of voiced frames via autocorrelation peak-picking.

    A frame is voiced when its RMS exceeds ``rms_threshold``. The lag of the
    autocorrelation maximum inside [sr/fmax, sr/fmin] is refined by parabolic
    interpolation. Unvoiced frames are omitted from the result.
    """
    if len(samples) < win:
        return np.zeros(0)
    lag_lo = max(2, int(np.floor(sample_rate / fmax)))
    lag_hi = min(win - 2, int(np.ceil(sample_rate / fmin)))
    f0s = []
    n_frames = 1 + (len(samples) - win) // hop
    for i in range(n_frames):
        frame = samples[i * hop : i * hop + win]
        if np.sqrt(np.mean(frame**2)) < rms_threshold:
            continue
        ac = np.correlate(frame, frame, mode="full")[win - 1 :]
        if ac[0] <= 0:
            continue
        ac = ac / ac[0]
        search = ac[lag_lo : lag_hi + 1]
        k = int(np.argmax(search)) + lag_lo
        # parabolic refinement around the discrete peak
        if 1 <= k < len(ac) - 1:
            denom = ac[k - 1] - 2.0 * ac[k] + ac[k + 1]
            shift = 0.5 * (ac[k - 1] - ac[k + 1]) / denom if abs(denom) > 1e-12 else 0.0
            shift = float(np.clip(shift, -0.5, 0.5))
        else:
            shift = 0.0
        f0s.append(sample_rate / (k + shift))
    return np.asarray(f0s)


@dataclass(frozen=True)
class CorpusStats:
    mean_f0: float
    f0_variance: float
    energy_variance: float
    n_voiced_frames: int


def corpus_stats(
    records: Sequence[UtteranceRecord],
    win: int = 800,
    hop: int = 200,
    rms_threshold: float = 0.01,
) -> CorpusStats:
    """f0 and energy statistics over all voiced frames of a corpus."""
    if len(records) == 0:
        raise ValueError("empty manifest")
    f0_all = []
    energy_all = []
    for rec in records:
        wav = load_wav(rec.audio_path)
        f0_all.append(track_f0(wav.samples, wav.sample_rate, win=win, hop=hop, rms_threshold=rms_threshold))
        n_frames = max(0, 1 + (len(wav.samples) - win) // hop)
        for i in range(n_frames):
            frame = wav.samples[i * hop : i * hop + win]
            rms = float(np.sqrt(np.mean(frame**2)))
            if rms >= rms_threshold:
                energy_all.append(rms**2)
    f0 = np.concatenate(f0_all) if f0_all else np.zeros(0)
    if len(f0) == 0:
        raise NoVoicedFramesError("no voiced frames in corpus")
    return CorpusStats(
        mean_f0=float(np.mean(f0)),
        f0_variance=float(np.var(f0)),
        energy_variance=float(np.var(np.asarray(energy_all))),
        n_voiced_frames=int(len(f0)),
    )
