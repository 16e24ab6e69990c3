"""Objective evaluation over a prepared corpus.

Per utterance: teacher-forced mel L1, attention diagonality, stop-gate
accuracy, and (depending on which checkpoints exist) teacher NLL or the
student's spectral distance on synthesized audio. Aggregates are plain means
of the per-utterance rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .acoustic import AcousticModel
from .audio import MelConfig, Waveform, wav_to_mel
from .config import Config, acoustic_phase_plan
from .data import Utterance
from .inference import LatentBank, LatentScheme, select_acoustic_latent, synthesize_utterance, vocoder_latent
from .vocoder import (
    ConditioningEncoder,
    StudentVocoder,
    TeacherVocoder,
    log_stft_magnitude,
    mol_log_prob,
)


def attention_diagonality(attention: np.ndarray) -> float:
    """Fraction of decoder steps whose attention peak does not move backward.

    attention: (steps, input_positions). A single step scores 1.0.
    """
    if attention.ndim != 2 or attention.shape[0] < 1:
        raise ValueError("attention must be (steps, positions) with at least one step")
    peaks = np.argmax(attention, axis=1)
    if len(peaks) == 1:
        return 1.0
    return float(np.mean(peaks[1:] >= peaks[:-1]))


def mel_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over the overlapping frame range."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mel channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    m = min(a.shape[0], b.shape[0])
    if m == 0:
        raise ValueError("no overlapping frames")
    return float(np.mean(np.abs(a[:m].astype(np.float64) - b[:m].astype(np.float64))))


def stop_accuracy(stop_logits: np.ndarray, stop_targets: np.ndarray) -> float:
    pred = stop_logits > 0.0  # sigmoid(x) > 0.5
    return float(np.mean(pred == (stop_targets > 0.5)))


@dataclass
class UtteranceReport:
    utt_id: str
    mel_l1: float
    attention_diagonality: float
    stop_accuracy: float
    teacher_nll: float | None = None
    student_spectral: float | None = None
    synth_mel_l1: float | None = None

    def row(self) -> dict:
        out = {
            "utt_id": self.utt_id,
            "mel_l1": self.mel_l1,
            "attention_diagonality": self.attention_diagonality,
            "stop_accuracy": self.stop_accuracy,
        }
        for key in ("teacher_nll", "student_spectral", "synth_mel_l1"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def teacher_forced_report(model: AcousticModel, utt: Utterance, outputs_per_step: int) -> UtteranceReport:
    """Deterministic teacher-forced metrics with the posterior-mean latent."""
    model.eval()
    with torch.no_grad():
        tokens = torch.from_numpy(utt.token_ids).unsqueeze(0)
        mel = torch.from_numpy(utt.mel).unsqueeze(0)
        lengths = torch.tensor([utt.n_frames])
        q = model.vae_encode(mel)
        res = model.teacher_forced(tokens, None, mel, lengths, q.mu, outputs_per_step)
        m = utt.n_frames
        l1 = mel_l1(res.pred[0, :m].numpy(), utt.mel)
        diag = attention_diagonality(res.attention[0].numpy())
        acc = stop_accuracy(res.stop_logits[0].numpy(), res.stop_targets[0].numpy())
    return UtteranceReport(utt_id=utt.utt_id, mel_l1=l1, attention_diagonality=diag, stop_accuracy=acc)


def utterance_teacher_nll(
    teacher: TeacherVocoder,
    encoder: ConditioningEncoder,
    utt: Utterance,
    z: np.ndarray,
    num_levels: int,
) -> float:
    with torch.no_grad():
        mel = torch.from_numpy(utt.mel).unsqueeze(0)
        zt = torch.from_numpy(np.asarray(z, dtype=np.float32)).unsqueeze(0)
        cond = encoder(mel, zt)
        audio = torch.from_numpy(utt.audio[: cond.shape[1]]).unsqueeze(0)
        params = teacher(audio, cond[:, : audio.shape[1]])
        return float(-mol_log_prob(params, audio, num_levels).mean())


def spectral_distance(pred: np.ndarray, ref: np.ndarray, fft: int, hop: int, log_floor: float) -> float:
    n = min(len(pred), len(ref))
    a = log_stft_magnitude(torch.from_numpy(pred[:n].astype(np.float32)).unsqueeze(0), fft, hop, log_floor)
    b = log_stft_magnitude(torch.from_numpy(ref[:n].astype(np.float32)).unsqueeze(0), fft, hop, log_floor)
    return float(torch.mean((a - b) ** 2))


def synthesis_report(
    model: AcousticModel,
    student: StudentVocoder,
    encoder: ConditioningEncoder,
    utt: Utterance,
    bank: LatentBank,
    scheme: LatentScheme,
    mel_cfg: MelConfig,
    outputs_per_step: int,
    max_steps: int,
    dcfg_fft: int,
    dcfg_hop: int,
    rng: np.random.Generator,
) -> tuple[float, float, Waveform]:
    """Synthesized-audio mel L1 and spectral distance against ground truth."""
    az = select_acoustic_latent(scheme, utt.intonation_tag, bank, rng)
    out = synthesize_utterance(
        model,
        student,
        encoder,
        utt.token_ids,
        az,
        vocoder_latent(bank),
        outputs_per_step,
        max_steps=max_steps,
    )
    wav = Waveform(samples=out.samples, sample_rate=mel_cfg.sample_rate)
    if len(out.samples) >= mel_cfg.win:
        synth_mel = wav_to_mel(wav, mel_cfg).frames
        l1 = mel_l1(synth_mel, utt.mel)
    else:
        l1 = float("inf")
    spec = spectral_distance(out.samples, utt.audio.astype(np.float64), dcfg_fft, dcfg_hop, mel_cfg.log_floor)
    return l1, spec, wav


def aggregate(rows: list[dict]) -> dict:
    """Mean of every numeric field over the rows where it appears."""
    keys = {k for row in rows for k in row if k != "utt_id" and isinstance(row[k], (int, float))}
    out = {"n_utterances": len(rows)}
    for k in sorted(keys):
        vals = [row[k] for row in rows if k in row]
        out[k] = float(np.mean(vals))
    return out


def write_report(eval_dir: Path, rows: list[dict], summary: dict) -> None:
    eval_dir.mkdir(parents=True, exist_ok=True)
    with open(eval_dir / "report.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (eval_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def final_outputs_per_step(cfg: Config) -> int:
    plan = acoustic_phase_plan(cfg)
    return plan.at_step(plan.total_steps - 1).outputs_per_step
