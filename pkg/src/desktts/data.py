"""Feature preparation and batching.

Features are cached one .npz per utterance (token ids, log-mel frames, raw
audio) next to a JSON vocabulary. Batch composition is a pure function of
(seed, step, stream) so interrupted runs can resume on the exact batch they
would have seen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import MelConfig, load_wav, wav_to_mel
from .corpus import UtteranceRecord

VOCAB_FILE = "vocab.json"
INDEX_FILE = "features.json"


@dataclass
class Utterance:
    utt_id: str
    token_ids: np.ndarray
    mel: np.ndarray
    audio: np.ndarray
    intonation_tag: str

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def build_vocab(records: list[UtteranceRecord]) -> dict[str, int]:
    tokens = sorted({t for r in records for t in r.phonemes})
    return {t: i for i, t in enumerate(tokens)}


def save_vocab(path: Path, vocab: dict[str, int]) -> None:
    path.write_text(json.dumps(vocab, indent=1, sort_keys=True) + "\n")


def load_vocab(path: Path) -> dict[str, int]:
    return {k: int(v) for k, v in json.loads(path.read_text()).items()}


def encode_tokens(tokens: tuple[str, ...], vocab: dict[str, int]) -> np.ndarray:
    try:
        return np.array([vocab[t] for t in tokens], dtype=np.int64)
    except KeyError as e:
        raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None


def prepare_features(
    records: list[UtteranceRecord], mel_cfg: MelConfig, out_dir: str | Path
) -> list[Utterance]:
    """Compute and cache features for every manifest entry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(records)
    save_vocab(out / VOCAB_FILE, vocab)
    utts = []
    for rec in records:
        wav = load_wav(rec.audio_path)
        mel = wav_to_mel(wav, mel_cfg).frames.astype(np.float32)
        utt = Utterance(
            utt_id=rec.utt_id,
            token_ids=encode_tokens(rec.phonemes, vocab),
            mel=mel,
            audio=wav.samples.astype(np.float32),
            intonation_tag=rec.intonation_tag,
        )
        np.savez(
            out / f"{rec.utt_id}.npz",
            token_ids=utt.token_ids,
            mel=utt.mel,
            audio=utt.audio,
            intonation_tag=np.array(rec.intonation_tag),
        )
        utts.append(utt)
    index = [r.utt_id for r in records]
    (out / INDEX_FILE).write_text(json.dumps(index, indent=1) + "\n")
    return utts


def load_features(feature_dir: str | Path) -> tuple[list[Utterance], dict[str, int]]:
    root = Path(feature_dir)
    if not (root / INDEX_FILE).exists():
        raise FileNotFoundError(f"no feature index at {root / INDEX_FILE}; run prepare-data first")
    vocab = load_vocab(root / VOCAB_FILE)
    utts = []
    for utt_id in json.loads((root / INDEX_FILE).read_text()):
        with np.load(root / f"{utt_id}.npz") as z:
            utts.append(
                Utterance(
                    utt_id=utt_id,
                    token_ids=z["token_ids"],
                    mel=z["mel"],
                    audio=z["audio"],
                    intonation_tag=str(z["intonation_tag"]),
                )
            )
    return utts, vocab


# ---------------------------------------------------------------------------
# deterministic batching


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Fresh generator for one (seed, step, stream) triple."""
    return np.random.default_rng([seed, step, stream])


def torch_step_seed(seed: int, step: int) -> int:
    """Stable 63-bit seed for torch RNG at one training step."""
    return (seed * 2654435761 + step * 97531) % (2 ** 63)


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Uniform batch of utterance indices; without replacement when possible."""
    if n < 1:
        raise ValueError("empty dataset")
    if batch_size <= n:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.integers(0, n, size=batch_size)


@dataclass
class AcousticBatch:
    tokens: torch.Tensor         # (B, Lmax) int64
    token_lengths: torch.Tensor  # (B,) int64
    mel: torch.Tensor            # (B, Mmax, n_mels)
    mel_lengths: torch.Tensor    # (B,) int64
    utt_ids: list[str]


def collate_acoustic(utts: list[Utterance], log_floor: float) -> AcousticBatch:
    """Pad tokens with 0 and mel frames with log-floor silence."""
    order = sorted(range(len(utts)), key=lambda i: len(utts[i].token_ids), reverse=True)
    utts = [utts[i] for i in order]
    L = max(len(u.token_ids) for u in utts)
    M = max(u.n_frames for u in utts)
    n_mels = utts[0].mel.shape[1]
    tokens = np.zeros((len(utts), L), dtype=np.int64)
    mel = np.full((len(utts), M, n_mels), math.log(log_floor), dtype=np.float32)
    tok_len = np.zeros(len(utts), dtype=np.int64)
    mel_len = np.zeros(len(utts), dtype=np.int64)
    for i, u in enumerate(utts):
        tokens[i, : len(u.token_ids)] = u.token_ids
        mel[i, : u.n_frames] = u.mel
        tok_len[i] = len(u.token_ids)
        mel_len[i] = u.n_frames
    return AcousticBatch(
        tokens=torch.from_numpy(tokens),
        token_lengths=torch.from_numpy(tok_len),
        mel=torch.from_numpy(mel),
        mel_lengths=torch.from_numpy(mel_len),
        utt_ids=[u.utt_id for u in utts],
    )


@dataclass
class VocoderBatch:
    mel: torch.Tensor    # (B, F, n_mels) chunk of frames
    audio: torch.Tensor  # (B, F * hop)
    z: torch.Tensor      # (B, latent_dim) utterance latents
    utt_ids: list[str]


def collate_vocoder(
    utts: list[Utterance],
    latents: dict[str, np.ndarray],
    chunk_frames: int,
    hop: int,
    rng: np.random.Generator,
) -> VocoderBatch:
    """Crop a random hop-aligned chunk from each utterance.

    Utterances shorter than the chunk cannot appear here; the caller filters
    them out up front.
    """
    mels, audios, zs = [], [], []
    for u in utts:
        if u.n_frames < chunk_frames:
            raise ValueError(f"{u.utt_id}: {u.n_frames} frames < chunk {chunk_frames}")
        f0 = int(rng.integers(0, u.n_frames - chunk_frames + 1))
        mels.append(u.mel[f0 : f0 + chunk_frames])
        audios.append(u.audio[f0 * hop : (f0 + chunk_frames) * hop])
        zs.append(latents[u.utt_id])
    return VocoderBatch(
        mel=torch.from_numpy(np.stack(mels)),
        audio=torch.from_numpy(np.stack(audios)),
        z=torch.from_numpy(np.stack(zs).astype(np.float32)),
        utt_ids=[u.utt_id for u in utts],
    )
