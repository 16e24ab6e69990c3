"""Inference-time latent selection and the full synthesis pipeline.

The acoustic latent comes from a configurable scheme (prior mean, prior
sample, training centroid, or a designated reference utterance per
intonation tag). The vocoder conditioning latent is always the training
centroid regardless of the acoustic scheme.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .acoustic import AcousticModel, InferenceResult
from .corpus import STATEMENT, YES_NO_QUESTION
from .vocoder import ConditioningEncoder, StudentVocoder

LATENT_SCHEMES = ("prior_sample", "prior_mean", "train_centroid", "reference_utterance")

STATEMENT_ENTRY = "statement_z"
QUESTION_ENTRY = "question_z"
CENTROID_ENTRY = "vocoder_centroid_z"


class LatentBankError(KeyError):
    pass


@dataclass(frozen=True)
class LatentScheme:
    kind: str
    reference_id: str | None = None

    def __post_init__(self):
        if self.kind not in LATENT_SCHEMES:
            raise ValueError(f"unknown latent scheme {self.kind!r}; expected one of {LATENT_SCHEMES}")
        if self.reference_id is not None and self.kind != "reference_utterance":
            raise ValueError("reference_id only makes sense for the reference_utterance scheme")


@dataclass
class LatentBank:
    """Named latent vectors plus the per-utterance posteriors they came from."""

    statement_z: np.ndarray | None
    question_z: np.ndarray | None
    vocoder_centroid_z: np.ndarray
    utterance_z: dict[str, np.ndarray]
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return int(self.vocoder_centroid_z.shape[0])


def compute_centroid(latents: Mapping[str, np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-utterance posterior means."""
    if not latents:
        raise ValueError("cannot take the centroid of an empty latent set")
    return np.mean(np.stack(list(latents.values())), axis=0)


def _first_with_tag(tags: Mapping[str, str], order: list[str], wanted: str) -> str | None:
    for utt_id in order:
        if tags[utt_id] == wanted:
            return utt_id
    return None


def build_latent_bank(
    latents: Mapping[str, np.ndarray],
    tags: Mapping[str, str],
    statement_id: str | None = None,
    question_id: str | None = None,
) -> LatentBank:
    """Assemble the bank from per-utterance posterior means.

    Reference entries use the designated utterance ids, defaulting to the
    first utterance of each tag in manifest order. A tag with no utterance
    leaves its entry unset.
    """
    if not latents:
        raise ValueError("latent set is empty")
    order = list(latents.keys())
    designated = {"statement": statement_id, "question": question_id}
    if statement_id is None:
        statement_id = _first_with_tag(tags, order, STATEMENT)
    if question_id is None:
        question_id = _first_with_tag(tags, order, YES_NO_QUESTION)
    for name, utt_id in (("statement", statement_id), ("question", question_id)):
        if utt_id is not None and utt_id not in latents:
            raise LatentBankError(f"{name} reference utterance {utt_id!r} has no latent")
    wanted = {"statement": STATEMENT, "question": YES_NO_QUESTION}
    for name, utt_id in designated.items():
        if utt_id is not None and tags.get(utt_id) != wanted[name]:
            raise LatentBankError(
                f"{name} reference utterance {utt_id!r} is tagged {tags.get(utt_id)!r}"
            )
    prov = {CENTROID_ENTRY: "centroid"}
    if statement_id is not None:
        prov[STATEMENT_ENTRY] = statement_id
    if question_id is not None:
        prov[QUESTION_ENTRY] = question_id
    return LatentBank(
        statement_z=None if statement_id is None else latents[statement_id].copy(),
        question_z=None if question_id is None else latents[question_id].copy(),
        vocoder_centroid_z=compute_centroid(latents),
        utterance_z={k: v.copy() for k, v in latents.items()},
        provenance=prov,
    )


def save_latent_bank(path: str | Path, bank: LatentBank) -> None:
    """Binary vectors plus a JSON sidecar describing where each came from."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {CENTROID_ENTRY: bank.vocoder_centroid_z}
    if bank.statement_z is not None:
        arrays[STATEMENT_ENTRY] = bank.statement_z
    if bank.question_z is not None:
        arrays[QUESTION_ENTRY] = bank.question_z
    for utt_id, vec in bank.utterance_z.items():
        arrays[f"utt:{utt_id}"] = vec
    np.savez(path, **arrays)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"provenance": bank.provenance}, indent=1, sort_keys=True) + "\n")


def load_latent_bank(path: str | Path) -> LatentBank:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing latent bank: {path}")
    with np.load(path) as z:
        utterance_z = {k[len("utt:"):]: z[k].copy() for k in z.files if k.startswith("utt:")}
        statement = z[STATEMENT_ENTRY].copy() if STATEMENT_ENTRY in z.files else None
        question = z[QUESTION_ENTRY].copy() if QUESTION_ENTRY in z.files else None
        centroid = z[CENTROID_ENTRY].copy()
    sidecar = path.with_suffix(".json")
    prov = {}
    if sidecar.exists():
        prov = json.loads(sidecar.read_text()).get("provenance", {})
    return LatentBank(
        statement_z=statement,
        question_z=question,
        vocoder_centroid_z=centroid,
        utterance_z=utterance_z,
        provenance=prov,
    )


def select_acoustic_latent(
    scheme: LatentScheme,
    tag: str,
    bank: LatentBank,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Latent for the acoustic model; deterministic except prior_sample."""
    dim = bank.latent_dim
    if scheme.kind == "prior_mean":
        return np.zeros(dim, dtype=np.float32)
    if scheme.kind == "prior_sample":
        if rng is None:
            raise ValueError("prior_sample needs an rng")
        return rng.standard_normal(dim).astype(np.float32)
    if scheme.kind == "train_centroid":
        return bank.vocoder_centroid_z.astype(np.float32)
    # reference_utterance: explicit id wins, otherwise route on the tag
    if scheme.reference_id is not None:
        try:
            return bank.utterance_z[scheme.reference_id].astype(np.float32)
        except KeyError:
            raise LatentBankError(f"no bank entry for utterance {scheme.reference_id!r}") from None
    entry = QUESTION_ENTRY if tag == YES_NO_QUESTION else STATEMENT_ENTRY
    vec = bank.question_z if tag == YES_NO_QUESTION else bank.statement_z
    if vec is None:
        raise LatentBankError(f"latent bank has no {entry} entry")
    return vec.astype(np.float32)


def vocoder_latent(bank: LatentBank) -> np.ndarray:
    """Always the training centroid in the default path."""
    return bank.vocoder_centroid_z.astype(np.float32)


# ---------------------------------------------------------------------------
# synthesis pipeline


@dataclass
class SynthesisOutput:
    samples: np.ndarray     # (frames * hop,) float in [-1, 1]
    mel: np.ndarray         # (frames, n_mels) predicted spectrogram
    attention: np.ndarray   # (decoder_steps, input_positions)
    stop_step: int | None
    reached_max_steps: bool
    acoustic_z: np.ndarray
    vocoder_z: np.ndarray


def infer_spectrogram(
    model: AcousticModel,
    token_ids: np.ndarray,
    acoustic_z: np.ndarray,
    outputs_per_step: int,
    max_steps: int,
) -> InferenceResult:
    model.eval()
    tokens = torch.from_numpy(np.asarray(token_ids, dtype=np.int64)).unsqueeze(0)
    z = torch.from_numpy(np.asarray(acoustic_z, dtype=np.float32)).unsqueeze(0)
    return model.infer(tokens, z, outputs_per_step, max_steps=max_steps)


def synthesize_utterance(
    model: AcousticModel,
    student: StudentVocoder,
    encoder: ConditioningEncoder,
    token_ids: np.ndarray,
    acoustic_z: np.ndarray,
    vocoder_z: np.ndarray,
    outputs_per_step: int,
    max_steps: int = 200,
    generator: torch.Generator | None = None,
) -> SynthesisOutput:
    """phonemes -> spectrogram -> conditioning -> student waveform.

    The waveform has exactly frames * hop samples.
    """
    result = infer_spectrogram(model, token_ids, acoustic_z, outputs_per_step, max_steps)
    zv = torch.from_numpy(np.asarray(vocoder_z, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        cond = encoder(result.mel.unsqueeze(0), zv)
        audio = student.synthesize(cond, generator)
    return SynthesisOutput(
        samples=audio[0].numpy().astype(np.float64),
        mel=result.mel.numpy(),
        attention=result.attention.numpy(),
        stop_step=result.stop_step,
        reached_max_steps=result.reached_max_steps,
        acoustic_z=np.asarray(acoustic_z, dtype=np.float32),
        vocoder_z=np.asarray(vocoder_z, dtype=np.float32),
    )
