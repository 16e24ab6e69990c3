"""Training loops for the three stages: acoustic model (with the adversarial
finetuning phase), autoregressive teacher vocoder, and flow student
distillation.

Every step reseeds both RNGs from (seed, step), so batch composition, crops,
dropout and sampling noise are pure functions of the step index. Two runs
with the same seed and config produce byte-identical checkpoints, and a
resumed run continues exactly where a fresh run would have been.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import schedule
from .acoustic import AcousticModel, acoustic_loss, reparameterize
from .adversarial import SpectrogramDiscriminator, d_hinge_loss, g_composite_loss
from .checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .config import (
    Config,
    acoustic_config,
    acoustic_phase_plan,
    anneal_spec,
    cond_encoder_config,
    discriminator_config,
    distill_config,
    student_config,
    teacher_config,
)
from .data import (
    Utterance,
    batch_indices,
    collate_acoustic,
    collate_vocoder,
    load_features,
    step_rng,
    torch_step_seed,
)
from .schedule import PolyakAverage, beta_kld, optimizer_phase_params, snapshot_rotation
from .vocoder import (
    ConditioningEncoder,
    StudentVocoder,
    TeacherVocoder,
    distill_loss,
    freeze_module,
    freeze_teacher,
    teacher_nll,
)

STREAM_BATCH = 0
STREAM_WINDOW = 1
STREAM_CHUNK = 2

LATENT_FILE = "utterance_latents.npz"


@dataclass(frozen=True)
class RunPaths:
    """Directory layout inside one run directory."""

    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def features(self) -> Path:
        return self.root / "features"

    @property
    def acoustic(self) -> Path:
        return self.root / "acoustic"

    @property
    def teacher(self) -> Path:
        return self.root / "teacher"

    @property
    def student(self) -> Path:
        return self.root / "student"

    @property
    def latents(self) -> Path:
        return self.root / "latents"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def synth(self) -> Path:
        return self.root / "synth"

    @property
    def eval(self) -> Path:
        return self.root / "eval"


def run_paths(run_dir: str | Path) -> RunPaths:
    return RunPaths(root=Path(run_dir))


class JsonlLogger:
    """One JSON object per line, flushed per write."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a")

    def log(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# optimizer state as named arrays


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            for key, val in opt.state.get(p, {}).items():
                name = f"{prefix}{gi}.{pi}.{key}"
                if torch.is_tensor(val):
                    arr = val.detach().cpu().numpy().copy()
                else:
                    arr = np.array(float(val), dtype=np.float64)
                out[name] = arr
    return out


def load_optimizer_arrays(
    opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str
) -> None:
    by_param: dict[tuple[int, int], dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        gi, pi, key = name[len(prefix):].split(".", 2)
        by_param.setdefault((int(gi), int(pi)), {})[key] = arr
    for (gi, pi), entries in by_param.items():
        p = opt.param_groups[gi]["params"][pi]
        state = {}
        for key, arr in entries.items():
            t = torch.from_numpy(np.ascontiguousarray(arr))
            state[key] = t.to(p.dtype) if key != "step" else t
        opt.state[p] = state


def polyak_arrays(polyak: PolyakAverage, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + n: t.detach().cpu().numpy().copy() for n, t in polyak.state().items()}


# ---------------------------------------------------------------------------
# shared helpers


def latest_checkpoint(ckpt_root: Path) -> Path | None:
    """Most advanced periodic checkpoint under a stage directory."""
    if not ckpt_root.exists():
        return None
    candidates = sorted(ckpt_root.glob("ckpt_step*"))
    return candidates[-1] if candidates else None


def require_features(paths: RunPaths) -> tuple[list[Utterance], dict[str, int]]:
    return load_features(paths.features)


def compute_utterance_latents(
    model: AcousticModel, utts: list[Utterance]
) -> dict[str, np.ndarray]:
    """Posterior mean of the reference encoder for every utterance."""
    model.eval()
    out = {}
    with torch.no_grad():
        for u in utts:
            mel = torch.from_numpy(u.mel).unsqueeze(0)
            q = model.vae_encode(mel)
            out[u.utt_id] = q.mu[0].numpy().copy()
    return out


def utterance_latents(cfg: Config, paths: RunPaths, utts: list[Utterance], vocab_size: int) -> dict[str, np.ndarray]:
    """Cached per-utterance latents, derived from the final acoustic model."""
    cache = paths.latents / LATENT_FILE
    if cache.exists():
        with np.load(cache) as z:
            return {k: z[k].copy() for k in z.files}
    model = AcousticModel(acoustic_config(cfg, vocab_size))
    ckpt = load_checkpoint(paths.acoustic / "ckpt_final")
    load_module_arrays(model, ckpt.arrays, prefix="model.")
    latents = compute_utterance_latents(model, utts)
    paths.latents.mkdir(parents=True, exist_ok=True)
    np.savez(cache, **latents)
    return latents


def _aligned_windows(pred, target, mel_lengths, width, rng):
    """Per-item window crops at a shared per-item random start.

    Crops stay inside the true (unpadded) frame range; the width shrinks to
    the shortest item in the batch if needed.
    """
    min_len = int(mel_lengths.min())
    w = min(width, min_len)
    reals, fakes = [], []
    for b in range(pred.shape[0]):
        hi = int(mel_lengths[b]) - w
        start = int(rng.integers(0, hi + 1)) if hi > 0 else 0
        reals.append(target[b, start : start + w])
        fakes.append(pred[b, start : start + w])
    return torch.stack(reals), torch.stack(fakes)


# ---------------------------------------------------------------------------
# stage 1: acoustic model


def train_acoustic(cfg: Config, run_dir: str | Path, seed: int) -> Path:
    paths = run_paths(run_dir)
    utts, vocab = require_features(paths)
    plan = acoustic_phase_plan(cfg)
    anneal = anneal_spec(cfg)
    log_floor = cfg.get("audio.log_floor")
    batch_size = cfg.get("train.batch_acoustic")
    base_lr = cfg.get("train.lr")
    beta2 = cfg.get("train.adam_beta2")
    alpha = cfg.get("gan.alpha")
    clip = cfg.get("train.grad_clip")
    window = cfg.get("gan.window")
    ckpt_every = cfg.get("train.checkpoint_every")
    log_every = cfg.get("train.log_every")
    config_text = cfg.canonical_text()

    torch.manual_seed(seed)
    model = AcousticModel(acoustic_config(cfg, vocab_size=len(vocab)))
    disc = SpectrogramDiscriminator(discriminator_config(cfg))
    opt_g = torch.optim.Adam(model.parameters(), lr=base_lr, betas=(cfg.get("train.adam_beta1"), beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=base_lr, betas=(cfg.get("train.gan_beta1"), beta2))

    start_step = 0
    resume = latest_checkpoint(paths.acoustic)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        load_module_arrays(model, ckpt.arrays, prefix="model.")
        load_module_arrays(disc, ckpt.arrays, prefix="disc.")
        load_optimizer_arrays(opt_g, ckpt.arrays, prefix="optg.")
        load_optimizer_arrays(opt_d, ckpt.arrays, prefix="optd.")
        start_step = ckpt.step

    def save(tag: str, completed: int):
        phase = plan.at_step(min(completed, plan.total_steps - 1))
        arrays = {}
        arrays.update(module_arrays(model, "model."))
        arrays.update(module_arrays(disc, "disc."))
        arrays.update(optimizer_arrays(opt_g, "optg."))
        arrays.update(optimizer_arrays(opt_d, "optd."))
        save_checkpoint(
            paths.acoustic / tag,
            arrays,
            step=completed,
            phase=phase.name,
            outputs_per_step=phase.outputs_per_step,
            config_text=config_text,
            extra={"seed": seed, "stage": "acoustic"},
        )

    with JsonlLogger(paths.logs / "acoustic.jsonl") as logger:
        prev_periodic = resume
        for step in range(start_step, plan.total_steps):
            phase = plan.at_step(step)
            ops = phase.outputs_per_step
            opt_params = optimizer_phase_params(
                phase.name, base_lr=base_lr, gan_beta1=cfg.get("train.gan_beta1")
            )
            opt_g.param_groups[0]["betas"] = (opt_params.beta1, beta2)

            torch.manual_seed(torch_step_seed(seed, step))
            rng = step_rng(seed, step, STREAM_BATCH)
            idx = batch_indices(rng, len(utts), batch_size)
            batch = collate_acoustic([utts[i] for i in idx], log_floor)

            model.train()
            q = model.vae_encode(batch.mel)
            z = reparameterize(q)
            res = model.teacher_forced(
                batch.tokens, batch.token_lengths, batch.mel, batch.mel_lengths, z, ops
            )
            beta = beta_kld(anneal, step)

            if phase.gan_enabled:
                disc.train()
                wrng = step_rng(seed, step, STREAM_WINDOW)
                real_w, fake_w = _aligned_windows(
                    res.pred, res.target, batch.mel_lengths, window, wrng
                )
                # discriminator update on detached generator output
                d_total = d_hinge_loss(disc(fake_w.detach()), disc(real_w))
                opt_d.zero_grad()
                d_total.backward()
                nn.utils.clip_grad_norm_(disc.parameters(), clip)
                opt_d.step()

                score_fake = disc(fake_w)
                with torch.no_grad():
                    score_real = disc(real_w)
                g_total, rep = g_composite_loss(
                    res.pred,
                    res.target,
                    score_fake,
                    score_real,
                    q,
                    alpha=alpha,
                    beta=beta,
                    frame_mask=res.frame_mask,
                )
                stop_bce = nn.functional.binary_cross_entropy_with_logits(
                    res.stop_logits, res.stop_targets
                )
                total = g_total + stop_bce
                record = {
                    "step": step,
                    "phase": phase.name,
                    "d_loss": float(d_total.detach()),
                    "g_l1": rep.g_l1,
                    "g_adv": rep.g_adv,
                    "g_kld": rep.g_kld,
                    "alpha": rep.alpha,
                    "beta": rep.beta,
                    "stop_bce": float(stop_bce.detach()),
                }
            else:
                total, rep = acoustic_loss(
                    res.pred,
                    res.target,
                    q,
                    beta,
                    stop_logits=res.stop_logits,
                    stop_targets=res.stop_targets,
                    frame_mask=res.frame_mask,
                )
                record = {
                    "step": step,
                    "phase": phase.name,
                    "d_loss": 0.0,
                    "g_l1": rep.l1,
                    "g_adv": 0.0,
                    "g_kld": rep.kld,
                    "alpha": 0.0,
                    "beta": rep.beta,
                    "stop_bce": rep.stop_bce,
                }

            opt_g.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), clip)
            opt_g.step()

            completed = step + 1
            if step % log_every == 0 or completed == plan.total_steps:
                logger.log(record)
            if ckpt_every and completed % ckpt_every == 0 and completed < plan.total_steps:
                tag = f"ckpt_step{completed:06d}"
                save(tag, completed)
                if prev_periodic is not None and prev_periodic.name != tag:
                    shutil.rmtree(prev_periodic, ignore_errors=True)
                prev_periodic = paths.acoustic / tag

    save("ckpt_final", plan.total_steps)
    return paths.acoustic / "ckpt_final"


# ---------------------------------------------------------------------------
# stage 2: teacher vocoder


def train_teacher(cfg: Config, run_dir: str | Path, seed: int) -> Path:
    paths = run_paths(run_dir)
    utts, vocab = require_features(paths)
    latents = utterance_latents(cfg, paths, utts, len(vocab))
    hop = cfg.get("audio.hop")
    chunk = cfg.get("train.chunk_frames")
    batch_size = cfg.get("train.batch_vocoder")
    base_lr = cfg.get("train.lr")
    beta2 = cfg.get("train.adam_beta2")
    clip = cfg.get("train.grad_clip")
    total_steps = cfg.get("train.teacher_steps")
    steps_per_epoch = cfg.get("train.steps_per_epoch")
    num_levels = cfg.get("teacher.num_levels")
    n_snapshots = cfg.get("train.teacher_snapshots")
    log_every = cfg.get("train.log_every")
    config_text = cfg.canonical_text()

    usable = [u for u in utts if u.n_frames >= chunk]
    if not usable:
        raise ValueError(f"no utterance has >= {chunk} frames")
    if total_steps < n_snapshots:
        raise ValueError(f"need at least {n_snapshots} steps to emit {n_snapshots} snapshots")

    torch.manual_seed(seed)
    encoder = ConditioningEncoder(cond_encoder_config(cfg))
    teacher = TeacherVocoder(teacher_config(cfg))
    params = list(teacher.parameters()) + list(encoder.parameters())
    opt = torch.optim.Adam(params, lr=base_lr, betas=(cfg.get("train.adam_beta1"), beta2))
    polyak = PolyakAverage(_vocoder_named(teacher, encoder), decay=cfg.get("train.polyak_decay"))

    boundaries = {(i + 1) * total_steps // n_snapshots: i for i in range(n_snapshots)}

    def save(tag: str, completed: int):
        arrays = {}
        arrays.update(module_arrays(teacher, "teacher."))
        arrays.update(module_arrays(encoder, "cond."))
        arrays.update(polyak_arrays(polyak, "polyak."))
        arrays.update(optimizer_arrays(opt, "opt."))
        save_checkpoint(
            paths.teacher / tag,
            arrays,
            step=completed,
            phase=schedule.TEACHER_PHASE,
            outputs_per_step=0,
            config_text=config_text,
            extra={"seed": seed, "stage": "teacher"},
        )

    with JsonlLogger(paths.logs / "teacher.jsonl") as logger:
        for step in range(total_steps):
            epoch = step // steps_per_epoch
            opt.param_groups[0]["lr"] = optimizer_phase_params(
                schedule.TEACHER_PHASE,
                base_lr=base_lr,
                teacher_lr_decay=cfg.get("train.teacher_lr_decay"),
                epoch=epoch,
            ).lr

            torch.manual_seed(torch_step_seed(seed, step))
            rng = step_rng(seed, step, STREAM_BATCH)
            idx = batch_indices(rng, len(usable), batch_size)
            crng = step_rng(seed, step, STREAM_CHUNK)
            batch = collate_vocoder([usable[i] for i in idx], latents, chunk, hop, crng)

            teacher.train()
            encoder.train()
            cond = encoder(batch.mel, batch.z)
            params_out = teacher(batch.audio, cond)
            loss = teacher_nll(params_out, batch.audio, num_levels)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, clip)
            opt.step()
            polyak.update(_vocoder_named(teacher, encoder))

            completed = step + 1
            if step % log_every == 0 or completed == total_steps:
                logger.log(
                    {
                        "step": step,
                        "phase": schedule.TEACHER_PHASE,
                        "nll": float(loss.detach()),
                        "lr": opt.param_groups[0]["lr"],
                        "epoch": epoch,
                    }
                )
            if completed in boundaries:
                save(f"ckpt_snapshot{boundaries[completed]}", completed)

    save("ckpt_final", total_steps)
    return paths.teacher / "ckpt_final"


def _vocoder_named(teacher: TeacherVocoder, encoder: ConditioningEncoder) -> dict[str, torch.Tensor]:
    named = {f"teacher.{n}": p for n, p in teacher.named_parameters()}
    named.update({f"cond.{n}": p for n, p in encoder.named_parameters()})
    return named


def _load_polyak_into(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    """Load the Polyak shadow for a module, falling back to raw weights for
    anything the average does not cover."""
    raw = {n: a for n, a in arrays.items() if n.startswith(prefix)}
    shadow = {
        n[len("polyak."):]: a for n, a in arrays.items() if n.startswith("polyak." + prefix)
    }
    merged = dict(raw)
    merged.update(shadow)
    load_module_arrays(module, merged, prefix=prefix)


def load_teacher(
    cfg: Config, ckpt_path: str | Path, use_polyak: bool = True
) -> tuple[TeacherVocoder, ConditioningEncoder]:
    ckpt = load_checkpoint(ckpt_path)
    teacher = TeacherVocoder(teacher_config(cfg))
    encoder = ConditioningEncoder(cond_encoder_config(cfg))
    if use_polyak:
        _load_polyak_into(teacher, ckpt.arrays, "teacher.")
        _load_polyak_into(encoder, ckpt.arrays, "cond.")
    else:
        load_module_arrays(teacher, ckpt.arrays, prefix="teacher.")
        load_module_arrays(encoder, ckpt.arrays, prefix="cond.")
    return teacher, encoder


# ---------------------------------------------------------------------------
# stage 3: student distillation


def distill_student(cfg: Config, run_dir: str | Path, seed: int) -> Path:
    paths = run_paths(run_dir)
    utts, vocab = require_features(paths)
    latents = utterance_latents(cfg, paths, utts, len(vocab))
    hop = cfg.get("audio.hop")
    chunk = cfg.get("train.chunk_frames")
    batch_size = cfg.get("train.batch_vocoder")
    base_lr = cfg.get("train.lr")
    beta2 = cfg.get("train.adam_beta2")
    clip = cfg.get("train.grad_clip")
    total_steps = cfg.get("train.student_steps")
    n_snapshots = cfg.get("train.teacher_snapshots")
    log_every = cfg.get("train.log_every")
    dcfg = distill_config(cfg)
    config_text = cfg.canonical_text()
    if chunk * hop < dcfg.spectral_fft:
        raise ValueError(
            f"chunk of {chunk} frames gives {chunk * hop} samples, "
            f"shorter than the {dcfg.spectral_fft}-point analysis window"
        )

    snapshot_tags = [f"ckpt_snapshot{i}" for i in range(n_snapshots)]
    for tag in snapshot_tags:
        if not (paths.teacher / tag).exists():
            raise FileNotFoundError(f"missing teacher snapshot {paths.teacher / tag}")

    usable = [u for u in utts if u.n_frames >= chunk]
    if not usable:
        raise ValueError(f"no utterance has >= {chunk} frames")

    torch.manual_seed(seed)
    student = StudentVocoder(student_config(cfg))
    opt = torch.optim.Adam(
        student.parameters(),
        lr=optimizer_phase_params(schedule.STUDENT_PHASE, base_lr=base_lr).lr,
        betas=(cfg.get("train.adam_beta1"), beta2),
    )
    polyak = PolyakAverage(
        {f"student.{n}": p for n, p in student.named_parameters()},
        decay=cfg.get("train.polyak_decay"),
    )

    # conditioning comes from the final teacher run and stays fixed; only the
    # teacher density rotates across snapshots
    _, encoder = load_teacher(cfg, paths.teacher / "ckpt_final")
    freeze_module(encoder)
    active_tag = None
    teacher = None

    def save(tag: str, completed: int):
        arrays = {}
        arrays.update(module_arrays(student, "student."))
        arrays.update(polyak_arrays(polyak, "polyak."))
        arrays.update(optimizer_arrays(opt, "opt."))
        save_checkpoint(
            paths.student / tag,
            arrays,
            step=completed,
            phase=schedule.STUDENT_PHASE,
            outputs_per_step=0,
            config_text=config_text,
            extra={"seed": seed, "stage": "student"},
        )

    with JsonlLogger(paths.logs / "student.jsonl") as logger:
        for step in range(total_steps):
            tag = snapshot_rotation(snapshot_tags, step, total_steps)
            if tag != active_tag:
                teacher, _ = load_teacher(cfg, paths.teacher / tag)
                freeze_teacher(teacher)
                active_tag = tag

            torch.manual_seed(torch_step_seed(seed, step))
            rng = step_rng(seed, step, STREAM_BATCH)
            idx = batch_indices(rng, len(usable), batch_size)
            crng = step_rng(seed, step, STREAM_CHUNK)
            batch = collate_vocoder([usable[i] for i in idx], latents, chunk, hop, crng)

            student.train()
            with torch.no_grad():
                cond = encoder(batch.mel, batch.z)
            loss, rep = distill_loss(student, teacher, cond, batch.audio, dcfg)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(student.parameters(), clip)
            opt.step()
            polyak.update({f"student.{n}": p for n, p in student.named_parameters()})

            completed = step + 1
            if step % log_every == 0 or completed == total_steps:
                logger.log(
                    {
                        "step": step,
                        "phase": schedule.STUDENT_PHASE,
                        "kl_term": rep.kl_term,
                        "spectral": rep.spectral,
                        "total": rep.total,
                        "snapshot": tag,
                    }
                )

    save("ckpt_final", total_steps)
    return paths.student / "ckpt_final"


def load_student(cfg: Config, ckpt_path: str | Path, use_polyak: bool = True) -> StudentVocoder:
    ckpt = load_checkpoint(ckpt_path)
    student = StudentVocoder(student_config(cfg))
    if use_polyak:
        _load_polyak_into(student, ckpt.arrays, "student.")
    else:
        load_module_arrays(student, ckpt.arrays, prefix="student.")
    return student


def load_acoustic(cfg: Config, ckpt_path: str | Path, vocab_size: int) -> AcousticModel:
    ckpt = load_checkpoint(ckpt_path)
    model = AcousticModel(acoustic_config(cfg, vocab_size))
    load_module_arrays(model, ckpt.arrays, prefix="model.")
    model.eval()
    return model
