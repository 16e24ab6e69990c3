"""Command-line surface: data preparation, the three training stages, latent
bank construction, synthesis, evaluation, and the self-check suite.

Failures print one machine-parsable JSON line to stderr. Missing artifacts
and invalid configuration exit with code 2; unexpected errors with 1. A lock
file guards each run directory against concurrent writers.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import evaluate as ev
from . import training
from .audio import AudioFormatError, Waveform, save_wav
from .checkpoint import CheckpointError
from .config import Config, ConfigError, load_config, mel_config
from .corpus import generate_toy_corpus, read_manifest
from .data import encode_tokens, load_features, prepare_features, step_rng
from .inference import (
    LatentBankError,
    LatentScheme,
    build_latent_bank,
    load_latent_bank,
    save_latent_bank,
    select_acoustic_latent,
    synthesize_utterance,
    vocoder_latent,
)
from .vocoder import freeze_module

LOCK_NAME = ".lock"
BANK_NAME = "bank.npz"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING = 2

_EXPECTED = (
    FileNotFoundError,
    CheckpointError,
    ConfigError,
    LatentBankError,
    AudioFormatError,
    ValueError,
    KeyError,
)


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock on a run directory via an O_EXCL sentinel file."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory {run_dir} is locked by {lock_path}; "
            "remove the file if no other command is running"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock_path)


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _atomic_save_wav(path: Path, wav: Waveform) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".wav")
    os.close(fd)
    try:
        save_wav(tmp, wav)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# shared plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="configuration file (key = value lines)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-dir", type=Path, required=True, help="directory holding all run artifacts")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _load(args) -> Config:
    return load_config(args.config, args.override)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {hint}: {path}")
    return path


def _load_bank_or_build(cfg: Config, paths: training.RunPaths):
    bank_path = paths.latents / BANK_NAME
    if bank_path.exists():
        return load_latent_bank(bank_path)
    utts, vocab = load_features(paths.features)
    latents = training.utterance_latents(cfg, paths, utts, len(vocab))
    tags = {u.utt_id: u.intonation_tag for u in utts}
    return build_latent_bank(
        latents,
        tags,
        statement_id=cfg.get("infer.statement_utt") or None,
        question_id=cfg.get("infer.question_utt") or None,
    )


def _synthesis_stack(cfg: Config, paths: training.RunPaths):
    utts, vocab = load_features(paths.features)
    model = training.load_acoustic(cfg, _require(paths.acoustic / "ckpt_final", "acoustic checkpoint"), len(vocab))
    _require(paths.teacher / "ckpt_final", "teacher checkpoint")
    _, encoder = training.load_teacher(cfg, paths.teacher / "ckpt_final")
    freeze_module(encoder)
    student = training.load_student(cfg, _require(paths.student / "ckpt_final", "student checkpoint"))
    student.eval()
    bank = _load_bank_or_build(cfg, paths)
    return utts, vocab, model, encoder, student, bank


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        if args.manifest is not None:
            records = read_manifest(_require(args.manifest, "manifest"))
        else:
            records = generate_toy_corpus(
                paths.corpus,
                n_utts=cfg.get("data.n_utts"),
                seed=args.seed,
                cfg=mel_config(cfg),
                question_fraction=cfg.get("data.question_fraction"),
                min_tokens=cfg.get("data.min_tokens"),
                max_tokens=cfg.get("data.max_tokens"),
                noise_std=cfg.get("data.noise_std"),
            )
        utts = prepare_features(records, mel_config(cfg), paths.features)
    print(json.dumps({"utterances": len(utts), "features": str(paths.features)}))
    return EXIT_OK


def cmd_train_acoustic(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        ckpt = training.train_acoustic(cfg, paths.root, args.seed)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        ckpt = training.train_teacher(cfg, paths.root, args.seed)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_distill_student(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        ckpt = training.distill_student(cfg, paths.root, args.seed)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_build_latent_bank(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        utts, vocab = load_features(paths.features)
        _require(paths.acoustic / "ckpt_final", "acoustic checkpoint")
        latents = training.utterance_latents(cfg, paths, utts, len(vocab))
        tags = {u.utt_id: u.intonation_tag for u in utts}
        bank = build_latent_bank(
            latents,
            tags,
            statement_id=cfg.get("infer.statement_utt") or None,
            question_id=cfg.get("infer.question_utt") or None,
        )
        save_latent_bank(paths.latents / BANK_NAME, bank)
    print(json.dumps({"bank": str(paths.latents / BANK_NAME), "entries": sorted(bank.provenance)}))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    tokens = tuple(args.phonemes.split())
    if not tokens:
        raise ValueError("no phonemes given")
    tag = args.tag or cfg.get("infer.intonation_tag")
    scheme = LatentScheme(
        kind=args.scheme or cfg.get("infer.latent_scheme"),
        reference_id=args.reference_id,
    )
    with run_lock(paths.root):
        _, vocab, model, encoder, student, bank = _synthesis_stack(cfg, paths)
        torch.manual_seed(args.seed)
        rng = np.random.default_rng(args.seed)
        token_ids = encode_tokens(tokens, vocab)
        az = select_acoustic_latent(scheme, tag, bank, rng)
        out = synthesize_utterance(
            model,
            student,
            encoder,
            token_ids,
            az,
            vocoder_latent(bank),
            ev.final_outputs_per_step(cfg),
            max_steps=cfg.get("acoustic.max_decoder_steps"),
        )
        out_path = args.out or (paths.synth / "synth.wav")
        wav = Waveform(samples=out.samples, sample_rate=cfg.get("audio.sample_rate"))
        _atomic_save_wav(out_path, wav)
        diag = {
            "phonemes": list(tokens),
            "tag": tag,
            "scheme": scheme.kind,
            "frames": int(out.mel.shape[0]),
            "samples": int(len(out.samples)),
            "stop_step": out.stop_step,
            "reached_max_steps": out.reached_max_steps,
            "attention": [[round(float(v), 6) for v in row] for row in out.attention],
        }
        _atomic_write_text(Path(str(out_path) + ".json"), json.dumps(diag, sort_keys=True) + "\n")
    print(json.dumps({"wav": str(out_path), "samples": int(len(out.samples))}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    paths = training.run_paths(args.run_dir)
    with run_lock(paths.root):
        utts, vocab = load_features(paths.features)
        model = training.load_acoustic(
            cfg, _require(paths.acoustic / "ckpt_final", "acoustic checkpoint"), len(vocab)
        )
        ops = ev.final_outputs_per_step(cfg)
        max_steps = cfg.get("acoustic.max_decoder_steps")
        mcfg = mel_config(cfg)
        have_teacher = (paths.teacher / "ckpt_final").exists()
        have_student = (paths.student / "ckpt_final").exists()
        reports = [ev.teacher_forced_report(model, u, ops) for u in utts]
        if have_student:
            _, encoder = training.load_teacher(cfg, paths.teacher / "ckpt_final")
            freeze_module(encoder)
            student = training.load_student(cfg, paths.student / "ckpt_final")
            student.eval()
            bank = _load_bank_or_build(cfg, paths)
            scheme = LatentScheme(kind=cfg.get("infer.latent_scheme"))
            for i, (u, rep) in enumerate(zip(utts, reports)):
                rng = step_rng(args.seed, i, 3)
                torch.manual_seed(training.torch_step_seed(args.seed, i))
                l1, spec, _ = ev.synthesis_report(
                    model, student, encoder, u, bank, scheme, mcfg, ops, max_steps,
                    cfg.get("distill.spectral_fft"), cfg.get("distill.spectral_hop"), rng,
                )
                rep.synth_mel_l1 = l1
                rep.student_spectral = spec
        elif have_teacher:
            teacher, encoder = training.load_teacher(cfg, paths.teacher / "ckpt_final")
            freeze_module(teacher)
            freeze_module(encoder)
            latents = training.utterance_latents(cfg, paths, utts, len(vocab))
            for u, rep in zip(utts, reports):
                rep.teacher_nll = ev.utterance_teacher_nll(
                    teacher, encoder, u, latents[u.utt_id], cfg.get("teacher.num_levels")
                )
        rows = [r.row() for r in reports]
        summary = ev.aggregate(rows)
        ev.write_report(paths.eval, rows, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    """Run the fast invariant suite (everything except long end-to-end runs)."""
    for root in (Path.cwd(), Path(__file__).resolve().parents[2]):
        tests = root / "tests"
        if tests.is_dir():
            proc = subprocess.run(
                [sys.executable, "-m", "pytest", "-q", "-m", "not e2e", str(tests)],
                cwd=root,
            )
            return proc.returncode
    raise FileNotFoundError("missing tests directory: run selfcheck from a source checkout")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desktts",
        description="Train and run the expressive speech synthesis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="generate the toy corpus (or ingest a manifest) and cache features")
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None, help="existing corpus manifest instead of the toy corpus")
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train-acoustic", help="train the acoustic model through the full phase plan")
    _add_common(p)
    p.set_defaults(fn=cmd_train_acoustic)

    p = sub.add_parser("train-teacher", help="train the autoregressive teacher vocoder")
    _add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill-student", help="distill the flow student from teacher snapshots")
    _add_common(p)
    p.set_defaults(fn=cmd_distill_student)

    p = sub.add_parser("build-latent-bank", help="extract reference latents and the training centroid")
    _add_common(p)
    p.set_defaults(fn=cmd_build_latent_bank)

    p = sub.add_parser("synthesize", help="synthesize a waveform from a phoneme sequence")
    _add_common(p)
    p.add_argument("--phonemes", required=True, help="space-separated phoneme tokens")
    p.add_argument("--tag", default=None, help="intonation tag (statement or yes_no_question)")
    p.add_argument("--scheme", default=None, help="acoustic latent scheme override")
    p.add_argument("--reference-id", default=None, help="explicit reference utterance id")
    p.add_argument("--out", type=Path, default=None, help="output wav path")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("evaluate", help="objective metrics over the prepared corpus")
    _add_common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="run the fast test suite")
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LockError as e:
        print(json.dumps({"error": str(e), "type": "LockError"}), file=sys.stderr)
        return EXIT_MISSING
    except _EXPECTED as e:
        msg = str(e) if not isinstance(e, KeyError) else e.args[0]
        print(json.dumps({"error": msg, "type": type(e).__name__}), file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # pragma: no cover - defensive
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
