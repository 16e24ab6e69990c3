import pytest
import torch

from desktts.config import load_config, mel_config
from desktts.corpus import generate_toy_corpus, read_manifest
from desktts.data import load_features, prepare_features
from desktts.training import distill_student, run_paths, train_acoustic, train_teacher

torch.set_num_threads(1)

# Shrunk-to-seconds pipeline settings shared by the training, inference and
# CLI tests. Sizes are the smallest that keep every code path exercised.
TINY_OVERRIDES = [
    "acoustic.embed_dim=32",
    "acoustic.encoder_channels=16",
    "acoustic.encoder_lstm_units=16",
    "acoustic.decoder_lstm_units=32",
    "acoustic.prenet_units=16",
    "acoustic.attention_units=16",
    "acoustic.attention_filters=4",
    "acoustic.attention_kernel=7",
    "acoustic.reference_channels=8",
    "acoustic.reference_lstm_units=8",
    "acoustic.latent_dim=8",
    "train.phase.ops5=4",
    "train.phase.ops4=3",
    "train.phase.ops3=3",
    "train.phase.ops2=4",
    "train.phase.gan=4",
    "train.batch_acoustic=3",
    "train.batch_vocoder=2",
    "train.checkpoint_every=6",
    "train.log_every=2",
    "train.teacher_steps=6",
    "train.student_steps=6",
    "train.steps_per_epoch=4",
    "train.chunk_frames=4",
    "anneal.ramp_start=2",
    "anneal.ramp_end=8",
    "anneal.period=3",
    "gan.base_channels=4",
    "gan.window=8",
    "teacher.residual_channels=8",
    "teacher.gate_channels=16",
    "teacher.skip_channels=16",
    "teacher.n_mixtures=3",
    "teacher.blocks=1",
    "teacher.layers_per_block=3",
    "cond.channels=8",
    "cond.lstm_units=8",
    "cond.lstm_layers=1",
    "student.flow_layers=2,2",
    "student.residual_channels=8",
    "student.gate_channels=8",
    "student.skip_channels=8",
    "distill.n_mc=1",
    "distill.spectral_fft=256",
    "distill.spectral_hop=64",
    "data.n_utts=6",
]


def tiny_config(extra=()):
    return load_config(None, TINY_OVERRIDES + list(extra))


def prepare_tiny_run(run_dir, cfg, seed=0):
    """Generate the toy corpus and features for ``cfg`` under ``run_dir``."""
    paths = run_paths(run_dir)
    mc = mel_config(cfg)
    generate_toy_corpus(
        paths.corpus,
        n_utts=int(cfg.get("data.n_utts")),
        seed=seed,
        cfg=mc,
        question_fraction=float(cfg.get("data.question_fraction")),
        min_tokens=int(cfg.get("data.min_tokens")),
        max_tokens=int(cfg.get("data.max_tokens")),
    )
    records = read_manifest(paths.corpus / "manifest.tsv")
    prepare_features(records, mc, paths.features)
    return paths


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def prepared_run(tmp_path_factory, tiny_cfg):
    """A run directory with a generated corpus and extracted features."""
    run_dir = tmp_path_factory.mktemp("prepared_run")
    prepare_tiny_run(run_dir, tiny_cfg)
    return run_dir


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, tiny_cfg):
    """A run directory with a full micro training pipeline (acoustic,
    teacher, student). Shared read-only by inference, evaluate and CLI
    tests."""
    run_dir = tmp_path_factory.mktemp("trained_run")
    prepare_tiny_run(run_dir, tiny_cfg)
    train_acoustic(tiny_cfg, run_dir, seed=0)
    train_teacher(tiny_cfg, run_dir, seed=0)
    distill_student(tiny_cfg, run_dir, seed=0)
    return run_dir


@pytest.fixture
def tiny_utts(prepared_run):
    utts, vocab = load_features(run_paths(prepared_run).features)
    return utts, vocab
