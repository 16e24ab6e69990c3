"""Plain-text configuration: one dotted key per line, `key = value`.

Values are typed by example from the defaults table; unknown keys are
rejected so typos fail loudly. The effective configuration can be rendered
back to canonical text, which is what checkpoints embed and hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .acoustic import AcousticConfig
from .adversarial import DiscriminatorConfig
from .audio import MelConfig
from .schedule import AnnealSpec, PhasePlan, build_phase_plan
from .vocoder import CondEncoderConfig, DistillConfig, StudentConfig, TeacherConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "audio.sample_rate": 16000,
    "audio.fft_size": 1024,
    "audio.hop": 200,
    "audio.win": 800,
    "audio.n_mels": 80,
    "audio.fmin": 0.0,
    "audio.fmax": 8000.0,
    "audio.log_floor": 1e-5,
    "data.n_utts": 50,
    "data.question_fraction": 0.25,
    "data.min_tokens": 4,
    "data.max_tokens": 8,
    "data.noise_std": 0.0,
    "acoustic.embed_dim": 128,
    "acoustic.encoder_channels": 128,
    "acoustic.encoder_kernel": 5,
    "acoustic.encoder_layers": 3,
    "acoustic.encoder_lstm_units": 128,
    "acoustic.decoder_lstm_units": 256,
    "acoustic.prenet_units": 128,
    "acoustic.prenet_dropout": 0.5,
    "acoustic.attention_units": 64,
    "acoustic.attention_filters": 32,
    "acoustic.attention_kernel": 31,
    "acoustic.latent_dim": 64,
    "acoustic.reference_channels": 64,
    "acoustic.reference_layers": 4,
    "acoustic.reference_lstm_units": 64,
    "acoustic.max_outputs_per_step": 5,
    "acoustic.max_decoder_steps": 200,
    "anneal.ramp_start": 500,
    "anneal.ramp_end": 3000,
    "anneal.period": 100,
    "gan.alpha": 0.02,
    "gan.window": 32,
    "gan.base_channels": 32,
    "train.batch_acoustic": 32,
    "train.batch_vocoder": 16,
    "train.lr": 1e-3,
    "train.gan_beta1": 0.5,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.999,
    "train.teacher_lr_decay": 0.95,
    "train.steps_per_epoch": 500,
    "train.polyak_decay": 0.999,
    "train.grad_clip": 5.0,
    "train.phase.ops5": 2000,
    "train.phase.ops4": 1000,
    "train.phase.ops3": 1000,
    "train.phase.ops2": 2000,
    "train.phase.gan": 2000,
    "train.teacher_steps": 4000,
    "train.teacher_snapshots": 3,
    "train.student_steps": 4000,
    "train.log_every": 25,
    "train.checkpoint_every": 1000,
    "train.chunk_frames": 8,
    "teacher.n_mixtures": 10,
    "teacher.residual_channels": 128,
    "teacher.gate_channels": 256,
    "teacher.skip_channels": 256,
    "teacher.kernel_size": 2,
    "teacher.blocks": 2,
    "teacher.layers_per_block": 10,
    "teacher.num_levels": 32768,
    "cond.lstm_units": 128,
    "cond.lstm_layers": 2,
    "cond.channels": 128,
    "student.flow_layers": (10, 10, 10, 30),
    "student.residual_channels": 64,
    "student.gate_channels": 64,
    "student.skip_channels": 64,
    "student.kernel_size": 2,
    "student.dilation_cycle": 10,
    "student.init_log_sigma": -1.5,
    "distill.n_mc": 4,
    "distill.spectral_weight": 1.0,
    "distill.spectral_fft": 512,
    "distill.spectral_hop": 128,
    "infer.latent_scheme": "train_centroid",
    "infer.intonation_tag": "statement",
    "infer.statement_utt": "",
    "infer.question_utt": "",
}


def _parse_scalar(raw: str) -> object:
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(raw: str) -> object:
    text = raw.strip()
    if "," in text:
        return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
    return _parse_scalar(text)


def _coerce(key: str, value: object, default: object) -> object:
    """Fit a parsed value to the type of its default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, bool):
            pass
        elif isinstance(value, int):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, tuple):
        if isinstance(value, tuple) and all(isinstance(v, int) for v in value):
            return value
        if isinstance(value, int):
            return (value,)
    elif isinstance(default, str):
        return str(value)
    raise ConfigError(f"bad value for {key}: {value!r} (expected {type(default).__name__})")


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Config:
    values: dict[str, object]
    source_text: str

    def get(self, key: str) -> object:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key: {key}") from None

    def canonical_text(self) -> str:
        lines = [f"{k} = {_render(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def with_overrides(self, overrides: list[str]) -> "Config":
        values = dict(self.values)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, parse_value(raw), DEFAULTS[key])
        return Config(values=values, source_text=self.source_text)


def parse_config_text(text: str) -> Config:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key: {key}")
        values[key] = _coerce(key, parse_value(raw), DEFAULTS[key])
    return Config(values=values, source_text=text)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> Config:
    if path is None:
        cfg = Config(values=dict(DEFAULTS), source_text="")
    else:
        cfg = parse_config_text(Path(path).read_text())
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


# ---------------------------------------------------------------------------
# builders for the component configuration dataclasses


def mel_config(cfg: Config) -> MelConfig:
    return MelConfig(
        sample_rate=cfg.get("audio.sample_rate"),
        fft_size=cfg.get("audio.fft_size"),
        hop=cfg.get("audio.hop"),
        win=cfg.get("audio.win"),
        n_mels=cfg.get("audio.n_mels"),
        fmin=cfg.get("audio.fmin"),
        fmax=cfg.get("audio.fmax"),
        log_floor=cfg.get("audio.log_floor"),
    )


def acoustic_config(cfg: Config, vocab_size: int) -> AcousticConfig:
    return AcousticConfig(
        vocab_size=vocab_size,
        n_mels=cfg.get("audio.n_mels"),
        max_outputs_per_step=cfg.get("acoustic.max_outputs_per_step"),
        latent_dim=cfg.get("acoustic.latent_dim"),
        embed_dim=cfg.get("acoustic.embed_dim"),
        encoder_channels=cfg.get("acoustic.encoder_channels"),
        encoder_kernel=cfg.get("acoustic.encoder_kernel"),
        encoder_layers=cfg.get("acoustic.encoder_layers"),
        encoder_lstm_units=cfg.get("acoustic.encoder_lstm_units"),
        decoder_lstm_units=cfg.get("acoustic.decoder_lstm_units"),
        prenet_units=cfg.get("acoustic.prenet_units"),
        prenet_dropout=cfg.get("acoustic.prenet_dropout"),
        attention_units=cfg.get("acoustic.attention_units"),
        attention_filters=cfg.get("acoustic.attention_filters"),
        attention_kernel=cfg.get("acoustic.attention_kernel"),
        reference_channels=cfg.get("acoustic.reference_channels"),
        reference_layers=cfg.get("acoustic.reference_layers"),
        reference_lstm_units=cfg.get("acoustic.reference_lstm_units"),
        log_floor=cfg.get("audio.log_floor"),
    )


def discriminator_config(cfg: Config) -> DiscriminatorConfig:
    return DiscriminatorConfig(
        n_mels=cfg.get("audio.n_mels"),
        window_width=cfg.get("gan.window"),
        base_channels=cfg.get("gan.base_channels"),
    )


def teacher_config(cfg: Config) -> TeacherConfig:
    return TeacherConfig(
        n_mixtures=cfg.get("teacher.n_mixtures"),
        residual_channels=cfg.get("teacher.residual_channels"),
        gate_channels=cfg.get("teacher.gate_channels"),
        skip_channels=cfg.get("teacher.skip_channels"),
        cond_channels=cfg.get("cond.channels"),
        kernel_size=cfg.get("teacher.kernel_size"),
        blocks=cfg.get("teacher.blocks"),
        layers_per_block=cfg.get("teacher.layers_per_block"),
    )


def student_config(cfg: Config) -> StudentConfig:
    return StudentConfig(
        flow_layers=cfg.get("student.flow_layers"),
        residual_channels=cfg.get("student.residual_channels"),
        gate_channels=cfg.get("student.gate_channels"),
        skip_channels=cfg.get("student.skip_channels"),
        cond_channels=cfg.get("cond.channels"),
        kernel_size=cfg.get("student.kernel_size"),
        dilation_cycle=cfg.get("student.dilation_cycle"),
        init_log_sigma=cfg.get("student.init_log_sigma"),
    )


def cond_encoder_config(cfg: Config) -> CondEncoderConfig:
    return CondEncoderConfig(
        n_mels=cfg.get("audio.n_mels"),
        latent_dim=cfg.get("acoustic.latent_dim"),
        lstm_units=cfg.get("cond.lstm_units"),
        lstm_layers=cfg.get("cond.lstm_layers"),
        out_channels=cfg.get("cond.channels"),
        hop=cfg.get("audio.hop"),
    )


def distill_config(cfg: Config) -> DistillConfig:
    return DistillConfig(
        n_mc=cfg.get("distill.n_mc"),
        spectral_weight=cfg.get("distill.spectral_weight"),
        spectral_fft=cfg.get("distill.spectral_fft"),
        spectral_hop=cfg.get("distill.spectral_hop"),
        log_floor=cfg.get("audio.log_floor"),
    )


def acoustic_phase_plan(cfg: Config) -> PhasePlan:
    return build_phase_plan(
        {
            "ops5": cfg.get("train.phase.ops5"),
            "ops4": cfg.get("train.phase.ops4"),
            "ops3": cfg.get("train.phase.ops3"),
            "ops2": cfg.get("train.phase.ops2"),
            "gan": cfg.get("train.phase.gan"),
        }
    )


def anneal_spec(cfg: Config) -> AnnealSpec:
    return AnnealSpec(
        ramp_start=cfg.get("anneal.ramp_start"),
        ramp_end=cfg.get("anneal.ramp_end"),
        period=cfg.get("anneal.period"),
    )
