"""Flat key=value run configuration with strict validation.

One schema covers every tunable across the pipeline.  Resolution order is
defaults, then the config file, then command-line overrides; unknown keys
are an error rather than a silent ignore, and every run writes the fully
resolved configuration next to its outputs so results are reproducible
from the artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .nets import CMPEM, CMPEML2
from .training import MINING_MODES


class ConfigError(ValueError):
    pass


VARIANT_CHOICES = (CMPEM, CMPEML2, "singleem")


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = CMPEM

    feature_dim: int = 64
    hidden_dim: int = 128
    embed_dim: int = 32

    train_speakers: int = 200
    eval_speakers: int = 100
    within_speaker_noise: float = 0.3

    episode_speakers: int = 5
    max_card: int = 3
    examples_per_set: int = 1

    lr: float = 0.0003
    triplet_margin: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    episodes_train: int = 20000
    episodes_val: int = 500
    episodes_test: int = 2000
    val_every: int = 500
    negative_mining: str = "all_mean"

    frame_duration: float = 0.1
    segment_s: float = 1.0
    long_turn_s: float = 3.3

    n_streams: int = 10
    stream_speakers: int = 5
    stream_duration_s: float = 1800.0
    overlap_fraction: float = 0.19
    turn_min_s: float = 1.0
    turn_max_s: float = 8.0
    overlap_min_s: float = 0.5
    overlap_max_s: float = 2.0
    allow_triple_overlap: bool = False

    detector_false_alarm_rate: float = 0.0
    detector_miss_rate: float = 0.0
    boundary_jitter_s: float = 0.0
    missed_change_rate: float = 0.0

    ap_damping: float = 0.9
    ap_max_iter: int = 200
    ap_convergence_iter: int = 15
    ap_preference: str = "median"

    figures: bool = True
    figure_dpi: int = 120

    gradcheck_step: float = 1e-5
    gradcheck_tolerance: float = 1e-4


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def load_config_file(path):
    """Parse a UTF-8 key=value file; '#' starts a comment, blank lines skipped."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            values[key] = _parse_value(key, raw)
    return values


def _validate(cfg):
    checks = [
        (cfg.variant in VARIANT_CHOICES, f"variant must be one of {VARIANT_CHOICES}, got {cfg.variant!r}"),
        (cfg.negative_mining in MINING_MODES, f"negative_mining must be one of {MINING_MODES}"),
        (cfg.lr > 0, f"lr must be positive, got {cfg.lr}"),
        (cfg.triplet_margin > 0, "triplet_margin must be positive"),
        (0 <= cfg.adam_beta1 < 1 and 0 <= cfg.adam_beta2 < 1, "adam betas must be in [0, 1)"),
        (cfg.adam_eps > 0, "adam_eps must be positive"),
        (min(cfg.feature_dim, cfg.hidden_dim, cfg.embed_dim) >= 1, "model dims must be at least 1"),
        (cfg.episodes_train >= 0, "episodes_train must be non-negative"),
        (min(cfg.episodes_val, cfg.episodes_test) >= 0, "episode counts must be non-negative"),
        (cfg.val_every >= 0, "val_every must be non-negative"),
        (cfg.train_speakers >= cfg.episode_speakers, "train_speakers must cover one episode"),
        (cfg.eval_speakers >= cfg.episode_speakers, "eval_speakers must cover one episode"),
        (cfg.within_speaker_noise >= 0, "within_speaker_noise must be non-negative"),
        (1 <= cfg.max_card <= cfg.episode_speakers, "max_card must be in [1, episode_speakers]"),
        (cfg.examples_per_set >= 1, "examples_per_set must be at least 1"),
        (cfg.frame_duration > 0, "frame_duration must be positive"),
        (cfg.segment_s > 0 and cfg.long_turn_s > 0, "segment and long-turn lengths must be positive"),
        (cfg.n_streams >= 1, "n_streams must be at least 1"),
        (cfg.stream_speakers >= 2, "stream_speakers must be at least 2"),
        (cfg.stream_duration_s > 0, "stream_duration_s must be positive"),
        (0 <= cfg.overlap_fraction < 1, "overlap_fraction must be in [0, 1)"),
        (0 < cfg.turn_min_s <= cfg.turn_max_s, "turn duration bounds are inverted"),
        (0 < cfg.overlap_min_s <= cfg.overlap_max_s, "overlap duration bounds are inverted"),
        (0 <= cfg.detector_false_alarm_rate <= 1, "detector_false_alarm_rate must be in [0, 1]"),
        (0 <= cfg.detector_miss_rate <= 1, "detector_miss_rate must be in [0, 1]"),
        (cfg.boundary_jitter_s >= 0, "boundary_jitter_s must be non-negative"),
        (0 <= cfg.missed_change_rate <= 1, "missed_change_rate must be in [0, 1]"),
        (0 <= cfg.ap_damping < 1, "ap_damping must be in [0, 1)"),
        (cfg.ap_max_iter >= 1 and cfg.ap_convergence_iter >= 1, "ap iteration counts must be positive"),
        (cfg.figure_dpi >= 10, "figure_dpi must be at least 10"),
        (cfg.gradcheck_step > 0 and cfg.gradcheck_tolerance > 0, "gradcheck settings must be positive"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    if cfg.ap_preference != "median":
        try:
            float(cfg.ap_preference)
        except ValueError:
            raise ConfigError(f"ap_preference must be 'median' or a number, got {cfg.ap_preference!r}") from None


def build_config(file_values=None, overrides=None):
    """Defaults, then file values, then overrides; validates the result."""
    cfg = RunConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key: {key}")
            if isinstance(value, str):
                value = _parse_value(key, value)
            setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def ap_preference_value(cfg):
    return None if cfg.ap_preference == "median" else float(cfg.ap_preference)


def format_resolved(cfg):
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_resolved(cfg))
