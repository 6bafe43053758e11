"""Synthetic speakers, mixtures, episodes, timelines, and RTTM-style export.

A speaker is a fixed prototype vector; an utterance is the prototype plus
Gaussian within-speaker noise; a mixture is the component-wise sum of one
utterance per active speaker scaled to unit norm.  Timelines are frame-level
active-speaker sets with controlled two-speaker overlap, accompanied by the
turn list a speaker-change detector would emit (maximal spans over which the
active set is constant).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SpeakerBank:
    prototypes: np.ndarray  # (speakers, features)
    noise_scale: float
    seed: int

    @property
    def size(self):
        return self.prototypes.shape[0]

    @property
    def feature_dim(self):
        return self.prototypes.shape[1]


def make_bank(n_speakers, feature_dim, noise_scale, seed):
    """Prototypes are i.i.d. standard normal; regeneration is bit-identical."""
    if n_speakers < 1 or feature_dim < 1:
        raise ValueError("bank needs at least one speaker and one feature dimension")
    if noise_scale < 0:
        raise ValueError("noise scale must be non-negative")
    rng = np.random.default_rng(seed)
    return SpeakerBank(prototypes=rng.standard_normal((n_speakers, feature_dim)), noise_scale=noise_scale, seed=seed)


def synth_utterance(bank, speaker, rng):
    if not 0 <= speaker < bank.size:
        raise ValueError(f"unknown speaker id {speaker}")
    return bank.prototypes[speaker] + bank.noise_scale * rng.standard_normal(bank.feature_dim)


def synth_mixture(bank, speakers, rng):
    """Unit-norm sum of one fresh utterance per speaker.

    Draws are keyed by ascending speaker id, so any ordering of the same set
    produces the identical mixture.
    """
    ids = sorted(set(speakers))
    if not ids:
        raise ValueError("mixture requires at least one speaker")
    acc = np.zeros(bank.feature_dim)
    for s in ids:
        acc += synth_utterance(bank, s, rng)
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        raise ValueError("mixture summed to the zero vector")
    return acc / norm


def canonical_subsets(ids, max_card):
    """All non-empty subsets up to max_card, ordered by (size, lexicographic)."""
    ids = sorted(ids)
    out = []
    for card in range(1, max_card + 1):
        out.extend(itertools.combinations(ids, card))
    return out


@dataclass
class Episode:
    speakers: tuple  # ascending bank ids
    enrollments: dict  # speaker id -> clean utterance (feature space)
    examples: list  # (mixture, label subset tuple)
    max_card: int


def sample_episode(bank, rng, n_speakers=5, max_card=3, examples_per_set=1):
    """One closed-set episode: enrollments plus labeled mixtures.

    Every subset of the episode's speakers with 1 <= |T| <= max_card gets
    exactly examples_per_set mixtures, so labels are uniform over subsets.
    """
    if n_speakers > bank.size:
        raise ValueError(f"episode needs {n_speakers} speakers but the bank has {bank.size}")
    if not 1 <= max_card <= n_speakers:
        raise ValueError(f"max_card must be in [1, {n_speakers}], got {max_card}")
    if examples_per_set < 1:
        raise ValueError("examples_per_set must be at least 1")
    ids = tuple(sorted(rng.choice(bank.size, size=n_speakers, replace=False).tolist()))
    enrollments = {s: synth_utterance(bank, s, rng) for s in ids}
    examples = []
    for subset in canonical_subsets(ids, max_card):
        for _ in range(examples_per_set):
            examples.append((synth_mixture(bank, subset, rng), subset))
    return Episode(speakers=ids, enrollments=enrollments, examples=examples, max_card=max_card)


# --- timelines ---------------------------------------------------------------

@dataclass
class Timeline:
    frame_duration: float
    frames: list  # frozenset of active speaker ids per frame; empty = silence

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def duration(self):
        return len(self.frames) * self.frame_duration


def homogeneous_turns(timeline):
    """Maximal spans of constant non-empty active set, as (start, n_frames)."""
    turns = []
    start = None
    current = None
    for i, s in enumerate(timeline.frames):
        if s != current:
            if current:
                turns.append((start, i - start))
            start, current = i, s
    if current:
        turns.append((start, len(timeline.frames) - start))
    return turns


def generate_timeline(bank, n_speakers, duration_s, rng, *, overlap_fraction=0.19,
                      frame_duration=0.1, turn_min_s=1.0, turn_max_s=8.0,
                      overlap_min_s=0.5, overlap_max_s=2.0, allow_triple_overlap=False):
    """Alternating single-speaker turns with controlled two-speaker overlap.

    The realized overlapping-speech share tracks overlap_fraction closely
    (a proportional rule decides at each junction whether the next turn
    starts before the current one ends).  Each speaker's first turn is
    overlap-free and at least 3.5 s, so every speaker owns at least one
    long clean turn once the stream is long enough.  Returns the frame
    reference and the turn spans a speaker-change detector would emit.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap fraction must be in [0, 1)")
    if not 1 <= n_speakers <= bank.size:
        raise ValueError(f"timeline needs 1..{bank.size} speakers, got {n_speakers}")
    total = int(round(duration_s / frame_duration))
    if total < 1:
        raise ValueError("duration is shorter than one frame")

    def frames_of(seconds):
        return max(1, int(round(seconds / frame_duration)))

    turn_min, turn_max = frames_of(turn_min_s), frames_of(turn_max_s)
    ov_min, ov_max = frames_of(overlap_min_s), frames_of(overlap_max_s)
    if turn_min > turn_max or ov_min > ov_max:
        raise ValueError("turn/overlap duration bounds are inverted")
    first_min = max(turn_min, frames_of(3.5))

    ids = sorted(rng.choice(bank.size, size=n_speakers, replace=False).tolist())
    first_pass = [ids[i] for i in rng.permutation(n_speakers)]
    active = [set() for _ in range(total)]
    cursor = 0
    overlap_total = 0
    prev = None  # (speaker, length, head_overlap, protected)
    while cursor < total:
        if first_pass:
            spk = first_pass.pop(0)
            length = int(rng.integers(first_min, max(first_min, turn_max) + 1))
            ov = 0
            protected = True
        else:
            others = [s for s in ids if s != prev[0]] or ids
            spk = others[int(rng.integers(len(others)))]
            length = int(rng.integers(turn_min, turn_max + 1))
            protected = False
            ov = 0
            if overlap_total < overlap_fraction * cursor and not prev[3]:
                cap = min(ov_max, length - 1)
                if not allow_triple_overlap:
                    cap = min(cap, prev[1] - prev[2] - 1)
                if cap >= ov_min:
                    ov = int(rng.integers(ov_min, cap + 1))
        start = cursor - ov
        for i in range(start, min(start + length, total)):
            active[i].add(spk)
        overlap_total += max(0, min(cursor, total) - start)
        prev = (spk, length, ov, protected)
        cursor = start + length
    timeline = Timeline(frame_duration, [frozenset(s) for s in active])
    return timeline, homogeneous_turns(timeline)


@dataclass
class Stream:
    timeline: Timeline
    turns: list  # (start_frame, n_frames) spans from the change detector
    features: np.ndarray  # (n_frames, feature_dim)
    speakers: tuple = field(default_factory=tuple)


def stream_features(bank, timeline, rng):
    """Per-frame mixture features; silence frames stay zero."""
    out = np.zeros((timeline.n_frames, bank.feature_dim))
    for i, s in enumerate(timeline.frames):
        if s:
            out[i] = synth_mixture(bank, s, rng)
    return out


def degrade_turns(turns, timeline, rng, *, boundary_jitter_s=0.0, missed_change_rate=0.0):
    """Simulated change-detector noise: jittered boundaries, merged turns.

    With both rates zero the turns pass through untouched (oracle detector).
    Only boundaries between time-adjacent turns can be missed or jittered.
    """
    if boundary_jitter_s == 0.0 and missed_change_rate == 0.0:
        return list(turns)
    if not 0.0 <= missed_change_rate <= 1.0:
        raise ValueError("missed change rate must be in [0, 1]")
    fd = timeline.frame_duration
    merged = []
    for span in turns:
        prev = merged[-1] if merged else None
        if prev and prev[0] + prev[1] == span[0] and rng.random() < missed_change_rate:
            merged[-1] = (prev[0], prev[1] + span[1])
        else:
            merged.append(tuple(span))
    if boundary_jitter_s > 0.0:
        jittered = []
        for i, (start, length) in enumerate(merged):
            if i > 0 and jittered[-1][0] + jittered[-1][1] == start:
                shift = int(round(rng.normal(0.0, boundary_jitter_s) / fd))
                p_start, p_len = jittered[-1]
                shift = max(-(length - 1), min(p_len - 1, shift))
                jittered[-1] = (p_start, p_len - shift)
                start, length = start - shift, length + shift
            jittered.append((start, length))
        merged = jittered
    return merged


def generate_stream(bank, n_speakers, duration_s, rng, *, boundary_jitter_s=0.0,
                    missed_change_rate=0.0, **timeline_kwargs):
    timeline, turns = generate_timeline(bank, n_speakers, duration_s, rng, **timeline_kwargs)
    turns = degrade_turns(turns, timeline, rng, boundary_jitter_s=boundary_jitter_s,
                          missed_change_rate=missed_change_rate)
    features = stream_features(bank, timeline, rng)
    speakers = tuple(sorted(set().union(*timeline.frames) if timeline.frames else ()))
    return Stream(timeline=timeline, turns=turns, features=features, speakers=speakers)


# --- RTTM-style export -------------------------------------------------------

def speaker_intervals(timeline):
    """Per-speaker maximal active intervals as (speaker, start_frame, n_frames)."""
    out = []
    speakers = sorted(set().union(*timeline.frames)) if timeline.frames else []
    for spk in speakers:
        start = None
        for i, s in enumerate(timeline.frames):
            if spk in s and start is None:
                start = i
            elif spk not in s and start is not None:
                out.append((spk, start, i - start))
                start = None
        if start is not None:
            out.append((spk, start, timeline.n_frames - start))
    out.sort(key=lambda t: (t[1], t[0]))
    return out


def write_rttm(timeline, file_id, path):
    fd = timeline.frame_duration
    with open(path, "w", encoding="utf-8") as fh:
        for spk, start, length in speaker_intervals(timeline):
            fh.write(f"SPEAKER {file_id} 1 {start * fd:.3f} {length * fd:.3f} {spk}\n")


def read_rttm(path, frame_duration, n_frames=None):
    """Rebuild a Timeline from rows written by write_rttm.

    Onsets and durations snap to the frame grid; pass n_frames to keep
    trailing silence that no interval covers.
    """
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "SPEAKER" or len(parts) != 6:
                raise ValueError(f"malformed rttm line: {line.rstrip()!r}")
            onset, dur, spk = float(parts[3]), float(parts[4]), int(parts[5])
            start = int(round(onset / frame_duration))
            length = int(round(dur / frame_duration))
            entries.append((spk, start, length))
    end = max((start + length for _, start, length in entries), default=0)
    if n_frames is None:
        n_frames = end
    elif end > n_frames:
        raise ValueError(f"rttm intervals extend to frame {end}, beyond n_frames={n_frames}")
    frames = [set() for _ in range(n_frames)]
    for spk, start, length in entries:
        for i in range(start, start + length):
            frames[i].add(spk)
    return Timeline(frame_duration, [frozenset(s) for s in frames])
