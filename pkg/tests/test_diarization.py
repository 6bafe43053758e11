"""Affinity propagation, the simulated overlap detector, DER scoring, and diarize."""

import itertools

import numpy as np
import pytest

from cmpem.diarization import (
    CMPEM_SEG,
    CMPEM_SEG_OVERLAP,
    SINGLEEM_SEG_OVERLAP,
    SINGLEEM_TURN,
    STRATEGIES,
    affinity_propagation,
    cosine_similarities,
    der_score,
    diarize,
    overlap_flags_from_reference,
    split_segments,
)
from cmpem.nets import CMPEM, CompositionalModel, EmbeddingNet, SingleModel
from cmpem.synth import SpeakerBank, Timeline, generate_stream


def three_blob_points():
    rng = np.random.default_rng(42)
    centers = np.array([[10.0, 0.0], [0.0, 9.0], [-8.0, -7.0]])
    pts = np.vstack([c + 0.5 * rng.standard_normal((8, 2)) for c in centers])
    return pts, np.repeat(np.arange(3), 8)


def neg_sq_distances(pts):
    return -((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)


def as_partition(labels):
    labels = np.asarray(labels)
    return sorted(sorted(np.flatnonzero(labels == k).tolist()) for k in np.unique(labels))


# --- affinity propagation --------------------------------------------------------


def test_three_blobs_recovered_exactly():
    pts, gen = three_blob_points()
    res = affinity_propagation(neg_sq_distances(pts), damping=0.5)
    assert res.n_clusters == 3
    assert res.converged
    assert as_partition(res.labels) == as_partition(gen)


def test_three_blobs_converge_at_half_damping_within_200():
    # spread-out blobs have no message ties, so the light damping must do
    res = affinity_propagation(neg_sq_distances(three_blob_points()[0]),
                               damping=0.5, max_iter=200)
    assert res.converged


def test_three_blobs_match_reference_implementation():
    sklearn_cluster = pytest.importorskip("sklearn.cluster")
    pts, _ = three_blob_points()
    S = neg_sq_distances(pts)
    pref = float(np.median(S[~np.eye(len(pts), dtype=bool)]))
    mine = affinity_propagation(S, damping=0.5, preference=pref)
    ref = sklearn_cluster.AffinityPropagation(
        affinity="precomputed", damping=0.5, preference=pref,
        max_iter=200, convergence_iter=15, random_state=0).fit(S)
    assert as_partition(mine.labels) == as_partition(ref.labels_)
    assert mine.n_clusters == len(ref.cluster_centers_indices_)


def test_identical_points_collapse_to_one_cluster():
    S = cosine_similarities(np.ones((6, 3)))
    res = affinity_propagation(S)
    assert res.n_clusters == 1
    assert np.all(res.labels == 0)


def test_single_point_is_its_own_exemplar():
    res = affinity_propagation(np.array([[0.0]]))
    assert res.n_clusters == 1
    assert res.converged
    assert res.exemplars.tolist() == [0]
    assert res.labels.tolist() == [0]


def test_rejects_non_square_similarity():
    with pytest.raises(ValueError, match="square"):
        affinity_propagation(np.zeros((3, 4)))


def test_rejects_out_of_range_damping():
    S = neg_sq_distances(three_blob_points()[0])
    with pytest.raises(ValueError, match="damping"):
        affinity_propagation(S, damping=1.0)


def test_exemplars_label_themselves():
    pts, _ = three_blob_points()
    res = affinity_propagation(neg_sq_distances(pts), damping=0.5)
    for k, ex in enumerate(res.exemplars):
        assert res.labels[ex] == k


# --- segments and the overlap detector --------------------------------------------


def test_split_segments_chops_with_remainder():
    assert split_segments([(0, 25)], 10) == [(0, 10), (10, 10), (20, 5)]
    assert split_segments([(5, 10), (15, 3)], 10) == [(5, 10), (15, 3)]


def test_split_segments_rejects_zero_length():
    with pytest.raises(ValueError, match="at least one frame"):
        split_segments([(0, 10)], 0)


def alternating_reference(n_segments, seg_frames=10):
    """Segments alternate single-speaker and two-speaker activity."""
    frames = []
    for i in range(n_segments):
        active = frozenset({0, 1}) if i % 2 else frozenset({0})
        frames.extend([active] * seg_frames)
    segments = [(i * seg_frames, seg_frames) for i in range(n_segments)]
    return Timeline(0.1, frames), segments


def test_oracle_detector_flags_exactly():
    ref, segments = alternating_reference(40)
    flags = overlap_flags_from_reference(ref, segments)
    assert flags.tolist() == [bool(i % 2) for i in range(40)]


def test_detector_rates_one_invert_every_flag():
    ref, segments = alternating_reference(40)
    flags = overlap_flags_from_reference(ref, segments, false_alarm_rate=1.0,
                                         miss_rate=1.0, rng=np.random.default_rng(0))
    assert flags.tolist() == [not (i % 2) for i in range(40)]


def test_detector_flip_rates_match_measured_fractions():
    ref, segments = alternating_reference(20000, seg_frames=2)
    truth = np.array([bool(i % 2) for i in range(20000)])
    flags = overlap_flags_from_reference(ref, segments, false_alarm_rate=0.1,
                                         miss_rate=0.1, rng=np.random.default_rng(7))
    missed = np.mean(~flags[truth])
    false_alarmed = np.mean(flags[~truth])
    assert missed == pytest.approx(0.1, abs=0.01)
    assert false_alarmed == pytest.approx(0.1, abs=0.01)


def test_detector_validates_rates_and_rng():
    ref, segments = alternating_reference(4)
    with pytest.raises(ValueError, match=r"rate must be in \[0, 1\]"):
        overlap_flags_from_reference(ref, segments, miss_rate=1.5, rng=np.random.default_rng(0))
    with pytest.raises(ValueError, match="need an rng"):
        overlap_flags_from_reference(ref, segments, miss_rate=0.1)


# --- DER ---------------------------------------------------------------------------


def timeline_of(sets, fd=0.1):
    return Timeline(fd, [frozenset(s) for s in sets])


def test_der_zero_up_to_label_permutation():
    ref = timeline_of([{0}, {0}, {1}, {1, 2}, {2}, set()])
    hyp = timeline_of([{9}, {9}, {4}, {4, 7}, {7}, set()])
    b = der_score(ref, hyp)
    assert b.der == 0.0
    assert (b.miss, b.false_alarm, b.confusion) == (0.0, 0.0, 0.0)


def test_der_empty_hypothesis_is_one():
    ref = timeline_of([{0}] * 7 + [{0, 1}] * 3)
    hyp = timeline_of([set()] * 10)
    b = der_score(ref, hyp)
    assert b.der == 1.0
    assert b.miss == pytest.approx(b.total_reference_speech)


def test_der_hand_case_two_error_frames_of_ten():
    # 8 correct frames, frame 8 swaps speakers, frame 9 goes silent
    ref = timeline_of([{0}] * 9 + [{0}])
    hyp = timeline_of([{5}] * 8 + [{6}] + [set()])
    b = der_score(ref, hyp)
    assert b.der == pytest.approx(2.0 / 10.0)
    assert b.confusion == pytest.approx(0.1)
    assert b.miss == pytest.approx(0.1)
    assert b.false_alarm == 0.0


def brute_force_error_seconds(ref, hyp):
    """Minimum error over every one-to-one speaker mapping, counted per frame."""
    fd = ref.frame_duration
    rids = sorted(set().union(*ref.frames)) if ref.frames else []
    hids = sorted(set().union(*hyp.frames)) if hyp.frames else []

    def error_with(mapping):
        err = 0
        for R, H in zip(ref.frames, hyp.frames):
            mapped = {mapping[h] for h in H if h in mapping}
            err += max(len(R), len(H)) - len(set(R) & mapped)
        return err

    k = min(len(rids), len(hids))
    best = None
    if len(hids) <= len(rids):
        for chosen in itertools.permutations(rids, k):
            e = error_with(dict(zip(hids, chosen)))
            best = e if best is None else min(best, e)
    else:
        for chosen in itertools.permutations(hids, k):
            e = error_with(dict(zip(chosen, rids)))
            best = e if best is None else min(best, e)
    if best is None:
        best = error_with({})
    return best * fd


def random_timeline(rng, n_frames, ids):
    frames = []
    for _ in range(n_frames):
        n = int(rng.integers(0, min(3, len(ids)) + 1))
        frames.append(frozenset(int(s) for s in rng.choice(ids, size=n, replace=False)))
    return Timeline(0.1, frames)


def test_der_matches_all_mappings_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(50):
        n_frames = int(rng.integers(10, 60))
        ref = random_timeline(rng, n_frames, list(range(int(rng.integers(1, 6)))))
        n_hyp = int(rng.integers(0, 6))
        hyp = random_timeline(rng, n_frames, [100 + s for s in range(n_hyp)]) if n_hyp \
            else timeline_of([set()] * n_frames)
        b = der_score(ref, hyp)
        assert b.miss + b.false_alarm + b.confusion == pytest.approx(
            brute_force_error_seconds(ref, hyp), abs=1e-12)


def test_der_invariant_under_speaker_relabeling():
    rng = np.random.default_rng(3)
    ref = random_timeline(rng, 80, [0, 1, 2, 3])
    hyp = random_timeline(rng, 80, [0, 1, 2])
    b1 = der_score(ref, hyp)
    remap = {0: 31, 1: 7, 2: 19}
    hyp2 = timeline_of([{remap[s] for s in f} for f in hyp.frames])
    b2 = der_score(ref, hyp2)
    assert (b1.miss, b1.false_alarm, b1.confusion) == (b2.miss, b2.false_alarm, b2.confusion)


def test_der_components_sum_to_error_seconds():
    rng = np.random.default_rng(17)
    for _ in range(20):
        ref = random_timeline(rng, 50, [0, 1, 2])
        hyp = random_timeline(rng, 50, [5, 6])
        b = der_score(ref, hyp)
        assert b.der * b.total_reference_speech == pytest.approx(
            b.miss + b.false_alarm + b.confusion, abs=1e-9)


def test_der_rejects_mismatched_grids():
    ref = timeline_of([{0}] * 4)
    with pytest.raises(ValueError, match="frame counts differ"):
        der_score(ref, timeline_of([{0}] * 5))
    with pytest.raises(ValueError, match="durations differ"):
        der_score(ref, timeline_of([{0}] * 4, fd=0.2))


def test_der_silent_reference_scores_zero_or_infinite():
    silent = timeline_of([set()] * 5)
    assert der_score(silent, silent).der == 0.0
    assert der_score(silent, timeline_of([{0}] * 5)).der == np.inf


# --- diarize -----------------------------------------------------------------------


def isometry_models(feature_dim=64, hidden_dim=128, embed_dim=32):
    """f that is numerically linear and angle-preserving on the feature space."""
    eps = 1e-4
    w1 = np.zeros((hidden_dim, feature_dim))
    w1[:feature_dim, :] = eps * np.eye(feature_dim)
    w2 = np.zeros((embed_dim, hidden_dim))
    w2[:, :embed_dim] = (1.0 / eps) * np.eye(embed_dim)
    f = EmbeddingNet(w1=w1, b1=np.zeros(hidden_dim), w2=w2, b2=np.zeros(embed_dim))
    cm = CompositionalModel(f=f, g_w1=np.eye(embed_dim),
                            g_w2=np.zeros((embed_dim, embed_dim)), variant=CMPEM)
    return cm, SingleModel(f=f)


def orthogonal_bank(n_speakers=4, feature_dim=64, noise_scale=0.3):
    protos = np.zeros((n_speakers, feature_dim))
    protos[np.arange(n_speakers), np.arange(n_speakers)] = 8.0
    return SpeakerBank(prototypes=protos, noise_scale=noise_scale, seed=0)


@pytest.fixture(scope="module")
def separable_stream():
    bank = orthogonal_bank()
    return generate_stream(bank, 4, 240.0, np.random.default_rng(5), overlap_fraction=0.0)


def test_no_overlap_strategies_agree_and_are_perfect(separable_stream):
    cm, sm = isometry_models()
    hyps = {}
    for strategy in STRATEGIES:
        model = cm if strategy.startswith("cmpem") else sm
        hyps[strategy] = diarize(separable_stream, model, strategy)
        assert der_score(separable_stream.timeline, hyps[strategy]).der == 0.0
        assert max(len(f) for f in hyps[strategy].frames) == 1
    for a, b in itertools.combinations(STRATEGIES, 2):
        assert der_score(hyps[a], hyps[b]).der == 0.0


def test_turn_strategy_emits_single_speaker_frames_even_with_overlap():
    stream = generate_stream(orthogonal_bank(), 4, 240.0, np.random.default_rng(8),
                             overlap_fraction=0.19)
    cm, sm = isometry_models()
    hyp = diarize(stream, sm, SINGLEEM_TURN)
    assert max(len(f) for f in hyp.frames) == 1
    # the two-speaker strategies do exploit the same stream's overlap
    hyp2 = diarize(stream, cm, CMPEM_SEG_OVERLAP)
    assert max(len(f) for f in hyp2.frames) == 2


def test_overlap_hypothesis_cardinality_tracks_oracle_flags():
    stream = generate_stream(orthogonal_bank(), 4, 240.0, np.random.default_rng(8),
                             overlap_fraction=0.19)
    cm, _ = isometry_models()
    for strategy in (SINGLEEM_SEG_OVERLAP, CMPEM_SEG_OVERLAP):
        hyp = diarize(stream, cm, strategy)
        for ref_frame, hyp_frame in zip(stream.timeline.frames, hyp.frames):
            if ref_frame:
                assert len(hyp_frame) == min(len(ref_frame), 2)


def test_overlap_aware_strategies_beat_turn_painting():
    stream = generate_stream(orthogonal_bank(), 4, 240.0, np.random.default_rng(8),
                             overlap_fraction=0.19)
    cm, sm = isometry_models()
    turn = der_score(stream.timeline, diarize(stream, sm, SINGLEEM_TURN)).der
    aware = der_score(stream.timeline, diarize(stream, cm, CMPEM_SEG_OVERLAP)).der
    assert aware < turn


def test_diarize_rejects_unknown_strategy(separable_stream):
    _, sm = isometry_models()
    with pytest.raises(ValueError, match="unknown strategy"):
        diarize(separable_stream, sm, "karaoke")


def test_compositional_strategies_require_compositional_model(separable_stream):
    _, sm = isometry_models()
    for strategy in (CMPEM_SEG, CMPEM_SEG_OVERLAP):
        with pytest.raises(TypeError, match="CompositionalModel"):
            diarize(separable_stream, sm, strategy)


def test_diarize_needs_at_least_one_long_turn(separable_stream):
    _, sm = isometry_models()
    with pytest.raises(RuntimeError, match="insufficient enrollment material"):
        diarize(separable_stream, sm, SINGLEEM_TURN, long_turn_s=1e6)
