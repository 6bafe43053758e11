"""Speaker diarization over synthetic streams, and DER scoring.

All strategies share one enrollment path: long turns are clustered by
affinity propagation on the cosine similarities of their mean embeddings,
and each cluster's normalized mean becomes a speaker enrollment.  They
differ in how spans are assigned: whole turns to one speaker, one-second
segments to one or two nearest enrollments with an overlap detector, or
one-second segments to the nearest singleton-or-pair pseudo-enrollment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .nets import CompositionalModel, compose_pair, embed_frames, unit
from .synth import Timeline

SINGLEEM_TURN = "singleem_turn"
SINGLEEM_SEG_OVERLAP = "singleem_seg_overlap"
CMPEM_SEG = "cmpem_seg"
CMPEM_SEG_OVERLAP = "cmpem_seg_overlap"
STRATEGIES = (SINGLEEM_TURN, SINGLEEM_SEG_OVERLAP, CMPEM_SEG, CMPEM_SEG_OVERLAP)


# --- clustering ----------------------------------------------------------------

@dataclass
class ClusterResult:
    labels: np.ndarray  # cluster id per input row
    exemplars: np.ndarray  # row indices that selected themselves
    converged: bool

    @property
    def n_clusters(self):
        return len(self.exemplars)


def cosine_similarities(rows):
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    normed = rows / np.maximum(norms, 1e-300)
    return normed @ normed.T


def affinity_propagation(similarity, *, damping=0.9, max_iter=200, convergence_iter=15,
                         preference=None):
    """Responsibility/availability message passing on a similarity matrix.

    preference defaults to the median off-diagonal similarity.  The heavy
    default damping is deliberate: blocks of near-duplicate points (tightly
    clustered turn embeddings) make the messages oscillate at the textbook
    0.5.  If the exemplar set is stable for convergence_iter sweeps the loop
    stops early; otherwise the current exemplars are returned with
    converged=False.
    When no point accumulates positive evidence the single best candidate
    becomes the exemplar, so degenerate inputs (for example all points
    identical) collapse to one cluster instead of failing.
    """
    S = np.array(similarity, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got shape {S.shape}")
    n = S.shape[0]
    if n == 1:
        return ClusterResult(labels=np.zeros(1, dtype=int), exemplars=np.array([0]), converged=True)
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must be in [0, 1)")
    off = ~np.eye(n, dtype=bool)
    if preference is None:
        preference = float(np.median(S[off]))
    # A constant off-diagonal similarity carries no structure: every partition
    # scores the same, so return the canonical single cluster instead of
    # whatever arbitrary split tie-broken messages would settle on.
    if np.ptp(S[off]) == 0.0 and preference <= float(S[off][0]):
        return ClusterResult(labels=np.zeros(n, dtype=int), exemplars=np.array([0]),
                             converged=True)
    np.fill_diagonal(S, preference)
    # Exactly tied similarities (near-duplicate points) make the messages
    # oscillate forever; a seeded eps-scale perturbation breaks the ties
    # without moving any meaningful distinction.
    scale = float(np.ptp(S)) or 1.0
    S += 1e-12 * scale * np.random.default_rng(0).standard_normal((n, n))

    R = np.zeros((n, n))
    A = np.zeros((n, n))
    idx = np.arange(n)
    stable = 0
    prev_exemplars = None
    converged = False
    for _ in range(max_iter):
        AS = A + S
        best_idx = np.argmax(AS, axis=1)
        best = AS[idx, best_idx]
        AS[idx, best_idx] = -np.inf
        second = np.max(AS, axis=1)
        Rnew = S - best[:, None]
        Rnew[idx, best_idx] = S[idx, best_idx] - second
        R = (1.0 - damping) * Rnew + damping * R

        Rp = np.maximum(R, 0.0)
        Rp[idx, idx] = R[idx, idx]
        colsum = Rp.sum(axis=0)
        Anew = np.minimum(0.0, colsum[None, :] - Rp)
        Anew[idx, idx] = colsum - Rp[idx, idx]
        A = (1.0 - damping) * Anew + damping * A

        exemplars = np.flatnonzero(np.diag(A) + np.diag(R) > 0)
        # an empty exemplar set is pre-convergence transient, never stability
        if exemplars.size and prev_exemplars is not None and np.array_equal(exemplars, prev_exemplars):
            stable += 1
            if stable >= convergence_iter:
                converged = True
                break
        else:
            stable = 0
        prev_exemplars = exemplars if exemplars.size else None
    exemplars = np.flatnonzero(np.diag(A) + np.diag(R) > 0)
    if exemplars.size == 0:
        exemplars = np.array([int(np.argmax(np.diag(A) + np.diag(R)))])
    labels = np.argmax(S[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    return ClusterResult(labels=labels, exemplars=exemplars, converged=converged)


# --- segments and the simulated overlap detector --------------------------------

def split_segments(turns, segment_frames):
    """Chop each turn into fixed-length segments; the remainder keeps its frames."""
    if segment_frames < 1:
        raise ValueError("segment length must be at least one frame")
    out = []
    for start, length in turns:
        pos = start
        while pos < start + length:
            n = min(segment_frames, start + length - pos)
            out.append((pos, n))
            pos += n
    return out


def overlap_flags_from_reference(reference, segments, *, false_alarm_rate=0.0,
                                 miss_rate=0.0, rng=None):
    """Simulated overlap detector: true flags from the reference, then class flips.

    A segment's true flag is whether any of its frames has two or more active
    speakers.  miss_rate flips true flags off, false_alarm_rate flips false
    flags on; both zero gives the oracle detector.
    """
    for rate, name in ((false_alarm_rate, "false alarm"), (miss_rate, "miss")):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"{name} rate must be in [0, 1], got {rate}")
    if (false_alarm_rate > 0 or miss_rate > 0) and rng is None:
        raise ValueError("noisy detector rates need an rng")
    flags = np.zeros(len(segments), dtype=bool)
    for i, (start, length) in enumerate(segments):
        truth = any(len(reference.frames[j]) >= 2 for j in range(start, start + length))
        if truth:
            flags[i] = not (miss_rate > 0 and rng.random() < miss_rate)
        else:
            flags[i] = false_alarm_rate > 0 and rng.random() < false_alarm_rate
    return flags


# --- diarization strategies ------------------------------------------------------

def _span_means(embeddings, spans):
    return np.stack([embeddings[start:start + length].mean(axis=0) for start, length in spans])


def _top_indices(sims, count):
    order = np.argsort(-sims, kind="stable")
    return order[:count]


def diarize(stream, model, strategy, *, long_turn_s=3.3, segment_s=1.0,
            detector_false_alarm_rate=0.0, detector_miss_rate=0.0, detector_rng=None,
            ap_damping=0.9, ap_max_iter=200, ap_convergence_iter=15, ap_preference=None):
    """Run one strategy over a stream and return the hypothesis timeline.

    The reference inside the stream is consulted only through the simulated
    overlap detector; clustering and assignment see features alone.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy: {strategy}")
    if strategy in (CMPEM_SEG, CMPEM_SEG_OVERLAP) and not isinstance(model, CompositionalModel):
        raise TypeError(f"{strategy} needs a CompositionalModel")
    fd = stream.timeline.frame_duration
    long_frames = max(1, int(round(long_turn_s / fd)))
    seg_frames = max(1, int(round(segment_s / fd)))
    normalize = getattr(model, "normalized", False)
    embeddings = embed_frames(model.f, stream.features, normalize)

    turns = list(stream.turns)
    long_turns = [t for t in turns if t[1] >= long_frames]
    if not long_turns:
        raise RuntimeError(f"insufficient enrollment material: no turns of at least {long_turn_s}s")
    long_means = _span_means(embeddings, long_turns)
    clusters = affinity_propagation(cosine_similarities(long_means), damping=ap_damping,
                                    max_iter=ap_max_iter, convergence_iter=ap_convergence_iter,
                                    preference=ap_preference)
    n_clusters = clusters.n_clusters
    centroids = np.stack([unit(long_means[clusters.labels == k].mean(axis=0))
                          for k in range(n_clusters)])

    hyp = [set() for _ in range(stream.timeline.n_frames)]

    def paint(span, label_set):
        for i in range(span[0], span[0] + span[1]):
            hyp[i].update(label_set)

    if strategy == SINGLEEM_TURN:
        long_label = {span: int(clusters.labels[i]) for i, span in enumerate(long_turns)}
        for span in turns:
            if span in long_label:
                paint(span, {long_label[span]})
            else:
                sims = centroids @ unit(embeddings[span[0]:span[0] + span[1]].mean(axis=0))
                paint(span, {int(_top_indices(sims, 1)[0])})
        return Timeline(fd, [frozenset(s) for s in hyp])

    segments = split_segments(turns, seg_frames)
    seg_means = _span_means(embeddings, segments)
    seg_units = np.stack([unit(v) for v in seg_means])

    if strategy == SINGLEEM_SEG_OVERLAP:
        flags = overlap_flags_from_reference(stream.timeline, segments,
                                             false_alarm_rate=detector_false_alarm_rate,
                                             miss_rate=detector_miss_rate, rng=detector_rng)
        sims = seg_units @ centroids.T
        for i, span in enumerate(segments):
            count = 2 if (flags[i] and n_clusters >= 2) else 1
            paint(span, {int(k) for k in _top_indices(sims[i], count)})
        return Timeline(fd, [frozenset(s) for s in hyp])

    # Compositional strategies: candidates are cluster enrollments and their
    # pairwise pseudo-enrollments, compared by cosine similarity.
    singles = [((k,), centroids[k]) for k in range(n_clusters)]
    pairs = [((k, l), compose_pair(model, centroids[k], centroids[l]))
             for k in range(n_clusters) for l in range(k + 1, n_clusters)]
    cand_sets = [s for s, _ in singles + pairs]
    cand_matrix = np.stack([unit(v) for _, v in singles + pairs])
    sims = seg_units @ cand_matrix.T
    n_singles = len(singles)

    if strategy == CMPEM_SEG:
        for i, span in enumerate(segments):
            paint(span, set(cand_sets[int(np.argmax(sims[i]))]))
    else:
        flags = overlap_flags_from_reference(stream.timeline, segments,
                                             false_alarm_rate=detector_false_alarm_rate,
                                             miss_rate=detector_miss_rate, rng=detector_rng)
        for i, span in enumerate(segments):
            if flags[i] and len(cand_sets) > n_singles:
                choice = n_singles + int(np.argmax(sims[i, n_singles:]))
            else:
                choice = int(np.argmax(sims[i, :n_singles]))
            paint(span, set(cand_sets[choice]))
    return Timeline(fd, [frozenset(s) for s in hyp])


# --- DER -------------------------------------------------------------------------

@dataclass
class DerBreakdown:
    miss: float
    false_alarm: float
    confusion: float
    total_reference_speech: float

    @property
    def der(self):
        errors = self.miss + self.false_alarm + self.confusion
        if self.total_reference_speech == 0.0:
            return 0.0 if errors == 0.0 else np.inf
        return errors / self.total_reference_speech


def der_score(reference, hypothesis):
    """Frame-exact diarization error rate with optimal speaker mapping.

    Hypothesis labels are mapped to reference speakers by the assignment
    that maximizes total co-occurrence (computed once over the whole
    stream); overlap is scored and no collar is applied.  Error seconds
    decompose exactly into miss + false alarm + confusion.
    """
    if reference.frame_duration != hypothesis.frame_duration:
        raise ValueError("reference and hypothesis frame durations differ")
    if reference.n_frames != hypothesis.n_frames:
        raise ValueError(f"frame counts differ: {reference.n_frames} vs {hypothesis.n_frames}")
    fd = reference.frame_duration
    ref_ids = sorted(set().union(*reference.frames)) if reference.frames else []
    hyp_ids = sorted(set().union(*hypothesis.frames)) if hypothesis.frames else []
    T = reference.n_frames
    Rm = np.zeros((T, len(ref_ids)), dtype=bool)
    Hm = np.zeros((T, len(hyp_ids)), dtype=bool)
    ref_pos = {s: i for i, s in enumerate(ref_ids)}
    hyp_pos = {s: i for i, s in enumerate(hyp_ids)}
    for t in range(T):
        for s in reference.frames[t]:
            Rm[t, ref_pos[s]] = True
        for s in hypothesis.frames[t]:
            Hm[t, hyp_pos[s]] = True
    nr = Rm.sum(axis=1).astype(np.int64)
    nh = Hm.sum(axis=1).astype(np.int64)
    matched = 0
    if ref_ids and hyp_ids:
        cooccur = Rm.T.astype(np.int64) @ Hm.astype(np.int64)
        rows, cols = linear_sum_assignment(cooccur, maximize=True)
        matched = int(cooccur[rows, cols].sum())
    miss = int(np.maximum(nr - nh, 0).sum())
    false_alarm = int(np.maximum(nh - nr, 0).sum())
    confusion = int(np.minimum(nr, nh).sum()) - matched
    return DerBreakdown(miss=miss * fd, false_alarm=false_alarm * fd,
                        confusion=confusion * fd, total_reference_speech=int(nr.sum()) * fd)
