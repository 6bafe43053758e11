"""Closed-set inference over enrollment tables, baselines, and evaluation.

Set identification searches every subset of the episode's speakers up to
max_card and returns the one whose (pseudo-)enrollment is nearest to the
query embedding under squared Euclidean distance after length
normalization.  Ties break toward the smallest cardinality, then
lexicographic ids, so predictions are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synth
from .nets import CompositionalModel, SingleModel, compose_pair, embed_example, unit


@dataclass
class Prediction:
    predicted: tuple
    distances: dict  # subset tuple -> squared distance actually compared


class EnrollmentTable:
    """Pseudo-enrollment embeddings for every subset, keyed by sorted id tuples."""

    def __init__(self, entries, max_card):
        self.entries = entries
        self.max_card = max_card
        self._normalized = None

    def keys(self):
        return list(self.entries.keys())

    def normalized(self):
        if self._normalized is None:
            self._normalized = {k: unit(v) for k, v in self.entries.items()}
        return self._normalized


def build_enrollment_table(model, enrollments, max_card):
    """Embed singleton enrollments and fold larger subsets in ascending-id order."""
    ids = sorted(enrollments)
    if max_card > len(ids):
        raise ValueError(f"max_card {max_card} exceeds the {len(ids)} enrolled speakers")
    if max_card > 1 and not isinstance(model, CompositionalModel):
        raise TypeError("subset enrollment beyond singletons needs a CompositionalModel")
    singles = {s: embed_example(model, enrollments[s]) for s in ids}
    entries = {}
    for subset in synth.canonical_subsets(ids, max_card):
        if len(subset) == 1:
            entries[subset] = singles[subset[0]]
        else:
            entries[subset] = compose_pair(model, singles[subset[-1]], entries[subset[:-1]])
    return EnrollmentTable(entries, max_card)


def infer_from_embedding(table, fx):
    """Nearest normalized table entry to the normalized query embedding."""
    q = unit(np.asarray(fx, dtype=np.float64))
    normalized = table.normalized()
    best_key = None
    best_d = np.inf
    distances = {}
    for key in table.keys():  # canonical order doubles as the tie-break
        d = float(np.sum((q - normalized[key]) ** 2))
        distances[key] = d
        if d < best_d:
            best_d, best_key = d, key
    if best_key is None:
        raise ValueError("enrollment table is empty")
    return Prediction(predicted=best_key, distances=distances)


def infer_set(model, table, x):
    return infer_from_embedding(table, embed_example(model, x))


def infer_set_given_k(model, table, x, k):
    """Restrict the search to subsets of exactly k speakers."""
    if not 1 <= k <= table.max_card:
        raise ValueError(f"k must be in [1, {table.max_card}], got {k}")
    q = unit(embed_example(model, x))
    normalized = table.normalized()
    best_key = None
    best_d = np.inf
    distances = {}
    for key in table.keys():
        if len(key) != k:
            continue
        d = float(np.sum((q - normalized[key]) ** 2))
        distances[key] = d
        if d < best_d:
            best_d, best_key = d, key
    return Prediction(predicted=best_key, distances=distances)


# --- single-embedding baseline ------------------------------------------------

def single_em_search_all(embeddings, fx, max_card):
    """Nearest subset centroid: mean of the member singleton embeddings."""
    fx = np.asarray(fx, dtype=np.float64)
    ids = sorted(embeddings)
    best_key = None
    best_d = np.inf
    distances = {}
    for subset in synth.canonical_subsets(ids, max_card):
        centroid = np.mean([embeddings[s] for s in subset], axis=0)
        d = float(np.sum((fx - centroid) ** 2))
        distances[subset] = d
        if d < best_d:
            best_d, best_key = d, subset
    return Prediction(predicted=best_key, distances=distances)


def single_em_top_k(embeddings, fx, k):
    """The k nearest singleton enrollments, as a set."""
    fx = np.asarray(fx, dtype=np.float64)
    ids = sorted(embeddings)
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must be in [1, {len(ids)}], got {k}")
    distances = {(s,): float(np.sum((fx - embeddings[s]) ** 2)) for s in ids}
    ranked = sorted(ids, key=lambda s: (distances[(s,)], s))
    return Prediction(predicted=tuple(sorted(ranked[:k])), distances=distances)


def single_em_infer(model, enrollments, x, *, mode="search_all", k=None, max_card=3):
    """Baseline inference from singleton enrollments only.

    Distances are taken between the raw query embedding and plain means of
    the raw singleton embeddings; the baseline has no comparison-time
    normalization step.
    """
    if not isinstance(model, (SingleModel, CompositionalModel)):
        raise TypeError(f"cannot run single-embedding inference on {type(model).__name__}")
    embeddings = {s: embed_example(model, e) for s, e in enrollments.items()}
    fx = embed_example(model, x)
    if mode == "search_all":
        return single_em_search_all(embeddings, fx, max_card)
    if mode == "top_k":
        if k is None:
            raise ValueError("top_k mode needs k")
        return single_em_top_k(embeddings, fx, k)
    raise ValueError(f"unknown mode: {mode}")


# --- evaluation ---------------------------------------------------------------

class CompositionalPredictor:
    def __init__(self, model, max_card=3):
        self.model = model
        self.max_card = max_card

    def bind(self, episode):
        table = build_enrollment_table(self.model, episode.enrollments, self.max_card)
        model = self.model
        return _Bound(lambda x: infer_set(model, table, x).predicted,
                      lambda x, k: infer_set_given_k(model, table, x, k).predicted)


class SingleEmPredictor:
    def __init__(self, model, max_card=3):
        self.model = model
        self.max_card = max_card

    def bind(self, episode):
        embeddings = {s: embed_example(self.model, e) for s, e in episode.enrollments.items()}
        max_card = self.max_card

        def full(x):
            return single_em_search_all(embeddings, embed_example(self.model, x), max_card).predicted

        def given_k(x, k):
            return single_em_top_k(embeddings, embed_example(self.model, x), k).predicted

        return _Bound(full, given_k)


class GuessPredictor:
    """Uniform draws over the label space; the floor every model must clear."""

    def __init__(self, rng, max_card=3):
        self.rng = rng
        self.max_card = max_card

    def bind(self, episode):
        subsets = synth.canonical_subsets(episode.speakers, self.max_card)
        by_card = {}
        for s in subsets:
            by_card.setdefault(len(s), []).append(s)
        rng = self.rng
        return _Bound(lambda x: subsets[int(rng.integers(len(subsets)))],
                      lambda x, k: by_card[k][int(rng.integers(len(by_card[k])))])


class _Bound:
    def __init__(self, infer, infer_given_k):
        self.infer = infer
        self.infer_given_k = infer_given_k


@dataclass
class ModelMetrics:
    overall: float
    by_card: dict
    size: float
    oracle_by_card: dict
    n_examples: int


@dataclass
class EvalReport:
    per_model: dict  # name -> ModelMetrics
    n_examples: int
    cards: tuple


def evaluate_episode_batch(predictors, episodes):
    """Four metric groups per model over a shared batch of episodes.

    Metrics: exact-set accuracy with unknown size (overall and per true
    cardinality), set-size accuracy, and exact-set accuracy when the true
    cardinality is given.
    """
    if not episodes:
        raise ValueError("evaluation needs at least one episode")
    cards = tuple(range(1, max(ep.max_card for ep in episodes) + 1))
    hits = {name: {"overall": 0, "size": 0, "card": {c: 0 for c in cards}, "oracle": {c: 0 for c in cards}}
            for name in predictors}
    totals = {c: 0 for c in cards}
    n_examples = 0
    for ep in episodes:
        bound = {name: p.bind(ep) for name, p in predictors.items()}
        for x, label in ep.examples:
            k = len(label)
            n_examples += 1
            totals[k] += 1
            for name, b in bound.items():
                pred = b.infer(x)
                h = hits[name]
                h["overall"] += pred == label
                h["card"][k] += pred == label
                h["size"] += len(pred) == k
                h["oracle"][k] += b.infer_given_k(x, k) == label
    per_model = {}
    for name, h in hits.items():
        per_model[name] = ModelMetrics(
            overall=h["overall"] / n_examples,
            by_card={c: (h["card"][c] / totals[c] if totals[c] else 0.0) for c in cards},
            size=h["size"] / n_examples,
            oracle_by_card={c: (h["oracle"][c] / totals[c] if totals[c] else 0.0) for c in cards},
            n_examples=n_examples,
        )
    return EvalReport(per_model=per_model, n_examples=n_examples, cards=cards)
