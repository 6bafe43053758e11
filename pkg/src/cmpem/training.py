"""Episodic training of the embedding and composition networks.

Each episode samples a fresh closed set of speakers, builds the pseudo-
enrollment table for every label subset through the recorded graph, and
forms triplets with every mixture example as anchor: the positive is the
anchor's own table entry, the negatives are all other entries, and the
hinge-active negatives are averaged.  One episode is one Adam step.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import inference, synth
from .nets import CMPEML2, CompositionalModel, SingleModel, init_single_model
from .seeding import derive_rng, derive_seed_sequence

MINING_MODES = ("all_mean", "hardest")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 3e-4
    triplet_margin: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    episodes_train: int = 20000
    episodes_val: int = 500
    val_every: int = 500
    episode_speakers: int = 5
    max_card: int = 3
    examples_per_set: int = 1
    negative_mining: str = "all_mean"


@dataclass
class LogRow:
    episode: int
    loss: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    model: object  # best-validation checkpoint
    final_model: object
    log: list
    best_val_accuracy: float


# --- Adam --------------------------------------------------------------------

class AdamState:
    def __init__(self, params):
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}
        self.t = 0


def adam_step(params, grads, state, *, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"adam: gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --- graph-path forward ------------------------------------------------------

def wrap_params(model):
    """Graph leaves sharing storage with the model's arrays (updated in place)."""
    f = model.f
    params = {"f.w1": f.w1, "f.b1": f.b1, "f.w2": f.w2, "f.b2": f.b2}
    if isinstance(model, CompositionalModel):
        params["g.w1"] = model.g_w1
        params["g.w2"] = model.g_w2
    return {name: ad.Tensor(arr, requires_grad=True) for name, arr in params.items()}


def embed_tensor(params, x, normalize):
    h = ad.tanh(ad.add(ad.matmul(params["f.w1"], x), params["f.b1"]))
    e = ad.add(ad.matmul(params["f.w2"], h), params["f.b2"])
    return ad.l2_normalize(e) if normalize else e


def compose_tensor(params, ea, eb, normalize):
    a, b = ea, eb
    diff = a.data != b.data
    if diff.any():
        i = int(np.argmax(diff))
        if b.data[i] < a.data[i]:
            a, b = b, a
    out = ad.add(ad.add(ad.matmul(params["g.w1"], a), ad.matmul(params["g.w1"], b)),
                 ad.matmul(params["g.w2"], ad.elementwise_mul(a, b)))
    return ad.l2_normalize(out) if normalize else out


def build_enrollment_table(params, episode, normalize, max_card=None):
    """Pseudo-enrollments for every subset, composed over ascending speaker ids.

    A subset's entry folds its largest id into the entry for the rest, so
    {a, b, c} is g(f(x_c), g(f(x_b), f(x_a))) with a < b < c.
    """
    if max_card is None:
        max_card = episode.max_card
    singles = {s: embed_tensor(params, ad.Tensor(np.asarray(episode.enrollments[s], dtype=np.float64)), normalize)
               for s in episode.speakers}
    table = {}
    for subset in synth.canonical_subsets(episode.speakers, max_card):
        if len(subset) == 1:
            table[subset] = singles[subset[0]]
        else:
            table[subset] = compose_tensor(params, singles[subset[-1]], table[subset[:-1]], normalize)
    return table


def triplet_loss(anchor, positive, negative, margin):
    """max(0, d(a,p) - d(a,n) + margin) with squared Euclidean d."""
    dp = ad.squared_euclidean(anchor, positive)
    dn = ad.squared_euclidean(anchor, negative)
    return ad.scalar_max0(ad.add(ad.sub(dp, dn), ad.Tensor(np.asarray(margin))))


def _scaled(t, factor):
    return ad.elementwise_mul(t, ad.Tensor(np.asarray(factor)))


def episode_loss(params, episode, *, margin, normalize, mining="all_mean"):
    """Triplet loss over one episode's graph, or None when no hinge is active."""
    if mining not in MINING_MODES:
        raise ValueError(f"unknown mining mode: {mining}")
    table = build_enrollment_table(params, episode, normalize)
    keys = list(table.keys())
    anchor_losses = []
    n_anchors = 0
    for x, label in episode.examples:
        n_anchors += 1
        a = embed_tensor(params, ad.Tensor(np.asarray(x, dtype=np.float64)), normalize)
        dp = ad.squared_euclidean(a, table[label])
        dns = [(k, ad.squared_euclidean(a, table[k])) for k in keys if k != label]
        # A non-finite distance would silently deactivate every hinge below
        # (NaN comparisons are false); surface it as the loss instead so the
        # training loop can abort with the episode index.
        for bad in (dp, *(dn for _, dn in dns)):
            if not np.isfinite(float(bad.data)):
                return bad
        if mining == "hardest":
            dns = [min(dns, key=lambda kv: float(kv[1].data))]
        active = []
        for _, dn in dns:
            if float(dp.data) - float(dn.data) + margin > 0:
                active.append(ad.scalar_max0(ad.add(ad.sub(dp, dn), ad.Tensor(np.asarray(margin)))))
        if active:
            total = active[0]
            for term in active[1:]:
                total = ad.add(total, term)
            anchor_losses.append(_scaled(total, 1.0 / len(active)))
    if not anchor_losses:
        return None
    total = anchor_losses[0]
    for term in anchor_losses[1:]:
        total = ad.add(total, term)
    return _scaled(total, 1.0 / n_anchors)


# --- training loops ----------------------------------------------------------

def _snapshot(model):
    return copy.deepcopy(model)


def _sample_episodes(bank, cfg, label, count, max_card):
    return [synth.sample_episode(bank, derive_rng(cfg.seed, f"{label}-{i}"),
                                 n_speakers=cfg.episode_speakers, max_card=max_card,
                                 examples_per_set=cfg.examples_per_set)
            for i in range(count)]


def _set_id_accuracy(model, episodes, max_card):
    correct = total = 0
    for ep in episodes:
        table = inference.build_enrollment_table(model, ep.enrollments, max_card)
        for x, label in ep.examples:
            pred = inference.infer_set(model, table, x)
            correct += pred.predicted == label
            total += 1
    return correct / total if total else 0.0


def _run_training(model, bank, cfg, max_card):
    if cfg.negative_mining not in MINING_MODES:
        raise ValueError(f"unknown mining mode: {cfg.negative_mining}")
    normalize = isinstance(model, CompositionalModel) and model.variant == CMPEML2
    params = wrap_params(model)
    state = AdamState({n: t.data for n, t in params.items()})
    # Model selection must not peek at training speakers, so validation
    # episodes come from a bank of fresh prototypes with the same geometry.
    val_bank = synth.make_bank(bank.size, bank.feature_dim, bank.noise_scale,
                               derive_seed_sequence(cfg.seed, "bank-val"))
    val_episodes = _sample_episodes(val_bank, cfg, "val-episode", cfg.episodes_val, max_card)
    log = []
    best = _snapshot(model)
    best_acc = -1.0
    for i in range(cfg.episodes_train):
        ep = synth.sample_episode(bank, derive_rng(cfg.seed, f"train-episode-{i}"),
                                  n_speakers=cfg.episode_speakers, max_card=max_card,
                                  examples_per_set=cfg.examples_per_set)
        loss_t = episode_loss(params, ep, margin=cfg.triplet_margin, normalize=normalize,
                              mining=cfg.negative_mining)
        loss_val = float(loss_t.data) if loss_t is not None else 0.0
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(f"non-finite loss at episode {i}: {loss_val}")
        grads = {}
        if loss_t is not None:
            ad.backward(loss_t)
            grads = {n: t.grad for n, t in params.items() if t.grad is not None}
        adam_step({n: t.data for n, t in params.items()}, grads, state,
                  lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        for t in params.values():
            t.grad = None
        row = LogRow(episode=i, loss=loss_val)
        last = i == cfg.episodes_train - 1
        if val_episodes and cfg.val_every > 0 and ((i + 1) % cfg.val_every == 0 or last):
            acc = _set_id_accuracy(model, val_episodes, max_card)
            row.val_accuracy = acc
            if acc > best_acc:
                best_acc = acc
                best = _snapshot(model)
        log.append(row)
    if best_acc < 0:
        best = _snapshot(model)
    return TrainResult(model=best, final_model=model, log=log, best_val_accuracy=max(best_acc, 0.0))


def train(model, bank, cfg):
    """Joint episodic training of f and g; returns the best-validation checkpoint."""
    if not isinstance(model, CompositionalModel):
        raise TypeError("train expects a CompositionalModel; use train_single_embedding for f-only models")
    return _run_training(model, bank, cfg, max_card=cfg.max_card)


def train_single_embedding(bank, cfg, model=None, *, hidden_dim=128, embed_dim=32):
    """Train f alone on single-speaker episodes (the label space collapses to singletons)."""
    if model is None:
        rng = derive_rng(cfg.seed, "init-single")
        model = init_single_model(bank.feature_dim, hidden_dim, embed_dim, rng)
    if not isinstance(model, SingleModel):
        raise TypeError("train_single_embedding expects a SingleModel")
    return _run_training(model, bank, cfg, max_card=1)
