"""Embedding network, pairwise set-union composition, and text checkpoints.

Two model families share the same two-layer embedding net f.  A
CompositionalModel adds the composition g(e_a, e_b) = W1 e_a + W1 e_b +
W2 (e_a * e_b), which approximates the embedding a mixture of both
speakers would receive; the "cmpeml2" variant length-normalizes inside f
and g, while "cmpem" leaves embeddings raw and normalizes only when
comparing.  A SingleModel is f alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NORM_EPS, DegenerateNormalizationError

CMPEM = "cmpem"
CMPEML2 = "cmpeml2"
VARIANTS = (CMPEM, CMPEML2)

MODEL_FORMAT_MAGIC = "cmpem-model"
MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model file could not be parsed."""


@dataclass
class EmbeddingNet:
    w1: np.ndarray  # (hidden, features)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (embed, hidden)
    b2: np.ndarray  # (embed,)

    @property
    def feature_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    @property
    def embed_dim(self):
        return self.w2.shape[0]


@dataclass
class CompositionalModel:
    f: EmbeddingNet
    g_w1: np.ndarray  # (embed, embed), shared across both arguments
    g_w2: np.ndarray  # (embed, embed)
    variant: str

    @property
    def normalized(self):
        return self.variant == CMPEML2


@dataclass
class SingleModel:
    f: EmbeddingNet

    normalized = False


def unit(v):
    """v / |v|, raising on degenerate norms so bad embeddings fail loudly."""
    n = float(np.linalg.norm(v))
    if n < NORM_EPS:
        raise DegenerateNormalizationError(f"degenerate normalization: input norm {n:.3e} is below {NORM_EPS:.0e}")
    return v / n


def init_embedding_net(feature_dim, hidden_dim, embed_dim, rng):
    """Fan-in-scaled uniform weights, zero biases."""
    bound1 = np.sqrt(6.0 / feature_dim)
    bound2 = np.sqrt(6.0 / hidden_dim)
    return EmbeddingNet(
        w1=rng.uniform(-bound1, bound1, (hidden_dim, feature_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.uniform(-bound2, bound2, (embed_dim, hidden_dim)),
        b2=np.zeros(embed_dim),
    )


def init_compositional_model(feature_dim, hidden_dim, embed_dim, variant, rng):
    """g starts near the identity sum so composition begins as e_a + e_b."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    f = init_embedding_net(feature_dim, hidden_dim, embed_dim, rng)
    g_w1 = np.eye(embed_dim) + 0.01 * rng.standard_normal((embed_dim, embed_dim))
    g_w2 = 0.01 * rng.standard_normal((embed_dim, embed_dim))
    return CompositionalModel(f=f, g_w1=g_w1, g_w2=g_w2, variant=variant)


def init_single_model(feature_dim, hidden_dim, embed_dim, rng):
    return SingleModel(f=init_embedding_net(feature_dim, hidden_dim, embed_dim, rng))


def embed_features(net, x, normalize=False):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.feature_dim,):
        raise ValueError(f"embed: expected input of shape ({net.feature_dim},), got {x.shape}")
    h = np.tanh(net.w1 @ x + net.b1)
    e = net.w2 @ h + net.b2
    return unit(e) if normalize else e


def embed_frames(net, frames, normalize=False):
    """Batched embedding of row-stacked feature vectors."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != net.feature_dim:
        raise ValueError(f"embed: expected inputs of shape (*, {net.feature_dim}), got {frames.shape}")
    h = np.tanh(frames @ net.w1.T + net.b1)
    e = h @ net.w2.T + net.b2
    if normalize:
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        if np.any(norms < NORM_EPS):
            raise DegenerateNormalizationError("degenerate normalization in batched embedding")
        e = e / norms
    return e


def embed_example(model, x):
    return embed_features(model.f, x, normalize=model.normalized)


def _canonical_pair(ea, eb):
    # Fixed argument order (lexicographic by value) makes composition
    # bit-exactly commutative regardless of how callers order the pair.
    diff = ea != eb
    if diff.any():
        i = int(np.argmax(diff))
        if eb[i] < ea[i]:
            return eb, ea
    return ea, eb


def compose_pair(model, ea, eb):
    """Embedding-space union of two (pseudo-)enrollments."""
    m = model.f.embed_dim
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    if ea.shape != (m,) or eb.shape != (m,):
        raise ValueError(f"compose: expected embeddings of shape ({m},), got {ea.shape} and {eb.shape}")
    a, b = _canonical_pair(ea, eb)
    out = model.g_w1 @ a + model.g_w1 @ b + model.g_w2 @ (a * b)
    return unit(out) if model.normalized else out


# --- text checkpoint format -------------------------------------------------

def _param_blocks(model):
    if isinstance(model, CompositionalModel):
        f = model.f
        return [
            ("f.w1", f.w1), ("f.b1", f.b1.reshape(1, -1)),
            ("f.w2", f.w2), ("f.b2", f.b2.reshape(1, -1)),
            ("g.w1", model.g_w1), ("g.w2", model.g_w2),
        ]
    f = model.f
    return [
        ("f.w1", f.w1), ("f.b1", f.b1.reshape(1, -1)),
        ("f.w2", f.w2), ("f.b2", f.b2.reshape(1, -1)),
    ]


def save_model(model, path):
    """Write a model as decimal text; 17 significant digits round-trip float64 exactly."""
    f = model.f
    lines = [f"{MODEL_FORMAT_MAGIC} {MODEL_FORMAT_VERSION}"]
    if isinstance(model, CompositionalModel):
        lines.append("kind compositional")
        lines.append(f"variant {model.variant}")
    elif isinstance(model, SingleModel):
        lines.append("kind single")
    else:
        raise TypeError(f"cannot save object of type {type(model).__name__}")
    lines.append(f"dims {f.feature_dim} {f.hidden_dim} {f.embed_dim}")
    for name, arr in _param_blocks(model):
        rows, cols = arr.shape
        lines.append(f"param {name} {rows} {cols}")
        for row in arr:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_block(lines, pos, name, rows, cols):
    out = np.empty((rows, cols))
    for r in range(rows):
        if pos >= len(lines):
            raise ModelFormatError(f"unexpected end of parameter block {name}")
        values = lines[pos].split()
        if len(values) != cols:
            raise ModelFormatError(
                f"parameter count disagreement in block {name}: header says {cols} values per row, got {len(values)}"
            )
        try:
            out[r] = [float(v) for v in values]
        except ValueError as exc:
            raise ModelFormatError(f"malformed value in parameter block {name}: {exc}") from None
        pos += 1
    return out, pos


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ModelFormatError("empty model file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MODEL_FORMAT_MAGIC:
        raise ModelFormatError(f"not a model file: bad header {lines[0]!r}")
    if head[1] != str(MODEL_FORMAT_VERSION):
        raise ModelFormatError(f"unsupported format version: {head[1]}")
    pos = 1

    def field(expected):
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"missing {expected} line")
        key, _, rest = lines[pos].partition(" ")
        if key != expected:
            raise ModelFormatError(f"expected {expected} line, got {lines[pos]!r}")
        pos += 1
        return rest

    kind = field("kind")
    if kind not in ("compositional", "single"):
        raise ModelFormatError(f"unknown model kind: {kind}")
    variant = None
    if kind == "compositional":
        variant = field("variant")
        if variant not in VARIANTS:
            raise ModelFormatError(f"unknown variant: {variant}")
    try:
        n, h, m = (int(v) for v in field("dims").split())
    except ValueError:
        raise ModelFormatError("malformed dims line") from None

    expected_blocks = [("f.w1", h, n), ("f.b1", 1, h), ("f.w2", m, h), ("f.b2", 1, m)]
    if kind == "compositional":
        expected_blocks += [("g.w1", m, m), ("g.w2", m, m)]
    params = {}
    for name, rows, cols in expected_blocks:
        if pos >= len(lines):
            raise ModelFormatError(f"unexpected end of parameter block {name}")
        header = lines[pos].split()
        if len(header) != 4 or header[0] != "param":
            raise ModelFormatError(f"expected parameter block header, got {lines[pos]!r}")
        if header[1] != name:
            raise ModelFormatError(f"unexpected parameter block {header[1]} (expected {name})")
        if (int(header[2]), int(header[3])) != (rows, cols):
            raise ModelFormatError(
                f"parameter count disagreement in block {name}: "
                f"expected {rows}x{cols}, header says {header[2]}x{header[3]}"
            )
        pos += 1
        params[name], pos = _read_block(lines, pos, name, rows, cols)
    if pos != len(lines):
        raise ModelFormatError(f"trailing content after parameter blocks: {lines[pos]!r}")

    f = EmbeddingNet(w1=params["f.w1"], b1=params["f.b1"][0], w2=params["f.w2"], b2=params["f.b2"][0])
    if kind == "single":
        return SingleModel(f=f)
    return CompositionalModel(f=f, g_w1=params["g.w1"], g_w2=params["g.w2"], variant=variant)
