"""Bag-of-words classifier: feature vector -> tanh encoder -> dot-product logits.

Each row of the output weight matrix acts as a label vector; the probability
of class k is softmax over the dot products of the sentence representation
with the label vectors. The parallel/orthogonal decomposition of the sentence
representation against its gold label vector feeds the pair-alignment loss.

The training path builds scalar graph Nodes; evaluation uses a detached numpy
snapshot of the same parameters for speed.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, add, const, div, dot, exp, log, mul, nmax, nsum, sub, tanh, wsum
from .data import Vocab, featurize_sparse

CHECKPOINT_FORMAT_VERSION = 1

DEGENERATE_NORM_EPS = 1e-8


class DegenerateLabelVector(ValueError):
    """Label vector norm is below tolerance; callers skip the pair instead of dividing."""


@dataclass
class ModelConfig:
    vocab_size: int            # including the OOV bucket
    n_classes: int = 2
    embed_dim: int = 8
    use_hidden: bool = False   # optional extra tanh layer (embed_dim -> embed_dim)

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_classes < 1 or self.embed_dim < 1:
            raise ValueError("vocab_size, n_classes and embed_dim must be positive")

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "n_classes": self.n_classes,
                "embed_dim": self.embed_dim, "use_hidden": self.use_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """All trainable parameters as scalar graph leaves.

    embedding: vocab_size x d, enc_bias: d, optional hidden d x d (+ bias),
    classifier: n_classes x d whose row k is the label vector for class k,
    out_bias: n_classes.
    """

    def __init__(self, config: ModelConfig, seed: int):
        rng = random.Random(seed)
        d = config.embed_dim
        self.config = config
        u = lambda: const(rng.uniform(-0.1, 0.1))
        self.embedding = [[u() for _ in range(d)] for _ in range(config.vocab_size)]
        self.enc_bias = [u() for _ in range(d)]
        if config.use_hidden:
            self.hidden = [[u() for _ in range(d)] for _ in range(d)]
            self.hidden_bias = [u() for _ in range(d)]
        else:
            self.hidden = None
            self.hidden_bias = None
        self.classifier = [[u() for _ in range(d)] for _ in range(config.n_classes)]
        self.out_bias = [u() for _ in range(config.n_classes)]

    def flat(self) -> list[Node]:
        out = [p for row in self.embedding for p in row]
        out += self.enc_bias
        if self.hidden is not None:
            out += [p for row in self.hidden for p in row]
            out += self.hidden_bias
        out += [p for row in self.classifier for p in row]
        out += self.out_bias
        return out

    def n_params(self) -> int:
        return len(self.flat())

    def assert_finite(self) -> None:
        for p in self.flat():
            if not math.isfinite(p.value):
                raise FloatingPointError("non-finite parameter value")

    def snapshot(self) -> "Snapshot":
        return Snapshot(
            config=self.config,
            embedding=np.array([[p.value for p in row] for row in self.embedding]),
            enc_bias=np.array([p.value for p in self.enc_bias]),
            hidden=(np.array([[p.value for p in row] for row in self.hidden])
                    if self.hidden is not None else None),
            hidden_bias=(np.array([p.value for p in self.hidden_bias])
                         if self.hidden_bias is not None else None),
            classifier=np.array([[p.value for p in row] for row in self.classifier]),
            out_bias=np.array([p.value for p in self.out_bias]),
        )

    def load_snapshot(self, snap: "Snapshot") -> None:
        if snap.config.to_dict() != self.config.to_dict():
            raise ValueError("snapshot/model configuration mismatch")
        for row, vals in zip(self.embedding, snap.embedding):
            for p, v in zip(row, vals):
                p.value = float(v)
        for p, v in zip(self.enc_bias, snap.enc_bias):
            p.value = float(v)
        if self.hidden is not None:
            for row, vals in zip(self.hidden, snap.hidden):
                for p, v in zip(row, vals):
                    p.value = float(v)
            for p, v in zip(self.hidden_bias, snap.hidden_bias):
                p.value = float(v)
        for row, vals in zip(self.classifier, snap.classifier):
            for p, v in zip(row, vals):
                p.value = float(v)
        for p, v in zip(self.out_bias, snap.out_bias):
            p.value = float(v)


@dataclass
class Snapshot:
    """Detached f64 copy of the parameters, used for evaluation and checkpoints."""
    config: ModelConfig
    embedding: np.ndarray
    enc_bias: np.ndarray
    hidden: np.ndarray | None
    hidden_bias: np.ndarray | None
    classifier: np.ndarray
    out_bias: np.ndarray

    def encode_matrix(self, features: np.ndarray) -> np.ndarray:
        h = np.tanh(features @ self.embedding + self.enc_bias)
        if self.hidden is not None:
            h = np.tanh(h @ self.hidden.T + self.hidden_bias)
        return h

    def logits_matrix(self, features: np.ndarray) -> np.ndarray:
        return self.encode_matrix(features) @ self.classifier.T + self.out_bias

    def predict_matrix(self, features: np.ndarray) -> np.ndarray:
        # argmax breaks ties toward the lowest class index
        return np.argmax(self.logits_matrix(features), axis=1)

    def proba_matrix(self, features: np.ndarray) -> np.ndarray:
        z = self.logits_matrix(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# graph-building forward ops

def encode(x_sparse: list[tuple[int, float]], params: ModelParams) -> list[Node]:
    """Sentence representation h from sparse (vocab index, weight) features."""
    d = params.config.embed_dim
    V = params.config.vocab_size
    weights = [w for _, w in x_sparse]
    for i, _ in x_sparse:
        if not 0 <= i < V:
            raise ValueError(f"feature index {i} out of range for vocab size {V}")
    h = []
    for j in range(d):
        rows = [params.embedding[i][j] for i, _ in x_sparse]
        h.append(tanh(add(wsum(rows, weights), params.enc_bias[j])))
    if params.hidden is not None:
        h2 = []
        for j in range(d):
            h2.append(tanh(add(dot(params.hidden[j], h), params.hidden_bias[j])))
        h = h2
    return h


def encode_example(example, vocab: Vocab, params: ModelParams) -> list[Node]:
    return encode(featurize_sparse(example.tokens, vocab), params)


def logits(h: list[Node], params: ModelParams) -> list[Node]:
    return [add(dot(row, h), b) for row, b in zip(params.classifier, params.out_bias)]


def log_softmax(z: list[Node]) -> list[Node]:
    """Numerically stable log-probabilities via max-subtracted log-sum-exp."""
    m = nmax(z)
    lse = add(m, log(nsum([exp(sub(zi, m)) for zi in z])))
    return [sub(zi, lse) for zi in z]


def predict_proba(h: list[Node], params: ModelParams) -> list[Node]:
    """Class probabilities: softmax over label-vector dot products."""
    return [exp(lp) for lp in log_softmax(logits(h, params))]


def cross_entropy(z: list[Node], label: int) -> Node:
    m = nmax(z)
    lse = add(m, log(nsum([exp(sub(zi, m)) for zi in z])))
    return sub(lse, z[label])


@dataclass
class Decomposition:
    h_par: list[Node]
    h_perp: list[Node]


def decompose(h: list[Node], label: int, params: ModelParams,
              stop_grad_on_classifier: bool = False) -> Decomposition:
    """Split h into components parallel and orthogonal to the gold label vector.

    h_par = ((h . w_y) / (w_y . w_y)) w_y and h_perp = h - h_par. Raises
    DegenerateLabelVector when the label vector norm is at or below tolerance,
    so callers can skip the pair rather than divide by epsilon.
    """
    row = params.classifier[label]
    if stop_grad_on_classifier:
        row = [const(p.value) for p in row]
    q = dot(row, row)
    if q.value <= DEGENERATE_NORM_EPS ** 2:
        raise DegenerateLabelVector(
            f"label vector {label} has norm {math.sqrt(max(q.value, 0.0)):.3e}")
    coef = div(dot(h, row), q)
    h_par = [mul(coef, w_j) for w_j in row]
    h_perp = [sub(h_j, p_j) for h_j, p_j in zip(h, h_par)]
    return Decomposition(h_par=h_par, h_perp=h_perp)


def predict(x_sparse: list[tuple[int, float]], params: ModelParams) -> int:
    """Predicted class index; ties break toward the lowest class index."""
    z = logits(encode(x_sparse, params), params)
    best, arg = z[0].value, 0
    for k in range(1, len(z)):
        if z[k].value > best:
            best, arg = z[k].value, k
    return arg


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, snap: Snapshot, vocab: Vocab, extra: dict | None = None) -> None:
    """JSON checkpoint; float values round-trip bit-exactly through repr."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": snap.config.to_dict(),
        "vocab": list(vocab.tokens),
        "params": {
            "embedding": snap.embedding.tolist(),
            "enc_bias": snap.enc_bias.tolist(),
            "hidden": snap.hidden.tolist() if snap.hidden is not None else None,
            "hidden_bias": snap.hidden_bias.tolist() if snap.hidden_bias is not None else None,
            "classifier": snap.classifier.tolist(),
            "out_bias": snap.out_bias.tolist(),
        },
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Snapshot, Vocab, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = ModelConfig.from_dict(payload["model"])
    p = payload["params"]
    snap = Snapshot(
        config=config,
        embedding=np.array(p["embedding"], dtype=np.float64),
        enc_bias=np.array(p["enc_bias"], dtype=np.float64),
        hidden=np.array(p["hidden"], dtype=np.float64) if p["hidden"] is not None else None,
        hidden_bias=(np.array(p["hidden_bias"], dtype=np.float64)
                     if p["hidden_bias"] is not None else None),
        classifier=np.array(p["classifier"], dtype=np.float64),
        out_bias=np.array(p["out_bias"], dtype=np.float64),
    )
    vocab = Vocab(payload["vocab"])
    if vocab.size != config.vocab_size:
        raise ValueError("checkpoint vocab does not match model vocab_size")
    return snap, vocab, payload.get("extra", {})
