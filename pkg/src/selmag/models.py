"""Two-layer GCN encoder, softmax classifiers and source-model training."""

from __future__ import annotations

import json
import logging
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as tn
from .config import TrainConfig
from .graph import DomainSet, Graph
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

ENCODER_KEYS = ("W1", "b1", "W2", "b2")
CLASSIFIER_KEYS = ("W", "b")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Encoder:
    W1: np.ndarray | Tensor
    b1: np.ndarray | Tensor
    W2: np.ndarray | Tensor
    b2: np.ndarray | Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "Encoder":
        return cls(glorot(rng, in_dim, hidden), np.zeros((1, hidden)),
                   glorot(rng, hidden, hidden), np.zeros((1, hidden)))

    @property
    def hidden(self) -> int:
        return _val(self.W2).shape[1]

    def params(self) -> dict[str, np.ndarray | Tensor]:
        return {k: getattr(self, k) for k in ENCODER_KEYS}

    def copy(self) -> "Encoder":
        return Encoder(*(np.array(_val(getattr(self, k))) for k in ENCODER_KEYS))


@dataclass
class Classifier:
    W: np.ndarray | Tensor
    b: np.ndarray | Tensor

    @classmethod
    def init(cls, hidden: int, num_classes: int, rng: np.random.Generator) -> "Classifier":
        return cls(glorot(rng, hidden, num_classes), np.zeros((1, num_classes)))

    def params(self) -> dict[str, np.ndarray | Tensor]:
        return {k: getattr(self, k) for k in CLASSIFIER_KEYS}

    def copy(self) -> "Classifier":
        return Classifier(np.array(_val(self.W)), np.array(_val(self.b)))


@dataclass
class Hypothesis:
    encoder: Encoder
    classifier: Classifier

    def params(self) -> dict[str, np.ndarray | Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"cls.{k}": v for k, v in self.classifier.params().items()})
        return out

    @classmethod
    def from_params(cls, p: Mapping[str, np.ndarray | Tensor]) -> "Hypothesis":
        return cls(Encoder(*(p[f"enc.{k}"] for k in ENCODER_KEYS)),
                   Classifier(*(p[f"cls.{k}"] for k in CLASSIFIER_KEYS)))

    def copy(self) -> "Hypothesis":
        return Hypothesis(self.encoder.copy(), self.classifier.copy())


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else x


_propagated: "weakref.WeakKeyDictionary[Graph, np.ndarray]" = weakref.WeakKeyDictionary()


def propagated_features(graph: Graph) -> np.ndarray:
    """``A_hat @ F``, cached per graph object."""
    out = _propagated.get(graph)
    if out is None:
        out = graph.norm_adj @ graph.features
        out.setflags(write=False)
        _propagated[graph] = out
    return out


def encode(encoder: Encoder, graph: Graph, features: np.ndarray | None = None,
           dropout_mask: np.ndarray | None = None) -> Tensor:
    """``A_hat . ReLU(A_hat . F . W1 + b1) . W2 + b2``; ``features`` overrides F."""
    d = _val(encoder.W1).shape[0]
    feats = graph.features if features is None else features
    if feats.shape[1] != d:
        raise tn.TapeError(f"features have {feats.shape[1]} columns, encoder expects {d}")
    af = propagated_features(graph) if features is None else graph.norm_adj @ features
    hidden = tn.relu(tn.add(tn.matmul(af, encoder.W1), encoder.b1))
    if dropout_mask is not None:
        hidden = tn.mul(hidden, dropout_mask)
    return tn.add(tn.matmul(tn.matmul(graph.norm_adj, hidden), encoder.W2), encoder.b2)


def encode_np(encoder: Encoder, graph: Graph) -> np.ndarray:
    """Tape-free forward pass for frozen encoders."""
    W1, b1, W2, b2 = (_val(getattr(encoder, k)) for k in ENCODER_KEYS)
    hidden = np.maximum(propagated_features(graph) @ W1 + b1, 0.0)
    return graph.norm_adj @ hidden @ W2 + b2


def classify(classifier: Classifier, x) -> Tensor:
    x = tn.const(x)
    if x.shape[1] != _val(classifier.W).shape[0]:
        raise tn.TapeError(f"embeddings have {x.shape[1]} columns, classifier expects "
                           f"{_val(classifier.W).shape[0]}")
    return tn.softmax_rows(tn.add(tn.matmul(x, classifier.W), classifier.b))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_np(hyp: Hypothesis, graph: Graph) -> np.ndarray:
    x = encode_np(hyp.encoder, graph)
    return softmax_np(x @ _val(hyp.classifier.W) + _val(hyp.classifier.b))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ce_loss(probs, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the masked nodes."""
    probs = tn.const(probs)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.arange(len(labels)) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("ce_loss: mask selects no nodes")
    picked = tn.log(tn.slice_rows(probs, idx))
    target = one_hot(labels[idx], probs.shape[1])
    return tn.scalar_mul(tn.sum(tn.mul(picked, target)), -1.0 / idx.size)


def _as_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tn.param(v) for k, v in params.items()}


@dataclass
class TrainResult:
    encoder: Encoder
    classifiers: list[Classifier]
    losses: list[float] = field(default_factory=list)
    epochs: int = 0


def _fit(params: dict[str, np.ndarray], loss_fn, cfg: TrainConfig, epochs: int,
         what: str) -> tuple[list[float], int]:
    opt = Adam(params, lr=cfg.source_lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    best = np.inf
    stale = 0
    for epoch in range(epochs):
        tensors = _as_tensors(params)
        loss = loss_fn(tensors, epoch)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"{what}: non-finite loss at epoch {epoch}")
        losses.append(value)
        store = tn.backward(loss)
        opt.step({k: store[t] for k, t in tensors.items()})
        if best - value < cfg.early_stop_delta:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
        else:
            stale = 0
        best = min(best, value)
    return losses, len(losses)


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    if p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def train_source_models(ds: DomainSet, cfg: TrainConfig, epochs: int | None = None) -> TrainResult:
    """Shared encoder with one classifier per source, trained on labeled source nodes."""
    for k, g in enumerate(ds.sources):
        if g.labels is None or not g.labeled_mask.any():
            raise ValueError(f"source {k} has no labeled nodes")
    rng = np.random.default_rng(cfg.seed)
    enc = Encoder.init(ds.feature_dim, cfg.hidden_dim, rng)
    clss = [Classifier.init(cfg.hidden_dim, ds.num_classes, rng) for _ in ds.sources]
    params = {f"enc.{k}": v for k, v in enc.params().items()}
    for i, c in enumerate(clss):
        params.update({f"cls{i}.{k}": v for k, v in c.params().items()})
    drop_rng = np.random.default_rng(cfg.seed + 1)

    def loss_fn(t: dict[str, Tensor], epoch: int) -> Tensor:
        e = Encoder(*(t[f"enc.{k}"] for k in ENCODER_KEYS))
        total = None
        for i, g in enumerate(ds.sources):
            mask = _dropout_mask(drop_rng, (g.num_nodes, cfg.hidden_dim), cfg.dropout)
            c = Classifier(*(t[f"cls{i}.{k}"] for k in CLASSIFIER_KEYS))
            term = ce_loss(classify(c, encode(e, g, dropout_mask=mask)), g.labels, g.labeled_mask)
            total = term if total is None else tn.add(total, term)
        return total

    n_epochs = cfg.source_epochs if epochs is None else epochs
    losses, done = _fit(params, loss_fn, cfg, n_epochs, "source training")
    enc = Encoder(*(params[f"enc.{k}"] for k in ENCODER_KEYS))
    clss = [Classifier(*(params[f"cls{i}.{k}"] for k in CLASSIFIER_KEYS)) for i in range(len(ds.sources))]
    log.info("source models: %d epochs, final loss %.4f", done, losses[-1] if losses else float("nan"))
    return TrainResult(enc, clss, losses, done)


def train_pooled_model(ds: DomainSet, cfg: TrainConfig, epochs: int | None = None) -> Hypothesis:
    """One encoder and one classifier fit on the union of labeled source nodes."""
    rng = np.random.default_rng(cfg.seed + 17)
    enc = Encoder.init(ds.feature_dim, cfg.hidden_dim, rng)
    cls = Classifier.init(cfg.hidden_dim, ds.num_classes, rng)
    params = {f"enc.{k}": v for k, v in enc.params().items()}
    params.update({f"cls.{k}": v for k, v in cls.params().items()})
    counts = np.array([g.labeled_mask.sum() for g in ds.sources], dtype=float)
    weights = counts / counts.sum()
    drop_rng = np.random.default_rng(cfg.seed + 18)

    def loss_fn(t: dict[str, Tensor], epoch: int) -> Tensor:
        hyp = Hypothesis.from_params(t)
        total = None
        for w, g in zip(weights, ds.sources):
            mask = _dropout_mask(drop_rng, (g.num_nodes, cfg.hidden_dim), cfg.dropout)
            term = tn.scalar_mul(ce_loss(classify(hyp.classifier, encode(hyp.encoder, g, dropout_mask=mask)),
                                         g.labels, g.labeled_mask), w)
            total = term if total is None else tn.add(total, term)
        return total

    n_epochs = cfg.source_epochs if epochs is None else epochs
    _fit(params, loss_fn, cfg, n_epochs, "pooled training")
    return Hypothesis.from_params(params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "selmag-params-v1"


def save_params(path: Path, params: Mapping[str, np.ndarray]) -> None:
    """JSON map ``name -> {"shape": [r, c], "values": row-major floats}``."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "params": {k: {"shape": list(np.shape(_val(v))),
                       "values": [float(x) for x in np.ravel(_val(v))]}
                   for k, v in sorted(params.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_params(path: Path) -> dict[str, np.ndarray]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {payload.get('format')!r}")
    out = {}
    for k, entry in payload["params"].items():
        out[k] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return out


def source_params(result: TrainResult) -> dict[str, np.ndarray]:
    out = {f"enc.{k}": _val(v) for k, v in result.encoder.params().items()}
    for i, c in enumerate(result.classifiers):
        out.update({f"cls{i}.{k}": _val(v) for k, v in c.params().items()})
    return out


def source_result_from_params(p: Mapping[str, np.ndarray]) -> TrainResult:
    enc = Encoder(*(p[f"enc.{k}"] for k in ENCODER_KEYS))
    n = len({k.split(".")[0] for k in p if k.startswith("cls")})
    clss = [Classifier(*(p[f"cls{i}.{k}"] for k in CLASSIFIER_KEYS)) for i in range(n)]
    return TrainResult(enc, clss)
