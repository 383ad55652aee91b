"""Weighted pseudo-labels from source classifiers and the distillation loss."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .models import Classifier, _val, softmax_np
from .tensor import Tensor

_kd_calls = 0


def kd_call_count() -> int:
    """How many times :func:`kd_loss` has been evaluated in this process."""
    return _kd_calls


def source_predictions(target_embeddings: np.ndarray, classifiers: list[Classifier]) -> list[np.ndarray]:
    """Each source classifier applied to the target graph's shared-encoder embeddings."""
    return [softmax_np(target_embeddings @ _val(c.W) + _val(c.b)) for c in classifiers]


def pseudo_labels(predictions: list[np.ndarray], s_global) -> Tensor:
    """Mixture ``sum_k s_global[k] * predictions[k]``; tape-connected to ``s_global``."""
    if not predictions:
        raise ValueError("pseudo_labels needs at least one source")
    weights = s_global if isinstance(s_global, Tensor) else tn.const(
        np.asarray(s_global, dtype=np.float64).reshape(-1, 1))
    if weights.shape != (len(predictions), 1):
        raise ValueError(f"expected {len(predictions)} source weights, got shape {weights.shape}")
    total = float(weights.value.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"source weights sum to {total}, not 1")
    out = None
    for k, p in enumerate(predictions):
        term = tn.mul(p, tn.slice_rows(weights, [k]))
        out = term if out is None else tn.add(out, term)
    return out


def kd_loss(predictions, pseudo) -> Tensor:
    """Mean over nodes of the cross-entropy of ``predictions`` against soft labels ``pseudo``."""
    global _kd_calls
    _kd_calls += 1
    predictions = tn.const(predictions)
    pseudo = tn.const(pseudo)
    if predictions.shape != pseudo.shape:
        raise ValueError(f"shape mismatch: predictions {predictions.shape}, pseudo {pseudo.shape}")
    return tn.neg(tn.mean(tn.sum(tn.mul(tn.log(predictions), pseudo), axis=1)))
