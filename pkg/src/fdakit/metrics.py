"""Rank-based attack metrics and feature-similarity statistics.

Class ranks are 1-based positions in a descending sort of confidences, with
ties resolved in favour of the lower class index.  Every function here is a
pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class NotFooledError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionPair:
    clean_probs: np.ndarray
    adv_probs: np.ndarray

    @property
    def clean_label(self) -> int:
        return int(np.argmax(self.clean_probs))

    @property
    def adv_label(self) -> int:
        return int(np.argmax(self.adv_probs))

    @property
    def fooled(self) -> bool:
        return self.clean_label != self.adv_label


def rank_of(probs, label: int) -> int:
    p = np.asarray(probs)
    if not 0 <= label < len(p):
        raise ValueError(f"label {label} out of range for {len(p)} classes")
    v = p[label]
    return int(1 + np.count_nonzero(p > v) + np.count_nonzero(p[:label] == v))


def ranks_of(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_of` for an N x C matrix."""
    p = np.asarray(probs)
    labels = np.asarray(labels)
    n, c = p.shape
    v = p[np.arange(n), labels][:, None]
    lower = np.arange(c)[None, :] < labels[:, None]
    return 1 + (p > v).sum(axis=1) + ((p == v) & lower).sum(axis=1)


def olnr(pair: PredictionPair) -> int:
    """Rank of the clean prediction in the adversarial ordering."""
    if not pair.fooled:
        raise NotFooledError("OLNR is only defined for fooled pairs")
    return rank_of(pair.adv_probs, pair.clean_label)


def nlor(pair: PredictionPair) -> int:
    """Rank the adversarial prediction held in the clean ordering."""
    if not pair.fooled:
        raise NotFooledError("NLOR is only defined for fooled pairs")
    return rank_of(pair.clean_probs, pair.adv_label)


def _stack(pairs: Sequence[PredictionPair]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise ValueError("need at least one prediction pair")
    return np.stack([p.clean_probs for p in pairs]), np.stack([p.adv_probs for p in pairs])


def fooling_rate(pairs: Sequence[PredictionPair]) -> float:
    clean, adv = _stack(pairs)
    return 100.0 * float(np.mean(clean.argmax(axis=1) != adv.argmax(axis=1)))


def fooling_rate_at_k(pairs: Sequence[PredictionPair], k: int) -> float:
    """Percent of pairs whose clean top-1 label is outside the adversarial top-k."""
    clean, adv = _stack(pairs)
    if not 1 <= k <= clean.shape[1]:
        raise ValueError(f"k={k} outside [1, {clean.shape[1]}]")
    r = ranks_of(adv, clean.argmax(axis=1))
    return 100.0 * float(np.mean(r > k))


def feature_similarity(clean_trace, adv_trace) -> list[tuple[float, float]]:
    """Per-layer (cosine, normalized L2) between flattened activations.

    Accepts ActivationTrace objects or plain lists of arrays.
    """
    a_list = _trace_arrays(clean_trace)
    b_list = _trace_arrays(adv_trace)
    if len(a_list) != len(b_list):
        raise ValueError(f"trace length mismatch: {len(a_list)} vs {len(b_list)}")
    out = []
    for a, b in zip(a_list, b_list):
        a = a.astype(np.float64).ravel()
        b = b.astype(np.float64).ravel()
        na = np.linalg.norm(a)
        cos = float(a @ b / (na * np.linalg.norm(b) + 1e-12))
        nl2 = float(np.linalg.norm(a - b) / (na + 1e-12))
        out.append((cos, nl2))
    return out


def batch_feature_similarity(clean_acts: list, adv_acts: list) -> tuple[np.ndarray, np.ndarray]:
    """Per-image, per-layer statistics for batched activations: two N x L arrays."""
    if len(clean_acts) != len(adv_acts):
        raise ValueError(f"trace length mismatch: {len(clean_acts)} vs {len(adv_acts)}")
    cos, nl2 = [], []
    for a, b in zip(clean_acts, adv_acts):
        a = a.reshape(len(a), -1).astype(np.float64)
        b = b.reshape(len(b), -1).astype(np.float64)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        cos.append((a * b).sum(axis=1) / (na * nb + 1e-12))
        nl2.append(np.linalg.norm(a - b, axis=1) / (na + 1e-12))
    return np.stack(cos, axis=1), np.stack(nl2, axis=1)


def _trace_arrays(trace) -> list[np.ndarray]:
    if hasattr(trace, "arrays"):
        return trace.arrays()
    return [np.asarray(getattr(t, "data", t)) for t in trace]


@dataclass
class MetricsReport:
    n_images: int
    n_fooled: int
    fooling_rate: float
    mean_olnr: Optional[float]
    mean_nlor: Optional[float]
    fr_at_k: list  # (k, percent)
    feature_similarity: list = field(default_factory=list)  # (layer_id, cosine_mean, normalized_l2_mean)

    def min_rank_score(self) -> Optional[float]:
        if self.mean_olnr is None:
            return None
        return min(self.mean_olnr, self.mean_nlor)

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_fooled": self.n_fooled,
            "fooling_rate": self.fooling_rate,
            "mean_olnr": self.mean_olnr,
            "mean_nlor": self.mean_nlor,
            "fr_at_k": [[k, v] for k, v in self.fr_at_k],
            "feature_similarity": [list(row) for row in self.feature_similarity],
        }


def aggregate(pairs: Sequence[PredictionPair], clean_acts=None, adv_acts=None,
              layer_ids=None) -> MetricsReport:
    """Collect every metric for a set of pairs.

    OLNR and NLOR are averaged over fooled pairs only and are None when no
    pair is fooled.  ``clean_acts``/``adv_acts`` are optional lists of batched
    activations (one array per hooked layer) for the similarity statistics.
    """
    clean, adv = _stack(pairs)
    return aggregate_arrays(clean, adv, clean_acts, adv_acts, layer_ids)


def aggregate_arrays(clean: np.ndarray, adv: np.ndarray, clean_acts=None, adv_acts=None,
                     layer_ids=None) -> MetricsReport:
    n, c = clean.shape
    old = clean.argmax(axis=1)
    new = adv.argmax(axis=1)
    fooled = old != new
    n_fooled = int(fooled.sum())
    if n_fooled:
        mean_olnr = float(ranks_of(adv[fooled], old[fooled]).mean())
        mean_nlor = float(ranks_of(clean[fooled], new[fooled]).mean())
    else:
        mean_olnr = mean_nlor = None
    old_rank_adv = ranks_of(adv, old)
    fr_k = [(k, 100.0 * float(np.mean(old_rank_adv > k))) for k in range(1, c + 1)]
    sims = []
    if clean_acts is not None and adv_acts is not None:
        cos, nl2 = batch_feature_similarity(clean_acts, adv_acts)
        ids = layer_ids if layer_ids is not None else list(range(cos.shape[1]))
        sims = [(int(lid), float(cos[:, j].mean()), float(nl2[:, j].mean())) for j, lid in enumerate(ids)]
    return MetricsReport(n, n_fooled, 100.0 * n_fooled / n, mean_olnr, mean_nlor, fr_k, sims)
