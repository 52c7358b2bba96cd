"""Feature Disruptive Attack and PGD baselines under an L-infinity budget.

All attacks share one optimizer: start at the clean image, take signed
gradient steps of ``eps_iter / 255`` that *minimize* the method objective,
and project back into the ``epsilon / 255`` ball around the clean image and
into [0, 1] after each step.

Batched inputs (N x H x W x C) are attacked jointly.  Per-image objectives
are summed before backward, which leaves every image's gradient untouched,
so a batch of N behaves exactly like N separate runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import ActivationTrace, Model, forward, forward_with_trace
from .tensor import Tape, Tensor

METHODS = ("fda", "pgd-ml", "pgd-ll", "pgd-cw")
CENTRAL_TENDENCIES = ("spatial-mean", "median", "iqm")
_CT_ALIASES = {"mean": "spatial-mean", "spatial_mean": "spatial-mean"}

LOG_EPS = 1e-8
NORM_DELTA = 1e-12


class AttackError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class AttackBudget:
    """(epsilon, nb_iter, eps_iter), with both radii in 0-255 pixel units."""

    epsilon: float
    nb_iter: int
    eps_iter: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.nb_iter < 1 or int(self.nb_iter) != self.nb_iter:
            raise ValueError(f"nb_iter must be a positive integer, got {self.nb_iter}")
        if self.eps_iter <= 0:
            raise ValueError(f"eps_iter must be > 0, got {self.eps_iter}")

    @property
    def eps_internal(self) -> float:
        return self.epsilon / 255.0

    @property
    def step_internal(self) -> float:
        return self.eps_iter / 255.0

    def as_tuple(self) -> tuple:
        return (float(self.epsilon), int(self.nb_iter), float(self.eps_iter))


@dataclass(frozen=True)
class AttackConfig:
    method: str
    budget: AttackBudget
    central_tendency: str = "spatial-mean"
    hook_subset: Optional[tuple] = None
    seed: int = 0
    # FDA ablation switches
    include_dense: bool = True
    normalize_by_size: bool = False
    recompute_support: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        ct = _CT_ALIASES.get(self.central_tendency, self.central_tendency)
        if ct not in CENTRAL_TENDENCIES:
            raise ValueError(f"unknown central tendency {self.central_tendency!r}")
        object.__setattr__(self, "central_tendency", ct)
        if self.hook_subset is not None:
            object.__setattr__(self, "hook_subset", tuple(self.hook_subset))


# ---------------------------------------------------------------- support sets


def central_tendency(activation: np.ndarray, mode: str = "spatial-mean", batched: bool = False) -> np.ndarray:
    """Per-location statistic across channels.

    H x W x C maps reduce over C to H x W.  Flat (dense) activations reduce to
    a single scalar over all units.  With ``batched`` the leading axis is kept.
    """
    mode = _CT_ALIASES.get(mode, mode)
    a = np.asarray(activation)
    spatial_ndim = 4 if batched else 3
    if a.ndim == spatial_ndim:
        vals = a
    else:
        vals = a.reshape(a.shape[0], -1) if batched else a.reshape(-1)
    if mode == "spatial-mean":
        return vals.mean(axis=-1)
    if mode == "median":
        return np.median(vals, axis=-1)
    if mode == "iqm":
        return _interquartile_mean(vals)
    raise ValueError(f"unknown central tendency {mode!r}")


def _interquartile_mean(vals: np.ndarray) -> np.ndarray:
    q1, q3 = np.quantile(vals, [0.25, 0.75], axis=-1, keepdims=True)
    inside = (vals >= q1) & (vals <= q3)
    count = inside.sum(axis=-1)
    total = np.where(inside, vals, 0).sum(axis=-1)
    # two distinct channels leave nothing inside [Q1, Q3]; fall back to the median
    return np.where(count > 0, total / np.maximum(count, 1), np.median(vals, axis=-1)).astype(vals.dtype)


@dataclass
class MaskEntry:
    layer_id: int
    support: np.ndarray
    nonsupport: np.ndarray
    c_values: np.ndarray
    batched: bool = False

    @property
    def excluded(self) -> np.ndarray:
        return ~(self.support | self.nonsupport)

    @property
    def empty(self) -> np.ndarray:
        """True where the support or non-support set is empty (per sample when batched)."""
        axes = tuple(range(1, self.support.ndim)) if self.batched else None
        return ~self.support.any(axis=axes) | ~self.nonsupport.any(axis=axes)


@dataclass
class SupportMask:
    entries: list
    mode: str = "spatial-mean"

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def layer(self, layer_id: int) -> MaskEntry:
        for e in self.entries:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)


def layer_mask(clean_activation: np.ndarray, mode: str = "spatial-mean", layer_id: int = -1,
               batched: bool = False) -> MaskEntry:
    a = np.asarray(clean_activation)
    c = central_tendency(a, mode, batched=batched)
    spatial = a.ndim == (4 if batched else 3)
    if spatial:
        cb = c[..., None]
    else:
        cb = c.reshape(c.shape + (1,) * (a.ndim - c.ndim))
    return MaskEntry(layer_id, a > cb, a < cb, c, batched)


def support_mask(clean_trace: ActivationTrace, mode: str = "spatial-mean", batched: bool = False,
                 include_dense: bool = True) -> SupportMask:
    """Split each hooked clean activation into support (> C) and non-support (< C).

    Coordinates equal to C belong to neither set.
    """
    entries = []
    for lid, act in clean_trace:
        a = act.data if isinstance(act, Tensor) else np.asarray(act)
        spatial = a.ndim == (4 if batched else 3)
        if not spatial and not include_dense:
            continue
        entries.append(layer_mask(a, mode, lid, batched))
    return SupportMask(entries, _CT_ALIASES.get(mode, mode))


# ---------------------------------------------------------------- objectives


def _fda_layer_terms(adv: Tensor, entry: MaskEntry, normalize_by_size: bool = False) -> Tensor:
    """Per-sample log-ratio vector (N,) for a batched activation."""
    non = T.masked_l2_norm(adv, entry.nonsupport, NORM_DELTA, per_sample=True)
    sup = T.masked_l2_norm(adv, entry.support, NORM_DELTA, per_sample=True)
    value = T.sub(T.log(non, stabilize=LOG_EPS), T.log(sup, stabilize=LOG_EPS))
    if normalize_by_size:
        axes = tuple(range(1, entry.support.ndim))
        n_non = np.maximum(entry.nonsupport.sum(axis=axes), 1)
        n_sup = np.maximum(entry.support.sum(axis=axes), 1)
        # dividing each norm by its set size only shifts the log-ratio by a constant
        value = T.add(value, Tensor((np.log(n_sup) - np.log(n_non)).astype(adv.dtype)))
    valid = (~entry.empty).astype(adv.dtype)
    return T.mul(value, Tensor(valid))


def fda_layer_objective(adv_activation: Tensor, mask: MaskEntry, normalize_by_size: bool = False) -> Tensor:
    """log D(non-support of adv) - log D(support of adv); 0 when either set is empty.

    The quantity the attack wants to increase for one layer.  ``mask`` is the
    single-image (unbatched) entry built from the clean activation.
    """
    if mask.batched:
        return T.sum(_fda_layer_terms(adv_activation, mask, normalize_by_size))
    batched = MaskEntry(mask.layer_id, mask.support[None], mask.nonsupport[None], mask.c_values, True)
    adv = T.reshape(adv_activation, (1,) + adv_activation.shape)
    return T.sum(_fda_layer_terms(adv, batched, normalize_by_size))


def _fda_per_sample(trace: ActivationTrace, mask: SupportMask, normalize_by_size=False) -> Tensor:
    acts = dict(trace.entries)
    total = None
    for entry in mask:
        if entry.layer_id not in acts:
            continue
        term = _fda_layer_terms(acts[entry.layer_id], entry, normalize_by_size)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no hooked layer of the trace is covered by the support mask")
    return T.neg(total)


def fda_objective(model: Model, x_adv: Tensor, mask: SupportMask, hook_subset=None,
                  normalize_by_size: bool = False) -> Tensor:
    """Negated sum of per-layer FDA objectives; the attack minimizes this.

    Accepts one image with an unbatched mask, or a batch with a batched mask
    (the result is then summed over the batch).
    """
    _, trace = forward_with_trace(model, x_adv, hook_subset)
    batched = bool(mask.entries) and mask.entries[0].batched
    if batched:
        return T.sum(_fda_per_sample(trace, mask, normalize_by_size))
    entries = [(lid, T.reshape(a, (1,) + a.shape)) for lid, a in trace]
    bmask = SupportMask([MaskEntry(e.layer_id, e.support[None], e.nonsupport[None], e.c_values, True)
                         for e in mask], mask.mode)
    return T.sum(_fda_per_sample(ActivationTrace(entries), bmask, normalize_by_size))


def pgd_ml_objective(model: Model, x_adv: Tensor, y_clean_pred) -> Tensor:
    """Negated cross-entropy on the clean prediction."""
    return T.neg(T.softmax_cross_entropy(forward(model, x_adv), y_clean_pred))


def pgd_ll_objective(model: Model, x_adv: Tensor, y_least_likely) -> Tensor:
    """Cross-entropy on the clean least-likely class."""
    return T.softmax_cross_entropy(forward(model, x_adv), y_least_likely)


def cw_objective(model: Model, x_adv: Tensor, y_clean_pred) -> Tensor:
    """Logit margin Z[y] - max_{j != y} Z[j]; negative once misclassified."""
    return T.margin(forward(model, x_adv), y_clean_pred)


def least_likely(probs: np.ndarray) -> np.ndarray:
    """argmin over classes, lowest index on ties."""
    return np.argmin(probs, axis=-1)


# ---------------------------------------------------------------- optimizer


def project_linf(x_adv: np.ndarray, x_clean: np.ndarray, eps_internal: float) -> np.ndarray:
    """Clamp into the L-inf ball around ``x_clean``, then into [0, 1]."""
    x_adv = np.asarray(x_adv)
    x_clean = np.asarray(x_clean, dtype=x_adv.dtype)
    if x_adv.shape != x_clean.shape:
        raise T.ShapeError(f"project_linf: shapes differ {x_adv.shape} vs {x_clean.shape}")
    out = np.clip(x_adv, x_clean - eps_internal, x_clean + eps_internal)
    return np.clip(out, 0.0, 1.0).astype(x_adv.dtype)


@dataclass
class AdversarialExample:
    clean: np.ndarray
    adv: np.ndarray
    clean_probs: np.ndarray
    adv_probs: np.ndarray
    objective_trajectory: list
    empty_layers: list = field(default_factory=list)  # FDA layers skipped for empty sets

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.adv.astype(np.float64) - self.clean)))


@dataclass
class BatchAttackResult:
    clean: np.ndarray
    adv: np.ndarray
    clean_probs: np.ndarray
    adv_probs: np.ndarray
    trajectories: np.ndarray  # N x (nb_iter + 1)
    empty_layers: list  # per image: layer ids whose FDA term was dropped

    def __len__(self):
        return len(self.adv)

    def example(self, i: int) -> AdversarialExample:
        return AdversarialExample(self.clean[i], self.adv[i], self.clean_probs[i], self.adv_probs[i],
                                  self.trajectories[i].tolist(), self.empty_layers[i])

    @property
    def linf(self) -> np.ndarray:
        diff = np.abs(self.adv.astype(np.float64) - self.clean.astype(np.float64))
        return diff.reshape(len(diff), -1).max(axis=1)


def _objective(method, model, x: Tensor, ctx, config) -> tuple[Tensor, np.ndarray]:
    """Summed objective tensor and its per-image values."""
    if method == "fda":
        per = _fda_per_sample(forward_with_trace(model, x, config.hook_subset)[1], ctx["mask"],
                              config.normalize_by_size)
        return T.sum(per), per.data.copy()
    logits = forward(model, x)
    if method == "pgd-ml":
        vals = -T.cross_entropy_per_sample(logits, ctx["clean_pred"])
        return T.neg(T.softmax_cross_entropy(logits, ctx["clean_pred"])), vals
    if method == "pgd-ll":
        vals = T.cross_entropy_per_sample(logits, ctx["least_likely"])
        return T.softmax_cross_entropy(logits, ctx["least_likely"]), vals
    z = logits.data
    rows = np.arange(len(z))
    others = z.copy()
    others[rows, ctx["clean_pred"]] = -np.inf
    vals = z[rows, ctx["clean_pred"]] - others.max(axis=1)
    return T.margin(logits, ctx["clean_pred"]), vals


def _fda_mask(model, images: np.ndarray, config: AttackConfig) -> SupportMask:
    _, trace = forward_with_trace(model, Tensor(images), config.hook_subset)
    return support_mask(trace, config.central_tendency, batched=True, include_dense=config.include_dense)


def run_attack_batch(model: Model, images: np.ndarray, config: AttackConfig) -> BatchAttackResult:
    """Attack a batch N x H x W x C of clean images in [0, 1]."""
    clean = np.asarray(images, dtype=np.float32)
    budget = config.budget
    eps, step = budget.eps_internal, budget.step_internal
    clean_logits = forward(model, Tensor(clean)).data
    clean_probs = T.softmax_np(clean_logits)
    ctx: dict = {}
    if config.method == "fda":
        # labels are never consulted: the objective is built from activations alone
        ctx["mask"] = _fda_mask(model, clean, config)
    else:
        ctx["clean_pred"] = np.argmax(clean_probs, axis=1)
        ctx["least_likely"] = least_likely(clean_probs)

    x = clean.copy()
    trajectory = []
    for it in range(budget.nb_iter + 1):
        if config.method == "fda" and config.recompute_support and it > 0:
            ctx["mask"] = _fda_mask(model, x, config)
        xt = Tensor(x, requires_grad=True)
        final = it == budget.nb_iter
        with Tape() as tape:
            total, per = _objective(config.method, model, xt, ctx, config)
        trajectory.append(per)
        if not np.all(np.isfinite(per)):
            raise AttackError(f"non-finite {config.method} objective at iteration {it}: {per}",
                              np.stack(trajectory, axis=1))
        if final:
            break
        tape.backward(total)
        grad = xt.grad if xt.grad is not None else np.zeros_like(x)
        x = project_linf(x - step * np.sign(grad).astype(x.dtype), clean, eps)

    adv_probs = T.softmax_np(forward(model, Tensor(x)).data)
    if config.method == "fda":
        empties = np.stack([e.empty for e in ctx["mask"]], axis=1)
        ids = [e.layer_id for e in ctx["mask"]]
        empty_layers = [[ids[j] for j in np.flatnonzero(row)] for row in empties]
    else:
        empty_layers = [[] for _ in range(len(x))]
    return BatchAttackResult(clean, x, clean_probs, adv_probs, np.stack(trajectory, axis=1), empty_layers)


def run_attack(model: Model, image: np.ndarray, config: AttackConfig, label_info=None) -> AdversarialExample:
    """Attack one H x W x C image.

    ``label_info`` is accepted for interface symmetry; every method derives
    its target (clean prediction or least-likely class) from the clean image,
    and FDA uses no label at all.
    """
    res = run_attack_batch(model, np.asarray(image, dtype=np.float32)[None], config)
    return res.example(0)


def run_attack_chunked(model: Model, images: np.ndarray, config: AttackConfig,
                       chunk: int = 128) -> BatchAttackResult:
    parts = [run_attack_batch(model, images[s:s + chunk], config) for s in range(0, len(images), chunk)]
    return concat_results(parts)


def concat_results(parts: list) -> BatchAttackResult:
    return BatchAttackResult(
        np.concatenate([p.clean for p in parts]),
        np.concatenate([p.adv for p in parts]),
        np.concatenate([p.clean_probs for p in parts]),
        np.concatenate([p.adv_probs for p in parts]),
        np.concatenate([p.trajectories for p in parts]),
        [e for p in parts for e in p.empty_layers],
    )
