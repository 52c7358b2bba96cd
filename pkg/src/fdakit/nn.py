"""Small convolutional classifiers built on :mod:`fdakit.tensor`.

Activations are captured at the output of every ReLU ("hooks").  Those
captured tensors are what the feature attack reads and what the
feature-similarity statistics compare.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    cout: int
    stride: int = 1
    padding: int = 0
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class ReLU:
    type: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: Optional[int] = None
    type: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class Flatten:
    type: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class Dense:
    units: int
    type: str = field(default="dense", init=False)


LayerSpec = Union[Conv, ReLU, MaxPool, Flatten, Dense]
_LAYER_TYPES = {"conv": Conv, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten, "dense": Dense}


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        layers = []
        for i, spec in enumerate(d["layers"]):
            spec = dict(spec)
            kind = spec.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise ArchitectureError(f"layer {i}: unknown layer type {kind!r}")
            try:
                layers.append(_LAYER_TYPES[kind](**spec))
            except TypeError as exc:
                raise ArchitectureError(f"layer {i}: {exc}") from None
        return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]), d.get("name", "custom"))

    @property
    def hook_layer_ids(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, ReLU)]

    def shapes(self) -> list[tuple]:
        """Output shape of each layer; raises ArchitectureError naming the bad layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ArchitectureError(f"layer {i}: conv needs an HxWxC input, got {shape}")
                h, w, _ = shape
                ho = T.conv_output_size(h, layer.kh, layer.stride, layer.padding)
                wo = T.conv_output_size(w, layer.kw, layer.stride, layer.padding)
                if ho < 1 or wo < 1 or layer.stride < 1:
                    raise ArchitectureError(f"layer {i}: conv output extent {ho}x{wo} from input {shape}")
                shape = (ho, wo, layer.cout)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ArchitectureError(f"layer {i}: maxpool needs an HxWxC input, got {shape}")
                h, w, c = shape
                s = layer.stride or layer.window
                if layer.window > h or layer.window > w:
                    raise ArchitectureError(f"layer {i}: pool window {layer.window} exceeds {h}x{w}")
                shape = ((h - layer.window) // s + 1, (w - layer.window) // s + 1, c)
            elif isinstance(layer, Flatten):
                shape = (math.prod(shape),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ArchitectureError(f"layer {i}: dense needs a flat input, got {shape}; add Flatten")
                shape = (layer.units,)
            out.append(shape)
        return out

    def validate(self):
        shapes = self.shapes()
        if not shapes or shapes[-1] != (self.num_classes,):
            got = shapes[-1] if shapes else None
            raise ArchitectureError(
                f"layer {len(self.layers) - 1}: final output {got} must be ({self.num_classes},) logits")
        if not self.hook_layer_ids:
            raise ArchitectureError("architecture has no ReLU; at least one nonlinearity hook is required")
        if isinstance(self.layers[-1], ReLU):
            raise ArchitectureError(f"layer {len(self.layers) - 1}: logits must not pass through a ReLU")

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        prev = self.input_shape
        for i, (layer, out) in enumerate(zip(self.layers, self.shapes())):
            if isinstance(layer, Conv):
                shapes[f"layer{i}.weight"] = (layer.kh, layer.kw, prev[2], layer.cout)
                shapes[f"layer{i}.bias"] = (layer.cout,)
            elif isinstance(layer, Dense):
                shapes[f"layer{i}.weight"] = (prev[0], layer.units)
                shapes[f"layer{i}.bias"] = (layer.units,)
            prev = out
        return shapes


def mnist_cnn() -> Architecture:
    return Architecture(
        [Conv(5, 5, 32, 1, 2), ReLU(), MaxPool(2),
         Conv(5, 5, 64, 1, 2), ReLU(), MaxPool(2),
         Flatten(), Dense(256), ReLU(), Dense(10)],
        (28, 28, 1), 10, name="mnist-cnn")


def cifar_cnn() -> Architecture:
    return Architecture(
        [Conv(3, 3, 32, 1, 1), ReLU(), MaxPool(2),
         Conv(3, 3, 64, 1, 1), ReLU(), MaxPool(2),
         Conv(3, 3, 128, 1, 1), ReLU(), MaxPool(2),
         Flatten(), Dense(256), ReLU(), Dense(10)],
        (32, 32, 3), 10, name="cifar-cnn")


REFERENCE_ARCHITECTURES = {"mnist-cnn": mnist_cnn, "cifar-cnn": cifar_cnn}


# ---------------------------------------------------------------- model


@dataclass
class ActivationTrace:
    entries: list  # (layer_id, Tensor)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def layer_ids(self) -> list[int]:
        return [lid for lid, _ in self.entries]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for _, t in self.entries]


class Model:
    def __init__(self, architecture: Architecture, parameters: dict[str, Tensor],
                 metadata: Optional[dict] = None):
        architecture.validate()
        expected = architecture.param_shapes()
        if list(parameters) != list(expected):
            raise ArchitectureError(f"parameter names {list(parameters)} != expected {list(expected)}")
        for name, shape in expected.items():
            if parameters[name].shape != shape:
                raise ArchitectureError(f"{name}: shape {parameters[name].shape} != expected {shape}")
        self.architecture = architecture
        self.parameters = parameters
        self.hook_layer_ids = architecture.hook_layer_ids
        self.metadata = dict(metadata or {})

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy()) for k, v in self.parameters.items()}
        return Model(self.architecture, params, self.metadata)

    def set_trainable(self, flag: bool):
        for p in self.parameters.values():
            p.requires_grad = flag
            p.grad = None


def build_model(arch: Architecture, init_seed: int = 0) -> Model:
    """He-uniform weights, zero biases; bit-identical for a given seed."""
    arch.validate()
    rng = np.random.default_rng(init_seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[:-1])
            limit = math.sqrt(6.0 / fan_in)
            params[name] = Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32))
        else:
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
    return Model(arch, params, {"init_seed": init_seed})


def _run(model: Model, image: Tensor, hooks: Optional[set], trace: Optional[list]) -> Tensor:
    arch = model.architecture
    batched = image.data.ndim == len(arch.input_shape) + 1
    sample_shape = image.shape[1:] if batched else image.shape
    if tuple(sample_shape) != arch.input_shape:
        raise T.ShapeError(f"image shape {image.shape} does not match model input {arch.input_shape}")
    x = image
    p = model.parameters
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            x = T.conv2d(x, p[f"layer{i}.weight"], layer.stride, layer.padding, bias=p[f"layer{i}.bias"])
        elif isinstance(layer, ReLU):
            x = T.relu(x)
            if trace is not None and (hooks is None or i in hooks):
                trace.append((i, x))
        elif isinstance(layer, MaxPool):
            x = T.maxpool2d(x, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            x = T.flatten(x, batched=batched)
        elif isinstance(layer, Dense):
            x = T.dense(x, p[f"layer{i}.weight"], p[f"layer{i}.bias"])
    return x


def forward(model: Model, image: Tensor) -> Tensor:
    """Logits for one image (C,) or a batch (N, C)."""
    return _run(model, image, None, None)


def forward_with_trace(model: Model, image: Tensor, hook_subset=None) -> tuple[Tensor, ActivationTrace]:
    """Logits plus the post-ReLU activations, in depth order.

    ``hook_subset`` restricts the trace to the listed layer ids.
    """
    hooks = None
    if hook_subset is not None:
        hooks = set(hook_subset)
        unknown = hooks - set(model.hook_layer_ids)
        if unknown:
            raise ValueError(f"hook_subset {sorted(unknown)} are not ReLU layers; hooks are {model.hook_layer_ids}")
    entries: list = []
    logits = _run(model, image, hooks, entries)
    return logits, ActivationTrace(entries)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(forward(model, Tensor(images[s:s + batch_size])).data)
    return np.concatenate(out, axis=0)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties resolve to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def evaluate_accuracy(model: Model, images: np.ndarray, labels: np.ndarray, k: int = 5) -> dict:
    if len(images) == 0:
        raise ValueError("evaluate_accuracy: empty dataset")
    logits = predict_logits(model, images)
    k = min(k, model.num_classes)
    top = topk_indices(logits, k)
    labels = np.asarray(labels)
    return {
        "top1": float(np.mean(top[:, 0] == labels)),
        "topk": float(np.mean((top == labels[:, None]).any(axis=1))),
        "k": k,
    }


# ---------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    adversarial: Optional[object] = None  # attacks.AttackConfig
    shift: int = 0  # max random translation in pixels, 0 disables


def random_shift(images: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Translate each N x H x W x C image by up to ``max_shift`` pixels, zero fill."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (max_shift, max_shift), (max_shift, max_shift), (0, 0)))
    dy = rng.integers(0, 2 * max_shift + 1, size=n)
    dx = rng.integers(0, 2 * max_shift + 1, size=n)
    return np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def train(model: Model, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          eval_set: Optional[tuple] = None) -> tuple[Model, list[dict]]:
    """Minibatch SGD with momentum on mean softmax cross-entropy.

    With ``config.adversarial`` set, the second half of every minibatch is
    replaced by adversaries crafted against the current weights.
    Returns the trained model (a copy) and one history dict per epoch.
    """
    if len(images) == 0:
        raise ValueError("train: empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    model = model.copy()
    names = list(model.parameters)
    velocity = {n: np.zeros_like(model.parameters[n].data) for n in names}
    rng = np.random.default_rng(config.seed)
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total_loss, correct, seen = 0.0, 0, 0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            xb = images[idx].astype(np.float32)
            yb = labels[idx]
            if config.shift:
                xb = random_shift(xb, config.shift, rng)
            if config.adversarial is not None and len(idx) > 1:
                from .attacks import run_attack_batch
                half = len(idx) // 2
                model.set_trainable(False)
                adv = run_attack_batch(model, xb[half:], config.adversarial)
                xb = np.concatenate([xb[:half], adv.adv], axis=0)

            model.set_trainable(True)
            with Tape() as tape:
                logits = forward(model, Tensor(xb))
                loss = T.softmax_cross_entropy(logits, yb, reduction="mean")
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"non-finite loss {lval} at epoch {epoch} batch {b}; lr={config.lr}, "
                    f"logit range [{logits.data.min():.3g}, {logits.data.max():.3g}]")
            tape.backward(loss)
            for n in names:
                p = model.parameters[n]
                velocity[n] = config.momentum * velocity[n] - config.lr * p.grad
                p.data = p.data + velocity[n]
            total_loss += lval * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)

        model.set_trainable(False)
        row = {"epoch": epoch + 1, "loss": total_loss / seen, "train_accuracy": correct / seen}
        if eval_set is not None:
            row["test_accuracy"] = evaluate_accuracy(model, *eval_set)["top1"]
            if config.adversarial is not None:
                from .attacks import run_attack_batch
                ex, ey = eval_set
                n_adv = min(len(ex), 256)
                adv = run_attack_batch(model, ex[:n_adv].astype(np.float32), config.adversarial)
                row["adversarial_accuracy"] = evaluate_accuracy(model, adv.adv, ey[:n_adv])["top1"]
        log.info("epoch %s: %s", epoch + 1, row)
        history.append(row)

    model.metadata.update({"train_seed": config.seed, "epochs": config.epochs,
                           "adversarial": config.adversarial is not None})
    if history and "test_accuracy" in history[-1]:
        model.metadata["accuracy"] = history[-1]["test_accuracy"]
    return model, history
