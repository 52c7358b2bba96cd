"""Experiment plumbing shared by the command-line entry points.

File formats written here:

* ``results.csv``: versioned CSV, one row per attacked image.
* ``summary.json``: resolved config, budget and the aggregated metrics.
* ``adversaries.f32`` / ``clean.f32``: raw little-endian float32 arrays
  (N x H x W x C), described by ``archive.json``.
* ``fr_at_k.csv``, ``feature_similarity.csv``, ``report.json`` from eval.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks, checkpoint, data, metrics, nn
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

RESULTS_VERSION = "fdakit-results v1"
FRK_VERSION = "fdakit-frk v1"
SIMILARITY_VERSION = "fdakit-similarity v1"
COMPARISON_VERSION = "fdakit-comparison v1"
TRANSFER_VERSION = "fdakit-transfer v1"

RESULT_FIELDS = ["image_index", "clean_label", "clean_pred", "adv_pred", "olnr", "nlor",
                 "linf_attained", "objective_initial", "objective_final"]

# fixed work unit: output bytes do not depend on the worker count
ATTACK_CHUNK = 64


class ConfigError(ValueError):
    pass


class BudgetMismatchError(ValueError):
    pass


@dataclass
class AttackSection:
    method: str = "fda"
    eps: float = 8.0
    nb_iter: int = 10
    eps_iter: float = 1.0
    central_tendency: str = "spatial-mean"
    hook_subset: Optional[list] = None


@dataclass
class EvalSection:
    k_max: int = 10
    n_images: int = 512
    transfer_models: list = field(default_factory=list)
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shift: int = 0
    init_seed: int = 0
    adversarial: bool = False


@dataclass
class ExperimentConfig:
    model: str = "mnist-cnn"
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    architecture: Optional[dict] = None
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: str = "runs/out"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            sections = {
                "attack": AttackSection(**d.pop("attack", {})),
                "eval": EvalSection(**d.pop("eval", {})),
                "train": TrainSection(**d.pop("train", {})),
            }
            return cls(**d, **sections)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def budget(self) -> attacks.AttackBudget:
        a = self.attack
        return attacks.AttackBudget(float(a.eps), int(a.nb_iter), float(a.eps_iter))

    def attack_config(self) -> attacks.AttackConfig:
        a = self.attack
        return attacks.AttackConfig(a.method, self.budget(), a.central_tendency,
                                    tuple(a.hook_subset) if a.hook_subset else None, self.eval.seed)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


# ---------------------------------------------------------------- model / data


def resolve_architecture(cfg: ExperimentConfig) -> nn.Architecture:
    if cfg.architecture is not None:
        return nn.Architecture.from_dict(cfg.architecture)
    if cfg.model in nn.REFERENCE_ARCHITECTURES:
        return nn.REFERENCE_ARCHITECTURES[cfg.model]()
    raise ConfigError(f"unknown architecture {cfg.model!r}; choose from {sorted(nn.REFERENCE_ARCHITECTURES)}")


def load_model(spec: str) -> nn.Model:
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"checkpoint {spec} does not exist")
    return checkpoint.load_checkpoint(path)


def evaluation_subset(n_total: int, n_images: int, seed: int) -> np.ndarray:
    """Seed-pinned subset of test indices, in ascending order."""
    if n_images > n_total:
        raise ConfigError(f"n_images={n_images} exceeds dataset size {n_total}")
    return np.sort(np.random.default_rng(seed).permutation(n_total)[:n_images])


# ---------------------------------------------------------------- train


def run_train(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    train_set = data.load_dataset(cfg.dataset, cfg.data_dir, "train")
    test_set = data.load_dataset(cfg.dataset, cfg.data_dir, "test")
    arch = resolve_architecture(cfg)
    t = cfg.train
    model = nn.build_model(arch, t.init_seed)
    adv_cfg = cfg.attack_config() if t.adversarial else None
    if adv_cfg is not None and adv_cfg.method != "pgd-ml":
        adv_cfg = attacks.AttackConfig("pgd-ml", adv_cfg.budget)
    tc = nn.TrainConfig(t.epochs, t.batch_size, t.lr, t.momentum, t.seed, adv_cfg, t.shift)
    model, history = nn.train(model, train_set.images, train_set.labels, tc,
                              eval_set=(test_set.images, test_set.labels))
    acc = nn.evaluate_accuracy(model, test_set.images, test_set.labels)
    model.metadata.update({"test_top1": acc["top1"], "dataset": cfg.dataset})
    checkpoint.save_checkpoint(model, out / "model.ckpt")
    doc = {"config": cfg.to_dict(), "history": history, "test_accuracy": acc}
    (out / "history.json").write_text(dump_json(doc))
    return doc


# ---------------------------------------------------------------- attack


def _attack_chunk(args):
    model, images, config = args
    return attacks.run_attack_batch(model, images, config)


def attack_images(model: nn.Model, images: np.ndarray, config: attacks.AttackConfig,
                  workers: int = 1) -> attacks.BatchAttackResult:
    chunks = [images[s:s + ATTACK_CHUNK] for s in range(0, len(images), ATTACK_CHUNK)]
    jobs = [(model, c, config) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_attack_chunk, jobs))
    else:
        parts = [_attack_chunk(j) for j in jobs]
    return attacks.concat_results(parts)


def result_rows(indices, labels, res: attacks.BatchAttackResult) -> list[dict]:
    clean_pred = res.clean_probs.argmax(axis=1)
    adv_pred = res.adv_probs.argmax(axis=1)
    old_rank = metrics.ranks_of(res.adv_probs, clean_pred)
    new_rank = metrics.ranks_of(res.clean_probs, adv_pred)
    linf = res.linf
    rows = []
    for i, idx in enumerate(indices):
        fooled = clean_pred[i] != adv_pred[i]
        rows.append({
            "image_index": int(idx),
            "clean_label": int(labels[i]),
            "clean_pred": int(clean_pred[i]),
            "adv_pred": int(adv_pred[i]),
            "olnr": int(old_rank[i]) if fooled else None,
            "nlor": int(new_rank[i]) if fooled else None,
            "linf_attained": float(linf[i]),
            "objective_initial": float(res.trajectories[i, 0]),
            "objective_final": float(res.trajectories[i, -1]),
        })
    return sorted(rows, key=lambda r: r["image_index"])


def write_versioned_csv(path, version: str, fields: list, rows: list[dict]):
    buf = io.StringIO()
    buf.write(f"# {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([fmt(r[f]) if not isinstance(r[f], str) else r[f] for f in fields])
    Path(path).write_text(buf.getvalue())


def read_versioned_csv(path, version: str) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {version}":
        got = lines[0] if lines else "<empty>"
        raise ValueError(f"{path}: unsupported schema {got!r}, expected '# {version}'")
    return list(csv.DictReader(lines[1:]))


def write_archive(out: Path, res: attacks.BatchAttackResult, indices, model_path: str, cfg: ExperimentConfig):
    res.adv.astype("<f4").tofile(out / "adversaries.f32")
    res.clean.astype("<f4").tofile(out / "clean.f32")
    meta = {
        "dtype": "float32-le",
        "shape": list(res.adv.shape),
        "image_indices": [int(i) for i in indices],
        "model": model_path,
        "dataset": cfg.dataset,
        "budget": list(cfg.budget().as_tuple()),
        "method": cfg.attack.method,
    }
    (out / "archive.json").write_text(dump_json(meta))


def read_archive(run_dir) -> tuple[dict, np.ndarray, np.ndarray]:
    run_dir = Path(run_dir)
    meta_path = run_dir / "archive.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{run_dir}: no adversary archive (archive.json missing)")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta["shape"])
    adv = np.fromfile(run_dir / "adversaries.f32", dtype="<f4")
    clean = np.fromfile(run_dir / "clean.f32", dtype="<f4")
    if adv.size != np.prod(shape) or clean.size != np.prod(shape):
        raise ValueError(f"{run_dir}: archive arrays do not match declared shape {shape}")
    return meta, clean.reshape(shape).astype(np.float32), adv.reshape(shape).astype(np.float32)


def run_attack_cmd(cfg: ExperimentConfig, save_archive: bool = True) -> dict:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(cfg.model)
    test = data.load_dataset(cfg.dataset, cfg.data_dir, "test")
    if cfg.eval.k_max > model.num_classes:
        raise ConfigError(f"k_max={cfg.eval.k_max} exceeds {model.num_classes} classes")
    idx = evaluation_subset(len(test), cfg.eval.n_images, cfg.eval.seed)
    config = cfg.attack_config()
    res = attack_images(model, test.images[idx], config, cfg.workers)

    bound = config.budget.eps_internal + 1e-6
    worst = float(res.linf.max()) if len(res) else 0.0
    assert worst <= bound, f"budget violated: attained L-inf {worst} > {bound}"
    assert res.adv.min() >= 0.0 and res.adv.max() <= 1.0, "adversary left [0, 1]"

    rows = result_rows(idx, test.labels[idx], res)
    write_versioned_csv(out / "results.csv", RESULTS_VERSION, RESULT_FIELDS, rows)
    report = metrics.aggregate_arrays(res.clean_probs, res.adv_probs)
    summary = {
        "config": cfg.to_dict(),
        "method": config.method,
        "budget": list(config.budget.as_tuple()),
        "n_images": len(idx),
        "clean_accuracy": float(np.mean(res.clean_probs.argmax(axis=1) == test.labels[idx])),
        "metrics": report.to_dict(),
        "objective_decreased": int(np.sum(res.trajectories[:, -1] <= res.trajectories[:, 0])),
    }
    (out / "summary.json").write_text(dump_json(summary))
    if save_archive:
        write_archive(out, res, idx, cfg.model, cfg)
    return summary


# ---------------------------------------------------------------- eval


def trace_arrays(model: nn.Model, images: np.ndarray, batch: int = 128) -> tuple[list, list]:
    """Hooked activations for a batch of images, one N x ... array per layer."""
    per_layer: list = []
    ids: list = []
    for s in range(0, len(images), batch):
        _, tr = nn.forward_with_trace(model, Tensor(images[s:s + batch]))
        if not per_layer:
            ids = tr.layer_ids
            per_layer = [[] for _ in ids]
        for j, a in enumerate(tr.arrays()):
            per_layer[j].append(a)
    return ids, [np.concatenate(p) for p in per_layer]


def evaluate_run(model: nn.Model, clean: np.ndarray, adv: np.ndarray, k_max: Optional[int] = None,
                 with_similarity: bool = True) -> metrics.MetricsReport:
    clean_probs = T.softmax_np(nn.predict_logits(model, clean))
    adv_probs = T.softmax_np(nn.predict_logits(model, adv))
    if with_similarity:
        ids, ca = trace_arrays(model, clean)
        _, aa = trace_arrays(model, adv)
        report = metrics.aggregate_arrays(clean_probs, adv_probs, ca, aa, ids)
    else:
        report = metrics.aggregate_arrays(clean_probs, adv_probs)
    if k_max is not None:
        report.fr_at_k = report.fr_at_k[:k_max]
    return report


def run_eval_cmd(run_dir, out_dir=None, model_path: Optional[str] = None, k_max: int = 10,
                 transfer_models=()) -> dict:
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    meta, clean, adv = read_archive(run_dir)
    model = load_model(model_path or meta["model"])
    if k_max > model.num_classes:
        raise ConfigError(f"k_max={k_max} exceeds {model.num_classes} classes")
    report = evaluate_run(model, clean, adv, k_max)

    write_versioned_csv(out / "fr_at_k.csv", FRK_VERSION, ["k", "fooling_rate"],
                        [{"k": k, "fooling_rate": v} for k, v in report.fr_at_k])
    write_versioned_csv(out / "feature_similarity.csv", SIMILARITY_VERSION,
                        ["layer_id", "cosine_mean", "normalized_l2_mean"],
                        [{"layer_id": l, "cosine_mean": c, "normalized_l2_mean": d}
                         for l, c, d in report.feature_similarity])
    doc = {"method": meta["method"], "budget": meta["budget"], "model": model_path or meta["model"],
           "report": report.to_dict()}

    if transfer_models:
        rows = []
        for path in transfer_models:
            target = load_model(path)
            r = evaluate_run(target, clean, adv, with_similarity=False)
            rows.append({"model": str(path), "fooling_rate": r.fooling_rate,
                         "mean_olnr": r.mean_olnr, "mean_nlor": r.mean_nlor, "n_fooled": r.n_fooled})
        write_versioned_csv(out / "transfer.csv", TRANSFER_VERSION,
                            ["model", "fooling_rate", "mean_olnr", "mean_nlor", "n_fooled"], rows)
        doc["transfer"] = rows
    (out / "report.json").write_text(dump_json(doc))
    return doc


# ---------------------------------------------------------------- report


def comparison_row(summary: dict) -> dict:
    m = summary["metrics"]
    return {"method": summary["method"], "fooling_rate": m["fooling_rate"],
            "mean_olnr": m["mean_olnr"], "mean_nlor": m["mean_nlor"], "n_fooled": m["n_fooled"],
            "n_images": m["n_images"]}


def run_report_cmd(run_dirs, out_dir) -> list[dict]:
    """Merge attack runs that share a budget into one comparison table.

    ``run_dirs`` may list run directories directly, or a single parent
    directory whose subdirectories hold ``summary.json`` files.
    """
    dirs = [Path(d) for d in run_dirs]
    if len(dirs) == 1 and not (dirs[0] / "summary.json").exists():
        dirs = sorted(p.parent for p in dirs[0].glob("*/summary.json"))
    if not dirs:
        raise FileNotFoundError("no attack runs found")
    summaries = [(d, json.loads((d / "summary.json").read_text())) for d in dirs]
    budgets = {tuple(s["budget"]) for _, s in summaries}
    if len(budgets) > 1:
        desc = "; ".join(f"{d.name}: (eps={b[0]:g}, nb_iter={b[1]}, eps_iter={b[2]:g})"
                         for d, s in summaries for b in [s["budget"]])
        raise BudgetMismatchError(f"refusing to merge runs with different budgets: {desc}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [comparison_row(s) for _, s in summaries]
    write_versioned_csv(out / "comparison.csv", COMPARISON_VERSION,
                        ["method", "fooling_rate", "mean_olnr", "mean_nlor", "n_fooled", "n_images"], rows)
    for (d, s) in summaries:
        lines = [f"# fooling rate at rank k: {s['method']} budget {tuple(s['budget'])}", "# k fooling_rate"]
        lines += [f"{k} {fmt(v)}" for k, v in s["metrics"]["fr_at_k"]]
        (out / f"frk_{s['method']}_{d.name}.dat").write_text("\n".join(lines) + "\n")
    return rows
