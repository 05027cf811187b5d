"""Evaluation machinery: ADD tables, accuracy-threshold curves, texture
cross-validation, texture-count ablation and external-pose comparison.

Thresholds follow the composite Xmm-Xdeg convention: a pose is correct at
threshold X when translation error <= X mm AND rotation error <= X degrees,
both inclusive; curves sweep the two jointly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CaseDataset, make_loto_split, subsample_textures
from .geometry import (
    Pose,
    SurfaceMesh,
    add_metric,
    rotation_error_deg,
    translation_error_mm,
    within_threshold,
)
from .regressor import RegressorConfig, TrainedModel, build_model, predict, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 3.0  # the 3mm-3deg composite correctness threshold


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    add_mm: float
    translation_err_mm: float
    rotation_err_deg: float
    within_3mm3deg: bool


@dataclass
class EvalResult:
    records: list[EvalRecord]
    mean_add: float
    std_add: float
    accuracy_3mm3deg: float  # percent

    @classmethod
    def from_records(cls, records: list[EvalRecord]) -> "EvalResult":
        adds = np.array([r.add_mm for r in records])
        acc = 100.0 * float(np.mean([r.within_3mm3deg for r in records]))
        return cls(
            records=list(records),
            mean_add=float(adds.mean()),
            std_add=float(adds.std()),
            accuracy_3mm3deg=acc,
        )

    def verify_aggregates(self, atol: float = 1e-12) -> bool:
        """Aggregates must be recomputable from the per-sample records."""
        fresh = EvalResult.from_records(self.records)
        return (
            abs(fresh.mean_add - self.mean_add) <= atol
            and abs(fresh.std_add - self.std_add) <= atol
            and abs(fresh.accuracy_3mm3deg - self.accuracy_3mm3deg) <= atol
        )


def _predictor(model):
    if isinstance(model, TrainedModel):
        return lambda img: predict(model, img)
    if callable(model):
        return model
    if hasattr(model, "predict"):
        return model.predict
    raise TypeError("model must be a TrainedModel, a callable, or expose .predict")


def evaluate(model, samples, mesh: SurfaceMesh) -> EvalResult:
    """Predict each sample's pose and score it against ground truth.

    `samples` yields (sample_id, image, gt_pose) triples or (image, gt_pose)
    pairs (ids are then positional). Prediction failures propagate with the
    offending sample id attached.
    """
    pred_fn = _predictor(model)
    records = []
    for i, item in enumerate(samples):
        if len(item) == 3:
            sid, image, gt = item
        else:
            image, gt = item
            sid = f"s{i:05d}"
        try:
            est = pred_fn(image)
        except Exception as exc:
            raise RuntimeError(f"prediction failed for sample {sid!r}: {exc}") from exc
        records.append(
            EvalRecord(
                sample_id=str(sid),
                add_mm=add_metric(mesh.vertices, gt, est),
                translation_err_mm=translation_error_mm(gt, est),
                rotation_err_deg=rotation_error_deg(gt, est),
                within_3mm3deg=within_threshold(gt, est, DEFAULT_THRESHOLD, DEFAULT_THRESHOLD),
            )
        )
    if not records:
        raise ValueError("no samples to evaluate")
    return EvalResult.from_records(records)


def eval_samples_from_dataset(ds: CaseDataset):
    """(sample_id, image, pose) triples for evaluate(), read from disk."""
    for s in ds.samples:
        yield s.id, ds.load_image(s), s.pose


def accuracy_threshold_curve(result: EvalResult, max_threshold_mm: float = 20.0,
                             step_mm: float = 0.5) -> np.ndarray:
    """(K, 2) array of (threshold, accuracy %) for thresholds 0..max inclusive.

    Each threshold t pairs t mm with t degrees; the curve is non-decreasing.
    """
    if not result.records:
        raise ValueError("empty evaluation result")
    t_err = np.array([r.translation_err_mm for r in result.records])
    r_err = np.array([r.rotation_err_deg for r in result.records])
    thresholds = np.arange(0.0, max_threshold_mm + step_mm / 2.0, step_mm)
    acc = [100.0 * float(np.mean((t_err <= t) & (r_err <= t))) for t in thresholds]
    return np.column_stack([thresholds, acc])


# ---------------------------------------------------------------------------
# Cross-validation and ablation


@dataclass
class LotoResult:
    folds: dict[str, EvalResult]
    failed: dict[str, str] = field(default_factory=dict)
    audits: dict[str, bool] = field(default_factory=dict)

    @property
    def mean_add(self) -> float:
        return float(np.mean([r.mean_add for r in self.folds.values()]))

    @property
    def std_add(self) -> float:
        return float(np.std([r.mean_add for r in self.folds.values()]))


def _train_and_eval(train_ds: CaseDataset, val_ds: CaseDataset, mesh: SurfaceMesh,
                    cfg: RegressorConfig) -> EvalResult:
    model = build_model(cfg)
    trained = train(model, train_ds, None, cfg)
    return evaluate(trained, eval_samples_from_dataset(val_ds), mesh)


def loto_cross_validation(ds: CaseDataset, cfg: RegressorConfig,
                          texture_ids: list[str] | None = None,
                          mesh: SurfaceMesh | None = None) -> LotoResult:
    """Leave-one-texture-out: one fold per texture, trained from scratch.

    Each fold's split is audited (the held-out texture must not appear in any
    training sample); failing folds are recorded and skipped.
    """
    texture_ids = list(texture_ids) if texture_ids is not None else list(ds.texture_ids)
    if len(ds.texture_ids) < 2:
        raise ValueError("LOTO needs at least two textures")
    mesh = mesh if mesh is not None else ds.load_mesh()
    result = LotoResult(folds={})
    for tex in texture_ids:
        train_ds, val_ds = make_loto_split(ds, {tex})
        audit = all(s.texture_id != tex for s in train_ds.samples)
        result.audits[tex] = audit
        if not audit:
            result.failed[tex] = "split audit failed: held-out texture leaked"
            continue
        try:
            log.info("LOTO fold %s: train=%d val=%d", tex, len(train_ds), len(val_ds))
            result.folds[tex] = _train_and_eval(train_ds, val_ds, mesh, cfg)
        except Exception as exc:  # noqa: BLE001 - fold isolation
            log.warning("LOTO fold %s failed: %s", tex, exc)
            result.failed[tex] = str(exc)
    if not result.folds:
        raise RuntimeError("every LOTO fold failed")
    return result


@dataclass
class AblationRow:
    k: int
    texture_ids: list[str]
    n_train: int
    result: EvalResult


@dataclass
class AblationResult:
    rows: dict[int, AblationRow]
    held_out: list[str]
    failed: dict[int, str] = field(default_factory=dict)


def texture_ablation(ds: CaseDataset, k_values, held_out, cfg: RegressorConfig,
                     subsample_seed: int = 0,
                     mesh: SurfaceMesh | None = None) -> AblationResult:
    """Vary the number of training textures at constant training-set size.

    The held-out textures form a fixed validation set; for each k the
    training pool is reduced to k textures and resampled back to its original
    size, so every row trains on the same number of images.
    """
    held_out = list(held_out)
    train_base, val_ds = make_loto_split(ds, set(held_out))
    if max(k_values) > len(train_base.texture_ids):
        raise ValueError(
            f"max k={max(k_values)} exceeds the {len(train_base.texture_ids)} "
            "textures left after holding out"
        )
    mesh = mesh if mesh is not None else ds.load_mesh()
    out = AblationResult(rows={}, held_out=held_out)
    for k in k_values:
        sub = subsample_textures(train_base, k, seed=subsample_seed)
        if len(sub) != len(train_base):
            raise AssertionError("subsample_textures changed the training-set size")
        try:
            log.info("ablation k=%d: train=%d val=%d", k, len(sub), len(val_ds))
            out.rows[k] = AblationRow(
                k=k,
                texture_ids=list(sub.texture_ids),
                n_train=len(sub),
                result=_train_and_eval(sub, val_ds, mesh, cfg),
            )
        except Exception as exc:  # noqa: BLE001
            log.warning("ablation k=%d failed: %s", k, exc)
            out.failed[k] = str(exc)
    if not out.rows:
        raise RuntimeError("every ablation point failed")
    return out


# ---------------------------------------------------------------------------
# External pose comparison (Table-1-style)


@dataclass
class ComparisonResult:
    sample_ids: list[str]
    per_method: dict[str, dict[str, float]]  # method -> sample_id -> ADD mm

    def mean_add(self, method: str) -> float:
        return float(np.mean(list(self.per_method[method].values())))

    def std_add(self, method: str) -> float:
        return float(np.std(list(self.per_method[method].values())))


def compare_external_poses(gt_poses: dict[str, Pose],
                           methods: dict[str, dict[str, Pose]],
                           mesh: SurfaceMesh) -> ComparisonResult:
    """ADD per method per sample for externally produced pose estimates.

    Every method must cover exactly the ground-truth sample ids.
    """
    ids = sorted(gt_poses)
    if not ids:
        raise ValueError("no ground-truth poses")
    for name, poses in methods.items():
        if set(poses) != set(ids):
            missing = sorted(set(ids) ^ set(poses))
            raise ValueError(f"method {name!r} sample ids misaligned (diff: {missing[:5]})")
    table = {
        name: {sid: add_metric(mesh.vertices, gt_poses[sid], poses[sid]) for sid in ids}
        for name, poses in methods.items()
    }
    return ComparisonResult(sample_ids=ids, per_method=table)


# ---------------------------------------------------------------------------
# Report emission


def write_curve_csv(curve: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "accuracy_percent"])
        for t, a in curve:
            w.writerow([repr(float(t)), repr(float(a))])


def write_loto_csv(result: LotoResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["held_out_texture", "mean_add_mm", "accuracy_3mm3deg_percent", "n_samples"])
        for tex in sorted(result.folds):
            r = result.folds[tex]
            w.writerow([tex, repr(r.mean_add), repr(r.accuracy_3mm3deg), len(r.records)])
        w.writerow(["__mean__", repr(result.mean_add), "", ""])
        w.writerow(["__std__", repr(result.std_add), "", ""])


def write_ablation_csv(result: AblationResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k_textures", "mean_add_mm", "accuracy_3mm3deg_percent", "n_train"])
        for k in sorted(result.rows):
            row = result.rows[k]
            w.writerow([k, repr(row.result.mean_add), repr(row.result.accuracy_3mm3deg),
                        row.n_train])


def write_comparison_csv(result: ComparisonResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    methods = sorted(result.per_method)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + methods)
        for sid in result.sample_ids:
            w.writerow([sid] + [repr(result.per_method[m][sid]) for m in methods])
        w.writerow(["__mean__"] + [repr(result.mean_add(m)) for m in methods])
        w.writerow(["__std__"] + [repr(result.std_add(m)) for m in methods])


def write_records_csv(result: EvalResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "add_mm", "translation_err_mm", "rotation_err_deg",
                    "within_3mm3deg"])
        for r in result.records:
            w.writerow([r.sample_id, repr(r.add_mm), repr(r.translation_err_mm),
                        repr(r.rotation_err_deg), int(r.within_3mm3deg)])


def write_run_json(path, **sections) -> None:
    """Provenance record: every config/seed that shaped a run, as JSON."""

    def default(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        if isinstance(obj, Path):
            return str(obj)
        if hasattr(obj, "__dataclass_fields__"):
            return asdict(obj)
        raise TypeError(f"not JSON-serializable: {type(obj)}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sections, indent=1, sort_keys=True, default=default) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curve(curve: np.ndarray, path, title: str = "Accuracy-threshold curve") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(curve[:, 0], curve[:, 1], lw=2)
    ax.set_xlabel("threshold (mm / deg)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.grid(alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loto(result: LotoResult, path) -> None:
    plt = _pyplot()
    folds = sorted(result.folds)
    vals = [result.folds[t].mean_add for t in folds]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(folds)), vals, color="#4878d0")
    ax.axhline(result.mean_add, color="k", ls="--", lw=1,
               label=f"mean {result.mean_add:.2f} mm")
    ax.set_xticks(range(len(folds)))
    ax.set_xticklabels(folds, rotation=45, ha="right")
    ax.set_ylabel("held-out ADD (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(result: AblationResult, path) -> None:
    plt = _pyplot()
    ks = sorted(result.rows)
    vals = [result.rows[k].result.mean_add for k in ks]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, vals, "o-")
    ax.set_xlabel("training textures")
    ax.set_ylabel("held-out ADD (mm)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
