"""Per-case training corpora: generation, persistence, splits.

A case directory holds everything needed to retrain and audit one case:

    cases/<case_id>/mesh.ply
    cases/<case_id>/intrinsics.json
    cases/<case_id>/images/<sample_id>.png
    cases/<case_id>/manifest.json

The manifest is one JSON document listing every sample with its exact pose
(full double precision), texture id, augmentation seed and image hash; images
are regenerable from the manifest, poses are not. Generation is resumable:
samples whose image already exists with the manifest's hash are skipped.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from threading import Lock

import numpy as np
from PIL import Image

from .features import FeatureExtractor, build_extractor
from .geometry import CameraIntrinsics, Pose, PoseSamplingConfig, SurfaceMesh, sample_hemisphere_poses
from .meshio import load_mesh, save_mesh_ply
from .rasterizer import rasterize_labels
from .synthesis import (
    AppearanceSynthesizer,
    ElasticDeformConfig,
    SynthesisConfig,
    TextureExemplar,
    elastic_deform,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
INTRINSICS_NAME = "intrinsics.json"
MESH_NAME = "mesh.ply"


@dataclass(frozen=True)
class AugmentationConfig:
    """How many elastic variants to add per (pose, texture) base image."""

    n_augmentations: int = 0
    elastic: ElasticDeformConfig = field(default_factory=ElasticDeformConfig)

    def __post_init__(self):
        if self.n_augmentations < 0:
            raise ValueError("n_augmentations must be >= 0")


@dataclass(frozen=True)
class AppearanceSample:
    id: str
    image_path: str  # relative to the case directory
    pose: Pose
    texture_id: str
    augmentation_seed: int | None = None


@dataclass
class CaseDataset:
    case_id: str
    mesh_path: str
    intrinsics: CameraIntrinsics
    samples: list[AppearanceSample]
    texture_ids: list[str]
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def load_mesh(self) -> SurfaceMesh:
        if self.root is None:
            raise ValueError("dataset has no root directory")
        return load_mesh(self.root / self.mesh_path)

    def image_file(self, sample: AppearanceSample) -> Path:
        if self.root is None:
            raise ValueError("dataset has no root directory")
        return self.root / sample.image_path

    def load_image(self, sample: AppearanceSample) -> np.ndarray:
        return np.asarray(Image.open(self.image_file(sample)).convert("RGB"))

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All images as (N, H, W, 3) uint8 plus poses as (N, 6) float64."""
        images = np.stack([self.load_image(s) for s in self.samples])
        poses = np.stack([s.pose.as_vector() for s in self.samples])
        return images, poses


@dataclass
class GenerationSummary:
    n_planned: int = 0
    n_synthesized: int = 0
    n_resumed: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)  # (sample id, error)


def derive_seed(*parts: int) -> int:
    """Stable per-sample seed from a tuple of integers."""
    masked = [int(p) & (2**64 - 1) for p in parts]
    return int(np.random.SeedSequence(masked).generate_state(1)[0])


def _encode_png(image_uint8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image_uint8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    doc = {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_intrinsics(path) -> CameraIntrinsics:
    doc = json.loads(Path(path).read_text())
    return CameraIntrinsics(
        fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
        width=doc["width"], height=doc["height"],
    )


def save_manifest(ds: CaseDataset, hashes: dict[str, str] | None = None) -> Path:
    """Atomic manifest write under ds.root; returns the manifest path."""
    if ds.root is None:
        raise ValueError("dataset has no root directory")
    hashes = hashes or {}
    doc = {
        "case_id": ds.case_id,
        "mesh": ds.mesh_path,
        "texture_ids": list(ds.texture_ids),
        "samples": [
            {
                "id": s.id,
                "image": s.image_path,
                "pose": [float(x) for x in s.pose.as_vector()],
                "texture_id": s.texture_id,
                "aug_seed": s.augmentation_seed,
                **({"sha256": hashes[s.id]} if s.id in hashes else {}),
            }
            for s in ds.samples
        ],
    }
    path = ds.root / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def load_case(case_dir) -> CaseDataset:
    case_dir = Path(case_dir)
    manifest = case_dir / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    doc = json.loads(manifest.read_text())
    samples = [
        AppearanceSample(
            id=e["id"],
            image_path=e.get("image", f"images/{e['id']}.png"),
            pose=Pose.from_vector(e["pose"]),
            texture_id=e["texture_id"],
            augmentation_seed=e["aug_seed"],
        )
        for e in doc["samples"]
    ]
    return CaseDataset(
        case_id=doc["case_id"],
        mesh_path=doc["mesh"],
        intrinsics=load_intrinsics(case_dir / INTRINSICS_NAME),
        samples=samples,
        texture_ids=list(doc["texture_ids"]),
        root=case_dir,
    )


def _manifest_hashes(case_dir: Path) -> dict[str, dict]:
    manifest = case_dir / MANIFEST_NAME
    if not manifest.exists():
        return {}
    doc = json.loads(manifest.read_text())
    return {e["id"]: e for e in doc["samples"]}


def generate_case_dataset(
    mesh: SurfaceMesh,
    intr: CameraIntrinsics,
    textures: list[TextureExemplar],
    pose_cfg: PoseSamplingConfig,
    synth_cfg: SynthesisConfig,
    aug_cfg: AugmentationConfig,
    out_dir,
    extractor: FeatureExtractor | None = None,
    workers: int = 1,
    case_id: str | None = None,
) -> tuple[CaseDataset, GenerationSummary]:
    """Render labels per pose, synthesize one image per texture, augment, persist.

    Deterministic for fixed seeds: per-sample synthesis/augmentation seeds are
    derived from (config seed, pose index, texture index, variant index), so
    outputs are independent of scheduling. A failed (pose, texture) synthesis
    is recorded in the summary and skipped, not fatal.
    """
    if not textures:
        raise ValueError("need at least one texture exemplar")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    case_id = case_id or out_dir.name

    save_mesh_ply(mesh, out_dir / MESH_NAME)
    save_intrinsics(intr, out_dir / INTRINSICS_NAME)

    poses = sample_hemisphere_poses(mesh, intr, pose_cfg)
    labels = [rasterize_labels(mesh, intr, p) for p in poses]

    if extractor is None:
        extractor = build_extractor(synth_cfg.extractor)
    synthesizers = {t.id: AppearanceSynthesizer(t, synth_cfg, extractor) for t in textures}

    existing = _manifest_hashes(out_dir)
    summary = GenerationSummary()
    results: dict[str, tuple[AppearanceSample, str]] = {}
    lock = Lock()

    def plan_ids(p_idx: int, tex_idx: int) -> list[tuple[str, int | None]]:
        base = f"p{p_idx:04d}_{textures[tex_idx].id}"
        out = [(base, None)]
        for k in range(1, aug_cfg.n_augmentations + 1):
            out.append(
                (f"{base}_a{k:02d}", derive_seed(aug_cfg.elastic.seed, p_idx, tex_idx, k))
            )
        return out

    def resumable(sample_id: str, pose: Pose, tex_id: str, aug_seed: int | None) -> str | None:
        entry = existing.get(sample_id)
        if entry is None or "sha256" not in entry:
            return None
        if entry["texture_id"] != tex_id or entry["aug_seed"] != aug_seed:
            return None
        if not np.array_equal(np.asarray(entry["pose"]), pose.as_vector()):
            return None
        img_file = out_dir / entry.get("image", f"images/{sample_id}.png")
        if not img_file.exists() or _sha256(img_file.read_bytes()) != entry["sha256"]:
            return None
        return entry["sha256"]

    def run_job(p_idx: int, tex_idx: int) -> None:
        tex = textures[tex_idx]
        pose = poses[p_idx]
        ids = plan_ids(p_idx, tex_idx)
        done = {sid: resumable(sid, pose, tex.id, aseed) for sid, aseed in ids}
        base_image: np.ndarray | None = None
        if any(h is None for h in done.values()):
            synth_seed = derive_seed(synth_cfg.seed, p_idx, tex_idx)
            result = synthesizers[tex.id].synthesize(labels[p_idx], seed=synth_seed)
            base_image = np.clip(np.rint(result.image * 255.0), 0, 255).astype(np.uint8)
        for sid, aug_seed in ids:
            rel = f"images/{sid}.png"
            if done[sid] is not None:
                with lock:
                    summary.n_resumed += 1
                    results[sid] = (
                        AppearanceSample(sid, rel, pose, tex.id, aug_seed), done[sid]
                    )
                continue
            img = base_image if aug_seed is None else elastic_deform(
                base_image, replace(aug_cfg.elastic, seed=aug_seed)
            )
            data = _encode_png(img)
            (out_dir / rel).write_bytes(data)
            with lock:
                summary.n_synthesized += 1
                results[sid] = (AppearanceSample(sid, rel, pose, tex.id, aug_seed), _sha256(data))

    jobs = [(p, t) for p in range(len(poses)) for t in range(len(textures))]
    summary.n_planned = len(jobs) * (1 + aug_cfg.n_augmentations)
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_job, p, t): (p, t) for p, t in jobs}
            for fut, (p, t) in futures.items():
                try:
                    fut.result()
                except Exception as exc:  # noqa: BLE001 - per-job isolation
                    sid = f"p{p:04d}_{textures[t].id}"
                    summary.failures.append((sid, str(exc)))
                    log.warning("synthesis failed for %s: %s", sid, exc)
    else:
        for p, t in jobs:
            try:
                run_job(p, t)
            except Exception as exc:  # noqa: BLE001
                sid = f"p{p:04d}_{textures[t].id}"
                summary.failures.append((sid, str(exc)))
                log.warning("synthesis failed for %s: %s", sid, exc)
    log.info(
        "generated %d images (%d resumed, %d failures) in %.1fs",
        summary.n_synthesized, summary.n_resumed, len(summary.failures),
        time.perf_counter() - t0,
    )

    ordered = sorted(results)
    ds = CaseDataset(
        case_id=case_id,
        mesh_path=MESH_NAME,
        intrinsics=intr,
        samples=[results[sid][0] for sid in ordered],
        texture_ids=[t.id for t in textures],
        root=out_dir,
    )
    save_manifest(ds, hashes={sid: results[sid][1] for sid in ordered})
    return ds, summary


def make_loto_split(ds: CaseDataset, held_out) -> tuple[CaseDataset, CaseDataset]:
    """Partition by texture id: validation gets exactly the held-out textures."""
    held = set(held_out)
    if not held:
        raise ValueError("held_out must be non-empty")
    unknown = held - set(ds.texture_ids)
    if unknown:
        raise ValueError(f"held-out textures not in dataset: {sorted(unknown)}")
    if held == set(ds.texture_ids):
        raise ValueError("cannot hold out every texture")
    train_samples = [s for s in ds.samples if s.texture_id not in held]
    val_samples = [s for s in ds.samples if s.texture_id in held]
    train = replace(
        ds,
        samples=train_samples,
        texture_ids=[t for t in ds.texture_ids if t not in held],
    )
    val = replace(
        ds,
        samples=val_samples,
        texture_ids=[t for t in ds.texture_ids if t in held],
    )
    return train, val


def subsample_textures(ds: CaseDataset, k: int, seed: int = 0) -> CaseDataset:
    """Keep k textures, then resample with replacement back to the original size.

    Keeps the training-set size constant across k so texture-count ablations
    do not conflate texture variety with corpus size.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ds.texture_ids):
        raise ValueError(f"k={k} exceeds available textures ({len(ds.texture_ids)})")
    rng = np.random.default_rng(seed)
    chosen_idx = rng.choice(len(ds.texture_ids), size=k, replace=False)
    chosen = [ds.texture_ids[i] for i in sorted(chosen_idx)]
    kept = [s for s in ds.samples if s.texture_id in set(chosen)]
    if len(kept) == len(ds.samples):
        return replace(ds, samples=kept, texture_ids=chosen)
    idx = rng.choice(len(kept), size=len(ds.samples), replace=True)
    return replace(ds, samples=[kept[i] for i in idx], texture_ids=chosen)
