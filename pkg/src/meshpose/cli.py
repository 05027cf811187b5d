"""Command-line entry points wiring the pipeline end to end.

One TOML config file drives every subcommand; command-line flags override
file values. Exit codes: 0 ok, 2 config error, 3 missing upstream artifact,
4 runtime failure.

Subcommands: gen-data, train, evaluate, loto, ablation, predict, overlay.
The pretrained feature-extractor cache is located via $EP_CACHE_DIR.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from . import evaluation as ev
from .dataset import (
    AugmentationConfig,
    CaseDataset,
    generate_case_dataset,
    load_case,
    make_loto_split,
)
from .features import DEFAULT_LAYERS, build_extractor
from .geometry import CameraIntrinsics, Pose, PoseSamplingConfig
from .meshio import load_mesh
from .rasterizer import GT_COLOR, PRED_COLOR, load_rgb_png, render_overlay, save_rgb_png
from .regressor import RegressorConfig, TrainedModel, build_model, predict, train
from .synthesis import ElasticDeformConfig, SynthesisConfig
from .textures import load_texture_dir

log = logging.getLogger("meshpose.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

SMOKE_POSES = 20
SMOKE_TEXTURES = 4
SMOKE_EPOCHS = 30


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}]: must be a table")
    return sec


def _get(sec: dict, section: str, key: str, typ, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{section}].{key}: required field is missing")
        return default
    val = sec[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ConfigError(f"[{section}].{key}: expected {typ.__name__}, got {type(val).__name__}")
    return val


@dataclass
class RunConfig:
    config_path: Path
    case_dir: Path
    mesh_path: Path | None
    textures_dir: Path | None
    case_id: str | None
    intrinsics: CameraIntrinsics
    sampling: PoseSamplingConfig
    synthesis: SynthesisConfig
    augmentation: AugmentationConfig
    regressor: RegressorConfig
    held_out: list[str]
    ablation_k: list[int]
    ablation_held_out: list[str]
    model_dir: Path
    reports_dir: Path
    run_id: str
    max_threshold: float
    threshold_step: float
    seed: int


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    seed = _get(doc, "", "seed", int, 0)

    case = _section(doc, "case")
    case_dir = Path(_get(case, "case", "case_dir", str, required=True))
    mesh = _get(case, "case", "mesh", str)
    textures_dir = _get(case, "case", "textures_dir", str)
    case_id = _get(case, "case", "case_id", str)

    intr_sec = _section(doc, "intrinsics")
    width = _get(intr_sec, "intrinsics", "width", int, 128)
    height = _get(intr_sec, "intrinsics", "height", int, 128)
    default_f = 1.2 * max(width, height)
    intr = CameraIntrinsics(
        fx=_get(intr_sec, "intrinsics", "fx", float, default_f),
        fy=_get(intr_sec, "intrinsics", "fy", float, default_f),
        cx=_get(intr_sec, "intrinsics", "cx", float, width / 2.0),
        cy=_get(intr_sec, "intrinsics", "cy", float, height / 2.0),
        width=width,
        height=height,
    )

    samp = _section(doc, "sampling")
    try:
        sampling = PoseSamplingConfig(
            n_poses=_get(samp, "sampling", "n_poses", int, 100),
            radius_range=(
                _get(samp, "sampling", "radius_min", float, 70.0),
                _get(samp, "sampling", "radius_max", float, 100.0),
            ),
            elevation_range=(
                _get(samp, "sampling", "elevation_min", float, 0.55),
                _get(samp, "sampling", "elevation_max", float, 1.25),
            ),
            roll_range=(
                _get(samp, "sampling", "roll_min", float, -0.3),
                _get(samp, "sampling", "roll_max", float, 0.3),
            ),
            lookat_jitter=_get(samp, "sampling", "lookat_jitter", float, 2.0),
            seed=_get(samp, "sampling", "seed", int, seed),
        )
    except ValueError as exc:
        raise ConfigError(f"[sampling]: {exc}") from exc

    syn = _section(doc, "synthesis")
    layers = _get(syn, "synthesis", "layers", list, list(DEFAULT_LAYERS))
    try:
        synthesis = SynthesisConfig(
            layer_set=tuple(layers),
            max_iterations=_get(syn, "synthesis", "max_iterations", int, 100),
            convergence_tol=_get(syn, "synthesis", "convergence_tol", float, 1e-6),
            init_mode=_get(syn, "synthesis", "init_mode", str, "class-mean"),
            seed=_get(syn, "synthesis", "seed", int, seed),
            extractor=_get(syn, "synthesis", "extractor", str, "vgg19"),
        )
    except ValueError as exc:
        raise ConfigError(f"[synthesis]: {exc}") from exc

    aug = _section(doc, "augmentation")
    try:
        augmentation = AugmentationConfig(
            n_augmentations=_get(aug, "augmentation", "count", int, 0),
            elastic=ElasticDeformConfig(
                grid_spacing=_get(aug, "augmentation", "grid_spacing", int, 32),
                displacement_sigma=_get(aug, "augmentation", "displacement_sigma", float, 4.0),
                seed=_get(aug, "augmentation", "seed", int, seed),
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"[augmentation]: {exc}") from exc

    reg = _section(doc, "regressor")
    channels = _get(reg, "regressor", "channels", list, [16, 32, 64])
    try:
        regressor = RegressorConfig(
            input_size=_get(reg, "regressor", "input_size", int, 256),
            block_channels=tuple(channels),
            epochs=_get(reg, "regressor", "epochs", int, 200),
            batch_size=_get(reg, "regressor", "batch_size", int, 8),
            lr_start=_get(reg, "regressor", "lr_start", float, 1e-3),
            lr_end=_get(reg, "regressor", "lr_end", float, 1e-4),
            seed=_get(reg, "regressor", "seed", int, seed),
        )
    except ValueError as exc:
        raise ConfigError(f"[regressor]: {exc}") from exc

    split = _section(doc, "split")
    held_out = _get(split, "split", "held_out", list, [])

    abl = _section(doc, "ablation")
    ablation_k = _get(abl, "ablation", "k_values", list, [])
    ablation_held_out = _get(abl, "ablation", "held_out", list, [])

    out = _section(doc, "output")
    root = Path(_get(out, "output", "root", str, "out"))
    model_dir = Path(_get(out, "output", "model_dir", str, str(root / "model")))
    reports_dir = Path(_get(out, "output", "reports_dir", str, str(root / "reports")))

    evl = _section(doc, "evaluation")
    run_id = _get(evl, "evaluation", "run_id", str, "run")
    max_threshold = _get(evl, "evaluation", "max_threshold", float, 20.0)
    threshold_step = _get(evl, "evaluation", "step", float, 0.5)

    return RunConfig(
        config_path=path,
        case_dir=case_dir,
        mesh_path=Path(mesh) if mesh else None,
        textures_dir=Path(textures_dir) if textures_dir else None,
        case_id=case_id,
        intrinsics=intr,
        sampling=sampling,
        synthesis=synthesis,
        augmentation=augmentation,
        regressor=regressor,
        held_out=[str(t) for t in held_out],
        ablation_k=[int(k) for k in ablation_k],
        ablation_held_out=[str(t) for t in ablation_held_out],
        model_dir=model_dir,
        reports_dir=reports_dir,
        run_id=run_id,
        max_threshold=max_threshold,
        threshold_step=threshold_step,
        seed=seed,
    )


def _require_case(cfg: RunConfig) -> CaseDataset:
    manifest = cfg.case_dir / "manifest.json"
    if not manifest.exists():
        raise MissingArtifactError(f"expected dataset manifest at {manifest} (run gen-data first)")
    return load_case(cfg.case_dir)


def _require_model(cfg: RunConfig) -> TrainedModel:
    weights = cfg.model_dir / "weights.bin"
    if not weights.exists():
        raise MissingArtifactError(f"expected model bundle at {cfg.model_dir} (run train first)")
    return TrainedModel.load(cfg.model_dir)


def _split_for_eval(cfg: RunConfig, ds: CaseDataset) -> tuple[CaseDataset, CaseDataset | None]:
    if cfg.held_out:
        return make_loto_split(ds, set(cfg.held_out))
    return ds, None


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if cfg.mesh_path is None:
        raise ConfigError("[case].mesh: required for gen-data")
    if not cfg.mesh_path.exists():
        raise ConfigError(f"[case].mesh: path does not exist: {cfg.mesh_path}")
    if cfg.textures_dir is None:
        raise ConfigError("[case].textures_dir: required for gen-data")
    if not cfg.textures_dir.exists():
        raise ConfigError(f"[case].textures_dir: path does not exist: {cfg.textures_dir}")
    mesh = load_mesh(cfg.mesh_path)
    textures = load_texture_dir(cfg.textures_dir)
    sampling = cfg.sampling
    if args.smoke:
        sampling = replace(sampling, n_poses=min(SMOKE_POSES, sampling.n_poses))
        textures = textures[:SMOKE_TEXTURES]
        log.info("smoke profile: %d poses, %d textures", sampling.n_poses, len(textures))
    log.info(
        "gen-data: %d poses x %d textures x (1+%d augs), seeds sampling=%d synthesis=%d",
        sampling.n_poses, len(textures), cfg.augmentation.n_augmentations,
        sampling.seed, cfg.synthesis.seed,
    )
    extractor = build_extractor(cfg.synthesis.extractor)
    t0 = time.perf_counter()
    ds, summary = generate_case_dataset(
        mesh, cfg.intrinsics, textures, sampling, cfg.synthesis, cfg.augmentation,
        cfg.case_dir, extractor=extractor, workers=args.workers,
        case_id=cfg.case_id,
    )
    log.info(
        "gen-data done: %d samples (%d new, %d resumed, %d failed) in %.1fs -> %s",
        len(ds), summary.n_synthesized, summary.n_resumed, len(summary.failures),
        time.perf_counter() - t0, cfg.case_dir,
    )
    for sid, err in summary.failures:
        log.warning("failed sample %s: %s", sid, err)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _require_case(cfg)
    train_ds, val_ds = _split_for_eval(cfg, ds)
    reg_cfg = cfg.regressor
    if args.epochs:
        reg_cfg = replace(reg_cfg, epochs=args.epochs)
    if args.smoke:
        reg_cfg = replace(reg_cfg, epochs=SMOKE_EPOCHS)
    log.info(
        "train: %d samples (val %s), input %dpx, %d epochs, seed %d",
        len(train_ds), len(val_ds) if val_ds else 0, reg_cfg.input_size,
        reg_cfg.epochs, reg_cfg.seed,
    )
    t0 = time.perf_counter()
    model = build_model(reg_cfg)
    trained = train(model, train_ds, val_ds, reg_cfg)
    trained.save(cfg.model_dir)
    log.info("train done in %.1fs -> %s", time.perf_counter() - t0, cfg.model_dir)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ds = _require_case(cfg)
    trained = _require_model(cfg)
    _, val_ds = _split_for_eval(cfg, ds)
    target = val_ds if val_ds is not None else ds
    mesh = ds.load_mesh()
    log.info("evaluate: %d samples from %s", len(target), cfg.case_dir)
    result = ev.evaluate(trained, ev.eval_samples_from_dataset(target), mesh)
    curve = ev.accuracy_threshold_curve(result, cfg.max_threshold, cfg.threshold_step)
    out = cfg.reports_dir / cfg.run_id
    ev.write_curve_csv(curve, out / "curve.csv")
    ev.write_records_csv(result, out / "records.csv")
    ev.plot_curve(curve, out / "curve.png")
    ev.write_run_json(
        out / "run.json",
        command="evaluate",
        config_file=str(cfg.config_path),
        regressor=cfg.regressor,
        held_out=cfg.held_out,
        n_samples=len(result.records),
        mean_add_mm=result.mean_add,
        accuracy_3mm3deg=result.accuracy_3mm3deg,
        seed=cfg.seed,
    )
    log.info(
        "evaluate done: mean ADD %.3f mm, 3mm-3deg %.2f%% -> %s",
        result.mean_add, result.accuracy_3mm3deg, out,
    )
    return EXIT_OK


def cmd_loto(cfg: RunConfig, args) -> int:
    ds = _require_case(cfg)
    mesh = ds.load_mesh()
    reg_cfg = cfg.regressor if not args.smoke else replace(cfg.regressor, epochs=SMOKE_EPOCHS)
    log.info("loto: %d folds over %s", len(ds.texture_ids), ds.texture_ids)
    result = ev.loto_cross_validation(ds, reg_cfg, mesh=mesh)
    out = cfg.reports_dir / cfg.run_id
    ev.write_loto_csv(result, out / "loto.csv")
    ev.plot_loto(result, out / "loto.png")
    ev.write_run_json(
        out / "run.json", command="loto", config_file=str(cfg.config_path),
        regressor=reg_cfg, mean_add_mm=result.mean_add, std_add_mm=result.std_add,
        failed=result.failed, seed=cfg.seed,
    )
    log.info("loto done: %.3f +/- %.3f mm -> %s", result.mean_add, result.std_add, out)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, args) -> int:
    ds = _require_case(cfg)
    if not cfg.ablation_k:
        raise ConfigError("[ablation].k_values: required for ablation")
    if not cfg.ablation_held_out:
        raise ConfigError("[ablation].held_out: required for ablation")
    mesh = ds.load_mesh()
    reg_cfg = cfg.regressor if not args.smoke else replace(cfg.regressor, epochs=SMOKE_EPOCHS)
    result = ev.texture_ablation(
        ds, cfg.ablation_k, cfg.ablation_held_out, reg_cfg, subsample_seed=cfg.seed, mesh=mesh
    )
    out = cfg.reports_dir / cfg.run_id
    ev.write_ablation_csv(result, out / "ablation.csv")
    ev.plot_ablation(result, out / "ablation.png")
    ev.write_run_json(
        out / "run.json", command="ablation", config_file=str(cfg.config_path),
        regressor=reg_cfg, k_values=cfg.ablation_k, held_out=cfg.ablation_held_out,
        failed=result.failed, seed=cfg.seed,
    )
    log.info("ablation done -> %s", out)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    trained = _require_model(cfg)
    img_path = Path(args.image)
    if not img_path.exists():
        raise MissingArtifactError(f"expected input image at {img_path}")
    image = load_rgb_png(img_path)
    t0 = time.perf_counter()
    pose = predict(trained, image)
    dt = (time.perf_counter() - t0) * 1000.0
    log.info("predict: %s in %.1f ms", img_path.name, dt)
    print(" ".join(repr(float(x)) for x in pose.as_vector()))
    return EXIT_OK


def _parse_pose_arg(text: str) -> Pose:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise ConfigError(f"pose must be six numbers (r_x r_y r_z t_x t_y t_z), got {len(vals)}")
    return Pose.from_vector(vals)


def cmd_overlay(cfg: RunConfig, args) -> int:
    ds = _require_case(cfg)
    mesh = ds.load_mesh()
    img_path = Path(args.image)
    if not img_path.exists():
        raise MissingArtifactError(f"expected input image at {img_path}")
    image = load_rgb_png(img_path)

    gt_pose = None
    if args.pose_gt:
        gt_pose = _parse_pose_arg(args.pose_gt)
    elif args.sample_id:
        match = [s for s in ds.samples if s.id == args.sample_id]
        if not match:
            raise ConfigError(f"sample id {args.sample_id!r} not in manifest")
        gt_pose = match[0].pose

    pred_pose = None
    if args.pose_pred:
        pred_pose = _parse_pose_arg(args.pose_pred)
    elif not args.no_predict:
        trained = _require_model(cfg)
        pred_pose = predict(trained, image)

    if gt_pose is None and pred_pose is None:
        raise ConfigError("overlay needs a ground-truth pose, a predicted pose, or a model")

    out = image
    if gt_pose is not None:
        out = render_overlay(out, mesh, ds.intrinsics, gt_pose, GT_COLOR, args.opacity)
    if pred_pose is not None:
        out = render_overlay(out, mesh, ds.intrinsics, pred_pose, PRED_COLOR, args.opacity)
    save_rgb_png(out, args.output)
    log.info("overlay -> %s", args.output)
    return EXIT_OK


_CONFIG_HELP = {
    "gen-data": "[case].mesh, [case].textures_dir, [case].case_dir, [case].case_id, "
    "[intrinsics].{width,height,fx,fy,cx,cy}, [sampling].{n_poses,radius_min,radius_max,"
    "elevation_min,elevation_max,roll_min,roll_max,lookat_jitter,seed}, "
    "[synthesis].{extractor,layers,max_iterations,convergence_tol,init_mode,seed}, "
    "[augmentation].{count,grid_spacing,displacement_sigma,seed}, seed",
    "train": "[case].case_dir, [split].held_out, [regressor].{input_size,channels,epochs,"
    "batch_size,lr_start,lr_end,seed}, [output].model_dir",
    "evaluate": "[case].case_dir, [split].held_out, [output].{model_dir,reports_dir}, "
    "[evaluation].{run_id,max_threshold,step}",
    "loto": "[case].case_dir, [regressor].*, [output].reports_dir, [evaluation].run_id",
    "ablation": "[case].case_dir, [ablation].{k_values,held_out}, [regressor].*, "
    "[output].reports_dir, [evaluation].run_id, seed",
    "predict": "[output].model_dir",
    "overlay": "[case].case_dir, [output].model_dir",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshpose",
        description="Patient-specific 3D/2D registration pipeline "
        "(data generation, pose-regressor training, evaluation).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, **extra):
        p = sub.add_parser(
            name, help=help_text,
            description=f"{help_text}\n\nConfig fields read: {_CONFIG_HELP[name]}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", "-c", required=True, help="TOML run config")
        p.add_argument("--verbose", "-v", action="store_true", help="debug logging")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "Generate the per-case training corpus")
    p.add_argument("--workers", type=int, default=1, help="parallel synthesis jobs")
    p.add_argument("--smoke", action="store_true",
                   help=f"reduced profile: {SMOKE_POSES} poses, {SMOKE_TEXTURES} textures")

    p = add("train", cmd_train, "Train the pose-regression network")
    p.add_argument("--epochs", type=int, default=0, help="override [regressor].epochs")
    p.add_argument("--smoke", action="store_true", help=f"train {SMOKE_EPOCHS} epochs")

    p = add("evaluate", cmd_evaluate, "Evaluate the trained model; write curve.csv and plots")

    p = add("loto", cmd_loto, "Leave-one-texture-out cross-validation")
    p.add_argument("--smoke", action="store_true", help=f"{SMOKE_EPOCHS}-epoch folds")

    p = add("ablation", cmd_ablation, "Texture-count ablation at constant training size")
    p.add_argument("--smoke", action="store_true", help=f"{SMOKE_EPOCHS}-epoch points")

    p = add("predict", cmd_predict, "Predict the pose of one image (prints 6 numbers)")
    p.add_argument("--image", required=True, help="input RGB PNG")

    p = add("overlay", cmd_overlay, "Render mesh overlays (ground truth green, predicted blue)")
    p.add_argument("--image", required=True, help="input RGB PNG")
    p.add_argument("--output", required=True, help="output PNG path")
    p.add_argument("--sample-id", help="take the ground-truth pose from this manifest sample")
    p.add_argument("--pose-gt", help="explicit ground-truth pose: 'r_x r_y r_z t_x t_y t_z'")
    p.add_argument("--pose-pred", help="explicit predicted pose (skips the model)")
    p.add_argument("--no-predict", action="store_true", help="draw only the ground truth")
    p.add_argument("--opacity", type=float, default=0.45, help="overlay opacity in [0, 1]")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("runtime failure: %s", exc, exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
