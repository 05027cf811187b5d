"""meshpose: patient-specific 3D/2D registration by learned pose regression.

Pipeline: sample 6-DoF camera poses over a labeled surface mesh, rasterize
per-pose class maps, synthesize textured training views by per-class Gram
matching against texture exemplars, train a patient-specific CNN that
regresses the pose of a single RGB image, and evaluate with ADD metrics,
accuracy-threshold curves, texture cross-validation and ablations.
"""

from .geometry import (
    BACKGROUND,
    PARENCHYMA,
    VESSEL,
    BehindCameraError,
    CameraIntrinsics,
    Pose,
    PoseSamplingConfig,
    SurfaceMesh,
    add_metric,
    compose_poses,
    look_at_pose,
    matrix_to_rodrigues,
    project_points,
    reprojection_error,
    rodrigues_to_matrix,
    rotation_error_deg,
    sample_hemisphere_poses,
    translation_error_mm,
    within_threshold,
)
from .meshio import load_mesh, load_mesh_obj, load_mesh_ply, save_mesh_obj, save_mesh_ply
from .rasterizer import (
    LabelImage,
    load_label_png,
    load_rgb_png,
    rasterize_labels,
    render_overlay,
    save_label_png,
    save_rgb_png,
)
from .features import FeatureExtractor, build_extractor, tiny_extractor, vgg19_extractor
from .synthesis import (
    AppearanceSynthesizer,
    ElasticDeformConfig,
    SynthesisConfig,
    SynthesisResult,
    TextureExemplar,
    elastic_deform,
    masked_gram,
    synthesis_loss,
    synthesize_appearance,
)
from .textures import (
    load_texture,
    load_texture_dir,
    make_procedural_textures,
    procedural_texture,
    save_texture,
    write_procedural_textures,
)
from .synthetic import SyntheticCase, make_dome_mesh, make_synthetic_case, write_synthetic_case
from .dataset import (
    AppearanceSample,
    AugmentationConfig,
    CaseDataset,
    GenerationSummary,
    generate_case_dataset,
    load_case,
    make_loto_split,
    save_manifest,
    subsample_textures,
)
from .regressor import (
    PoseRegressorNet,
    RegressorConfig,
    TrainedModel,
    build_model,
    count_parameters,
    learning_rate,
    pose_loss,
    predict,
    train,
)
from .evaluation import (
    AblationResult,
    ComparisonResult,
    EvalRecord,
    EvalResult,
    LotoResult,
    accuracy_threshold_curve,
    compare_external_poses,
    evaluate,
    eval_samples_from_dataset,
    loto_cross_validation,
    texture_ablation,
)

__version__ = "0.1.0"
