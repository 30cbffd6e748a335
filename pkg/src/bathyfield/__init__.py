"""Refraction-aware two-media radiance fields for desk-scale bathymetry."""

from bathyfield.dataprep import (
    Camera,
    DatasetBundle,
    MaskLabel,
    SchemaError,
    build_dataset,
    normalize_scene,
    read_manifest,
    split_dataset,
    write_manifest,
)
from bathyfield.evaluation import (
    IcpResult,
    MethodEval,
    ReferenceSurface,
    c2m_signed,
    completeness,
    icp_align,
    psnr,
    report,
    sor_filter,
    ssim,
)
from bathyfield.export import (
    EmptyCloud,
    PointCloud,
    backproject,
    denormalize,
    export_pointcloud,
    read_ply,
    write_ply,
)
from bathyfield.field import (
    DTYPE,
    DensityField,
    FieldConfig,
    HashGrid,
    HashGridConfig,
    RadianceField,
    read_blob,
    write_blob,
)
from bathyfield.geom import (
    Aabb,
    DegenerateGeometry,
    Ray,
    SimilarityTransform,
    TotalInternalReflection,
    WaterPlane,
    apply_similarity,
    fit_plane_lsq,
    intersect_ray_aabb,
    intersect_ray_plane,
    invert_similarity,
    kinked_position,
    refract,
    rotation_plane_to_z,
)
from bathyfield.rendering import (
    VARIANTS,
    NonFiniteLoss,
    PoseCorrections,
    RenderOutputs,
    composite,
    distortion_loss,
    interlevel_loss,
    render_rays,
    render_view,
    rgb_loss,
    total_loss,
)
from bathyfield.sampling import (
    ProposalConfig,
    SampleBatch,
    VirtualRays,
    build_virtual_rays,
    hierarchical_sample,
    sample_pdf,
    sample_uniform,
)
from bathyfield.synthscene import (
    SyntheticScene,
    Trajectory,
    analytic_apparent_depth,
    render_dataset,
    sample_reference_points,
    trace_rays,
)
from bathyfield.training import (
    NonFiniteGradient,
    TrainConfig,
    adam_step,
    fit,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)

__version__ = "0.1.0"
