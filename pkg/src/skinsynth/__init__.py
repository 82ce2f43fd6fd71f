"""skinsynth: blend segmented skin-lesion photos into the UV textures of 3D
body meshes through a differentiable software rasterizer, then render
densely annotated synthetic 2D views (RGB, semantic masks, anatomy labels,
depth maps, bounding boxes) under sampled cameras, lights, materials, and
backgrounds."""

from .blending import (
    Adam,
    BlendConfig,
    BlendViews,
    FeatureExtractor,
    FilterPyramidExtractor,
    IdentityExtractor,
    blend_lesions,
    composite,
    content_loss,
    gradient_loss,
    style_loss,
    tv_loss,
)
from .config import ConfigError, MeshEntry, PlacementConfig, RunConfig
from .geometry import (
    AnatomyLabelMap,
    FaceSample,
    Mesh,
    MeshError,
    group_labels,
    load_mesh,
    sample_surface,
    transfer_anatomy,
)
from .placement import (
    LesionSource,
    PlacementCandidate,
    PlacementFailure,
    TextureSet,
    body_and_skin_masks,
    camera_from_surface,
    compose_paste_view,
    depth_change,
    find_placement,
    infer_skin_mask,
    paste_to_texture,
)
from .renderer import (
    Camera,
    Fragments,
    Material,
    PointLight,
    RenderOutput,
    rasterize,
    render,
    render_label,
    shade,
    texture_vjp,
)
from .synthesis import (
    AnnotationBundle,
    SceneRanges,
    SceneSample,
    boxes_from_mask,
    composite_background,
    generate_views,
    sample_scene,
    shades_of_gray,
    validate_view,
)

__version__ = "0.1.0"
