"""Run configuration: a versioned YAML schema covering the whole pipeline.

Defaults match the standard operating point (512x512 views, 30 degree FOV,
blend weights 2/1e6/1e5/1e-4, Adam 0.005 x 400 steps, placement distance
[0.4, 0.6] with depth-change threshold 0.02, dataset ranges d in [0.1, 1.3],
ambient/diffuse in [0.2, 0.99], light specular in [0, 0.1], material
specular in [0, 0.05], shininess in [30, 60]).

All randomness flows from the single `seed`; stage and per-mesh seeds are
derived by stable hashing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .blending import BlendConfig
from .synthesis import SceneRanges

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


@dataclass
class MeshEntry:
    """One mesh to process: OBJ + texture, optional masks and labels."""

    id: str
    obj: str
    texture: str
    nonskin_mask: str | None = None
    anatomy_labels: str | None = None
    anatomy_from_obj: str | None = None
    anatomy_from_labels: str | None = None
    real_lesion_boxes: str | None = None


@dataclass
class PlacementConfig:
    distance_range: tuple[float, float] = (0.4, 0.6)
    depth_change_threshold: float = 0.02
    max_tries: int = 50
    lesion_view_fraction: float = 0.25
    augment: bool = True
    color_constancy_power: float = 6.0


@dataclass
class RunConfig:
    meshes: list[MeshEntry]
    lesions: str
    backgrounds: str | None = None
    lesions_per_mesh: int = 1
    views_per_mesh: int = 1
    seed: int = 0
    output_dir: str = "out"
    view_width: int = 512
    view_height: int = 512
    fov_degrees: float = 30.0
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    scene_ranges: SceneRanges = field(default_factory=SceneRanges)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.lesions_per_mesh < 0 or self.views_per_mesh < 0:
            raise ConfigError("lesions_per_mesh and views_per_mesh must be >= 0")
        if not self.meshes:
            raise ConfigError("at least one mesh entry is required")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "meshes": [_strip_none(dataclasses.asdict(m)) for m in self.meshes],
            "lesions": self.lesions,
            "backgrounds": self.backgrounds,
            "lesions_per_mesh": self.lesions_per_mesh,
            "views_per_mesh": self.views_per_mesh,
            "view_width": self.view_width,
            "view_height": self.view_height,
            "fov_degrees": self.fov_degrees,
            "placement": {
                "distance_range": list(self.placement.distance_range),
                "depth_change_threshold": self.placement.depth_change_threshold,
                "max_tries": self.placement.max_tries,
                "lesion_view_fraction": self.placement.lesion_view_fraction,
                "augment": self.placement.augment,
                "color_constancy_power": self.placement.color_constancy_power,
            },
            "blend": dataclasses.asdict(self.blend),
            "scene_ranges": {
                name: list(getattr(self.scene_ranges, name))
                for name in (
                    "distance",
                    "ambient",
                    "diffuse",
                    "light_specular",
                    "material_specular",
                    "shininess",
                )
            },
        }

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")

        def resolve(value: str | None) -> str | None:
            if value is None:
                return None
            p = Path(value)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return str(p)

        raw_meshes = data.pop("meshes", None)
        if not raw_meshes:
            raise ConfigError("config must list at least one mesh")
        meshes = []
        for raw in raw_meshes:
            raw = dict(raw)
            anatomy_from = raw.pop("anatomy_from", None)
            entry = MeshEntry(
                id=str(raw.pop("id", f"mesh{len(meshes)}")),
                obj=resolve(_require(raw, "obj", "mesh entry")),
                texture=resolve(_require(raw, "texture", "mesh entry")),
                nonskin_mask=resolve(raw.pop("nonskin_mask", None)),
                anatomy_labels=resolve(raw.pop("anatomy_labels", None)),
                anatomy_from_obj=resolve(anatomy_from.get("obj") if anatomy_from else raw.pop("anatomy_from_obj", None)),
                anatomy_from_labels=resolve(anatomy_from.get("labels") if anatomy_from else raw.pop("anatomy_from_labels", None)),
                real_lesion_boxes=resolve(raw.pop("real_lesion_boxes", None)),
            )
            if raw:
                raise ConfigError(f"unknown mesh entry key(s): {sorted(raw)}")
            meshes.append(entry)

        placement_raw = dict(data.pop("placement", {}) or {})
        if "distance_range" in placement_raw:
            placement_raw["distance_range"] = tuple(placement_raw["distance_range"])
        try:
            placement = PlacementConfig(**placement_raw)
        except TypeError as exc:
            raise ConfigError(f"bad placement config: {exc}") from None

        blend_raw = dict(data.pop("blend", {}) or {})
        try:
            blend = BlendConfig(**blend_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad blend config: {exc}") from None

        ranges_raw = dict(data.pop("scene_ranges", {}) or {})
        try:
            ranges = SceneRanges(**{k: tuple(v) for k, v in ranges_raw.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scene_ranges: {exc}") from None

        kwargs = {}
        for name in (
            "seed",
            "output_dir",
            "lesions_per_mesh",
            "views_per_mesh",
            "view_width",
            "view_height",
            "fov_degrees",
        ):
            if name in data:
                kwargs[name] = data.pop(name)
        lesions = resolve(data.pop("lesions", None))
        if lesions is None:
            raise ConfigError("config must point at a lesion manifest (lesions:)")
        backgrounds = resolve(data.pop("backgrounds", None))
        if data:
            raise ConfigError(f"unknown config key(s): {sorted(data)}")
        try:
            return cls(
                meshes=meshes,
                lesions=lesions,
                backgrounds=backgrounds,
                placement=placement,
                blend=blend,
                scene_ranges=ranges,
                **kwargs,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config must be a YAML mapping")
        config = cls.from_dict(data, base_dir=path.parent)
        config.validate_paths()
        return config

    def validate_paths(self) -> None:
        """All referenced input paths must exist before any work starts."""
        missing = []
        for entry in self.meshes:
            for name in ("obj", "texture", "nonskin_mask", "anatomy_labels", "anatomy_from_obj", "anatomy_from_labels", "real_lesion_boxes"):
                value = getattr(entry, name)
                if value is not None and not Path(value).exists():
                    missing.append(f"meshes[{entry.id}].{name}: {value}")
        if not Path(self.lesions).exists():
            missing.append(f"lesions: {self.lesions}")
        if self.backgrounds is not None and not Path(self.backgrounds).is_dir():
            missing.append(f"backgrounds: {self.backgrounds}")
        if missing:
            raise ConfigError("missing input path(s):\n  " + "\n  ".join(missing))

    def texture_dir(self, mesh_id: str) -> Path:
        return Path(self.output_dir) / "textures" / mesh_id


def _require(raw: dict, key: str, where: str):
    if key not in raw:
        raise ConfigError(f"{where} is missing required key '{key}'")
    return raw.pop(key)


def _strip_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}
