"""Command-line entry points: paste, blend, render, and the full pipeline.

Each stage reads its predecessor's on-disk artifacts, so `pipeline` is
byte-identical to running the three stages in sequence. Exit codes:
0 success, 2 config error, 3 placement failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .blending import BlendDivergenceError, FilterPyramidExtractor, blend_lesions
from .config import ConfigError, MeshEntry, RunConfig
from .geometry import AnatomyLabelMap, FaceSample, load_mesh, load_vertex_labels, transfer_anatomy
from .imgio import load_binary_mask, load_image, load_label_image, save_image, save_label_image
from .placement import (
    LesionSource,
    PlacementCandidate,
    PlacementFailure,
    TextureSet,
    find_placement,
    paste_to_texture,
)
from .synthesis import (
    SceneRanges,
    boxes_to_ignore_texture,
    derive_seed,
    generate_views,
    shades_of_gray,
    write_manifest,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PLACEMENT = 3
EXIT_NUMERIC = 4

BACKGROUND_SUFFIXES = (".png", ".jpg", ".jpeg")


class PlacementRunError(Exception):
    """One or more lesions could not be placed."""

    def __init__(self, failures: list[PlacementFailure]):
        self.failures = failures
        lines = ", ".join(f"lesion {f.lesion_id}: {f.reason} after {f.tries} tries" for f in failures)
        super().__init__(f"placement failed for {len(failures)} lesion(s): {lines}")


def load_lesion_sources(manifest_path: str | Path, color_constancy_power: float = 6.0) -> list[LesionSource]:
    """Read the lesion manifest JSON and load image/mask pairs.

    Color constancy is applied to each lesion image before any pasting.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    sources = []
    for row in manifest["lesions"]:
        image = load_image(manifest_path.parent / row["image"])
        if color_constancy_power:
            image = shades_of_gray(image, color_constancy_power)
        mask = load_binary_mask(manifest_path.parent / row["mask"])
        sources.append(LesionSource(image=image, mask=mask, lesion_id=int(row["id"])))
    if not sources:
        raise ConfigError(f"lesion manifest {manifest_path} lists no lesions")
    return sources


def _load_texture_set(entry: MeshEntry) -> TextureSet:
    texture = load_image(entry.texture)
    nonskin = load_binary_mask(entry.nonskin_mask) if entry.nonskin_mask else None
    if nonskin is not None and nonskin.shape != texture.shape[:2]:
        raise ConfigError(f"non-skin mask size differs from texture for mesh {entry.id}")
    return TextureSet.fresh(texture, nonskin)


def _load_anatomy(entry: MeshEntry, mesh) -> AnatomyLabelMap | None:
    if entry.anatomy_labels:
        labels = load_vertex_labels(entry.anatomy_labels)
        if len(labels) != len(mesh.vertices):
            raise ConfigError(f"anatomy labels length mismatch for mesh {entry.id}")
        return AnatomyLabelMap(labels=labels)
    if entry.anatomy_from_obj and entry.anatomy_from_labels:
        labeled = load_mesh(entry.anatomy_from_obj, anatomy_path=entry.anatomy_from_labels)
        return transfer_anatomy(labeled, mesh)
    return None


# -- paste ----------------------------------------------------------------


def cmd_paste(config: RunConfig) -> dict[str, Path]:
    """Place and paste lesions for every mesh; writes the texture artifacts
    and a placement log. Raises PlacementRunError when any lesion cannot be
    placed (successful pastes are still written)."""
    sources = load_lesion_sources(config.lesions, config.placement.color_constancy_power)
    written: dict[str, Path] = {}
    all_failures: list[PlacementFailure] = []
    for entry in config.meshes:
        mesh = load_mesh(entry.obj)
        textures = _load_texture_set(entry)
        rng = np.random.default_rng(derive_seed(config.seed, "paste", entry.id))
        placements: list[PlacementCandidate] = []
        failures: list[PlacementFailure] = []
        for k in range(config.lesions_per_mesh):
            src = sources[int(rng.integers(len(sources)))]
            lesion = LesionSource(
                image=src.image,
                mask=src.mask,
                lesion_id=k + 1,
                dilated_mask=src.dilated_mask,
            )
            result = find_placement(
                mesh,
                textures,
                lesion,
                rng,
                threshold=config.placement.depth_change_threshold,
                max_tries=config.placement.max_tries,
                distance_range=config.placement.distance_range,
                view_size=config.blend.view_size,
                fov=config.fov_degrees,
                lesion_view_fraction=config.placement.lesion_view_fraction,
                augment=config.placement.augment,
            )
            if isinstance(result, PlacementFailure):
                failures.append(result)
                continue
            paste_to_texture(
                result.fragments,
                result.paste_view,
                result.paste_mask,
                textures,
                result.lesion_id,
                dilated_view=result.dilated_view,
                dilated_mask=result.dilated_mask,
            )
            placements.append(result)

        tex_dir = config.texture_dir(entry.id)
        tex_dir.mkdir(parents=True, exist_ok=True)
        save_image(tex_dir / "pasted.png", textures.pasted)
        save_image(tex_dir / "dilated_paste.png", textures.dilated_paste)
        save_label_image(tex_dir / "lesion_ids.png", textures.lesion_ids)
        save_label_image(tex_dir / "dilated_ids.png", textures.dilated_ids)
        log = {
            "mesh_id": entry.id,
            "placements": [
                {
                    "lesion_id": p.lesion_id,
                    "face_index": p.surface.face_index,
                    "barycentric": p.surface.barycentric.tolist(),
                    "point": p.surface.world_point.tolist(),
                    "normal": p.surface.normal.tolist(),
                    "distance": p.distance,
                    "depth_change": p.depth_change,
                }
                for p in placements
            ],
            "failures": [
                {
                    "lesion_id": f.lesion_id,
                    "reason": f.reason,
                    "tries": f.tries,
                    "failure_counts": f.failure_counts,
                    "best_depth_change": f.best_depth_change,
                }
                for f in failures
            ],
        }
        with open(tex_dir / "placements.json", "w") as fh:
            json.dump(log, fh, indent=2, sort_keys=True)
        written[entry.id] = tex_dir
        all_failures.extend(failures)
    if all_failures:
        raise PlacementRunError(all_failures)
    return written


# -- blend ------------------------------------------------------------------


def _load_paste_artifacts(config: RunConfig, entry: MeshEntry) -> tuple[TextureSet, list[PlacementCandidate]]:
    tex_dir = config.texture_dir(entry.id)
    required = ["pasted.png", "dilated_paste.png", "lesion_ids.png", "dilated_ids.png", "placements.json"]
    if not all((tex_dir / name).is_file() for name in required):
        raise ConfigError(f"paste artifacts missing for mesh {entry.id}; run the paste stage first")
    base = _load_texture_set(entry)
    textures = TextureSet(
        texture=base.texture,
        nonskin_mask=base.nonskin_mask,
        pasted=load_image(tex_dir / "pasted.png"),
        lesion_ids=load_label_image(tex_dir / "lesion_ids.png").astype(np.int32),
        dilated_paste=load_image(tex_dir / "dilated_paste.png"),
        dilated_ids=load_label_image(tex_dir / "dilated_ids.png").astype(np.int32),
    )
    with open(tex_dir / "placements.json") as fh:
        log = json.load(fh)
    placements = [
        PlacementCandidate(
            lesion_id=row["lesion_id"],
            surface=FaceSample(
                face_index=row["face_index"],
                barycentric=np.asarray(row["barycentric"]),
                world_point=np.asarray(row["point"]),
                normal=np.asarray(row["normal"]),
            ),
            distance=row["distance"],
            depth_change=row["depth_change"],
        )
        for row in log["placements"]
    ]
    return textures, placements


def cmd_blend(config: RunConfig) -> dict[str, Path]:
    """Run the blending optimization per mesh; writes the blended texture
    and a per-step loss-curve CSV."""
    extractor = FilterPyramidExtractor()
    written: dict[str, Path] = {}
    for entry in config.meshes:
        mesh = load_mesh(entry.obj)
        textures, placements = _load_paste_artifacts(config, entry)
        textures.blended = textures.pasted.copy()
        rng = np.random.default_rng(derive_seed(config.seed, "blend", entry.id))
        rows: list[dict] = []

        def record(lesion_id, step, total, terms):
            rows.append({"lesion_id": lesion_id, "step": step, "total": total, **terms})

        blend_lesions(
            mesh,
            textures,
            placements,
            config.blend,
            extractor,
            rng,
            distance_range=config.placement.distance_range,
            fov=config.fov_degrees,
            on_step=record,
            checkpoint_dir=config.texture_dir(entry.id) if config.blend.checkpoint_every else None,
        )

        tex_dir = config.texture_dir(entry.id)
        tex_dir.mkdir(parents=True, exist_ok=True)
        save_image(tex_dir / "blended.png", textures.blended)
        with open(tex_dir / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["lesion_id", "step", "total", "content", "style", "gradient", "tv"])
            writer.writeheader()
            writer.writerows(rows)
        written[entry.id] = tex_dir
    return written


# -- render -----------------------------------------------------------------


def _list_backgrounds(directory: str | None) -> list[str]:
    if directory is None:
        return []
    paths = sorted(
        str(p) for p in Path(directory).iterdir() if p.suffix.lower() in BACKGROUND_SUFFIXES
    )
    return paths


def _render_one_mesh(config: RunConfig, mesh_index: int) -> list[dict]:
    entry = config.meshes[mesh_index]
    tex_dir = config.texture_dir(entry.id)
    if not (tex_dir / "blended.png").is_file():
        raise ConfigError(f"blend artifacts missing for mesh {entry.id}; run the blend stage first")
    mesh = load_mesh(entry.obj)
    textures, _ = _load_paste_artifacts(config, entry)
    textures.blended = load_image(tex_dir / "blended.png")
    anatomy = _load_anatomy(entry, mesh)
    ignore_texture = None
    if entry.real_lesion_boxes:
        with open(entry.real_lesion_boxes) as fh:
            ignore_texture = boxes_to_ignore_texture(json.load(fh), textures.texture.shape[:2])
    rng = np.random.default_rng(derive_seed(config.seed, "render", entry.id))
    records: list[dict] = []
    generate_views(
        mesh,
        textures,
        anatomy,
        _list_backgrounds(config.backgrounds),
        config.views_per_mesh,
        config.scene_ranges,
        rng,
        width=config.view_width,
        height=config.view_height,
        fov=config.fov_degrees,
        out_dir=config.output_dir,
        mesh_id=entry.id,
        start_index=mesh_index * config.views_per_mesh,
        ignore_texture=ignore_texture,
        manifest_records=records,
    )
    return records


def cmd_render(config: RunConfig, jobs: int = 1) -> Path:
    """Generate the annotated 2D dataset for every mesh and write the manifest."""
    indices = range(len(config.meshes))
    if jobs > 1 and len(config.meshes) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_mesh = list(pool.map(_render_one_mesh, [config] * len(config.meshes), indices))
    else:
        per_mesh = [_render_one_mesh(config, i) for i in indices]
    records = [record for batch in per_mesh for record in batch]
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def cmd_pipeline(config: RunConfig, jobs: int = 1) -> Path:
    """paste -> blend -> render with the same on-disk handoff as the
    individual commands."""
    cmd_paste(config)
    cmd_blend(config)
    return cmd_render(config, jobs=jobs)


# -- entry point --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skinsynth",
        description="Blend skin lesions into body-mesh textures and render annotated views.",
    )
    parser.add_argument("command", choices=["paste", "blend", "render", "pipeline"])
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--jobs", type=int, default=1, help="per-mesh parallelism (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.from_yaml(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.out is not None:
            config = dataclasses.replace(config, output_dir=args.out)
        if args.command == "paste":
            cmd_paste(config)
        elif args.command == "blend":
            cmd_blend(config)
        elif args.command == "render":
            cmd_render(config, jobs=args.jobs)
        else:
            cmd_pipeline(config, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlacementRunError as exc:
        print(f"placement failure: {exc}", file=sys.stderr)
        return EXIT_PLACEMENT
    except (BlendDivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
