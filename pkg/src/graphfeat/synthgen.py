"""Synthetic geometry: random primitive corners with labeled keypoints and
scores, composed multi-corner objects, and the on-disk training datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import PatchGraph, ValueLabels, build_graph, label_values
from .patching import Patch, extract_patches, to_local_frame
from .pointcloud import (PointCloud, RigidPose, average_resolution, batch_knn,
                         load_cloud, save_cloud, transform)

MANIFEST_MAGIC = "graphfeat-dataset"
CORNER_KIND = "corners"
POSE_KIND = "pose_pairs"


class DatasetError(ValueError):
    """A dataset directory is malformed or of the wrong kind."""


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# corner geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CornerFace:
    """Planar wedge between two apex edges, with an out-of-plane bulge term."""

    edge_a: np.ndarray
    edge_b: np.ndarray
    curvature: float

    def apex_angle(self) -> float:
        cosine = float(np.clip(self.edge_a @ self.edge_b, -1.0, 1.0))
        return float(np.arccos(cosine))


@dataclass
class PrimitiveCorner:
    """A corner where 3-10 faces meet at an apex.

    `axis` points from the apex into the shape; `extent` is the slant length
    of each face; `height` is the mean drop of the edges along the axis.
    """

    apex: np.ndarray
    faces: list[CornerFace]
    axis: np.ndarray
    extent: float
    height: float
    taper: float

    def __post_init__(self):
        if not 3 <= len(self.faces) <= 10:
            raise ValueError(f"corner must have 3-10 faces, got {len(self.faces)}")

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def angular_defect(self) -> float:
        return float(2.0 * np.pi - sum(f.apex_angle() for f in self.faces))


@dataclass
class CornerConfig:
    taper_range: tuple[float, float] = (0.15, 0.9)
    extent_range: tuple[float, float] = (0.12, 0.3)
    curvature_max: float = 1.5
    apex_jitter: float = 0.05
    beta_jitter: float = 0.1


@dataclass
class ScoreConfig:
    defect_max: float = float(np.pi)
    height_ref: float = 0.1


def _face_normal(face: CornerFace, axis: np.ndarray) -> np.ndarray:
    normal = np.cross(face.edge_a, face.edge_b)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        raise ValueError("degenerate face: parallel edges")
    normal = normal / norm
    if normal @ axis > 0:  # outward side is opposite the shape interior
        normal = -normal
    return normal


def corner_from_edges(edges: np.ndarray, axis, extent: float = 0.2,
                      apex=(0.0, 0.0, 0.0), curvatures=None,
                      taper: float | None = None) -> PrimitiveCorner:
    """Build a corner directly from cyclically ordered unit edge directions."""
    edges = np.asarray(edges, dtype=np.float64)
    edges = edges / np.linalg.norm(edges, axis=1, keepdims=True)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    count = len(edges)
    if curvatures is None:
        curvatures = np.zeros(count)
    faces = [CornerFace(edges[i], edges[(i + 1) % count], float(curvatures[i]))
             for i in range(count)]
    alignment = float(np.clip(np.mean(edges @ axis), 0.0, 1.0))
    if taper is None:
        taper = 1.0 - np.degrees(np.arccos(alignment)) / 90.0
    return PrimitiveCorner(apex=np.asarray(apex, dtype=np.float64), faces=faces,
                           axis=axis, extent=float(extent),
                           height=float(extent * alignment), taper=float(taper))


def generate_corner(seed: int, config: CornerConfig | None = None) -> PrimitiveCorner:
    """Random corner: 3-10 faces, jittered edge cone angles, random orientation."""
    config = config or CornerConfig()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(3, 11))
    taper = float(rng.uniform(*config.taper_range))
    beta = (np.pi / 2.0) * (1.0 - taper) + rng.uniform(-config.beta_jitter,
                                                       config.beta_jitter, count)
    beta = np.clip(beta, 0.05, np.pi / 2.0 - 0.02)
    azimuth = 2.0 * np.pi * (np.arange(count) + rng.uniform(-0.3, 0.3, count)) / count
    frame = RigidPose.random(rng, max_translation=0.0).rotation
    axis = frame @ np.array([0.0, 0.0, -1.0])
    e1, e2 = frame @ np.array([1.0, 0.0, 0.0]), frame @ np.array([0.0, 1.0, 0.0])
    edges = (np.cos(beta)[:, None] * axis
             + np.sin(beta)[:, None] * (np.cos(azimuth)[:, None] * e1
                                        + np.sin(azimuth)[:, None] * e2))
    extent = float(rng.uniform(*config.extent_range))
    curvatures = rng.uniform(0.0, config.curvature_max, count)
    apex = rng.uniform(-config.apex_jitter, config.apex_jitter, 3)
    return corner_from_edges(edges, axis=axis, extent=extent, apex=apex,
                             curvatures=curvatures, taper=taper)


def score_label(corner: PrimitiveCorner, config: ScoreConfig | None = None) -> float:
    """Saliency score in [0, 1]: angular defect scaled and height-attenuated.

    A flat corner (defect 0 or zero height) scores 0; a tall needle spike
    saturates at 1.
    """
    config = config or ScoreConfig()
    sharpness = np.clip(corner.angular_defect() / config.defect_max, 0.0, 1.0)
    attenuation = min(1.0, corner.height / config.height_ref)
    return float(sharpness * attenuation)


def _face_area(face: CornerFace, extent: float) -> float:
    return 0.5 * extent * extent * float(np.linalg.norm(np.cross(face.edge_a, face.edge_b)))


def _sample_face(rng: np.random.Generator, corner: PrimitiveCorner, face: CornerFace,
                 count: int) -> tuple[np.ndarray, np.ndarray]:
    normal = _face_normal(face, corner.axis)
    r1 = rng.random(count)
    r2 = rng.random(count)
    s = np.sqrt(r1)
    a = corner.extent * s * (1.0 - r2)
    b = corner.extent * s * r2
    base = corner.apex + np.outer(a, face.edge_a) + np.outer(b, face.edge_b)
    positions = base + np.outer(face.curvature * a * b, normal)
    tan_a = face.edge_a + np.outer(face.curvature * b, normal)
    tan_b = face.edge_b + np.outer(face.curvature * a, normal)
    normals = np.cross(tan_a, tan_b)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = normals @ normal < 0
    normals[flip] = -normals[flip]
    return positions, normals


def sample_view(corner: PrimitiveCorner, density: float, seed: int,
                view_direction=None) -> PointCloud:
    """Sample the faces visible from a random upper-hemisphere direction.

    Per-face counts are Poisson in (density x face area); normals are the
    analytic surface normals. Deterministic in `seed`.
    """
    if density <= 0:
        raise ValueError("density must be > 0")
    rng = np.random.default_rng(seed)
    up = -corner.axis
    for _ in range(10):
        if view_direction is not None:
            vdir = np.asarray(view_direction, dtype=np.float64)
            vdir = vdir / np.linalg.norm(vdir)
        else:
            raw = rng.normal(size=3)
            raw /= np.linalg.norm(raw)
            if raw @ up < 0:
                raw = -raw
            vdir = raw + 0.05 * up  # keep away from grazing directions
            vdir /= np.linalg.norm(vdir)
        chunks = []
        normal_chunks = []
        for face in corner.faces:
            if _face_normal(face, corner.axis) @ vdir <= 1e-9:
                continue
            count = int(rng.poisson(density * _face_area(face, corner.extent)))
            if count == 0:
                continue
            pos, nrm = _sample_face(rng, corner, face, count)
            chunks.append(pos)
            normal_chunks.append(nrm)
        if chunks:
            return PointCloud(np.vstack(chunks), np.vstack(normal_chunks))
    raise ValueError("no visible surface after 10 viewpoint attempts")


# ---------------------------------------------------------------------------
# labeled corner-pair dataset
# ---------------------------------------------------------------------------

@dataclass
class CornerDatasetConfig:
    patch_size: int = 81
    view_points_target: int = 260
    graph_radius: float | None = None
    radius_multiplier: float = 2.5
    seed_offset_fraction: float = 0.15
    corner: CornerConfig = field(default_factory=CornerConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)


@dataclass
class LabeledPatchView:
    """One view's sampled patch, its graph, and supervision labels."""

    cloud: PointCloud
    patch: Patch
    graph: PatchGraph
    labels: ValueLabels


@dataclass
class LabeledPatchPair:
    view_a: LabeledPatchView
    view_b: LabeledPatchView
    score: float
    corner_world: np.ndarray
    instance_id: int
    negative_id: int


def _view_seeds(master_seed: int, instance: int) -> np.ndarray:
    return np.random.SeedSequence((master_seed, instance)).generate_state(8)


def _sample_view_with_target(corner: PrimitiveCorner, target: int, seed: int,
                             minimum: int) -> PointCloud:
    total_area = sum(_face_area(f, corner.extent) for f in corner.faces)
    density = target / max(total_area, 1e-9)
    for boost in range(5):
        cloud = sample_view(corner, density * (2.0 ** boost), int(seed) + boost)
        if len(cloud) >= minimum:
            return cloud
    raise ValueError(f"could not sample {minimum} visible points")


def _build_view(corner: PrimitiveCorner, cloud: PointCloud, offset_rng: np.random.Generator,
                config: CornerDatasetConfig) -> LabeledPatchView:
    offset = offset_rng.uniform(-1.0, 1.0, 3) * config.seed_offset_fraction * corner.extent
    patch = extract_patches(cloud, config.patch_size, seeds=[corner.apex + offset])[0]
    patch = to_local_frame(cloud, patch)
    graph = build_graph(patch, radius=config.graph_radius,
                        radius_multiplier=config.radius_multiplier)
    to_apex = np.linalg.norm(cloud.positions[patch.indices] - corner.apex, axis=1)
    keypoint = int(np.argmin(to_apex))
    labels = label_values(graph, keypoint)
    return LabeledPatchView(cloud=cloud, patch=patch, graph=graph, labels=labels)


def make_labeled_pair(master_seed: int, instance: int,
                      config: CornerDatasetConfig) -> tuple[PrimitiveCorner, LabeledPatchView, LabeledPatchView, float]:
    seeds = _view_seeds(master_seed, instance)
    corner = generate_corner(int(seeds[0]), config.corner)
    minimum = config.patch_size + 5
    cloud_a = _sample_view_with_target(corner, config.view_points_target, seeds[1], minimum)
    cloud_b = _sample_view_with_target(corner, config.view_points_target, seeds[2], minimum)
    view_a = _build_view(corner, cloud_a, np.random.default_rng(int(seeds[3])), config)
    view_b = _build_view(corner, cloud_b, np.random.default_rng(int(seeds[4])), config)
    return corner, view_a, view_b, score_label(corner, config.score)


def _write_labels(path: Path, view: LabeledPatchView, score: float,
                  corner_world: np.ndarray) -> None:
    lines = [f"keypoint_index {view.labels.keypoint_index}",
             f"score {_fmt(score)}",
             "corner_world " + " ".join(_fmt(v) for v in corner_world),
             f"radius_used {_fmt(view.graph.radius_used)}",
             f"values {len(view.labels.values)}"]
    lines.extend(_fmt(v) for v in view.labels.values)
    path.write_text("\n".join(lines) + "\n")


def _patch_cloud(view: LabeledPatchView) -> PointCloud:
    idx = view.patch.indices
    return PointCloud(view.cloud.positions[idx], view.cloud.normals[idx])


def build_corner_dataset(count: int, out_dir, seed: int,
                         config: CornerDatasetConfig | None = None) -> Path:
    """Write `count` labeled patch pairs plus triplet negatives; returns the manifest path.

    Layout: manifest.txt and inst_%06d/{view_a.xyz, view_b.xyz, labels_a.txt,
    labels_b.txt, meta.txt}. Byte-identical for a fixed seed.
    """
    if count < 2:
        raise ValueError("need at least 2 instances to form triplets")
    config = config or CornerDatasetConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    neg_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    manifest = [f"{MANIFEST_MAGIC} {CORNER_KIND} 1",
                f"count {count}",
                f"patch_size {config.patch_size}",
                f"seed {seed}"]
    for i in range(count):
        corner, view_a, view_b, score = make_labeled_pair(seed, i, config)
        negative = int((i + 1 + neg_rng.integers(0, count - 1)) % count)
        inst = out / f"inst_{i:06d}"
        inst.mkdir(exist_ok=True)
        save_cloud(_patch_cloud(view_a), inst / "view_a.xyz")
        save_cloud(_patch_cloud(view_b), inst / "view_b.xyz")
        _write_labels(inst / "labels_a.txt", view_a, score, corner.apex)
        _write_labels(inst / "labels_b.txt", view_b, score, corner.apex)
        meta = [f"instance {i}",
                f"negative {negative}",
                f"num_faces {corner.num_faces}",
                f"taper {_fmt(corner.taper)}",
                f"extent {_fmt(corner.extent)}",
                f"height {_fmt(corner.height)}",
                "apex " + " ".join(_fmt(v) for v in corner.apex)]
        (inst / "meta.txt").write_text("\n".join(meta) + "\n")
        manifest.append(f"inst_{i:06d} negative inst_{negative:06d}")
    manifest_path = out / "manifest.txt"
    manifest_path.write_text("\n".join(manifest) + "\n")
    return manifest_path


def _read_labels(path: Path) -> tuple[int, float, np.ndarray, float, np.ndarray]:
    lines = path.read_text().splitlines()
    header = {}
    values_start = None
    for i, line in enumerate(lines):
        key, _, rest = line.partition(" ")
        if key == "values":
            values_start = i + 1
            break
        header[key] = rest
    if values_start is None:
        raise DatasetError(f"{path}: missing values block")
    values = np.array([float(v) for v in lines[values_start:] if v.strip()])
    return (int(header["keypoint_index"]), float(header["score"]),
            np.array([float(v) for v in header["corner_world"].split()]),
            float(header["radius_used"]), values)


def _load_view(inst_dir: Path, suffix: str) -> tuple[LabeledPatchView, float, np.ndarray]:
    cloud = load_cloud(inst_dir / f"view_{suffix}.xyz")
    keypoint, score, corner_world, radius, values = _read_labels(
        inst_dir / f"labels_{suffix}.txt")
    patch = Patch(indices=np.arange(len(cloud)), centroid=cloud.positions.mean(axis=0))
    patch = to_local_frame(cloud, patch)
    graph = build_graph(patch, radius=radius)
    labels = ValueLabels(values=values, keypoint_index=keypoint)
    view = LabeledPatchView(cloud=cloud, patch=patch, graph=graph, labels=labels)
    return view, score, corner_world


def read_manifest(dataset_dir) -> tuple[str, list[str]]:
    """Return (kind, entry lines) of a dataset directory's manifest."""
    path = Path(dataset_dir) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != MANIFEST_MAGIC:
        raise DatasetError(f"{path}: not a dataset manifest")
    return head[1], lines[1:]


def load_corner_dataset(dataset_dir) -> list[LabeledPatchPair]:
    """Load every labeled pair (graphs rebuilt at the recorded radius)."""
    kind, lines = read_manifest(dataset_dir)
    if kind != CORNER_KIND:
        raise DatasetError(f"{dataset_dir}: expected a '{CORNER_KIND}' dataset, got '{kind}'")
    root = Path(dataset_dir)
    pairs = []
    for line in lines:
        parts = line.split()
        if len(parts) == 3 and parts[1] == "negative":
            inst_name, neg_name = parts[0], parts[2]
            inst_dir = root / inst_name
            view_a, score, corner_world = _load_view(inst_dir, "a")
            view_b, _, _ = _load_view(inst_dir, "b")
            pairs.append(LabeledPatchPair(
                view_a=view_a, view_b=view_b, score=score, corner_world=corner_world,
                instance_id=int(inst_name.split("_")[1]),
                negative_id=int(neg_name.split("_")[1])))
    if not pairs:
        raise DatasetError(f"{dataset_dir}: empty dataset")
    return pairs


# ---------------------------------------------------------------------------
# composed objects and the pose-pair dataset
# ---------------------------------------------------------------------------

@dataclass
class PoseDatasetConfig:
    parts_range: tuple[int, int] = (2, 4)
    points_range: tuple[int, int] = (300, 1000)
    part_offset: float = 0.25
    max_rotation_deg: float = 45.0
    max_translation: float = 0.5
    corner: CornerConfig = field(default_factory=lambda: CornerConfig(
        extent_range=(0.15, 0.35), apex_jitter=0.0))


@dataclass
class PosePair:
    cloud_p: PointCloud
    cloud_q: PointCloud
    pose: RigidPose
    corr_p: np.ndarray
    corr_q: np.ndarray


def compose_object(seed: int, config: PoseDatasetConfig | None = None) -> list[PrimitiveCorner]:
    """A compound shape: several random corners at spread-out apex offsets."""
    config = config or PoseDatasetConfig()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.parts_range[0], config.parts_range[1] + 1))
    parts = []
    for _ in range(count):
        part = generate_corner(int(rng.integers(0, 2 ** 31)), config.corner)
        part.apex = part.apex + rng.uniform(-config.part_offset, config.part_offset, 3)
        parts.append(part)
    return parts


def sample_object(parts: list[PrimitiveCorner], total_points: int, seed: int) -> PointCloud:
    """Sample all faces of a composed object, proportionally to face area."""
    rng = np.random.default_rng(seed)
    faces = [(corner, face) for corner in parts for face in corner.faces]
    areas = np.array([_face_area(face, corner.extent) for corner, face in faces])
    weights = areas / areas.sum()
    counts = rng.multinomial(total_points, weights)
    chunks, normal_chunks = [], []
    for (corner, face), count in zip(faces, counts):
        if count == 0:
            continue
        pos, nrm = _sample_face(rng, corner, face, int(count))
        chunks.append(pos)
        normal_chunks.append(nrm)
    return PointCloud(np.vstack(chunks), np.vstack(normal_chunks))


def save_pose(pose: RigidPose, path) -> None:
    lines = ["rotation"]
    lines += [" ".join(_fmt(v) for v in row) for row in pose.rotation]
    lines.append("translation")
    lines.append(" ".join(_fmt(v) for v in pose.translation))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose(path) -> RigidPose:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        r_at = lines.index("rotation")
        t_at = lines.index("translation")
        rotation = np.array([[float(v) for v in lines[r_at + 1 + i].split()]
                             for i in range(3)])
        translation = np.array([float(v) for v in lines[t_at + 1].split()])
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed pose file ({exc})") from None
    return RigidPose(rotation, translation)


def _ground_truth_correspondences(cloud_p: PointCloud, cloud_q: PointCloud,
                                  pose: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    moved = pose.apply(cloud_p.positions)
    fwd_idx, fwd_dist = batch_knn(cloud_q.positions, moved, 1)
    back_idx, _ = batch_knn(moved, cloud_q.positions, 1)
    threshold = 1.0 * average_resolution(cloud_p)
    i = np.arange(len(cloud_p))
    mutual = (back_idx[fwd_idx[:, 0], 0] == i) & (fwd_dist[:, 0] < threshold)
    return i[mutual], fwd_idx[mutual, 0]


def random_protocol_pose(rng: np.random.Generator, config: PoseDatasetConfig) -> RigidPose:
    """Benchmark-style pose: per-axis Euler angles up to the configured limit."""
    angles = rng.uniform(0.0, config.max_rotation_deg, 3) * rng.choice([-1.0, 1.0], 3)
    translation = rng.uniform(-config.max_translation, config.max_translation, 3)
    return RigidPose.from_euler_zyx(*angles, translation=translation)


def make_pose_pair(master_seed: int, index: int,
                   config: PoseDatasetConfig | None = None) -> PosePair:
    config = config or PoseDatasetConfig()
    seeds = _view_seeds(master_seed, index)
    parts = compose_object(int(seeds[0]), config)
    rng = np.random.default_rng(int(seeds[1]))
    total = int(rng.integers(config.points_range[0], config.points_range[1] + 1))
    cloud_p = sample_object(parts, total, int(seeds[2]))
    cloud_q0 = sample_object(parts, total, int(seeds[3]))
    pose = random_protocol_pose(np.random.default_rng(int(seeds[4])), config)
    cloud_q = transform(cloud_q0, pose)
    corr_p, corr_q = _ground_truth_correspondences(cloud_p, cloud_q, pose)
    return PosePair(cloud_p=cloud_p, cloud_q=cloud_q, pose=pose,
                    corr_p=corr_p, corr_q=corr_q)


def build_pose_dataset(count: int, out_dir, seed: int,
                       config: PoseDatasetConfig | None = None) -> Path:
    """Write pose-annotated registration pairs; returns the manifest path."""
    if count < 1:
        raise ValueError("count must be >= 1")
    config = config or PoseDatasetConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = [f"{MANIFEST_MAGIC} {POSE_KIND} 1", f"count {count}", f"seed {seed}"]
    for i in range(count):
        pair = make_pose_pair(seed, i, config)
        pair_dir = out / f"pair_{i:06d}"
        pair_dir.mkdir(exist_ok=True)
        save_cloud(pair.cloud_p, pair_dir / "cloud_p.xyz")
        save_cloud(pair.cloud_q, pair_dir / "cloud_q.xyz")
        save_pose(pair.pose, pair_dir / "pose.txt")
        corr = "\n".join(f"{p} {q}" for p, q in zip(pair.corr_p, pair.corr_q))
        (pair_dir / "corr.txt").write_text(corr + "\n")
        manifest.append(f"pair_{i:06d}")
    manifest_path = out / "manifest.txt"
    manifest_path.write_text("\n".join(manifest) + "\n")
    return manifest_path


def load_pose_dataset(dataset_dir) -> list[PosePair]:
    kind, lines = read_manifest(dataset_dir)
    if kind != POSE_KIND:
        raise DatasetError(f"{dataset_dir}: expected a '{POSE_KIND}' dataset, got '{kind}'")
    root = Path(dataset_dir)
    pairs = []
    for line in lines:
        name = line.strip()
        if not name.startswith("pair_"):
            continue
        pair_dir = root / name
        corr_lines = (pair_dir / "corr.txt").read_text().split()
        corr = np.array([int(v) for v in corr_lines], dtype=np.int64).reshape(-1, 2)
        pairs.append(PosePair(
            cloud_p=load_cloud(pair_dir / "cloud_p.xyz"),
            cloud_q=load_cloud(pair_dir / "cloud_q.xyz"),
            pose=load_pose(pair_dir / "pose.txt"),
            corr_p=corr[:, 0], corr_q=corr[:, 1]))
    if not pairs:
        raise DatasetError(f"{dataset_dir}: empty dataset")
    return pairs
