"""Fixed-size local patches and their centroid-centered, radius-normalized frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, batch_knn


@dataclass
class Patch:
    """A cluster of exactly n cloud points around a seed location.

    `local_points` is the (n, 6) matrix of positions and normals in the local
    frame: positions shifted by `centroid` and divided by `scale` (the patch
    radius), normals untouched. Populated by `to_local_frame`.
    """

    indices: np.ndarray
    centroid: np.ndarray
    local_points: np.ndarray | None = None
    scale: float | None = None

    @property
    def size(self) -> int:
        return len(self.indices)

    def to_parent(self, local_position: np.ndarray) -> np.ndarray:
        """Map a local-frame position back to the parent-cloud frame."""
        if self.local_points is None or self.scale is None:
            raise ValueError("patch has no local frame")
        return np.asarray(local_position) * self.scale + self.centroid


def extract_patches(cloud: PointCloud, n: int, num_patches: int = 1, seed: int = 0,
                    seeds=None) -> list[Patch]:
    """Patches of the n nearest cloud points around each seed location.

    Seeds are either `num_patches` randomly drawn cloud points (deterministic
    in `seed`) or the explicit coordinates in `seeds`.
    """
    if len(cloud) < n:
        raise ValueError(f"cloud has {len(cloud)} points, patch size is {n}")
    if n < 1:
        raise ValueError("patch size must be >= 1")
    if seeds is None:
        if num_patches < 1:
            raise ValueError("num_patches must be >= 1")
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(cloud), size=num_patches, replace=num_patches > len(cloud))
        seed_coords = cloud.positions[chosen]
    else:
        seed_coords = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    idx, _ = batch_knn(cloud.positions, seed_coords, n)
    patches = []
    for row in idx:
        members = cloud.positions[row]
        patches.append(Patch(indices=row.copy(), centroid=members.mean(axis=0)))
    return patches


def to_local_frame(cloud: PointCloud, patch: Patch) -> Patch:
    """Fill a patch's local frame: zero-mean positions scaled by patch radius."""
    if not cloud.has_normals:
        raise ValueError("local frame requires normals on the cloud")
    positions = cloud.positions[patch.indices]
    centroid = positions.mean(axis=0)
    delta = positions - centroid
    scale = float(np.linalg.norm(delta, axis=1).max())
    if scale < 1e-12:
        raise ValueError("degenerate patch: all points coincide")
    local = np.hstack([delta / scale, cloud.normals[patch.indices]])
    return Patch(indices=patch.indices.copy(), centroid=centroid,
                 local_points=local, scale=scale)


def extract_patches_multiscale(cloud: PointCloud, n: int, num_patches: int,
                               seed: int = 0) -> list[Patch]:
    """Patches drawn at sizes {n/2, n, 2n}, resampled to exactly n points.

    Oversized draws are randomly subsampled, undersized ones padded with
    random duplicates, so every patch keeps the fixed cardinality the graph
    model expects while covering three neighborhood scales.
    """
    if len(cloud) < n:
        raise ValueError(f"cloud has {len(cloud)} points, patch size is {n}")
    rng = np.random.default_rng(seed)
    sizes = [max(3, n // 2), n, min(2 * n, len(cloud))]
    chosen = rng.choice(len(cloud), size=num_patches, replace=num_patches > len(cloud))
    patches = []
    for i, seed_idx in enumerate(chosen):
        m = sizes[i % len(sizes)]
        row, _ = batch_knn(cloud.positions, cloud.positions[seed_idx][None, :], m)
        members = row[0]
        if m > n:
            members = members[np.sort(rng.choice(m, size=n, replace=False))]
        elif m < n:
            extra = rng.choice(m, size=n - m, replace=True)
            members = np.concatenate([members, members[extra]])
        pts = cloud.positions[members]
        patches.append(Patch(indices=members, centroid=pts.mean(axis=0)))
    return patches
