"""Point-cloud container, ASCII file I/O, kd-tree search, and rigid-geometry ops."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNIT_NORM_TOL = 1e-6
_RENORM_SKIP_TOL = 1e-9  # rows already unit to this tolerance keep their bits


class CloudFormatError(ValueError):
    """A cloud file could not be parsed."""


def _as_vec3(value, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def _normalize_rows(rows: np.ndarray, context: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ValueError(f"{context}: zero-length normal at row {bad}")
    out = rows.copy()
    off = np.abs(norms - 1.0) > _RENORM_SKIP_TOL
    out[off] = rows[off] / norms[off, None]
    return out


@dataclass
class PointCloud:
    """Unordered 3-d points kept in array order, with optional unit normals.

    Immutable by convention after construction; geometric ops return new clouds.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    _resolution: float | None = field(default=None, init=False, repr=False, compare=False)
    _tree: "KdTree | None" = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.positions, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"positions must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("positions contain non-finite values")
        self.positions = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} != positions shape {pts.shape}")
            if not np.all(np.isfinite(nrm)):
                raise ValueError("normals contain non-finite values")
            self.normals = _normalize_rows(nrm, "normals")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def kdtree(self) -> "KdTree":
        if self._tree is None:
            self._tree = KdTree(self.positions)
        return self._tree

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.positions.copy(),
            None if self.normals is None else self.normals.copy(),
        )


@dataclass(frozen=True)
class RigidPose:
    """Proper rigid transform x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation, "translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 1.0) -> "RigidPose":
        # Uniform rotation via normalized quaternion.
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        t = rng.uniform(-max_translation, max_translation, size=3)
        return cls(r, t)

    @classmethod
    def from_euler_zyx(cls, z_deg: float, y_deg: float, x_deg: float,
                       translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        """Intrinsic z-y-x rotation (R = Rz @ Ry @ Rx), angles in degrees."""
        cz, sz = np.cos(np.radians(z_deg)), np.sin(np.radians(z_deg))
        cy, sy = np.cos(np.radians(y_deg)), np.sin(np.radians(y_deg))
        cx, sx = np.cos(np.radians(x_deg)), np.sin(np.radians(x_deg))
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        return cls(rz @ ry @ rx, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return np.asarray(normals, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: x -> self(other(x))."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)


class KdTree:
    """Static kd-tree over (n, 3) points with median splits.

    k-NN results are ordered by (distance, index) so ties resolve to the
    lowest point index, matching the brute-force oracle exactly.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("KdTree expects (n, 3) points")
        if len(pts) == 0:
            raise ValueError("KdTree expects a non-empty point set")
        self._points = pts
        n = len(pts)
        self._left = np.full(n, -1, dtype=np.int64)
        self._right = np.full(n, -1, dtype=np.int64)
        self._axis = np.zeros(n, dtype=np.int8)
        self._root = self._build(np.arange(n), 0)

    def _build(self, indices: np.ndarray, depth: int) -> int:
        if len(indices) == 0:
            return -1
        axis = depth % 3
        if len(indices) == 1:
            node = int(indices[0])
            self._axis[node] = axis
            return node
        mid = len(indices) // 2
        order = np.argpartition(self._points[indices, axis], mid)
        indices = indices[order]
        node = int(indices[mid])
        self._axis[node] = axis
        self._left[node] = self._build(indices[:mid], depth + 1)
        self._right[node] = self._build(indices[mid + 1:], depth + 1)
        return node

    def query(self, point, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (indices, distances) of the k nearest points, ascending."""
        q = _as_vec3(point, "query")
        n = len(self._points)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        pts = self._points
        # Max-heap of the current best k as (-d2, -index); heap[0] is the worst.
        heap: list[tuple[float, int]] = []

        def visit(node: int) -> None:
            while node >= 0:
                axis = self._axis[node]
                delta = q[axis] - pts[node, axis]
                diff = q - pts[node]
                d2 = float(diff @ diff)
                cand = (-d2, -node)
                if len(heap) < k:
                    heapq.heappush(heap, cand)
                elif cand > heap[0]:
                    heapq.heapreplace(heap, cand)
                near, far = (self._left[node], self._right[node]) if delta < 0 else \
                            (self._right[node], self._left[node])
                if far >= 0 and (len(heap) < k or delta * delta <= -heap[0][0]):
                    visit(far)
                node = near

        visit(self._root)
        items = sorted((-d2, -neg_i) for d2, neg_i in heap)
        idx = np.array([i for _, i in items], dtype=np.int64)
        dist = np.sqrt(np.array([d2 for d2, _ in items], dtype=np.float64))
        return idx, dist

    def query_radius(self, point, radius: float) -> np.ndarray:
        """Indices of points with distance <= radius, ascending by index."""
        q = _as_vec3(point, "query")
        if radius < 0:
            raise ValueError("radius must be >= 0")
        pts = self._points
        r2 = radius * radius
        out: list[int] = []

        def visit(node: int) -> None:
            while node >= 0:
                axis = self._axis[node]
                delta = q[axis] - pts[node, axis]
                diff = q - pts[node]
                if float(diff @ diff) <= r2:
                    out.append(node)
                near, far = (self._left[node], self._right[node]) if delta < 0 else \
                            (self._right[node], self._left[node])
                if far >= 0 and delta * delta <= r2:
                    visit(far)
                node = near

        visit(self._root)
        return np.sort(np.array(out, dtype=np.int64))


def knn(cloud: PointCloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest cloud points to `query`, ascending by distance.

    Ties resolve to the lower index. Raises if k exceeds the point count.
    """
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds cloud size {len(cloud)}")
    idx, _ = cloud.kdtree.query(query, k)
    return idx


def batch_knn(points: np.ndarray, queries: np.ndarray, k: int,
              chunk_bytes: int = 32 << 20) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized brute-force k-NN: (indices, distances), each (n_q, k).

    Same (distance, index) ordering as KdTree.query; intended for the
    many-queries-small-target paths (ICP, warping, patch seeding).
    """
    pts = np.asarray(points, dtype=np.float64)
    qs = np.asarray(queries, dtype=np.float64)
    if k > len(pts):
        raise ValueError(f"k={k} exceeds point count {len(pts)}")
    rows = max(1, int(chunk_bytes // max(1, pts.shape[0] * 8)))
    idx_out = np.empty((len(qs), k), dtype=np.int64)
    d_out = np.empty((len(qs), k), dtype=np.float64)
    for start in range(0, len(qs), rows):
        chunk = qs[start:start + rows]
        d2 = np.sum((chunk[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        # Stable argsort keeps equal distances in ascending index order.
        sel = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx_out[start:start + rows] = sel
        d_out[start:start + rows] = np.sqrt(np.take_along_axis(d2, sel, axis=1))
    return idx_out, d_out


def nearest_indices(points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest point index and distance in `points` for every query row."""
    idx, dist = batch_knn(points, queries, 1)
    return idx[:, 0], dist[:, 0]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_rows(lines: list[tuple[int, str]], path: Path) -> PointCloud:
    width = None
    pos: list[list[float]] = []
    nrm: list[list[float]] = []
    for lineno, text in lines:
        fields = text.split()
        if width is None:
            if len(fields) not in (3, 6):
                raise CloudFormatError(
                    f"{path}:{lineno}: expected 3 or 6 columns, got {len(fields)}")
            width = len(fields)
        if len(fields) != width:
            raise CloudFormatError(
                f"{path}:{lineno}: inconsistent column count ({len(fields)} != {width})")
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(values)):
            raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
        pos.append(values[:3])
        if width == 6:
            nrm.append(values[3:])
    if not pos:
        raise CloudFormatError(f"{path}: no points")
    normals = np.array(nrm) if nrm else None
    if normals is not None:
        try:
            normals = _normalize_rows(normals, str(path))
        except ValueError as exc:
            raise CloudFormatError(str(exc)) from None
    return PointCloud(np.array(pos), normals)


def _load_xyz(path: Path) -> PointCloud:
    lines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    return _parse_rows(lines, path)


def _load_ply(path: Path) -> PointCloud:
    raw_lines = path.read_text().splitlines()
    if not raw_lines or raw_lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}:1: not a PLY file (missing 'ply' magic)")
    vertex_count = None
    properties: list[str] = []
    in_vertex_element = False
    body_start = None
    for i, raw in enumerate(raw_lines[1:], start=2):
        parts = raw.strip().split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise CloudFormatError(f"{path}:{i}: only ASCII PLY is supported")
        elif key == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(parts[2])
                except (IndexError, ValueError):
                    raise CloudFormatError(f"{path}:{i}: bad vertex element") from None
        elif key == "property" and in_vertex_element:
            properties.append(parts[-1])
        elif key == "end_header":
            body_start = i
            break
    if body_start is None:
        raise CloudFormatError(f"{path}: missing end_header")
    if vertex_count is None:
        raise CloudFormatError(f"{path}: missing vertex element")
    if vertex_count == 0:
        raise CloudFormatError(f"{path}: no points")
    try:
        cols = {name: properties.index(name) for name in ("x", "y", "z")}
    except ValueError:
        raise CloudFormatError(f"{path}: vertex element lacks x/y/z properties") from None
    has_normals = all(n in properties for n in ("nx", "ny", "nz"))
    if has_normals:
        cols.update({name: properties.index(name) for name in ("nx", "ny", "nz")})

    body = raw_lines[body_start:]
    if len(body) < vertex_count:
        raise CloudFormatError(f"{path}: truncated vertex data")
    names = ("x", "y", "z", "nx", "ny", "nz") if has_normals else ("x", "y", "z")
    rows = []
    for j in range(vertex_count):
        lineno = body_start + 1 + j
        fields = body[j].split()
        if len(fields) < len(properties):
            raise CloudFormatError(f"{path}:{lineno}: expected {len(properties)} values")
        try:
            picked = [float(fields[cols[n]]) for n in names]
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(picked)):
            raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
        rows.append((lineno, " ".join(_fmt(v) for v in picked)))
    return _parse_rows(rows, path)


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Load a point cloud from an ASCII `.xyz` or `.ply` file.

    fmt: "xyz" or "ply"; inferred from the suffix when omitted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt in ("xyz", "txt"):
        return _load_xyz(path)
    if fmt in ("ply", "ply-ascii"):
        return _load_ply(path)
    raise CloudFormatError(f"unsupported cloud format: {fmt!r}")


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    """Write a cloud as ASCII `.xyz` or `.ply`; values round-trip exactly."""
    if len(cloud) == 0:
        raise ValueError("refusing to save an empty cloud")
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    rows = cloud.positions if cloud.normals is None else \
        np.hstack([cloud.positions, cloud.normals])
    if fmt in ("xyz", "txt"):
        body = "\n".join(" ".join(_fmt(v) for v in row) for row in rows)
        path.write_text(body + "\n")
        return
    if fmt in ("ply", "ply-ascii"):
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += [f"property double {p}" for p in props]
        header.append("end_header")
        body = "\n".join(" ".join(_fmt(v) for v in row) for row in rows)
        path.write_text("\n".join(header) + "\n" + body + "\n")
        return
    raise CloudFormatError(f"unsupported cloud format: {fmt!r}")


# ---------------------------------------------------------------------------
# geometric operations
# ---------------------------------------------------------------------------

def transform(cloud: PointCloud, pose: RigidPose) -> PointCloud:
    """Apply a rigid pose: positions -> R p + t, normals -> R n."""
    out = PointCloud(
        pose.apply(cloud.positions),
        None if cloud.normals is None else pose.apply_normals(cloud.normals),
    )
    out._resolution = cloud._resolution  # rigid motion preserves spacing
    return out


def average_resolution(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest other point; cached."""
    if cloud._resolution is not None:
        return cloud._resolution
    n = len(cloud)
    if n < 2:
        raise ValueError("average_resolution needs at least 2 points")
    if n <= 2048:
        idx, dist = batch_knn(cloud.positions, cloud.positions, 2)
        nearest = np.where(idx[:, 0] == np.arange(n), dist[:, 1], dist[:, 0])
    else:
        tree = cloud.kdtree
        nearest = np.empty(n)
        for i in range(n):
            ids, ds = tree.query(cloud.positions[i], 2)
            nearest[i] = ds[1] if ids[0] == i else ds[0]
    res = float(nearest.mean())
    cloud._resolution = res
    return res


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Add i.i.d. zero-mean Gaussian noise per coordinate; normals renormalized."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return cloud.copy()
    rng = np.random.default_rng(seed)
    positions = cloud.positions + rng.normal(0.0, sigma, cloud.positions.shape)
    normals = None
    if cloud.normals is not None:
        perturbed = cloud.normals + rng.normal(0.0, sigma, cloud.normals.shape)
        norms = np.linalg.norm(perturbed, axis=1, keepdims=True)
        normals = np.where(norms > 1e-12, perturbed / np.maximum(norms, 1e-12), cloud.normals)
    return PointCloud(positions, normals)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: member centroid, normals averaged."""
    if voxel <= 0:
        raise ValueError("voxel size must be > 0")
    origin = cloud.positions.min(axis=0)
    keys = np.floor((cloud.positions - origin) / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    centroids = np.zeros((m, 3))
    np.add.at(centroids, inverse, cloud.positions)
    centroids /= counts[:, None]
    normals = None
    if cloud.normals is not None:
        sums = np.zeros((m, 3))
        np.add.at(sums, inverse, cloud.normals)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        # A cancelled average (opposing members) falls back to the first member.
        first = np.full(m, -1, dtype=np.int64)
        for i in range(len(inverse) - 1, -1, -1):
            first[inverse[i]] = i
        normals = np.where(norms > 1e-12, sums / np.maximum(norms, 1e-12),
                           cloud.normals[first])
    return PointCloud(centroids, normals)


def estimate_normals(cloud: PointCloud, radius: float,
                     viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point PCA plane-fit normals, oriented toward `viewpoint`.

    Each neighborhood is the radius ball around the point; neighborhoods
    smaller than 4 points (self plus 3) fall back to the 4 nearest points.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    n = len(cloud)
    if n < 3:
        raise ValueError("normal estimation needs at least 3 points")
    span = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    if float(np.max(span)) < 1e-12:
        raise ValueError("degenerate cloud: all points coincide")
    vp = _as_vec3(viewpoint, "viewpoint")
    tree = cloud.kdtree
    normals = np.empty((n, 3))
    k_fallback = min(4, n)
    for i in range(n):
        idx = tree.query_radius(cloud.positions[i], radius)
        if len(idx) < 4:
            idx, _ = tree.query(cloud.positions[i], k_fallback)
        nbrs = cloud.positions[idx]
        centered = nbrs - nbrs.mean(axis=0)
        cov = centered.T @ centered
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        if normal @ (vp - cloud.positions[i]) < 0:
            normal = -normal
        normals[i] = normal
    out = PointCloud(cloud.positions.copy(), normals)
    out._resolution = cloud._resolution
    return out
