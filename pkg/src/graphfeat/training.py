"""Two-stage training: supervised initialization on labeled corner pairs, then
pose-variation fine-tuning with cross-view value warping and triplet metric
learning. Runs are deterministic and resumable."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .graphs import PatchGraph, ValueLabels, build_graph, shortest_hops
from .model import PatchFeatureNet, save_checkpoint
from .patching import Patch, extract_patches, extract_patches_multiscale, to_local_frame
from .pointcloud import PointCloud, RigidPose, add_gaussian_noise, average_resolution, batch_knn
from .synthgen import LabeledPatchPair, PosePair

STAGE_INIT = "init"
STAGE_POSE = "pose"
TRAIN_STATE_MAGIC = "graphfeat-trainstate"


class CorrespondenceError(ValueError):
    """Warped patch has no counterpart within the distance threshold."""


@dataclass
class TrainConfig:
    stage: str = STAGE_INIT
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    margin: float = 1.0
    seed: int = 0
    lambda_d: float = 1.0
    lambda_v: float = 1.0
    lambda_s: float = 1.0
    warp_k: int = 3
    augment_sigma: float = 0.001
    patches_per_pair: int = 8
    stage2_patch_size: int = 64

    def __post_init__(self):
        if self.stage not in (STAGE_INIT, STAGE_POSE):
            raise ValueError(f"stage must be '{STAGE_INIT}' or '{STAGE_POSE}'")
        for name in ("lr", "batch_size", "margin", "lambda_d", "lambda_v",
                     "lambda_s", "warp_k", "patches_per_pair", "stage2_patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TripletSample:
    """Shared-weight triplet input; labels are present for stage-1 samples only."""

    reference: PatchGraph
    positive: PatchGraph
    negative: PatchGraph
    reference_labels: ValueLabels | None = None
    positive_labels: ValueLabels | None = None
    score: float | None = None
    warp: np.ndarray | None = None  # (n_pos, n_ref) value-interpolation weights

    @property
    def has_labels(self) -> bool:
        return (self.reference_labels is not None and self.positive_labels is not None
                and self.score is not None)


# ---------------------------------------------------------------------------
# value warping between differently sampled clouds
# ---------------------------------------------------------------------------

def interpolate_values(source_points: np.ndarray, source_values: np.ndarray,
                       target_points: np.ndarray, k: int = 3,
                       eps: float = 1e-9) -> np.ndarray:
    """Inverse-distance k-NN interpolation; a partition of unity over sources."""
    k = min(k, len(source_points))
    idx, dist = batch_knn(source_points, target_points, k)
    weights = 1.0 / (eps + dist)
    weights /= weights.sum(axis=1, keepdims=True)
    return (weights * source_values[idx]).sum(axis=1)


def warp_weight_matrix(source_points: np.ndarray, target_points: np.ndarray,
                       k: int = 3, eps: float = 1e-9) -> np.ndarray:
    """Dense (n_target, n_source) row-stochastic matrix realizing the same
    inverse-distance interpolation as `interpolate_values`."""
    k = min(k, len(source_points))
    idx, dist = batch_knn(source_points, target_points, k)
    weights = 1.0 / (eps + dist)
    weights /= weights.sum(axis=1, keepdims=True)
    matrix = np.zeros((len(target_points), len(source_points)))
    matrix[np.arange(len(target_points))[:, None], idx] = weights
    return matrix


def warp_values(patch_p: Patch, values: np.ndarray, cloud_p: PointCloud,
                cloud_q: PointCloud, pose: RigidPose, k: int = 3,
                max_distance: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Transfer per-point values from a patch of P onto its counterpart in Q.

    The counterpart point set is the union of the k nearest Q points of every
    transformed patch point; each receives the inverse-distance weighted mean
    of its k nearest transformed sources. Returns (q_indices, q_values).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    src = pose.apply(cloud_p.positions[patch_p.indices])
    idx, dist = batch_knn(cloud_q.positions, src, min(k, len(cloud_q)))
    if max_distance is not None and float(dist.min()) > max_distance:
        raise CorrespondenceError(
            f"nearest counterpart at {dist.min():.4f} exceeds {max_distance:.4f}")
    union = np.unique(idx)
    warped = interpolate_values(src, np.asarray(values, dtype=np.float64),
                                cloud_q.positions[union], k=k)
    return union, warped


# ---------------------------------------------------------------------------
# sample construction
# ---------------------------------------------------------------------------

def make_stage1_triplets(pairs: list[LabeledPatchPair],
                         indices: np.ndarray | None = None) -> list[TripletSample]:
    """Reference/positive are the two views of a pair; the negative is the
    pre-assigned other instance's first view."""
    by_id = {pair.instance_id: pair for pair in pairs}
    chosen = pairs if indices is None else [pairs[i] for i in indices]
    triplets = []
    for pair in chosen:
        negative = by_id.get(pair.negative_id)
        if negative is None:  # negative instance outside this split: pick any other
            others = [p for p in chosen if p.instance_id != pair.instance_id]
            negative = others[pair.instance_id % len(others)] if others else pair
        triplets.append(TripletSample(
            reference=pair.view_a.graph,
            positive=pair.view_b.graph,
            negative=negative.view_a.graph,
            reference_labels=pair.view_a.labels,
            positive_labels=pair.view_b.labels,
            score=pair.score))
    return triplets


def corresponding_patch(cloud_p: PointCloud, patch_p: Patch, cloud_q: PointCloud,
                        pose: RigidPose, n: int, k: int = 3,
                        max_distance: float | None = None) -> tuple[Patch, np.ndarray]:
    """Fixed-size counterpart of a P patch in Q plus the value-warp matrix.

    The counterpart is the n nearest Q points to the transformed patch
    centroid; the (n, n) warp matrix interpolates reference node values onto
    the counterpart's nodes for cross-view consistency losses.
    """
    center = pose.apply(patch_p.centroid[None, :])[0]
    _, dist = batch_knn(cloud_q.positions, center[None, :], 1)
    if max_distance is not None and float(dist[0, 0]) > max_distance:
        raise CorrespondenceError(
            f"patch center has no counterpart within {max_distance:.4f}")
    patch_q = extract_patches(cloud_q, n, seeds=[center])[0]
    patch_q = to_local_frame(cloud_q, patch_q)
    warp = warp_weight_matrix(pose.apply(cloud_p.positions[patch_p.indices]),
                              cloud_q.positions[patch_q.indices], k=k)
    return patch_q, warp


def make_stage2_samples(pairs: list[PosePair], config: TrainConfig,
                        radius_multiplier: float = 2.5) -> list[TripletSample]:
    """Triplets for pose fine-tuning: a P patch, its warped Q counterpart, and
    a random patch from a different pair; deterministic in config.seed."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pose pairs for negatives")
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x57A6E2)))
    samples: list[TripletSample] = []
    skipped = 0
    for pair_idx, pair in enumerate(pairs):
        sigma = config.augment_sigma
        cloud_p = add_gaussian_noise(pair.cloud_p, sigma, int(rng.integers(2 ** 31)))
        cloud_q = add_gaussian_noise(pair.cloud_q, sigma, int(rng.integers(2 ** 31)))
        n = min(config.stage2_patch_size, len(cloud_p), len(cloud_q))
        threshold = 3.0 * average_resolution(pair.cloud_p)
        patches = extract_patches_multiscale(cloud_p, n, config.patches_per_pair,
                                             seed=int(rng.integers(2 ** 31)))
        for patch in patches:
            other = pairs[(pair_idx + 1 + int(rng.integers(len(pairs) - 1))) % len(pairs)]
            neg_seed = int(rng.integers(2 ** 31))
            try:
                patch_p = to_local_frame(cloud_p, patch)
                patch_q, warp = corresponding_patch(cloud_p, patch_p, cloud_q,
                                                    pair.pose, n, k=config.warp_k,
                                                    max_distance=threshold)
                neg_patch = extract_patches(other.cloud_p, min(n, len(other.cloud_p)),
                                            num_patches=1, seed=neg_seed)[0]
                neg_patch = to_local_frame(other.cloud_p, neg_patch)
                samples.append(TripletSample(
                    reference=build_graph(patch_p, radius_multiplier=radius_multiplier),
                    positive=build_graph(patch_q, radius_multiplier=radius_multiplier),
                    negative=build_graph(neg_patch, radius_multiplier=radius_multiplier),
                    warp=warp))
            except (CorrespondenceError, ValueError) as exc:
                skipped += 1
                warnings.warn(f"skipping stage-2 sample: {exc}", stacklevel=2)
    if not samples:
        raise ValueError("no usable stage-2 samples (all correspondences failed)")
    return samples


# ---------------------------------------------------------------------------
# optimization steps
# ---------------------------------------------------------------------------

def _canonical_labels(labels: ValueLabels, order: np.ndarray) -> np.ndarray:
    return labels.values[order].reshape(-1, 1)


def stage1_step(model: PatchFeatureNet, batch: list[TripletSample],
                config: TrainConfig, optimizer: nn.Adam) -> dict[str, float]:
    """One supervised step: triplet descriptor loss plus value/score MSE."""
    if not batch:
        raise ValueError("empty batch")
    for sample in batch:
        if not sample.has_labels:
            raise ValueError("stage-1 batch contains unlabeled samples")
    optimizer.zero_grad()
    d_terms, v_terms, s_terms = [], [], []
    for sample in batch:
        y_r, d_r, s_r, order_r = model.forward_tensors(sample.reference)
        y_p, d_p, s_p, order_p = model.forward_tensors(sample.positive)
        _, d_n, _, _ = model.forward_tensors(sample.negative)
        d_terms.append(nn.triplet_ratio_loss(d_r, d_p, d_n, config.margin))
        v_terms.append(nn.stack_mean([
            nn.mse_loss(y_r, _canonical_labels(sample.reference_labels, order_r)),
            nn.mse_loss(y_p, _canonical_labels(sample.positive_labels, order_p))]))
        target = np.array([sample.score])
        s_terms.append(nn.stack_mean([nn.mse_loss(s_r, target),
                                      nn.mse_loss(s_p, target)]))
    loss_d = nn.stack_mean(d_terms)
    loss_v = nn.stack_mean(v_terms)
    loss_s = nn.stack_mean(s_terms)
    total = nn.add(nn.add(nn.mul(loss_d, nn.as_tensor(config.lambda_d)),
                          nn.mul(loss_v, nn.as_tensor(config.lambda_v))),
                   nn.mul(loss_s, nn.as_tensor(config.lambda_s)))
    total.backward()
    optimizer.step()
    return {"loss_total": total.item(), "loss_d": loss_d.item(),
            "loss_v": loss_v.item(), "loss_s": loss_s.item()}


def stage2_step(model: PatchFeatureNet, batch: list[TripletSample],
                config: TrainConfig, optimizer: nn.Adam) -> dict[str, float]:
    """One metric-learning step: triplet loss plus warped value consistency."""
    if not batch:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    d_terms, v_terms = [], []
    for sample in batch:
        if sample.warp is None:
            raise ValueError("stage-2 batch item lacks a warp matrix")
        y_r, d_r, _, order_r = model.forward_tensors(sample.reference)
        y_p, d_p, _, order_p = model.forward_tensors(sample.positive)
        _, d_n, _, _ = model.forward_tensors(sample.negative)
        d_terms.append(nn.triplet_ratio_loss(d_r, d_p, d_n, config.margin))
        warp_canonical = sample.warp[np.ix_(order_p, order_r)]
        warped = nn.matmul(nn.as_tensor(warp_canonical), y_r)
        v_terms.append(nn.mse_loss(y_p, warped))
    loss_d = nn.stack_mean(d_terms)
    loss_v = nn.stack_mean(v_terms)
    total = nn.add(nn.mul(loss_d, nn.as_tensor(config.lambda_d)),
                   nn.mul(loss_v, nn.as_tensor(config.lambda_v)))
    total.backward()
    optimizer.step()
    return {"loss_total": total.item(), "loss_d": loss_d.item(),
            "loss_v": loss_v.item(), "loss_s": 0.0}


# ---------------------------------------------------------------------------
# training loop with resumable state
# ---------------------------------------------------------------------------

def save_train_state(optimizer: nn.Adam, epoch: int, step: int, path) -> None:
    from .model import write_array
    lines = [f"{TRAIN_STATE_MAGIC} 1", f"epoch {epoch}", f"step {step}",
             f"adam_t {optimizer.t}"]
    for i, (m, v) in enumerate(zip(optimizer._m, optimizer._v)):
        write_array(lines, f"m{i}", m)
        write_array(lines, f"v{i}", v)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_train_state(optimizer: nn.Adam, path) -> tuple[int, int]:
    """Restore optimizer moments; returns (next_epoch, next_step)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(TRAIN_STATE_MAGIC):
        raise ValueError(f"{path}: not a training state file")
    scalars: dict[str, int] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line == "end":
            continue
        parts = line.split()
        if parts[0] in ("epoch", "step", "adam_t"):
            scalars[parts[0]] = int(parts[1])
        elif parts[0] == "param":
            name = parts[1]
            shape = tuple(int(s) for s in parts[2:])
            count = int(np.prod(shape)) if shape else 1
            values: list[float] = []
            while len(values) < count and i < len(lines):
                values.extend(float(v) for v in lines[i].split())
                i += 1
            arrays[name] = np.array(values).reshape(shape)
    count = len(optimizer.params)
    state = {"t": scalars["adam_t"],
             "m": [arrays[f"m{i}"] for i in range(count)],
             "v": [arrays[f"v{i}"] for i in range(count)]}
    optimizer.load_state_dict(state)
    return scalars["epoch"] + 1, scalars["step"]


@dataclass
class TrainResult:
    model: PatchFeatureNet
    log_path: Path
    final_checkpoint: Path | None
    steps: int


def train(model: PatchFeatureNet, samples: list[TripletSample], config: TrainConfig,
          out_dir, resume_state=None, log_stream=None) -> TrainResult:
    """Run `config.epochs` over the samples with per-epoch checkpointing.

    The epoch shuffle is derived statelessly from (seed, epoch), so a run
    resumed from epoch e's checkpoint and state file reproduces the
    uninterrupted run bit for bit.
    """
    if config.stage == STAGE_INIT:
        if any(not s.has_labels for s in samples):
            raise ValueError("stage 'init' requires labeled samples")
        step_fn = stage1_step
    else:
        if any(s.warp is None for s in samples):
            raise ValueError("stage 'pose' requires warp matrices on samples")
        step_fn = stage2_step
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    optimizer = nn.Adam(model.parameters(), lr=config.lr)
    start_epoch, step = 0, 0
    if resume_state is not None:
        start_epoch, step = load_train_state(optimizer, resume_state)
    log_path = out / "train_log.tsv"
    mode = "a" if resume_state is not None else "w"
    final_checkpoint = None
    with open(log_path, mode) as log:
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence((config.seed, epoch))).permutation(len(samples))
            for lo in range(0, len(order), config.batch_size):
                batch = [samples[j] for j in order[lo:lo + config.batch_size]]
                losses = step_fn(model, batch, config, optimizer)
                line = "\t".join([str(step), repr(losses["loss_total"]),
                                  repr(losses["loss_d"]), repr(losses["loss_v"]),
                                  repr(losses["loss_s"]), repr(config.lr)])
                log.write(line + "\n")
                if log_stream is not None:
                    print(line, file=log_stream)
                step += 1
            final_checkpoint = out / f"checkpoint_epoch_{epoch:03d}.txt"
            save_checkpoint(model, final_checkpoint)
            save_train_state(optimizer, epoch, step, out / f"state_epoch_{epoch:03d}.txt")
    return TrainResult(model=model, log_path=log_path,
                       final_checkpoint=final_checkpoint, steps=step)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def keypoint_hop_error(model: PatchFeatureNet, graph: PatchGraph,
                       labels: ValueLabels) -> float:
    """Hop distance between the predicted argmax node and the labeled keypoint."""
    features = model.forward(graph)
    hops = shortest_hops(graph, labels.keypoint_index)
    return float(hops[features.keypoint_index])


def evaluate_keypoint_accuracy(model: PatchFeatureNet,
                               views: list[tuple[PatchGraph, ValueLabels]],
                               max_hops: float = 1.0) -> float:
    hits = sum(keypoint_hop_error(model, graph, labels) <= max_hops
               for graph, labels in views)
    return hits / len(views)


def evaluate_triplet_accuracy(model: PatchFeatureNet,
                              triplets: list[TripletSample]) -> float:
    hits = 0
    for sample in triplets:
        d_r = model.forward(sample.reference).descriptor
        d_p = model.forward(sample.positive).descriptor
        d_n = model.forward(sample.negative).descriptor
        hits += np.linalg.norm(d_r - d_p) < np.linalg.norm(d_r - d_n)
    return hits / len(triplets)
