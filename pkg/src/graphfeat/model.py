"""The six-layer patch network: joint value/descriptor/score inference and
text checkpoints with bit-exact round trips."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .graphs import PatchGraph
from .patching import Patch

CHECKPOINT_MAGIC = "graphfeat-checkpoint"
CHECKPOINT_VERSION = 1
DESCRIPTOR_DIM = 32

# (in -> out) channel widths and hop counts of the conv stack; the hop pyramid
# rises and falls so late layers see patch-wide context.
CONV_CHANNELS = (6, 8, 16, 32, 16, 8, 1)
CONV_HOPS = (1, 2, 3, 3, 2, 1)


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the architecture."""


@dataclass
class ModelConfig:
    patch_size: int = 225
    descriptor_dim: int = DESCRIPTOR_DIM
    radius_multiplier: float = 2.5
    two_layer_descriptor_head: bool = False
    score_tap_preactivation: bool = False

    def __post_init__(self):
        if self.descriptor_dim != DESCRIPTOR_DIM:
            raise ValueError(f"descriptor_dim must be {DESCRIPTOR_DIM}")
        if self.patch_size < 1 or self.radius_multiplier <= 0:
            raise ValueError("patch_size and radius_multiplier must be positive")


@dataclass
class PatchFeatures:
    """Joint per-patch outputs: node values Y, unit descriptor D, score S."""

    values: np.ndarray
    descriptor: np.ndarray
    score: float
    keypoint_index: int
    keypoint_position: np.ndarray | None = None


@dataclass
class DenseParams:
    weight: nn.Tensor
    bias: nn.Tensor

    def parameters(self) -> list[nn.Tensor]:
        return [self.weight, self.bias]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_conv(rng: np.random.Generator, in_dim: int, out_dim: int,
               hops: int) -> nn.TagConvParams:
    theta = [nn.Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True)
             for _ in range(hops + 1)]
    bias = nn.Tensor(np.zeros(out_dim), requires_grad=True)
    return nn.TagConvParams(theta=theta, bias=bias, hops=hops)


def _init_dense(rng: np.random.Generator, in_dim: int, out_dim: int) -> DenseParams:
    return DenseParams(weight=nn.Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True),
                       bias=nn.Tensor(np.zeros(out_dim), requires_grad=True))


class PatchFeatureNet:
    """Graph-convolutional network mapping a patch graph to (Y, D, S).

    The descriptor taps the 32-channel middle stage through scatter-max, a
    dense layer, and L2 normalization; the score taps layer five the same way
    with a sigmoid; per-node values come from the final 1-channel layer.
    """

    def __init__(self, config: ModelConfig, conv_layers: list[nn.TagConvParams],
                 desc_head: list[DenseParams], score_head: DenseParams):
        if len(conv_layers) != len(CONV_HOPS):
            raise ValueError(f"expected {len(CONV_HOPS)} conv layers")
        for i, conv in enumerate(conv_layers):
            expected = (CONV_CHANNELS[i], CONV_CHANNELS[i + 1], CONV_HOPS[i])
            if (conv.in_dim, conv.out_dim, conv.hops) != expected:
                raise ValueError(f"conv layer {i} is {conv.in_dim}->{conv.out_dim} "
                                 f"hops={conv.hops}, expected {expected}")
        self.config = config
        self.conv_layers = conv_layers
        self.desc_head = desc_head
        self.score_head = score_head

    def parameters(self) -> list[nn.Tensor]:
        params: list[nn.Tensor] = []
        for conv in self.conv_layers:
            params.extend(conv.parameters())
        for dense in self.desc_head:
            params.extend(dense.parameters())
        params.extend(self.score_head.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.parameters()))

    def forward_tensors(self, graph: PatchGraph
                        ) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor, np.ndarray]:
        """Run the network; returns (values, descriptor, score, node_order).

        Nodes are processed in lexicographic feature order so that every
        permutation of the same patch takes the identical floating-point
        path; `node_order` maps canonical row k to the input node order[k],
        and the returned values tensor is in canonical order.
        """
        features = graph.node_features
        if features.ndim != 2 or features.shape[1] != CONV_CHANNELS[0]:
            raise ValueError(f"node features must be (n, {CONV_CHANNELS[0]}), "
                             f"got {features.shape}")
        order = np.lexsort(tuple(features[:, col] for col in
                                 reversed(range(features.shape[1]))))
        adjacency = graph.adjacency[np.ix_(order, order)]
        degree = graph.degree[order]
        inv_sqrt = 1.0 / np.sqrt(degree)
        m = adjacency * np.outer(inv_sqrt, inv_sqrt)

        h = nn.Tensor(features[order])
        for conv in self.conv_layers[:3]:
            h = nn.relu(nn.tag_conv(conv, h, m))
        pooled_desc, _ = nn.scatter_max(h)
        d = pooled_desc
        for dense in self.desc_head:
            d = nn.add(nn.matmul(d, dense.weight), dense.bias)
        descriptor = nn.l2_normalize(d)

        h = nn.relu(nn.tag_conv(self.conv_layers[3], h, m))
        pre5 = nn.tag_conv(self.conv_layers[4], h, m)
        h5 = nn.relu(pre5)
        score_tap = pre5 if self.config.score_tap_preactivation else h5
        pooled_score, _ = nn.scatter_max(score_tap)
        score = nn.sigmoid(nn.add(nn.matmul(pooled_score, self.score_head.weight),
                                  self.score_head.bias))

        values = nn.sigmoid(nn.tag_conv(self.conv_layers[5], h5, m))
        return values, descriptor, score, order

    def forward(self, graph: PatchGraph, patch: Patch | None = None) -> PatchFeatures:
        """Inference convenience wrapper around `forward_tensors`."""
        with nn.no_grad():
            values_t, descriptor_t, score_t, order = self.forward_tensors(graph)
        values = np.empty(graph.num_nodes)
        values[order] = values_t.data[:, 0]
        keypoint = int(np.argmax(values))
        position = None
        if patch is not None and patch.local_points is not None:
            position = patch.to_parent(patch.local_points[keypoint, :3])
        return PatchFeatures(values=values, descriptor=descriptor_t.data.copy(),
                             score=float(score_t.data[0]), keypoint_index=keypoint,
                             keypoint_position=position)


def init_model(seed: int, config: ModelConfig | None = None) -> PatchFeatureNet:
    """Glorot-uniform weights, zero biases; deterministic in `seed`."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    conv_layers = [_init_conv(rng, CONV_CHANNELS[i], CONV_CHANNELS[i + 1], CONV_HOPS[i])
                   for i in range(len(CONV_HOPS))]
    desc_head = [_init_dense(rng, DESCRIPTOR_DIM, DESCRIPTOR_DIM)]
    if config.two_layer_descriptor_head:
        desc_head.append(_init_dense(rng, DESCRIPTOR_DIM, DESCRIPTOR_DIM))
    score_head = _init_dense(rng, CONV_CHANNELS[-2], 1)
    return PatchFeatureNet(config, conv_layers, desc_head, score_head)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _named_parameters(model: PatchFeatureNet) -> list[tuple[str, nn.Tensor]]:
    named: list[tuple[str, nn.Tensor]] = []
    for i, conv in enumerate(model.conv_layers):
        for k, theta in enumerate(conv.theta):
            named.append((f"conv{i}.theta{k}", theta))
        named.append((f"conv{i}.bias", conv.bias))
    for j, dense in enumerate(model.desc_head):
        named.append((f"desc_fc{j}.weight", dense.weight))
        named.append((f"desc_fc{j}.bias", dense.bias))
    named.append(("score_fc.weight", model.score_head.weight))
    named.append(("score_fc.bias", model.score_head.bias))
    return named


def write_array(lines: list[str], name: str, array: np.ndarray) -> None:
    shape = " ".join(str(s) for s in array.shape)
    lines.append(f"param {name} {shape}")
    flat = array.reshape(-1)
    for start in range(0, flat.size, 8):
        lines.append(" ".join(repr(float(v)) for v in flat[start:start + 8]))


def save_checkpoint(model: PatchFeatureNet, path) -> None:
    """Self-describing text checkpoint; floats are written with full precision."""
    cfg = model.config
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"config patch_size {cfg.patch_size}",
             f"config descriptor_dim {cfg.descriptor_dim}",
             f"config radius_multiplier {repr(cfg.radius_multiplier)}",
             f"config two_layer_descriptor_head {int(cfg.two_layer_descriptor_head)}",
             f"config score_tap_preactivation {int(cfg.score_tap_preactivation)}"]
    for name, tensor in _named_parameters(model):
        write_array(lines, name, tensor.data)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise CheckpointError(f"{path}: empty checkpoint")
    head = text[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {head[1]}")
    config: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    terminated = False
    while i < len(text):
        line = text[i].strip()
        i += 1
        if not line:
            continue
        if line == "end":
            terminated = True
            break
        parts = line.split()
        if parts[0] == "config":
            config[parts[1]] = parts[2]
        elif parts[0] == "param":
            name = parts[1]
            shape = tuple(int(s) for s in parts[2:])
            count = int(np.prod(shape)) if shape else 1
            values: list[float] = []
            while len(values) < count and i < len(text):
                row = text[i].strip()
                if row == "end" or row.startswith(("param ", "config ")):
                    break
                values.extend(float(v) for v in row.split())
                i += 1
            if len(values) != count:
                raise CheckpointError(f"{path}: parameter {name} expects {count} "
                                      f"values, found {len(values)}")
            arrays[name] = np.array(values, dtype=np.float64).reshape(shape)
        else:
            raise CheckpointError(f"{path}: unexpected line {line!r}")
    if not terminated:
        raise CheckpointError(f"{path}: truncated checkpoint (missing end marker)")
    return config, arrays


def load_checkpoint(path) -> PatchFeatureNet:
    """Rebuild the model; shape or dimension mismatches raise CheckpointError."""
    raw_config, arrays = _parse_checkpoint(path)
    try:
        config = ModelConfig(
            patch_size=int(raw_config["patch_size"]),
            descriptor_dim=int(raw_config["descriptor_dim"]),
            radius_multiplier=float(raw_config["radius_multiplier"]),
            two_layer_descriptor_head=bool(int(raw_config.get("two_layer_descriptor_head", "0"))),
            score_tap_preactivation=bool(int(raw_config.get("score_tap_preactivation", "0"))),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config ({exc})") from None
    model = init_model(0, config)
    expected = dict(_named_parameters(model))
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"{path}: parameter set mismatch "
                              f"(missing {missing}, unexpected {extra})")
    for name, tensor in expected.items():
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, "
                                  f"architecture expects {tensor.data.shape}")
        tensor.data = arrays[name]
    return model
