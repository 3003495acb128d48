"""Densely connected classifier, checkpoints and head extension.

The backbone follows the DenseNet-BC layout: a stem convolution, dense
blocks of bottleneck layers (BN-ReLU-1x1 conv, BN-ReLU-3x3 conv) whose
outputs are concatenated onto their input, and transition layers (BN,
1x1 conv, 2x2 average pooling) between blocks.  Global average pooling
feeds a single linear head whose rows follow the label space order.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datahub import LabelSpace

CHECKPOINT_FORMAT_VERSION = 1
HEAD_PREFIX = "head."


class CheckpointError(RuntimeError):
    """Raised for missing, truncated or incompatible checkpoint files."""


@dataclass(frozen=True)
class ClassifierConfig:
    input_side: int = 128
    growth_rate: int = 12
    block_layout: tuple[int, ...] = (2, 2, 2, 2)
    num_classes: int = 2
    init_seed: int = 0
    stem_channels: int | None = None  # defaults to 2 * growth_rate
    bottleneck_width: int = 4  # bottleneck channels = bottleneck_width * growth_rate
    compression: float = 0.5
    stem_stride: int = 4  # 4: 7x7/2 conv + 3x3/2 max-pool, 1: 3x3/1 conv only

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(n) for n in self.block_layout))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.block_layout or any(n < 1 for n in self.block_layout):
            raise ValueError("block_layout must be a nonempty list of positive layer counts")
        if self.growth_rate < 1:
            raise ValueError("growth_rate must be >= 1")
        if self.stem_stride not in (1, 4):
            raise ValueError("stem_stride must be 1 or 4")
        if not 0 < self.compression <= 1:
            raise ValueError("compression must lie in (0, 1]")
        if self.input_side < 1:
            raise ValueError("input_side must be positive")

    @property
    def stem_width(self) -> int:
        return self.stem_channels or 2 * self.growth_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = list(self.block_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**d)


class DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int, bottleneck_width: int):
        super().__init__()
        inner = bottleneck_width * growth_rate
        self.norm1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, inner, kernel_size=1, bias=False)
        self.norm2 = nn.BatchNorm2d(inner)
        self.conv2 = nn.Conv2d(inner, growth_rate, kernel_size=3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return torch.cat([x, out], 1)


class DenseBlock(nn.Sequential):
    def __init__(self, num_layers: int, in_channels: int, growth_rate: int, bottleneck_width: int):
        super().__init__(
            *(DenseLayer(in_channels + i * growth_rate, growth_rate, bottleneck_width) for i in range(num_layers))
        )
        self.out_channels = in_channels + num_layers * growth_rate


class Transition(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.BatchNorm2d(in_channels),
            nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False),
            nn.AvgPool2d(kernel_size=2, stride=2),
        )


class DenseNetClassifier(nn.Module):
    """Classifier ``C`` mapping ``(B, 3, H, W)`` images to class logits.

    Use :func:`predict_proba` for probabilities from ``(B, H, W, 3)`` input.
    """

    def __init__(self, config: ClassifierConfig, labelspace: LabelSpace):
        super().__init__()
        if len(labelspace) != config.num_classes:
            raise ValueError(f"label space has {len(labelspace)} classes but num_classes={config.num_classes}")
        self.config = config
        self.labelspace = labelspace
        g = config.growth_rate
        width = config.stem_width
        if config.stem_stride == 4:
            stem = [
                nn.Conv2d(3, width, kernel_size=7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(),
                nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
            ]
        else:
            stem = [nn.Conv2d(3, width, kernel_size=3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU()]
        layers = list(stem)
        self.block_widths = []
        for i, n in enumerate(config.block_layout):
            block = DenseBlock(n, width, g, config.bottleneck_width)
            layers.append(block)
            width = block.out_channels
            self.block_widths.append(width)
            if i < len(config.block_layout) - 1:
                out = max(1, int(math.floor(width * config.compression)))
                layers.append(Transition(width, out))
                width = out
        layers.append(nn.BatchNorm2d(width))
        self.features = nn.Sequential(*layers)
        self.feature_width = width
        self.head = nn.Linear(width, config.num_classes)
        init_parameters(self, config.init_seed)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.features(x))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def _init_module(m: nn.Module, gen: torch.Generator) -> None:
    if isinstance(m, nn.Conv2d):
        fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
        with torch.no_grad():
            m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            if m.bias is not None:
                m.bias.zero_()
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Linear):
        with torch.no_grad():
            m.weight.normal_(0.0, 1.0 / math.sqrt(m.in_features), generator=gen)
            m.bias.zero_()


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init: fan-in scaled normal weights, zero biases, unit BN scale."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        _init_module(m, gen)


def build(config: ClassifierConfig, labelspace: LabelSpace | None = None) -> DenseNetClassifier:
    if labelspace is None:
        from .datahub import TARGET_CLASSES

        if config.num_classes > len(TARGET_CLASSES):
            raise ValueError("pass a label space for more than three classes")
        labelspace = LabelSpace(TARGET_CLASSES[: config.num_classes])
    return DenseNetClassifier(config, labelspace)


def count_weighted_layers(model: nn.Module) -> int:
    """Convolutions plus fully connected layers, the usual DenseNet-121 count."""
    return sum(isinstance(m, (nn.Conv2d, nn.Linear)) for m in model.modules())


def to_nchw(batch) -> torch.Tensor:
    """``(B, H, W, 3)`` array or tensor -> float ``(B, 3, H, W)`` tensor."""
    t = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected a (B, H, W, 3) batch, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).float().contiguous()


def predict_proba(model: DenseNetClassifier, batch) -> torch.Tensor:
    """Class probabilities for a ``(B, H, W, 3)`` batch, computed in eval mode."""
    x = to_nchw(batch)
    side = model.config.input_side
    if x.shape[2] != side or x.shape[3] != side:
        raise ValueError(f"model expects {side}x{side} images, got {x.shape[2]}x{x.shape[3]}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return torch.softmax(model(x.to(next(model.parameters()).dtype)), dim=1)
    finally:
        model.train(was_training)


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    config: ClassifierConfig
    labelspace: LabelSpace
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DenseNetClassifier, **metadata) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(state, model.config, model.labelspace, metadata)

    def to_model(self) -> DenseNetClassifier:
        model = DenseNetClassifier(self.config, self.labelspace)
        model.load_state_dict(self.state)
        model.to(next(iter(self.state.values())).dtype)
        return model


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save(ckpt: Checkpoint, path) -> Path:
    """Write the tensors to ``path`` and the metadata to a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.state, path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "labelspace": list(ckpt.labelspace.classes),
        "metadata": ckpt.metadata,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    side = sidecar_path(path)
    if not path.is_file() or not side.is_file():
        raise CheckpointError(f"checkpoint not found: {path} (with sidecar {side.name})")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint sidecar {side}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {meta.get('format_version')!r} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        state = torch.load(io.BytesIO(path.read_bytes()), weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on bad bytes
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    config = ClassifierConfig.from_dict(meta["config"])
    labelspace = LabelSpace(meta["labelspace"])
    expected = set(DenseNetClassifier(config, labelspace).state_dict())
    if set(state) != expected:
        raise CheckpointError(f"checkpoint {path} does not match its recorded architecture")
    return Checkpoint(state, config, labelspace, meta.get("metadata", {}))


def extend_head(
    src: Checkpoint, target_space: LabelSpace, seed: int = 0, config: ClassifierConfig | None = None
) -> DenseNetClassifier:
    """Build a wider-head classifier initialized from ``src``.

    Backbone tensors and the head rows of the shared classes are copied
    bitwise; rows for the new classes come from the standard init seeded
    by ``seed``.  If ``config`` is given it must match the checkpoint's
    architecture apart from ``num_classes``.
    """
    if not src.labelspace.is_prefix_of(target_space):
        raise ValueError(f"{src.labelspace.classes} is not a prefix of {target_space.classes}")
    target_config = replace(src.config, num_classes=len(target_space))
    if config is not None and replace(config, num_classes=len(target_space), init_seed=0) != replace(
        target_config, init_seed=0
    ):
        raise ValueError("requested architecture does not match the source checkpoint")
    model = DenseNetClassifier(replace(target_config, init_seed=seed), target_space)
    dtype = next(iter(src.state.values())).dtype
    model.to(dtype)
    n_shared = len(src.labelspace)
    new_state = model.state_dict()
    for k, v in src.state.items():
        if k.startswith(HEAD_PREFIX):
            new_state[k][:n_shared] = v
        else:
            new_state[k] = v.clone()
    model.load_state_dict(new_state)
    return model
