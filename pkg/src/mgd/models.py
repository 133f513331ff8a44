"""Segmentation networks, the frozen teacher pair, and cost accounting.

The toy encoder-decoder stands in for full-scale backbones: it honors the
same forward contract (logits at input resolution plus a decoder feature
map) at a size that trains in seconds on a CPU. Real backbones can be added
by registering another builder.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fileio import read_key_values, write_key_values

DEEP = "deep"
WIDE = "wide"

CHECKPOINT_FORMAT = "mgd-checkpoint-v1"
PARAMS_FILE = "params.pt"
MANIFEST_FILE = "manifest.txt"


class FrozenParameterError(RuntimeError):
    """Frozen network parameters were requested for optimization."""


class ModelCostError(ValueError):
    """The network contains a layer the cost model cannot account for."""


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing files or fails integrity checks."""


class SegmentationNetwork(nn.Module):
    """Base contract: forward(pixels B x 3 x H x W) -> (logits, decoder_features).

    Logits come back at the input resolution, shape B x n_classes x H x W;
    decoder features are the final pre-classifier feature map.
    """

    arch_name: str = "base"
    n_classes: int

    def forward(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def build_args(self) -> dict:
        return {}


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ToySegNet(SegmentationNetwork):
    """Small conv encoder-decoder with a 1x1 classifier head.

    The encoder downsamples twice; the decoder upsamples once, so decoder
    features sit at half the input resolution and logits are bilinearly
    resized back to the input size.
    """

    def __init__(self, n_classes: int, channels: list[int], strides: list[int],
                 decoder_channels: int, arch_name: str, seed: int):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        self.n_classes = n_classes
        self.arch_name = arch_name
        self.seed = seed
        self._channels = list(channels)
        self.decoder_channels = decoder_channels
        blocks = []
        in_ch = 3
        for out_ch, stride in zip(channels, strides):
            blocks.append(_conv_block(in_ch, out_ch, stride))
            in_ch = out_ch
        self.encoder = nn.Sequential(*blocks)
        self.decoder = _conv_block(in_ch, decoder_channels)
        self.classifier = nn.Conv2d(decoder_channels, n_classes, 1)
        _init_deterministic(self, seed)

    @property
    def layer_count(self) -> int:
        return sum(1 for m in self.modules() if isinstance(m, nn.Conv2d))

    @property
    def max_channels(self) -> int:
        return max(m.out_channels for m in self.modules() if isinstance(m, nn.Conv2d))

    def forward(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.encoder(pixels)
        up = F.interpolate(feat, scale_factor=2.0, mode="bilinear", align_corners=False)
        dec = self.decoder(up)
        logits = self.classifier(dec)
        logits = F.interpolate(logits, size=pixels.shape[-2:], mode="bilinear", align_corners=False)
        return logits, dec


def _init_deterministic(net: nn.Module, seed: int) -> None:
    """He-style init drawn from a local generator, independent of global RNG."""
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_toy_student(n_classes: int, width: int = 8, seed: int = 0) -> ToySegNet:
    """Lightweight student; width scales every channel count."""
    if width < 4:
        raise ValueError(f"width must be >= 4, got {width}")
    net = ToySegNet(
        n_classes,
        channels=[width, 2 * width, 2 * width],
        strides=[1, 2, 2],
        decoder_channels=width,
        arch_name="toy_student",
        seed=seed,
    )
    net._build_args = {"width": width}
    return net


def build_toy_teacher(kind: str, n_classes: int, seed: int = 0) -> ToySegNet:
    """Toy teacher in one of two complementary shapes.

    The deep variant stacks more conv layers at narrow widths; the wide
    variant keeps the stack shallow but multiplies the channel counts. Both
    carry more parameters than the toy student.
    """
    if kind == DEEP:
        net = ToySegNet(
            n_classes,
            channels=[16, 24, 24, 24, 24, 24, 24, 24, 24],
            strides=[1, 2, 1, 1, 1, 2, 1, 1, 1],
            decoder_channels=16,
            arch_name="toy_teacher_deep",
            seed=seed,
        )
    elif kind == WIDE:
        net = ToySegNet(
            n_classes,
            channels=[48, 64, 64],
            strides=[1, 2, 2],
            decoder_channels=32,
            arch_name="toy_teacher_wide",
            seed=seed,
        )
    else:
        raise ValueError(f"unknown teacher kind {kind!r}; expected {DEEP!r} or {WIDE!r}")
    net._build_args = {}
    return net


ARCHITECTURES = {
    "toy_student": build_toy_student,
    "toy_teacher_deep": lambda n_classes, seed=0: build_toy_teacher(DEEP, n_classes, seed),
    "toy_teacher_wide": lambda n_classes, seed=0: build_toy_teacher(WIDE, n_classes, seed),
}


def parameter_hash(net: nn.Module) -> str:
    """sha256 over the full state dict (parameters and buffers), name-sorted."""
    digest = hashlib.sha256()
    state = net.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(json.dumps(list(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def freeze(net: SegmentationNetwork) -> SegmentationNetwork:
    """Disable gradients, switch to eval mode, and record the parameter hash."""
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    net._mgd_frozen = True
    net.frozen_hash = parameter_hash(net)
    return net


def is_frozen(net: nn.Module) -> bool:
    return bool(getattr(net, "_mgd_frozen", False))


def optimizer_parameters(net: nn.Module):
    """Parameters eligible for optimization; refuses frozen networks."""
    if is_frozen(net):
        raise FrozenParameterError(
            f"{getattr(net, 'arch_name', type(net).__name__)} is frozen; its parameters must not be optimized"
        )
    return [p for p in net.parameters() if p.requires_grad]


@dataclass
class TeacherEnsemble:
    """The frozen complementary pair: deep-and-thin plus shallow-and-wide."""

    t_d: SegmentationNetwork
    t_w: SegmentationNetwork

    def __post_init__(self):
        for name, net in (("t_d", self.t_d), ("t_w", self.t_w)):
            if not is_frozen(net):
                raise ValueError(f"{name} must be frozen (call freeze()) before ensembling")

    @torch.no_grad()
    def predict(self, pixels: torch.Tensor) -> dict[str, torch.Tensor]:
        """Forward both teachers; probabilities and decoder features, detached."""
        logits_d, feats_d = self.t_d(pixels)
        logits_w, feats_w = self.t_w(pixels)
        return {
            "probs_d": torch.softmax(logits_d, dim=1),
            "feats_d": feats_d,
            "probs_w": torch.softmax(logits_w, dim=1),
            "feats_w": feats_w,
        }

    def hashes(self) -> tuple[str, str]:
        return (self.t_d.frozen_hash, self.t_w.frozen_hash)


@dataclass(frozen=True)
class ModelCost:
    """Parameter count and conv/linear multiply-accumulates at one input size."""

    params: int
    flops: int

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError("counts must be nonnegative")


# Layer types whose parameters are counted but contribute no MACs.
_ZERO_FLOP_PARAM_LAYERS = (nn.BatchNorm2d, nn.BatchNorm1d, nn.GroupNorm, nn.LayerNorm)


def model_cost(net: nn.Module, input_size: tuple[int, int, int]) -> ModelCost:
    """Count parameters and multiply-accumulates for one forward pass.

    flops follows the MAC convention: conv contributes out_elems x kernel
    volume x in_channels/groups, linear contributes out_elems x in_features.
    Normalization and activations are excluded. input_size is (C, H, W).
    """
    for module in net.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)) or isinstance(module, _ZERO_FLOP_PARAM_LAYERS):
            continue
        if any(True for _ in module.parameters(recurse=False)):
            raise ModelCostError(f"unsupported layer type: {type(module).__name__}")

    flops = 0

    def conv_hook(module, _inputs, output):
        nonlocal flops
        kernel_volume = module.kernel_size[0] * module.kernel_size[1]
        flops += output.numel() * kernel_volume * (module.in_channels // module.groups)

    def linear_hook(module, _inputs, output):
        nonlocal flops
        flops += output.numel() * module.in_features

    handles = []
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            handles.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(linear_hook))
    was_training = net.training
    try:
        net.eval()
        with torch.no_grad():
            net(torch.zeros(1, *input_size))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)
    params = sum(p.numel() for p in net.parameters())
    return ModelCost(params=params, flops=flops)


def save_checkpoint(net: SegmentationNetwork, directory: Path, extra: dict | None = None) -> Path:
    """Write the parameter blob plus a plain-text manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), directory / PARAMS_FILE)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": net.arch_name,
        "n_classes": net.n_classes,
        "seed": getattr(net, "seed", 0),
        "param_hash": parameter_hash(net),
    }
    for key, value in getattr(net, "_build_args", {}).items():
        manifest[f"arg.{key}"] = value
    for key, value in (extra or {}).items():
        manifest[key] = value
    write_key_values(directory / MANIFEST_FILE, manifest)
    return directory


def load_checkpoint(directory: Path) -> SegmentationNetwork:
    """Rebuild the architecture named in the manifest and load its parameters."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    params_path = directory / PARAMS_FILE
    if not manifest_path.is_file() or not params_path.is_file():
        raise CheckpointError(f"not a checkpoint directory: {directory}")
    manifest = read_key_values(manifest_path)
    arch = manifest.get("architecture", "")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture {arch!r} in {manifest_path}")
    kwargs = {"n_classes": int(manifest["n_classes"]), "seed": int(manifest.get("seed", 0))}
    for key, value in manifest.items():
        if key.startswith("arg."):
            kwargs[key[4:]] = int(value)
    net = ARCHITECTURES[arch](**kwargs)
    net.load_state_dict(torch.load(params_path, weights_only=True))
    actual = parameter_hash(net)
    expected = manifest.get("param_hash", "")
    if actual != expected:
        raise CheckpointError(
            f"parameter hash mismatch in {directory}: manifest {expected[:12]}.., loaded {actual[:12]}.."
        )
    return net
