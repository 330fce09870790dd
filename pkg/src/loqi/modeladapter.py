"""Uniform abstraction over descriptor extractors.

An extractor is an encoder (image -> latent code) plus an aggregator
(latent code -> descriptor). Third-party methods plug in through the
same handle; the built-in "toy" extractor is a small convolutional
model for desk-scale training and tests.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

CHECKPOINT_VERSION = 1

_REGISTRY: dict[str, callable] = {}


def register_extractor(name):
    """Register a factory(seed, **kwargs) -> ExtractorHandle under a name."""
    def wrap(factory):
        _REGISTRY[name] = factory
        return factory
    return wrap


def create_extractor(name: str, seed: int = 0, **kwargs) -> "ExtractorHandle":
    if name not in _REGISTRY:
        raise ValidationError(
            f"unknown extractor {name!r}; available: {sorted(_REGISTRY)}")
    return _REGISTRY[name](seed=seed, **kwargs)


def image_to_tensor(image) -> torch.Tensor:
    """HxWx3 uint8 raster -> float (3, H, W) tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("expected an HxWx3 raster")
    t = torch.from_numpy(np.ascontiguousarray(img)).to(torch.get_default_dtype())
    return t.permute(2, 0, 1) / 255.0


@dataclass
class ExtractorHandle:
    """Encoder + aggregator pair with identity and per-part trainability."""

    encoder: nn.Module
    aggregator: nn.Module
    identity: str
    descriptor_dim: int
    trainable_encoder: bool = True
    trainable_aggregator: bool = True

    def encode(self, image) -> torch.Tensor:
        """Latent code (c, w', h') for one image."""
        x = image_to_tensor(image).unsqueeze(0)
        return self.encoder(x).squeeze(0)

    def aggregate(self, latent: torch.Tensor) -> torch.Tensor:
        return self.aggregator(latent.unsqueeze(0)).squeeze(0)

    def describe(self, image) -> torch.Tensor:
        """Global descriptor for one image."""
        return self.aggregate(self.encode(image))

    def modules(self):
        return (self.encoder, self.aggregator)

    def trainable_parameters(self):
        params = []
        if self.trainable_encoder:
            params += list(self.encoder.parameters())
        if self.trainable_aggregator:
            params += list(self.aggregator.parameters())
        return params

    def freeze(self) -> None:
        self.trainable_encoder = False
        self.trainable_aggregator = False
        for m in self.modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.modules():
            for name, p in sorted(m.state_dict().items()):
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def state_dict(self):
        return {"encoder": self.encoder.state_dict(),
                "aggregator": self.aggregator.state_dict()}

    def load_state_dict(self, state):
        self.encoder.load_state_dict(state["encoder"])
        self.aggregator.load_state_dict(state["aggregator"])


@dataclass
class BranchPair:
    """Frozen teacher and trainable student, structurally identical."""

    teacher: ExtractorHandle
    student: ExtractorHandle


def clone_as_branch_pair(handle: ExtractorHandle) -> BranchPair:
    """Two copies of a handle: the teacher copy frozen, the student trainable."""
    teacher = copy.deepcopy(handle)
    student = copy.deepcopy(handle)
    teacher.freeze()
    return BranchPair(teacher=teacher, student=student)


class _ToyEncoder(nn.Module):
    """Three strided convolutions; output is the final feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, channels, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class _MeanPoolProject(nn.Module):
    """Spatial mean pool followed by a linear projection to the descriptor."""

    def __init__(self, channels: int, descriptor_dim: int):
        super().__init__()
        self.proj = nn.Linear(channels, descriptor_dim)

    def forward(self, z):
        return self.proj(z.mean(dim=(2, 3)))


@register_extractor("toy")
def make_toy_extractor(seed: int = 0, channels: int = 16,
                       descriptor_dim: int = 32) -> ExtractorHandle:
    """Deterministic desk-scale extractor; same seed gives identical weights."""
    if channels < 2:
        raise ValidationError("channels must be >= 2")
    if descriptor_dim < 4:
        raise ValidationError("descriptor_dim must be >= 4")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        encoder = _ToyEncoder(channels)
        aggregator = _MeanPoolProject(channels, descriptor_dim)
    return ExtractorHandle(
        encoder=encoder, aggregator=aggregator,
        identity=f"toy/1 seed={seed} c={channels} d={descriptor_dim}",
        descriptor_dim=descriptor_dim)


def save_checkpoint(handle: ExtractorHandle, path) -> None:
    torch.save({"version": CHECKPOINT_VERSION,
                "identity": handle.identity,
                "descriptor_dim": handle.descriptor_dim,
                "state": handle.state_dict()}, path)


def load_checkpoint(handle: ExtractorHandle, path) -> ExtractorHandle:
    """Load saved parameters into a structurally matching handle."""
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {blob.get('version')}")
    if blob.get("descriptor_dim") != handle.descriptor_dim:
        raise ValidationError(
            f"checkpoint descriptor_dim {blob.get('descriptor_dim')} does not "
            f"match handle {handle.descriptor_dim}")
    handle.load_state_dict(blob["state"])
    return handle
