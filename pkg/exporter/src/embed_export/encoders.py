"""Frozen encoders behind a small registry.

Vision encoders consume PIL images after the shared preprocessing (resize
to 360x640, center-crop 224) and return (batch, dim) float64 arrays; text
encoders map strings to dim-vectors. All encoders are deterministic given
their seed: the toy pair needs only numpy, while `resnet50` runs a frozen
torchvision backbone (local .pth weights if provided, otherwise a
seed-initialized network, which still exercises the full pipeline when
pretrained checkpoints are not available).
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
from PIL import Image

from .errors import ConfigError

RESIZE_HW = (360, 640)  # height, width before the center crop
CROP = 224

VISION_ENCODERS = ("toy", "resnet50")
TEXT_ENCODERS = ("hashed",)

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_HASH_BUCKETS = 4096
_TOY_POOL = 16  # toy encoder pools the crop down to 16x16 before projecting


def preprocess(image: Image.Image) -> Image.Image:
    """Resize to 360x640 then center-crop a 224x224 patch."""
    h, w = RESIZE_HW
    resized = image.convert("RGB").resize((w, h), Image.BILINEAR)
    left = (w - CROP) // 2
    top = (h - CROP) // 2
    return resized.crop((left, top, left + CROP, top + CROP))


def _projection(rows: int, cols: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, rows, cols])
    return rng.standard_normal((rows, cols)) / np.sqrt(rows)


class ToyVisionEncoder:
    """Gray block-pooled pixels through a seeded Gaussian projection."""

    name = "toy"

    def __init__(self, dim: int, seed: int) -> None:
        self.dim = dim
        self._proj = _projection(_TOY_POOL * _TOY_POOL, dim, seed)

    def encode_batch(self, images: list[Image.Image]) -> np.ndarray:
        out = np.empty((len(images), self.dim))
        block = CROP // _TOY_POOL
        for i, image in enumerate(images):
            gray = np.asarray(preprocess(image).convert("L"), dtype=np.float64) / 255.0
            pooled = gray.reshape(_TOY_POOL, block, _TOY_POOL, block).mean(axis=(1, 3))
            out[i] = pooled.reshape(-1) @ self._proj
        return out


class Resnet50VisionEncoder:
    """Frozen torchvision ResNet50 trunk (pool output) plus a projection."""

    name = "resnet50"

    def __init__(self, dim: int, seed: int, weights_path: str | None = None) -> None:
        try:
            import torch
            from torchvision.models import resnet50
        except ImportError as exc:
            raise ConfigError("the resnet50 encoder needs torch and torchvision installed") from exc
        self.dim = dim
        self._torch = torch
        torch.manual_seed(seed)
        model = resnet50(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu")
            model.load_state_dict(state)
        model.fc = torch.nn.Identity()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self._proj = _projection(2048, dim, seed) if dim != 2048 else None
        self._mean = np.array([0.485, 0.456, 0.406])
        self._std = np.array([0.229, 0.224, 0.225])

    def encode_batch(self, images: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        batch = np.stack(
            [np.asarray(preprocess(img), dtype=np.float64) / 255.0 for img in images]
        )
        batch = (batch - self._mean) / self._std
        tensor = torch.from_numpy(batch.transpose(0, 3, 1, 2)).float()
        with torch.no_grad():
            feats = self._model(tensor).double().numpy()
        if self._proj is not None:
            feats = feats @ self._proj
        return feats


class HashedTextEncoder:
    """Stable-hash bag of tokens through a seeded Gaussian projection."""

    name = "hashed"

    def __init__(self, dim: int, seed: int) -> None:
        self.dim = dim
        self._proj = _projection(_HASH_BUCKETS, dim, seed)

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            counts = np.zeros(_HASH_BUCKETS)
            for token in _TOKEN_RE.findall(text.lower()):
                digest = hashlib.sha256(token.encode()).digest()
                counts[int.from_bytes(digest[:8], "big") % _HASH_BUCKETS] += 1.0
            norm = np.sqrt((counts**2).sum())
            if norm > 0.0:
                counts /= norm
            out[i] = counts @ self._proj
        return out


def build_vision_encoder(name: str, dim: int, seed: int, weights_path: str | None = None):
    if name == "toy":
        return ToyVisionEncoder(dim, seed)
    if name == "resnet50":
        return Resnet50VisionEncoder(dim, seed, weights_path)
    raise ConfigError(f"unknown vision encoder {name!r}, expected one of {VISION_ENCODERS}")


def build_text_encoder(name: str, dim: int, seed: int):
    if name == "hashed":
        return HashedTextEncoder(dim, seed)
    raise ConfigError(f"unknown text encoder {name!r}, expected one of {TEXT_ENCODERS}")
