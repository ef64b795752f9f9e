"""Patchification and linear projection of ray maps and images into tokens.

Patch rows are emitted in raster order; within a patch, pixels are scanned
row-major with each pixel's channels contiguous. Checkpoints depend on this
order, so it must not change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import PluckerRayMap
from .errors import ShapeError, ValidationError

WEIGHT_INIT_STD = 0.02


def patchify(arr: np.ndarray, p: int) -> np.ndarray:
    """H x W x C -> (HW/p^2) x (C p^2) patch matrix."""
    h, w, c = arr.shape
    if h % p or w % p:
        raise ValidationError(f"grid {h}x{w} not divisible by patch size {p}")
    x = arr.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)  # patch-row, patch-col, in-row, in-col, channel
    return np.ascontiguousarray(x.reshape(h * w // (p * p), c * p * p))


def unpatchify(mat: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    """Exact inverse of patchify for a (HW/p^2) x (C p^2) matrix."""
    c = mat.shape[1] // (p * p)
    x = mat.reshape(h // p, w // p, p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(h, w, c))


def unpatchify_tensor(tokens: Tensor, h: int, w: int, p: int) -> Tensor:
    """Tape-side unpatchify, same layout as the numpy version."""
    c = tokens.shape[1] // (p * p)
    x = ad.reshape(tokens, (h // p, w // p, p, p, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (h, w, c))


@dataclass
class TokenizerWeights:
    """Linear projections (no bias) plus post-tokenization LayerNorm scales."""

    viewpoint_proj: Tensor  # 6 p^2 x d
    image_proj: Tensor      # 9 p^2 x d
    viewpoint_ln: Tensor    # d
    image_ln: Tensor        # d
    patch: int

    @property
    def dim(self) -> int:
        return self.viewpoint_proj.shape[1]

    @staticmethod
    def create(p: int, d: int, rng: np.random.Generator, dtype=np.float32) -> "TokenizerWeights":
        def w(rows, cols):
            return Tensor(rng.normal(0.0, WEIGHT_INIT_STD, (rows, cols)),
                          requires_grad=True, dtype=dtype)

        return TokenizerWeights(
            viewpoint_proj=w(6 * p * p, d),
            image_proj=w(9 * p * p, d),
            viewpoint_ln=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
            image_ln=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
            patch=p,
        )

    def parameters(self, prefix: str = "tokenizer") -> dict[str, Tensor]:
        return {
            f"{prefix}.viewpoint_proj": self.viewpoint_proj,
            f"{prefix}.image_proj": self.image_proj,
            f"{prefix}.viewpoint_ln": self.viewpoint_ln,
            f"{prefix}.image_ln": self.image_ln,
        }


@dataclass
class ViewpointTokens:
    """Per-view token matrix (Hv Wv / p^2) x d with its grid metadata."""

    tokens: Tensor
    height: int
    width: int
    patch: int

    def __post_init__(self):
        expected = self.height * self.width // (self.patch * self.patch)
        if self.tokens.shape[0] != expected:
            raise ValidationError(
                f"token count {self.tokens.shape[0]} != {self.height}x{self.width}/p^2 = {expected}"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ImageTokens:
    """Per-view image token matrix (HW/p^2) x d with its grid metadata."""

    tokens: Tensor
    height: int
    width: int
    patch: int

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def tokenize_viewpoint(rays: PluckerRayMap, weights: TokenizerWeights) -> ViewpointTokens:
    """Plücker map -> patchify -> linear (6p^2 -> d) -> LayerNorm.

    No positional embedding: the ray channels already vary per patch.
    """
    p = weights.patch
    patches = patchify(rays.data, p)
    if patches.shape[1] != weights.viewpoint_proj.shape[0]:
        raise ShapeError(
            f"patch width {patches.shape[1]} != projection rows {weights.viewpoint_proj.shape[0]}"
        )
    x = ad.matmul(Tensor(patches, dtype=weights.viewpoint_proj.dtype), weights.viewpoint_proj)
    x = ad.layer_norm(x, weights.viewpoint_ln)
    return ViewpointTokens(x, rays.height, rays.width, p)


def tokenize_image(image: np.ndarray, rays: PluckerRayMap,
                   weights: TokenizerWeights) -> ImageTokens:
    """Per-patch concat of RGB (3p^2) and Plücker (6p^2) -> linear -> LayerNorm."""
    if image.shape[:2] != rays.data.shape[:2]:
        raise ValidationError(
            f"image {image.shape[:2]} and ray map {rays.data.shape[:2]} sizes differ"
        )
    if not np.isfinite(image).all():
        raise ValidationError("image contains non-finite values")
    p = weights.patch
    patches = np.concatenate([patchify(image, p), patchify(rays.data, p)], axis=1)
    if patches.shape[1] != weights.image_proj.shape[0]:
        raise ShapeError(
            f"patch width {patches.shape[1]} != projection rows {weights.image_proj.shape[0]}"
        )
    x = ad.matmul(Tensor(patches, dtype=weights.image_proj.dtype), weights.image_proj)
    x = ad.layer_norm(x, weights.image_ln)
    return ImageTokens(x, image.shape[0], image.shape[1], p)
