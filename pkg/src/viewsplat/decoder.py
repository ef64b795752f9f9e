"""Decode viewpoint tokens into pixel-aligned 3D Gaussians.

A single linear head maps each token to 16 raw channels per pixel; the
channels are activated into Gaussian attributes and unprojected along the
per-pixel camera ray. Channel layout: xy offset (2), depth (3), opacity (1),
scale (3), rotation quaternion wxyz (4), color (3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Camera
from .errors import ShapeError, ValidationError
from .model import GAUSSIAN_CHANNELS
from .tokenizer import ViewpointTokens, unpatchify_tensor

SCALE_CLAMP = (-10.0, 2.0)
DEFAULT_NEAR = 0.1
DEFAULT_FAR = 100.0


@dataclass
class RawGaussianChannels:
    """Unactivated decoder output on the viewpoint pixel grid, Hv x Wv x 16."""

    grid: Tensor
    height: int
    width: int


@dataclass
class ActivatedGaussians:
    """Per-view activated attributes, each on the Hv x Wv grid."""

    offsets: Tensor   # Hv x Wv x 2, in (-0.5, 0.5) pixel units
    depth: Tensor     # Hv x Wv, distance along the unit ray
    opacity: Tensor   # Hv x Wv, in (0, 1)
    scale: Tensor     # Hv x Wv x 3, positive world units
    rotation: Tensor  # Hv x Wv x 4, unit quaternion wxyz
    color: Tensor     # Hv x Wv x 3, in (0, 1)


@dataclass
class GaussianSet:
    """Flat world-space Gaussian collection across all views."""

    means: Tensor     # S x 3
    opacity: Tensor   # S
    scale: Tensor     # S x 3
    rotation: Tensor  # S x 4, unit quaternion wxyz
    color: Tensor     # S x 3

    def __len__(self) -> int:
        return self.means.shape[0]

    @staticmethod
    def from_arrays(means, opacity, scale, rotation, color) -> "GaussianSet":
        return GaussianSet(
            means=Tensor(means), opacity=Tensor(opacity), scale=Tensor(scale),
            rotation=Tensor(rotation), color=Tensor(color),
        )

    @staticmethod
    def concatenate(sets: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(
            means=ad.concat([g.means for g in sets], axis=0),
            opacity=ad.concat([g.opacity for g in sets], axis=0),
            scale=ad.concat([g.scale for g in sets], axis=0),
            rotation=ad.concat([g.rotation for g in sets], axis=0),
            color=ad.concat([g.color for g in sets], axis=0),
        )

    def max_invariant_violation(self) -> float:
        """Worst violation of the attribute codomains (0 when all hold)."""
        a = self.opacity.numpy()
        s = self.scale.numpy()
        q = self.rotation.numpy()
        c = self.color.numpy()
        worst = 0.0
        worst = max(worst, float(np.maximum(a - 1.0, -a).max(initial=0.0)))
        worst = max(worst, float((-s).max(initial=0.0)))
        worst = max(worst, float(np.abs(np.linalg.norm(q, axis=-1) - 1.0).max(initial=0.0)))
        worst = max(worst, float(np.maximum(c - 1.0, -c).max(initial=0.0)))
        return worst


def decode_tokens(v: ViewpointTokens, head: Tensor) -> RawGaussianChannels:
    """Linear head to 16 p^2 channels per token, unpatchified to the pixel grid."""
    d = v.tokens.shape[1]
    expected = (d, GAUSSIAN_CHANNELS * v.patch * v.patch)
    if head.shape != expected:
        raise ShapeError(f"decoder head shape {head.shape} != expected {expected}")
    flat = ad.matmul(v.tokens, head)
    grid = unpatchify_tensor(flat, v.height, v.width, v.patch)
    return RawGaussianChannels(grid, v.height, v.width)


def activate(raw: RawGaussianChannels, near: float = DEFAULT_NEAR,
             far: float = DEFAULT_FAR) -> ActivatedGaussians:
    """Total post-activations mapping raw channels into attribute codomains.

    Depth averages its 3 raw channels, then maps through a log-interpolated
    sigmoid: z = near * (far/near) ** sigmoid(mean). The xy offset stays
    within half a pixel of the center. Degenerate all-zero quaternions fall
    back to identity.
    """
    if not (0.0 < near < far):
        raise ValidationError(f"need 0 < near < far, got near={near}, far={far}")
    g = raw.grid
    offsets = ad.tanh(g[..., 0:2]) * 0.5
    depth_mean = ad.tmean(g[..., 2:5], axis=-1)
    log_span = float(np.log(far / near))
    depth = ad.texp(ad.sigmoid(depth_mean) * log_span + float(np.log(near)))
    opacity = ad.sigmoid(g[..., 5])
    scale = ad.texp(ad.clip(g[..., 6:9], *SCALE_CLAMP))
    rotation = ad.unit_vectors(g[..., 9:13], eps=1e-8, fallback_index=0)
    color = ad.sigmoid(g[..., 13:16])
    return ActivatedGaussians(offsets, depth, opacity, scale, rotation, color)


def unproject(activated: ActivatedGaussians, camera: Camera) -> GaussianSet:
    """Place each pixel's Gaussian at center + depth * unit ray direction.

    The camera's intrinsics must already be scaled to the viewpoint grid.
    Scale and rotation are interpreted in the world frame.
    """
    h, w = activated.depth.shape
    intr = camera.intrinsics
    if (intr.height, intr.width) != (h, w):
        raise ValidationError(
            f"camera grid {intr.height}x{intr.width} != activation grid {h}x{w}"
        )
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    dtype = activated.depth.dtype
    base_x = Tensor(((uu - intr.cx) / intr.fx)[..., None], dtype=dtype)
    base_y = Tensor(((vv - intr.cy) / intr.fy)[..., None], dtype=dtype)
    ones = Tensor(np.ones((h, w, 1)), dtype=dtype)

    ox = activated.offsets[..., 0:1]
    oy = activated.offsets[..., 1:2]
    dirs_cam = ad.concat(
        [base_x + ox * (1.0 / intr.fx), base_y + oy * (1.0 / intr.fy), ones], axis=-1
    )
    dirs_world = ad.matmul(dirs_cam, Tensor(camera.pose.rotation.T, dtype=dtype))
    unit = ad.unit_vectors(dirs_world)
    center = Tensor(camera.pose.translation, dtype=dtype)
    means = center + unit * ad.reshape(activated.depth, (h, w, 1))

    n = h * w
    return GaussianSet(
        means=ad.reshape(means, (n, 3)),
        opacity=ad.reshape(activated.opacity, (n,)),
        scale=ad.reshape(activated.scale, (n, 3)),
        rotation=ad.reshape(activated.rotation, (n, 4)),
        color=ad.reshape(activated.color, (n, 3)),
    )


def decode_views(tokens: list[ViewpointTokens], cameras: list[Camera], head: Tensor,
                 near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> GaussianSet:
    """Decode every view's tokens and pool the Gaussians into one set."""
    sets = []
    for toks, cam in zip(tokens, cameras):
        act = activate(decode_tokens(toks, head), near, far)
        sets.append(unproject(act, cam.scaled(toks.width, toks.height)))
    return GaussianSet.concatenate(sets)
