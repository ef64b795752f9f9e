"""Forward 3D Gaussian splat rendering.

Three paths share one compositing rule (front-to-back alpha blending with a
3-sigma footprint, a 1/255 contribution cutoff and a transmittance early
stop):

* rasterize_tiled   - fast path, 16x16 tile binning, vectorized per tile
* render_oracle     - brute force over pixels x splats, the reference
* rasterize_naive   - tape-recorded version for training; drops the hard
                      cutoffs and replaces the alpha clamp with a smooth min
                      so every Gaussian parameter receives gradients

Projection follows EWA splatting: Sigma2D = J W Sigma3D W^T J^T plus a 0.3 px
low-pass dilation on the diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Camera
from .decoder import GaussianSet

ALPHA_CLAMP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
FOOTPRINT_SIGMAS = 3.0
COV_DILATION = 0.3
TRANSMITTANCE_FLOOR = 1e-4
NEAR_CLIP = 0.01
SMOOTH_CLAMP_SHARPNESS = 100.0

# power = 0.5 * mahalanobis^2; contributions beyond 3 sigma are skipped
_POWER_LIMIT = 0.5 * FOOTPRINT_SIGMAS ** 2


@dataclass
class RenderTarget:
    """Composited H x W x 3 image in [0, 1] plus the background it used."""

    image: np.ndarray
    background: np.ndarray
    skipped_splats: int = 0


@dataclass
class Splat2D:
    """Projected splats, struct-of-arrays over the retained Gaussians."""

    mean: np.ndarray      # M x 2, pixel coordinates
    cov: np.ndarray       # M x 3, (a, b, c) of the symmetric 2x2 covariance
    depth: np.ndarray     # M, camera-space z
    opacity: np.ndarray   # M
    color: np.ndarray     # M x 3
    source_index: np.ndarray  # M, index into the original GaussianSet

    def __len__(self) -> int:
        return self.mean.shape[0]


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (wxyz, N x 4) to rotation matrices (N x 3 x 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(-1, 3, 3)


def project(gaussians: GaussianSet, camera: Camera,
            near_clip: float = NEAR_CLIP) -> Splat2D:
    """EWA projection of a GaussianSet; splats behind the near plane are culled."""
    mu = np.asarray(gaussians.means.numpy(), dtype=np.float64)
    scale = np.asarray(gaussians.scale.numpy(), dtype=np.float64)
    quat = np.asarray(gaussians.rotation.numpy(), dtype=np.float64)
    opacity = np.asarray(gaussians.opacity.numpy(), dtype=np.float64)
    color = np.asarray(gaussians.color.numpy(), dtype=np.float64)

    w2c = camera.pose.rotation.T
    xc = (mu - camera.pose.translation) @ w2c.T
    keep = xc[:, 2] > near_clip
    idx = np.nonzero(keep)[0]
    xc = xc[idx]

    rot = quaternion_to_matrix(quat[idx])
    sigma3 = (rot * (scale[idx] ** 2)[:, None, :]) @ rot.transpose(0, 2, 1)

    intr = camera.intrinsics
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    n = len(idx)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = intr.fx / z
    jac[:, 0, 2] = -intr.fx * x / (z * z)
    jac[:, 1, 1] = intr.fy / z
    jac[:, 1, 2] = -intr.fy * y / (z * z)

    m = jac @ w2c
    sigma2 = m @ sigma3 @ m.transpose(0, 2, 1)
    cov = np.stack([
        sigma2[:, 0, 0] + COV_DILATION,
        sigma2[:, 0, 1],
        sigma2[:, 1, 1] + COV_DILATION,
    ], axis=1)

    mean2d = np.stack([
        intr.fx * x / z + intr.cx,
        intr.fy * y / z + intr.cy,
    ], axis=1)

    return Splat2D(mean2d, cov, z.copy(), opacity[idx], color[idx], idx)


def _sorted_order(splats: Splat2D) -> np.ndarray:
    """Depth-ascending order, ties broken by original Gaussian index."""
    return np.lexsort((splats.source_index, splats.depth))


def _inverse_cov(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-splat inverse of [[a,b],[b,c]]; second output flags non-PSD splats."""
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    bad = (det <= 0) | (a <= 0) | (c <= 0)
    safe = np.where(bad, 1.0, det)
    inv = np.stack([c / safe, -b / safe, a / safe], axis=1)
    return inv, bad


@dataclass
class Frame:
    width: int
    height: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _composite_pixels(px, py, order, splats, inv, bad, background):
    """Reference compositing of one batch of pixels against all splats.

    Used by the oracle only; iterates splats per pixel with cumprod.
    """
    colors = splats.color[order]
    mean = splats.mean[order]
    opac = splats.opacity[order]
    ia, ib, ic = inv[order, 0], inv[order, 1], inv[order, 2]
    ok = ~bad[order]
    out = np.empty((len(px), 3))
    for i, (ux, vy) in enumerate(zip(px, py)):
        dx = mean[:, 0] - ux
        dy = mean[:, 1] - vy
        power = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
        alpha = np.minimum(ALPHA_CLAMP, opac * np.exp(-np.minimum(power, 60.0)))
        alpha = np.where((power <= _POWER_LIMIT) & (alpha >= ALPHA_CUTOFF) & ok,
                         alpha, 0.0)
        trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
        below = trans < TRANSMITTANCE_FLOOR
        cut = int(np.argmax(below)) if below.any() else len(alpha)
        weights = alpha[:cut] * trans[:cut]
        out[i] = weights @ colors[:cut] + trans[cut] * background
    return out


def render_oracle(splats: Splat2D, frame: Frame) -> RenderTarget:
    """O(pixels x splats) direct evaluation of the compositing formula."""
    h, w = frame.height, frame.width
    bg = np.asarray(frame.background, dtype=np.float64)
    if len(splats) == 0:
        return RenderTarget(np.tile(bg, (h, w, 1)).astype(np.float64), bg)
    order = _sorted_order(splats)
    inv, bad = _inverse_cov(splats.cov)
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    flat = _composite_pixels(uu.ravel(), vv.ravel(), order, splats, inv, bad, bg)
    image = np.clip(flat.reshape(h, w, 3), 0.0, 1.0)
    return RenderTarget(image, bg, skipped_splats=int(bad.sum()))


def rasterize_tiled(splats: Splat2D, frame: Frame, tile: int = 16) -> RenderTarget:
    """Tile-binned rasterization; agrees with render_oracle to ~1e-5."""
    h, w = frame.height, frame.width
    bg = np.asarray(frame.background, dtype=np.float64)
    if len(splats) == 0:
        return RenderTarget(np.tile(bg, (h, w, 1)).astype(np.float64), bg)

    order = _sorted_order(splats)
    inv, bad = _inverse_cov(splats.cov)
    a, b, c = splats.cov[:, 0], splats.cov[:, 1], splats.cov[:, 2]
    # conservative footprint: 3 sigma of the dominant eigenvalue
    eig_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.ceil(FOOTPRINT_SIGMAS * np.sqrt(np.maximum(eig_max, 0.0)))

    tiles_x = (w + tile - 1) // tile
    tiles_y = (h + tile - 1) // tile
    bins: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for rank in order:
        if bad[rank]:
            continue
        mx, my = splats.mean[rank]
        r = radius[rank]
        tx0 = max(0, int((mx - r) // tile))
        tx1 = min(tiles_x - 1, int((mx + r) // tile))
        ty0 = max(0, int((my - r) // tile))
        ty1 = min(tiles_y - 1, int((my + r) // tile))
        if tx0 > tx1 or ty0 > ty1:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                bins[ty * tiles_x + tx].append(rank)

    image = np.empty((h, w, 3))
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            x0, x1 = tx * tile, min((tx + 1) * tile, w)
            y0, y1 = ty * tile, min((ty + 1) * tile, h)
            uu, vv = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
            px, py = uu.ravel(), vv.ravel()
            trans = np.ones(px.size)
            acc = np.zeros((px.size, 3))
            for rank in bins[ty * tiles_x + tx]:
                dx = splats.mean[rank, 0] - px
                dy = splats.mean[rank, 1] - py
                ia, ib, ic = inv[rank]
                power = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                alpha = np.minimum(
                    ALPHA_CLAMP, splats.opacity[rank] * np.exp(-np.minimum(power, 60.0))
                )
                live = (trans >= TRANSMITTANCE_FLOOR) & (power <= _POWER_LIMIT) \
                    & (alpha >= ALPHA_CUTOFF)
                alpha = np.where(live, alpha, 0.0)
                acc += (alpha * trans)[:, None] * splats.color[rank]
                trans = trans * (1.0 - alpha)
            acc += trans[:, None] * bg
            image[y0:y1, x0:x1] = acc.reshape(y1 - y0, x1 - x0, 3)

    return RenderTarget(np.clip(image, 0.0, 1.0), bg, skipped_splats=int(bad.sum()))


# -- differentiable path -------------------------------------------------------

def quaternion_to_matrix_tensor(q: Tensor) -> Tensor:
    """Tape twin of quaternion_to_matrix; q is N x 4 unit wxyz."""
    w, x, y, z = (q[:, i:i + 1] for i in range(4))
    one = Tensor(np.ones(w.shape), dtype=q.dtype)
    entries = [
        one - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0,
        (x * y + w * z) * 2.0, one - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0,
        (x * z - w * y) * 2.0, (y * z + w * x) * 2.0, one - (x * x + y * y) * 2.0,
    ]
    return ad.reshape(ad.concat(entries, axis=1), (q.shape[0], 3, 3))


def _project_tape(gaussians: GaussianSet, camera: Camera, keep: np.ndarray):
    """Tape-side EWA projection of the retained splats."""
    dtype = gaussians.means.dtype
    mu = gaussians.means[keep]
    scale = gaussians.scale[keep]
    quat = gaussians.rotation[keep]

    w2c = Tensor(camera.pose.rotation.T, dtype=dtype)
    xc = ad.matmul(mu - Tensor(camera.pose.translation, dtype=dtype),
                   ad.transpose(w2c, (1, 0)))
    x, y, z = xc[:, 0:1], xc[:, 1:2], xc[:, 2:3]

    rot = quaternion_to_matrix_tensor(quat)
    s2 = ad.reshape(scale * scale, (scale.shape[0], 1, 3))
    sigma3 = ad.matmul(rot * s2, ad.transpose(rot, (0, 2, 1)))

    intr = camera.intrinsics
    zero = Tensor(np.zeros(x.shape), dtype=dtype)
    inv_z = z ** -1.0
    inv_z2 = inv_z * inv_z
    row0 = [inv_z * intr.fx, zero, x * inv_z2 * (-intr.fx)]
    row1 = [zero, inv_z * intr.fy, y * inv_z2 * (-intr.fy)]
    jac = ad.reshape(ad.concat(row0 + row1, axis=1), (x.shape[0], 2, 3))

    m = ad.matmul(jac, w2c)
    sigma2 = ad.matmul(ad.matmul(m, sigma3), ad.transpose(m, (0, 2, 1)))
    cov_a = sigma2[:, 0:1, 0] + COV_DILATION
    cov_b = sigma2[:, 0:1, 1]
    cov_c = sigma2[:, 1:2, 1] + COV_DILATION

    mean_x = x * inv_z * intr.fx + intr.cx
    mean_y = y * inv_z * intr.fy + intr.cy
    return mean_x, mean_y, cov_a, cov_b, cov_c, z


def rasterize_naive_diff(gaussians: GaussianSet, camera: Camera, frame: Frame,
                         near_clip: float = NEAR_CLIP) -> Tensor:
    """All-splats-per-pixel differentiable compositing, H x W x 3 on the tape.

    Same math as the fast path except: no tiling, no footprint or 1/255
    cutoffs, no early stop, and the 0.99 alpha clamp becomes a smooth min so
    the output stays differentiable. Intended for small frames.
    """
    h, w = frame.height, frame.width
    dtype = gaussians.means.dtype
    bg = np.asarray(frame.background, dtype=np.float64)

    depth_all = _camera_depths(gaussians, camera)
    keep = np.nonzero(depth_all > near_clip)[0]
    if keep.size == 0:
        return Tensor(np.tile(bg, (h, w, 1)), dtype=dtype)
    order = keep[np.lexsort((keep, depth_all[keep]))]

    mean_x, mean_y, cov_a, cov_b, cov_c, _ = _project_tape(gaussians, camera, order)
    opacity = ad.reshape(gaussians.opacity[order], (order.size, 1))
    colors = gaussians.color[order]

    det = cov_a * cov_c - cov_b * cov_b
    ia = cov_c / det
    ib = cov_b / det * -1.0
    ic = cov_a / det

    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    px = Tensor(uu.ravel()[None, :], dtype=dtype)
    py = Tensor(vv.ravel()[None, :], dtype=dtype)
    dx = mean_x - px
    dy = mean_y - py
    power = ad.clip((ia * dx * dx + (ib * dx * dy) * 2.0 + ic * dy * dy) * 0.5, lo=0.0)
    alpha = ad.smooth_min(opacity * ad.texp(-power), ALPHA_CLAMP,
                          SMOOTH_CLAMP_SHARPNESS)

    # footprint and 1/255 cutoffs as in the fast path, from detached values;
    # the boundaries are measure-zero so differentiability holds a.e.
    hard_alpha = np.minimum(ALPHA_CLAMP, opacity.data * np.exp(-power.data))
    mask = (power.data <= _POWER_LIMIT) & (hard_alpha >= ALPHA_CUTOFF)
    alpha = alpha * Tensor(mask.astype(np.float64), dtype=dtype)

    log_keep = ad.tlog(1.0 - alpha)
    trans = ad.texp(ad.cumsum(log_keep, axis=0, exclusive=True))
    weights = alpha * trans
    image_flat = ad.matmul(ad.transpose(weights, (1, 0)), colors)
    trans_rem = ad.texp(log_keep.sum(axis=0))
    image_flat = image_flat + ad.reshape(trans_rem, (h * w, 1)) * Tensor(bg, dtype=dtype)
    return ad.reshape(image_flat, (h, w, 3))


def _camera_depths(gaussians: GaussianSet, camera: Camera) -> np.ndarray:
    mu = np.asarray(gaussians.means.numpy(), dtype=np.float64)
    xc = (mu - camera.pose.translation) @ camera.pose.rotation
    return xc[:, 2]


def make_frame(width: int, height: int, background=None) -> Frame:
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    return Frame(width=width, height=height, background=bg)
