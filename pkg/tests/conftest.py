import numpy as np

from viewsplat.cameras import Camera, Intrinsics, Pose


def random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1.0
    return q


def random_pose(rng, radius: float = 3.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-radius, radius, 3))


def random_camera(rng, width: int = 32, height: int = 32) -> Camera:
    intr = Intrinsics(
        fx=rng.uniform(0.6, 1.5) * width,
        fy=rng.uniform(0.6, 1.5) * height,
        cx=rng.uniform(0.3, 0.7) * width,
        cy=rng.uniform(0.3, 0.7) * height,
        width=width,
        height=height,
    )
    return Camera(intr, random_pose(rng))
