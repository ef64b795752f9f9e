"""Self-contained verification suites behind the `check` CLI command.

Each check returns (name, passed, detail). These are quick spot versions of
the full pytest suite, runnable from an installed package without test files.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import (
    Camera,
    Intrinsics,
    Pose,
    lookat_pose,
    normalize_poses,
    plucker_rays,
)
from .costs import cross_attn_flops, parameter_count, scheme_score_cost
from .decoder import GaussianSet
from .gradcheck import max_gradient_error
from .model import (
    AttentionWeights,
    Model,
    ModelConfig,
    cross_attention_uplifted,
    select_minibatch,
    self_attention_viewpoints,
)
from .renderer import make_frame, project, rasterize_naive_diff, rasterize_tiled, render_oracle
from . import sceneio


def _random_camera(rng, wh=16):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    intr = Intrinsics(1.1 * wh, 1.1 * wh, wh / 2, wh / 2, wh, wh)
    return Camera(intr, Pose(q, rng.uniform(-2, 2, 3)))


def check_flops(seed):
    ok = (
        cross_attn_flops(768, 256, 1024) == 3_825_205_248
        and cross_attn_flops(768, 128, 512) == 1_711_276_032
        and cross_attn_flops(768, 64, 256) == 805_306_368
    )
    return ok, ""


def check_scheme_ratios(seed):
    ratios = scheme_score_cost(16, 256, 256, 8, 0.5).ratios()
    return ratios == (1.0, 1.0, 0.25, 0.078125), f"got {ratios}"


def check_parameter_formula(seed):
    cfg = ModelConfig(layers=2, dim=32, heads=4, patch=4)
    built = Model.create(cfg, seed=seed).num_parameters()
    formula = parameter_count(cfg)
    return built == formula, f"formula {formula} vs built {built}"


def check_core_op_gradients(seed):
    rng = np.random.default_rng(seed)
    cases = [
        ("matmul", lambda a, b: ad.matmul(a, b).sum(),
         [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        ("layer_norm", lambda x, s: (ad.layer_norm(x, s) ** 2.0).sum(),
         [rng.standard_normal((3, 6)), rng.standard_normal(6)]),
        ("softmax", lambda x: (ad.softmax(x) ** 2.0).sum(), [rng.standard_normal((3, 5))]),
        ("gelu", lambda x: ad.gelu(x).sum(), [rng.standard_normal((4, 4))]),
        ("rms_norm", lambda x, s: (ad.rms_norm(x, s) ** 2.0).sum(),
         [rng.standard_normal((3, 6)), rng.standard_normal(6)]),
    ]
    worst = 0.0
    for _, fn, arrays in cases:
        worst = max(worst, max_gradient_error(fn, arrays))
    return worst <= 1e-6, f"worst rel err {worst:.2e}"


def check_update_block_gradient(seed):
    rng = np.random.default_rng(seed + 1)
    d, heads = 8, 2
    v0 = rng.standard_normal((2, d))
    s0 = rng.standard_normal((6, d))
    wc = AttentionWeights.create(d, d // heads, 2, 2, rng, np.float64)
    ws = AttentionWeights.create(d, d // heads, 1, 2, rng, np.float64)

    def fn(wq, wk):
        wc.wq, wc.wk = wq, wk
        h = cross_attention_uplifted(Tensor(v0, dtype=np.float64),
                                     Tensor(s0, dtype=np.float64), wc, heads)
        h = self_attention_viewpoints(h, ws, heads)
        return (h * h).sum()

    err = max_gradient_error(fn, [wc.wq.numpy().copy(), wc.wk.numpy().copy()])
    return err <= 1e-4, f"rel err {err:.2e}"


def check_renderer_gradient(seed):
    rng = np.random.default_rng(seed + 2)
    quat = rng.standard_normal((3, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    fixed = dict(
        means=rng.uniform(-0.5, 0.5, (3, 3)),
        scale=rng.uniform(0.1, 0.3, (3, 3)),
        rotation=quat,
        color=rng.uniform(0, 1, (3, 3)),
    )
    cam = Camera(Intrinsics(7, 7, 3, 3, 6, 6), lookat_pose((0, 0, -3.4)))
    frame = make_frame(6, 6)

    def fn(op):
        g = GaussianSet(
            means=Tensor(fixed["means"], dtype=np.float64), opacity=op,
            scale=Tensor(fixed["scale"], dtype=np.float64),
            rotation=Tensor(fixed["rotation"], dtype=np.float64),
            color=Tensor(fixed["color"], dtype=np.float64),
        )
        return rasterize_naive_diff(g, cam, frame).mean()

    err = max_gradient_error(fn, [rng.uniform(0.3, 0.7, 3)])
    return err <= 1e-4, f"rel err {err:.2e}"


def check_plucker_invariants(seed):
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for _ in range(10):
        rays = plucker_rays(_random_camera(rng), 12, 12)
        worst = max(worst, rays.max_invariant_violation())
    return worst <= 1e-6, f"worst violation {worst:.2e}"


def check_pose_normalization(seed):
    rng = np.random.default_rng(seed + 4)
    poses = []
    for t in rng.uniform(-3, 3, (5, 3)):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        poses.append(Pose(q, t))
    out, _ = normalize_poses(poses)
    max_dist = max(np.linalg.norm(p.translation) for p in out)
    twice, norm2 = normalize_poses(out)
    idem = max(np.abs(a.translation - b.translation).max() for a, b in zip(out, twice))
    ok = abs(max_dist - 1.0) <= 1e-6 and idem <= 1e-6 and abs(norm2.scale - 1.0) <= 1e-6
    return ok, f"max dist {max_dist:.8f}, idempotence dev {idem:.2e}"


def check_minibatch_coverage(seed):
    for scheme, blocks in (("half", 2), ("quarter", 4)):
        seen_v, seen_i = set(), set()
        for layer in range(blocks):
            sv, si = select_minibatch(256, 1024, scheme, layer)
            seen_v |= set(sv)
            seen_i |= set(si)
        if seen_v != set(range(256)) or seen_i != set(range(1024)):
            return False, f"{scheme} does not cover all tokens"
    return True, ""


def check_tiled_vs_oracle(seed):
    rng = np.random.default_rng(seed + 5)
    worst = 0.0
    for _ in range(3):
        g = sceneio.random_gaussian_set(rng, 80)
        cam = Camera(Intrinsics(20, 20, 10, 10, 20, 20), lookat_pose((0, 0.2, -2.8)))
        splats = project(g, cam)
        frame = make_frame(20, 20, background=rng.uniform(0, 1, 3))
        a = rasterize_tiled(splats, frame)
        b = render_oracle(splats, frame)
        worst = max(worst, float(np.abs(a.image - b.image).max()))
    return worst <= 1e-5, f"max deviation {worst:.2e}"


def check_checkpoint_round_trip(seed):
    model = Model.create(ModelConfig(layers=1, dim=16, heads=2, patch=4), seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        p1 = Path(tmp) / "a.ckpt"
        p2 = Path(tmp) / "b.ckpt"
        sceneio.save_checkpoint(p1, model)
        sceneio.save_checkpoint(p2, sceneio.load_checkpoint(p1))
        ok = p1.read_bytes() == p2.read_bytes()
    return ok, ""


def check_splat_round_trip(seed):
    rng = np.random.default_rng(seed + 6)
    g = sceneio.random_gaussian_set(rng, 40)
    with tempfile.TemporaryDirectory() as tmp:
        p1 = Path(tmp) / "a.ply"
        p2 = Path(tmp) / "b.ply"
        sceneio.save_splats(p1, g)
        sceneio.save_splats(p2, sceneio.load_splats(p1))
        ok = p1.read_bytes() == p2.read_bytes()
    return ok, ""


CHECKS = [
    ("flops formula exact values", check_flops),
    ("attention scheme ratios", check_scheme_ratios),
    ("parameter count formula vs model", check_parameter_formula),
    ("core op gradients vs finite differences", check_core_op_gradients),
    ("update block gradient", check_update_block_gradient),
    ("renderer opacity gradient", check_renderer_gradient),
    ("plucker ray invariants", check_plucker_invariants),
    ("pose normalization", check_pose_normalization),
    ("minibatch coverage", check_minibatch_coverage),
    ("tiled rasterizer vs oracle", check_tiled_vs_oracle),
    ("checkpoint byte round trip", check_checkpoint_round_trip),
    ("splat file byte round trip", check_splat_round_trip),
]


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append((name, ok, detail))
    return results
