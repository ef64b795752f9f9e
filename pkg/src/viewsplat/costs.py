"""Closed-form FLOPs, parameter, Gaussian-count and memory estimates.

All counts are exact integers. The attention-scheme comparison counts
query x key score multiply-accumulates only; that counting rule is the one
that reproduces the published 1 : 1 : 0.25 : 0.08 scaling ratio, so it is
the contract here.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .errors import ValidationError
from .model import (
    GAUSSIAN_CHANNELS,
    MINIBATCH_BLOCKS,
    ModelConfig,
    VIEWPOINT_DIVISORS,
)


def cross_attn_flops(d: int, lv: int, li: int) -> int:
    """FLOPs of one per-view cross-attention: 4 d^2 (lv + li) + 4 lv li d.

    Covers the q/k/v/out projections plus the two score/value products;
    token uplifting is excluded (it adds a constant across schemes).
    """
    if min(d, lv, li) <= 0:
        raise ValidationError("cross_attn_flops needs positive dimensions")
    return 4 * d * d * (lv + li) + 4 * lv * li * d


def self_attn_flops(d: int, tokens: int) -> int:
    """Same accounting applied to self-attention over `tokens` tokens."""
    return cross_attn_flops(d, tokens, tokens)


def gaussian_count(n_views: int, hv: int, wv: int) -> int:
    """One Gaussian per viewpoint-grid pixel per view."""
    if min(n_views, hv, wv) <= 0:
        raise ValidationError("gaussian_count needs positive dimensions")
    return n_views * hv * wv


@dataclass(frozen=True)
class SchemeScores:
    """Attention-score products (query x key pairs) of the four topologies.

    full       - one joint attention over all image tokens of all views
    decoupled  - full-resolution viewpoint tokens attend to all image tokens
    group      - reduced viewpoint tokens jointly attend to all image tokens
    two_stage  - per-view cross-attention plus viewpoint self-attention
    """

    full: int
    decoupled: int
    group: int
    two_stage_cross: int
    two_stage_self: int

    @property
    def two_stage(self) -> int:
        return self.two_stage_cross + self.two_stage_self

    def ratios(self) -> tuple[float, float, float, float]:
        a = self.full
        return (1.0, self.decoupled / a, self.group / a, self.two_stage / a)


def scheme_score_cost(n_views: int, height: int, width: int, p: int,
                      viewpoint_scale: float = 0.5) -> SchemeScores:
    """Score-product counts for the four multi-view attention schemes."""
    hv = height * viewpoint_scale
    wv = width * viewpoint_scale
    if hv != int(hv) or wv != int(wv) or int(hv) % p or int(wv) % p:
        raise ValidationError(
            f"viewpoint grid {hv}x{wv} must be integer and divisible by p={p}"
        )
    if height % p or width % p:
        raise ValidationError(f"image {height}x{width} not divisible by p={p}")
    li = (height // p) * (width // p)
    lv = (int(hv) // p) * (int(wv) // p)
    n_img = n_views * li
    n_view = n_views * lv
    return SchemeScores(
        full=n_img * n_img,
        decoupled=(n_views * li) * n_img,  # full-res viewpoint tokens: lv == li
        group=n_view * n_img,
        two_stage_cross=n_views * lv * li,
        two_stage_self=n_view * n_view,
    )


def parameter_count(cfg: ModelConfig) -> int:
    """Exact learnable-parameter total of a model built from `cfg`."""
    d = cfg.dim
    p = cfg.patch
    k = cfg.k
    dk = d * k
    hd = cfg.head_dim
    r = cfg.mlp_ratio

    tokenizer = 6 * p * p * d + 9 * p * p * d + 2 * d
    attn_norms = d + 2 * hd + d          # pre-LN, q/k RMS scales, MLP pre-LN
    mlp = 2 * r * d * d
    cross = d * dk + 2 * d * d + dk * d + mlp + attn_norms
    self_attn = 4 * d * d + mlp + attn_norms
    head = d * GAUSSIAN_CHANNELS * p * p
    return tokenizer + cfg.layers * (cross + self_attn) + head


def activation_memory_bytes(cfg: ModelConfig, n_views: int, height: int,
                            width: int) -> int:
    """f32 bytes of one forward pass's activations, no checkpointing.

    Counts tokens, every attention/MLP intermediate per layer, and the
    decoded channel grid. Informational only.
    """
    d = cfg.dim
    p = cfg.patch
    k = cfg.k
    hv, wv = cfg.viewpoint_size(height, width)
    lv = hv * wv // (p * p)
    li = height * width // (p * p)
    n = n_views

    tokens = n * (lv + li) * d
    cross_per_view = (
        lv * d            # pre-LN
        + lv * k * d      # uplifted queries
        + 2 * li * d      # keys, values
        + cfg.heads * lv * k * li  # attention probabilities
        + lv * k * d      # attention output
        + lv * d          # output projection
        + lv * d + lv * cfg.mlp_ratio * d + lv * d  # MLP pre-LN, hidden, out
    )
    t = n * lv
    self_total = (
        t * d + 3 * t * d
        + cfg.heads * t * t
        + t * d + t * d
        + t * d + t * cfg.mlp_ratio * d + t * d
    )
    decoder = n * hv * wv * GAUSSIAN_CHANNELS
    total = tokens + cfg.layers * (n * cross_per_view + self_total) + decoder
    return 4 * total


@dataclass
class CostReport:
    """Analytical cost summary for one configuration and view setup."""

    config: dict
    n_views: int
    image_height: int
    image_width: int
    viewpoint_height: int
    viewpoint_width: int
    cross_flops_per_view: int
    cross_flops_per_view_minibatch: int
    self_flops_per_layer: int
    flops_per_layer: int
    total_flops: int
    scheme_scores: SchemeScores
    parameter_total: int
    gaussian_total: int
    activation_bytes: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme_ratios"] = list(self.scheme_scores.ratios())
        return d


def cost_report(cfg: ModelConfig, n_views: int, height: int, width: int) -> CostReport:
    """Assemble the full analytical report for `n_views` images at H x W."""
    p = cfg.patch
    if height % p or width % p:
        raise ValidationError(f"image {height}x{width} not divisible by p={p}")
    hv, wv = cfg.viewpoint_size(height, width)
    if hv % p or wv % p:
        raise ValidationError(f"viewpoint grid {hv}x{wv} not divisible by p={p}")
    lv = hv * wv // (p * p)
    li = height * width // (p * p)

    blocks = MINIBATCH_BLOCKS[cfg.minibatch]
    cross_full = cross_attn_flops(cfg.dim, lv, li)
    cross_mb = cross_attn_flops(cfg.dim, -(-lv // blocks), -(-li // blocks))
    self_flops = self_attn_flops(cfg.dim, n_views * lv) if cfg.use_self_attention else 0
    per_layer = n_views * cross_mb + self_flops

    scale = 1.0 / VIEWPOINT_DIVISORS[cfg.viewpoint_res]
    return CostReport(
        config=cfg.__dict__.copy(),
        n_views=n_views,
        image_height=height,
        image_width=width,
        viewpoint_height=hv,
        viewpoint_width=wv,
        cross_flops_per_view=cross_full,
        cross_flops_per_view_minibatch=cross_mb,
        self_flops_per_layer=self_flops,
        flops_per_layer=per_layer,
        total_flops=cfg.layers * per_layer,
        scheme_scores=scheme_score_cost(n_views, height, width, p, scale),
        parameter_total=parameter_count(cfg),
        gaussian_total=gaussian_count(n_views, hv, wv),
        activation_bytes=activation_memory_bytes(cfg, n_views, height, width),
    )
