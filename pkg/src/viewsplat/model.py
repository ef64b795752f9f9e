"""Iterative refinement core: stacked cross/self attention update layers.

Each update layer runs a per-view cross-attention sublayer (viewpoint tokens
query image tokens, optionally through token uplifting and mini-batch token
subsets) followed by a self-attention sublayer across all views' viewpoint
tokens. Pre-LN residual blocks throughout, QK-RMSNorm per head, no biases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Camera, plucker_rays
from .errors import ConfigError, ValidationError
from .tokenizer import (
    TokenizerWeights,
    ViewpointTokens,
    WEIGHT_INIT_STD,
    tokenize_image,
    tokenize_viewpoint,
)

GAUSSIAN_CHANNELS = 16

VIEWPOINT_DIVISORS = {"F": 1, "H": 2, "Q": 4}

MINIBATCH_BLOCKS = {"full": 1, "half": 2, "quarter": 4, "random": 2}


@dataclass
class ModelConfig:
    layers: int = 12
    dim: int = 768
    heads: int = 12
    patch: int = 8
    uplift_factor: int = 2
    mlp_ratio: int = 4
    minibatch: str = "full"
    viewpoint_res: str = "H"
    use_uplift: bool = True
    use_self_attention: bool = True
    use_group_attention: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.uplift_factor < 1:
            raise ConfigError(f"uplift factor must be >= 1, got {self.uplift_factor}")
        if self.minibatch not in MINIBATCH_BLOCKS:
            raise ConfigError(f"unknown minibatch scheme {self.minibatch!r}")
        if self.viewpoint_res not in VIEWPOINT_DIVISORS:
            raise ConfigError(f"viewpoint resolution must be F, H or Q, got {self.viewpoint_res!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def k(self) -> int:
        return self.uplift_factor if self.use_uplift else 1

    def viewpoint_size(self, h: int, w: int) -> tuple[int, int]:
        div = VIEWPOINT_DIVISORS[self.viewpoint_res]
        return h // div, w // div

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class AttentionWeights:
    """One pre-LN attention sublayer plus its MLP (all linear, no bias)."""

    ln: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wout: Tensor
    q_norm: Tensor
    k_norm: Tensor
    mlp_ln: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor

    @staticmethod
    def create(d: int, head_dim: int, k: int, mlp_ratio: int,
               rng: np.random.Generator, dtype=np.float32) -> "AttentionWeights":
        def w(rows, cols):
            return Tensor(rng.normal(0.0, WEIGHT_INIT_STD, (rows, cols)),
                          requires_grad=True, dtype=dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True, dtype=dtype)

        return AttentionWeights(
            ln=ones(d),
            wq=w(d, d * k),
            wk=w(d, d),
            wv=w(d, d),
            wout=w(d * k, d),
            q_norm=ones(head_dim),
            k_norm=ones(head_dim),
            mlp_ln=ones(d),
            mlp_w1=w(d, mlp_ratio * d),
            mlp_w2=w(mlp_ratio * d, d),
        )

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.ln": self.ln,
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wout": self.wout,
            f"{prefix}.q_norm": self.q_norm,
            f"{prefix}.k_norm": self.k_norm,
            f"{prefix}.mlp_ln": self.mlp_ln,
            f"{prefix}.mlp_w1": self.mlp_w1,
            f"{prefix}.mlp_w2": self.mlp_w2,
        }


@dataclass
class UpdateLayerWeights:
    cross: AttentionWeights
    self_attn: AttentionWeights

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            **self.cross.parameters(f"{prefix}.cross"),
            **self.self_attn.parameters(f"{prefix}.self"),
        }


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, hd = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, heads * hd))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int,
            q_norm: Tensor, k_norm: Tensor) -> Tensor:
    """Multi-head scaled dot-product attention with per-head QK-RMSNorm."""
    hd = q.shape[1] // heads
    qh = ad.rms_norm(_split_heads(q, heads), q_norm)
    kh = ad.rms_norm(_split_heads(k, heads), k_norm)
    vh = _split_heads(v, heads)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(hd))
    out = ad.matmul(ad.softmax(scores, axis=-1), vh)
    return _merge_heads(out)


def _mlp(x: Tensor, w: AttentionWeights) -> Tensor:
    h = ad.layer_norm(x, w.mlp_ln)
    return x + ad.matmul(ad.gelu(ad.matmul(h, w.mlp_w1)), w.mlp_w2)


def cross_attention_uplifted(v: Tensor, s: Tensor, w: AttentionWeights,
                             heads: int) -> Tensor:
    """One cross-attention sublayer: viewpoint tokens query image tokens.

    Queries are uplifted by the factor implied by wq's width (Lv x dk
    reshaped to Lv*k x d), attended against the image tokens, folded back to
    Lv x dk and projected to d. Only the viewpoint side is pre-normalized.
    """
    lv, d = v.shape
    k = w.wq.shape[1] // d
    if lv * k > s.shape[0]:
        raise ConfigError(
            f"uplifted query count {lv}*{k} exceeds image token count {s.shape[0]}"
        )
    h = ad.layer_norm(v, w.ln)
    q = ad.reshape(ad.matmul(h, w.wq), (lv * k, d))
    keys = ad.matmul(s, w.wk)
    vals = ad.matmul(s, w.wv)
    att = _attend(q, keys, vals, heads, w.q_norm, w.k_norm)
    att = ad.matmul(ad.reshape(att, (lv, d * k)), w.wout)
    return _mlp(v + att, w)


def self_attention_viewpoints(all_v: Tensor, w: AttentionWeights, heads: int) -> Tensor:
    """Full self-attention over the concatenated viewpoint tokens of all views."""
    h = ad.layer_norm(all_v, w.ln)
    q = ad.matmul(h, w.wq)
    keys = ad.matmul(h, w.wk)
    vals = ad.matmul(h, w.wv)
    att = ad.matmul(_attend(q, keys, vals, heads, w.q_norm, w.k_norm), w.wout)
    return _mlp(all_v + att, w)


def group_attention(all_v: Tensor, all_s: Tensor, w: AttentionWeights,
                    heads: int) -> Tensor:
    """Ablation: one joint cross-attention over all views' tokens at once."""
    return cross_attention_uplifted(all_v, all_s, w, heads)


def select_minibatch(lv: int, li: int, scheme: str, layer_index: int,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token subsets for the cross sublayer at one layer.

    Structured schemes take the interleaved residue class (layer_index mod
    blocks), so any `blocks` consecutive layers cover every index. Random
    draws the same fraction without replacement from the run's generator.
    """
    blocks = MINIBATCH_BLOCKS[scheme]
    if blocks == 1:
        return np.arange(lv), np.arange(li)
    if scheme == "random":
        if rng is None:
            raise ValidationError("random minibatch scheme needs a generator")
        sel_v = np.sort(rng.choice(lv, size=math.ceil(lv / blocks), replace=False))
        sel_i = np.sort(rng.choice(li, size=math.ceil(li / blocks), replace=False))
        return sel_v, sel_i
    b = layer_index % blocks
    return np.arange(b, lv, blocks), np.arange(b, li, blocks)


class Model:
    """All learnable state: tokenizer weights, update layers, decoder head."""

    def __init__(self, config: ModelConfig, tokenizer: TokenizerWeights,
                 layers: list[UpdateLayerWeights], head: Tensor):
        self.config = config
        self.tokenizer = tokenizer
        self.layers = layers
        self.head = head

    @staticmethod
    def create(config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        d, hd = config.dim, config.head_dim
        tok = TokenizerWeights.create(config.patch, d, rng, dtype=dtype)
        layers = [
            UpdateLayerWeights(
                cross=AttentionWeights.create(d, hd, config.k, config.mlp_ratio, rng, dtype),
                self_attn=AttentionWeights.create(d, hd, 1, config.mlp_ratio, rng, dtype),
            )
            for _ in range(config.layers)
        ]
        head = Tensor(
            rng.normal(0.0, WEIGHT_INIT_STD, (d, GAUSSIAN_CHANNELS * config.patch ** 2)),
            requires_grad=True, dtype=dtype,
        )
        return Model(config, tok, layers, head)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.tokenizer.parameters())
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"layers.{i}"))
        params["head"] = self.head
        return params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None


def forward(model: Model, cameras: list[Camera], images: list[np.ndarray],
            rng: np.random.Generator | None = None) -> list[ViewpointTokens]:
    """Tokenize all views and run the full update stack; returns V^(L) per view.

    `rng` is only consulted by the random minibatch scheme.
    """
    if len(cameras) != len(images):
        raise ValidationError(f"{len(cameras)} cameras but {len(images)} images")
    if not cameras:
        raise ValidationError("forward needs at least one view")
    cfg = model.config
    h, w = images[0].shape[:2]
    for img in images:
        if img.shape[:2] != (h, w):
            raise ValidationError("all views must share one image resolution")
    hv, wv = cfg.viewpoint_size(h, w)

    vt: list[ViewpointTokens] = []
    st: list[Tensor] = []
    for cam, img in zip(cameras, images):
        vt.append(tokenize_viewpoint(plucker_rays(cam, hv, wv), model.tokenizer))
        st.append(tokenize_image(img, plucker_rays(cam, h, w), model.tokenizer).tokens)

    lv = vt[0].count
    li = st[0].shape[0]
    if lv * cfg.k > li:
        raise ConfigError(
            f"uplifted viewpoint length {lv}*{cfg.k} exceeds image token length {li}"
        )

    n = len(cameras)
    tokens = [t.tokens for t in vt]
    for layer_index, layer in enumerate(model.layers):
        if cfg.use_group_attention:
            all_v = ad.concat(tokens, axis=0)
            all_s = ad.concat(st, axis=0)
            all_v = group_attention(all_v, all_s, layer.cross, cfg.heads)
            tokens = _split_views(all_v, n, lv)
        else:
            sel_v, sel_s = select_minibatch(lv, li, cfg.minibatch, layer_index, rng)
            full = len(sel_v) == lv
            for i in range(n):
                v_in = tokens[i] if full else tokens[i][sel_v]
                s_in = st[i] if full else st[i][sel_s]
                updated = cross_attention_uplifted(v_in, s_in, layer.cross, cfg.heads)
                tokens[i] = updated if full else ad.scatter_rows(tokens[i], sel_v, updated)
        if cfg.use_self_attention:
            all_v = self_attention_viewpoints(ad.concat(tokens, axis=0),
                                              layer.self_attn, cfg.heads)
            tokens = _split_views(all_v, n, lv)

    return [ViewpointTokens(t, hv, wv, cfg.patch) for t in tokens]


def _split_views(all_v: Tensor, n: int, lv: int) -> list[Tensor]:
    return [all_v[i * lv:(i + 1) * lv] for i in range(n)]
