"""Region-decoupled pre-training objective.

Each view's dense features are pooled per semantic region (masked pooling
after resizing the mask to feature resolution). Background/foreground
vectors feed a dissimilarity term (cos + 1, t1 views only), and per-region
projector/predictor embeddings feed a symmetric stop-gradient similarity
term across the two views of each temporal image. Empty regions drop their
terms and the denominators renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn_ops as ops
from . import tensor as tz
from .augment import ViewBundle
from .errors import AllRegionsInvalid, ConfigInvalid, NonBinaryMask, NonIntegerRatio
from .tensor import Tensor

BG, FG = 0, 1


@dataclass
class SemanticEmbeddings:
    """Per-region pooled vectors; index 0 background, 1 foreground.

    Invalid regions (no pixels at feature resolution) carry zero vectors and
    must be excluded from every loss term.
    """

    vectors: List[Tensor]
    valid: List[bool]


@dataclass
class LossBreakdown:
    l_sd: Tensor
    l_s: Tensor
    total: Tensor
    terms_used: Tuple[int, int]  # (dissimilarity terms, similarity terms)


@dataclass
class ObjectiveConfig:
    mode: str = "sdrl"  # "sdrl" or "global"
    t2_mask_policy: str = "use_m"  # "use_m" or "global_pool"
    use_stop_gradient: bool = True

    def validate(self) -> None:
        if self.mode not in ("sdrl", "global"):
            raise ConfigInvalid(f"objective mode must be sdrl or global, got {self.mode!r}")
        if self.t2_mask_policy not in ("use_m", "global_pool"):
            raise ConfigInvalid(f"t2_mask_policy must be use_m or global_pool, got {self.t2_mask_policy!r}")


def _check_binary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise NonBinaryMask(f"mask values must be 0/1, found {np.unique(m)[:8]}")
    return m.astype(np.uint8)


def resize_mask(mask: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Downsample a binary mask by block majority; exact halves go foreground."""
    m = _check_binary(mask)
    th, tw = int(target[0]), int(target[1])
    h, w = m.shape
    if th < 1 or tw < 1 or h % th or w % tw:
        raise NonIntegerRatio(f"mask {m.shape} does not reduce to {target} by an integer factor")
    bh, bw = h // th, w // tw
    counts = m.reshape(th, bh, tw, bw).sum(axis=(1, 3), dtype=np.int64)
    return (2 * counts >= bh * bw).astype(np.uint8)


def masked_pool(features: Tensor, mask: np.ndarray, k: int = 2) -> SemanticEmbeddings:
    """Mean-pool (C, H_f, W_f) features separately over background/foreground."""
    if k != 2:
        raise ConfigInvalid(f"only binary region pooling is supported, got k={k}")
    rm = resize_mask(mask, features.shape[-2:])
    fg = rm.astype(np.float32)
    bg = 1.0 - fg
    vectors = [ops.masked_mean(features, bg), ops.masked_mean(features, fg)]
    valid = [bool(bg.any()), bool(fg.any())]
    return SemanticEmbeddings(vectors=vectors, valid=valid)


def semantic_dissimilarity_loss(x_fg: Tensor, x_bg: Tensor) -> Tensor:
    """cos(x_fg, x_bg) + 1, in [0, 2]; 0 when the regions oppose."""
    return tz.add_scalar(tz.cosine_similarity(x_fg, x_bg), 1.0)


def cross_view_similarity_loss(p1: Tensor, z2: Tensor, p2: Tensor, z1: Tensor,
                               use_stop_gradient: bool = True) -> Tensor:
    """1 - (cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2, in [0, 2]."""
    if use_stop_gradient:
        z2 = tz.stop_gradient(z2)
        z1 = tz.stop_gradient(z1)
    c = tz.add(tz.cosine_similarity(p1, z2), tz.cosine_similarity(p2, z1))
    return tz.add_scalar(tz.scalar_mul(c, -0.5), 1.0)


GLOBAL_KEY = -1  # region key for whole-view pooling


def _mean_of(terms: List[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = tz.add(acc, t)
    return tz.scalar_mul(acc, 1.0 / len(terms))


def sample_loss(bundle: ViewBundle, model, cfg: Optional[ObjectiveConfig] = None,
                capture: Optional[dict] = None) -> LossBreakdown:
    """Loss for one sample; encodes all four views in a single forward.

    Raises AllRegionsInvalid when no cross-view term is computable. When a
    dict is passed as ``capture``, its "z" key receives the detached
    projection rows (diagnostics only, no graph retained).
    """
    cfg = cfg or ObjectiveConfig()
    cfg.validate()

    imgs = np.stack([
        np.ascontiguousarray(bundle.images[i][j].transpose(2, 0, 1))
        for i in range(2) for j in range(2)
    ])
    feats = model.encode(Tensor(imgs))  # (4, C, Hf, Wf)
    fsize = feats.shape[-2:]

    view_masks = [[resize_mask(bundle.masks[i][j], fsize) for j in range(2)] for i in range(2)]

    # region keys per temporal image
    if cfg.mode == "global":
        keys = [[GLOBAL_KEY], [GLOBAL_KEY]]
    elif cfg.t2_mask_policy == "global_pool":
        keys = [[BG, FG], [GLOBAL_KEY]]
    else:
        keys = [[BG, FG], [BG, FG]]

    region_rows: Dict[int, Tensor] = {}
    need_regions = any(k in (BG, FG) for ks in keys for k in ks)
    if need_regions:
        fg_stack = np.stack([view_masks[i][j].astype(np.float32) for i in range(2) for j in range(2)])
        region_rows[FG] = ops.masked_mean(feats, fg_stack)
        region_rows[BG] = ops.masked_mean(feats, 1.0 - fg_stack)
    if any(k == GLOBAL_KEY for ks in keys for k in ks):
        region_rows[GLOBAL_KEY] = ops.spatial_mean(feats)

    def region_valid(i: int, j: int, k: int) -> bool:
        if k == GLOBAL_KEY:
            return True
        want = 1 if k == FG else 0
        return bool((view_masks[i][j] == want).any())

    # dissimilarity terms: t1 views only, both regions valid (encoder-level vectors)
    sd_terms: List[Tensor] = []
    if cfg.mode == "sdrl":
        for j in range(2):
            if region_valid(0, j, FG) and region_valid(0, j, BG):
                x_fg = tz.take_row(region_rows[FG], j)
                x_bg = tz.take_row(region_rows[BG], j)
                sd_terms.append(semantic_dissimilarity_loss(x_fg, x_bg))

    # assemble the projector batch: rows in (temporal, view, region) order
    rows: List[Tensor] = []
    row_at: Dict[Tuple[int, int, int], int] = {}
    for i in range(2):
        for j in range(2):
            for k in keys[i]:
                if region_valid(i, j, k):
                    row_at[(i, j, k)] = len(rows)
                    rows.append(tz.take_row(region_rows[k], 2 * i + j))

    sim_pairs = [(i, k) for i in range(2) for k in keys[i]
                 if (i, 0, k) in row_at and (i, 1, k) in row_at]
    if not sim_pairs:
        raise AllRegionsInvalid("no cross-view similarity term computable for this sample")

    z = model.project(tz.stack(rows))
    p = model.predict(z)
    if capture is not None:
        capture["z"] = z.data.copy()

    sim_terms: List[Tensor] = []
    for i, k in sim_pairs:
        a, b = row_at[(i, 0, k)], row_at[(i, 1, k)]
        sim_terms.append(cross_view_similarity_loss(
            tz.take_row(p, a), tz.take_row(z, b),
            tz.take_row(p, b), tz.take_row(z, a),
            use_stop_gradient=cfg.use_stop_gradient,
        ))

    l_s = _mean_of(sim_terms)
    l_sd = _mean_of(sd_terms) if sd_terms else Tensor(0.0)
    total = tz.add(l_sd, l_s)
    return LossBreakdown(l_sd=l_sd, l_s=l_s, total=total, terms_used=(len(sd_terms), len(sim_terms)))
