"""Distribution-aware parameter selection.

Pipeline for one frame:

1. ``stochastic_prob_stack`` draws m probability maps from the teacher, either
   by head dropout or by resizing the input.
2. ``uncertainty_map`` tracks, per pixel, the probability of the class that
   wins the mean prediction and takes its population std across the m maps.
3. ``partition_pixels`` splits pixels into a high-uncertainty group and a
   low-uncertainty group.
4. ``sensitivity_scores`` backpropagates the consistency loss restricted to one
   group and returns |gradient| per scalar.
5. ``select_top_fraction`` keeps the highest scores, and ``pau_update`` folds
   them into the accumulated masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import segnet
from .errors import ConfigError
from .losses import consistency_loss
from .segnet import Model

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)

# Guards floor(rho * P) against 0.001 * 135000 evaluating to 134.99999...
_FLOOR_SLACK = 1e-9


def budget_count(fraction: float, total: int) -> int:
    return int(math.floor(fraction * total + _FLOOR_SLACK))


@dataclass(frozen=True)
class UncertaintyConfig:
    m: int = 5
    source: str = "mc_dropout"
    scales: tuple[float, ...] = DEFAULT_SCALES

    def validate(self) -> "UncertaintyConfig":
        if self.m < 2:
            raise ConfigError(f"uncertainty.m must be >= 2, got {self.m}")
        if self.source not in ("mc_dropout", "multi_scale_augment"):
            raise ConfigError(f"uncertainty.source must be mc_dropout or multi_scale_augment, got {self.source!r}")
        if self.source == "multi_scale_augment" and not self.scales:
            raise ConfigError("uncertainty.scales must be non-empty for multi_scale_augment")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"uncertainty.scales must be positive, got {self.scales}")
        return self


@dataclass(frozen=True)
class PartitionConfig:
    theta_h: float = 0.99
    theta_l: float = 0.78
    mode: str = "quantile"

    def validate(self) -> "PartitionConfig":
        if not 0.0 <= self.theta_l <= self.theta_h <= 1.0:
            raise ConfigError(
                f"partition thresholds need 0 <= theta_l <= theta_h <= 1, got {self.theta_l}, {self.theta_h}")
        if self.mode not in ("quantile", "raw", "confidence"):
            raise ConfigError(f"partition.mode must be quantile, raw or confidence, got {self.mode!r}")
        return self


@dataclass(frozen=True)
class PauConfig:
    rho: float = 0.001
    accumulation_frames: int = 100
    global_budget_cap: float = 0.10
    groups_enabled: str = "both"
    budget_mode: str = "per_group"

    def validate(self) -> "PauConfig":
        if not 0.0 <= self.rho <= self.global_budget_cap <= 1.0:
            raise ConfigError(
                f"pau needs 0 <= rho <= global_budget_cap <= 1, got {self.rho}, {self.global_budget_cap}")
        if self.accumulation_frames < 1:
            raise ConfigError(f"pau.accumulation_frames must be >= 1, got {self.accumulation_frames}")
        if self.groups_enabled not in ("none", "dsp", "trp", "both"):
            raise ConfigError(f"pau.groups_enabled must be none, dsp, trp or both, got {self.groups_enabled!r}")
        if self.budget_mode not in ("per_group", "total"):
            raise ConfigError(f"pau.budget_mode must be per_group or total, got {self.budget_mode!r}")
        return self

    @property
    def dsp_enabled(self) -> bool:
        return self.groups_enabled in ("dsp", "both")

    @property
    def trp_enabled(self) -> bool:
        return self.groups_enabled in ("trp", "both")

    def group_rho(self) -> float:
        """Per-frame selection fraction for each enabled group."""
        if self.budget_mode == "total" and self.groups_enabled == "both":
            return self.rho / 2
        return self.rho


@dataclass
class UncertaintyMap:
    values: np.ndarray           # H x W, population std of the tracked probability
    reference_class: np.ndarray  # H x W, argmax of the mean prediction
    confidence: np.ndarray       # H x W, mean probability of the reference class


@dataclass
class PixelPartition:
    g_h: np.ndarray
    g_l: np.ndarray


def _empty_mask() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


@dataclass
class MaskState:
    dsp: np.ndarray = field(default_factory=_empty_mask)
    trp: np.ndarray = field(default_factory=_empty_mask)
    frames_in_domain: int = 0
    accumulating: bool = True

    def active(self) -> np.ndarray:
        return np.union1d(self.dsp, self.trp)

    def copy(self) -> "MaskState":
        return MaskState(self.dsp.copy(), self.trp.copy(), self.frames_in_domain, self.accumulating)


def scaled_size(n: int, scale: float, multiple: int) -> int:
    return max(multiple, int(round(n * scale / multiple)) * multiple)


def _pass_seed(seed, i: int):
    key = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return (*key, i)


def stochastic_prob_stack(teacher: Model, image: np.ndarray, cfg: UncertaintyConfig, seed=0,
                          feats: nx.Tensor | None = None) -> np.ndarray:
    """``m x C x H x W`` stack of teacher probability maps.

    Pass ``i`` uses dropout stream ``(*seed, i)`` in mc_dropout mode, or scale
    ``scales[i % len(scales)]`` in multi_scale_augment mode. Head-only dropout
    means the backbone features can be computed once and passed in as ``feats``.
    """
    cfg.validate()
    image = np.asarray(image, dtype=teacher.params.dtype)
    _, H, W = image.shape
    maps = []
    if cfg.source == "mc_dropout":
        if feats is None:
            feats = segnet.features(teacher, image)
        for i in range(cfg.m):
            logits = segnet.head(teacher, feats, dropout_seed=_pass_seed(seed, i))
            maps.append(nx.softmax_over_channels(logits).data)
    else:
        step = 2 ** teacher.cfg.depth
        for i in range(cfg.m):
            s = cfg.scales[i % len(cfg.scales)]
            h, w = scaled_size(H, s, step), scaled_size(W, s, step)
            x = nx.bilinear_resize(nx.Tensor(image), h, w) if (h, w) != (H, W) else image
            probs = nx.softmax_over_channels(segnet.forward(teacher, x))
            maps.append(nx.bilinear_resize(probs, H, W).data if (h, w) != (H, W) else probs.data)
    return np.stack(maps)


def uncertainty_map(stack: np.ndarray) -> UncertaintyMap:
    if stack.ndim != 4 or stack.shape[0] < 2:
        raise ConfigError(f"uncertainty_map needs an m x C x H x W stack with m >= 2, got {stack.shape}")
    s = stack.astype(np.float64)
    mu = s.mean(axis=0)
    ref = mu.argmax(axis=0)
    tracked = np.take_along_axis(s, np.broadcast_to(ref, (s.shape[0], 1, *ref.shape)), axis=1)[:, 0]
    mu_ref = np.take_along_axis(mu, ref[None], axis=0)[0]
    values = np.sqrt(((tracked - mu_ref) ** 2).mean(axis=0))
    return UncertaintyMap(values.astype(np.float32), ref.astype(np.int64), mu_ref.astype(np.float32))


def _quantile_split(score: np.ndarray, cfg: PartitionConfig) -> PixelPartition:
    flat = score.astype(np.float64).ravel()
    q_h = np.quantile(flat, cfg.theta_h)
    q_l = np.quantile(flat, cfg.theta_l)
    return PixelPartition(g_h=score > q_h, g_l=score < q_l)


def partition_pixels(umap: UncertaintyMap, cfg: PartitionConfig) -> PixelPartition:
    """High/low distribution-shift pixel groups.

    quantile: above the theta_h quantile of this image's uncertainties / strictly
    below the theta_l quantile. raw: U >= theta_h / U < theta_l. confidence:
    the quantile rule applied to (1 - mean max-probability) instead of U.
    Pixels between the cutoffs belong to neither group.
    """
    cfg.validate()
    if cfg.mode == "raw":
        u = umap.values
        return PixelPartition(g_h=u >= cfg.theta_h, g_l=u < cfg.theta_l)
    if cfg.mode == "confidence":
        return _quantile_split(1.0 - umap.confidence.astype(np.float64), cfg)
    return _quantile_split(umap.values, cfg)


def sensitivity_scores(student: Model, image: np.ndarray, pseudo_label: np.ndarray,
                       pixel_mask: np.ndarray) -> np.ndarray:
    """|d L_masked / d theta| for every scalar; all zeros for an empty mask."""
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if not pixel_mask.any():
        return np.zeros_like(student.params)
    with nx.Graph() as g:
        probs = nx.softmax_over_channels(segnet.forward(student, image))
        loss = consistency_loss(probs, pseudo_label, pixel_mask)
    return np.abs(student.flat_grad(nx.backward(g, loss)))


def select_top_fraction(scores: np.ndarray, rho: float, exclude: np.ndarray | None = None,
                        count: int | None = None) -> np.ndarray:
    """Indices of the floor(rho * P) largest scores outside ``exclude``.

    Ties go to the lower index. The result is ordered by descending score
    (then ascending index), which ``pau_update`` uses as drop priority.
    ``count`` overrides the rho-derived budget.
    """
    P = scores.shape[0]
    k = budget_count(rho, P) if count is None else int(count)
    cand = scores.astype(np.float64)
    if exclude is not None and len(exclude):
        cand = cand.copy()
        ex = np.unique(np.asarray(exclude, dtype=np.int64))
        cand[ex] = -np.inf
        k = min(k, P - ex.size)
    k = min(k, P)
    if k <= 0:
        return _empty_mask()
    kth = np.partition(cand, P - k)[P - k]
    above = np.flatnonzero(cand > kth)
    ties = np.flatnonzero(cand == kth)[: k - above.size]
    sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -cand[sel]))].astype(np.int64)


def _priority(indices: np.ndarray, scores: np.ndarray | None) -> np.ndarray:
    if scores is None:
        # Caller ordering: earlier entries rank higher.
        return -np.arange(indices.size, dtype=np.float64)
    return scores[indices].astype(np.float64)


def resolve_overlap(dsp_new: np.ndarray, trp_new: np.ndarray, dsp_scores=None, trp_scores=None):
    """Give an index picked for both groups to the group that scored it higher (ties to DSP)."""
    both = np.intersect1d(dsp_new, trp_new)
    if both.size == 0:
        return dsp_new, trp_new
    d = dsp_scores[both] if dsp_scores is not None else np.zeros(both.size)
    t = trp_scores[both] if trp_scores is not None else np.zeros(both.size)
    to_trp = both[t > d]
    to_dsp = both[t <= d]
    return dsp_new[~np.isin(dsp_new, to_trp)], trp_new[~np.isin(trp_new, to_dsp)]


def pau_update(state: MaskState, dsp_new: np.ndarray, trp_new: np.ndarray, cfg: PauConfig,
               num_params: int, dsp_scores: np.ndarray | None = None,
               trp_scores: np.ndarray | None = None) -> MaskState:
    """Fold this frame's picks into the accumulated masks.

    The caller increments ``frames_in_domain`` first. Frames past the
    accumulation window return the state unchanged. When the union would
    exceed the global cap, the lowest-priority fresh indices are dropped.
    """
    if state.frames_in_domain > cfg.accumulation_frames:
        return replace(state, accumulating=False)
    dsp_new = np.asarray(dsp_new, dtype=np.int64)
    trp_new = np.asarray(trp_new, dtype=np.int64)
    dsp_new, trp_new = resolve_overlap(dsp_new, trp_new, dsp_scores, trp_scores)

    union = state.active()
    room = budget_count(cfg.global_budget_cap, num_params) - union.size
    fresh_d = ~np.isin(dsp_new, union)
    fresh_t = ~np.isin(trp_new, union)
    n_fresh = np.union1d(dsp_new[fresh_d], trp_new[fresh_t]).size
    if n_fresh > max(room, 0):
        idx = np.concatenate([dsp_new[fresh_d], trp_new[fresh_t]])
        prio = np.concatenate([_priority(dsp_new, dsp_scores)[fresh_d], _priority(trp_new, trp_scores)[fresh_t]])
        group = np.concatenate([np.zeros(fresh_d.sum()), np.ones(fresh_t.sum())])
        order = np.lexsort((group, idx, -prio))
        keep = set(idx[order][: max(room, 0)].tolist())
        dsp_new = dsp_new[~fresh_d | np.isin(dsp_new, list(keep))]
        trp_new = trp_new[~fresh_t | np.isin(trp_new, list(keep))]

    return MaskState(
        dsp=np.union1d(state.dsp, dsp_new).astype(np.int64),
        trp=np.union1d(state.trp, trp_new).astype(np.int64),
        frames_in_domain=state.frames_in_domain,
        accumulating=state.frames_in_domain < cfg.accumulation_frames,
    )


def reset_masks(state: MaskState | None = None) -> MaskState:
    """Fresh accumulation at a domain boundary. Model parameters are not touched."""
    return MaskState()
