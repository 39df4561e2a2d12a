"""Continual test-time adaptation loop and its baselines.

``adapt_step`` runs one frame of distribution-aware tuning on a mean-teacher
pair; ``baseline_step`` runs one frame of a comparison method (frozen source,
full-model self-training, or entropy minimisation on the norm affines).
Every method reports the multi-scale prediction of its evaluation model,
computed before that frame's update.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import segnet
from .core import (
    DEFAULT_SCALES,
    MaskState,
    PartitionConfig,
    PauConfig,
    UncertaintyConfig,
    budget_count,
    partition_pixels,
    pau_update,
    reset_masks,
    scaled_size,
    select_top_fraction,
    stochastic_prob_stack,
    uncertainty_map,
)
from .errors import ConfigError, ContractError, NonFiniteError
from .losses import EMPTY_MASK, consistency_loss, entropy_loss
from .numerics import AdamState, adam_step
from .seeding import PURPOSES, STREAM_TARGET
from .segnet import Model, check_same_layout, clone_model

log = logging.getLogger(__name__)

METHODS = ("dat", "source", "full_ft", "norm_only")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "dat"
    alpha: float = 0.999
    ema_scope: str = "selected_only"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pseudo_label_scales: tuple[float, ...] = DEFAULT_SCALES

    def validate(self) -> "AdaptConfig":
        if self.method not in METHODS:
            raise ConfigError(f"adapt.method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"adapt.alpha must lie in [0, 1], got {self.alpha}")
        if self.ema_scope not in ("selected_only", "all"):
            raise ConfigError(f"adapt.ema_scope must be selected_only or all, got {self.ema_scope!r}")
        if self.lr <= 0:
            raise ConfigError(f"adapt.lr must be positive, got {self.lr}")
        if not self.pseudo_label_scales or any(s <= 0 for s in self.pseudo_label_scales):
            raise ConfigError(f"adapt.pseudo_label_scales must be positive and non-empty, got {self.pseudo_label_scales}")
        return self


@dataclass(frozen=True)
class EngineConfig:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    pau: PauConfig = field(default_factory=PauConfig)

    def validate(self) -> "EngineConfig":
        self.adapt.validate()
        self.uncertainty.validate()
        self.partition.validate()
        self.pau.validate()
        return self


@dataclass
class AdaptState:
    teacher: Model
    student: Model
    adam: AdamState
    masks: MaskState = field(default_factory=MaskState)
    t: int = 0
    domain_segment_id: int = -1
    seed: int = 0

    def snapshot(self) -> tuple:
        return (self.teacher.params.copy(), self.student.params.copy(), self.adam.copy(),
                self.masks.copy(), self.t, self.domain_segment_id)

    def restore(self, snap: tuple) -> None:
        teacher, student, adam, masks, t, seg = snap
        self.teacher.params[:] = teacher
        self.student.params[:] = student
        self.adam.m[:], self.adam.v[:], self.adam.step_count = adam.m, adam.v, adam.step_count
        self.masks, self.t, self.domain_segment_id = masks, t, seg


def init_state(source: Model, cfg: AdaptConfig, seed: int = 0) -> AdaptState:
    """Teacher and student both start as bitwise copies of the source model."""
    return AdaptState(
        teacher=clone_model(source),
        student=clone_model(source),
        adam=AdamState.zeros(source.num_params, dtype=source.params.dtype, lr=cfg.lr,
                             beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps),
        seed=seed,
    )


@dataclass
class StepReport:
    prediction: np.ndarray
    loss: float = 0.0
    g_h_count: int = 0
    g_l_count: int = 0
    dsp_count: int = 0
    trp_count: int = 0
    seconds: float = 0.0
    skipped: bool = False


def pseudo_label(teacher: Model, image: np.ndarray, scales=DEFAULT_SCALES,
                 feats: nx.Tensor | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Multi-scale averaged teacher probabilities and their argmax.

    Each scale resizes the input, runs the deterministic forward pass and
    resizes the probabilities back to H x W before averaging. ``feats`` may
    carry precomputed scale-1 backbone features.
    """
    image = np.asarray(image, dtype=teacher.params.dtype)
    _, H, W = image.shape
    step = 2 ** teacher.cfg.depth
    total = None
    for s in scales:
        h, w = scaled_size(H, s, step), scaled_size(W, s, step)
        if (h, w) == (H, W):
            logits = segnet.head(teacher, feats) if feats is not None else segnet.forward(teacher, image)
            probs = nx.softmax_over_channels(logits).data
        else:
            x = nx.bilinear_resize(nx.Tensor(image), h, w)
            probs = nx.softmax_over_channels(segnet.forward(teacher, x))
            probs = nx.bilinear_resize(probs, H, W).data
        total = probs.astype(np.float64) if total is None else total + probs
    mean = (total / len(scales)).astype(teacher.params.dtype)
    return mean.argmax(axis=0).astype(np.int64), mean


def ema_update(teacher: Model, student: Model, alpha: float, scope: str = "selected_only",
               masks: MaskState | np.ndarray | None = None) -> Model:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.

    ``selected_only`` touches only the indices in ``masks`` (a MaskState or an
    index array); ``all`` touches every index. Arithmetic runs in float64 and
    rounds once on store.
    """
    check_same_layout(teacher, student)
    if scope == "all":
        idx = slice(None)
    elif scope == "selected_only":
        if masks is None:
            raise ContractError("ema_update with selected_only scope needs masks")
        idx = masks.active() if isinstance(masks, MaskState) else np.asarray(masks, dtype=np.int64)
        if idx.size == 0:
            return teacher
    else:
        raise ConfigError(f"unknown ema scope {scope!r}")
    t = teacher.params[idx].astype(np.float64)
    s = student.params[idx].astype(np.float64)
    teacher.params[idx] = (alpha * t + (1.0 - alpha) * s).astype(teacher.params.dtype)
    return teacher


def _mc_seed(state: AdaptState) -> tuple[int, ...]:
    return (state.seed, STREAM_TARGET, state.t, PURPOSES["mc"])


def _run_guarded(state: AdaptState, sample, fn) -> tuple[StepReport, AdaptState]:
    start = time.perf_counter()
    snap = state.snapshot()
    try:
        report = fn(state, sample)
    except NonFiniteError as exc:
        state.restore(snap)
        log.warning("frame %d skipped, state rolled back: %s", state.t, exc)
        if getattr(sample, "boundary", False):
            # The reset only touches masks, so it survives the rollback.
            state.masks = reset_masks(state.masks)
            state.domain_segment_id += 1
        state.t += 1
        H, W = np.asarray(sample.image).shape[1:]
        report = StepReport(prediction=np.zeros((H, W), dtype=np.int64), skipped=True,
                            dsp_count=int(state.masks.dsp.size), trp_count=int(state.masks.trp.size))
    report.seconds = time.perf_counter() - start
    return report, state


def _dat_frame(state: AdaptState, sample, cfg: EngineConfig) -> StepReport:
    teacher, student = state.teacher, state.student
    pau = cfg.pau
    image = np.asarray(sample.image, dtype=teacher.params.dtype)
    if sample.boundary:
        state.masks = reset_masks(state.masks)
        state.domain_segment_id += 1

    feats = segnet.features(teacher, image)
    stack = stochastic_prob_stack(teacher, image, cfg.uncertainty, seed=_mc_seed(state), feats=feats)
    part = partition_pixels(uncertainty_map(stack), cfg.partition)
    label, _ = pseudo_label(teacher, image, cfg.adapt.pseudo_label_scales, feats=feats)

    P = student.num_params
    k = budget_count(pau.group_rho(), P)
    scoring = state.masks.accumulating and pau.groups_enabled != "none" and k > 0
    with nx.Graph() as g:
        probs = nx.softmax_over_channels(segnet.forward(student, image))
        loss = consistency_loss(probs, label)
        loss_h = consistency_loss(probs, label, part.g_h) if scoring and pau.dsp_enabled else None
        loss_l = consistency_loss(probs, label, part.g_l) if scoring and pau.trp_enabled else None
    grads = student.flat_grad(nx.backward(g, loss))

    masks = replace(state.masks, frames_in_domain=state.masks.frames_in_domain + 1)
    if masks.accumulating:
        empty = np.zeros(0, dtype=np.int64)
        dsp_new, trp_new, dsp_scores, trp_scores = empty, empty, None, None
        if loss_h is not None and loss_h.name != EMPTY_MASK:
            dsp_scores = np.abs(student.flat_grad(nx.backward(g, loss_h)))
            dsp_new = select_top_fraction(dsp_scores, pau.group_rho(), count=k)
        if loss_l is not None and loss_l.name != EMPTY_MASK:
            trp_scores = np.abs(student.flat_grad(nx.backward(g, loss_l)))
            trp_new = select_top_fraction(trp_scores, pau.group_rho(), count=k)
        masks = pau_update(masks, dsp_new, trp_new, pau, P, dsp_scores, trp_scores)
    state.masks = masks

    active = masks.active()
    adam_step(student.params, grads, state.adam, active)
    ema_update(teacher, student, cfg.adapt.alpha, cfg.adapt.ema_scope, active)
    state.t += 1
    return StepReport(prediction=label, loss=loss.item(), g_h_count=int(part.g_h.sum()),
                      g_l_count=int(part.g_l.sum()), dsp_count=int(masks.dsp.size),
                      trp_count=int(masks.trp.size))


def adapt_step(state: AdaptState, sample, cfg: EngineConfig) -> tuple[StepReport, AdaptState]:
    """One distribution-aware tuning frame.

    Order: reset masks on a boundary; uncertainty and pixel partition from the
    teacher; multi-scale pseudo label; while accumulating, score both pixel
    groups and grow the masks; masked Adam step on the full-image consistency
    loss; EMA into the teacher. A non-finite value rolls the state back to its
    pre-frame snapshot and the frame is skipped.
    """
    return _run_guarded(state, sample, lambda s, x: _dat_frame(s, x, cfg))


def _source_frame(state: AdaptState, sample, cfg: EngineConfig) -> StepReport:
    label, _ = pseudo_label(state.teacher, sample.image, cfg.adapt.pseudo_label_scales)
    state.t += 1
    return StepReport(prediction=label)


def _full_ft_frame(state: AdaptState, sample, cfg: EngineConfig) -> StepReport:
    teacher, student = state.teacher, state.student
    image = np.asarray(sample.image, dtype=teacher.params.dtype)
    if sample.boundary:
        state.domain_segment_id += 1
    label, _ = pseudo_label(teacher, image, cfg.adapt.pseudo_label_scales)
    with nx.Graph() as g:
        probs = nx.softmax_over_channels(segnet.forward(student, image))
        loss = consistency_loss(probs, label)
    grads = student.flat_grad(nx.backward(g, loss))
    adam_step(student.params, grads, state.adam, None)
    ema_update(teacher, student, cfg.adapt.alpha, "all")
    state.t += 1
    return StepReport(prediction=label, loss=loss.item())


def _norm_only_frame(state: AdaptState, sample, cfg: EngineConfig) -> StepReport:
    student = state.student
    image = np.asarray(sample.image, dtype=student.params.dtype)
    if sample.boundary:
        state.domain_segment_id += 1
    label, _ = pseudo_label(student, image, cfg.adapt.pseudo_label_scales)
    with nx.Graph() as g:
        loss = entropy_loss(nx.softmax_over_channels(segnet.forward(student, image)))
    grads = student.flat_grad(nx.backward(g, loss))
    adam_step(student.params, grads, state.adam, student.norm_index)
    state.t += 1
    return StepReport(prediction=label, loss=loss.item())


_BASELINES = {"source": _source_frame, "full_ft": _full_ft_frame, "norm_only": _norm_only_frame}


def baseline_step(state: AdaptState, sample, cfg: EngineConfig, method: str | None = None
                  ) -> tuple[StepReport, AdaptState]:
    method = method or cfg.adapt.method
    if method == "dat" or method not in _BASELINES:
        raise ConfigError(f"baseline_step needs one of {tuple(_BASELINES)}, got {method!r}")
    return _run_guarded(state, sample, lambda s, x: _BASELINES[method](s, x, cfg))


def step(state: AdaptState, sample, cfg: EngineConfig) -> tuple[StepReport, AdaptState]:
    """Dispatch on ``cfg.adapt.method``."""
    if cfg.adapt.method == "dat":
        return adapt_step(state, sample, cfg)
    return baseline_step(state, sample, cfg)


def evaluation_model(state: AdaptState, method: str) -> Model:
    """The model whose predictions a method reports (student for norm_only)."""
    return state.student if method == "norm_only" else state.teacher
