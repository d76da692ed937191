"""
Calibrated forward pass.

A query's refusal strength β is its highest rescaled relevance to any
unlearned task, zeroed below the calibration threshold. The steered visual
feature is P·x + β·ΔP(x); β = 0 reproduces the pretrained decode exactly.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import CalibrationConfig
from .engine import EngineState
from .numerics import Mat, Vec
from .refusal import GateVector, mixture_deltas, relevance_matrix, rescale_relevance, top_k_gates
from .world import decode_logits, pretrained_connect

logger = logging.getLogger(__name__)

NO_TASK = -1


@dataclass(frozen=True)
class BetaResult:
    beta: float
    argmax_task: Optional[int]
    max_relevance: float


@dataclass(frozen=True)
class CalibratedOutput:
    response_class: int
    logits: Vec
    beta: float
    gate: GateVector


@dataclass(frozen=True)
class CalibratedBatch:
    logits: Mat
    classes: np.ndarray
    betas: Vec
    argmax_tasks: np.ndarray
    alpha: Mat
    router_logits: Optional[Mat]


def pretrained_logits(state: EngineState, X_img, X_txt) -> Mat:
    return decode_logits(state.lm, pretrained_connect(np.atleast_2d(X_img), state.P), X_txt)


def _relevance_scores(state: EngineState, R_img, R_txt, cal: CalibrationConfig) -> Mat:
    raw, degenerate = relevance_matrix(
        R_img, R_txt,
        np.array([r.avg_refined_img for r in state.records]),
        np.array([r.avg_refined_txt for r in state.records]),
    )
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} query relevance values hit a zero-norm activation")
    scores = rescale_relevance(raw) if cal.use_rescaled_beta else raw
    return np.clip(scores, 0.0, 1.0)


def query_relevance_betas(state: EngineState, X_img, X_txt, cal: Optional[CalibrationConfig] = None,
                          refined: Optional[Tuple[Mat, Mat]] = None) -> Tuple[Vec, np.ndarray, Vec]:
    """
    Batched β: returns (betas, argmax task per query, max relevance per query).

    Queries without any task record get β = 0 and argmax ``NO_TASK``.
    """
    cal = cal or state.config.calibration
    n = np.atleast_2d(X_img).shape[0]
    if not state.records:
        return np.zeros(n), np.full(n, NO_TASK), np.zeros(n)
    R_img, R_txt = refined if refined is not None else state.refined(X_img, X_txt)[:2]
    scores = _relevance_scores(state, R_img, R_txt, cal)
    best = np.argmax(scores, axis=1)
    top = scores[np.arange(n), best]
    task_ids = np.array([r.task_index for r in state.records])
    betas = np.where(top < cal.beta_threshold, 0.0, top)
    return betas, task_ids[best], top


def query_relevance_beta(state: EngineState, x_img, x_txt, cal: Optional[CalibrationConfig] = None) -> BetaResult:
    betas, tasks, top = query_relevance_betas(state, x_img, x_txt, cal)
    task = int(tasks[0])
    return BetaResult(beta=float(betas[0]), argmax_task=None if task == NO_TASK else task,
                      max_relevance=float(top[0]))


def calibrated_batch(state: EngineState, X_img, X_txt, cal: Optional[CalibrationConfig] = None,
                     beta: Optional[float] = None) -> CalibratedBatch:
    """
    Calibrated decode of a batch of queries.

    ``beta`` pins every query's β (for β sweeps). With the cal ablation β is
    1 for every query. Rows with β = 0 decode from the pretrained feature.
    """
    X_img = np.atleast_2d(np.asarray(X_img, dtype=np.float64))
    X_txt = np.atleast_2d(np.asarray(X_txt, dtype=np.float64))
    n = X_img.shape[0]
    base = pretrained_connect(X_img, state.P)
    if not state.registry.category_ids:
        logits = decode_logits(state.lm, base, X_txt)
        return CalibratedBatch(logits=logits, classes=np.argmax(logits, axis=1), betas=np.zeros(n),
                               argmax_tasks=np.full(n, NO_TASK),
                               alpha=np.zeros((n, state.bank.num_refusers)), router_logits=None)

    R_img, R_txt, _ = state.refined(X_img, X_txt)
    betas, tasks, _ = query_relevance_betas(state, X_img, X_txt, cal, refined=(R_img, R_txt))
    if beta is not None:
        betas = np.full(n, float(beta))
    elif state.ablations.cal:
        betas = np.ones(n)
    router_logits, _ = state.router.forward(R_img, R_txt)
    alpha = top_k_gates(router_logits, state.router.top_k)
    visual = base.copy()
    active = betas > 0
    if active.any():
        delta = mixture_deltas(state.bank, alpha[active], X_img[active])
        visual[active] = base[active] + betas[active, None] * delta
    logits = decode_logits(state.lm, visual, X_txt)
    return CalibratedBatch(logits=logits, classes=np.argmax(logits, axis=1), betas=betas,
                           argmax_tasks=tasks, alpha=alpha, router_logits=router_logits)


def calibrated_forward(state: EngineState, x_img, x_txt, cal: Optional[CalibrationConfig] = None,
                       beta: Optional[float] = None) -> CalibratedOutput:
    out = calibrated_batch(state, x_img, x_txt, cal, beta)
    alpha = out.alpha[0]
    selected = tuple(int(i) for i in np.flatnonzero(alpha))
    return CalibratedOutput(response_class=int(out.classes[0]), logits=out.logits[0], beta=float(out.betas[0]),
                            gate=GateVector(alpha=alpha, selected=selected))
