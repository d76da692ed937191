"""
Finite-difference verification of every training loss.

Each loss is evaluated on a small fixed instance whose parameters are drawn
from the run seed, so repeated checks print identical errors.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .concepts import (
    ConceptRegistry,
    ModulatorState,
    concept_alignment_loss,
    modulator_backward,
    modulator_forward,
    modulator_loss,
)
from .config import RefusalConfig
from .errors import ParameterError
from .numerics import GradCheckReport, LossFn, Params, finite_diff_check, make_rng, softmax
from .refusal import RefuserBank, RouterState, RoutingRecord, refusal_objective, router_replay_loss, routing_loss_logit_grads
from .world import ANSWER, REFUSAL, MockLM

logger = logging.getLogger(__name__)

LOSS_NAMES = ("L_con", "L_mod", "L_ce", "L_ref", "replay")
DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

_DIM = 6
_CONCEPTS = 3
_CATEGORIES = ("a", "b")
_BATCH = 4
_REFUSAL_CFG = RefusalConfig(num_refusers=4, top_k=2, temperature=0.5, heads=2, hidden_dim=4,
                             refuser_init_scale=0.3, router_init_scale=0.5)


@dataclass
class LossCheck:
    name: str
    report: GradCheckReport


def _registry(seed: int) -> ConceptRegistry:
    registry = ConceptRegistry(_DIM)
    for cid in _CATEGORIES:
        registry.add_category(cid, _CONCEPTS, seed, init_scale=0.5)
    return registry


def _concept_instance(seed: int) -> Tuple[LossFn, Params]:
    rng = make_rng(seed, "gradcheck", "L_con")
    registry = _registry(seed)
    X_img, X_txt = rng.standard_normal((2, _BATCH, _DIM))
    width = _CONCEPTS * len(_CATEGORIES)
    T_img, T_txt = rng.standard_normal((2, _BATCH, width))

    def loss_fn(params):
        registry.load_params(params)
        E_img, E_txt = registry.forward("img", X_img), registry.forward("txt", X_txt)
        con = concept_alignment_loss(E_img, E_txt, T_img, T_txt)
        grads = registry.backward("img", X_img, con.grad_img)
        grads.update(registry.backward("txt", X_txt, con.grad_txt))
        return con.loss, grads

    return loss_fn, registry.params()


def _modulator_instance(seed: int) -> Tuple[LossFn, Params]:
    rng = make_rng(seed, "gradcheck", "L_mod")
    registry = _registry(seed)
    width = registry.width("img")
    modulator = ModulatorState.empty().grow(list(_CATEGORIES), width, width)
    modulator.weights = rng.standard_normal(modulator.weights.shape)
    modulator.bias = rng.standard_normal(modulator.bias.shape)
    X_img, X_txt = rng.standard_normal((2, _BATCH, _DIM))
    labels = np.arange(_BATCH) % len(_CATEGORIES)

    def loss_fn(params):
        registry.load_params(params)
        modulator.load_params(params)
        E_img, E_txt = registry.forward("img", X_img), registry.forward("txt", X_txt)
        out = modulator_forward(modulator, E_img, E_txt)
        ce = modulator_loss(out.logits, labels)
        grads, d_img, d_txt = modulator_backward(modulator, E_img, E_txt, ce.grad_logits)
        grads.update(registry.backward("img", X_img, d_img))
        grads.update(registry.backward("txt", X_txt, d_txt))
        return ce.loss, grads

    params = dict(registry.params())
    params.update(modulator.params())
    return loss_fn, params


def _router(seed: int) -> RouterState:
    width = _CONCEPTS * len(_CATEGORIES)
    return RouterState.initialise(_REFUSAL_CFG, width, width, seed)


def _ce_instance(seed: int) -> Tuple[LossFn, Params]:
    rng = make_rng(seed, "gradcheck", "L_ce")
    router = _router(seed)
    bank = RefuserBank.initialise(_REFUSAL_CFG.num_refusers, _DIM, seed, _REFUSAL_CFG.refuser_init_scale)
    classes = 5
    lm = MockLM(
        visual_readout=rng.standard_normal((classes, _DIM)),
        text_readout=rng.standard_normal((classes, _DIM)),
        class_kinds=(ANSWER, ANSWER, ANSWER, REFUSAL, REFUSAL),
        class_categories=("a", "b", "c", "a", "b"),
    )
    P = rng.standard_normal((_DIM, _DIM))
    width = router.input_widths[0]
    R_img, R_txt = rng.standard_normal((2, _BATCH, width))
    X_img, X_txt = rng.standard_normal((2, _BATCH, _DIM))
    targets = np.array([3, 4, 3, 4])

    def loss_fn(params):
        router.load_params(params)
        bank.load_params(params)
        obj = refusal_objective(router, bank, lm, P, R_img, R_txt, X_img, X_txt, targets)
        return obj.loss, obj.grads

    params = dict(router.params)
    params.update(bank.params())
    return loss_fn, params


def _routing_instance(seed: int) -> Tuple[LossFn, Params]:
    rng = make_rng(seed, "gradcheck", "L_ref")
    router = _router(seed)
    width = router.input_widths[0]
    R_img, R_txt = rng.standard_normal((2, _BATCH, width))
    records = [
        RoutingRecord(F=softmax(rng.standard_normal(_REFUSAL_CFG.num_refusers)), relevance=0.9),
        RoutingRecord(F=softmax(rng.standard_normal(_REFUSAL_CFG.num_refusers)), relevance=0.2),
    ]

    def loss_fn(params):
        router.load_params(params)
        logits, cache = router.forward(R_img, R_txt)
        loss, d_logits = routing_loss_logit_grads(logits, records, router.temperature,
                                                  _REFUSAL_CFG.routing_anchor)
        return loss, router.backward(cache, d_logits)

    return loss_fn, dict(router.params)


def _replay_instance(seed: int) -> Tuple[LossFn, Params]:
    rng = make_rng(seed, "gradcheck", "replay")
    router = _router(seed)
    width = router.input_widths[0]
    R_img, R_txt = rng.standard_normal((2, _BATCH, width))
    recorded = softmax(rng.standard_normal(_REFUSAL_CFG.num_refusers))

    def loss_fn(params):
        router.load_params(params)
        logits, cache = router.forward(R_img, R_txt)
        rep = router_replay_loss(logits.mean(axis=0), recorded)
        d_logits = np.tile(rep.grad_logits / _BATCH, (_BATCH, 1))
        return rep.loss, router.backward(cache, d_logits)

    return loss_fn, dict(router.params)


INSTANCES = {
    "L_con": _concept_instance,
    "L_mod": _modulator_instance,
    "L_ce": _ce_instance,
    "L_ref": _routing_instance,
    "replay": _replay_instance,
}


def _corrupted(loss_fn):
    def wrapped(params):
        loss, grads = loss_fn(params)
        return loss, {name: 1.5 * g + 0.01 for name, g in grads.items()}
    return wrapped


def run_gradcheck(seed: int = 0, corrupt: Optional[str] = None, step: float = DEFAULT_STEP,
                  tolerance: float = DEFAULT_TOLERANCE) -> List[LossCheck]:
    """
    Check every loss; ``corrupt`` names one loss whose analytic gradient is
    deliberately perturbed (fault injection for tests and the CLI).
    """
    if corrupt is not None and corrupt not in INSTANCES:
        raise ParameterError(f"unknown loss '{corrupt}', expected one of {', '.join(LOSS_NAMES)}")
    results = []
    for name in LOSS_NAMES:
        loss_fn, params = INSTANCES[name](seed)
        if name == corrupt:
            loss_fn = _corrupted(loss_fn)
        report = finite_diff_check(loss_fn, params, step=step, tolerance=tolerance)
        level = logging.INFO if report.passed else logging.ERROR
        logger.log(level, f"{name}: max relative error {report.max_relative_error:.3e} "
                          f"at {report.worst_parameter}{list(report.worst_index)}")
        results.append(LossCheck(name=name, report=report))
    return results


def summarise(results: List[LossCheck]) -> Dict[str, float]:
    return {r.name: r.report.max_relative_error for r in results}
