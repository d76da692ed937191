"""
Sequential unlearning engine.

For every forget task the engine grows the concept registry and modulator,
refreshes earlier task records under the current concept set, trains concept
recognition and refinement (stage 1), trains the router and refusers with the
concept side frozen (stage 2) and finally stores the task record used by
later routing losses and by calibrated inference.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .concepts import (
    MODALITIES,
    ConceptRegistry,
    ModulatorState,
    concept_alignment_loss,
    modulator_backward,
    modulator_forward,
    modulator_loss,
    refine_batch,
    uniform_weights,
)
from .config import AblationConfig, RunConfig
from .errors import RegistryError, TrainingError, UnlearningError
from .numerics import AdamState, Mat, Params, Vec, adam_step, make_rng, softmax
from .refusal import (
    RefuserBank,
    RouterState,
    RoutingRecord,
    relevance_matrix,
    rescale_relevance,
    router_replay_loss,
    routing_loss_logit_grads,
    steered_ce,
)
from .world import CategoryPrototype, MockLM, TaskSpec, World, category_prototypes, target_similarity_matrix

logger = logging.getLogger(__name__)


@dataclass
class TaskRecord:
    task_index: int
    forget_category_ids: Tuple[str, ...]
    prototypes: Dict[str, CategoryPrototype]
    avg_refined_img: Vec
    avg_refined_txt: Vec
    recorded_router_output: Vec

    def prototype_features(self) -> Tuple[Mat, Mat]:
        ids = self.forget_category_ids
        return (np.array([self.prototypes[c].image for c in ids]),
                np.array([self.prototypes[c].text for c in ids]))


@dataclass
class EngineState:
    config: RunConfig
    registry: ConceptRegistry
    modulator: ModulatorState
    router: RouterState
    bank: RefuserBank
    lm: MockLM
    P: Mat
    concept_vectors: Dict[str, Dict[str, Mat]] = field(default_factory=lambda: {"img": {}, "txt": {}})
    records: List[TaskRecord] = field(default_factory=list)
    stage1_seconds: List[float] = field(default_factory=list)

    @classmethod
    def initialise(cls, config: RunConfig, world: World) -> "EngineState":
        seed = config.world.seed
        budget = world.config.concept_budget
        return cls(
            config=config,
            registry=ConceptRegistry(world.config.feature_dim),
            modulator=ModulatorState.empty(),
            router=RouterState.initialise(config.refusal, budget, budget, seed),
            bank=RefuserBank.initialise(config.refusal.num_refusers, world.config.feature_dim, seed,
                                        config.refusal.refuser_init_scale),
            lm=world.lm,
            P=world.P,
        )

    @property
    def ablations(self) -> AblationConfig:
        return self.config.ablations

    @property
    def category_ids(self) -> List[str]:
        return list(self.registry.category_ids)

    def concept_activations(self, X_img, X_txt) -> Tuple[Mat, Mat]:
        return self.registry.forward("img", X_img), self.registry.forward("txt", X_txt)

    def concept_targets(self, X_img, X_txt) -> Tuple[Mat, Mat]:
        """Frozen-encoder similarities against every registered category's concepts."""
        targets = []
        for modality, X in (("img", X_img), ("txt", X_txt)):
            stacked = np.vstack([self.concept_vectors[modality][cid] for cid in self.registry.category_ids])
            targets.append(target_similarity_matrix(X, stacked))
        return targets[0], targets[1]

    def modulator_weights(self, E_img, E_txt) -> Mat:
        if self.ablations.mod:
            return uniform_weights(self.modulator.num_categories, np.atleast_2d(E_img).shape[0])
        activation = self.config.training.modulator_activation
        return modulator_forward(self.modulator, E_img, E_txt, activation).m

    def refined(self, X_img, X_txt) -> Tuple[Mat, Mat, Mat]:
        """Refined activations of both modalities plus the modulator weights."""
        if not self.registry.category_ids:
            raise RegistryError("no concept modules registered")
        E_img, E_txt = self.concept_activations(X_img, X_txt)
        m = self.modulator_weights(E_img, E_txt)
        return (refine_batch(E_img, m, self.registry.block_sizes("img")),
                refine_batch(E_txt, m, self.registry.block_sizes("txt")), m)

    def prototypes(self) -> Dict[str, CategoryPrototype]:
        out: Dict[str, CategoryPrototype] = {}
        for record in self.records:
            out.update(record.prototypes)
        return out

    def stage1_params(self) -> Params:
        params = dict(self.registry.params())
        if not self.ablations.mod:
            params.update(self.modulator.params())
        return {k: np.array(v, copy=True) for k, v in params.items()}

    def stage2_params(self) -> Params:
        params = dict(self.router.params)
        params.update(self.bank.params())
        return {k: np.array(v, copy=True) for k, v in params.items()}

    def params(self) -> Params:
        params = dict(self.registry.params())
        params.update(self.modulator.params())
        params.update(self.router.params)
        params.update(self.bank.params())
        return params

    def load_params(self, params: Params):
        self.registry.load_params(params)
        self.modulator.load_params(params)
        self.router.load_params(params)
        self.bank.load_params(params)


def grow_registries(state: EngineState, world: World, task: TaskSpec) -> EngineState:
    """Append concept modules and zero modulator rows/columns for the task's categories."""
    cfg = state.config
    for cid in task.forget_categories:
        category = world.category(cid)
        initial = None
        if cfg.training.concept_init == "embeddings":
            initial = {q: category.concept_vectors(q) for q in MODALITIES}
        state.registry.add_category(cid, category.concept_vectors_img.shape[0], cfg.world.seed,
                                    cfg.training.concept_init_scale, initial_weights=initial)
        state.concept_vectors["img"][cid] = category.concept_vectors_img
        state.concept_vectors["txt"][cid] = category.concept_vectors_txt
    state.modulator = state.modulator.grow(list(task.forget_categories),
                                           state.registry.width("img"), state.registry.width("txt"))
    logger.info(
        f"Registry grown for task {task.task_index}: {len(state.registry.category_ids)} categories, "
        f"widths ({state.registry.width('img')}, {state.registry.width('txt')})"
    )
    return state


def refresh_records(state: EngineState) -> EngineState:
    """Recompute every record's average refined activations from its prototypes."""
    for record in state.records:
        P_img, P_txt = record.prototype_features()
        R_img, R_txt, _ = state.refined(P_img, P_txt)
        record.avg_refined_img = R_img.mean(axis=0)
        record.avg_refined_txt = R_txt.mean(axis=0)
    return state


def _check_finite(loss: float, stage: int, step: int, batch: str):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite stage-{stage} loss at step {step} (batch {batch})", stage=stage, step=step)


def stage1_objective(state: EngineState, params: Params, X_img, X_txt, T_img, T_txt, labels) -> Tuple[float, Params]:
    """
    L_con + L_mod for one batch; gradients for concept modules and (unless
    ablated) the modulator. L_mod reaches the concept modules only when
    ``modulator_grad_to_concepts`` is set.
    """
    cfg = state.config.training
    state.registry.load_params(params)
    use_mod = not state.ablations.mod
    if use_mod:
        state.modulator.load_params(params)
    E_img, E_txt = state.concept_activations(X_img, X_txt)
    con = concept_alignment_loss(E_img, E_txt, T_img, T_txt)
    loss = cfg.w_con * con.loss
    dE_img = cfg.w_con * con.grad_img
    dE_txt = cfg.w_con * con.grad_txt
    grads: Params = {}
    if use_mod:
        out = modulator_forward(state.modulator, E_img, E_txt, cfg.modulator_activation)
        ce = modulator_loss(out.logits, labels)
        loss += cfg.w_mod * ce.loss
        g_mod, d_img, d_txt = modulator_backward(state.modulator, E_img, E_txt, cfg.w_mod * ce.grad_logits)
        grads.update(g_mod)
        if cfg.modulator_grad_to_concepts:
            dE_img = dE_img + d_img
            dE_txt = dE_txt + d_txt
    grads.update(state.registry.backward("img", X_img, dE_img))
    grads.update(state.registry.backward("txt", X_txt, dE_txt))
    return float(loss), grads


def run_stage1(state: EngineState, task: TaskSpec) -> EngineState:
    """
    Train concept modules and modulator on batches mixing current samples and
    prototypes of earlier categories one to one.
    """
    cfg = state.config.training
    samples = task.samples
    label_of = {cid: i for i, cid in enumerate(state.modulator.category_ids)}
    cur_labels = np.array([label_of[c] for c in samples.category_ids])
    cur_T_img, cur_T_txt = state.concept_targets(samples.image_features, samples.text_features)

    protos = state.prototypes()
    proto_ids = list(protos)
    if proto_ids:
        pro_img = np.array([protos[c].image for c in proto_ids])
        pro_txt = np.array([protos[c].text for c in proto_ids])
        pro_labels = np.array([label_of[c] for c in proto_ids])
        pro_T_img, pro_T_txt = state.concept_targets(pro_img, pro_txt)

    B = cfg.batch_size
    n_pro = B // 2 if proto_ids else 0
    n_cur = B - n_pro
    rng = make_rng(state.config.world.seed, "stage1-batches", f"task{task.task_index}")
    adam = AdamState(learning_rate=cfg.stage1_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     epsilon=cfg.adam_epsilon)
    params = state.stage1_params()
    loss = float("nan")
    for step in range(cfg.stage1_steps):
        ci = rng.integers(0, len(samples), n_cur)
        X_img, X_txt = samples.image_features[ci], samples.text_features[ci]
        T_img, T_txt, labels = cur_T_img[ci], cur_T_txt[ci], cur_labels[ci]
        batch = ",".join(samples.sample_ids[i] for i in ci)
        if n_pro:
            pi = rng.integers(0, len(proto_ids), n_pro)
            X_img = np.vstack([X_img, pro_img[pi]])
            X_txt = np.vstack([X_txt, pro_txt[pi]])
            T_img = np.vstack([T_img, pro_T_img[pi]])
            T_txt = np.vstack([T_txt, pro_T_txt[pi]])
            labels = np.concatenate([labels, pro_labels[pi]])
            batch += ";prototypes:" + ",".join(proto_ids[i] for i in pi)
        loss, grads = stage1_objective(state, params, X_img, X_txt, T_img, T_txt, labels)
        _check_finite(loss, 1, step, batch)
        params, adam = adam_step(adam, params, grads)
        logger.debug(f"task {task.task_index} stage 1 step {step}: loss {loss:.6f}")
    state.registry.load_params(params)
    if not state.ablations.mod:
        state.modulator.load_params(params)
    logger.info(f"Stage 1 finished for task {task.task_index}: loss {loss:.4f}")
    return state


@dataclass
class ReplayBatch:
    refined_img: Mat
    refined_txt: Mat
    slices: List[slice]
    targets: List[Vec]


def _replay_batch(state: EngineState) -> Optional[ReplayBatch]:
    if not state.records:
        return None
    imgs, txts, slices, targets, start = [], [], [], [], 0
    for record in state.records:
        P_img, P_txt = record.prototype_features()
        R_img, R_txt, _ = state.refined(P_img, P_txt)
        imgs.append(R_img)
        txts.append(R_txt)
        slices.append(slice(start, start + R_img.shape[0]))
        targets.append(record.recorded_router_output)
        start += R_img.shape[0]
    return ReplayBatch(np.vstack(imgs), np.vstack(txts), slices, targets)


def routing_records(state: EngineState, avg_img: Vec, avg_txt: Vec) -> List[RoutingRecord]:
    """Earlier recorded router outputs paired with their rescaled relevance to the given averages."""
    if not state.records:
        return []
    raw, degenerate = relevance_matrix(
        avg_img[None, :], avg_txt[None, :],
        np.array([r.avg_refined_img for r in state.records]),
        np.array([r.avg_refined_txt for r in state.records]),
    )
    if degenerate.any():
        logger.warning("task relevance on a zero-norm average activation defined as σ(0)")
    relevance = np.clip(rescale_relevance(raw[0]), 0.0, 1.0)
    return [RoutingRecord(F=rec.recorded_router_output, relevance=float(r))
            for rec, r in zip(state.records, relevance)]


def stage2_objective(state: EngineState, params: Params, R_img, R_txt, X_img, X_txt, targets,
                     records: List[RoutingRecord], replay: Optional[ReplayBatch]) -> Tuple[float, Params]:
    """L_ce + L_ref + router replay for one batch; gradients for the router and refusers."""
    cfg = state.config.training
    router, bank = state.router, state.bank
    router.load_params(params)
    bank.load_params(params)
    logits, cache = router.forward(R_img, R_txt)
    ce = steered_ce(bank, state.lm, state.P, logits, router.top_k, X_img, X_txt, targets)
    loss = cfg.w_ce * ce.loss
    d_logits = cfg.w_ce * ce.grad_router_logits
    if records:
        ref_loss, d_ref = routing_loss_logit_grads(logits, records, router.temperature,
                                                   state.config.refusal.routing_anchor)
        loss += cfg.w_ref * ref_loss
        d_logits = d_logits + cfg.w_ref * d_ref
    grads = router.backward(cache, d_logits)
    grads["refuser.weight"] = cfg.w_ce * ce.grad_bank
    if replay is not None:
        replay_logits, replay_cache = router.forward(replay.refined_img, replay.refined_txt)
        d_replay = np.zeros_like(replay_logits)
        for sl, recorded in zip(replay.slices, replay.targets):
            rep = router_replay_loss(replay_logits[sl].mean(axis=0), recorded)
            loss += cfg.w_replay * rep.loss
            d_replay[sl] = cfg.w_replay * rep.grad_logits / (sl.stop - sl.start)
        for name, g in router.backward(replay_cache, d_replay).items():
            grads[name] = grads[name] + g
    return float(loss), grads


def run_stage2(state: EngineState, task: TaskSpec) -> EngineState:
    """Train router and refusers on forget samples; concept modules and modulator stay frozen."""
    cfg = state.config.training
    samples = task.samples
    R_img, R_txt, _ = state.refined(samples.image_features, samples.text_features)
    use_act = not state.ablations.act
    records = routing_records(state, R_img.mean(axis=0), R_txt.mean(axis=0)) if use_act else []
    replay = _replay_batch(state) if use_act else None

    rng = make_rng(state.config.world.seed, "stage2-batches", f"task{task.task_index}")
    adam = AdamState(learning_rate=cfg.stage2_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     epsilon=cfg.adam_epsilon)
    params = state.stage2_params()
    loss = float("nan")
    for step in range(cfg.stage2_steps):
        idx = rng.integers(0, len(samples), cfg.batch_size)
        loss, grads = stage2_objective(
            state, params, R_img[idx], R_txt[idx], samples.image_features[idx], samples.text_features[idx],
            samples.targets[idx], records, replay,
        )
        _check_finite(loss, 2, step, ",".join(samples.sample_ids[i] for i in idx))
        params, adam = adam_step(adam, params, grads)
        logger.debug(f"task {task.task_index} stage 2 step {step}: loss {loss:.6f}")
    state.router.load_params(params)
    state.bank.load_params(params)
    logger.info(f"Stage 2 finished for task {task.task_index}: loss {loss:.4f}")
    return state


def finalize_task_record(state: EngineState, task: TaskSpec) -> TaskRecord:
    """Store prototypes, sample-average refined activations and the recorded router output."""
    samples = task.samples
    R_img, R_txt, _ = state.refined(samples.image_features, samples.text_features)
    logits, _ = state.router.forward(R_img, R_txt)
    record = TaskRecord(
        task_index=task.task_index,
        forget_category_ids=tuple(task.forget_categories),
        prototypes=category_prototypes(task),
        avg_refined_img=R_img.mean(axis=0),
        avg_refined_txt=R_txt.mean(axis=0),
        recorded_router_output=softmax(logits.mean(axis=0)),
    )
    state.records.append(record)
    return record


def train_task(state: EngineState, world: World, task: TaskSpec) -> EngineState:
    """Grow, refresh, stage 1, refresh, stage 2, finalize."""
    grow_registries(state, world, task)
    refresh_records(state)
    started = time.perf_counter()
    run_stage1(state, task)
    state.stage1_seconds.append(time.perf_counter() - started)
    refresh_records(state)
    run_stage2(state, task)
    finalize_task_record(state, task)
    return state


@dataclass
class SequenceResult:
    state: EngineState
    snapshots: list


Evaluator = Callable[[EngineState, World, int], object]


def unlearn_sequence(world: World, config: RunConfig, evaluator: Optional[Evaluator] = None,
                     checkpoint_dir: Optional[Path] = None) -> SequenceResult:
    """
    Process every forget task in order and evaluate after each one.

    ``evaluator(state, world, task_index)`` defaults to the standard metric
    snapshot. Errors raised while training task t carry ``task_index = t``.
    """
    if evaluator is None:
        from .evaluation import evaluate_step as evaluator
    state = EngineState.initialise(config, world)
    disabled = config.ablations.disabled()
    logger.info(f"Unlearning {len(world.tasks)} tasks (seed {config.world.seed}, ablations {disabled or 'none'})")
    snapshots = []
    for task in world.tasks:
        try:
            train_task(state, world, task)
        except TrainingError as exc:
            logger.error(f"Training failed on task {task.task_index}: {exc}")
            raise exc.with_task(task.task_index)
        except UnlearningError as exc:
            logger.error(f"Training failed on task {task.task_index}: {exc}")
            raise TrainingError(f"task {task.task_index}: {exc}", task_index=task.task_index) from exc
        snapshots.append(evaluator(state, world, task.task_index))
        if config.training.checkpoint_every_task and checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(state, Path(checkpoint_dir) / f"checkpoint-task-{task.task_index:02d}.json")
    return SequenceResult(state=state, snapshots=snapshots)
