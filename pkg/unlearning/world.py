"""
Synthetic stand-in for the frozen vision-language stack.

Generates the task stream of forget categories, the retain and benchmark
pools, concept-description embeddings, the frozen connection module P and a
linear mock language head whose readout rows are class anchors.

Categories have one of three roles:
- forget: listed in exactly one task of the stream
- retain: never forgotten, images populate half of the retain pool
- benchmark: never forgotten, used only for the specificity benchmark
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import ortho_group

from .config import WorldConfig
from .errors import ConfigError, DataError, DecodeError, ShapeError
from .numerics import Mat, Vec, as_matrix, linear_forward, make_rng

logger = logging.getLogger(__name__)

FORGET = "forget"
RETAIN = "retain"
BENCHMARK = "benchmark"

ANSWER = "answer"
REFUSAL = "refusal"

MODALITIES = ("img", "txt")
# Largest |cos| a supplied held-out prototype may have with a forget prototype.
ISOLATION_TOLERANCE = 1e-8


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.atleast_2d(mat)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot normalise a zero vector")
    return mat / norms


def _perturb(rng: np.random.Generator, center: Vec, noise: float, count: int) -> Mat:
    """Unit vectors ``normalize(center + noise·g)`` with g ~ N(0, I/d)."""
    dim = center.shape[0]
    gauss = rng.standard_normal((count, dim)) / np.sqrt(dim)
    return _normalize_rows(center[None, :] + noise * gauss)


@dataclass(frozen=True)
class Category:
    id: str
    role: str
    image_prototype: Vec
    intent_prototype: Vec
    concept_vectors_img: Mat
    concept_vectors_txt: Mat
    answer_class: int
    refusal_class: Optional[int] = None
    task_index: Optional[int] = None

    def concept_vectors(self, modality: str) -> Mat:
        if modality == "img":
            return self.concept_vectors_img
        if modality == "txt":
            return self.concept_vectors_txt
        raise DataError(f"unknown modality '{modality}'")


@dataclass(frozen=True)
class SampleTriplet:
    sample_id: str
    image_feature: Vec
    text_feature: Vec
    category_id: str
    target_response: int


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented collection of sample triplets."""

    sample_ids: Tuple[str, ...]
    image_features: Mat
    text_features: Mat
    category_ids: Tuple[str, ...]
    targets: np.ndarray

    def __post_init__(self):
        n = len(self.sample_ids)
        if not (self.image_features.shape[0] == self.text_features.shape[0] == len(self.category_ids)
                == self.targets.shape[0] == n):
            raise ShapeError("sample set columns differ in length")
        if n and not (np.all(np.isfinite(self.image_features)) and np.all(np.isfinite(self.text_features))):
            raise DataError("sample features must be finite")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self) -> Iterator[SampleTriplet]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> SampleTriplet:
        return SampleTriplet(
            sample_id=self.sample_ids[i],
            image_feature=self.image_features[i],
            text_feature=self.text_features[i],
            category_id=self.category_ids[i],
            target_response=int(self.targets[i]),
        )

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=int)
        return SampleSet(
            sample_ids=tuple(self.sample_ids[i] for i in indices),
            image_features=self.image_features[indices],
            text_features=self.text_features[indices],
            category_ids=tuple(self.category_ids[i] for i in indices),
            targets=self.targets[indices],
        )

    @staticmethod
    def concat(parts: List["SampleSet"]) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError("cannot concatenate an empty list of sample sets")
        return SampleSet(
            sample_ids=tuple(s for p in parts for s in p.sample_ids),
            image_features=np.vstack([p.image_features for p in parts]),
            text_features=np.vstack([p.text_features for p in parts]),
            category_ids=tuple(c for p in parts for c in p.category_ids),
            targets=np.concatenate([p.targets for p in parts]),
        )


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    forget_categories: Tuple[str, ...]
    samples: SampleSet
    eval_samples: SampleSet

    def __post_init__(self):
        if len(self.samples) < len(self.forget_categories):
            raise DataError(
                f"task {self.task_index} has {len(self.samples)} samples for "
                f"{len(self.forget_categories)} categories"
            )
        allowed = set(self.forget_categories)
        for split in (self.samples, self.eval_samples):
            stray = sorted(set(split.category_ids) - allowed)
            if stray:
                raise DataError(f"task {self.task_index} has samples of non-forget categories {stray}")


@dataclass(frozen=True)
class MockLM:
    visual_readout: Mat
    text_readout: Mat
    class_kinds: Tuple[str, ...]
    class_categories: Tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_kinds)

    def is_refusal(self, classes) -> np.ndarray:
        kinds = np.array([k == REFUSAL for k in self.class_kinds])
        return kinds[np.asarray(classes, dtype=int)]


@dataclass(frozen=True)
class DecodeResult:
    logits: Vec
    response_class: int


@dataclass(frozen=True)
class CategoryPrototype:
    image: Vec
    text: Vec


@dataclass
class EmbeddingOverrides:
    """Vectors loaded from an embedding file, keyed by (category, modality)."""

    prototypes: Dict[Tuple[str, str], Vec] = field(default_factory=dict)
    concepts: Dict[Tuple[str, str], List[Vec]] = field(default_factory=dict)
    samples: Dict[Tuple[str, str], List[Vec]] = field(default_factory=dict)


@dataclass(frozen=True)
class World:
    config: WorldConfig
    categories: Dict[str, Category]
    tasks: Tuple[TaskSpec, ...]
    retain_pool: SampleSet
    benchmark_pool: SampleSet
    lm: MockLM
    P: Mat
    general_intents: Mat

    def category(self, category_id: str) -> Category:
        try:
            return self.categories[category_id]
        except KeyError:
            raise DataError(f"unknown category '{category_id}'") from None

    def forget_category_ids(self, upto_task: Optional[int] = None) -> List[str]:
        tasks = self.tasks if upto_task is None else self.tasks[: upto_task + 1]
        return [cid for task in tasks for cid in task.forget_categories]

    def ids_with_role(self, role: str) -> List[str]:
        return [cid for cid, cat in self.categories.items() if cat.role == role]

    def forget_eval_pool(self, upto_task: int) -> SampleSet:
        return SampleSet.concat([task.eval_samples for task in self.tasks[: upto_task + 1]])


def target_similarities(feature, concept_vectors) -> Vec:
    """Frozen-encoder similarity of one feature against each concept vector."""
    concept_vectors = np.atleast_2d(np.asarray(concept_vectors, dtype=np.float64))
    if concept_vectors.size == 0:
        raise ShapeError("concept list is empty")
    return target_similarity_matrix(np.atleast_2d(feature), concept_vectors)[0]


def target_similarity_matrix(features, concept_vectors) -> Mat:
    """Batched ``target_similarities``: rows are features, columns concepts."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    concept_vectors = np.atleast_2d(np.asarray(concept_vectors, dtype=np.float64))
    if concept_vectors.shape[0] == 0 or concept_vectors.size == 0:
        raise ShapeError("concept list is empty")
    if features.shape[1] != concept_vectors.shape[1]:
        raise ShapeError(
            f"feature dim {features.shape[1]} does not match concept dim {concept_vectors.shape[1]}"
        )
    fn = np.linalg.norm(features, axis=1, keepdims=True)
    cn = np.linalg.norm(concept_vectors, axis=1, keepdims=True)
    dots = features @ concept_vectors.T
    denom = fn * cn.T
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def pretrained_connect(x_img, P) -> np.ndarray:
    return linear_forward(P, None, x_img)


def decode_logits(lm: MockLM, visual_features, text_features) -> Mat:
    visual_features = np.atleast_2d(np.asarray(visual_features, dtype=np.float64))
    text_features = np.atleast_2d(np.asarray(text_features, dtype=np.float64))
    if not (np.all(np.isfinite(visual_features)) and np.all(np.isfinite(text_features))):
        raise DecodeError("mock decoder received a non-finite feature")
    return linear_forward(lm.visual_readout, None, visual_features) + linear_forward(
        lm.text_readout, None, text_features
    )


def mock_decode(lm: MockLM, visual_feature, text_feature) -> DecodeResult:
    """Linear readout; argmax breaks ties toward the lowest class index."""
    logits = decode_logits(lm, visual_feature, text_feature)[0]
    return DecodeResult(logits=logits, response_class=int(np.argmax(logits)))


def category_prototypes(task: TaskSpec) -> Dict[str, CategoryPrototype]:
    """Per-category unit-normalised mean image and text features."""
    samples = task.samples
    ids = np.array(samples.category_ids)
    prototypes = {}
    for cid in task.forget_categories:
        mask = ids == cid
        if not mask.any():
            raise DataError(f"category '{cid}' has no samples in task {task.task_index}")
        image = samples.image_features[mask].mean(axis=0)
        text = samples.text_features[mask].mean(axis=0)
        prototypes[cid] = CategoryPrototype(
            image=_normalize_rows(image)[0], text=_normalize_rows(text)[0]
        )
    return prototypes


def load_embeddings(path, feature_dim: int) -> EmbeddingOverrides:
    """
    Read a JSON-lines embedding file.

    Each line holds ``kind`` (sample|concept|prototype), ``modality``
    (img|txt), ``category`` and ``vector`` as a comma-separated string.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    overrides = EmbeddingOverrides()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                kind, modality, category = record["kind"], record["modality"], record["category"]
                vector = np.array([float(v) for v in str(record["vector"]).split(",")])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: malformed embedding record ({exc})") from None
            if modality not in MODALITIES:
                raise DataError(f"{path}:{line_no}: unknown modality '{modality}'")
            if vector.shape[0] != feature_dim:
                raise DataError(
                    f"{path}:{line_no}: vector dim {vector.shape[0]} does not match feature_dim {feature_dim}"
                )
            if not np.all(np.isfinite(vector)) or np.linalg.norm(vector) == 0:
                raise DataError(f"{path}:{line_no}: vector must be finite and non-zero")
            vector = vector / np.linalg.norm(vector)
            key = (str(category), modality)
            if kind == "prototype":
                overrides.prototypes[key] = vector
            elif kind == "concept":
                overrides.concepts.setdefault(key, []).append(vector)
            elif kind == "sample":
                overrides.samples.setdefault(key, []).append(vector)
            else:
                raise DataError(f"{path}:{line_no}: unknown record kind '{kind}'")
    logger.info(
        f"Loaded embeddings from {path}: {len(overrides.prototypes)} prototypes, "
        f"{len(overrides.concepts)} concept lists, {len(overrides.samples)} sample lists"
    )
    return overrides


class _DrawBudget:
    def __init__(self, requested: int, what: str):
        self.limit = 10 * requested
        self.used = 0
        self.what = what

    def spend(self):
        self.used += 1
        if self.used > self.limit:
            raise ConfigError(f"prototype separation infeasible: {self.what} exceeded {self.limit} draws")


def _complement_basis(vectors: Mat, enabled: bool) -> Optional[Mat]:
    if not enabled or vectors.shape[0] == 0:
        return None
    basis = linalg.null_space(vectors)
    return basis if basis.shape[1] > 0 else None


def _random_unit(rng: np.random.Generator, dim: int, basis: Optional[Mat]) -> Vec:
    while True:
        if basis is None:
            v = rng.standard_normal(dim)
        else:
            v = basis @ rng.standard_normal(basis.shape[1])
        norm = np.linalg.norm(v)
        if norm > 0:
            return v / norm


def _separated_vectors(rng, count: int, dim: int, max_cos: float, budget: _DrawBudget,
                       existing: List[Vec], basis: Optional[Mat] = None) -> List[Vec]:
    """Sequential rejection sampling: each new vector has cos < max_cos to all previous."""
    accepted: List[Vec] = []
    while len(accepted) < count:
        budget.spend()
        candidate = _random_unit(rng, dim, basis)
        others = existing + accepted
        if not others or np.max(np.array(others) @ candidate) < max_cos:
            accepted.append(candidate)
    return accepted


def _supplied_prototypes(overrides: EmbeddingOverrides, modality: str) -> Dict[str, Vec]:
    return {cid: vec for (cid, q), vec in overrides.prototypes.items() if q == modality}


def _fill_group(rng, kind: str, group_ids: List[str], supplied: Dict[str, Vec], dim: int, max_cos: float,
                budget: _DrawBudget, existing: List[Vec], basis: Optional[Mat] = None) -> List[Vec]:
    """
    Prototypes for ``group_ids`` in order: supplied vectors where present,
    the rest drawn separated from them and from ``existing``.
    """
    fixed = {cid: supplied[cid] for cid in group_ids if cid in supplied}
    seen = list(existing)
    for cid, vec in fixed.items():
        worst = float(np.max(np.array(seen) @ vec)) if seen else -1.0
        if worst >= max_cos:
            raise ConfigError(
                f"supplied {kind} prototype of '{cid}' has cosine {worst:.3f} with another prototype, "
                f"limit {max_cos}"
            )
        seen.append(vec)
    drawn = iter(_separated_vectors(rng, len(group_ids) - len(fixed), dim, max_cos, budget, seen, basis))
    return [fixed[cid] if cid in fixed else next(drawn) for cid in group_ids]


def _check_isolated(kind: str, heldout_ids: List[str], supplied: Dict[str, Vec], forget_vectors: List[Vec],
                    enabled: bool):
    if not enabled or not forget_vectors:
        return
    forget = np.array(forget_vectors)
    for cid in heldout_ids:
        if cid not in supplied:
            continue
        leak = float(np.max(np.abs(forget @ supplied[cid])))
        if leak > ISOLATION_TOLERANCE:
            raise ConfigError(
                f"supplied {kind} prototype of held-out category '{cid}' has cosine {leak:.3g} with a "
                f"forget prototype; heldout_isolation needs it orthogonal to the forget span"
            )


def _low_coherence_direction(rng, anchors: Mat, max_cos: float, iterations: int = 400) -> Optional[Vec]:
    """Draw a unit vector and repair it until |cos| <= max_cos against every anchor row."""
    v = _random_unit(rng, anchors.shape[1], None)
    target = 0.95 * max_cos
    for _ in range(iterations):
        c = anchors @ v
        if np.max(np.abs(c)) <= max_cos:
            return v
        over = np.abs(c) - target
        mask = over > 0
        v = v - anchors[mask].T @ (np.sign(c[mask]) * over[mask])
        norm = np.linalg.norm(v)
        if norm == 0:
            return None
        v = v / norm
    c = anchors @ v
    return v if np.max(np.abs(c)) <= max_cos else None


def _make_samples(rng, prefix: str, images: Mat, texts: Mat, category_ids: List[str],
                  targets: List[int], noise: float) -> SampleSet:
    dim = images.shape[1]
    n = images.shape[0]
    img = _normalize_rows(images + noise * rng.standard_normal((n, dim)) / np.sqrt(dim))
    txt = _normalize_rows(texts + noise * rng.standard_normal((n, dim)) / np.sqrt(dim))
    return SampleSet(
        sample_ids=tuple(f"{prefix}-{i:04d}" for i in range(n)),
        image_features=img,
        text_features=txt,
        category_ids=tuple(category_ids),
        targets=np.asarray(targets, dtype=int),
    )


def generate_world(cfg: WorldConfig, overrides: Optional[EmbeddingOverrides] = None) -> World:
    """
    Build a deterministic world from ``cfg``.

    The output is a pure function of the configuration (and overrides): every
    random draw comes from a generator keyed by the seed and a fixed label.
    """
    if overrides is None and cfg.embeddings_path:
        overrides = load_embeddings(cfg.embeddings_path, cfg.feature_dim)
    overrides = overrides or EmbeddingOverrides()

    dim = cfg.feature_dim
    n_forget = cfg.num_forget_categories
    roles = [FORGET] * n_forget + [RETAIN] * cfg.retain_categories + [BENCHMARK] * cfg.benchmark_categories
    ids = [f"cat{i:03d}" for i in range(len(roles))]
    forget_ids = ids[:n_forget]
    known = set(ids)
    for key in list(overrides.prototypes) + list(overrides.concepts) + list(overrides.samples):
        if key[0] not in known:
            raise DataError(f"embedding record references unknown category '{key[0]}'")

    # Image prototypes: forget categories in the full space, held-out ones in the
    # orthogonal complement of the forget span when isolation is on. Supplied
    # prototypes stay in place and the drawn ones are separated from them.
    heldout_ids = ids[n_forget:]
    max_cos = cfg.prototype_min_angle_cos
    supplied_img = _supplied_prototypes(overrides, "img")
    rng = make_rng(cfg.seed, "prototypes", "img")
    budget = _DrawBudget(len(ids), "image prototypes")
    forget_images = _fill_group(rng, "image", forget_ids, supplied_img, dim, max_cos, budget, [])
    basis = _complement_basis(np.array(forget_images), cfg.heldout_isolation)
    _check_isolated("image", heldout_ids, supplied_img, forget_images, cfg.heldout_isolation)
    heldout_images = _fill_group(rng, "image", heldout_ids, supplied_img, dim, max_cos, budget,
                                 list(forget_images), basis)
    images = forget_images + heldout_images

    supplied_txt = _supplied_prototypes(overrides, "txt")
    rng = make_rng(cfg.seed, "prototypes", "txt")
    intent_budget = _DrawBudget(n_forget, "forget intents")
    forget_intents = _fill_group(rng, "intent", forget_ids, supplied_txt, dim, max_cos, intent_budget, [])
    intent_basis = _complement_basis(np.array(forget_intents), cfg.heldout_isolation)
    _check_isolated("intent", heldout_ids, supplied_txt, forget_intents, cfg.heldout_isolation)
    heldout_intents = [supplied_txt[cid] if cid in supplied_txt else _random_unit(rng, dim, intent_basis)
                       for cid in heldout_ids]
    general = np.array([_random_unit(rng, dim, intent_basis) for _ in range(cfg.general_intents)])
    intents = forget_intents + heldout_intents

    # Task stream: consecutive forget categories form a task; shuffle_tasks
    # permutes the order in which those tasks arrive.
    groups = [tuple(forget_ids[g * cfg.categories_per_task:(g + 1) * cfg.categories_per_task])
              for g in range(cfg.num_tasks)]
    if cfg.shuffle_tasks:
        order = make_rng(cfg.seed, "task-order").permutation(cfg.num_tasks)
        groups = [groups[g] for g in order]
        logger.info(f"Task order shuffled: {[int(g) for g in order]}")
    task_of = {cid: t for t, group in enumerate(groups) for cid in group}

    if dim >= 2:
        P = ortho_group.rvs(dim, random_state=make_rng(cfg.seed, "connector"))
    else:
        P = np.eye(1)

    # Class layout: one answer class per category, then one refusal class per forget category.
    answer_of = {cid: i for i, cid in enumerate(ids)}
    refusal_of = {cid: len(ids) + j for j, cid in enumerate(forget_ids)}

    categories: Dict[str, Category] = {}
    n_concepts = cfg.concepts_per_category_per_modality
    for i, (cid, role) in enumerate(zip(ids, roles)):
        concept_mats = {}
        for modality, center in (("img", images[i]), ("txt", intents[i])):
            supplied = overrides.concepts.get((cid, modality))
            if supplied is not None:
                if len(supplied) != n_concepts:
                    raise DataError(
                        f"category '{cid}' {modality}: {len(supplied)} concepts supplied, "
                        f"{n_concepts} configured"
                    )
                concept_mats[modality] = np.array(supplied)
            else:
                concept_rng = make_rng(cfg.seed, "concepts", cid, modality)
                concept_mats[modality] = _perturb(concept_rng, center, cfg.concept_noise, n_concepts)
        categories[cid] = Category(
            id=cid,
            role=role,
            image_prototype=images[i],
            intent_prototype=intents[i],
            concept_vectors_img=concept_mats["img"],
            concept_vectors_txt=concept_mats["txt"],
            answer_class=answer_of[cid],
            refusal_class=refusal_of.get(cid),
            task_index=task_of.get(cid),
        )

    lm = _build_mock_lm(cfg, categories, ids, forget_ids, P)

    tasks = []
    for t, task_ids in enumerate(groups):
        splits = {}
        for split, per_cat in (("train", cfg.samples_per_category), ("eval", cfg.eval_samples_per_category)):
            parts = []
            for cid in task_ids:
                cat = categories[cid]
                sample_rng = make_rng(cfg.seed, "samples", split, cid)
                supplied_img = overrides.samples.get((cid, "img"))
                supplied_txt = overrides.samples.get((cid, "txt"))
                if split == "train" and (supplied_img or supplied_txt):
                    parts.append(_supplied_samples(cid, cat, supplied_img, supplied_txt))
                    continue
                parts.append(_make_samples(
                    sample_rng, f"{split}-{cid}",
                    np.tile(cat.image_prototype, (per_cat, 1)),
                    np.tile(cat.intent_prototype, (per_cat, 1)),
                    [cid] * per_cat, [cat.refusal_class] * per_cat, cfg.sample_noise,
                ))
            splits[split] = SampleSet.concat(parts)
        tasks.append(TaskSpec(task_index=t, forget_categories=task_ids,
                              samples=splits["train"], eval_samples=splits["eval"]))

    retain_pool = _build_retain_pool(cfg, categories, forget_ids, general)
    benchmark_pool = _build_benchmark_pool(cfg, categories, general)

    logger.info(
        f"Generated world (seed {cfg.seed}): {cfg.num_tasks} tasks x {cfg.categories_per_task} categories, "
        f"{len(retain_pool)} retain and {len(benchmark_pool)} benchmark queries"
    )
    return World(
        config=cfg, categories=categories, tasks=tuple(tasks), retain_pool=retain_pool,
        benchmark_pool=benchmark_pool, lm=lm, P=P, general_intents=general,
    )


def _supplied_samples(cid: str, cat: Category, images, texts) -> SampleSet:
    if not images or not texts or len(images) != len(texts):
        raise DataError(f"category '{cid}': sample records need equal img and txt counts")
    n = len(images)
    return SampleSet(
        sample_ids=tuple(f"train-{cid}-{i:04d}" for i in range(n)),
        image_features=np.array(images),
        text_features=np.array(texts),
        category_ids=(cid,) * n,
        targets=np.full(n, cat.refusal_class, dtype=int),
    )


def _build_mock_lm(cfg: WorldConfig, categories: Dict[str, Category], ids: List[str],
                   forget_ids: List[str], P: Mat) -> MockLM:
    dim = cfg.feature_dim
    prototypes = np.array([categories[cid].image_prototype for cid in ids])
    rng = make_rng(cfg.seed, "mock-lm", "refusal-rows")
    budget = _DrawBudget(len(forget_ids), "refusal rows")
    refusal_rows = []
    while len(refusal_rows) < len(forget_ids):
        budget.spend()
        direction = _low_coherence_direction(rng, prototypes, cfg.refusal_row_max_cos)
        if direction is not None:
            refusal_rows.append(direction)

    n_classes = len(ids) + len(forget_ids)
    visual = np.zeros((n_classes, dim))
    text = np.zeros((n_classes, dim))
    kinds, owners = [], []
    for cid in ids:
        cat = categories[cid]
        visual[cat.answer_class] = P @ cat.image_prototype
        kinds.append(ANSWER)
        owners.append(cid)
    for cid, row in zip(forget_ids, refusal_rows):
        cat = categories[cid]
        visual[cat.refusal_class] = P @ row
        text[cat.refusal_class] = cfg.refusal_text_weight * cat.intent_prototype
        kinds.append(REFUSAL)
        owners.append(cid)
    return MockLM(visual_readout=as_matrix(visual, "visual_readout"),
                  text_readout=np.asarray(text), class_kinds=tuple(kinds),
                  class_categories=tuple(owners))


def _build_retain_pool(cfg: WorldConfig, categories: Dict[str, Category], forget_ids: List[str],
                       general: Mat) -> SampleSet:
    rng = make_rng(cfg.seed, "samples", "retain")
    retain_ids = [cid for cid, cat in categories.items() if cat.role == RETAIN]
    half = cfg.retain_samples // 2
    images, texts, owners, targets = [], [], [], []
    # (forget image, general instruction) pairs
    for i in range(half):
        cat = categories[forget_ids[i % len(forget_ids)]]
        images.append(cat.image_prototype)
        texts.append(general[rng.integers(len(general))])
        owners.append(cat.id)
        targets.append(cat.answer_class)
    # (never-forgotten image, own or general instruction) pairs
    for i in range(cfg.retain_samples - half):
        cat = categories[retain_ids[i % len(retain_ids)]]
        images.append(cat.image_prototype)
        if rng.random() < 0.5:
            texts.append(cat.intent_prototype)
        else:
            texts.append(general[rng.integers(len(general))])
        owners.append(cat.id)
        targets.append(cat.answer_class)
    return _make_samples(rng, "retain", np.array(images), np.array(texts), owners, targets, cfg.sample_noise)


def _build_benchmark_pool(cfg: WorldConfig, categories: Dict[str, Category], general: Mat) -> SampleSet:
    rng = make_rng(cfg.seed, "samples", "benchmark")
    images, texts, owners, targets = [], [], [], []
    for cid, cat in categories.items():
        if cat.role != BENCHMARK:
            continue
        for j in range(cfg.benchmark_samples_per_category):
            images.append(cat.image_prototype)
            texts.append(cat.intent_prototype if j % 2 == 0 else general[rng.integers(len(general))])
            owners.append(cid)
            targets.append(cat.answer_class)
    return _make_samples(rng, "bench", np.array(images), np.array(texts), owners, targets, cfg.sample_noise)
