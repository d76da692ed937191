"""
Concept recognition and refinement.

Each forget category owns one linear concept module per modality. Their
outputs are concatenated into a modality-wide activation vector whose block
layout follows registration order (ascending task, then category id). A
linear modulator classifies the concatenated activations and its weights
rescale the per-category blocks.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import special

from .errors import LabelError, ParameterError, RegistryError, ShapeError
from .numerics import Mat, Params, Vec, cosine_rows, linear_forward, make_rng

logger = logging.getLogger(__name__)

MODALITIES = ("img", "txt")


@dataclass
class ConceptModule:
    category_id: str
    modality: str
    weights: Mat
    bias: Vec

    @property
    def num_concepts(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ConceptActivations:
    modality: str
    values: Vec
    block_index: Dict[str, slice]

    def block(self, category_id: str) -> Vec:
        return self.values[self.block_index[category_id]]

    @property
    def blocks(self) -> List[Vec]:
        return [self.values[s] for s in self.block_index.values()]


@dataclass(frozen=True)
class RefinedActivations:
    modality: str
    values: Vec
    block_index: Dict[str, slice]
    weights: Vec

    @property
    def blocks(self) -> List[Vec]:
        return [self.values[s] for s in self.block_index.values()]


def _block_index(modules: List[ConceptModule]) -> Dict[str, slice]:
    index, start = {}, 0
    for module in modules:
        if module.category_id in index:
            raise RegistryError(f"duplicate concept module for category '{module.category_id}'")
        index[module.category_id] = slice(start, start + module.num_concepts)
        start += module.num_concepts
    return index


def concept_activations(modules: List[ConceptModule], feature) -> ConceptActivations:
    """Concatenate every module's linear response to ``feature`` (one modality)."""
    if not modules:
        raise RegistryError("no concept modules registered")
    modality = modules[0].modality
    if any(m.modality != modality for m in modules):
        raise RegistryError("concept modules of mixed modalities")
    index = _block_index(modules)
    values = np.concatenate([linear_forward(m.weights, m.bias, feature) for m in modules])
    return ConceptActivations(modality=modality, values=values, block_index=index)


class ConceptRegistry:
    """Concept modules for every forget category seen so far, per modality."""

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.category_ids: List[str] = []
        self.modules: Dict[str, Dict[str, ConceptModule]] = {q: {} for q in MODALITIES}

    def __contains__(self, category_id: str) -> bool:
        return category_id in self.modules["img"]

    def add_category(self, category_id: str, num_concepts: int, seed: int, init_scale: float,
                     initial_weights: Optional[Dict[str, Mat]] = None):
        """
        Register one module per modality for ``category_id``.

        ``initial_weights`` maps modality to a (num_concepts, feature_dim)
        start matrix, typically the category's concept embeddings; modalities
        it omits start from a scaled Gaussian. Biases always start at zero.
        """
        if category_id in self:
            raise RegistryError(f"duplicate concept module for category '{category_id}'")
        initial_weights = initial_weights or {}
        built = {}
        for modality in MODALITIES:
            if modality in initial_weights:
                weights = np.array(initial_weights[modality], dtype=np.float64)
                if weights.shape != (num_concepts, self.feature_dim):
                    raise ShapeError(
                        f"initial {modality} weights for '{category_id}' have shape {weights.shape}, "
                        f"expected {(num_concepts, self.feature_dim)}"
                    )
            else:
                rng = make_rng(seed, "concept-init", category_id, modality)
                weights = init_scale * rng.standard_normal((num_concepts, self.feature_dim))
            built[modality] = ConceptModule(
                category_id=category_id,
                modality=modality,
                weights=weights,
                bias=np.zeros(num_concepts),
            )
        for modality, module in built.items():
            self.modules[modality][category_id] = module
        self.category_ids.append(category_id)

    def ordered(self, modality: str) -> List[ConceptModule]:
        return [self.modules[modality][cid] for cid in self.category_ids]

    def block_index(self, modality: str) -> Dict[str, slice]:
        return _block_index(self.ordered(modality))

    def block_sizes(self, modality: str) -> List[int]:
        return [m.num_concepts for m in self.ordered(modality)]

    def width(self, modality: str) -> int:
        return int(sum(self.block_sizes(modality)))

    def stacked(self, modality: str) -> Tuple[Mat, Vec]:
        modules = self.ordered(modality)
        if not modules:
            raise RegistryError("no concept modules registered")
        return np.vstack([m.weights for m in modules]), np.concatenate([m.bias for m in modules])

    def forward(self, modality: str, features) -> Mat:
        """Batched concept activations, one row per feature."""
        W, b = self.stacked(modality)
        return linear_forward(W, b, np.atleast_2d(features))

    def backward(self, modality: str, features, grad_activations) -> Params:
        features = np.atleast_2d(features)
        grads: Params = {}
        for cid, block in self.block_index(modality).items():
            g = grad_activations[:, block]
            grads[param_name(modality, cid, "weight")] = g.T @ features
            grads[param_name(modality, cid, "bias")] = g.sum(axis=0)
        return grads

    def params(self) -> Params:
        out: Params = {}
        for modality in MODALITIES:
            for module in self.ordered(modality):
                out[param_name(modality, module.category_id, "weight")] = module.weights
                out[param_name(modality, module.category_id, "bias")] = module.bias
        return out

    def load_params(self, params: Params):
        for modality in MODALITIES:
            for module in self.ordered(modality):
                w = params.get(param_name(modality, module.category_id, "weight"))
                b = params.get(param_name(modality, module.category_id, "bias"))
                if w is not None:
                    if w.shape != module.weights.shape:
                        raise ShapeError(f"concept weight shape mismatch for {module.category_id}")
                    module.weights = np.array(w, dtype=np.float64)
                if b is not None:
                    module.bias = np.array(b, dtype=np.float64)


def param_name(modality: str, category_id: str, kind: str) -> str:
    return f"concept.{modality}.{category_id}.{kind}"


@dataclass
class AlignmentLoss:
    loss: float
    grad_img: Mat
    grad_txt: Mat
    degenerate: int


def concept_alignment_loss(E_img, E_txt, target_img, target_txt) -> AlignmentLoss:
    """
    ``-Σ_q mean_i cos(E_q,i, Ê_q,i)`` and its gradient with respect to E.

    Rows with a zero-norm activation contribute 0 and are counted.
    """
    E_img, E_txt = np.atleast_2d(E_img), np.atleast_2d(E_txt)
    target_img, target_txt = np.atleast_2d(target_img), np.atleast_2d(target_txt)
    if E_img.shape != target_img.shape or E_txt.shape != target_txt.shape:
        raise ShapeError("concept activations and targets differ in shape")
    batch = E_img.shape[0]
    cos_img, g_img, deg_img = cosine_rows(E_img, target_img)
    cos_txt, g_txt, deg_txt = cosine_rows(E_txt, target_txt)
    loss = -(cos_img.mean() + cos_txt.mean())
    return AlignmentLoss(
        loss=float(loss), grad_img=-g_img / batch, grad_txt=-g_txt / batch,
        degenerate=int(deg_img.sum() + deg_txt.sum()),
    )


@dataclass
class ModulatorState:
    weights: Mat
    bias: Vec
    category_ids: List[str]
    img_width: int
    txt_width: int

    @classmethod
    def empty(cls) -> "ModulatorState":
        return cls(weights=np.zeros((0, 0)), bias=np.zeros(0), category_ids=[], img_width=0, txt_width=0)

    @property
    def num_categories(self) -> int:
        return len(self.category_ids)

    def grow(self, new_category_ids: List[str], new_img_width: int, new_txt_width: int) -> "ModulatorState":
        """
        Append zero rows for new categories and zero columns for their concepts.

        Columns of existing concepts keep their values, so logits of earlier
        categories are unchanged for any input.
        """
        if new_img_width < self.img_width or new_txt_width < self.txt_width:
            raise RegistryError("modulator can only grow")
        dup = set(new_category_ids) & set(self.category_ids)
        if dup:
            raise RegistryError(f"categories already in modulator: {sorted(dup)}")
        rows = self.num_categories + len(new_category_ids)
        weights = np.zeros((rows, new_img_width + new_txt_width))
        old_rows = self.num_categories
        weights[:old_rows, : self.img_width] = self.weights[:, : self.img_width]
        weights[:old_rows, new_img_width: new_img_width + self.txt_width] = self.weights[:, self.img_width:]
        bias = np.concatenate([self.bias, np.zeros(len(new_category_ids))])
        return ModulatorState(weights=weights, bias=bias,
                              category_ids=self.category_ids + list(new_category_ids),
                              img_width=new_img_width, txt_width=new_txt_width)

    def params(self) -> Params:
        return {"modulator.weight": self.weights, "modulator.bias": self.bias}

    def load_params(self, params: Params):
        if "modulator.weight" in params:
            self.weights = np.array(params["modulator.weight"], dtype=np.float64)
        if "modulator.bias" in params:
            self.bias = np.array(params["modulator.bias"], dtype=np.float64)


@dataclass
class ModulatorOutput:
    logits: np.ndarray
    m: np.ndarray


def modulator_forward(M: ModulatorState, E_img, E_txt, activation: str = "softmax") -> ModulatorOutput:
    """Linear classifier over concatenated activations; m = softmax (or sigmoid) of logits."""
    E_img = np.asarray(E_img, dtype=np.float64)
    E_txt = np.asarray(E_txt, dtype=np.float64)
    if E_img.shape[-1] != M.img_width or E_txt.shape[-1] != M.txt_width:
        raise RegistryError(
            f"modulator expects widths ({M.img_width}, {M.txt_width}), got "
            f"({E_img.shape[-1]}, {E_txt.shape[-1]}); expand the modulator first"
        )
    z = np.concatenate([E_img, E_txt], axis=-1)
    logits = linear_forward(M.weights, M.bias, z)
    if activation == "softmax":
        m = special.softmax(logits, axis=-1)
    elif activation == "sigmoid":
        m = special.expit(logits)
    else:
        raise ParameterError(f"unknown modulator activation '{activation}'")
    return ModulatorOutput(logits=logits, m=m)


def uniform_weights(num_categories: int, batch: Optional[int] = None) -> np.ndarray:
    m = np.full(num_categories, 1.0 / num_categories)
    return m if batch is None else np.tile(m, (batch, 1))


@dataclass
class ClassificationLoss:
    loss: float
    grad_logits: np.ndarray


def modulator_loss(logits, true_index) -> ClassificationLoss:
    """
    Softmax cross-entropy averaged over the batch.

    ``true_index`` is an int (single logit vector) or an int array (batch).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits2 = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(true_index))
    if labels.shape[0] != logits2.shape[0]:
        raise LabelError("one label per logit row is required")
    if np.any(labels < 0) or np.any(labels >= logits2.shape[1]):
        raise LabelError(f"label outside [0, {logits2.shape[1]})")
    log_p = special.log_softmax(logits2, axis=1)
    batch = logits2.shape[0]
    loss = -log_p[np.arange(batch), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return ClassificationLoss(loss=float(loss), grad_logits=grad[0] if single else grad)


def modulator_backward(M: ModulatorState, E_img, E_txt, grad_logits) -> Tuple[Params, Mat, Mat]:
    """Propagate logit gradients into modulator parameters and the two activation inputs."""
    z = np.concatenate([np.atleast_2d(E_img), np.atleast_2d(E_txt)], axis=-1)
    g = np.atleast_2d(grad_logits)
    grads = {"modulator.weight": g.T @ z, "modulator.bias": g.sum(axis=0)}
    dz = g @ M.weights
    return grads, dz[:, : M.img_width], dz[:, M.img_width:]


def expand_weights(m, block_sizes: List[int]) -> np.ndarray:
    """Repeat each category weight across its concept block."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != len(block_sizes):
        raise ShapeError(f"{m.shape[-1]} weights for {len(block_sizes)} category blocks")
    return np.repeat(m, block_sizes, axis=-1)


def refine(E: ConceptActivations, m) -> RefinedActivations:
    """Scale block k of the activations by m_k."""
    m = np.asarray(m, dtype=np.float64)
    sizes = [s.stop - s.start for s in E.block_index.values()]
    if m.shape != (len(sizes),):
        raise ShapeError(f"{m.shape} weights for {len(sizes)} category blocks")
    return RefinedActivations(
        modality=E.modality, values=E.values * expand_weights(m, sizes),
        block_index=dict(E.block_index), weights=m,
    )


def refine_batch(E, m, block_sizes: List[int]) -> Mat:
    return np.atleast_2d(E) * expand_weights(np.atleast_2d(m), block_sizes)
