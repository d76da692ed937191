"""
Mixture of refusers and the router that engages them.

The router reads refined concept activations of both modalities, mixes the
two projected tokens with one multi-head self-attention block and emits one
logit per refuser. The top-k refusers are engaged; each is a bias-free linear
map whose output is added to the connected visual feature.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from .concepts import modulator_loss
from .config import RefusalConfig
from .errors import DataError, LabelError, ParameterError, RegistryError, ShapeError
from .numerics import Mat, Params, Vec, cosine_rows, make_rng, softmax
from .world import MockLM, decode_logits

logger = logging.getLogger(__name__)

SIGMOID_LOW = float(special.expit(-1.0))
SIGMOID_HIGH = float(special.expit(1.0))


@dataclass
class RefuserBank:
    weights: np.ndarray  # (N_R, d, d)

    @classmethod
    def initialise(cls, num_refusers: int, feature_dim: int, seed: int, scale: float) -> "RefuserBank":
        rng = make_rng(seed, "refusers")
        return cls(weights=scale * rng.standard_normal((num_refusers, feature_dim, feature_dim)))

    @property
    def num_refusers(self) -> int:
        return self.weights.shape[0]

    def params(self) -> Params:
        return {"refuser.weight": self.weights}

    def load_params(self, params: Params):
        if "refuser.weight" in params:
            self.weights = np.array(params["refuser.weight"], dtype=np.float64)


@dataclass(frozen=True)
class RouterOutput:
    logits: Vec
    F: Vec


@dataclass(frozen=True)
class GateVector:
    alpha: Vec
    selected: Tuple[int, ...]


@dataclass
class RouterCache:
    x_img: Mat
    x_txt: Mat
    X: np.ndarray
    Qh: np.ndarray
    Kh: np.ndarray
    Vh: np.ndarray
    attn: np.ndarray
    O: np.ndarray
    flat: Mat


class RouterState:
    """Two-token multi-head self-attention router with a linear logit head."""

    def __init__(self, params: Params, heads: int, temperature: float, top_k: int):
        self.params = params
        self.heads = heads
        self.temperature = temperature
        self.top_k = top_k
        if top_k < 1 or top_k > self.num_refusers:
            raise ParameterError(f"top_k must lie in [1, {self.num_refusers}], got {top_k}")
        if self.hidden_dim % heads:
            raise ParameterError(f"hidden dim {self.hidden_dim} not divisible by {heads} heads")

    @classmethod
    def initialise(cls, cfg: RefusalConfig, img_width: int, txt_width: int, seed: int) -> "RouterState":
        H, N = cfg.hidden_dim, cfg.num_refusers
        rng = make_rng(seed, "router")
        s = cfg.router_init_scale
        params = {
            "router.img_proj.weight": s * rng.standard_normal((H, img_width)),
            "router.img_proj.bias": np.zeros(H),
            "router.txt_proj.weight": s * rng.standard_normal((H, txt_width)),
            "router.txt_proj.bias": np.zeros(H),
            "router.attn.query": rng.standard_normal((H, H)) / np.sqrt(H),
            "router.attn.key": rng.standard_normal((H, H)) / np.sqrt(H),
            "router.attn.value": rng.standard_normal((H, H)) / np.sqrt(H),
            "router.attn.out": rng.standard_normal((H, H)) / np.sqrt(H),
            "router.head.weight": s * rng.standard_normal((N, 2 * H)),
            "router.head.bias": np.zeros(N),
        }
        return cls(params, heads=cfg.heads, temperature=cfg.temperature, top_k=cfg.top_k)

    @property
    def hidden_dim(self) -> int:
        return self.params["router.img_proj.weight"].shape[0]

    @property
    def num_refusers(self) -> int:
        return self.params["router.head.bias"].shape[0]

    @property
    def input_widths(self) -> Tuple[int, int]:
        return (self.params["router.img_proj.weight"].shape[1], self.params["router.txt_proj.weight"].shape[1])

    def pad(self, refined_img, refined_txt) -> Tuple[Mat, Mat]:
        """Zero-pad refined activations up to the router's fixed input widths."""
        refined_img = np.atleast_2d(np.asarray(refined_img, dtype=np.float64))
        refined_txt = np.atleast_2d(np.asarray(refined_txt, dtype=np.float64))
        w_img, w_txt = self.input_widths
        if refined_img.shape[1] > w_img or refined_txt.shape[1] > w_txt:
            raise RegistryError(
                f"refined activations ({refined_img.shape[1]}, {refined_txt.shape[1]}) exceed the "
                f"router input budget ({w_img}, {w_txt})"
            )
        x_img = np.zeros((refined_img.shape[0], w_img))
        x_img[:, : refined_img.shape[1]] = refined_img
        x_txt = np.zeros((refined_txt.shape[0], w_txt))
        x_txt[:, : refined_txt.shape[1]] = refined_txt
        return x_img, x_txt

    def forward(self, refined_img, refined_txt) -> Tuple[Mat, RouterCache]:
        p = self.params
        x_img, x_txt = self.pad(refined_img, refined_txt)
        B, H, h = x_img.shape[0], self.hidden_dim, self.heads
        dh = H // h
        t_img = x_img @ p["router.img_proj.weight"].T + p["router.img_proj.bias"]
        t_txt = x_txt @ p["router.txt_proj.weight"].T + p["router.txt_proj.bias"]
        X = np.stack([t_img, t_txt], axis=1)  # (B, 2, H)

        def split(T):
            return T.reshape(B, 2, h, dh).transpose(0, 2, 1, 3)

        Qh = split(X @ p["router.attn.query"])
        Kh = split(X @ p["router.attn.key"])
        Vh = split(X @ p["router.attn.value"])
        scores = Qh @ Kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        attn = special.softmax(scores, axis=-1)
        O = (attn @ Vh).transpose(0, 2, 1, 3).reshape(B, 2, H)
        Y = X + O @ p["router.attn.out"]
        flat = Y.reshape(B, 2 * H)
        logits = flat @ p["router.head.weight"].T + p["router.head.bias"]
        cache = RouterCache(x_img=x_img, x_txt=x_txt, X=X, Qh=Qh, Kh=Kh, Vh=Vh, attn=attn, O=O, flat=flat)
        return logits, cache

    def backward(self, cache: RouterCache, grad_logits) -> Params:
        p = self.params
        g = np.atleast_2d(grad_logits)
        B, H, h = g.shape[0], self.hidden_dim, self.heads
        dh = H // h
        scale = 1.0 / np.sqrt(dh)
        grads: Params = {
            "router.head.weight": g.T @ cache.flat,
            "router.head.bias": g.sum(axis=0),
        }
        dY = (g @ p["router.head.weight"]).reshape(B, 2, H)
        dX = dY.copy()
        grads["router.attn.out"] = np.einsum("bti,btj->ij", cache.O, dY)
        dO = dY @ p["router.attn.out"].T
        dOh = dO.reshape(B, 2, h, dh).transpose(0, 2, 1, 3)
        dA = dOh @ cache.Vh.transpose(0, 1, 3, 2)
        dVh = cache.attn.transpose(0, 1, 3, 2) @ dOh
        dS = cache.attn * (dA - np.sum(dA * cache.attn, axis=-1, keepdims=True))
        dQh = dS @ cache.Kh * scale
        dKh = dS.transpose(0, 1, 3, 2) @ cache.Qh * scale

        def merge(T):
            return T.transpose(0, 2, 1, 3).reshape(B, 2, H)

        for name, dproj in (("query", merge(dQh)), ("key", merge(dKh)), ("value", merge(dVh))):
            W = p[f"router.attn.{name}"]
            grads[f"router.attn.{name}"] = np.einsum("bti,btj->ij", cache.X, dproj)
            dX += dproj @ W.T

        dt_img, dt_txt = dX[:, 0, :], dX[:, 1, :]
        grads["router.img_proj.weight"] = dt_img.T @ cache.x_img
        grads["router.img_proj.bias"] = dt_img.sum(axis=0)
        grads["router.txt_proj.weight"] = dt_txt.T @ cache.x_txt
        grads["router.txt_proj.bias"] = dt_txt.sum(axis=0)
        return grads

    def load_params(self, params: Params):
        for name in self.params:
            if name in params:
                self.params[name] = np.array(params[name], dtype=np.float64)


def router_forward(router: RouterState, refined_img, refined_txt) -> RouterOutput:
    logits, _ = router.forward(refined_img, refined_txt)
    return RouterOutput(logits=logits[0], F=softmax(logits[0]))


def top_k_indices(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; ties go to the lower index."""
    logits = np.atleast_2d(logits)
    if k <= 0 or k > logits.shape[1]:
        raise ParameterError(f"k must lie in [1, {logits.shape[1]}], got {k}")
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def top_k_gates(logits, k: int) -> Mat:
    """Batched gate weights: softmax over the selected logits, zeros elsewhere."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    idx = top_k_indices(logits, k)
    rows = np.arange(logits.shape[0])[:, None]
    alpha = np.zeros_like(logits)
    alpha[rows, idx] = special.softmax(logits[rows, idx], axis=1)
    return alpha


def top_k_gate(output: RouterOutput, k: int) -> GateVector:
    alpha = top_k_gates(output.logits, k)[0]
    selected = tuple(int(i) for i in top_k_indices(output.logits, k)[0])
    return GateVector(alpha=alpha, selected=selected)


def mixture_delta(bank: RefuserBank, gate: GateVector, x_img) -> Vec:
    """ΔP = Σ_j α_j V_j x over the engaged refusers."""
    x_img = np.asarray(x_img, dtype=np.float64)
    if x_img.shape[-1] != bank.weights.shape[2] or gate.alpha.shape[0] != bank.num_refusers:
        raise ShapeError("refuser bank, gate and feature dimensions disagree")
    delta = np.zeros(bank.weights.shape[1])
    for j in gate.selected:
        delta += gate.alpha[j] * (bank.weights[j] @ x_img)
    return delta


def mixture_deltas(bank: RefuserBank, alpha, x_img) -> Mat:
    """Batched ``mixture_delta``; ``alpha`` rows are gate vectors."""
    return np.einsum("bj,jde,be->bd", np.atleast_2d(alpha), bank.weights, np.atleast_2d(x_img))


@dataclass(frozen=True)
class Relevance:
    raw: float
    rescaled: float
    degenerate: bool = False


def rescale_relevance(raw):
    return (raw - SIGMOID_LOW) / (SIGMOID_HIGH - SIGMOID_LOW)


def task_relevance(img_a, txt_a, img_b, txt_b) -> Relevance:
    """
    σ(cos_img · cos_txt) between two pairs of average activations, plus its
    affine rescale from [σ(-1), σ(1)] onto [0, 1].
    """
    values = relevance_matrix(np.atleast_2d(img_a), np.atleast_2d(txt_a),
                              np.atleast_2d(img_b), np.atleast_2d(txt_b))
    raw, degenerate = float(values[0][0, 0]), bool(values[1][0, 0])
    if degenerate:
        logger.warning("task relevance on a zero-norm average activation defined as σ(0)")
    return Relevance(raw=raw, rescaled=float(rescale_relevance(raw)), degenerate=degenerate)


def _cosine_matrix(A, B) -> Tuple[Mat, np.ndarray]:
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"activation widths differ: {A.shape[1]} vs {B.shape[1]}")
    na = np.linalg.norm(A, axis=1)[:, None]
    nb = np.linalg.norm(B, axis=1)[None, :]
    denom = na * nb
    ok = denom > 0
    return np.where(ok, (A @ B.T) / np.where(ok, denom, 1.0), 0.0), ~ok


def relevance_matrix(img_q, txt_q, img_r, txt_r) -> Tuple[Mat, np.ndarray]:
    """Raw relevance of each query row against each record row."""
    cos_img, bad_img = _cosine_matrix(img_q, img_r)
    cos_txt, bad_txt = _cosine_matrix(txt_q, txt_r)
    degenerate = bad_img | bad_txt
    raw = np.where(degenerate, 0.5, special.expit(cos_img * cos_txt))
    return raw, degenerate


@dataclass
class RoutingLoss:
    loss: float
    grad_F: Vec


@dataclass
class RoutingRecord:
    F: Vec
    relevance: float


def refusal_routing_loss(F_t, records: List[RoutingRecord], temperature: float,
                         anchor: Optional[float] = None) -> RoutingLoss:
    """
    Relevance-weighted pair of contrastive terms over earlier router outputs.

    Σ_t' r·ℓ₊ + (1−r)·ℓ₋ where ℓ± is the negative log-softmax of ±sim/τ over
    all earlier tasks and sim is cosine similarity. With ``anchor`` set, a
    reference entry of that fixed similarity joins both softmax normalisers;
    a single earlier task then no longer cancels out, and an output is pulled
    toward or pushed below the anchor rather than only ranked against the
    other records.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    F_t = np.asarray(F_t.F if isinstance(F_t, RouterOutput) else F_t, dtype=np.float64)
    if not records:
        return RoutingLoss(loss=0.0, grad_F=np.zeros_like(F_t))
    F_prev = np.array([rec.F for rec in records])
    if F_prev.shape[1] != F_t.shape[0]:
        raise ShapeError("router outputs differ in length")
    r = np.array([rec.relevance for rec in records])
    T = len(records)
    sims, grad_sims, _ = cosine_rows(np.tile(F_t, (T, 1)), F_prev)
    logits = sims if anchor is None else np.append(sims, anchor)
    log_pos = special.log_softmax(logits / temperature)[:T]
    log_neg = special.log_softmax(-logits / temperature)[:T]
    loss = -np.sum(r * log_pos + (1.0 - r) * log_neg)
    p_pos, p_neg = np.exp(log_pos), np.exp(log_neg)
    d_sims = (-r + r.sum() * p_pos + (1.0 - r) - (T - r.sum()) * p_neg) / temperature
    grad_F = np.sum(d_sims[:, None] * grad_sims, axis=0)
    return RoutingLoss(loss=float(loss), grad_F=grad_F)


def softmax_backward(F, grad_F) -> Vec:
    return F * (grad_F - np.dot(F, grad_F))


def routing_loss_logit_grads(batch_logits, records: List[RoutingRecord], temperature: float,
                             anchor: Optional[float] = None) -> Tuple[float, Mat]:
    """Routing loss on F = softmax(mean batch logits), with per-sample logit gradients."""
    batch_logits = np.atleast_2d(batch_logits)
    F = softmax(batch_logits.mean(axis=0))
    result = refusal_routing_loss(F, records, temperature, anchor)
    d_mean = softmax_backward(F, result.grad_F)
    return result.loss, np.tile(d_mean / batch_logits.shape[0], (batch_logits.shape[0], 1))


@dataclass
class ReplayLoss:
    loss: float
    grad_logits: Vec


def router_replay_loss(current, recorded) -> ReplayLoss:
    """KL(recorded ‖ softmax(current logits)); gradient is F − recorded."""
    logits = np.asarray(current.logits if isinstance(current, RouterOutput) else current, dtype=np.float64)
    recorded = np.asarray(recorded, dtype=np.float64)
    if logits.shape != recorded.shape:
        raise ShapeError("current and recorded router outputs differ in length")
    if abs(recorded.sum() - 1.0) > 1e-6 or np.any(recorded < 0):
        raise DataError(f"recorded router output is not a probability vector (sum {recorded.sum():.8f})")
    log_q = special.log_softmax(logits)
    nz = recorded > 0
    loss = float(np.sum(recorded[nz] * (np.log(recorded[nz]) - log_q[nz])))
    return ReplayLoss(loss=loss, grad_logits=np.exp(log_q) - recorded)


def refusal_ce_loss(logits, target):
    """Softmax cross-entropy of decoder logits against the target response class."""
    try:
        return modulator_loss(logits, target)
    except LabelError as exc:
        raise LabelError(f"unknown response class: {exc}") from None


@dataclass
class SteeredCE:
    loss: float
    grad_router_logits: Mat
    grad_bank: np.ndarray


def steered_ce(bank: RefuserBank, lm: MockLM, P: Mat, router_logits, top_k: int,
               x_img, x_txt, targets, beta: float = 1.0) -> SteeredCE:
    """
    Cross-entropy of the steered decoder given router logits.

    Top-k selection is constant per step; the gradient reaches the router
    logits only through the softmax over the selected entries, and refusers
    outside the selected set get zero gradient.
    """
    x_img = np.atleast_2d(x_img)
    x_txt = np.atleast_2d(x_txt)
    alpha = top_k_gates(router_logits, top_k)
    experts = np.einsum("jde,be->bjd", bank.weights, x_img)
    delta = np.einsum("bj,bjd->bd", alpha, experts)
    lm_logits = decode_logits(lm, x_img @ P.T + beta * delta, x_txt)
    ce = refusal_ce_loss(lm_logits, np.asarray(targets))
    g_delta = beta * (np.atleast_2d(ce.grad_logits) @ lm.visual_readout)
    grad_bank = np.einsum("bj,bd,be->jde", alpha, g_delta, x_img)
    d_alpha = np.einsum("bd,bjd->bj", g_delta, experts)
    d_logits = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
    return SteeredCE(loss=ce.loss, grad_router_logits=d_logits, grad_bank=grad_bank)


@dataclass
class RefusalObjective:
    loss: float
    grads: Params
    router_logits: Mat


def refusal_objective(router: RouterState, bank: RefuserBank, lm: MockLM, P: Mat,
                      refined_img, refined_txt, x_img, x_txt, targets, beta: float = 1.0) -> RefusalObjective:
    """Steered cross-entropy on a batch with gradients for the router and the refuser bank."""
    logits_r, cache = router.forward(refined_img, refined_txt)
    ce = steered_ce(bank, lm, P, logits_r, router.top_k, x_img, x_txt, targets, beta)
    grads = router.backward(cache, ce.grad_router_logits)
    grads["refuser.weight"] = ce.grad_bank
    return RefusalObjective(loss=ce.loss, grads=grads, router_logits=logits_r)


def activation_counts(router_logits, k: int, num_refusers: int) -> np.ndarray:
    """How often each refuser lands in the top-k set over a batch."""
    idx = top_k_indices(router_logits, k)
    return np.bincount(idx.ravel(), minlength=num_refusers)
