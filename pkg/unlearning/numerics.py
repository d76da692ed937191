"""
Numerical substrate: linear layers, softmax, cosine similarity, Adam and a
finite-difference gradient checker.

Vectors and matrices are plain float64 numpy arrays. Every analytic gradient
in the package is hand-derived and verified with ``finite_diff_check``.
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy import special

from .errors import GradientCheckError, OptimizerError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Vec = npt.NDArray[np.float64]
Mat = npt.NDArray[np.float64]
Params = Dict[str, np.ndarray]
LossFn = Callable[[Params], Tuple[float, Params]]


def as_vector(values, name: str = "vector") -> Vec:
    """Coerce to a finite 1-D float64 array."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ShapeError(f"{name} contains non-finite entries")
    return vec


def as_matrix(values, name: str = "matrix") -> Mat:
    """Coerce to a finite 2-D float64 array."""
    mat = np.asarray(values, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ShapeError(f"{name} contains non-finite entries")
    return mat


def make_rng(seed: int, *labels: str) -> np.random.Generator:
    """
    Derive an independent generator from the run seed and a label path.

    The same (seed, labels) pair always yields the same stream, so world
    generation and parameter initialisation never depend on call order.
    """
    spawn_key = tuple(zlib.crc32(label.encode("utf-8")) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


def linear_forward(W, b, x) -> np.ndarray:
    """
    Affine map ``W·x + b``.

    ``x`` may be a single vector or a batch of row vectors; ``b`` may be None.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match weight cols {W.shape[1]}")
    y = x @ W.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match weight rows {W.shape[0]}")
        y = y + b
    return y


def softmax(z, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax with max-subtraction (delegated to scipy)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    return special.softmax(z / temperature, axis=axis)


class DegeneracyCounter:
    """Counts zero-norm cosine evaluations so runs can report them."""

    def __init__(self):
        self.count = 0

    def record(self, n: int = 1):
        self.count += int(n)

    def reset(self):
        self.count = 0


DEGENERACY = DegeneracyCounter()


def cosine_sim_flagged(a, b) -> Tuple[float, bool]:
    """Cosine similarity plus a flag set when either input has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine inputs differ in shape: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        DEGENERACY.record()
        return 0.0, True
    value = float(np.dot(a, b) / (na * nb))
    return float(np.clip(value, -1.0, 1.0)), False


def cosine_sim(a, b) -> float:
    value, degenerate = cosine_sim_flagged(a, b)
    if degenerate:
        logger.warning("cosine similarity of a zero-norm vector defined as 0")
    return value


def cosine_rows(A, B) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Row-wise cosine similarity and its gradient with respect to ``A``.

    Returns (values, grad_A, degenerate_mask). Degenerate rows have value 0
    and zero gradient.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise ShapeError(f"cosine inputs differ in shape: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na > 0) & (nb > 0)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)
    values = np.where(ok, np.sum(A * B, axis=1) / (safe_na * safe_nb), 0.0)
    grad = B / (safe_na * safe_nb)[:, None] - values[:, None] * A / (safe_na ** 2)[:, None]
    grad = np.where(ok[:, None], grad, 0.0)
    degenerate = ~ok
    if degenerate.any():
        DEGENERACY.record(int(degenerate.sum()))
    return values, grad, degenerate


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(state: AdamState, params: Params, grads: Params) -> Tuple[Params, AdamState]:
    """
    One bias-corrected Adam update.

    Parameters without a gradient entry are passed through untouched (frozen).
    Returns a new parameter dict; the optimizer state is updated in place.
    """
    for name in sorted(grads):
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(params[name]):
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter '{name}' {np.shape(params[name])}"
            )
        bad = np.argwhere(~np.isfinite(g))
        if bad.size:
            index = tuple(int(i) for i in bad[0])
            raise OptimizerError(
                f"non-finite gradient for parameter '{name}' at index {index}",
                parameter=name, index=index,
            )

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = dict(params)
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        step = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        updated[name] = np.asarray(params[name], dtype=np.float64) - step
    return updated, state


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    worst_index: tuple
    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(loss_fn: LossFn, params: Params, step: float = 1e-5,
                      tolerance: float = 1e-4, only: Optional[list] = None) -> GradCheckReport:
    """
    Compare the analytic gradient of ``loss_fn`` against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``. Parameters missing from
    ``grads`` are checked against a zero analytic gradient, so a forgotten
    gradient shows up as a failure.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ParameterError(f"finite-difference step must lie in [1e-6, 1e-3], got {step}")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss, grads = loss_fn(base)
    if not np.isfinite(loss):
        raise GradientCheckError("loss is non-finite at the unperturbed point")

    worst = (0.0, "", ())
    per_parameter: Dict[str, float] = {}
    names = sorted(base) if only is None else sorted(only)
    for name in names:
        analytic = np.asarray(grads.get(name, np.zeros_like(base[name])), dtype=np.float64)
        param_worst = 0.0
        for index in np.ndindex(base[name].shape):
            original = base[name][index]
            values = []
            for sign in (1.0, -1.0):
                base[name][index] = original + sign * step
                shifted, _ = loss_fn(base)
                if not np.isfinite(shifted):
                    base[name][index] = original
                    raise GradientCheckError(
                        f"loss is non-finite at {name}{list(index)} {'+' if sign > 0 else '-'}{step}"
                    )
                values.append(shifted)
            base[name][index] = original
            numeric = (values[0] - values[1]) / (2.0 * step)
            err = relative_error(float(analytic[index]), float(numeric))
            if err > param_worst:
                param_worst = err
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in index))
        per_parameter[name] = param_worst
    return GradCheckReport(
        max_relative_error=worst[0], worst_parameter=worst[1], worst_index=worst[2],
        tolerance=tolerance, per_parameter=per_parameter,
    )
