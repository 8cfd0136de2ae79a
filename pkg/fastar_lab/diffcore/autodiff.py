"""Forward/backward driver and finite-difference gradient checking."""

from __future__ import annotations

import logging
from typing import Any, Callable, Mapping

import numpy as np

from fastar_lab.diffcore.tensor import Graph, Tensor
from fastar_lab.exceptions import DomainError, NonScalarObjectiveError

logger = logging.getLogger(__name__)

ParamArrays = dict[str, np.ndarray]
ObjectiveFn = Callable[..., Tensor | Mapping[str, Tensor]]

DEFAULT_STEP = 1e-3
# fourth-order central difference: f'(x) ~ sum(w_i f(x + o_i h)) / h
STENCIL_OFFSETS = (-2.0, -1.0, 1.0, 2.0)
STENCIL_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def forward_backward(
    fn: ObjectiveFn,
    params: Mapping[str, np.ndarray],
    inputs: Mapping[str, Any] | None = None,
    objective: str = "loss",
    frozen: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], ParamArrays]:
    """Run ``fn`` on a fresh tape and differentiate the designated scalar output.

    ``fn`` receives a mapping of leaf tensors (trainable ``params`` plus
    non-trainable ``frozen`` ones) followed by ``inputs`` as keyword
    arguments, and returns either the objective tensor or a mapping of named
    outputs containing ``objective``.
    """
    with Graph() as graph:
        leaves = {name: graph.leaf(name, value) for name, value in params.items()}
        for name, value in (frozen or {}).items():
            leaves[name] = graph.leaf(name, value, trainable=False)
        outputs = fn(leaves, **(inputs or {}))
        if isinstance(outputs, Tensor):
            outputs = {objective: outputs}
        target = outputs[objective]
        grads = graph.backward(target)
    return {name: out.data for name, out in outputs.items()}, grads


def _objective_value(fn: ObjectiveFn, params: Mapping[str, np.ndarray], inputs, objective: str) -> float:
    outputs = fn(dict(params), **(inputs or {}))
    target = outputs if isinstance(outputs, Tensor) else outputs[objective]
    if target.size != 1:
        raise NonScalarObjectiveError(target.shape)
    return target.item()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|a| + |n| + 1e-12) over elements; 0 for empty arrays."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    ratio = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(ratio.max())


def grad_check(
    fn: ObjectiveFn,
    point: Mapping[str, np.ndarray],
    h: float = DEFAULT_STEP,
    inputs: Mapping[str, Any] | None = None,
    objective: str = "loss",
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, float]]:
    """Compare reverse-mode gradients against fourth-order central differences, element by element.

    ``fn`` must be deterministic in its arguments (draw any noise from a
    freshly seeded generator inside the closure). Every coordinate is checked
    unless ``max_elements`` is given, in which case larger tensors are checked
    on a random subset of that many coordinates. Returns the maximum
    elementwise error and the per-parameter maxima.
    """
    if not 1e-7 <= h <= 1e-3:
        raise DomainError(f"finite-difference step h={h} outside [1e-7, 1e-3]")
    point = {name: np.array(value, dtype=np.float64) for name, value in point.items()}
    _, grads = forward_backward(fn, point, inputs=inputs, objective=objective)
    rng = rng or np.random.default_rng(0)

    errors: dict[str, float] = {}
    for name, value in point.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(coords.size)
        for j, k in enumerate(coords):
            original = flat[k]
            values = []
            for offset in STENCIL_OFFSETS:
                flat[k] = original + offset * h
                values.append(_objective_value(fn, point, inputs, objective))
            flat[k] = original
            numeric[j] = np.dot(STENCIL_WEIGHTS, values) / h
        errors[name] = relative_error(grads[name].reshape(-1)[coords], numeric)
        logger.debug("grad check %s: relative error %.3e over %d coordinates", name, errors[name], coords.size)
    return max(errors.values(), default=0.0), errors
