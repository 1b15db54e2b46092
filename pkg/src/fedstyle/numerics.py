"""Numeric kernels shared by every training path.

Three groups of things live here:

* stable scalar/vector primitives (temperature softmax, cosine similarity,
  clamped cross-entropy) with explicit domain checks,
* ``GradTape``: an ordered record of the primitive operations of a forward
  pass.  Each operation pushes a hand-derived vector-Jacobian rule; replaying
  the record in reverse accumulates exact gradients of a scalar loss into the
  designated leaf arrays.  This is not a general autodiff engine; the op set
  is exactly what the losses in this package need, nothing more,
* plain SGD and Adam with decoupled weight decay, plus a central
  finite-difference gradient checker used by the test suite.

Everything is float64.  Inputs are validated once at the boundary; a
non-finite value raises ``DomainError`` instead of propagating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, ParameterError

Array = np.ndarray

# Probabilities are clamped here before any log.
PROB_FLOOR = 1e-12

# Relative-error denominators are floored so finite-difference roundoff on
# near-zero coordinates does not dominate the ratio.
REL_ERR_FLOOR = 1e-3


def as_f64(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def require_finite(value: Array, name: str = "value") -> Array:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{name} contains a non-finite entry")
    return value


# ---------------------------------------------------------------------------
# scalar / vector primitives
# ---------------------------------------------------------------------------


def softmax(logits, temperature: float = 1.0) -> Array:
    """Temperature softmax of a 1-D logit vector.

    The maximum is subtracted before exponentiation, so any finite logit
    spread is safe.  ``temperature`` divides the logits and must be positive.
    """
    z = require_finite(as_f64(logits), "logits")
    if z.ndim != 1 or z.size == 0:
        raise ParameterError("logits must be a non-empty 1-D vector")
    if not temperature > 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors; a zero vector is a domain error."""
    va = require_finite(as_f64(a), "a")
    vb = require_finite(as_f64(b), "b")
    if va.shape != vb.shape or va.ndim != 1:
        raise ParameterError(f"shape mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


def cross_entropy(probs, label: int) -> float:
    """Negative log-probability of ``label`` under a distribution.

    ``probs`` must be non-negative and sum to one within 1e-6; the selected
    probability is clamped at ``PROB_FLOOR`` before the log.
    """
    p = require_finite(as_f64(probs), "probs")
    if p.ndim != 1 or p.size == 0:
        raise ParameterError("probs must be a non-empty 1-D vector")
    if not 0 <= int(label) < p.size:
        raise ParameterError(f"label {label} out of range for {p.size} classes")
    if p.min() < -1e-12 or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ParameterError("probs is not a probability distribution")
    return float(-np.log(max(float(p[int(label)]), PROB_FLOOR)))


def _softmax_rows(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------


class Node:
    """A value produced on a ``GradTape``; ``grad`` accumulates in backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value: Array, tracked: bool):
        self.value = value
        self.grad: Array | None = np.zeros_like(value) if tracked else None

    @property
    def tracked(self) -> bool:
        return self.grad is not None


class GradTape:
    """Ordered record of primitive operations for one scalar loss.

    The forward pass is executed eagerly through the op methods below; each
    op appends a closure implementing its hand-derived backward rule.
    ``backward(loss)`` seeds ``d loss / d loss = 1`` and replays the record
    in reverse, accumulating into every tracked node's ``grad`` buffer.
    Leaves are tracked, constants are not; an op output is tracked iff at
    least one input is, so untracked subgraphs cost nothing in reverse.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    # -- node creation ------------------------------------------------------

    def leaf(self, value: Array) -> Node:
        return Node(require_finite(as_f64(value), "leaf"), tracked=True)

    def const(self, value: Array) -> Node:
        return Node(require_finite(as_f64(value), "const"), tracked=False)

    def custom(
        self,
        value: Array,
        inputs: list[Node],
        vjp: Callable[[Array], list[Array]],
    ) -> Node:
        """Record an externally computed op with a caller-supplied VJP.

        ``vjp(out.grad)`` must return one gradient array per input, in
        order; each is accumulated into the inputs that are tracked.
        """
        out = self._out(require_finite(as_f64(value), "custom"), *inputs)
        if out.tracked:
            def backward():
                grads = vjp(out.grad)
                if len(grads) != len(inputs):
                    raise ParameterError("custom: vjp arity mismatch")
                for node, grad in zip(inputs, grads):
                    if node.tracked:
                        node.grad += grad
            self._ops.append(backward)
        return out

    def _out(self, value: Array, *inputs: Node) -> Node:
        return Node(value, tracked=any(n.tracked for n in inputs))

    # -- primitive ops ------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ParameterError("add: shape mismatch")
        out = self._out(a.value + b.value, a, b)
        if out.tracked:
            def backward():
                if a.tracked:
                    a.grad += out.grad
                if b.tracked:
                    b.grad += out.grad
            self._ops.append(backward)
        return out

    def affine_scalar(self, x: Node, scale: float, shift: float = 0.0) -> Node:
        """Elementwise scale * x + shift with float constants."""
        out = self._out(scale * x.value + shift, x)
        if out.tracked:
            def backward():
                x.grad += scale * out.grad
            self._ops.append(backward)
        return out

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        out = self._out(y, x)
        if out.tracked:
            def backward():
                x.grad += (1.0 - y * y) * out.grad
            self._ops.append(backward)
        return out

    def affine(self, x: Node, weight: Node, bias: Node) -> Node:
        """Row-batched affine map: (B, n) x (m, n) weight + (m,) bias -> (B, m)."""
        if x.value.ndim != 2 or weight.value.ndim != 2 or bias.value.ndim != 1:
            raise ParameterError("affine: expected 2-D input, 2-D weight, 1-D bias")
        if x.value.shape[1] != weight.value.shape[1] or weight.value.shape[0] != bias.value.shape[0]:
            raise ParameterError("affine: incompatible shapes")
        out = self._out(x.value @ weight.value.T + bias.value, x, weight, bias)
        if out.tracked:
            def backward():
                if weight.tracked:
                    weight.grad += out.grad.T @ x.value
                if bias.tracked:
                    bias.grad += out.grad.sum(axis=0)
                if x.tracked:
                    x.grad += out.grad @ weight.value
            self._ops.append(backward)
        return out

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """a @ b.T for (p, n) and (q, n) operands."""
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
            raise ParameterError("matmul_nt: incompatible shapes")
        out = self._out(a.value @ b.value.T, a, b)
        if out.tracked:
            def backward():
                if a.tracked:
                    a.grad += out.grad @ b.value
                if b.tracked:
                    b.grad += out.grad.T @ a.value
            self._ops.append(backward)
        return out

    def unit(self, x: Node, min_norm: float = 0.0) -> Node:
        """L2-normalize a vector, or each row of a matrix.

        A norm of zero, or below ``min_norm`` when one is given, is a
        degenerate direction and raises ``DomainError``.
        """
        if x.value.ndim == 1:
            n = float(np.linalg.norm(x.value))
            if n == 0.0 or n < min_norm:
                raise DomainError(f"degenerate direction: norm {n:.3e}")
            y = x.value / n
            out = self._out(y, x)
            if out.tracked:
                def backward():
                    g = out.grad
                    x.grad += (g - y * float(y @ g)) / n
                self._ops.append(backward)
            return out
        norms = np.linalg.norm(x.value, axis=1)
        if np.any(norms == 0.0) or (min_norm > 0.0 and np.any(norms < min_norm)):
            raise DomainError(f"degenerate direction: min row norm {norms.min():.3e}")
        y = x.value / norms[:, None]
        out = self._out(y, x)
        if out.tracked:
            def backward():
                g = out.grad
                x.grad += (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms[:, None]
            self._ops.append(backward)
        return out

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape or a.value.ndim != 1:
            raise ParameterError("dot: expected two equal-length vectors")
        out = self._out(np.asarray(a.value @ b.value), a, b)
        if out.tracked:
            def backward():
                if a.tracked:
                    a.grad += out.grad * b.value
                if b.tracked:
                    b.grad += out.grad * a.value
            self._ops.append(backward)
        return out

    def rowwise_dot(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape or a.value.ndim != 2:
            raise ParameterError("rowwise_dot: expected two equal-shape matrices")
        out = self._out(np.sum(a.value * b.value, axis=1), a, b)
        if out.tracked:
            def backward():
                g = out.grad[:, None]
                if a.tracked:
                    a.grad += g * b.value
                if b.tracked:
                    b.grad += g * a.value
            self._ops.append(backward)
        return out

    def row_mean(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise ParameterError("row_mean: expected a matrix")
        rows = x.value.shape[0]
        out = self._out(x.value.mean(axis=0), x)
        if out.tracked:
            def backward():
                x.grad += out.grad[None, :] / rows
            self._ops.append(backward)
        return out

    def mean(self, x: Node) -> Node:
        count = x.value.size
        out = self._out(np.asarray(x.value.mean()), x)
        if out.tracked:
            def backward():
                x.grad += out.grad / count
            self._ops.append(backward)
        return out

    def sum(self, x: Node) -> Node:
        out = self._out(np.asarray(x.value.sum()), x)
        if out.tracked:
            def backward():
                x.grad += out.grad
            self._ops.append(backward)
        return out

    def stack_scalars(self, parts: list[Node]) -> Node:
        out = self._out(np.array([float(p.value) for p in parts]), *parts)
        if out.tracked:
            def backward():
                for i, p in enumerate(parts):
                    if p.tracked:
                        p.grad += out.grad[i]
            self._ops.append(backward)
        return out

    def softmax_ce(self, logits: Node, label: int) -> Node:
        """Cross-entropy of softmax(logits) against an integer label."""
        if logits.value.ndim != 1:
            raise ParameterError("softmax_ce: expected a logit vector")
        if not 0 <= label < logits.value.size:
            raise ParameterError(f"label {label} out of range")
        z = logits.value - logits.value.max()
        e = np.exp(z)
        p = e / e.sum()
        loss = -np.log(max(float(p[label]), PROB_FLOOR))
        out = self._out(np.asarray(loss), logits)
        if out.tracked:
            def backward():
                g = p.copy()
                g[label] -= 1.0
                logits.grad += out.grad * g
            self._ops.append(backward)
        return out

    def softmax_ce_rows(self, logits: Node, labels: Array) -> Node:
        """Per-row cross-entropy of row softmax against integer labels."""
        if logits.value.ndim != 2:
            raise ParameterError("softmax_ce_rows: expected a logit matrix")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (logits.value.shape[0],):
            raise ParameterError("softmax_ce_rows: one label per row required")
        if labels.min() < 0 or labels.max() >= logits.value.shape[1]:
            raise ParameterError("softmax_ce_rows: label out of range")
        p = _softmax_rows(logits.value)
        rows = np.arange(labels.size)
        picked = np.maximum(p[rows, labels], PROB_FLOOR)
        out = self._out(-np.log(picked), logits)
        if out.tracked:
            def backward():
                g = p.copy()
                g[rows, labels] -= 1.0
                logits.grad += out.grad[:, None] * g
            self._ops.append(backward)
        return out

    # -- replay -------------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Seed d loss/d loss = 1 and replay the record in reverse."""
        if loss.value.ndim != 0:
            raise ParameterError("backward: loss must be a scalar node")
        if not loss.tracked:
            raise ParameterError("backward: loss does not depend on any leaf")
        require_finite(loss.value, "loss")
        loss.grad += 1.0
        for op in reversed(self._ops):
            op()


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_param_grads(params: dict[str, Array], grads: dict[str, Array]) -> None:
    if set(params) != set(grads):
        raise ParameterError(f"param/grad key mismatch: {sorted(params)} vs {sorted(grads)}")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ParameterError(f"shape mismatch for {name}")
        require_finite(grads[name], f"grad[{name}]")


@dataclass
class SgdState:
    learning_rate: float


def sgd_step(state: SgdState, params: dict[str, Array], grads: dict[str, Array]) -> dict[str, Array]:
    """One plain gradient step; returns a fresh parameter dict."""
    _check_param_grads(params, grads)
    return {name: params[name] - state.learning_rate * grads[name] for name in params}


@dataclass
class AdamState:
    """Adam with decoupled weight decay.

    The decay is applied multiplicatively to the parameter before the
    bias-corrected moment step, so it never enters the moment estimates.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: dict[str, Array] = field(default_factory=dict)
    second_moment: dict[str, Array] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, Array], grads: dict[str, Array]
) -> tuple[AdamState, dict[str, Array]]:
    """One Adam step; returns (updated state, fresh parameter dict)."""
    _check_param_grads(params, grads)
    t = state.step + 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    m = dict(state.first_moment)
    v = dict(state.second_moment)
    out: dict[str, Array] = {}
    for name in sorted(params):
        g = grads[name]
        p = params[name] * (1.0 - lr * state.weight_decay)
        m[name] = b1 * m.get(name, np.zeros_like(g)) + (1.0 - b1) * g
        v[name] = b2 * v.get(name, np.zeros_like(g)) + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**t)
        v_hat = v[name] / (1.0 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        learning_rate=lr,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        weight_decay=state.weight_decay,
        step=t,
        first_moment=m,
        second_moment=v,
    )
    return new_state, out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(
                f"{e.name}: max rel err {e.max_rel_error:.3e} at {e.worst_index} "
                f"(analytic {e.analytic:.6e}, numeric {e.numeric:.6e})"
            )
        verdict = "OK" if self.passed else "FAIL"
        lines.append(f"overall {self.max_rel_error:.3e} vs tolerance {self.tolerance:.1e}: {verdict}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[dict[str, Array]], tuple[float, dict[str, Array]]],
    params: dict[str, Array],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a parameter dict to ``(loss, grads)``.  Every coordinate
    of every parameter is perturbed by ±``step``; the relative error uses a
    denominator floored at ``REL_ERR_FLOOR`` (see module docstring).
    """
    if step <= 0:
        raise ParameterError("step must be positive")
    _, analytic = loss_fn(params)
    _check_param_grads(params, analytic)
    entries = []
    for name in sorted(params):
        base = params[name]
        worst = (0.0, (), 0.0, 0.0)
        for index in np.ndindex(base.shape if base.shape else (1,)):
            idx = index if base.shape else ()
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            f_plus, _ = loss_fn(plus)
            f_minus, _ = loss_fn(minus)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), REL_ERR_FLOOR)
            if rel > worst[0]:
                worst = (rel, idx, a, numeric)
        entries.append(GradCheckEntry(name, worst[0], worst[1], worst[2], worst[3]))
    return GradCheckReport(entries=entries, tolerance=tolerance)
