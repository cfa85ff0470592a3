"""Dense float64 kernels and a minimal reverse-mode tape.

Everything the network needs is covered by a fixed set of primitives:
matmul, add, add_bias, relu, row_scale, stack_rows, scale, and the fused
masked softmax / cross-entropy. There is deliberately no general autodiff;
each primitive wires its own backward rule.

Gradients are returned as a ``{Param: ndarray}`` dict by :func:`backward`
so that forward passes for independent documents can run concurrently and
be reduced serially.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateInputError, DimensionError, NumericError

# Rows whose sum is already this close to one are passed through unchanged,
# which makes row_normalize exactly idempotent (a second division by a
# sum ~1±1e-16 would otherwise shuffle last bits forever).
_NORMALIZED_BAND = 1e-12


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite entries in matrix value")
    return arr


class Var:
    """A node on the tape: a float64 array plus its backward wiring."""

    __slots__ = ("value", "parents", "bwd", "track")

    def __init__(self, value, parents=(), bwd=None, track=False):
        self.value = _as_matrix(value)
        self.parents: tuple[Var, ...] = tuple(parents)
        # bwd maps the output gradient to one gradient per parent
        self.bwd: Callable[[np.ndarray], tuple] | None = bwd
        self.track = track

    @property
    def shape(self):
        return self.value.shape


class Param(Var):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, track=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def matmul(a, b) -> Var:
    """Matrix product, differentiable w.r.t. both operands."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.value.shape} by {b.value.shape}"
        )
    out = a.value @ b.value

    def bwd(g):
        return g @ b.value.T, a.value.T @ g

    return Var(out, (a, b), bwd)


def add(a, b) -> Var:
    """Elementwise sum of two same-shape values."""
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"cannot add {a.value.shape} to {b.value.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def add_bias(x, bias) -> Var:
    """Add a length-d bias row to every row of an (m, d) matrix."""
    x, bias = _wrap(x), _wrap(bias)
    if bias.value.ndim != 1 or x.value.shape[1] != bias.value.shape[0]:
        raise DimensionError(
            f"bias {bias.value.shape} does not fit rows of {x.value.shape}"
        )
    return Var(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0)))


def relu(x) -> Var:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = _wrap(x)
    mask = x.value > 0.0

    def bwd(g):
        return (g * mask,)

    return Var(np.where(mask, x.value, 0.0), (x,), bwd)


def row_scale(x, scales: np.ndarray) -> Var:
    """Multiply row i of x by the constant scalar scales[i]."""
    x = _wrap(x)
    s = np.asarray(scales, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != x.value.shape[0]:
        raise DimensionError(f"scales {s.shape} do not fit rows of {x.value.shape}")
    col = s[:, None]

    def bwd(g):
        return (g * col,)

    return Var(x.value * col, (x,), bwd)


def scale(x, c: float) -> Var:
    """Multiply by a python scalar constant."""
    x = _wrap(x)
    return Var(x.value * c, (x,), lambda g: (g * c,))


def stack_rows(blocks: Sequence[Var | None], rows_per_block: int, width: int) -> Var:
    """Vertically stack fixed-size blocks; None blocks contribute zero rows.

    Used to expand the hidden states of a sliding window of mentions into
    one matrix whose rows line up with the adjacency columns.
    """
    parts = []
    parents = []
    slots = []  # row offset of each parent block in the output
    offset = 0
    for blk in blocks:
        if blk is None:
            parts.append(np.zeros((rows_per_block, width)))
        else:
            if blk.value.shape != (rows_per_block, width):
                raise DimensionError(
                    f"block shape {blk.value.shape} != ({rows_per_block}, {width})"
                )
            parts.append(blk.value)
            parents.append(blk)
            slots.append(offset)
        offset += rows_per_block
    if parts:
        out = np.concatenate(parts, axis=0)
    else:
        out = np.zeros((0, width))

    def bwd(g):
        return tuple(g[o : o + rows_per_block] for o in slots)

    return Var(out, tuple(parents), bwd)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Probabilities over unmasked slots; masked slots are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateInputError("softmax over fully masked scores")
    z = np.where(mask, scores, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


def softmax_xent(scores: Var, gold: int, mask: np.ndarray) -> tuple[np.ndarray, Var]:
    """Masked softmax plus cross-entropy against the gold slot.

    Returns the probability vector (plain array) and the scalar loss Var.
    Stabilized by max-subtraction so huge scores cannot overflow.
    """
    scores = _wrap(scores)
    if scores.value.ndim != 1:
        raise DimensionError(f"scores must be a vector, got {scores.value.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.value.shape:
        raise DimensionError(f"mask {mask.shape} does not fit scores {scores.value.shape}")
    if not mask.any():
        raise DegenerateInputError("all candidate slots are masked")
    if not (0 <= gold < mask.shape[0]) or not mask[gold]:
        raise ContractViolation(f"gold slot {gold} is masked or out of range")

    z = np.where(mask, scores.value, -np.inf)
    m = z[mask].max()
    shifted = z - m
    e = np.where(mask, np.exp(shifted), 0.0)
    total = e.sum()
    probs = e / total
    loss = np.log(total) - shifted[gold]

    def bwd(g):
        d = probs.copy()
        d[gold] -= 1.0
        return (g * d,)

    return probs, Var(loss, (scores,), bwd)


def row_normalize(a: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows pass through unchanged.

    Rows already summing to 1 within 1e-12 are returned as-is, so the
    operation is exactly idempotent.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0.0):
        raise ContractViolation("row_normalize requires nonnegative entries")
    out = np.array(a, copy=True)
    sums = out.sum(axis=-1)
    need = (sums > 0.0) & (np.abs(sums - 1.0) > _NORMALIZED_BAND)
    if out.ndim == 1:
        if need:
            out /= sums
    else:
        out[need] /= sums[need][:, None]
    return out


def backward(loss: Var) -> dict[Var, np.ndarray]:
    """Reverse sweep from a scalar loss; gradients keyed by tracked leaves."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got {loss.value.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    result: dict[Var, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.track:
            result[node] = result.get(node, 0.0) + g
        if node.bwd is None:
            continue
        for parent, pg in zip(node.parents, node.bwd(g)):
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def check_gradients(
    loss_fn: Callable[[], Var],
    params: Sequence[Param],
    epsilon: float = 1e-5,
    max_coords: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``loss_fn`` must be a deterministic closure over ``params``. When
    ``max_coords`` is positive, at most that many coordinates per parameter
    are sampled; otherwise every coordinate is checked.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ContractViolation(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite")
    grads = backward(loss)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        n = flat.shape[0]
        coords = range(n) if max_coords <= 0 or max_coords >= n else rng.choice(
            n, size=max_coords, replace=False
        )
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            hi = float(loss_fn().value)
            flat[c] = orig - epsilon
            lo = float(loss_fn().value)
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("loss is not finite during perturbation")
            numeric = (hi - lo) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


class SgdMomentum:
    """Plain SGD with momentum; velocity buffers are kept per parameter."""

    def __init__(self, params: Sequence[Param], learning_rate: float, momentum: float = 0.0):
        # learning_rate 0 is allowed as an explicit "inert" configuration
        if learning_rate < 0.0:
            raise ContractViolation(f"learning rate must be nonnegative, got {learning_rate}")
        if not (0.0 <= momentum < 1.0):
            raise ContractViolation(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {p: np.zeros_like(p.value) for p in self.params}

    def step(self, grads: dict[Var, np.ndarray]) -> None:
        """Apply one update in place; rejects non-finite gradients."""
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name}")
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            v = self.velocity[p]
            v *= self.momentum
            v += g
            p.value -= self.learning_rate * v
