"""Reverse-mode automatic differentiation over vector operations.

A Tape is a Wengert list rebuilt per batch: each primitive appends a record
(op kind, input node ids, output node id, cached aux) and backward walks the
records in reverse. Node values are float64 numpy arrays, either unbatched
``(d,)`` or batched ``(batch, d)``; reductions produce 0-d arrays. Parameters
live in a ParamStore keyed by slot name, and backward returns gradients keyed
the same way, which is what the two optimizers consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import RngStream


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax for (c,) or (batch, c) arrays."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


class ParamStore:
    """Named flat parameter slots with frozen shapes and a generation counter."""

    def __init__(self):
        self._slots: dict[str, np.ndarray] = {}
        self.generation = 0

    def register(self, name: str, value: np.ndarray) -> None:
        if name in self._slots:
            raise ContractError(f"slot {name!r} already registered")
        self._slots[name] = np.array(value, dtype=np.float64)
        self.generation += 1

    def get(self, name: str) -> np.ndarray:
        return self._slots[name]

    def set_(self, name: str, value: np.ndarray) -> None:
        cur = self._slots[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ShapeError(f"slot {name!r} has shape {cur.shape}, got {value.shape}")
        self._slots[name] = value
        self.generation += 1

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._slots if n.startswith(prefix))

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self._slots[n].copy() for n in self.names(prefix)}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            if n in self._slots:
                self.set_(n, v)
            else:
                self.register(n, v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were added or broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


@dataclass
class _Record:
    op: str
    out: int
    inputs: tuple[int, ...]
    aux: object = None


class Tape:
    """Define-by-run computation record; build a fresh one per batch."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[_Record] = []
        self._param_nodes: list[tuple[int, str]] = []

    # -- node construction -------------------------------------------------

    def _push(self, value: np.ndarray) -> int:
        self.values.append(np.asarray(value, dtype=np.float64))
        return len(self.values) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def constant(self, value) -> int:
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, store: ParamStore, name: str) -> int:
        node = self._push(store.get(name))
        self._param_nodes.append((node, name))
        return node

    def _emit(self, op: str, value: np.ndarray, inputs: tuple[int, ...], aux=None) -> int:
        out = self._push(value)
        self.records.append(_Record(op, out, inputs, aux))
        return out

    # -- primitives ----------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return self._emit("add", self.values[a] + self.values[b], (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._emit("sub", self.values[a] - self.values[b], (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._emit("mul", self.values[a] * self.values[b], (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._emit("scale", self.values[a] * c, (a,), c)

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    def affine(self, x: int, w: int, b: int) -> int:
        xv, wv, bv = self.values[x], self.values[w], self.values[b]
        if xv.shape[-1] != wv.shape[1]:
            raise ShapeError(f"affine: x dim {xv.shape[-1]} vs weight in-dim {wv.shape[1]}")
        return self._emit("affine", xv @ wv.T + bv, (x, w, b))

    def tanh(self, a: int) -> int:
        return self._emit("tanh", np.tanh(self.values[a]), (a,))

    def sigmoid(self, a: int) -> int:
        return self._emit("sigmoid", 1.0 / (1.0 + np.exp(-self.values[a])), (a,))

    def relu(self, a: int) -> int:
        return self._emit("relu", np.maximum(self.values[a], 0.0), (a,))

    def leaky_relu(self, a: int, slope: float = 0.2) -> int:
        v = self.values[a]
        return self._emit("lrelu", np.where(v > 0, v, slope * v), (a,), slope)

    def exp(self, a: int) -> int:
        return self._emit("exp", np.exp(self.values[a]), (a,))

    def log(self, a: int) -> int:
        return self._emit("log", np.log(self.values[a]), (a,))

    def square(self, a: int) -> int:
        return self._emit("square", self.values[a] ** 2, (a,))

    def clamp(self, a: int, lo: float, hi: float) -> int:
        return self._emit("clamp", np.clip(self.values[a], lo, hi), (a,), (lo, hi))

    def slice_last(self, a: int, start: int, stop: int) -> int:
        return self._emit("slice_last", self.values[a][..., start:stop], (a,), (start, stop))

    def sum_last(self, a: int) -> int:
        return self._emit("sum_last", self.values[a].sum(axis=-1), (a,))

    def sum_all(self, a: int) -> int:
        return self._emit("sum_all", self.values[a].sum(), (a,))

    def mean_all(self, a: int) -> int:
        return self._emit("mean_all", self.values[a].mean(), (a,))

    def l1_diff(self, a: int, b: int) -> int:
        """Per-row L1 distance: (batch, d) -> (batch,), or (d,) -> scalar."""
        return self._emit("l1_diff", np.abs(self.values[a] - self.values[b]).sum(axis=-1), (a, b))

    def sq_dist(self, a: int, b: int) -> int:
        """Per-row squared Euclidean distance."""
        d = self.values[a] - self.values[b]
        return self._emit("sq_dist", (d * d).sum(axis=-1), (a, b))

    def softmax_ce(self, logits: int, labels: np.ndarray) -> int:
        """Per-row cross-entropy of softmax(logits) against integer labels."""
        z = self.values[logits]
        labels = np.asarray(labels, dtype=np.int64)
        m = z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z - m).sum(axis=-1)) + m.squeeze(-1)
        picked = np.take_along_axis(
            z.reshape(-1, z.shape[-1]), labels.reshape(-1, 1), axis=1
        ).reshape(labels.shape)
        return self._emit("softmax_ce", lse - picked, (logits,), labels)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        if self.values[loss].ndim != 0:
            raise ContractError(f"loss node must be scalar, got shape {self.values[loss].shape}")
        grads: dict[int, np.ndarray] = {loss: np.asarray(1.0)}

        def acc(node: int, g: np.ndarray) -> None:
            g = _unbroadcast(np.asarray(g), self.values[node].shape)
            if node in grads:
                grads[node] = grads[node] + g
            else:
                grads[node] = g

        for rec in reversed(self.records):
            if rec.out not in grads:
                continue
            g = grads[rec.out]
            v = [self.values[i] for i in rec.inputs]
            if rec.op == "add":
                acc(rec.inputs[0], g)
                acc(rec.inputs[1], g)
            elif rec.op == "sub":
                acc(rec.inputs[0], g)
                acc(rec.inputs[1], -g)
            elif rec.op == "mul":
                acc(rec.inputs[0], g * v[1])
                acc(rec.inputs[1], g * v[0])
            elif rec.op == "scale":
                acc(rec.inputs[0], g * rec.aux)
            elif rec.op == "affine":
                xv, wv, _ = v
                gx = g @ wv
                if xv.ndim == 2:
                    gw = g.T @ xv
                    gb = g.sum(axis=0)
                else:
                    gw = np.outer(g, xv)
                    gb = g
                acc(rec.inputs[0], gx)
                acc(rec.inputs[1], gw)
                acc(rec.inputs[2], gb)
            elif rec.op == "tanh":
                acc(rec.inputs[0], g * (1.0 - self.values[rec.out] ** 2))
            elif rec.op == "sigmoid":
                s = self.values[rec.out]
                acc(rec.inputs[0], g * s * (1.0 - s))
            elif rec.op == "relu":
                acc(rec.inputs[0], g * (v[0] > 0))
            elif rec.op == "lrelu":
                acc(rec.inputs[0], g * np.where(v[0] > 0, 1.0, rec.aux))
            elif rec.op == "exp":
                acc(rec.inputs[0], g * self.values[rec.out])
            elif rec.op == "log":
                acc(rec.inputs[0], g / v[0])
            elif rec.op == "square":
                acc(rec.inputs[0], g * 2.0 * v[0])
            elif rec.op == "clamp":
                lo, hi = rec.aux
                inside = (v[0] >= lo) & (v[0] <= hi)
                acc(rec.inputs[0], g * inside)
            elif rec.op == "slice_last":
                start, stop = rec.aux
                full = np.zeros_like(v[0])
                full[..., start:stop] = g
                acc(rec.inputs[0], full)
            elif rec.op == "sum_last":
                acc(rec.inputs[0], np.expand_dims(g, -1) * np.ones_like(v[0]))
            elif rec.op == "sum_all":
                acc(rec.inputs[0], g * np.ones_like(v[0]))
            elif rec.op == "mean_all":
                acc(rec.inputs[0], g * np.ones_like(v[0]) / v[0].size)
            elif rec.op == "l1_diff":
                sg = np.sign(v[0] - v[1]) * np.expand_dims(g, -1)
                acc(rec.inputs[0], sg)
                acc(rec.inputs[1], -sg)
            elif rec.op == "sq_dist":
                d = 2.0 * (v[0] - v[1]) * np.expand_dims(g, -1)
                acc(rec.inputs[0], d)
                acc(rec.inputs[1], -d)
            elif rec.op == "softmax_ce":
                z = v[0]
                p = softmax(z)
                labels = rec.aux
                onehot = np.zeros_like(p.reshape(-1, p.shape[-1]))
                onehot[np.arange(onehot.shape[0]), labels.reshape(-1)] = 1.0
                acc(rec.inputs[0], (p - onehot.reshape(p.shape)) * np.expand_dims(g, -1))
            else:  # pragma: no cover
                raise ContractError(f"unknown op {rec.op!r}")

        out: dict[str, np.ndarray] = {}
        for node, name in self._param_nodes:
            if node in grads:
                g = grads[node]
                out[name] = out[name] + g if name in out else g
        return out


# ---------------------------------------------------------------------------
# Multilayer perceptrons
# ---------------------------------------------------------------------------

_HIDDEN_ACTS = ("tanh", "relu", "lrelu")
_OUT_ACTS = ("linear", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) plus hidden/output activation names."""

    widths: tuple[int, ...]
    hidden_act: str = "tanh"
    out_act: str = "linear"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ContractError(f"need at least one layer of positive width, got {self.widths}")
        if self.hidden_act not in _HIDDEN_ACTS:
            raise ContractError(f"unknown hidden activation {self.hidden_act!r}")
        if self.out_act not in _OUT_ACTS:
            raise ContractError(f"unknown output activation {self.out_act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def mlp_init(
    spec: MlpSpec,
    store: ParamStore,
    prefix: str,
    rng: RngStream,
    scale: float = 0.02,
    identity: bool = False,
) -> RngStream:
    """Register an MLP's weight/bias slots under ``prefix``.

    identity=True adds the identity to each square weight matrix, the
    near-identity initialization used for affine mechanisms.
    """
    for layer in range(spec.n_layers):
        n_out, n_in = spec.widths[layer + 1], spec.widths[layer]
        wnoise, rng = rng.normals(n_out * n_in)
        bnoise, rng = rng.normals(n_out)
        w = scale * wnoise.reshape(n_out, n_in)
        if identity:
            if n_out != n_in:
                raise ContractError("identity init needs square layers")
            w = w + np.eye(n_out)
        store.register(f"{prefix}.W{layer}", w)
        store.register(f"{prefix}.b{layer}", scale * bnoise)
    return rng


def mlp_apply(spec: MlpSpec, store: ParamStore, prefix: str, x: int, tape: Tape) -> int:
    """Forward pass on an existing tape node; records all primitives."""
    h = x
    for layer in range(spec.n_layers):
        w = tape.param(store, f"{prefix}.W{layer}")
        b = tape.param(store, f"{prefix}.b{layer}")
        h = tape.affine(h, w, b)
        if layer < spec.n_layers - 1:
            if spec.hidden_act == "tanh":
                h = tape.tanh(h)
            elif spec.hidden_act == "relu":
                h = tape.relu(h)
            else:
                h = tape.leaky_relu(h, 0.2)
        elif spec.out_act == "sigmoid":
            h = tape.sigmoid(h)
    return h


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    """Tape-free convenience forward; same code path as mlp_apply."""
    tape = Tape()
    return tape.value(mlp_apply(spec, store, prefix, tape.constant(x), tape))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    """Optimizer kind, hyperparameters, step counter, and lazily created moment buffers."""

    kind: str  # "adam" | "sgd-nesterov"
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step_count: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptState, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update on the slots named in ``grads``."""
    if state.kind != "adam":
        raise ContractError(f"adam_step called on optimizer kind {state.kind!r}")
    state.step_count += 1
    t = state.step_count
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        cur = store.get(name)
        if g.shape != cur.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, slot {cur.shape}")
        m = state.moments.get(name)
        v = state.second_moments.get(name)
        if m is None:
            m = np.zeros_like(cur)
            v = np.zeros_like(cur)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.moments[name] = m
        state.second_moments[name] = v
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        store.set_(name, cur - state.lr * mhat / (np.sqrt(vhat) + state.eps))


def sgd_nesterov_step(state: OptState, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
    """Nesterov-momentum SGD: v <- mu*v + g; w <- w - lr*(g + mu*v)."""
    if state.kind != "sgd-nesterov":
        raise ContractError(f"sgd_nesterov_step called on optimizer kind {state.kind!r}")
    state.step_count += 1
    mu = state.momentum
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        cur = store.get(name)
        if g.shape != cur.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, slot {cur.shape}")
        v = state.moments.get(name)
        if v is None:
            v = np.zeros_like(cur)
        v = mu * v + g
        state.moments[name] = v
        store.set_(name, cur - state.lr * (g + mu * v))


def optimizer_step(state: OptState, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
    if state.kind == "adam":
        adam_step(state, store, grads)
    else:
        sgd_nesterov_step(state, store, grads)


# ---------------------------------------------------------------------------
# Gradient verification harness
# ---------------------------------------------------------------------------


def finite_diff_check(build_loss, store: ParamStore, eps: float = 1e-5, slots=None) -> float:
    """Worst relative error between backward() and central finite differences.

    ``build_loss(tape)`` must rebuild the same deterministic loss (all noise
    frozen) and return its scalar node. Relative error uses a 1e-6 floor so
    exactly-zero gradients are compared at the finite-difference noise scale.
    """
    tape = Tape()
    loss_node = build_loss(tape)
    ad = tape.backward(loss_node)

    def eval_loss() -> float:
        t = Tape()
        return float(t.value(build_loss(t)))

    worst = 0.0
    for name in slots or store.names():
        base = store.get(name).copy()
        g_ad = ad.get(name, np.zeros_like(base))
        flat = base.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            store.set_(name, flat.reshape(base.shape))
            f_plus = eval_loss()
            flat[i] = orig - eps
            store.set_(name, flat.reshape(base.shape))
            f_minus = eval_loss()
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * eps)
        store.set_(name, base)
        num = np.abs(g_ad.reshape(-1) - fd)
        den = np.maximum(np.maximum(np.abs(g_ad.reshape(-1)), np.abs(fd)), 1e-6)
        worst = max(worst, float((num / den).max())) if flat.size else worst
    return worst
