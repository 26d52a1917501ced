"""Feature-code-feature translation between code spaces.

A translator classifies every source cell into one of the target codebook's
indices. Training uses only the source agent's own observations and ground
truth: the frozen target head scores the softly decoded target embedding, and
the detection loss flows back through the softmax into the translator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .codespace import CodeMap, Codebook, CodeSpace, decode
from .core import ConfigError, ShapeError, logistic_loss, make_rng, name_key, smooth_l1, softmax

log = logging.getLogger(__name__)

INPUT_SOURCES = ("encoded", "adapted", "codemap")


# ---------------------------------------------------------------- affine chains

def _init_layer(rng, n_out: int, n_in: int, scale: float = 0.1):
    return [scale * rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), np.zeros(n_out)]


def _forward(layers, x, n_tanh: int):
    """Apply affine layers; tanh follows each of the first ``n_tanh`` layers."""
    acts = [x]
    for i, (W, b) in enumerate(layers):
        x = x @ W.T + b
        if i < n_tanh:
            x = np.tanh(x)
        acts.append(x)
    return acts


def _backward(layers, acts, g, n_tanh: int):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        if i < n_tanh:
            g = g * (1.0 - acts[i + 1] ** 2)
        W, _ = layers[i]
        grads[i] = [g.T @ acts[i], g.sum(0)]
        g = g @ W
    return grads


def _n_params(layers) -> int:
    return int(sum(W.size + b.size for W, b in layers))


def _layers_to_json(layers):
    return [{"weight": W.tolist(), "bias": b.tolist()} for W, b in layers]


def _layers_from_json(data):
    return [[np.asarray(l["weight"], dtype=np.float64), np.asarray(l["bias"], dtype=np.float64)] for l in data]


@dataclass
class TranslatorOneToOne:
    source: str
    target: str
    layers: list  # [[W, b], ...]; the last layer emits D_t logits
    input_source: str = "encoded"
    n_tanh: int = 0
    tau_schedule: tuple = (1.0, 0.1)
    seed: int = 0

    structure = "one-to-one"

    @property
    def D_t(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def C_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def targets(self) -> list[str]:
        return [self.target]

    def n_params(self) -> int:
        return _n_params(self.layers)

    def chain(self, target: str):
        if target != self.target:
            raise ConfigError(f"translator {self.source}->{self.target} has no head for {target}")
        return self.layers

    def to_dict(self) -> dict:
        return {"structure": self.structure, "source": self.source, "targets": [self.target],
                "input_source": self.input_source, "n_tanh": self.n_tanh, "layers": _layers_to_json(self.layers),
                "tau_schedule": list(self.tau_schedule), "seed": self.seed}


@dataclass
class TranslatorMultiHead:
    source: str
    backbone: list  # [[W, b], ...] C_src -> C_hid
    heads: dict  # target -> [W, b] (D_t x C_hid)
    input_source: str = "encoded"
    tau_schedule: tuple = (1.0, 0.1)
    seed: int = 0
    balance_state: dict = field(default_factory=dict)

    structure = "multi-head"

    @property
    def n_tanh(self) -> int:
        return len(self.backbone) - 1

    @property
    def C_in(self) -> int:
        return self.backbone[0][0].shape[1]

    @property
    def C_hid(self) -> int:
        return self.backbone[-1][0].shape[0]

    @property
    def targets(self) -> list[str]:
        return list(self.heads)

    def n_params(self) -> int:
        return _n_params(self.backbone) + _n_params(self.heads.values())

    def chain(self, target: str):
        if target not in self.heads:
            raise ConfigError(f"translator from {self.source} has no head for {target}")
        return self.backbone + [self.heads[target]]

    def to_dict(self) -> dict:
        return {"structure": self.structure, "source": self.source, "targets": list(self.heads),
                "input_source": self.input_source, "backbone": _layers_to_json(self.backbone),
                "heads": {t: _layers_to_json([h])[0] for t, h in self.heads.items()},
                "tau_schedule": list(self.tau_schedule), "seed": self.seed,
                "balance_state": dict(self.balance_state)}


def translator_from_dict(d: dict):
    if d["structure"] == "one-to-one":
        return TranslatorOneToOne(d["source"], d["targets"][0], _layers_from_json(d["layers"]), d["input_source"],
                                  d.get("n_tanh", 0), tuple(d["tau_schedule"]), d["seed"])
    if d["structure"] == "multi-head":
        heads = {t: _layers_from_json([h])[0] for t, h in d["heads"].items()}
        return TranslatorMultiHead(d["source"], _layers_from_json(d["backbone"]), heads, d["input_source"],
                                   tuple(d["tau_schedule"]), d["seed"], dict(d.get("balance_state", {})))
    raise ConfigError(f"unknown translator structure {d['structure']!r}")


def make_one_to_one(source: str, target: str, C_in: int, D_t: int, seed: int = 0, input_source: str = "encoded",
                    hidden: int | None = None) -> TranslatorOneToOne:
    """Single affine layer, or a factored backbone + head pair when ``hidden`` is given."""
    _check_source(input_source)
    rng = make_rng(seed, 30, name_key(source), name_key(target))
    if hidden is None:
        layers = [_init_layer(rng, D_t, C_in)]
    else:
        layers = [_init_layer(rng, hidden, C_in), _init_layer(rng, D_t, hidden)]
    return TranslatorOneToOne(source, target, layers, input_source, seed=seed)


def make_multihead(source: str, targets: dict, C_in: int, C_hid: int = 32, depth: int = 1, seed: int = 0,
                   input_source: str = "encoded") -> TranslatorMultiHead:
    """``targets`` maps target owner -> codebook size D_t."""
    _check_source(input_source)
    if not targets:
        raise ConfigError("multi-head translator needs at least one target")
    rng = make_rng(seed, 31, name_key(source))
    backbone = [_init_layer(rng, C_hid, C_in)] + [_init_layer(rng, C_hid, C_hid) for _ in range(depth - 1)]
    heads = {}
    for t in sorted(targets):
        hrng = make_rng(seed, 32, name_key(source), name_key(t))
        heads[t] = _init_layer(hrng, targets[t], C_hid)
    return TranslatorMultiHead(source, backbone, heads, input_source, seed=seed)


def _check_source(input_source: str) -> None:
    if input_source not in INPUT_SOURCES:
        raise ConfigError(f"input_source must be one of {INPUT_SOURCES}, got {input_source!r}")


def one_to_one_param_count(C_src: int, D_t: int) -> int:
    return D_t * (C_src + 1)


# ---------------------------------------------------------------- inference

def translator_input(F: np.ndarray, T, source_space: CodeSpace | None = None) -> np.ndarray:
    """Map encoded source features to what ``T`` consumes."""
    if T.input_source == "encoded":
        return np.asarray(F, dtype=np.float64)
    if source_space is None:
        raise ConfigError(f"input_source={T.input_source} needs the source code space")
    if T.input_source == "adapted":
        return source_space.adapt(T.source, F)
    return source_space.reconstruct(T.source, F)


def translate_logits(F: np.ndarray, T, target: str) -> np.ndarray:
    chain = T.chain(target)
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-1] != T.C_in:
        raise ShapeError(f"translator from {T.source} ({T.input_source}) expects {T.C_in} channels, "
                         f"got {F.shape[-1]}")
    lead = F.shape[:-1]
    out = _forward(chain, F.reshape(-1, F.shape[-1]), T.n_tanh)[-1]
    return out.reshape(*lead, -1)


def translate_hard(F: np.ndarray, T, target: str, D: int | None = None) -> CodeMap:
    logits = translate_logits(F, T, target)
    return CodeMap(np.argmax(logits, axis=-1), target, logits.shape[-1] if D is None else D)


def decode_soft(logits: np.ndarray, book: Codebook, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError("tau must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != book.D:
        raise ShapeError(f"logits over {logits.shape[-1]} codes, codebook has {book.D}")
    return softmax(logits / tau, axis=-1) @ book.codes


# ---------------------------------------------------------------- training

def tau_at(epoch: int, epochs: int, schedule=(1.0, 0.1)) -> float:
    """Geometric annealing from schedule[0] to schedule[1] across epochs."""
    t0, t1 = schedule
    if epochs <= 1:
        return t0
    return float(t0 * (t1 / t0) ** (epoch / (epochs - 1)))


def soft_step_grad(chain, n_tanh: int, x: np.ndarray, y: np.ndarray, space: CodeSpace, tau: float):
    """Detection loss through the frozen target head and its gradients for every layer in ``chain``."""
    acts = _forward(chain, x, n_tanh)
    z = acts[-1]
    p = softmax(z / tau, axis=1)
    feat = p @ space.book.codes
    loss, gs = logistic_loss(feat @ space.head.weight + space.head.bias, y)
    # d loss / d p_d = gs * (head . code_d)
    code_scores = space.book.codes @ space.head.weight
    gp = gs[:, None] * code_scores[None, :]
    gz = p * (gp - np.sum(p * gp, axis=1, keepdims=True)) / tau
    return loss, _backward(chain, acts, gz, n_tanh)


def _apply(layers, grads, lr):
    for layer, (gW, gb) in zip(layers, grads):
        layer[0] = layer[0] - lr * gW
        layer[1] = layer[1] - lr * gb


def _local_inputs(view, T, source_space):
    if view.modality != T.source:
        raise ConfigError(f"translator source {T.source} trained on {view.modality} data")
    X, Y, _ = view.load_stack()
    Xin = np.stack([translator_input(x, T, source_space) for x in X])
    return Xin.reshape(len(X), -1, Xin.shape[-1]), Y.reshape(len(Y), -1)


def train_translator(T: TranslatorOneToOne, view, target_space: CodeSpace, epochs: int = 30, lr: float = 2.0,
                     seed: int = 0, source_space: CodeSpace | None = None, batch_size: int = 32,
                     tau_schedule=(1.0, 0.1)):
    """Train on the source's local data only. ``view`` is a :class:`LocalView` of the source modality."""
    if target_space.owner != T.target or target_space.D != T.D_t:
        raise ConfigError(f"translator target {T.target}/D={T.D_t} does not match code space "
                          f"{target_space.owner}/D={target_space.D}")
    X, Y = _local_inputs(view, T, source_space)
    rng = make_rng(seed, 33, name_key(T.source))
    curve = []
    for epoch in range(epochs):
        tau = tau_at(epoch, epochs, tau_schedule)
        losses = []
        for bi in _batch_iter(len(X), batch_size, rng):
            loss, grads = soft_step_grad(T.layers, T.n_tanh, X[bi].reshape(-1, X.shape[-1]), Y[bi].ravel(),
                                         target_space, tau)
            _apply(T.layers, grads, lr)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    T.tau_schedule = tuple(tau_schedule)
    T.seed = seed
    return T, curve


def _batch_iter(n, batch, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch):
        yield order[lo:lo + batch]


class BalancedSampler:
    """Picks a target with probability proportional to its loss EMA (floored)."""

    def __init__(self, targets, rng, decay: float = 0.9, floor: float = 0.05, enabled: bool = True,
                 state: dict | None = None):
        self.targets = list(targets)
        self.rng = rng
        self.decay = decay
        self.floor = floor
        self.enabled = enabled
        self.ema = dict(state or {})
        self.counts = {t: 0 for t in self.targets}

    def probabilities(self) -> np.ndarray:
        n = len(self.targets)
        if not self.enabled or len(self.ema) < n:
            return np.full(n, 1.0 / n)
        e = np.array([self.ema[t] for t in self.targets])
        p = e / e.sum() if e.sum() > 0 else np.full(n, 1.0 / n)
        p = np.maximum(p, self.floor)
        return p / p.sum()

    def pick(self) -> str:
        if len(self.targets) == 1:
            t = self.targets[0]
        else:
            missing = [t for t in self.targets if t not in self.ema]
            # warm-up: every target is visited once before balancing kicks in
            t = missing[0] if (self.enabled and missing) else self.targets[
                int(self.rng.choice(len(self.targets), p=self.probabilities()))]
        self.counts[t] += 1
        return t

    def update(self, target: str, loss: float) -> None:
        prev = self.ema.get(target)
        self.ema[target] = loss if prev is None else self.decay * prev + (1 - self.decay) * loss


def train_multihead(T: TranslatorMultiHead, view, target_spaces: dict, epochs: int = 30, lr: float = 2.0,
                    seed: int = 0, source_space: CodeSpace | None = None, batch_size: int = 32,
                    tau_schedule=(1.0, 0.1), balancing: bool = True, decay: float = 0.9, floor: float = 0.05):
    """Train backbone + heads; each step goes through one sampled target head."""
    for t in T.heads:
        if t not in target_spaces:
            raise ConfigError(f"no frozen code space supplied for target {t}")
        if target_spaces[t].D != T.heads[t][0].shape[0]:
            raise ConfigError(f"head {t} has {T.heads[t][0].shape[0]} outputs, code space D={target_spaces[t].D}")
    X, Y = _local_inputs(view, T, source_space)
    rng = make_rng(seed, 33, name_key(T.source))
    sampler = BalancedSampler(T.targets, make_rng(seed, 34, name_key(T.source)), decay, floor, balancing,
                              T.balance_state)
    curve = []
    for epoch in range(epochs):
        tau = tau_at(epoch, epochs, tau_schedule)
        losses = []
        for bi in _batch_iter(len(X), batch_size, rng):
            t = sampler.pick()
            chain = T.backbone + [T.heads[t]]
            loss, grads = soft_step_grad(chain, T.n_tanh, X[bi].reshape(-1, X.shape[-1]), Y[bi].ravel(),
                                         target_spaces[t], tau)
            _apply(chain, grads, lr)
            sampler.update(t, loss)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    T.balance_state = dict(sampler.ema)
    T.tau_schedule = tuple(tau_schedule)
    T.seed = seed
    return T, curve, sampler.counts


# ---------------------------------------------------------------- dense-to-dense baseline

@dataclass
class DenseMap:
    """Affine source -> target feature map (the uncompressed D2D comparison line)."""

    source: str
    target: str
    weight: np.ndarray  # (C_z_target, C_src)
    bias: np.ndarray

    def __call__(self, F: np.ndarray) -> np.ndarray:
        return np.asarray(F, dtype=np.float64) @ self.weight.T + self.bias

    def to_dict(self) -> dict:
        return {"structure": "d2d", "source": self.source, "targets": [self.target],
                "weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseMap":
        return cls(d["source"], d["targets"][0], np.asarray(d["weight"]), np.asarray(d["bias"]))


def train_d2d(source: str, view, target_space: CodeSpace, epochs: int = 30, lr: float = 1.0, seed: int = 0,
              snap_weight: float = 1.0, beta: float = 1.0, batch_size: int = 32) -> DenseMap:
    """Detection loss through the frozen target head, plus Smooth-L1 towards the nearest target code.

    Only the source's local data is used; the Smooth-L1 anchor is the mapped
    feature's own nearest code, so no target observation is needed.
    """
    from .codespace import nearest_code

    X, Y, _ = view.load_stack()
    C = X.shape[-1]
    X = X.reshape(len(X), -1, C)
    Y = Y.reshape(len(Y), -1)
    rng = make_rng(seed, 35, name_key(source))
    M = DenseMap(source, target_space.owner, *_init_layer(rng, target_space.C_z, C))
    for _ in range(epochs):
        for bi in _batch_iter(len(X), batch_size, rng):
            f = X[bi].reshape(-1, C)
            out = M(f)
            _, gs = logistic_loss(out @ target_space.head.weight + target_space.head.bias, Y[bi].ravel())
            g = np.outer(gs, target_space.head.weight)
            if snap_weight > 0:
                anchor = target_space.book.codes[nearest_code(out, target_space.book.codes)]
                _, gsl = smooth_l1(out, anchor, beta)
                g = g + snap_weight * gsl * out.shape[1]
            M.weight = M.weight - lr * (g.T @ f)
            M.bias = M.bias - lr * g.sum(0)
    return M
