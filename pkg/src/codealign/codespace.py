"""Per-modality and per-group code spaces.

A code space is an affine adapter per member modality, a codebook shared by
the members, and a per-cell logistic detection head on code embeddings.
Encoders (the observation models) are never touched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (ConfigError, ConstraintError, CorruptionError, DataError, ShapeError, SIMILARITY_LOSSES,
                   logistic_loss, make_rng, name_key, sigmoid)
from .geometry import distance_grid, warp, warp_backward
from .metrics import cell_ap

log = logging.getLogger(__name__)

_CHUNK = 8192


@dataclass
class Codebook:
    owner: str
    codes: np.ndarray  # (D, C_z)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ShapeError(f"codebook codes must be (D, C_z), got {self.codes.shape}")

    @property
    def D(self) -> int:
        return self.codes.shape[0]

    @property
    def C_z(self) -> int:
        return self.codes.shape[1]

    def min_pairwise_distance(self) -> float:
        c = self.codes
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        d[np.diag_indices(self.D)] = np.inf
        return float(d.min()) if self.D > 1 else np.inf


@dataclass
class Adapter:
    owner: str
    weight: np.ndarray  # (C_z, C_m)
    bias: np.ndarray  # (C_z,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    def __call__(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"adapter {self.owner} expects {self.weight.shape[1]} channels, got {F.shape[-1]}")
        return F @ self.weight.T + self.bias

    @classmethod
    def identity(cls, owner: str, C: int) -> "Adapter":
        return cls(owner, np.eye(C), np.zeros(C))


@dataclass
class CodeMap:
    indices: np.ndarray  # (H, W) int
    owner: str
    D: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or min(self.indices.shape) < 1:
            raise ShapeError(f"code map must be a non-empty (H, W) grid, got {self.indices.shape}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.D):
            raise CorruptionError(f"code index outside [0, {self.D})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape


@dataclass
class DetectionHead:
    owner: str
    weight: np.ndarray
    bias: float
    frozen: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = float(self.bias)

    def logits(self, F: np.ndarray) -> np.ndarray:
        return np.asarray(F, dtype=np.float64) @ self.weight + self.bias

    def __call__(self, F: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(F))


# ---------------------------------------------------------------- quantize / decode

def nearest_code(X: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code for each row of X; ties go to the lowest index."""
    X = np.asarray(X, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[0] == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    # ||x||^2 dropped: constant per row
    d = (codes * codes).sum(1)[None, :] - 2.0 * (X @ codes.T)
    two = np.partition(d, 1, axis=1)[:, :2]
    out = np.argmin(d, axis=1)
    scale = (X * X).sum(1) + np.abs(two).max(1) + 1.0
    close = np.nonzero(two[:, 1] - two[:, 0] <= 1e-9 * scale)[0]
    for lo in range(0, close.size, _CHUNK):
        rows = close[lo:lo + _CHUNK]
        diff = X[rows, None, :] - codes[None, :, :]
        out[rows] = np.argmin(np.einsum("ndc,ndc->nd", diff, diff), axis=1)
    return out


def quantize(F: np.ndarray, adapter: Adapter, book: Codebook) -> CodeMap:
    if adapter.weight.shape[0] != book.C_z:
        raise ShapeError(f"adapter output {adapter.weight.shape[0]} != codebook C_z {book.C_z}")
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3:
        raise ShapeError(f"quantize expects (H, W, C), got {F.shape}")
    H, W, _ = F.shape
    A = adapter(F).reshape(H * W, -1)
    return CodeMap(nearest_code(A, book.codes).reshape(H, W), book.owner, book.D)


def decode(M: CodeMap, book: Codebook) -> np.ndarray:
    if M.owner != book.owner or M.D != book.D:
        raise ConfigError(f"code map for {M.owner}/D={M.D} decoded with codebook {book.owner}/D={book.D}")
    idx = np.asarray(M.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= book.D):
        raise CorruptionError(f"code index outside [0, {book.D})")
    return book.codes[idx]


# ---------------------------------------------------------------- codebook learning

def distortion(features: np.ndarray, codes: np.ndarray) -> float:
    idx = nearest_code(features, codes)
    d = features - codes[idx]
    return float(np.einsum("nc,nc->", d, d))


def _has_distinct(features: np.ndarray, k: int) -> bool:
    seen = set()
    for row in features:
        seen.add(row.tobytes())
        if len(seen) >= k:
            return True
    return False


def _lloyd(X: np.ndarray, codes: np.ndarray):
    """Lloyd step on rows of X; also returns the pre-update assignment and distortion."""
    D = codes.shape[0]
    idx = nearest_code(X, codes)
    resid = X - codes[idx]
    r2 = np.einsum("nc,nc->n", resid, resid)
    counts = np.bincount(idx, minlength=D)
    sums = np.stack([np.bincount(idx, weights=X[:, c], minlength=D) for c in range(X.shape[1])], axis=1)
    new = codes.copy()
    used = counts > 0
    new[used] = sums[used] / counts[used, None]
    reseeded = [int(k) for k in np.nonzero(~used)[0]]
    if reseeded:
        # empty clusters take the features worst served by their current code
        far = np.argsort(-r2, kind="stable")
        j = 0
        for k in reseeded:
            while j < len(far) and np.any(np.all(new == X[far[j]], axis=1)):
                j += 1
            if j == len(far):
                break
            new[k] = X[far[j]]
        log.debug("lloyd re-seeded codes %s", reseeded)
    return new, reseeded, idx, float(r2.sum())


def lloyd_update(features: np.ndarray, book: Codebook) -> tuple[Codebook, list[int]]:
    """One Lloyd step. Returns the new codebook and the indices of re-seeded (empty) codes."""
    X = np.asarray(features, dtype=np.float64).reshape(-1, book.C_z)
    if X.shape[0] < book.D or not _has_distinct(X, book.D):
        raise DataError(f"Lloyd update needs at least D={book.D} distinct feature vectors")
    codes, reseeded, _, _ = _lloyd(X, book.codes)
    return Codebook(book.owner, codes), reseeded


def kmeanspp_init(features: np.ndarray, D: int, rng: np.random.Generator, owner: str,
                  max_points: int = 20000) -> Codebook:
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] > max_points:
        X = X[rng.choice(X.shape[0], max_points, replace=False)]
    X = np.unique(X, axis=0)
    if X.shape[0] < D:
        raise DataError(f"need at least D={D} distinct features to seed a codebook")
    codes = [X[rng.integers(X.shape[0])]]
    d2 = ((X - codes[0]) ** 2).sum(1)
    for _ in range(1, D):
        p = d2 / d2.sum()
        c = X[rng.choice(X.shape[0], p=p)]
        codes.append(c)
        d2 = np.minimum(d2, ((X - c) ** 2).sum(1))
    return Codebook(owner, np.array(codes))


# ---------------------------------------------------------------- pipeline pretraining

def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch):
        yield order[lo:lo + batch]


def pretrain_pipeline(modality: str, dataset, epochs: int = 50, lr: float = 5.0, seed: int = 0,
                      batch_size: int = 32):
    """Train a per-cell logistic head directly on encoded features.

    Returns ``(head, ap)`` where ``ap`` is the single-agent AP on the eval split.
    """
    X, Y, _ = dataset.load_stack(modality, "train", visible=True)
    C = X.shape[-1]
    rng = make_rng(seed, 10, name_key(modality))
    w = 0.01 * rng.standard_normal(C)
    b = 0.0
    for _ in range(epochs):
        for bi in _batches(len(X), batch_size, rng):
            f = X[bi].reshape(-1, C)
            _, g = logistic_loss(f @ w + b, Y[bi].ravel())
            w = w - lr * (f.T @ g)
            b = b - lr * g.sum()
    head = DetectionHead(modality, w, b, frozen=True)
    Xe, Ye, _ = dataset.load_stack(modality, "eval")
    return head, cell_ap(head(Xe), Ye)


# ---------------------------------------------------------------- code space training

@dataclass
class CodeSpace:
    owner: str
    members: list
    adapters: dict  # modality -> Adapter
    book: Codebook
    head: DetectionHead
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.book.D

    @property
    def C_z(self) -> int:
        return self.book.C_z

    def adapt(self, modality: str, F: np.ndarray) -> np.ndarray:
        return self.adapters[modality](F)

    def quantize(self, modality: str, F: np.ndarray) -> CodeMap:
        return quantize(F, self.adapters[modality], self.book)

    def decode(self, M: CodeMap) -> np.ndarray:
        return decode(M, self.book)

    def reconstruct(self, modality: str, F: np.ndarray) -> np.ndarray:
        return self.decode(self.quantize(modality, F))

    def detect(self, modality: str, F: np.ndarray) -> np.ndarray:
        return self.head(self.reconstruct(modality, F))

    def to_dict(self) -> dict:
        return {
            "owner": self.owner, "members": list(self.members), "D": self.D, "C_z": self.C_z,
            "codes": self.book.codes.tolist(),
            "adapters": {m: {"weight": a.weight.tolist(), "bias": a.bias.tolist()}
                         for m, a in self.adapters.items()},
            "head": {"weight": self.head.weight.tolist(), "bias": self.head.bias, "frozen": self.head.frozen},
            "config": self.config, "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodeSpace":
        codes = np.asarray(d["codes"], dtype=np.float64).reshape(d["D"], d["C_z"])
        return cls(
            owner=d["owner"], members=list(d["members"]),
            adapters={m: Adapter(m, a["weight"], a["bias"]) for m, a in d["adapters"].items()},
            book=Codebook(d["owner"], codes),
            head=DetectionHead(d["owner"], d["head"]["weight"], d["head"]["bias"], d["head"]["frozen"]),
            config=d.get("config", {}), history=d.get("history", []),
        )


def group_owner(members) -> str:
    return "+".join(sorted(members))


def _initial_adapter(modality: str, C_m: int, C_z: int) -> Adapter:
    # identity embedding (zero-padded or truncated)
    W = np.zeros((C_z, C_m))
    k = min(C_m, C_z)
    W[np.arange(k), np.arange(k)] = 1.0
    return Adapter(modality, W, np.zeros(C_z))


def _refit_head(owner: str, adapted: list, logits: list, frozen: bool) -> DetectionHead:
    """Least-squares fit of a C_z head onto the pretrained heads' own outputs."""
    A = np.concatenate(adapted)
    t = np.concatenate(logits)
    Z = np.hstack([A, np.ones((A.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(Z, t, rcond=None)
    return DetectionHead(owner, sol[:-1], sol[-1], frozen=frozen)


def canonicalize_signs(space: CodeSpace) -> CodeSpace:
    """Flip embedding axes so every head weight is non-negative.

    A sign flip of one axis in adapters, codes and head is an exact
    reparametrisation; afterwards element-wise max fusion can only raise scores.
    """
    flip = np.where(space.head.weight < 0, -1.0, 1.0)
    if np.all(flip > 0):
        return space
    space.head.weight = space.head.weight * flip
    space.book.codes = space.book.codes * flip
    for a in space.adapters.values():
        a.weight = a.weight * flip[:, None]
        a.bias = a.bias * flip
    return space


def fov_mask(H: int, W: int, radius: float, cell: float = 1.0) -> np.ndarray:
    return distance_grid(H, W, cell) <= radius


@dataclass
class _SceneData:
    scene_id: int
    agents: list  # AgentConfig
    rows: list  # per agent: row in that modality's stacked arrays


def adapter_gradient(F: np.ndarray, Y: np.ndarray, adapter: Adapter, book: Codebook, head: DetectionHead,
                     beta_commit: float = 0.25, bypass: bool = False):
    """Loss and adapter gradient for one modality's cells (no similarity term).

    ``bypass=True`` replaces the quantizer by the identity (the D -> infinity
    surrogate); the straight-through gradient then equals the gradient of the
    unquantized pipeline.
    """
    f = np.asarray(F, dtype=np.float64).reshape(-1, adapter.weight.shape[1])
    y = np.asarray(Y, dtype=np.float64).ravel()
    A = adapter(f)
    Q = A if bypass else book.codes[nearest_code(A, book.codes)]
    loss, gs = logistic_loss(Q @ head.weight + head.bias, y)
    dA = np.outer(gs, head.weight)
    if not bypass:
        diff = A - Q
        loss += beta_commit * float(np.einsum("nc,nc->", diff, diff)) / len(A)
        dA = dA + 2.0 * beta_commit * diff / len(A)
    return loss, dA.T @ f, dA.sum(0)


def _train_space(owner: str, members: list, dataset, D: int, C_z: int, epochs: int, lr: float, seed: int,
                 pretrained: dict, trainable_head: bool, lam: float, sim_loss: str, beta_commit: float,
                 batch_size: int, scene_ids=None) -> CodeSpace:
    if D < 2:
        raise ConfigError(f"codebook size D must be >= 2, got {D}")
    if sim_loss not in SIMILARITY_LOSSES:
        raise ConfigError(f"unknown similarity loss {sim_loss!r}")
    world = dataset.world
    cell = world.cell_size
    H, W = world.H, world.W
    specs = dataset.specs
    member_set = set(members)

    scenes = []
    Xm = {m: [] for m in members}
    Ym = {m: [] for m in members}
    for sid in (dataset.scene_ids("train") if scene_ids is None else scene_ids):
        agents = [a for a in dataset.agents(sid) if a.modality_id in member_set]
        if not agents:
            continue
        rows = []
        for a in agents:
            rows.append(len(Xm[a.modality_id]))
            Xm[a.modality_id].append(dataset.load_observation(sid, a.agent_id))
            Ym[a.modality_id].append(dataset.load_truth(sid, a.agent_id, visible=True))
        scenes.append(_SceneData(sid, agents, rows))
    for m in members:
        if not Xm[m]:
            raise DataError(f"no training observations for modality {m}")
    Xm = {m: np.stack(v).astype(np.float64) for m, v in Xm.items()}
    Ym = {m: np.stack(v).astype(np.float64) for m, v in Ym.items()}
    feats = {m: Xm[m].reshape(-1, Xm[m].shape[-1]) for m in members}

    rng = make_rng(seed, 20, name_key(owner))
    adapters = {m: _initial_adapter(m, specs[m].C_m, C_z) for m in members}
    head = _refit_head(owner, [adapters[m](feats[m]) for m in members],
                       [pretrained[m].logits(feats[m]) for m in members], frozen=not trainable_head)
    space = CodeSpace(owner, list(members), adapters, Codebook(owner, np.zeros((D, C_z))), head)
    canonicalize_signs(space)

    def all_adapted():
        return np.concatenate([space.adapters[m](feats[m]) for m in members])

    fovs = {m: fov_mask(H, W, specs[m].fov_radius, cell) for m in members}
    sim_fn = SIMILARITY_LOSSES[sim_loss]
    book = kmeanspp_init(all_adapted(), D, rng, owner)
    history = []

    ys = np.concatenate([Ym[m].ravel() for m in members])

    def codebook_step(epoch):
        # Lloyd step on the current adapted features; the pre-update assignment
        # doubles as the end-of-epoch report for the previous epoch
        nonlocal book
        X = all_adapted()
        codes, reseeded, idx, dist = _lloyd(X, book.codes)
        if epoch > 0:
            try:
                ap = cell_ap(space.head(book.codes[idx]), ys)
            except DataError:
                ap = float("nan")
            history.append({"epoch": epoch - 1, "recon_mse": dist / len(X), "train_ap": ap})
            log.debug("%s epoch %d recon_mse %.4f train_ap %.4f", owner, epoch - 1, dist / len(X), ap)
        if reseeded:
            history.append({"epoch": epoch, "reseeded": reseeded})
        book = Codebook(owner, codes)
        space.book = book

    for epoch in range(epochs):
        codebook_step(epoch)
        for bi in _batches(len(scenes), batch_size, rng):
            batch = [scenes[i] for i in bi]
            rows = {m: [] for m in members}
            for s in batch:
                for a, r in zip(s.agents, s.rows):
                    rows[a.modality_id].append(r)
            n_cells = sum(len(r) for r in rows.values()) * H * W
            A, Q, dQ = {}, {}, {}
            gw_head = np.zeros(C_z)
            gb_head = 0.0
            for m in members:
                if not rows[m]:
                    continue
                x = Xm[m][rows[m]]
                A[m] = space.adapters[m](x)
                Q[m] = book.codes[nearest_code(A[m].reshape(-1, C_z), book.codes)].reshape(A[m].shape)
                y = Ym[m][rows[m]]
                _, gs = logistic_loss(Q[m] @ space.head.weight + space.head.bias, y)
                gs = gs * (y.size / n_cells)
                dQ[m] = gs[..., None] * space.head.weight
                if trainable_head:
                    gw_head += np.einsum("nhw,nhwc->c", gs, Q[m])
                    gb_head += float(gs.sum())
            if lam > 0:
                pairs = [(s, i, j) for s in batch for i in range(len(s.agents)) for j in range(i + 1, len(s.agents))
                         if s.agents[i].modality_id != s.agents[j].modality_id]
                pos = {m: {r: k for k, r in enumerate(rows[m])} for m in members}
                for s, i, j in pairs:
                    ego, ak, aj = s.agents[0], s.agents[i], s.agents[j]
                    mk, mj = ak.modality_id, aj.modality_id
                    ki, kj = pos[mk][s.rows[i]], pos[mj][s.rows[j]]
                    Fk = warp(Q[mk][ki], ak.pose, ego.pose, 0.0, cell)
                    Fj = warp(Q[mj][kj], aj.pose, ego.pose, 0.0, cell)
                    shared = (warp(fovs[mk], ak.pose, ego.pose, False, cell)
                              & warp(fovs[mj], aj.pose, ego.pose, False, cell))
                    if not shared.any():
                        continue
                    scale = lam / len(pairs)
                    dQ[mk][ki] += scale * warp_backward(_masked_grad(sim_fn, Fk, Fj, shared), ak.pose, ego.pose, cell)
                    dQ[mj][kj] += scale * warp_backward(_masked_grad(sim_fn, Fj, Fk, shared), aj.pose, ego.pose, cell)
            for m in A:
                # straight-through estimator plus commitment term
                dA = (dQ[m] + 2.0 * beta_commit * (A[m] - Q[m]) / n_cells).reshape(-1, C_z)
                f = Xm[m][rows[m]].reshape(-1, Xm[m].shape[-1])
                a = space.adapters[m]
                a.weight = a.weight - lr * (dA.T @ f)
                a.bias = a.bias - lr * dA.sum(0)
            if trainable_head:
                space.head.weight = space.head.weight - lr * gw_head
                space.head.bias = space.head.bias - lr * gb_head


    codebook_step(epochs)
    canonicalize_signs(space)
    space.history = history
    return space


def _masked_grad(fn, a, b, mask):
    _, g = fn(a[mask], b[mask])
    out = np.zeros_like(a)
    out[mask] = g
    return out


def train_codespace(modality: str, dataset, pretrained_head: DetectionHead, D: int = 16, epochs: int = 30,
                    lr: float = 1.0, seed: int = 0, C_z: int = 16, beta_commit: float = 0.25,
                    batch_size: int = 32, trainable_head: bool = False) -> CodeSpace:
    """Adapter + codebook for one modality with the encoder and (re-fit) head frozen."""
    space = _train_space(modality, [modality], dataset, D, C_z, epochs, lr, seed, {modality: pretrained_head},
                         trainable_head, 0.0, "smooth_l1", beta_commit, batch_size,
                         scene_ids=dataset.manifest.coverage[modality])
    space.config.update(_cfg(D, C_z, epochs, lr, seed, beta_commit, 0.0, "smooth_l1", trainable_head))
    return space


def train_group_codespace(group, dataset, pretrained: dict, D: int = 16, lam: float = 0.1, epochs: int = 30,
                          lr: float = 1.0, seed: int = 0, C_z: int = 16, beta_commit: float = 0.25,
                          sim_loss: str = "smooth_l1", batch_size: int = 32) -> CodeSpace:
    """Shared codebook and trainable head for co-occurring modalities."""
    members = sorted(set(group))
    iso = {frozenset(p) for p in dataset.manifest.isolation_pairs}
    for i, a in enumerate(members):
        for b in members[i + 1:]:
            if frozenset((a, b)) in iso:
                raise ConstraintError(f"cannot group isolated modalities ({a}, {b})")
    if len(members) == 1:
        owner = members[0]
        scene_ids = dataset.manifest.coverage[owner]
    else:
        owner = group_owner(members)
        cover = [set(dataset.manifest.coverage[m]) for m in members]
        scene_ids = sorted(set.union(*cover))
        if not set.intersection(*cover):
            raise ConstraintError(f"group {owner} has no co-occurring training scenes")
    space = _train_space(owner, members, dataset, D, C_z, epochs, lr, seed, pretrained, True, lam, sim_loss,
                         beta_commit, batch_size, scene_ids=scene_ids)
    space.config.update(_cfg(D, C_z, epochs, lr, seed, beta_commit, lam, sim_loss, True))
    return space


def _cfg(D, C_z, epochs, lr, seed, beta_commit, lam, sim_loss, trainable_head) -> dict:
    return {"D": D, "C_z": C_z, "epochs": epochs, "lr": lr, "seed": seed, "beta_commit": beta_commit,
            "lambda": lam, "sim_loss": sim_loss, "trainable_head": trainable_head,
            "frozen_backend": "pretrained head re-fit onto C_z by least squares" if not trainable_head
            else "shared trainable head initialised by least-squares re-fit"}


def space_ap(space: CodeSpace, dataset, modality: str, split: str = "eval") -> float:
    X, Y, _ = dataset.load_stack(modality, split)
    return cell_ap([space.detect(modality, x) for x in X], list(Y))
