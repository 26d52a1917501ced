"""Synthetic scenes, per-modality observation models and isolation-aware datasets.

A scene is a BEV occupancy grid whose occupied cells carry a unit-norm latent
"semantic" vector (one per object). A modality turns the latent grid into
features through a fixed random mixing matrix, a nonlinearity and a noise
model; different modalities therefore see the same world through
incompatible feature spaces.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .core import (ORIGIN, ConfigError, ConstraintError, CorruptionError, DataError, IsolationViolation,
                   Pose, ShapeError, make_rng, name_key)
from .geometry import distance_grid, warp

log = logging.getLogger(__name__)

NONLINEARITIES = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
}

# stream tags for make_rng(seed, TAG, ...)
_SCENE, _OBS, _MODALITY, _LAYOUT, _PROTO = 0, 1, 2, 3, 4

HEADER = struct.Struct("<4I")


@dataclass
class LatentScene:
    scene_id: int
    occupancy: np.ndarray  # (H, W) bool
    latent: np.ndarray  # (H, W, C_lat)

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())


@dataclass
class ModalitySpec:
    modality_id: str
    C_m: int
    mix: np.ndarray  # (C_m, C_lat)
    bias: np.ndarray  # (C_m,)
    nonlinearity: str = "identity"
    noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    range_falloff: float = 0.0
    fov_radius: float = math.inf

    def __post_init__(self):
        self.mix = np.asarray(self.mix, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.mix.shape[0] != self.C_m or self.bias.shape != (self.C_m,):
            raise ShapeError(f"modality {self.modality_id}: mix/bias do not match C_m={self.C_m}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.noise_sigma < 0 or not 0 <= self.dropout_rate < 1 or self.range_falloff < 0:
            raise ConfigError(f"modality {self.modality_id}: invalid noise/dropout/falloff")
        if np.linalg.matrix_rank(self.mix) < min(self.mix.shape):
            raise ConfigError(f"modality {self.modality_id}: degenerate mixing matrix")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = self.mix.tolist()
        d["bias"] = self.bias.tolist()
        d["fov_radius"] = None if math.isinf(self.fov_radius) else self.fov_radius
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModalitySpec":
        d = dict(d)
        if d.get("fov_radius") is None:
            d["fov_radius"] = math.inf
        return cls(**d)


@dataclass(frozen=True)
class AgentConfig:
    agent_id: int
    modality_id: str
    pose: Pose = ORIGIN

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "modality_id": self.modality_id, "pose": self.pose.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        return cls(int(d["agent_id"]), d["modality_id"], Pose.from_list(d["pose"]))


# ---------------------------------------------------------------- scenes

def make_prototypes(seed: int, n_types: int, C_lat: int, spread: float = 0.6) -> np.ndarray:
    """Object-type prototype latents sharing a common "objectness" direction."""
    rng = make_rng(seed, _PROTO)
    base = np.zeros(C_lat)
    base[0] = 1.0
    P = base + spread * rng.standard_normal((n_types, C_lat))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def gen_scene(seed: int, H: int, W: int, C_lat: int, object_count_range=(4, 12), *,
              scene_id: int = 0, prototypes: np.ndarray | None = None, jitter: float = 0.3,
              occupied_bounds=(0.02, 0.15), max_retries: int = 200) -> LatentScene:
    if H < 8 or W < 8:
        raise ConfigError("scene grid must be at least 8x8")
    if C_lat < 2:
        raise ConfigError("C_lat must be at least 2")
    lo, hi = object_count_range
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad object_count_range {object_count_range}")
    rng = make_rng(seed, _SCENE, scene_id)
    n_obj = int(rng.integers(lo, hi + 1))

    for _ in range(max_retries):
        occ = np.zeros((H, W), dtype=bool)
        latent = np.zeros((H, W, C_lat))
        placed = 0
        for _ in range(n_obj):
            h, w = int(rng.integers(1, 4)), int(rng.integers(2, 6))
            if rng.random() < 0.5:
                h, w = w, h
            for _ in range(max_retries):
                r, c = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
                if not occ[r:r + h, c:c + w].any():
                    break
            else:
                break
            if prototypes is None:
                z = rng.standard_normal(C_lat)
            else:
                k = int(rng.integers(0, len(prototypes)))
                z = prototypes[k] + jitter * rng.standard_normal(C_lat)
            z /= np.linalg.norm(z)
            occ[r:r + h, c:c + w] = True
            latent[r:r + h, c:c + w] = z
            placed += 1
        if placed < n_obj:
            continue
        frac = occ.mean()
        if n_obj == 0 or occupied_bounds[0] <= frac <= occupied_bounds[1]:
            return LatentScene(scene_id, occ, latent)
    raise DataError(f"could not place {n_obj} non-overlapping objects within occupancy bounds "
                    f"{occupied_bounds} after {max_retries} attempts (scene {scene_id})")


# ---------------------------------------------------------------- observation

def make_modality(seed: int, modality_id: str, C_m: int, C_lat: int, nonlinearity: str = "identity",
                  noise_sigma: float = 0.0, dropout_rate: float = 0.0, range_falloff: float = 0.0,
                  fov_radius: float = math.inf, bias_scale: float = 0.2) -> ModalitySpec:
    rng = make_rng(seed, _MODALITY, name_key(modality_id))
    mix = rng.standard_normal((C_m, C_lat))
    bias = bias_scale * rng.standard_normal(C_m)
    return ModalitySpec(modality_id, C_m, mix, bias, nonlinearity, noise_sigma, dropout_rate,
                        range_falloff, fov_radius)


def agent_truth(scene: LatentScene, agent: AgentConfig, cell: float = 1.0) -> np.ndarray:
    """Ground-truth occupancy in the agent's local frame, as float 0/1."""
    return warp(scene.occupancy.astype(np.float64), ORIGIN, agent.pose, fill=0.0, cell=cell)


def observe(scene: LatentScene, spec: ModalitySpec, agent: AgentConfig, seed: int,
            cell: float = 1.0) -> np.ndarray:
    """Encoded feature map of ``scene`` as seen by ``agent`` (float32 values, (H, W, C_m))."""
    H, W = scene.shape
    half_x, half_y = W * cell / 2.0, H * cell / 2.0
    if abs(agent.pose.x) > half_x or abs(agent.pose.y) > half_y:
        raise ConfigError(f"agent {agent.agent_id} pose {agent.pose} outside world bounds")
    if scene.latent.shape[2] != spec.mix.shape[1]:
        raise ShapeError("scene latent dimension does not match modality mixing matrix")

    rng = make_rng(seed, _OBS, scene.scene_id, agent.agent_id, name_key(spec.modality_id))
    lat = warp(scene.latent, ORIGIN, agent.pose, fill=0.0, cell=cell)
    occ = warp(scene.occupancy, ORIGIN, agent.pose, fill=False, cell=cell)

    F = NONLINEARITIES[spec.nonlinearity](lat @ spec.mix.T + spec.bias)
    dist = distance_grid(H, W, cell)
    if spec.range_falloff > 0:
        F = F * np.exp(-spec.range_falloff * dist)[..., None]
    if spec.noise_sigma > 0:
        F = F + spec.noise_sigma * rng.standard_normal(F.shape)
    F[dist > spec.fov_radius] = 0.0
    if spec.dropout_rate > 0:
        drop = occ & (rng.random((H, W)) < spec.dropout_rate)
        F[drop] = 0.0
    return F.astype(np.float32)


# ---------------------------------------------------------------- datasets

@dataclass
class ModalityConfig:
    modality_id: str
    C_m: int
    nonlinearity: str = "identity"
    noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    range_falloff: float = 0.0
    fov_radius: float | None = None


@dataclass
class WorldConfig:
    H: int = 32
    W: int = 32
    C_lat: int = 8
    cell_size: float = 1.0
    object_count_range: tuple = (6, 14)
    occupied_bounds: tuple = (0.02, 0.15)
    object_types: int = 4
    type_spread: float = 0.6
    latent_jitter: float = 0.3
    pose_extent: float = 6.0
    train_scenes: int = 500
    eval_scenes: int = 100
    agents_per_modality: int = 1
    modalities: list = field(default_factory=lambda: [
        ModalityConfig("mA", 16, "identity", 0.05, 0.2, 0.0, 10.0),
        ModalityConfig("mB", 12, "tanh", 0.15, 0.0, 0.05, 10.0),
        ModalityConfig("mC", 16, "relu", 0.08, 0.0, 0.0, 10.0),
    ])
    isolation_pairs: list = field(default_factory=lambda: [("mA", "mB")])
    groups: list = field(default_factory=lambda: [("mA", "mC")])

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = [m if isinstance(m, ModalityConfig) else ModalityConfig(**m)
                               for m in d["modalities"]]
        for k in ("object_count_range", "occupied_bounds"):
            if k in d:
                d[k] = tuple(d[k])
        if "isolation_pairs" in d:
            d["isolation_pairs"] = [tuple(p) for p in d["isolation_pairs"]]
        if "groups" in d:
            d["groups"] = [tuple(g) for g in d["groups"]]
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_count_range"] = list(self.object_count_range)
        d["occupied_bounds"] = list(self.occupied_bounds)
        d["isolation_pairs"] = [list(p) for p in self.isolation_pairs]
        d["groups"] = [list(g) for g in self.groups]
        return d

    @property
    def modality_ids(self) -> list[str]:
        return [m.modality_id for m in self.modalities]


@dataclass
class DatasetManifest:
    seed: int
    world: dict
    scenes: list  # [{"scene_id", "split", "agents": [AgentConfig dicts]}]
    coverage: dict  # modality -> sorted train scene ids
    isolation_pairs: list
    groups: list
    modality_specs: dict  # modality -> ModalitySpec dict
    prototypes: list

    def to_dict(self) -> dict:
        return asdict(self)

    def check_isolation(self) -> None:
        for a, b in self.isolation_pairs:
            shared = set(self.coverage.get(a, ())) & set(self.coverage.get(b, ()))
            if shared:
                raise ConstraintError(f"isolation pair ({a}, {b}) shares scenes {sorted(shared)[:5]}")


def _teams(cfg: WorldConfig) -> list[tuple[str, ...]]:
    """Sets of modalities that are placed together in training scenes."""
    mods = cfg.modality_ids
    known = set(mods)
    iso = {frozenset(p) for p in cfg.isolation_pairs}
    for p in cfg.isolation_pairs:
        if len(set(p)) != 2 or not set(p) <= known:
            raise ConfigError(f"bad isolation pair {p}")
    seen: dict[str, tuple] = {}
    teams = []
    for g in cfg.groups:
        if not set(g) <= known:
            raise ConfigError(f"group {g} names unknown modalities")
        for a, b in combinations(g, 2):
            if frozenset((a, b)) in iso:
                raise ConstraintError(f"modality pair ({a}, {b}) is both grouped and isolated")
        for m in g:
            if m in seen:
                raise ConfigError(f"modality {m} belongs to groups {seen[m]} and {tuple(g)}")
            seen[m] = tuple(g)
        teams.append(tuple(g))
    teams += [(m,) for m in mods if m not in seen]
    return teams


def _random_pose(rng: np.random.Generator, extent: float) -> Pose:
    return Pose(float(rng.uniform(-extent, extent)), float(rng.uniform(-extent, extent)),
                float(rng.uniform(-math.pi, math.pi)))


def build_manifest(cfg: WorldConfig, seed: int) -> DatasetManifest:
    teams = _teams(cfg)
    specs = {m.modality_id: make_modality(seed, m.modality_id, m.C_m, cfg.C_lat, m.nonlinearity,
                                          m.noise_sigma, m.dropout_rate, m.range_falloff,
                                          math.inf if m.fov_radius is None else m.fov_radius)
             for m in cfg.modalities}
    layout = make_rng(seed, _LAYOUT)
    order = layout.permutation(cfg.train_scenes)
    scenes, coverage = [], {m: [] for m in cfg.modality_ids}
    for rank, sid in enumerate(sorted(range(cfg.train_scenes), key=lambda s: order[s])):
        team = teams[rank % len(teams)]
        rng = make_rng(seed, _LAYOUT, sid)
        agents = []
        for m in team:
            for _ in range(cfg.agents_per_modality):
                agents.append(AgentConfig(len(agents), m, _random_pose(rng, cfg.pose_extent)).to_dict())
            coverage[m].append(sid)
        scenes.append({"scene_id": sid, "split": "train", "agents": agents})
    scenes.sort(key=lambda s: s["scene_id"])
    for k in range(cfg.eval_scenes):
        sid = cfg.train_scenes + k
        rng = make_rng(seed, _LAYOUT, sid)
        agents = []
        for m in cfg.modality_ids:
            for _ in range(cfg.agents_per_modality):
                agents.append(AgentConfig(len(agents), m, _random_pose(rng, cfg.pose_extent)).to_dict())
        scenes.append({"scene_id": sid, "split": "eval", "agents": agents})
    manifest = DatasetManifest(
        seed=seed, world=cfg.to_dict(), scenes=scenes,
        coverage={m: sorted(v) for m, v in coverage.items()},
        isolation_pairs=[list(p) for p in cfg.isolation_pairs],
        groups=[list(t) for t in teams if len(t) > 1],
        modality_specs={m: s.to_dict() for m, s in specs.items()},
        prototypes=make_prototypes(seed, cfg.object_types, cfg.C_lat, cfg.type_spread).tolist(),
    )
    manifest.check_isolation()
    return manifest


def write_grid(path: Path, F: np.ndarray) -> None:
    F = np.asarray(F, dtype="<f4")
    if F.ndim == 2:
        F = F[..., None]
    H, W, C = F.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(H, W, C, 0))
        fh.write(np.ascontiguousarray(F).tobytes())


def read_grid(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    H, W, C, _ = HEADER.unpack_from(raw)
    body = raw[HEADER.size:]
    if len(body) != 4 * H * W * C:
        raise CorruptionError(f"{path}: expected {4 * H * W * C} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W, C)


class Dataset:
    """A generated dataset directory: manifest plus per-(scene, agent) grids."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self.world = WorldConfig.from_dict(manifest.world)
        self.specs = {m: ModalitySpec.from_dict(d) for m, d in manifest.modality_specs.items()}
        self.prototypes = np.asarray(manifest.prototypes)
        self._scenes = {s["scene_id"]: s for s in manifest.scenes}

    # --- layout
    def obs_path(self, scene_id: int, agent_id: int) -> Path:
        return self.root / "obs" / f"s{scene_id:05d}_a{agent_id:02d}.bin"

    def truth_path(self, scene_id: int, agent_id: int) -> Path:
        return self.root / "truth" / f"s{scene_id:05d}_a{agent_id:02d}.bin"

    # --- queries
    @property
    def seed(self) -> int:
        return self.manifest.seed

    def scene_ids(self, split: str) -> list[int]:
        return [s["scene_id"] for s in self.manifest.scenes if s["split"] == split]

    def agents(self, scene_id: int) -> list[AgentConfig]:
        return [AgentConfig.from_dict(a) for a in self._scenes[scene_id]["agents"]]

    def scene(self, scene_id: int) -> LatentScene:
        w = self.world
        return gen_scene(self.seed, w.H, w.W, w.C_lat, w.object_count_range, scene_id=scene_id,
                         prototypes=self.prototypes, jitter=w.latent_jitter,
                         occupied_bounds=w.occupied_bounds)

    def observe(self, scene: LatentScene, agent: AgentConfig) -> np.ndarray:
        return observe(scene, self.specs[agent.modality_id], agent, self.seed, self.world.cell_size)

    def samples(self, modality: str, split: str = "train"):
        """(scene_id, agent) pairs for every agent of ``modality`` in ``split``."""
        out = []
        for sid in self.scene_ids(split):
            out += [(sid, a) for a in self.agents(sid) if a.modality_id == modality]
        return out

    def load_observation(self, scene_id: int, agent_id: int) -> np.ndarray:
        return read_grid(self.obs_path(scene_id, agent_id))

    def visibility(self, modality: str) -> np.ndarray:
        """(H, W) bool mask of cells inside ``modality``'s sensing range."""
        w = self.world
        return distance_grid(w.H, w.W, w.cell_size) <= self.specs[modality].fov_radius

    def load_truth(self, scene_id: int, agent_id: int, visible: bool = False) -> np.ndarray:
        """Occupancy in the agent's frame; ``visible`` drops objects outside its sensing range."""
        y = read_grid(self.truth_path(scene_id, agent_id))[..., 0]
        if visible:
            mod = next(a["modality_id"] for a in self._scenes[scene_id]["agents"] if a["agent_id"] == agent_id)
            y = y * self.visibility(mod)
        return y

    def load_stack(self, modality: str, split: str = "train", visible: bool = False):
        """Stacked (features (N, H, W, C), truths (N, H, W), samples) for one modality."""
        samples = self.samples(modality, split)
        if not samples:
            raise DataError(f"no {split} observations for modality {modality}")
        X = np.stack([self.load_observation(s, a.agent_id) for s, a in samples]).astype(np.float64)
        Y = np.stack([self.load_truth(s, a.agent_id) for s, a in samples]).astype(np.float64)
        if visible:
            Y = Y * self.visibility(modality)
        return X, Y, samples

    def local_view(self, modality: str) -> "LocalView":
        return LocalView(self, modality)


class LocalView:
    """Read access limited to one modality's own training observations."""

    def __init__(self, dataset: Dataset, modality: str):
        self._ds = dataset
        self.modality = modality
        self.world = dataset.world

    def samples(self):
        return self._ds.samples(self.modality, "train")

    def load_observation(self, scene_id: int, agent_id: int) -> np.ndarray:
        self._check(scene_id, agent_id)
        return self._ds.load_observation(scene_id, agent_id)

    def load_truth(self, scene_id: int, agent_id: int, visible: bool = False) -> np.ndarray:
        self._check(scene_id, agent_id)
        return self._ds.load_truth(scene_id, agent_id, visible)

    def load_stack(self, visible: bool = True):
        X, Y, samples = self._ds.load_stack(self.modality, "train", visible)
        return X, Y, samples

    def _check(self, scene_id: int, agent_id: int) -> None:
        agent = next((a for a in self._ds.agents(scene_id) if a.agent_id == agent_id), None)
        if agent is None or agent.modality_id != self.modality:
            owner = agent.modality_id if agent else "?"
            raise IsolationViolation(f"local view of {self.modality} refused observation of {owner} "
                                     f"(scene {scene_id}, agent {agent_id})")
        if scene_id not in self._ds.manifest.coverage[self.modality]:
            raise IsolationViolation(f"scene {scene_id} is outside {self.modality}'s training coverage")


def make_dataset(cfg: WorldConfig, seed: int, out_dir) -> Dataset:
    """Generate scenes and observations for every (scene, agent) and write them under ``out_dir``."""
    manifest = build_manifest(cfg, seed)
    root = Path(out_dir)
    (root / "obs").mkdir(parents=True, exist_ok=True)
    (root / "truth").mkdir(parents=True, exist_ok=True)
    ds = Dataset(root, manifest)
    for entry in manifest.scenes:
        scene = ds.scene(entry["scene_id"])
        for a in ds.agents(entry["scene_id"]):
            write_grid(ds.obs_path(scene.scene_id, a.agent_id), ds.observe(scene, a))
            write_grid(ds.truth_path(scene.scene_id, a.agent_id), agent_truth(scene, a, cfg.cell_size))
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
    log.info("wrote %d scenes to %s", len(manifest.scenes), root)
    return ds


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(path) as fh:
        d = json.load(fh)
    return Dataset(root, DatasetManifest(**d))
