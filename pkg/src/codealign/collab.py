"""Multi-agent inference: message exchange, warping, fusion and the baseline modes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .codespace import CodeSpace
from .core import ConfigError, Pose, make_rng, wrap_angle
from .geometry import warp
from .translator import DenseMap, translate_hard, translator_input
from .worldgen import agent_truth
from .wire import CodeMessage, dense_bytes, pack, payload_size, unpack

MODES = ("codealign", "no_collab", "no_align", "late_fusion", "d2d")
LATE_FUSION_BYTES_PER_CLUSTER = 12


@dataclass
class Artifacts:
    """Everything a deployed agent may hold: code spaces, translators and D2D maps."""

    spaces: dict  # owner -> CodeSpace
    translators: dict = field(default_factory=dict)  # (source modality, target owner) -> translator
    d2d: dict = field(default_factory=dict)  # (source modality, target owner) -> DenseMap
    source_inputs: dict = field(default_factory=dict)  # (source, target) -> CodeSpace for adapted/codemap inputs

    def owner_of(self, modality: str) -> str:
        for owner, space in self.spaces.items():
            if modality in space.members:
                return owner
        raise ConfigError(f"no code space covers modality {modality}")

    def space_of(self, modality: str) -> CodeSpace:
        return self.spaces[self.owner_of(modality)]

    def translator(self, source: str, target_owner: str):
        try:
            return self.translators[(source, target_owner)]
        except KeyError:
            raise ConfigError(f"missing translator {source} -> {target_owner}") from None


@dataclass
class FrameResult:
    ego_id: int
    mode: str
    detection: np.ndarray  # (H, W) scores
    truth: np.ndarray  # (H, W)
    link_bytes: dict  # neighbor id -> payload bytes
    header_bytes: dict
    neighbor_ids: list

    def to_record(self) -> dict:
        return {"ego": self.ego_id, "mode": self.mode, "neighbors": list(self.neighbor_ids),
                "link_bytes": {str(k): v for k, v in self.link_bytes.items()},
                "header_bytes": {str(k): v for k, v in self.header_bytes.items()}}


def inject_pose_noise(pose: Pose, sigma_xy: float, sigma_heading: float, seed: int, *keys: int) -> Pose:
    if sigma_xy < 0 or sigma_heading < 0:
        raise ConfigError("pose noise sigmas must be non-negative")
    if sigma_xy == 0 and sigma_heading == 0:
        return pose
    rng = make_rng(seed, 40, *keys)
    dx, dy = rng.normal(0.0, 1.0, 2) * sigma_xy
    dh = rng.normal(0.0, 1.0) * sigma_heading
    return Pose(pose.x + dx, pose.y + dy, wrap_angle(pose.heading + dh))


def _fit_channels(F: np.ndarray, C: int) -> np.ndarray:
    if F.shape[-1] == C:
        return F
    if F.shape[-1] > C:
        return F[..., :C]
    pad = np.zeros(F.shape[:-1] + (C - F.shape[-1],))
    return np.concatenate([F, pad], axis=-1)


def _clusters(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask)
    return int(n)


def run_frame(scene, ego, neighbors, artifacts: Artifacts, mode: str, dataset, pose_noise=(0.0, 0.0),
              seed: int = 0, noise_key: int = 0, ego_dense: bool = False, threshold: float = 0.5,
              translator_for=None) -> FrameResult:
    """One collaborative perception frame from ``ego``'s point of view.

    ``dataset`` supplies the observation model and world geometry.
    ``translator_for(source, target_owner)`` overrides translator lookup (for
    translation-variant studies).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    cell = dataset.world.cell_size

    truth = agent_truth(scene, ego, cell)
    ego_space = artifacts.space_of(ego.modality_id)
    F_ego = dataset.observe(scene, ego)
    if ego_dense:
        ego_feat = ego_space.adapt(ego.modality_id, F_ego)
    else:
        ego_feat = ego_space.reconstruct(ego.modality_id, F_ego)
    neighbors = sorted(neighbors, key=lambda a: a.agent_id)
    link_bytes, header_bytes = {}, {}

    if mode == "no_collab" or not neighbors:
        det = ego_space.head(ego_feat)
        return FrameResult(ego.agent_id, mode, det, truth, {}, {}, [a.agent_id for a in neighbors])

    if mode == "late_fusion":
        fused = ego_space.head(ego_feat)
        for nb in neighbors:
            nb_space = artifacts.space_of(nb.modality_id)
            s = nb_space.detect(nb.modality_id, dataset.observe(scene, nb))
            keep = s >= threshold
            sent = keep.astype(np.float64)  # binary detections travel, not scores
            link_bytes[nb.agent_id] = LATE_FUSION_BYTES_PER_CLUSTER * _clusters(keep)
            header_bytes[nb.agent_id] = 0
            pose = inject_pose_noise(nb.pose, *pose_noise, seed, noise_key, nb.agent_id)
            fused = np.maximum(fused, warp(sent, pose, ego.pose, 0.0, cell))
        return FrameResult(ego.agent_id, mode, fused, truth, link_bytes, header_bytes,
                           [a.agent_id for a in neighbors])

    ego_owner = ego_space.owner
    C_z = ego_space.C_z
    fused = ego_feat.copy()
    lookup = translator_for or artifacts.translator
    for nb in neighbors:
        F_nb = dataset.observe(scene, nb)
        nb_owner = artifacts.owner_of(nb.modality_id)
        pose = inject_pose_noise(nb.pose, *pose_noise, seed, noise_key, nb.agent_id)
        if mode == "codealign":
            if nb_owner == ego_owner:
                M = ego_space.quantize(nb.modality_id, F_nb)
            else:
                T = lookup(nb.modality_id, ego_owner)
                src_space = artifacts.source_inputs.get((nb.modality_id, ego_owner), artifacts.spaces[nb_owner])
                M = translate_hard(translator_input(F_nb, T, src_space), T, ego_owner, ego_space.D)
            raw = pack(M, nb.agent_id, scene.scene_id, pose).to_bytes()
            msg = CodeMessage.from_bytes(raw)
            M_rx, meta = unpack(msg)
            link_bytes[nb.agent_id] = len(msg.payload)
            header_bytes[nb.agent_id] = msg.header_bytes
            feat = ego_space.decode(M_rx)
            pose = meta["pose"]
        elif mode == "no_align":
            feat = _fit_channels(artifacts.spaces[nb_owner].reconstruct(nb.modality_id, F_nb), C_z)
            # the neighbour's own code map is what travels
            link_bytes[nb.agent_id] = payload_size(feat.shape[0], feat.shape[1], artifacts.spaces[nb_owner].D)
            header_bytes[nb.agent_id] = 0
        else:  # d2d
            if nb_owner == ego_owner:
                feat = ego_space.adapt(nb.modality_id, F_nb)
            else:
                mapping: DenseMap = artifacts.d2d[(nb.modality_id, ego_owner)]
                feat = mapping(F_nb)
            link_bytes[nb.agent_id] = dense_bytes(feat.shape[0], feat.shape[1], feat.shape[2])
            header_bytes[nb.agent_id] = 0
        warped = warp(feat, pose, ego.pose, -np.inf, cell)
        fused = np.maximum(fused, warped)
    det = ego_space.head(fused)
    return FrameResult(ego.agent_id, mode, det, truth, link_bytes, header_bytes, [a.agent_id for a in neighbors])

