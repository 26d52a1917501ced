import dataclasses

import numpy as np
import pytest

from codealign.collab import (LATE_FUSION_BYTES_PER_CLUSTER, MODES, Artifacts, _clusters, inject_pose_noise,
                              run_frame)
from codealign.core import ConfigError, Pose
from codealign.metrics import cell_ap
from codealign.wire import payload_size


def frames_with(tiny_ds, modality="mB"):
    for sid in tiny_ds.scene_ids("eval"):
        agents = tiny_ds.agents(sid)
        for ego in agents:
            if ego.modality_id == modality and len(agents) > 1:
                yield tiny_ds.scene(sid), ego, [a for a in agents if a.agent_id != ego.agent_id]


def test_zero_neighbours_equals_no_collab(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    scene, ego, _ = next(frames_with(tiny_ds))
    base = run_frame(scene, ego, [], art, "no_collab", tiny_ds)
    for mode in MODES:
        fr = run_frame(scene, ego, [], art, mode, tiny_ds)
        assert fr.detection.tobytes() == base.detection.tobytes()
        assert fr.link_bytes == {}


def test_clone_neighbour_cannot_hurt(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    solo, duo, truths = [], [], []
    for scene, ego, _ in frames_with(tiny_ds):
        clone = dataclasses.replace(ego)  # same id, so the same observation noise
        a = run_frame(scene, ego, [], art, "no_collab", tiny_ds)
        b = run_frame(scene, ego, [clone], art, "codealign", tiny_ds)
        np.testing.assert_array_equal(a.detection, b.detection)
        solo.append(a.detection)
        duo.append(b.detection)
        truths.append(a.truth)
    assert cell_ap(duo, truths) >= cell_ap(solo, truths)


def test_max_fusion_scores_non_decreasing(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    assert np.all(art.space_of("mB").head.weight >= 0)
    for scene, ego, nbs in frames_with(tiny_ds):
        prev = run_frame(scene, ego, [], art, "codealign", tiny_ds).detection
        for k in range(1, len(nbs) + 1):
            cur = run_frame(scene, ego, nbs[:k], art, "codealign", tiny_ds).detection
            assert np.all(cur >= prev)
            prev = cur


def test_codealign_bytes_obey_wire_law(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    space = art.space_of("mB")
    H, W = tiny_ds.world.H, tiny_ds.world.W
    seen = 0
    for scene, ego, nbs in frames_with(tiny_ds):
        fr = run_frame(scene, ego, nbs, art, "codealign", tiny_ds)
        for nb in nbs:
            assert fr.link_bytes[nb.agent_id] == payload_size(H, W, space.D)
            assert fr.header_bytes[nb.agent_id] == 27 + len(space.owner)
            seen += 1
    assert seen > 0


def test_dense_and_late_fusion_bytes(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    scene, ego, nbs = next(frames_with(tiny_ds))
    H, W = tiny_ds.world.H, tiny_ds.world.W
    fr = run_frame(scene, ego, nbs, art, "d2d", tiny_ds)
    assert set(fr.link_bytes.values()) == {H * W * art.space_of("mB").C_z * 4}
    fr = run_frame(scene, ego, nbs, art, "late_fusion", tiny_ds)
    for nb in nbs:
        det = art.space_of(nb.modality_id).detect(nb.modality_id, tiny_ds.observe(scene, nb))
        assert fr.link_bytes[nb.agent_id] == LATE_FUSION_BYTES_PER_CLUSTER * _clusters(det >= 0.5)


def test_clusters_by_hand():
    m = np.zeros((5, 5), bool)
    m[0, 0] = m[0, 1] = True
    m[3:5, 3:5] = True
    m[4, 0] = True
    assert _clusters(m) == 3


def test_unknown_mode_and_missing_translator(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    scene, ego, nbs = next(frames_with(tiny_ds))
    with pytest.raises(ConfigError):
        run_frame(scene, ego, nbs, art, "early_fusion", tiny_ds)
    bare = Artifacts(art.spaces, {}, {})
    if any(art.owner_of(n.modality_id) != art.owner_of("mB") for n in nbs):
        with pytest.raises(ConfigError, match="missing translator"):
            run_frame(scene, ego, nbs, bare, "codealign", tiny_ds)


def test_pose_noise():
    p = Pose(1.0, 2.0, 3.0)
    assert inject_pose_noise(p, 0.0, 0.0, 5, 1) is p
    a = inject_pose_noise(p, 1.0, 0.2, 5, 1, 2)
    assert a == inject_pose_noise(p, 1.0, 0.2, 5, 1, 2)
    assert a != inject_pose_noise(p, 1.0, 0.2, 5, 1, 3)
    assert -np.pi < a.heading <= np.pi
    with pytest.raises(ConfigError):
        inject_pose_noise(p, -1.0, 0.0, 5)


def test_pose_noise_frame_is_deterministic(tiny_ds, tiny_trained):
    _, art, _, _ = tiny_trained
    scene, ego, nbs = next(frames_with(tiny_ds))
    a = run_frame(scene, ego, nbs, art, "codealign", tiny_ds, pose_noise=(1.0, 0.1), seed=4, noise_key=scene.scene_id)
    b = run_frame(scene, ego, nbs, art, "codealign", tiny_ds, pose_noise=(1.0, 0.1), seed=4, noise_key=scene.scene_id)
    np.testing.assert_array_equal(a.detection, b.detection)
