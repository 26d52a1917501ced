import numpy as np
import pytest

from codealign.worldgen import ModalityConfig, WorldConfig, make_dataset


def tiny_world(**kw) -> WorldConfig:
    base = dict(
        H=16, W=16, C_lat=6, object_count_range=(2, 5), occupied_bounds=(0.02, 0.25), pose_extent=3.0,
        train_scenes=40, eval_scenes=12,
        modalities=[
            ModalityConfig("mA", 8, "identity", 0.05, 0.2, 0.0, 7.0),
            ModalityConfig("mB", 6, "tanh", 0.1, 0.0, 0.05, 7.0),
            ModalityConfig("mC", 8, "relu", 0.05, 0.0, 0.0, 7.0),
        ],
        isolation_pairs=[("mA", "mB")], groups=[("mA", "mC")],
    )
    base.update(kw)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    return make_dataset(tiny_world(), 3, tmp_path_factory.mktemp("tiny_ds"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_cfg(**sections) -> dict:
    """Default run config on the tiny world with short training."""
    from codealign.config import default_config
    cfg = default_config()
    cfg["seed"] = 3
    cfg["world"] = tiny_world().to_dict()
    cfg["pretrain"].update(epochs=15)
    cfg["codespace"].update(D=8, epochs=4)
    cfg["translator"].update(epochs=6, lr=0.5)
    cfg["d2d"].update(epochs=4)
    cfg["sweeps"].update(codebook_sizes=[4, 8], pose_sigmas=[0.0, 1.0])
    for k, v in sections.items():
        cfg[k].update(v)
    return cfg


@pytest.fixture(scope="session")
def tiny_trained(tiny_ds):
    from codealign.eval import train_all
    cfg = tiny_cfg()
    art, heads, info, curves = train_all(tiny_ds, cfg)
    return cfg, art, heads, info


# acceptance criterion -> (passed, detail); printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
