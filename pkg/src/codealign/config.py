"""Run configuration: one JSON document, dot-path overrides, stage hashes."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

from .core import ConfigError
from .worldgen import NONLINEARITIES, WorldConfig

# stage -> config sections whose values feed that stage (upstream sections included)
STAGES = {
    "gen-data": ("seed", "world"),
    "pretrain": ("seed", "world", "pretrain"),
    "train-codespace": ("seed", "world", "pretrain", "codespace"),
    "train-translator": ("seed", "world", "pretrain", "codespace", "translator", "d2d"),
    "simulate": ("seed", "world", "pretrain", "codespace", "translator", "d2d", "simulate", "sweeps"),
}

MODES = ("codealign", "no_collab", "no_align", "late_fusion", "d2d")


def default_config() -> dict:
    return {
        "seed": 7,
        "world": WorldConfig().to_dict(),
        "pretrain": {"epochs": 50, "lr": 5.0, "batch_size": 32},
        "codespace": {"D": 16, "C_z": 16, "epochs": 20, "lr": 1.0, "beta_commit": 0.25, "lambda": 0.1,
                      "sim_loss": "smooth_l1", "batch_size": 32},
        "translator": {"structure": "one-to-one", "input_source": "encoded", "epochs": 20, "lr": 2.0,
                       "tau_schedule": [1.0, 0.1], "C_hid": 32, "balancing": True, "batch_size": 32},
        "d2d": {"epochs": 20, "lr": 1.0, "snap_weight": 1.0},
        "simulate": {"ego": "mB", "ego_mode": "fixed", "ego_dense": False, "threshold": 0.5,
                     "pose_noise": [0.0, 0.0], "modes": list(MODES)},
        "sweeps": {"codebook_sizes": [4, 8, 16, 32, 64], "pose_sigmas": [0.0, 0.5, 1.0, 2.0],
                   "pose_heading_sigma": 0.0, "input_sources": ["encoded", "adapted", "codemap"]},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "world":
            out[k] = _merge(out[k], v, f"{path}{k}.")
        elif k == "world" and isinstance(v, dict):
            w = dict(out[k])
            for wk in v:
                if wk not in w:
                    raise ConfigError(f"unknown config key 'world.{wk}'")
            w.update(v)
            out[k] = w
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None) -> dict:
    """Defaults, then the JSON file, then ``--set a.b=value`` overrides, then ``seed``."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        set_path(cfg, *_split_override(item))
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def _split_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings: --set simulate.ego=mA
    return key.strip(), value


def set_path(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if isinstance(node, list):
            try:
                node = node[int(p)]
                continue
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index {p!r} in {key!r}") from None
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ConfigError(f"bad list index {last!r} in {key!r}") from None
        return
    if not isinstance(node, dict) or last not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[last] = value


def _pos(v, name, integer=False, allow_zero=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    if integer:
        ok = ok and float(v).is_integer()
    if not ok or (v < 0 if allow_zero else v <= 0):
        raise ConfigError(f"{name} must be a {'non-negative' if allow_zero else 'positive'} "
                          f"{'integer' if integer else 'number'}, got {v!r}")


def validate(cfg: dict) -> None:
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**63:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    world = WorldConfig.from_dict(cfg["world"])
    if world.H < 8 or world.W < 8:
        raise ConfigError("world grid must be at least 8x8")
    if world.C_lat < 2:
        raise ConfigError("world.C_lat must be >= 2")
    mods = world.modality_ids
    if len(set(mods)) != len(mods):
        raise ConfigError("modality ids must be unique")
    for m in world.modalities:
        if m.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"modality {m.modality_id}: unknown nonlinearity {m.nonlinearity!r}")
        if not 0 <= m.dropout_rate < 1:
            raise ConfigError(f"modality {m.modality_id}: dropout_rate must be in [0, 1)")
        _pos(m.C_m, f"{m.modality_id}.C_m", integer=True)
    for k in ("pretrain", "codespace", "translator", "d2d"):
        _pos(cfg[k]["epochs"], f"{k}.epochs", integer=True, allow_zero=True)
        _pos(cfg[k]["lr"], f"{k}.lr")
    cs = cfg["codespace"]
    _pos(cs["C_z"], "codespace.C_z", integer=True)
    if not isinstance(cs["D"], int) or not 2 <= cs["D"] <= 256:
        raise ConfigError(f"codespace.D must be an integer in [2, 256], got {cs['D']!r}")
    _pos(cs["lambda"], "codespace.lambda", allow_zero=True)
    from .core import SIMILARITY_LOSSES
    if cs["sim_loss"] not in SIMILARITY_LOSSES:
        raise ConfigError(f"codespace.sim_loss must be one of {sorted(SIMILARITY_LOSSES)}")
    tr = cfg["translator"]
    if tr["structure"] not in ("one-to-one", "multi-head"):
        raise ConfigError("translator.structure must be 'one-to-one' or 'multi-head'")
    from .translator import INPUT_SOURCES
    if tr["input_source"] not in INPUT_SOURCES:
        raise ConfigError(f"translator.input_source must be one of {INPUT_SOURCES}")
    t0, t1 = tr["tau_schedule"]
    _pos(t0, "tau start")
    _pos(t1, "tau end")
    sim = cfg["simulate"]
    if sim["ego"] not in mods:
        raise ConfigError(f"simulate.ego {sim['ego']!r} is not a configured modality")
    if sim["ego_mode"] not in ("fixed", "alternating"):
        raise ConfigError("simulate.ego_mode must be 'fixed' or 'alternating'")
    for m in sim["modes"]:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
    for s in list(sim["pose_noise"]) + list(cfg["sweeps"]["pose_sigmas"]):
        _pos(s, "pose noise sigma", allow_zero=True)
    for D in cfg["sweeps"]["codebook_sizes"]:
        if not isinstance(D, int) or not 2 <= D <= 256:
            raise ConfigError(f"sweep codebook size must be an integer in [2, 256], got {D!r}")


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, stage: str | None = None) -> str:
    """Short sha256 over the whole config, or over the sections ``stage`` depends on."""
    if stage is None:
        part = cfg
    else:
        part = {k: cfg[k] for k in STAGES[stage]}
    return hashlib.sha256(canonical(part).encode()).hexdigest()[:16]
