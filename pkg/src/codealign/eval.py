"""Experiment orchestration and metrics: alignment error, suites, reports.

A suite run yields flat records (frames with their score/truth arrays, plus
scalar metrics); :func:`build_report` turns records into the report, so the
same numbers come out whether records are held in memory or replayed from
frame logs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .codespace import pretrain_pipeline, space_ap, train_codespace, train_group_codespace
from .collab import Artifacts, run_frame
from .config import canonical, config_hash
from .core import ConfigError, DataError, smooth_l1
from .geometry import warp
from .metrics import cell_ap
from .translator import (make_multihead, make_one_to_one, train_d2d, train_multihead, train_translator,
                         translate_hard, translator_input)
from .wire import bandwidth_report

log = logging.getLogger(__name__)

SUITES = ("isolation-core", "codebook-sweep", "translation-variants", "pose-sweep")
AP_NOTE = ("cell-level AP: every grid cell is a detection candidate, ranked by score across frames; "
           "area under the precision-recall curve by trapezoid, tied scores form one threshold. "
           "Stands in for box AP at IoU thresholds, which needs oriented boxes.")
VARIANT_NAMES = {"encoded": "D2C", "adapted": "A2C", "codemap": "C2C"}
LINK_KIND = {"codealign": "codemap", "no_align": "codemap", "d2d": "dense", "late_fusion": "detections"}


# ---------------------------------------------------------------- metrics

def alignment_error(source: str, target_owner: str, dataset, artifacts: Artifacts, translator=None,
                    split: str = "eval") -> float:
    """Mean Smooth-L1 between translated source codes and the target's own quantized features.

    Both maps are compared in the target agent's frame, over cells inside both
    agents' sensing ranges.
    """
    space = artifacts.spaces[target_owner]
    T = translator if translator is not None else artifacts.translator(source, target_owner)
    src_space = artifacts.space_of(source)
    cell = dataset.world.cell_size
    vis_s = dataset.visibility(source).astype(np.float64)
    total, count = 0.0, 0
    for sid in dataset.scene_ids(split):
        agents = dataset.agents(sid)
        srcs = [a for a in agents if a.modality_id == source]
        tgts = [a for a in agents if a.modality_id in space.members and a.modality_id != source]
        if not srcs or not (tgts or source in space.members):
            continue
        scene = dataset.scene(sid)
        for s in srcs:
            F_s = dataset.observe(scene, s)
            out = space.decode(translate_hard(translator_input(F_s, T, src_space), T, target_owner, space.D))
            # a source inside the target space is compared with its own quantization
            for t in ([s] if source in space.members else tgts):
                a = warp(out, s.pose, t.pose, 0.0, cell)
                seen = warp(vis_s, s.pose, t.pose, 0.0, cell) > 0.5
                mask = seen & dataset.visibility(t.modality_id)
                if not mask.any():
                    continue
                b = space.reconstruct(t.modality_id, dataset.observe(scene, t))
                loss, _ = smooth_l1(a[mask], b[mask])
                n = int(mask.sum()) * a.shape[-1]
                total += loss * n
                count += n
    if count == 0:
        raise DataError(f"no co-occurring {split} observations of {source} and {target_owner}")
    return total / count


def frames_ap(frames, ego_mode: str = "fixed") -> float:
    """Pooled AP; ``alternating`` averages the per-ego-modality pooled APs."""
    if not frames:
        raise DataError("no frames to score")
    if ego_mode == "fixed":
        return cell_ap([f["scores"] for f in frames], [f["truth"] for f in frames])
    by_ego = {}
    for f in frames:
        by_ego.setdefault(f["ego_modality"], []).append(f)
    return float(np.mean([frames_ap(v, "fixed") for _, v in sorted(by_ego.items())]))


# ---------------------------------------------------------------- training stages

def space_teams(world) -> list[tuple[str, ...]]:
    """Code-space owners: each configured group, then every ungrouped modality alone."""
    teams, grouped = [], set()
    for g in world.groups:
        teams.append(tuple(sorted(g)))
        grouped |= set(g)
    teams += [(m,) for m in world.modality_ids if m not in grouped]
    return teams


def pretrain_all(dataset, cfg) -> tuple[dict, dict]:
    p = cfg["pretrain"]
    heads, aps = {}, {}
    for m in dataset.world.modality_ids:
        heads[m], aps[m] = pretrain_pipeline(m, dataset, p["epochs"], p["lr"], cfg["seed"], p["batch_size"])
        log.info("pretrain %s: eval AP %.4f", m, aps[m])
    return heads, aps


def train_spaces(dataset, cfg, heads: dict, D: int | None = None) -> dict:
    c = cfg["codespace"]
    D = c["D"] if D is None else D
    spaces = {}
    for team in space_teams(dataset.world):
        if len(team) == 1:
            sp = train_codespace(team[0], dataset, heads[team[0]], D=D, epochs=c["epochs"], lr=c["lr"],
                                 seed=cfg["seed"], C_z=c["C_z"], beta_commit=c["beta_commit"],
                                 batch_size=c["batch_size"])
        else:
            sp = train_group_codespace(team, dataset, heads, D=D, lam=c["lambda"], epochs=c["epochs"],
                                       lr=c["lr"], seed=cfg["seed"], C_z=c["C_z"],
                                       beta_commit=c["beta_commit"], sim_loss=c["sim_loss"],
                                       batch_size=c["batch_size"])
        spaces[sp.owner] = sp
        log.info("code space %s (D=%d) trained", sp.owner, D)
    return spaces


def ego_modalities(cfg, dataset) -> list[str]:
    if cfg["simulate"]["ego_mode"] == "alternating":
        return list(dataset.world.modality_ids)
    return [cfg["simulate"]["ego"]]


def needed_pairs(spaces: dict, egos) -> list[tuple[str, str]]:
    """(source modality, target owner) for every neighbour that must translate to an ego."""
    art = Artifacts(spaces)
    owners = sorted({art.owner_of(e) for e in egos})
    pairs = []
    for o in owners:
        for sp in spaces.values():
            for m in sp.members:
                if m not in spaces[o].members:
                    pairs.append((m, o))
    return sorted(set(pairs))


def train_translators(dataset, cfg, spaces: dict, pairs, input_source: str | None = None):
    """Returns ({(source, target): translator}, {"src->tgt": loss curve})."""
    t = cfg["translator"]
    src_kind = t["input_source"] if input_source is None else input_source
    art = Artifacts(spaces)
    out, curves = {}, {}
    sources = sorted({s for s, _ in pairs})
    for s in sources:
        targets = sorted(o for src, o in pairs if src == s)
        src_space = art.space_of(s)
        C_in = dataset.specs[s].C_m if src_kind == "encoded" else src_space.C_z
        view = dataset.local_view(s)
        if t["structure"] == "multi-head":
            T = make_multihead(s, {o: spaces[o].D for o in targets}, C_in, t["C_hid"], seed=cfg["seed"],
                               input_source=src_kind)
            T, curve, _ = train_multihead(T, view, {o: spaces[o] for o in targets}, t["epochs"], t["lr"],
                                          cfg["seed"], src_space, t["batch_size"], tuple(t["tau_schedule"]),
                                          balancing=t["balancing"])
            for o in targets:
                out[(s, o)] = T
            curves[f"{s}->{'|'.join(targets)}"] = curve
        else:
            for o in targets:
                T = make_one_to_one(s, o, C_in, spaces[o].D, seed=cfg["seed"], input_source=src_kind)
                T, curve = train_translator(T, view, spaces[o], t["epochs"], t["lr"], cfg["seed"], src_space,
                                            t["batch_size"], tuple(t["tau_schedule"]))
                out[(s, o)] = T
                curves[f"{s}->{o}"] = curve
        log.info("translators from %s (%s) trained", s, src_kind)
    return out, curves


def train_d2d_maps(dataset, cfg, spaces: dict, pairs) -> dict:
    d = cfg["d2d"]
    return {(s, o): train_d2d(s, dataset.local_view(s), spaces[o], d["epochs"], d["lr"], cfg["seed"],
                              d["snap_weight"])
            for s, o in pairs}


def train_all(dataset, cfg, heads=None, D=None, input_source=None, with_d2d=True):
    """Pretrain (unless ``heads`` given), code spaces, translators and D2D maps."""
    info = {}
    if heads is None:
        heads, info["pretrain_ap"] = pretrain_all(dataset, cfg)
    spaces = train_spaces(dataset, cfg, heads, D)
    info["codespace_ap"] = {f"{o}/{m}": space_ap(sp, dataset, m) for o, sp in spaces.items() for m in sp.members}
    pairs = needed_pairs(spaces, ego_modalities(cfg, dataset))
    translators, curves = train_translators(dataset, cfg, spaces, pairs, input_source)
    info["translator_final_loss"] = {k: v[-1] if v else None for k, v in curves.items()}
    d2d = train_d2d_maps(dataset, cfg, spaces, pairs) if with_d2d else {}
    return Artifacts(spaces, translators, d2d), heads, info, curves


# ---------------------------------------------------------------- frames

def _frame_task(args):
    dataset, artifacts, cfg, mode, pose_noise, pairs = args
    sim = cfg["simulate"]
    out = []
    for sid, ego_id in pairs:
        scene = dataset.scene(sid)
        agents = dataset.agents(sid)
        ego = next(a for a in agents if a.agent_id == ego_id)
        nbs = [a for a in agents if a.agent_id != ego_id]
        fr = run_frame(scene, ego, nbs, artifacts, mode, dataset, pose_noise=tuple(pose_noise), seed=cfg["seed"],
                       noise_key=sid, ego_dense=sim["ego_dense"], threshold=sim["threshold"])
        ego_space = artifacts.space_of(ego.modality_id)
        links = []
        for nb in nbs:
            if nb.agent_id not in fr.link_bytes:
                continue
            kind = LINK_KIND[mode]
            D = artifacts.space_of(nb.modality_id).D if mode == "no_align" else ego_space.D
            links.append({"sender": nb.modality_id, "receiver": ego.modality_id, "kind": kind,
                          "payload_bytes": int(fr.link_bytes[nb.agent_id]),
                          "header_bytes": int(fr.header_bytes[nb.agent_id]),
                          "H": int(fr.truth.shape[0]), "W": int(fr.truth.shape[1]), "C": int(ego_space.C_z),
                          "D": int(D)})
        out.append({"type": "frame", "mode": mode, "scene": int(sid), "ego": int(ego_id),
                    "ego_modality": ego.modality_id, "neighbors": [int(a.agent_id) for a in nbs],
                    "pose_noise": [float(v) for v in pose_noise], "links": links,
                    "scores": fr.detection, "truth": fr.truth})
    return out


def simulate_frames(dataset, artifacts: Artifacts, cfg, mode: str, pose_noise=(0.0, 0.0), workers: int = 1,
                    split: str = "eval") -> list[dict]:
    """One frame per (eval scene, ego agent); ordering is (scene, ego) regardless of ``workers``."""
    egos = set(ego_modalities(cfg, dataset))
    jobs = [(sid, a.agent_id) for sid in dataset.scene_ids(split)
            for a in dataset.agents(sid) if a.modality_id in egos]
    if not jobs:
        raise DataError(f"no {split} scenes contain an ego of modality {sorted(egos)}")
    if workers <= 1:
        frames = _frame_task((dataset, artifacts, cfg, mode, pose_noise, jobs))
    else:
        chunks = [jobs[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            parts = ex.map(_frame_task, [(dataset, artifacts, cfg, mode, pose_noise, c) for c in chunks])
            frames = [f for p in parts for f in p]
    frames.sort(key=lambda f: (f["scene"], f["ego"]))
    return frames


def _tag(records, suite: str, setting: dict):
    for r in records:
        r["suite"] = suite
        r["setting"] = dict(setting)
    return records


# ---------------------------------------------------------------- suites

def run_suite(dataset, cfg, suite: str, workers: int = 1, cache: dict | None = None) -> list[dict]:
    """All records for one suite. ``cache`` carries trained artifacts between suites of one run."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")
    cache = {} if cache is None else cache
    if "base" not in cache:
        cache["base"] = train_all(dataset, cfg)
    art, heads, info, curves = cache["base"]
    sim = cfg["simulate"]
    base_noise = sim["pose_noise"]
    records = [{"type": "metric", "name": "training", "value": info},
               {"type": "metric", "name": "translator_curves", "value": curves}]

    if suite == "isolation-core":
        for mode in sim["modes"]:
            records += simulate_frames(dataset, art, cfg, mode, base_noise, workers)
        for s, o in sorted(art.translators):
            records.append({"type": "metric", "name": "alignment_error", "key": f"{s}->{o}",
                            "value": alignment_error(s, o, dataset, art)})
        return _tag(records, suite, {})

    if suite == "codebook-sweep":
        out = []
        for D in cfg["sweeps"]["codebook_sizes"]:
            if D == cfg["codespace"]["D"]:
                a = art
            else:
                a = train_all(dataset, cfg, heads=heads, D=D, with_d2d=False)[0]
            for mode in ("codealign", "no_collab"):
                out += _tag(simulate_frames(dataset, a, cfg, mode, base_noise, workers), suite, {"D": D})
        return _tag(records, suite, {}) + out

    if suite == "translation-variants":
        out = []
        for src_kind in cfg["sweeps"]["input_sources"]:
            if src_kind == cfg["translator"]["input_source"]:
                a = art
            else:
                trs, _ = train_translators(dataset, cfg, art.spaces, sorted(art.translators), src_kind)
                a = Artifacts(art.spaces, trs, art.d2d)
            variant = VARIANT_NAMES[src_kind]
            out += _tag(simulate_frames(dataset, a, cfg, "codealign", base_noise, workers), suite,
                        {"variant": variant})
            errs = {f"{s}->{o}": alignment_error(s, o, dataset, a) for s, o in sorted(a.translators)}
            out.append({"type": "metric", "name": "alignment_error", "key": variant,
                        "value": float(np.mean(list(errs.values()))), "pairs": errs,
                        "suite": suite, "setting": {"variant": variant}})
        out += _tag(simulate_frames(dataset, art, cfg, "d2d", base_noise, workers), suite, {"variant": "D2D"})
        return _tag(records, suite, {}) + out

    # pose-sweep
    out = []
    heading = cfg["sweeps"]["pose_heading_sigma"]
    for sigma in cfg["sweeps"]["pose_sigmas"]:
        for mode in ("codealign", "late_fusion", "no_collab"):
            out += _tag(simulate_frames(dataset, art, cfg, mode, (sigma, heading), workers), suite,
                        {"sigma_xy": float(sigma)})
    return _tag(records, suite, {}) + out


# ---------------------------------------------------------------- reports

def _group_frames(records):
    groups = {}
    for r in records:
        if r["type"] == "frame":
            key = (r["suite"], canonical(r["setting"]), r["mode"])
            groups.setdefault(key, []).append(r)
    return groups


def _r(x):
    return None if x is None else round(float(x), 6)


def build_report(cfg, records, suites=None) -> dict:
    ego_mode = cfg["simulate"]["ego_mode"]
    groups = _group_frames(records)
    aps = {k: frames_ap(v, ego_mode) for k, v in sorted(groups.items())}
    suites = sorted({r["suite"] for r in records}) if suites is None else list(suites)
    if not suites:
        raise DataError("no records to report")
    report = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "suites": suites,
              "ego": {"mode": ego_mode, "ego": cfg["simulate"]["ego"]}, "ap_metric": AP_NOTE,
              "ap": {}, "alignment_error": {}, "bandwidth": {}, "curves": {}, "training": {}}

    for r in records:
        if r["type"] == "metric" and r["name"] == "training":
            report["training"] = r["value"]
        elif r["type"] == "metric" and r["name"] == "translator_curves":
            report["training"]["translator_curves"] = {k: [_r(v) for v in c] for k, c in r["value"].items()}

    if "isolation-core" in suites:
        report["ap"] = {mode: _r(ap) for (s, _, mode), ap in aps.items() if s == "isolation-core"}
        report["alignment_error"] = {r["key"]: _r(r["value"]) for r in records
                                     if r["type"] == "metric" and r["name"] == "alignment_error"
                                     and r["suite"] == "isolation-core"}
        links = [dict(l) for (s, _, _), fr in groups.items() if s == "isolation-core"
                 for f in fr for l in f["links"]]
        report["bandwidth"] = bandwidth_report(links)

    if "codebook-sweep" in suites:
        rows = {}
        for (s, setting, mode), ap in aps.items():
            if s == "codebook-sweep":
                D = json.loads(setting)["D"]
                rows.setdefault(D, {"D": D})[f"ap_{mode}"] = _r(ap)
        from .wire import bits_per_index, compression_ratio
        H, W, C = cfg["world"]["H"], cfg["world"]["W"], cfg["codespace"]["C_z"]
        for D, row in rows.items():
            row["bits"] = bits_per_index(D)
            row["ratio"] = _r(compression_ratio(H, W, C, D))
        report["curves"]["codebook_size"] = [rows[D] for D in sorted(rows)]

    if "translation-variants" in suites:
        rows = {}
        for (s, setting, mode), ap in aps.items():
            if s == "translation-variants":
                v = json.loads(setting)["variant"]
                rows.setdefault(v, {"variant": v, "alignment_error": None})["ap"] = _r(ap)
        for r in records:
            if r["type"] == "metric" and r["name"] == "alignment_error" and r.get("suite") == "translation-variants":
                rows.setdefault(r["key"], {"variant": r["key"]})["alignment_error"] = _r(r["value"])
        order = ["D2C", "A2C", "C2C", "D2D"]
        report["curves"]["translation_variants"] = [rows[v] for v in order if v in rows]

    if "pose-sweep" in suites:
        rows = {}
        for (s, setting, mode), ap in aps.items():
            if s == "pose-sweep":
                sig = json.loads(setting)["sigma_xy"]
                rows.setdefault(sig, {"sigma_xy": sig})[f"ap_{mode}"] = _r(ap)
        sig0 = min(rows) if rows else None
        for sig, row in rows.items():
            for mode in ("codealign", "late_fusion", "no_collab"):
                k = f"ap_{mode}"
                if k in row and k in rows[sig0]:
                    row[f"drop_{mode}"] = _r(rows[sig0][k] - row[k])
        report["curves"]["pose_noise"] = [rows[s] for s in sorted(rows)]
    return report


def run_experiment(dataset, cfg, suite, seed: int | None = None, workers: int = 1) -> dict:
    """End-to-end: train everything from the manifest, simulate, report. ``suite`` may be a list."""
    if seed is not None:
        cfg = dict(cfg, seed=seed)
    suites = [suite] if isinstance(suite, str) else list(suite)
    cache, records = {}, []
    for s in suites:
        log.info("suite %s", s)
        records += run_suite(dataset, cfg, s, workers, cache)
    return build_report(cfg, records, suites)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in columns})
    return buf.getvalue()


def write_report(report: dict, out_dir) -> list[Path]:
    """report.json, report.csv (mode x metric) and one curves/<name>.csv per sweep."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.csv"]
    paths[0].write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    table = []
    for mode, ap in sorted(report["ap"].items()):
        table.append({"config_hash": report["config_hash"], "seed": report["seed"], "mode": mode,
                      "metric": "cell_ap", "value": ap})
    for key, err in sorted(report["alignment_error"].items()):
        table.append({"config_hash": report["config_hash"], "seed": report["seed"], "mode": key,
                      "metric": "alignment_error", "value": err})
    for link in report["bandwidth"].get("links", []):
        table.append({"config_hash": report["config_hash"], "seed": report["seed"],
                      "mode": f"{link['sender']}->{link['receiver']}:{link['kind']}",
                      "metric": "mean_payload_bytes", "value": link["mean_payload_bytes"]})
    paths[1].write_text(_csv_text(table, ["config_hash", "seed", "mode", "metric", "value"]))
    for name, rows in sorted(report["curves"].items()):
        cols = sorted({c for r in rows for c in r}, key=lambda c: (c not in ("D", "variant", "sigma_xy"), c))
        p = out / "curves" / f"{name}.csv"
        p.write_text(f"# config_hash={report['config_hash']} seed={report['seed']}\n" + _csv_text(rows, cols))
        paths.append(p)
    return paths
