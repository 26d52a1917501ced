"""Command-line front end: gen-data | pretrain | train-codespace | train-translator | simulate | report.

Every command takes the same common flags (``--config``, ``--seed``, ``--out``,
``--set``, ``--force``, ``--json-errors``, ``--workers``); all paths live under
``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .codespace import CodeSpace, DetectionHead
from .collab import Artifacts
from .config import MODES, STAGES, canonical, config_hash, load_config
from .core import CodeAlignError, DataError, MissingArtifactError
from .eval import (SUITES, build_report, needed_pairs, pretrain_all, run_suite, train_d2d_maps, train_spaces,
                   train_translators, ego_modalities, write_report)
from .codespace import space_ap
from .translator import DenseMap, translator_from_dict
from .worldgen import WorldConfig, load_dataset, make_dataset

log = logging.getLogger("codealign")


class StaleArtifactError(MissingArtifactError):
    """An upstream artifact exists but was produced under a different configuration."""


class EmptyInputError(MissingArtifactError):
    pass


# ---------------------------------------------------------------- stage bookkeeping

def _stamp(cfg, stage: str) -> dict:
    return {"stage": stage, "stage_hash": config_hash(cfg, stage), "config_hash": config_hash(cfg),
            "seed": cfg["seed"]}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


STAGE_FILES = {
    "gen-data": "data/stage.json",
    "pretrain": "artifacts/pretrain.json",
    "train-codespace": "artifacts/codespaces.json",
    "train-translator": "artifacts/translators.json",
}


def require(out: Path, stage: str, cfg, force: bool) -> dict:
    """Load ``stage``'s index file, refusing if it is missing or was built from another config."""
    path = out / STAGE_FILES[stage]
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `codealign {stage}` with this config first")
    meta = _read_json(path)
    want = config_hash(cfg, stage)
    if meta.get("stage_hash") != want:
        msg = (f"{path} was produced with config hash {meta.get('stage_hash')}, current config gives {want}; "
               f"rerun `codealign {stage}` or pass --force")
        if not force:
            raise StaleArtifactError(msg)
        log.warning("using stale artifact: %s", msg)
    return meta


def _guard_overwrite(path: Path, cfg, stage: str, force: bool) -> None:
    if path.exists():
        meta = _read_json(path)
        if meta.get("stage_hash") != config_hash(cfg, stage) and not force:
            raise StaleArtifactError(f"{path} holds outputs of a different config (hash {meta.get('stage_hash')}); "
                                     f"pass --force to overwrite")


# ---------------------------------------------------------------- loaders

def load_heads(out: Path) -> dict:
    d = _read_json(out / STAGE_FILES["pretrain"])
    return {m: DetectionHead(m, h["weight"], h["bias"], True) for m, h in d["heads"].items()}


def load_spaces(out: Path) -> dict:
    idx = _read_json(out / STAGE_FILES["train-codespace"])
    spaces = {}
    for owner, fname in idx["files"].items():
        p = out / "artifacts" / fname
        if not p.exists():
            raise MissingArtifactError(f"{p} listed in the code-space index is missing; rerun train-codespace")
        spaces[owner] = CodeSpace.from_dict(_read_json(p)["codespace"])
    return spaces


def load_artifacts(out: Path) -> Artifacts:
    spaces = load_spaces(out)
    idx = _read_json(out / STAGE_FILES["train-translator"])
    translators, d2d = {}, {}
    for fname in idx["translators"]:
        p = out / "artifacts" / fname
        if not p.exists():
            raise MissingArtifactError(f"{p} is missing; rerun train-translator")
        T = translator_from_dict(_read_json(p)["translator"])
        for t in T.targets:
            translators[(T.source, t)] = T
    for fname in idx["d2d"]:
        M = DenseMap.from_dict(_read_json(out / "artifacts" / fname)["translator"])
        d2d[(M.source, M.target)] = M
    return Artifacts(spaces, translators, d2d)


def _dataset(out: Path, cfg, force: bool):
    require(out, "gen-data", cfg, force)
    try:
        return load_dataset(out / "data")
    except DataError as e:
        raise MissingArtifactError(f"{e}; run `codealign gen-data`") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg, out: Path) -> dict:
    data = out / "data"
    _guard_overwrite(data / "stage.json", cfg, "gen-data", args.force)
    if data.exists():
        shutil.rmtree(data)
    ds = make_dataset(WorldConfig.from_dict(cfg["world"]), cfg["seed"], data)
    _write_json(data / "stage.json", _stamp(cfg, "gen-data"))
    return {"scenes": len(ds.manifest.scenes), "path": str(data)}


def cmd_pretrain(args, cfg, out: Path) -> dict:
    ds = _dataset(out, cfg, args.force)
    _guard_overwrite(out / STAGE_FILES["pretrain"], cfg, "pretrain", args.force)
    heads, aps = pretrain_all(ds, cfg)
    doc = _stamp(cfg, "pretrain")
    doc["heads"] = {m: {"weight": h.weight.tolist(), "bias": h.bias} for m, h in heads.items()}
    doc["eval_ap"] = aps
    _write_json(out / STAGE_FILES["pretrain"], doc)
    return {"eval_ap": aps}


def _fname(owner: str) -> str:
    return owner.replace("/", "_")


def cmd_train_codespace(args, cfg, out: Path) -> dict:
    ds = _dataset(out, cfg, args.force)
    require(out, "pretrain", cfg, args.force)
    _guard_overwrite(out / STAGE_FILES["train-codespace"], cfg, "train-codespace", args.force)
    spaces = train_spaces(ds, cfg, load_heads(out))
    stamp = _stamp(cfg, "train-codespace")
    files, aps = {}, {}
    for owner, sp in spaces.items():
        fname = f"codespace_{_fname(owner)}.json"
        _write_json(out / "artifacts" / fname, dict(stamp, codespace=sp.to_dict()))
        files[owner] = fname
        for m in sp.members:
            aps[f"{owner}/{m}"] = space_ap(sp, ds, m)
    _write_json(out / STAGE_FILES["train-codespace"], dict(stamp, files=files, eval_ap=aps))
    return {"eval_ap": aps}


def cmd_train_translator(args, cfg, out: Path) -> dict:
    ds = _dataset(out, cfg, args.force)
    require(out, "train-codespace", cfg, args.force)
    _guard_overwrite(out / STAGE_FILES["train-translator"], cfg, "train-translator", args.force)
    spaces = load_spaces(out)
    pairs = needed_pairs(spaces, ego_modalities(cfg, ds))
    translators, curves = train_translators(ds, cfg, spaces, pairs)
    d2d = train_d2d_maps(ds, cfg, spaces, pairs)
    stamp = _stamp(cfg, "train-translator")
    names, seen = [], set()
    for (s, _), T in sorted(translators.items()):
        if id(T) in seen:
            continue
        seen.add(id(T))
        fname = f"translator_{s}_to_{'_'.join(_fname(t) for t in T.targets)}.json"
        _write_json(out / "artifacts" / fname, dict(stamp, translator=T.to_dict()))
        names.append(fname)
    d2d_names = []
    for (s, o), M in sorted(d2d.items()):
        fname = f"d2d_{s}_to_{_fname(o)}.json"
        _write_json(out / "artifacts" / fname, dict(stamp, translator=M.to_dict()))
        d2d_names.append(fname)
    final = {k: v[-1] if v else None for k, v in curves.items()}
    _write_json(out / STAGE_FILES["train-translator"],
                dict(stamp, translators=names, d2d=d2d_names, curves=curves, final_loss=final))
    return {"translators": names, "final_loss": final}


def _base_cache(out: Path, ds, cfg) -> dict:
    pre = _read_json(out / STAGE_FILES["pretrain"])
    cs = _read_json(out / STAGE_FILES["train-codespace"])
    tr = _read_json(out / STAGE_FILES["train-translator"])
    info = {"pretrain_ap": pre["eval_ap"], "codespace_ap": cs["eval_ap"], "translator_final_loss": tr["final_loss"]}
    return {"base": (load_artifacts(out), load_heads(out), info, tr["curves"])}


def _suites(names) -> list[str]:
    if not names:
        return ["isolation-core"]
    if "all" in names:
        return list(SUITES)
    return list(dict.fromkeys(names))


def cmd_simulate(args, cfg, out: Path) -> dict:
    ds = _dataset(out, cfg, args.force)
    for stage in ("pretrain", "train-codespace", "train-translator"):
        require(out, stage, cfg, args.force)
    cache = _base_cache(out, ds, cfg)
    summary = {}
    for suite in _suites(args.suite):
        records = run_suite(ds, cfg, suite, args.workers, cache)
        n = write_frame_log(out / "logs" / suite, records, cfg)
        summary[suite] = n
    return {"frames": summary}


def write_frame_log(folder: Path, records, cfg) -> int:
    """frames.jsonl with one JSON record per frame; score/truth arrays go to arrays.npz by key."""
    if folder.exists():
        shutil.rmtree(folder)
    folder.mkdir(parents=True)
    stamp = _stamp(cfg, "simulate")
    arrays = {"config_hash": np.array(stamp["config_hash"]), "seed": np.array(cfg["seed"])}
    n = 0
    with open(folder / "frames.jsonl", "w") as fh:
        for i, r in enumerate(records):
            rec = {k: v for k, v in r.items() if k not in ("scores", "truth")}
            if r["type"] == "frame":
                key = f"f{i:06d}"
                arrays[key + "_scores"] = r["scores"]
                arrays[key + "_truth"] = r["truth"]
                rec["arrays"] = {"file": "arrays.npz", "scores": key + "_scores", "truth": key + "_truth"}
                rec["seeds"] = {"seed": cfg["seed"], "noise_key": r["scene"]}
                n += 1
            rec.update(config_hash=stamp["config_hash"], stage_hash=stamp["stage_hash"])
            fh.write(canonical(rec) + "\n")
    np.savez_compressed(folder / "arrays.npz", **arrays)
    _write_json(folder / "stage.json", stamp)
    return n


def read_frame_logs(logs: Path, cfg, force: bool) -> list[dict]:
    folders = sorted(p.parent for p in logs.glob("*/frames.jsonl")) if logs.exists() else []
    if not folders:
        raise EmptyInputError(f"empty input: no frame logs under {logs}; run `codealign simulate` first")
    want = config_hash(cfg, "simulate")
    records = []
    for folder in folders:
        meta = _read_json(folder / "stage.json")
        if meta.get("stage_hash") != want:
            msg = f"frame log {folder} comes from config hash {meta.get('stage_hash')}, expected {want}"
            if not force:
                raise StaleArtifactError(msg + "; rerun simulate or pass --force")
            log.warning("%s", msg)
        with np.load(folder / "arrays.npz") as npz:
            arrays = {k: npz[k] for k in npz.files}
        for line in (folder / "frames.jsonl").read_text().splitlines():
            r = json.loads(line)
            if r["type"] == "frame":
                ref = r.pop("arrays")
                r["scores"] = arrays[ref["scores"]]
                r["truth"] = arrays[ref["truth"]]
            records.append(r)
    return records


def cmd_report(args, cfg, out: Path) -> dict:
    records = read_frame_logs(out / "logs", cfg, args.force)
    report = build_report(cfg, records)
    paths = write_report(report, out)
    return {"ap": report["ap"], "files": [str(p) for p in paths]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-codespace": cmd_train_codespace,
    "train-translator": cmd_train_translator,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (defaults are used for absent keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="run", help="output root (default: ./run)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. codespace.D=32 (value parsed as JSON when possible)")
    common.add_argument("--force", action="store_true", help="proceed despite stale upstream artifacts")
    common.add_argument("--json-errors", action="store_true", help="print errors as one JSON object on stderr")
    common.add_argument("--workers", type=int, default=1, help="parallel frame workers (simulate)")
    common.add_argument("--mode", action="append", choices=MODES,
                        help="restrict isolation-core to these modes (shorthand for --set simulate.modes=...)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")

    p = argparse.ArgumentParser(prog="codealign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "simulate":
            sp.add_argument("--suite", action="append", choices=SUITES + ("all",),
                            help="suite to run (repeatable; default isolation-core)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.overrides)
        if getattr(args, "mode", None):
            overrides.append("simulate.modes=" + json.dumps(list(dict.fromkeys(args.mode))))
        if args.workers < 1:
            from .core import ConfigError
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", dict(config=cfg, config_hash=config_hash(cfg), seed=cfg["seed"],
                                              stage_hashes={s: config_hash(cfg, s) for s in STAGES}))
        result = COMMANDS[args.command](args, cfg, out)
        print(json.dumps({"command": args.command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
                          **result}, sort_keys=True, default=str))
        return 0
    except CodeAlignError as e:
        if args.json_errors:
            print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": e.exit_code}),
                  file=sys.stderr)
        else:
            print(f"codealign {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
