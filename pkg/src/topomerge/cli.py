"""Command-line frontend: generate, build-submaps, merge, eval, plan, export.

A run directory produced by ``generate`` holds the resolved configuration
(``run.ini``) and ground truth. Later commands rebuild the synthetic world
and its oracles from that configuration, so every step is reproducible from
the directory alone.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import topomap
from .errors import ConfigError, NoVerifiedAnchor, TopomergeError
from .evalkit import ate_rmse
from .mergectl import CullingConfig, MergeConfig, merge_submap, write_stage_csv
from .metricloc import IrlsConfig
from .planner import localize_goal, shortest_path
from .posegraph import RobustKernelConfig
from .seqmatch import GvConfig, SeqMatchConfig
from .synthworld import (
    OracleConfig,
    OracleProvider,
    SessionSpec,
    WorldSpec,
    generate_world,
    oracle_keypoint_matches,
    read_ground_truth,
    write_ground_truth,
)

DEMO_CONFIG = """\
[world]
lengths = 120 120 120
epochs = 0 0 1
overlaps = 0-1:0.4 1-2:0.4

[oracle]
grid = 16 12

[merge]
max_metric_pairs = 24
"""

RUN_FILE = "run.ini"
GT_FILE = "ground_truth.txt"
SECTIONS = {
    "oracle": OracleConfig,
    "seqmatch": SeqMatchConfig,
    "gv": GvConfig,
    "irls": IrlsConfig,
    "pgo": RobustKernelConfig,
    "culling": CullingConfig,
    "merge": MergeConfig,
}
WORLD_LISTS = {"lengths", "epochs", "days", "lateral_offsets", "overlaps"}


class CliError(Exception):
    pass


# -- configuration -----------------------------------------------------------------------

def _line_of(text, section, key):
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", line):
            return n
    return 0


def _convert(raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int) or (default is None and re.fullmatch(r"-?\d+", raw.strip())):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = raw.replace(",", " ").split()
        kinds = [type(x) for x in default] or [float]
        return tuple((int if kinds[min(k, len(kinds) - 1)] is int else float)(v) for k, v in enumerate(items))
    if isinstance(default, str):
        return raw.strip()
    if default is None:
        return float(raw)
    raise ValueError(f"unsupported option type {type(default).__name__}")


def _scalar_fields(cls):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)
            if not dataclasses.is_dataclass(getattr(inst, f.name))}


def read_config(path):
    """Parse an INI-style run configuration into typed config objects.

    Returns a dict with ``world_spec`` (WorldSpec), ``seed`` and one config
    instance per section. Any problem raises ConfigError with file and line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(path, 0, exc.strerror or str(exc)) from exc
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(path, lineno, f"cannot parse {line.strip()!r}") from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(path, exc.lineno or 0, exc.message.split(": ", 1)[-1]) from exc
    except configparser.Error as exc:
        raise ConfigError(path, getattr(exc, "lineno", 0) or 0, exc.message) from exc

    known = set(SECTIONS) | {"world", "run"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(path, _line_of_section(text, sec), f"unknown section [{sec}]")

    def fail(sec, key, msg):
        raise ConfigError(path, _line_of(text, sec, key), msg)

    out = {"seed": 0}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key != "seed":
                fail("run", key, f"unknown option {key!r} in [run]")
            try:
                out["seed"] = int(raw)
            except ValueError:
                fail("run", key, f"bad integer {raw!r}")

    for sec, cls in SECTIONS.items():
        fields = _scalar_fields(cls)
        values = {}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in fields:
                    fail(sec, key, f"unknown option {key!r} in [{sec}]")
                try:
                    values[key] = _convert(raw, fields[key])
                except ValueError as exc:
                    fail(sec, key, str(exc))
        try:
            out[sec] = values
            if sec == "pgo":
                out[sec] = dataclasses.replace(MergeConfig().kernel, **values)
            elif sec != "merge":
                out[sec] = cls(**values)
        except (ValueError, TypeError) as exc:
            key = next(iter(values), "")
            fail(sec, key, str(exc))
    merge_values = out.pop("merge")
    try:
        out["merge"] = MergeConfig(
            seqmatch=out["seqmatch"], gv=out["gv"], irls=out["irls"], culling=out["culling"],
            kernel=out["pgo"], **merge_values)
    except (ValueError, TypeError) as exc:
        fail("merge", next(iter(merge_values), ""), str(exc))
    out["world_spec"] = _world_spec(cp, path, text)
    return out


def _line_of_section(text, sec):
    for n, raw in enumerate(text.splitlines(), 1):
        if raw.strip() == f"[{sec}]":
            return n
    return 0


def _world_spec(cp, path, text):
    if not cp.has_section("world"):
        raise ConfigError(path, 0, "missing [world] section")
    scalars = {f.name: f.default for f in dataclasses.fields(WorldSpec)
               if f.default is not dataclasses.MISSING}
    opts = dict(cp.items("world"))
    for key in opts:
        if key not in scalars and key not in WORLD_LISTS:
            raise ConfigError(path, _line_of(text, "world", key), f"unknown option {key!r} in [world]")
    if "lengths" not in opts:
        raise ConfigError(path, _line_of_section(text, "world"), "[world] needs 'lengths'")
    try:
        lengths = [float(v) for v in opts["lengths"].split()]
        n = len(lengths)
        epochs = [int(v) for v in opts.get("epochs", " ".join(["0"] * n)).split()]
        days = [None if v == "-" else float(v) for v in opts.get("days", " ".join(["-"] * n)).split()]
        lat = [None if v == "-" else float(v) for v in opts.get("lateral_offsets", " ".join(["-"] * n)).split()]
        if not len(epochs) == len(days) == len(lat) == n:
            raise ValueError("per-session lists must match 'lengths'")
        overlaps = []
        for item in opts.get("overlaps", "").split():
            pair, frac = item.split(":")
            a, b = pair.split("-")
            overlaps.append((int(a), int(b), float(frac)))
        kw = {k: _convert(v, scalars[k]) for k, v in opts.items() if k in scalars and k != "overlaps"}
        sessions = [SessionSpec(L, e, d, o) for L, e, d, o in zip(lengths, epochs, days, lat)]
        return WorldSpec(sessions, overlaps, **kw)
    except (ValueError, TypeError) as exc:
        bad = next((k for k in opts if k in WORLD_LISTS), "lengths")
        raise ConfigError(path, _line_of(text, "world", bad), str(exc)) from exc


def write_resolved(path, cfg):
    """Echo every option, defaults included, for provenance."""
    spec = cfg["world_spec"]
    lines = ["[run]", f"seed = {cfg['seed']}", "", "[world]"]
    lines.append("lengths = " + " ".join(repr(s.length_m) for s in spec.sessions))
    lines.append("epochs = " + " ".join(str(s.epoch) for s in spec.sessions))
    lines.append("days = " + " ".join("-" if s.day is None else repr(s.day) for s in spec.sessions))
    lines.append("lateral_offsets = " + " ".join("-" if s.lateral_offset is None else repr(s.lateral_offset)
                                                 for s in spec.sessions))
    lines.append("overlaps = " + " ".join(f"{a}-{b}:{f!r}" for a, b, f in spec.overlaps))
    for f in dataclasses.fields(WorldSpec):
        if f.name not in ("sessions", "overlaps"):
            lines.append(f"{f.name} = {_fmt(getattr(spec, f.name))}")
    for sec in SECTIONS:
        obj = cfg["merge"].kernel if sec == "pgo" else cfg["merge"] if sec == "merge" else cfg[sec]
        lines += ["", f"[{sec}]"]
        for name, value in _scalar_fields(type(obj)).items():
            v = getattr(obj, name)
            if isinstance(v, (int, float, bool, tuple, str)) and not dataclasses.is_dataclass(v):
                lines.append(f"{name} = {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _load_run(run_dir):
    run = Path(run_dir) / RUN_FILE
    if not run.exists():
        raise CliError(f"{run_dir}: no {RUN_FILE}; run 'generate' first")
    cfg = read_config(run)
    world = generate_world(cfg["world_spec"], cfg["seed"])
    return cfg, world, OracleProvider(world, cfg["oracle"])


def thread_cap():
    """Worker cap from TOPOMERGE_THREADS (validated; work runs on one thread)."""
    raw = os.environ.get("TOPOMERGE_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"TOPOMERGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"TOPOMERGE_THREADS must be a positive integer, got {raw!r}")
    return n


# -- commands -----------------------------------------------------------------------------

def cmd_generate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        cfg = read_config(args.config)
    else:
        demo = out / "demo.ini"
        demo.write_text(DEMO_CONFIG, encoding="utf-8")
        cfg = read_config(demo)
    if args.seed is not None:
        cfg["seed"] = args.seed
    world = generate_world(cfg["world_spec"], cfg["seed"])
    write_resolved(out / RUN_FILE, cfg)
    write_ground_truth(world, out / GT_FILE)
    print(f"generated {len(world.session_ids())} sessions in {out}")


def cmd_build_submaps(args):
    cfg, world, prov = _load_run(args.world)
    out = Path(args.out or args.world) / "submaps"
    out.mkdir(parents=True, exist_ok=True)
    for s in world.session_ids():
        sub = prov.submap(s)
        topomap.save_map(sub, out / f"submap_{s:03d}.map")
        print(f"session {s}: {len(sub)} keyframes")


def _submap_files(path):
    p = Path(path)
    files = sorted(p.glob("submap_*.map")) if p.is_dir() else [p]
    if not files:
        raise CliError(f"{path}: no submap files")
    return files


def cmd_merge(args):
    thread_cap()
    cfg, world, prov = _load_run(args.world)
    files = _submap_files(args.submaps or Path(args.world) / "submaps")
    order = list(range(len(files)))
    if args.shuffle:
        order = [int(k) for k in np.random.default_rng(args.order_seed).permutation(len(files))]
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    gt = read_ground_truth(Path(args.world) / GT_FILE) if (Path(args.world) / GT_FILE).exists() else None
    m = topomap.TopometricMap(descriptor_dim=cfg["oracle"].descriptor_dim)
    reports = []
    for step, k in enumerate(order):
        sub = topomap.load_map(files[k])
        m, rep = merge_submap(m, sub, prov, cfg["merge"], gt)
        reports.append(rep)
        (out / "reports" / f"merge_{step:03d}.txt").write_text(rep.to_text(), encoding="utf-8")
        ate = "-" if rep.ate_if_gt_available is None else f"{rep.ate_if_gt_available:.3f}"
        print(f"merge {step}: {files[k].name} sm={rep.pairs_sm} gv={rep.pairs_gv} ccm={rep.pairs_ccm} "
              f"culled={len(rep.culled_nodes)} components={rep.component_count_after} ate={ate}")
    write_stage_csv(out / "stages.csv", reports)
    (out / "order.txt").write_text(" ".join(files[k].name for k in order) + "\n", encoding="utf-8")
    write_resolved(out / RUN_FILE, cfg)
    topomap.save_map(m, out / "merged.map")


def cmd_eval(args):
    m = topomap.load_map(args.map)
    gt = read_ground_truth(args.ground_truth)
    comps = m.components()
    main = m.main_component()
    est = {n: m.nodes[n].pose_world for n, c in comps.items() if c == main}
    t_err, r_err = ate_rmse(est, gt)
    rows = [("nodes", len(m)), ("components", m.component_count()), ("main_component_nodes", len(est)),
            ("ate_translation_m", t_err), ("ate_rotation_deg", r_err)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    for k, v in rows:
        print(f"{k} {v}")


def _read_descriptor(path):
    try:
        vals = np.array(Path(path).read_text(encoding="utf-8").split(), dtype=float)
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: cannot read descriptor ({exc})") from exc
    if vals.size == 0:
        raise CliError(f"{path}: empty descriptor")
    return vals


def path_geojson(m, path, reachable, cost):
    coords = [[float(m.nodes[n].pose_world.t[0]), float(m.nodes[n].pose_world.t[1])] for n in path]
    geom = {"type": "LineString", "coordinates": coords} if len(coords) > 1 else \
        {"type": "Point", "coordinates": coords[0] if coords else []}
    return {"type": "FeatureCollection", "features": [{
        "type": "Feature", "geometry": geom,
        "properties": {"nodes": list(path), "reachable": reachable, "cost": cost if reachable else None}}]}


def cmd_plan(args):
    m = topomap.load_map(args.map)
    if args.start not in m.nodes:
        raise CliError(f"start node {args.start} not in map")
    desc = _read_descriptor(args.goal_descriptor)
    if desc.shape[0] != m.descriptor_dim:
        raise CliError(f"goal descriptor has {desc.shape[0]} values, map expects {m.descriptor_dim}")
    if args.goal_frame is not None:
        if not args.world:
            raise CliError("--goal-frame needs --world for geometric verification")
        cfg, world, prov = _load_run(args.world)

        def gv(nid):
            a, b, _ = oracle_keypoint_matches(world, args.goal_frame, nid, prov.cfg)
            return a, b

        goal = localize_goal(desc, m, gv)
    else:
        # retrieval only: no images to verify against
        ids = m.node_ids()
        goal = ids[int(np.argmax([m.nodes[n].descriptor @ desc for n in ids]))]
    res = shortest_path(m, args.start, goal)
    print(f"PATH reachable={'true' if res.reachable else 'false'} goal={goal} "
          f"cost={res.cost if res.reachable else 'inf'} nodes={' '.join(map(str, res.path))}")
    gj = path_geojson(m, res.path, res.reachable, res.cost)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        topomap.write_geojson(gj, Path(args.out) / "path.geojson")
    print(json.dumps(gj, sort_keys=True))


def cmd_export(args):
    m = topomap.load_map(args.map)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "map.dot").write_text(topomap.to_dot(m), encoding="utf-8")
    topomap.write_geojson(topomap.to_geojson(m), out / "map.geojson")
    print(f"exported {len(m)} nodes to {out}")


# -- entry point ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser():
    p = _Parser(prog="topomerge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic world and ground truth")
    g.add_argument("--config", help="run configuration (INI); bundled demo when omitted")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-submaps", help="build one submap per session")
    b.add_argument("--world", required=True, help="run directory from 'generate'")
    b.add_argument("--out", help="defaults to the run directory")
    b.set_defaults(func=cmd_build_submaps)

    m = sub.add_parser("merge", help="merge submaps incrementally")
    m.add_argument("--world", required=True)
    m.add_argument("--submaps", help="directory of submap_*.map files")
    m.add_argument("--out", required=True)
    m.add_argument("--shuffle", action="store_true")
    m.add_argument("--order-seed", type=int, default=0)
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="ATE of the main component")
    e.add_argument("--map", required=True)
    e.add_argument("--ground-truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="ground a goal descriptor and plan a path")
    pl.add_argument("--map", required=True)
    pl.add_argument("--goal-descriptor", required=True)
    pl.add_argument("--start", type=int, required=True)
    pl.add_argument("--goal-frame", type=int, help="world frame of the goal image, enables verification")
    pl.add_argument("--world")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plan)

    x = sub.add_parser("export", help="DOT and GeoJSON exports")
    x.add_argument("--map", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (CliError, TopomergeError, NoVerifiedAnchor, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
