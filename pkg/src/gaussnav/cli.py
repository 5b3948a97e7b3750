"""``gaussnav`` command-line interface.

Exit codes: 0 success, 1 input error (bad flag, missing or malformed file),
2 internal invariant violation.  Every command writes a run manifest next to
its outputs; manifests hold wall-clock time and are the only outputs that
differ between identical runs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import raster_io
from .config import RunConfig
from .gaussians import GaussianMap, load_map, save_map
from .geometry import CameraIntrinsics, Pose
from .metrics import MetricsConfig, MetricsError, evaluate_trajectories
from .navigation.agent import MapPolicy, MemoryError_, OraclePolicy, RandomPolicy, run_episode, save_trajectories
from .navigation.agent import load_trajectories
from .navigation.episodes import EpisodeConfig, load_episodes, make_episodes, save_episodes
from .navigation.mapping import SceneMaps, observe
from .navigation.policy import Scorer
from .navigation.scene import SceneConfig, generate_scene, load_scene, save_scene
from .navigation.training import TrainConfig, train_scorer
from .optimizer.fit import FitConfig, fit_map
from .optimizer.gradients import Frame
from .optimizer.losses import LossWeights
from .gaussians import InitConfig, init_from_pointcloud
from .geometry import PointCloud, backproject_frame
from .ply import write_ply
from .rasterizer import render
from .semantics import FileProvider, SyntheticProvider

log = logging.getLogger("gaussnav")


class InputError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


# ----------------------------------------------------------------------------- helpers

def blob_hash(data: bytes) -> str:
    """Content hash in the style of a git blob id."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_paths(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = blob_hash(p.read_bytes())
    return dict(sorted(out.items()))


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True))
    tmp.replace(path)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{p}: malformed JSON ({e.msg} at line {e.lineno})") from None


def _require(path, what: str = "file") -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        d = _read_json(args.config)
        return RunConfig.from_dict(d.get("config", d))
    return RunConfig()


def _with_common(cfg: RunConfig, args) -> RunConfig:
    """Apply the shared rendering / observation flags."""
    import dataclasses as dc
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        cfg = cfg.replace(render=dc.replace(cfg.render, workers=args.threads))
    obs = {}
    for flag, key in (("views", "views"), ("fov", "fov_deg"), ("resolution", "resolution")):
        v = getattr(args, flag, None)
        if v is not None:
            obs[key] = v
    if obs:
        cfg = cfg.replace(observe=dc.replace(cfg.observe, **obs))
    if getattr(args, "fit_iters", None) is not None:
        cfg = cfg.replace(build=dc.replace(cfg.build, fit=dc.replace(cfg.build.fit, iterations=args.fit_iters)))
    return cfg


def _manifest(path: Path, command: str, cfg: RunConfig, seed, inputs, outputs, t0: float) -> None:
    doc = {"command": command, "config": cfg.to_dict(), "seed": seed,
           "inputs": _hash_paths(inputs), "outputs": _hash_paths(outputs),
           "wall_clock_seconds": time.perf_counter() - t0}
    _write_json(path, doc)


def _provider_for(scene):
    return SyntheticProvider(max(len(scene.instances), 1))


# ----------------------------------------------------------------------------- commands

def cmd_gen_scene(args) -> int:
    import dataclasses as dc
    t0 = time.perf_counter()
    cfg = _base_config(args)
    try:
        rows, cols = (int(x) for x in args.rooms.lower().split("x"))
    except ValueError:
        raise InputError(f"--rooms expects RxC, e.g. 2x2, got {args.rooms!r}") from None
    sc = dict(rows=rows, cols=cols)
    if args.instances is not None:
        sc["instances_per_room"] = args.instances
    if args.gaussians_per_instance is not None:
        sc["gaussians_per_instance"] = args.gaussians_per_instance
    cfg = cfg.replace(scene=dc.replace(cfg.scene, **sc))
    if args.episodes is not None:
        cfg = cfg.replace(episodes=dc.replace(cfg.episodes, count=args.episodes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(args.seed, cfg.scene)
    scene_path = out / f"scene_{args.seed}.json"
    save_scene(scene, scene_path)
    eps = make_episodes(scene, args.seed, cfg.episodes, scene_path.name) if scene.instances else []
    ep_path = out / f"episodes_{args.seed}.json"
    save_episodes(eps, ep_path)
    outputs = [scene_path, scene_path.with_suffix(".g3dm"), ep_path]
    _manifest(out / f"gen-scene_{args.seed}.manifest.json", "gen-scene", cfg, args.seed, [], outputs, t0)
    print(f"wrote {scene_path} ({len(scene.gmap)} Gaussians, {len(scene.graph)} nodes) and {len(eps)} episodes")
    return 0


def cmd_observe(args) -> int:
    t0 = time.perf_counter()
    cfg = _with_common(_base_config(args), args)
    scene = load_scene(_require(args.scene, "scene"))
    if not 0 <= args.node < len(scene.graph):
        raise InputError(f"--node {args.node} is not in the graph (0..{len(scene.graph) - 1})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obs = observe(scene, args.node, cfg.observe, cfg.render)
    prov = _provider_for(scene)
    frames, outputs = [], []
    for ob in obs:
        ann = prov.annotate(ob.rgb, ob.view, ob.instance_ids)
        stem = f"view_{ob.view}"
        raster_io.write_rgb(out / f"{stem}.png", ob.rgb)
        raster_io.write_depth(out / f"{stem}.depth", ob.depth)
        raster_io.write_sem(out / f"{stem}.sem", np.where(ann.labeled, ann.target, np.nan))
        frames.append({"view": ob.view, "intrinsics": ob.intr.to_dict(), "pose": ob.pose.to_dict(),
                       "rgb": f"{stem}.png", "depth": f"{stem}.depth", "sem": f"{stem}.sem"})
        outputs += [out / f"{stem}.{ext}" for ext in ("png", "depth", "sem")]
    _write_json(out / "frames.json", {"node": args.node, "frames": frames})
    outputs.append(out / "frames.json")
    _manifest(out / "observe.manifest.json", "observe", cfg, None, [args.scene], outputs, t0)
    print(f"wrote {len(frames)} views to {out}")
    return 0


def _load_frames(frames_dir: Path, annotations=None):
    doc = _read_json(_require(frames_dir, "frames directory") / "frames.json")
    provider = FileProvider(annotations) if annotations else None
    frames, clouds, inputs = [], [], [frames_dir / "frames.json"]
    for f in doc.get("frames", []):
        intr = CameraIntrinsics.from_dict(f["intrinsics"])
        pose = Pose.from_dict(f["pose"])
        rgb = raster_io.read_rgb(_require(frames_dir / f["rgb"]))
        depth = raster_io.read_depth(_require(frames_dir / f["depth"])).astype(np.float64)
        inputs += [frames_dir / f["rgb"], frames_dir / f["depth"]]
        labels = None
        if provider is not None:
            ann = provider.annotate(rgb, int(f.get("view", 0)))
            sem, mask, labels = ann.target, ann.labeled, ann.region_ids
        elif f.get("sem"):
            raw = raster_io.read_sem(_require(frames_dir / f["sem"])).astype(np.float64)
            inputs.append(frames_dir / f["sem"])
            mask = np.isfinite(raw)
            sem = np.where(mask, raw, 0.0)
            # each distinct code acts as one region label
            _, inv = np.unique(sem, return_inverse=True)
            labels = np.where(mask, inv.reshape(sem.shape) + 1, 0)
        else:
            sem = mask = None
        frames.append(Frame(intr, pose, rgb, depth, sem, mask))
        clouds.append(backproject_frame(intr, pose, depth, rgb, labels))
    if not frames:
        raise InputError(f"{frames_dir}/frames.json lists no frames")
    return frames, PointCloud.concat(clouds), inputs


def cmd_fit(args) -> int:
    import dataclasses as dc
    t0 = time.perf_counter()
    cfg = _with_common(_base_config(args), args)
    fit = cfg.build.fit
    if args.iters is not None:
        fit = dc.replace(fit, iterations=args.iters)
    w = cfg.build.weights
    wk = {k: v for k, v in (("lambda_ssim", args.lambda_ssim), ("w_depth", args.w_depth), ("w_sem", args.w_sem))
          if v is not None}
    w = dc.replace(w, **wk) if wk else w
    init = cfg.build.init
    if args.seed is not None:
        init = dc.replace(init, seed=args.seed)
    voxel = args.voxel if args.voxel is not None else cfg.build.voxel_size
    cfg = cfg.replace(build=dc.replace(cfg.build, fit=fit, weights=w, init=init, voxel_size=voxel))
    frames, pc, inputs = _load_frames(Path(args.frames), args.annotations)
    if voxel is None:
        from .navigation.mapping import voxel_for
        voxel = voxel_for(frames[0].intr.width)
    gmap = init_from_pointcloud(pc, InitConfig(**{**init.__dict__, "voxel_size": voxel}))
    fitted, report = fit_map(gmap, frames, fit, w, cfg.render)
    if len(report.records) != fit.iterations:
        raise InvariantViolation("fit report does not hold one record per iteration")
    out = Path(args.out)
    save_map(fitted, out)
    rep_path = out.with_name(out.name + ".report.json")
    _write_json(rep_path, report.to_dict())
    _manifest(out.with_name(out.name + ".manifest.json"), "fit", cfg, init.seed,
              inputs + ([args.annotations] if args.annotations else []), [out, rep_path], t0)
    print(f"fitted {len(fitted)} Gaussians: PSNR {report.initial.psnr:.2f} -> {report.final_psnr:.2f} dB")
    return 0


def cmd_render(args) -> int:
    t0 = time.perf_counter()
    cfg = _with_common(_base_config(args), args)
    gmap = load_map(_require(args.map, "map"))
    pose = Pose.from_dict(_read_json(args.pose))
    intr = CameraIntrinsics.from_dict(_read_json(args.intrinsics))
    fr = render(gmap, intr, pose, cfg.render)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outs = [Path(f"{prefix}.png"), Path(f"{prefix}.depth"), Path(f"{prefix}.sem")]
    raster_io.write_rgb(outs[0], fr.rgb)
    raster_io.write_depth(outs[1], fr.depth)
    raster_io.write_sem(outs[2], fr.semantic)
    _manifest(Path(f"{prefix}.manifest.json"), "render", cfg, None, [args.map, args.pose, args.intrinsics], outs, t0)
    print(f"rendered {len(gmap)} Gaussians to {prefix}.*")
    return 0


def _policy_for(name: str, seed: int, cfg: RunConfig, scene):
    if name == "random":
        return RandomPolicy(seed)
    if name == "oracle":
        return OraclePolicy()
    if name == "untrained":
        return MapPolicy(Scorer.init(seed, cfg.policy.hidden), cfg.policy, scene.codes)
    return MapPolicy(Scorer.load(_require(name, "scorer")), cfg.policy, scene.codes)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cfg = _with_common(_base_config(args), args)
    scene = load_scene(_require(args.scene, "scene"))
    eps = load_episodes(_require(args.episodes, "episodes"))
    seed = 0 if args.seed is None else args.seed
    policy = _policy_for(args.scorer, seed, cfg, scene)
    maps = SceneMaps(scene, _provider_for(scene), cfg.observe, cfg.build, cfg.render)
    trajs = []
    for ep in eps:
        if ep.goal >= len(scene.graph) or ep.start >= len(scene.graph):
            raise InputError(f"episode {ep.id} refers to nodes outside the scene graph")
        trajs.append(run_episode(scene, ep, policy, maps, cfg.policy))
    g = scene.graph
    for t in trajs:
        for a, b in zip(t.nodes[:-1], t.nodes[1:]):
            if not g.has_edge(a, b):
                raise InvariantViolation(f"trajectory {t.episode_id} left the graph at {a} -> {b}")
    out = Path(args.out)
    save_trajectories(trajs, out)
    inputs = [args.scene, Path(args.scene).with_suffix(".g3dm"), args.episodes]
    if args.scorer not in ("random", "oracle", "untrained"):
        inputs.append(args.scorer)
    _manifest(out.with_name(out.name + ".manifest.json"), "simulate", cfg, seed, inputs, [out], t0)
    print(f"simulated {len(trajs)} episodes with the {policy.name} policy")
    return 0


def cmd_train(args) -> int:
    import dataclasses as dc
    t0 = time.perf_counter()
    cfg = _with_common(_base_config(args), args)
    tk = {}
    if args.steps is not None:
        tk["steps"] = args.steps
    if args.seed is not None:
        tk["seed"] = args.seed
    cfg = cfg.replace(train=dc.replace(cfg.train, **tk))
    scenes_dir = _require(args.scenes, "scenes directory")
    ep_dir = _require(args.episodes, "episodes directory")
    ep_files = sorted(Path(ep_dir).glob("episodes_*.json"))
    datasets, inputs = [], []
    for ef in ep_files:
        eps = load_episodes(ef)
        if not eps:
            continue
        scene_file = Path(scenes_dir) / Path(eps[0].scene_path).name
        scene = load_scene(_require(scene_file, "scene"))
        datasets.append((SceneMaps(scene, _provider_for(scene), cfg.observe, cfg.build, cfg.render), eps))
        inputs += [ef, scene_file, scene_file.with_suffix(".g3dm")]
    if not datasets:
        raise InputError(f"no episodes_*.json with episodes found in {ep_dir}")
    scorer = train_scorer(datasets, cfg.train, cfg.policy)
    out = Path(args.out)
    scorer.save(out)
    _manifest(out.with_name(out.name + ".manifest.json"), "train", cfg, cfg.train.seed, inputs, [out], t0)
    last = scorer.curve[-1]
    print(f"trained scorer: loss {last['total']:.4f}, next-hop agreement {last['agreement']:.3f}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg = _base_config(args)
    if args.dth is not None or args.distance is not None:
        cfg = cfg.replace(metrics=MetricsConfig(args.dth if args.dth is not None else cfg.metrics.d_th,
                                                args.distance or cfg.metrics.distance))
    trajs = load_trajectories(_require(args.trajectories, "trajectories"))
    ep_path = _require(args.episodes, "episodes")
    eps = load_episodes(ep_path)
    if not eps:
        raise InputError(f"{ep_path} has no episodes")
    scene_file = ep_path.parent / eps[0].scene_path
    scene = load_scene(_require(scene_file, "scene"))
    try:
        report = evaluate_trajectories(trajs, eps, scene.graph, cfg.metrics)
    except MetricsError as e:
        if "violated" in str(e) or "outside" in str(e):
            raise InvariantViolation(str(e)) from None
        raise InputError(str(e)) from None
    out = Path(args.out)
    _write_json(out, _finite(report.to_dict()))
    table = out.with_suffix(".txt")
    tmp = table.with_name(table.name + ".tmp")
    tmp.write_text(report.to_table() + "\n")
    tmp.replace(table)
    _manifest(out.with_name(out.name + ".manifest.json"), "eval", cfg, None,
              [args.trajectories, args.episodes, scene_file], [out, table], t0)
    print(report.to_table())
    return 0


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def cmd_export_ply(args) -> int:
    t0 = time.perf_counter()
    gmap: GaussianMap = load_map(_require(args.map, "map"))
    out = Path(args.out)
    write_ply(gmap, out)
    _manifest(out.with_name(out.name + ".manifest.json"), "export-ply", RunConfig(), None, [args.map], [out], t0)
    print(f"exported {len(gmap)} Gaussians to {out}")
    return 0


# ----------------------------------------------------------------------------- parser

def _common(p, observe=True):
    p.add_argument("--config", help="JSON run config (or a run manifest) to start from")
    p.add_argument("--threads", type=int, help="render worker count (output does not depend on it)")
    if observe:
        p.add_argument("--views", type=int, help="views per panorama (default 4)")
        p.add_argument("--fov", type=float, help="horizontal field of view in degrees (default 90)")
        p.add_argument("--resolution", type=int, help="square image size in pixels (default 224)")
        p.add_argument("--fit-iters", type=int, help="local map fitting iterations (default 15)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gaussnav", description="Gaussian-map navigation toolkit", allow_abbrev=False)
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene and its episodes", allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rooms", default="2x2", help="room grid RxC")
    p.add_argument("--instances", type=int, help="instances per room (default 1)")
    p.add_argument("--gaussians-per-instance", type=int)
    p.add_argument("--episodes", type=int, help="episodes to generate (default 10)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("observe", help="render a node's panorama to a frames directory", allow_abbrev=False)
    p.add_argument("--scene", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_observe)

    p = sub.add_parser("fit", help="fit a Gaussian map to a frames directory", allow_abbrev=False)
    p.add_argument("--frames", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--w-depth", type=float)
    p.add_argument("--w-sem", type=float)
    p.add_argument("--voxel", type=float, help="voxel size for point downsampling (m)")
    p.add_argument("--seed", type=int)
    p.add_argument("--annotations", help="region annotation JSON used instead of the .sem rasters")
    p.add_argument("--out", required=True, help="output map (.g3dm)")
    _common(p, observe=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a map from a camera", allow_abbrev=False)
    p.add_argument("--map", required=True)
    p.add_argument("--pose", required=True, help="JSON {rotation, translation}, world-from-camera")
    p.add_argument("--intrinsics", required=True, help="JSON {fx, fy, cu, cv, width, height}")
    p.add_argument("--out", required=True, help="output prefix")
    _common(p, observe=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("simulate", help="run episodes with a policy", allow_abbrev=False)
    p.add_argument("--scene", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--scorer", required=True, help="scorer file, or random | oracle | untrained")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the scorer by imitation", allow_abbrev=False)
    p.add_argument("--scenes", required=True, help="directory with scene_*.json")
    p.add_argument("--episodes", required=True, help="directory with episodes_*.json")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score trajectories", allow_abbrev=False)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--dth", type=float, help="success radius in meters (default 3.0)")
    p.add_argument("--distance", choices=("geodesic", "euclidean"))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="export a map as PLY", allow_abbrev=False)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (InvariantViolation, AssertionError, MemoryError_) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError, OSError) as e:
        # format and config errors raised by the library are ValueError subclasses
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
