"""Command-line entry point: ``gauss-avatar <subcommand> [options]``.

Every run resolves its configuration (flags over ``--config`` JSON over
defaults), executes one pipeline and writes a reproducibility manifest, also
when the run fails. Exit codes: 0 ok, 2 usage, 3 I/O or format, 4 numeric or
validation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .body_model import PoseParams, SkinnedBody, load_body, load_poses, pose_body, write_obj, write_skin
from .camera import Camera
from .errors import FormatError, ValidationError
from .formats import (
    read_gaussians,
    read_image,
    read_param_map,
    read_uvmap,
    read_weights,
    structured_to_bytes,
    write_gaussians,
    write_png,
    write_uvmap,
    write_weights,
)
from .gaussians import (
    DEFAULT_COMPACT_ROWS,
    DEFAULT_MAP_SIZE,
    DEFAULT_N_SURFACE,
    DEFAULT_N_UV,
    DEFAULT_TAU,
    RNG_NAME,
    SamplerCache,
    build_compact_feature,
    compose_param_maps,
    edit_param_map,
    filter_opacity,
    sample_structured,
)
from .lift import DEFAULT_N_FREQ, LATENT_SIZE, AttentionWeights, cross_attention_lift, positional_encode, unproject_to_uv
from .metrics import MetricReport, compute_metrics, reports_to_csv, reports_to_json
from .render import TILE, RenderedImage, configure_threads, render_avatar
from .uv_atlas import UVRasterization, rasterize_uv_attribute

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

COMMANDS = (
    "lift-unproject",
    "lift-attend",
    "sample",
    "edit",
    "animate",
    "render",
    "metrics",
    "bench",
    "make-demo",
)

# options holding file or directory paths; resolved to absolute before running
PATH_KEYS = {
    "body", "skin", "gaussians", "pose", "poses", "weights", "map", "offset", "canonical", "camera",
    "a", "b", "mask", "rendered", "reference", "out", "out_dir", "csv", "manifest",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Fully resolved options for one subcommand run."""

    command: str
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, **self.options}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _versions() -> dict:
    import numba
    import PIL
    import scipy

    return {
        "gauss_avatar": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pillow": PIL.__version__,
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# argument parsing


def _rgb(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        vals = list(text)
    else:
        vals = [v for v in str(text).split(",") if v.strip()]
    try:
        out = [float(v) for v in vals]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"background must be r,g,b floats: {text!r}") from exc
    if len(out) != 3:
        raise argparse.ArgumentTypeError(f"background needs 3 components, got {len(out)}")
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults (flags still win)")
    p.add_argument("--manifest", help="manifest path (default depends on the command)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: GAUSS_AVATAR_THREADS or all)")


def _add_body(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--body", required=required, help="mesh OBJ with UVs")
    p.add_argument("--skin", required=required, help="skeleton and skinning JSON")


def _add_sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-uv", type=int, default=DEFAULT_N_UV)
    p.add_argument("--n-surface", type=int, default=DEFAULT_N_SURFACE)


def _add_render(p: argparse.ArgumentParser) -> None:
    p.add_argument("--canonical", required=True, help="canonical parameter map (UVM1)")
    p.add_argument("--offset", help="offset parameter map (UVM1); zeros when omitted")
    p.add_argument("--camera", required=True, help="camera JSON")
    p.add_argument("--background", type=_rgb, default=[0.0, 0.0, 0.0], help="r,g,b in [0, 1]")
    p.add_argument("--tile", type=int, default=TILE)
    _add_sampling(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gauss-avatar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("lift-unproject", help="project pose-space Gaussians onto the mesh into a UV parameter map")
    _add_common(p)
    _add_body(p)
    p.add_argument("--gaussians", required=True, help="pose-space Gaussian records (PGS1)")
    p.add_argument("--pose", help="pose JSON the Gaussians live in (default: rest pose)")
    p.add_argument("--frame", type=int, default=0, help="record index when --pose holds a sequence")
    p.add_argument("--size", type=int, default=DEFAULT_MAP_SIZE, help="output map width and height")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="opacity filter threshold")
    p.add_argument("--collision", choices=("max-alpha", "average"), default="max-alpha")
    p.add_argument("--out", required=True, help="output parameter map (UVM1)")

    p = sub.add_parser("lift-attend", help="cross-attention lift of a compact feature into a latent code")
    _add_common(p)
    _add_body(p)
    p.add_argument("--gaussians", required=True)
    p.add_argument("--weights", required=True, help="attention weight archive (GAW1)")
    p.add_argument("--pose")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--rows", type=int, default=DEFAULT_COMPACT_ROWS, help="compact feature rows (FPS count)")
    p.add_argument("--n-freq", type=int, default=DEFAULT_N_FREQ)
    p.add_argument("--latent-size", type=int, default=LATENT_SIZE)
    p.add_argument("--out", required=True, help="output latent (UVM1, channels last)")

    p = sub.add_parser("sample", help="structured sampling of a (composed) parameter map")
    _add_common(p)
    _add_body(p)
    p.add_argument("--map", required=True, help="canonical parameter map (UVM1)")
    p.add_argument("--offset", help="offset parameter map added before sampling")
    _add_sampling(p)
    p.add_argument("--out", required=True, help="structured Gaussian set (SGS1)")

    p = sub.add_parser("edit", help="swap a region between two parameter maps or blend them")
    _add_common(p)
    p.add_argument("--a", required=True, help="first parameter map")
    p.add_argument("--b", required=True, help="second parameter map")
    p.add_argument("--mode", choices=("swap", "interpolate"), required=True)
    p.add_argument("--mask", help="swap mask: single-channel UVM1 (> 0.5) or grayscale PNG (> 127)")
    p.add_argument("--parts", type=int, nargs="*", default=None, help="swap mask from body part labels")
    _add_body(p, required=False)
    p.add_argument("--t", type=float, default=None, help="interpolation weight in [0, 1]")
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render one pose to a PNG")
    _add_common(p)
    _add_body(p)
    _add_render(p)
    p.add_argument("--pose", help="pose JSON (default: rest pose)")
    p.add_argument("--frame", type=int, default=0, help="record index when --pose holds a sequence")
    p.add_argument("--out", required=True, help="output PNG")

    p = sub.add_parser("animate", help="render a pose sequence, reusing the canonical sampling cache")
    _add_common(p)
    _add_body(p)
    _add_render(p)
    p.add_argument("--poses", required=True, help="pose sequence JSON")
    p.add_argument("--no-cache", action="store_true", help="recompose and resample every frame")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("metrics", help="compare rendered images with references")
    _add_common(p)
    p.add_argument("--rendered", required=True, help="PNG or directory of PNGs")
    p.add_argument("--reference", required=True, help="PNG or directory with matching names")
    p.add_argument("--mask", help="reference mask PNG (default: reference alpha when present)")
    p.add_argument("--offset", help="offset map whose magnitude is reported")
    p.add_argument("--out", required=True, help="JSON report keyed by frame id")
    p.add_argument("--csv", help="optional CSV export")

    p = sub.add_parser("bench", help="per-stage timings and frames/second")
    _add_common(p)
    _add_body(p, required=False)
    p.add_argument("--canonical", help="canonical map (default: synthetic avatar)")
    p.add_argument("--camera")
    p.add_argument("--count", type=int, default=DEFAULT_N_UV + DEFAULT_N_SURFACE, help="total Gaussian count")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("make-demo", help="write a synthetic avatar bundle for trying the other commands")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=DEFAULT_MAP_SIZE)
    p.add_argument("--n-gaussians", type=int, default=8192, help="pose-space Gaussians to write")
    p.add_argument("--feature-width", type=int, default=0)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices[command]
    raise KeyError(command)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config(argv: list[str]) -> RunConfig:
    """Resolve options with precedence flags > config file > defaults."""
    if not argv or argv[0] in ("-h", "--help", "--version"):
        build_parser().parse_args(argv)  # prints help/version and exits 0
        raise UsageError("missing subcommand")
    command = argv[0]
    if command not in COMMANDS:
        raise UsageError(f"unknown subcommand {command!r}; expected one of: {', '.join(COMMANDS)}")
    parser = build_parser()
    sp = _subparser(parser, command)
    sp.__class__ = _Parser
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    first, _ = pre.parse_known_args(argv[1:])
    if first.config:
        try:
            cfg = json.loads(Path(first.config).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {first.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid config JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise FormatError("config file must hold a JSON object")
        known = {a.dest for a in sp._actions}  # noqa: SLF001
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.pop("command", None)
        if "background" in cfg:
            cfg["background"] = _rgb(cfg["background"])
        # config entries satisfy required flags too
        for a in sp._actions:  # noqa: SLF001
            if a.dest in cfg:
                a.required = False
        sp.set_defaults(**cfg)
    args = sp.parse_args(argv[1:])
    opts = vars(args)
    for k in PATH_KEYS & set(opts):
        if opts[k] is not None:
            opts[k] = str(Path(opts[k]).resolve())
    if opts.get("config"):
        opts["config"] = str(Path(opts["config"]).resolve())
    return RunConfig(command, opts)


# ---------------------------------------------------------------------------
# helpers shared by commands


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _check_common(o: dict) -> None:
    for key in ("n_uv", "n_surface", "rows", "n_freq", "frame", "frames", "warmup", "feature_width"):
        if o.get(key) is not None:
            _need(o[key] >= 0, f"{key} must be non-negative, got {o[key]}")
    for key in ("size", "latent_size", "tile", "width", "height", "n_gaussians", "count"):
        if o.get(key) is not None:
            _need(o[key] >= 1, f"{key} must be at least 1, got {o[key]}")
    if "n_uv" in o and "n_surface" in o:
        _need(o["n_uv"] + o["n_surface"] >= 1, "n_uv + n_surface must be at least 1")
    if o.get("tau") is not None:
        _need(0.0 <= o["tau"] <= 1.0, f"tau must lie in [0, 1], got {o['tau']}")
    if o.get("t") is not None:
        _need(0.0 <= o["t"] <= 1.0, f"t must lie in [0, 1], got {o['t']}")
    if o.get("background") is not None:
        _need(all(0.0 <= c <= 1.0 for c in o["background"]), "background components must lie in [0, 1]")
    if o.get("threads") is not None:
        _need(o["threads"] >= 1, "threads must be at least 1")
    _need(o.get("seed", 0) >= 0, "seed must be non-negative")


def _load_body(o: dict) -> SkinnedBody:
    return load_body(o["body"], o["skin"])


def _pose(o: dict, body: SkinnedBody, key: str = "pose") -> PoseParams:
    if not o.get(key):
        return PoseParams.identity(body.num_joints)
    poses = load_poses(o[key])
    idx = o.get("frame", 0)
    if not 0 <= idx < len(poses):
        raise ValidationError(f"frame {idx} out of range for {len(poses)} pose records")
    return poses[idx]


def _check_pose(body: SkinnedBody, pose: PoseParams) -> None:
    if pose.num_joints != body.num_joints:
        raise ValidationError(f"pose has {pose.num_joints} joints, body has {body.num_joints}")


def _write(path: str | Path, data: bytes, outputs: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    outputs.append(path)


# ---------------------------------------------------------------------------
# commands; each returns a dict of extra manifest fields and appends output paths


def cmd_lift_unproject(o: dict, outputs: list) -> dict:
    body = _load_body(o)
    pose = _pose(o, body)
    _check_pose(body, pose)
    gaussians = read_gaussians(o["gaussians"])
    kept = filter_opacity(gaussians, o["tau"])
    res = unproject_to_uv(kept, pose_body(body, pose), o["size"], o["size"], o["collision"])
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_uvmap(res.param_map, o["out"])
    outputs += [Path(o["out"]), Path(o["out"] + ".json")]
    return {
        "input_count": len(gaussians),
        "filtered_count": len(kept),
        "written": res.written,
        "skipped": res.skipped,
        "collisions": res.collisions,
    }


def cmd_lift_attend(o: dict, outputs: list) -> dict:
    body = _load_body(o)
    pose = _pose(o, body)
    _check_pose(body, pose)
    weights = read_weights(o["weights"])
    gaussians = read_gaussians(o["gaussians"])
    feature = build_compact_feature(gaussians, o["tau"], o["rows"])
    size = o["latent_size"]
    posed = pose_body(body, pose)
    positions = rasterize_uv_attribute(posed, posed.vertices, size, size)
    query = positional_encode(positions, o["n_freq"])
    latent = cross_attention_lift(query, feature, weights, (size, size))
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_uvmap(latent.to_uvmap(), o["out"])
    outputs.append(Path(o["out"]))
    return {"context_rows": feature.num_rows, "context_width": feature.width, "latent_shape": list(latent.shape)}


def cmd_sample(o: dict, outputs: list) -> dict:
    body = _load_body(o)
    m = read_param_map(o["map"])
    if o.get("offset"):
        m = compose_param_maps(m, read_param_map(o["offset"]))
    s = sample_structured(m, body, o["n_uv"], o["n_surface"], o["seed"])
    extra = {"n_uv": o["n_uv"], "n_surface": o["n_surface"], "seed": o["seed"], "rng": RNG_NAME}
    _write(o["out"], structured_to_bytes(s, extra), outputs)
    return {"count": len(s)}


def _read_mask(path: str, shape: tuple[int, int]) -> np.ndarray:
    if Path(path).suffix.lower() == ".png":
        rgb, _ = read_image(path)
        mask = rgb[..., 0] > 127.0 / 255.0
    else:
        mask = read_uvmap(path).data[..., 0] > 0.5
    if mask.shape != shape:
        raise ValidationError(f"mask is {mask.shape}, maps are {shape}")
    return mask


def cmd_edit(o: dict, outputs: list) -> dict:
    a, b = read_param_map(o["a"]), read_param_map(o["b"])
    mask = None
    if o["mode"] == "swap":
        if o.get("mask"):
            mask = _read_mask(o["mask"], a.valid.shape)
        elif o.get("parts") is not None:
            if not (o.get("body") and o.get("skin")):
                raise UsageError("--parts needs --body and --skin")
            body = _load_body(o)
            raster = UVRasterization.build(body.uv_corners, a.width, a.height)
            labels = np.full(raster.face_index.shape, -1)
            labels[raster.valid] = body.part_labels[raster.face_index[raster.valid]]
            mask = np.isin(labels, o["parts"])
        else:
            raise UsageError("swap needs --mask or --parts")
    elif o.get("t") is None:
        raise UsageError("interpolate needs --t")
    out = edit_param_map(a, b, o["mode"], mask=mask, t=o.get("t"))
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_uvmap(out, o["out"])
    outputs += [Path(o["out"]), Path(o["out"] + ".json")]
    return {"valid_texels": int(out.valid.sum()), "swapped_texels": None if mask is None else int(mask.sum())}


def _render_inputs(o: dict):
    body = _load_body(o)
    canonical = read_param_map(o["canonical"])
    offset = read_param_map(o["offset"]) if o.get("offset") else None
    cam = Camera.load(o["camera"])
    return body, canonical, offset, cam


def _render_kwargs(o: dict) -> dict:
    return {
        "n_uv": o["n_uv"],
        "n_surface": o["n_surface"],
        "seed": o["seed"],
        "background": tuple(o["background"]),
        "tile": o["tile"],
    }


def cmd_render(o: dict, outputs: list) -> dict:
    body, canonical, offset, cam = _render_inputs(o)
    pose = _pose(o, body)
    _check_pose(body, pose)
    timings: dict = {}
    img = render_avatar(canonical, offset, body, pose, cam, None, timings=timings, **_render_kwargs(o))
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_png(img.rgba8(), o["out"])
    outputs.append(Path(o["out"]))
    return {"timings_s": timings}


def frame_name(i: int) -> str:
    return f"{i:06d}.png"


def cmd_animate(o: dict, outputs: list) -> dict:
    body, canonical, offset, cam = _render_inputs(o)
    poses = load_poses(o["poses"])
    for p in poses:
        _check_pose(body, p)
    kw = _render_kwargs(o)
    cache = None
    if not o["no_cache"]:
        cache = SamplerCache.build(canonical, body, kw["n_uv"], kw["n_surface"], kw["seed"])
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    for i, pose in enumerate(poses):
        img = render_avatar(canonical, offset, body, pose, cam, cache, timings=timings, **kw)
        path = out_dir / frame_name(i)
        write_png(img.rgba8(), path)
        outputs.append(path)
    return {"frames": len(poses), "cache": cache is not None, "timings_s": timings}


def _image_pairs(o: dict) -> list[tuple[str, Path, Path]]:
    rendered, reference = Path(o["rendered"]), Path(o["reference"])
    if rendered.is_dir():
        if not reference.is_dir():
            raise UsageError("--reference must be a directory when --rendered is")
        pairs = []
        for p in sorted(rendered.glob("*.png")):
            ref = reference / p.name
            if not ref.exists():
                raise FormatError(f"no reference image for {p.name}")
            pairs.append((p.stem, p, ref))
        if not pairs:
            raise FormatError(f"no PNG frames in {rendered}")
        return pairs
    return [(rendered.stem, rendered, reference)]


def cmd_metrics(o: dict, outputs: list) -> dict:
    offset = read_param_map(o["offset"]) if o.get("offset") else None
    mask = read_image(o["mask"])[0][..., 0] if o.get("mask") else None
    reports: dict[str, MetricReport] = {}
    for key, rp, fp in _image_pairs(o):
        rgb, alpha = read_image(rp)
        ref_rgb, ref_alpha = read_image(fp)
        m = mask if mask is not None else ref_alpha
        if alpha is None:
            alpha = np.ones(rgb.shape[:2])
        reports[key] = compute_metrics(RenderedImage(rgb, alpha), ref_rgb, m, offset)
    _write(o["out"], reports_to_json(reports).encode(), outputs)
    if o.get("csv"):
        _write(o["csv"], reports_to_csv(reports).encode(), outputs)
    return {"frames": len(reports)}


def cmd_bench(o: dict, outputs: list) -> dict:
    from . import synthetic

    if o.get("body"):
        body = _load_body(o)
    else:
        body = synthetic.make_tube_body()
    canonical = read_param_map(o["canonical"]) if o.get("canonical") else synthetic.make_canonical_map(body)
    cam = Camera.load(o["camera"]) if o.get("camera") else synthetic.default_camera(o["width"], o["height"])
    n = o["count"]
    n_uv, n_surface = n // 2, n - n // 2
    poses = synthetic.pose_sequence(body, max(o["frames"], 1))
    t0 = time.perf_counter()
    cache = SamplerCache.build(canonical, body, n_uv, n_surface, o["seed"])
    cache_s = time.perf_counter() - t0
    for i in range(o["warmup"]):
        render_avatar(canonical, None, body, poses[i % len(poses)], cam, cache, n_uv=n_uv, n_surface=n_surface,
                      seed=o["seed"])
    timings: dict = {}
    per_frame = []
    for i in range(o["frames"]):
        t = time.perf_counter()
        render_avatar(canonical, None, body, poses[i], cam, cache, n_uv=n_uv, n_surface=n_surface,
                      seed=o["seed"], timings=timings)
        per_frame.append(time.perf_counter() - t)
    frames = max(o["frames"], 1)
    mean = float(np.mean(per_frame)) if per_frame else 0.0
    report = {
        "gaussians": n,
        "width": cam.width,
        "height": cam.height,
        "frames": o["frames"],
        "threads": o["_threads"],
        "cache_build_s": cache_s,
        "stage_mean_s": {k: v / frames for k, v in timings.items()},
        "frame_mean_s": mean,
        "frame_median_s": float(np.median(per_frame)) if per_frame else 0.0,
        "fps": 1.0 / mean if mean > 0 else None,
    }
    print(json.dumps(report, indent=2), file=sys.stderr)
    if o.get("out"):
        _write(o["out"], json.dumps(report, indent=2).encode(), outputs)
    return {"bench": report}


def cmd_make_demo(o: dict, outputs: list) -> dict:
    from . import synthetic

    out = Path(o["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    body = synthetic.make_tube_body()
    _write(out / "body.obj", write_obj(body), outputs)
    _write(out / "body.skin.json", write_skin(body), outputs)
    canonical = synthetic.make_canonical_map(body, o["size"], seed=o["seed"])
    offset = synthetic.make_offset_map(canonical, seed=o["seed"] + 1)
    for name, m in (("canonical.uvm", canonical), ("offset.uvm", offset)):
        write_uvmap(m, out / name)
        outputs += [out / name, out / (name + ".json")]
    cam = synthetic.default_camera(o["width"], o["height"])
    _write(out / "camera.json", json.dumps(cam.to_dict(), indent=2).encode(), outputs)
    poses = synthetic.pose_sequence(body, o["frames"])
    _write(out / "poses.json", json.dumps({"frames": [p.to_dict() for p in poses]}).encode(), outputs)
    g = synthetic.make_pose_space_gaussians(body, o["n_gaussians"], seed=o["seed"], feature_width=o["feature_width"])
    write_gaussians(g, out / "gaussians.pgs")
    outputs.append(out / "gaussians.pgs")
    rng = np.random.Generator(np.random.PCG64(o["seed"]))
    w = AttentionWeights.random(rng, context_width=14 + o["feature_width"])
    write_weights(w, out / "weights.gaw")
    outputs.append(out / "weights.gaw")
    return {"files": len(outputs)}


HANDLERS = {
    "lift-unproject": cmd_lift_unproject,
    "lift-attend": cmd_lift_attend,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "animate": cmd_animate,
    "render": cmd_render,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
    "make-demo": cmd_make_demo,
}


def _manifest_path(cfg: RunConfig) -> Path:
    o = cfg.options
    if o.get("manifest"):
        return Path(o["manifest"])
    if o.get("out_dir"):
        return Path(o["out_dir"]) / "manifest.json"
    if o.get("out"):
        return Path(o["out"] + ".manifest.json")
    return Path.cwd() / f"{cfg.command}.manifest.json"


def _write_manifest(cfg: RunConfig, status: str, error: str | None, outputs: list, extra: dict) -> dict:
    o = cfg.options
    manifest = {
        "command": cfg.command,
        "status": status,
        "error": error,
        "seed": o.get("seed"),
        "rng": RNG_NAME,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "versions": _versions(),
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
        **extra,
    }
    text = json.dumps(manifest, indent=2, default=str)
    try:
        path = _manifest_path(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
    print(text)
    return manifest


def run_command(argv: list[str]) -> int:
    """Parse, execute and record one subcommand; returns the exit status."""
    try:
        cfg = parse_config(list(argv))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    outputs: list[Path] = []
    extra: dict = {}
    status, code, error = "ok", EXIT_OK, None
    try:
        _check_common(cfg.options)
        cfg.options["_threads"] = configure_threads(cfg.options.get("threads"))
        extra = HANDLERS[cfg.command](cfg.options, outputs) or {}
    except UsageError as exc:
        status, code, error = "usage-error", EXIT_USAGE, str(exc)
    except (FormatError, OSError) as exc:
        status, code, error = "io-error", EXIT_IO, str(exc)
    except (ValidationError, ValueError, FloatingPointError, ArithmeticError) as exc:
        status, code, error = "validation-error", EXIT_NUMERIC, str(exc)
    cfg.options.pop("_threads", None)
    _write_manifest(cfg, status, error, outputs, extra)
    if error:
        print(f"error: {error}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
