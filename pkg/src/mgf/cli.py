"""Command-line pipeline: every stage reads and writes files in one workdir.

Workdir layout::

    colmap/              COLMAP model (text or binary)       ingest / synth
    images/              photos named as in the model        synth
    masks/               8-bit label PNGs, same names        external segmenter / synth
    scene.json           ingest summary                      ingest
    roots.json           root / child split                  mask-points
    masked_points.txt    id x y z r g b                      mask-points
    prompts/             per-child prompt pixels             prompts
    checkpoints/         iter_XXXXXX.mgf, final.mgf          train
                         screened.mgf                        screen
    train_log.csv        per-iteration losses                train
    renders/             PNG renders                         render
    mesh.obj             extracted surface                   mesh
    report.json          metrics                             eval-render / eval-mesh
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

STAGES = ("ingest", "mask-points", "prompts", "train", "render", "screen", "mesh",
          "eval-render", "eval-mesh", "synth")

# artifact -> stage that produces it, for error messages
PRODUCERS = {
    "colmap": "synth (or an external COLMAP run)",
    "images": "synth (or copy the photos in)",
    "masks": "synth (or an external segmenter)",
    "roots.json": "mask-points",
    "masked_points.txt": "mask-points",
    "checkpoints/final.mgf": "train",
    "checkpoints/screened.mgf": "screen",
    "mesh.obj": "mesh",
    "gt_mesh.obj": "synth (or pass --gt)",
}


class PipelineError(RuntimeError):
    pass


class MissingArtifact(PipelineError):
    def __init__(self, name, where):
        super().__init__(f"missing {name} in {where}: run the `{PRODUCERS.get(name, '?')}` stage first")
        self.artifact = name


@dataclass
class ExtractOptions:
    mode: str = "delaunay"        # artifact default; "bcc" also available
    cell: float | None = None     # BCC spacing; None picks 1/40 of the box diagonal
    refine_iters: int = 8         # artifact default
    views: str = "all"            # opacity views: "roots" or "all" training views


@dataclass
class EvalOptions:
    th: float = 0.05              # published value: 5 cm
    samples: int = 100000         # artifact default
    split: str = "heldout"        # heldout views when any, else all


def _train_config():
    from .train import TrainConfig
    return TrainConfig()


@dataclass
class PipelineConfig:
    workdir: str = "."
    colmap_dir: str = "colmap"
    image_dir: str = "images"
    mask_dir: str = "masks"
    root_ratio: float = 0.2       # published value: one root per five images
    root_mode: str = "uniform"
    w_edge: float = 10.0          # published value
    heldout: list = field(default_factory=list)
    seed: int = 0
    train: object = field(default_factory=_train_config)
    extract: ExtractOptions = field(default_factory=ExtractOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, d):
        from .train import TrainConfig
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        sub = {"train": TrainConfig, "extract": ExtractOptions, "eval": EvalOptions}
        for name, typ in sub.items():
            if name in d:
                val = d[name]
                if not isinstance(val, dict):
                    raise ValueError(f"config key {name!r} must be a mapping")
                if typ is TrainConfig:
                    d[name] = TrainConfig.from_dict(val)
                else:
                    bad = set(val) - {f.name for f in fields(typ)}
                    if bad:
                        raise ValueError(f"unknown {name} config keys: {sorted(bad)}")
                    d[name] = typ(**val)
        return cls(**d)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = self.train.to_dict()
        d["extract"] = asdict(self.extract)
        d["eval"] = asdict(self.eval)
        d["heldout"] = list(self.heldout)
        return d

    def path(self, *parts):
        return Path(self.workdir).joinpath(*parts)


PUBLISHED_KEYS = {"root_ratio", "w_edge", "eval.th", "train.lambdas", "train.iterations"}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d, assignment):
    """Set ``a.b=value`` (JSON value, else a string) inside the nested dict ``d``."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw)
    return d


def load_config(path=None, overrides=(), workdir=None, seed=None) -> PipelineConfig:
    d = {}
    if path:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    for o in overrides:
        apply_override(d, o)
    if workdir is not None:
        d["workdir"] = str(workdir)
    cfg = PipelineConfig.from_dict(d)
    if seed is not None:
        cfg.seed = int(seed)
    cfg.train.seed = cfg.seed
    cfg.train.w_edge = cfg.w_edge
    return cfg


def config_help():
    lines = ["config keys (JSON file via --config, or --set key=value):"]
    for k, v in sorted(_flatten(PipelineConfig().to_dict()).items()):
        tag = "published" if k in PUBLISHED_KEYS else "artifact default"
        lines.append(f"  {k} = {json.dumps(v)}  [{tag}]")
    return "\n".join(lines)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


# ------------------------------------------------------------------ helpers

def _require(cfg, rel):
    p = cfg.path(rel)
    if not p.exists():
        raise MissingArtifact(rel, cfg.workdir)
    return p


def _require_dir(cfg, attr, key):
    p = cfg.path(getattr(cfg, attr))
    if not p.is_dir() or not any(p.iterdir()):
        raise MissingArtifact(key, p)
    return p


def _load_model(cfg):
    from .scene_io import read_colmap_model
    return read_colmap_model(_require_dir(cfg, "colmap_dir", "colmap"))


def _heldout(cfg):
    if cfg.heldout:
        return set(cfg.heldout)
    meta = cfg.path("synth.json")
    if meta.is_file():
        return set(json.loads(meta.read_text(encoding="utf-8")).get("heldout", []))
    return set()


def _views(cfg, cams, images, with_masks=True, split="all"):
    """(View, target) pairs in image-id order; ``split="train"`` drops held-out images."""
    from .mask_field import MaskPyramid, View
    from .scene_io import load_image, load_label_mask
    by_id = {c.camera_id: c for c in cams}
    out = []
    mask_dir = _require_dir(cfg, "mask_dir", "masks") if with_masks else None
    image_dir = cfg.path(cfg.image_dir)
    held = _heldout(cfg) if split == "train" else set()
    for im in sorted(images, key=lambda i: i.image_id):
        if im.name in held:
            continue
        cam = by_id[im.camera_id]
        pyr = None
        if with_masks:
            mp = mask_dir / im.name
            if not mp.is_file():
                raise MissingArtifact(f"masks/{im.name}", cfg.workdir)
            pyr = MaskPyramid.from_labels(load_label_mask(mp, (cam.height, cam.width)), cfg.w_edge)
        ip = image_dir / im.name
        target = load_image(ip) if ip.is_file() else None
        out.append((View(cam, im, pyr), target))
    return out


def _roots(cfg, views):
    from .mask_field import select_roots
    sel = select_roots([v.image for v, _ in views], cfg.root_ratio, cfg.root_mode)
    return [v for v, _ in views if v.image.image_id in sel.root_ids], sel


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _update_report(cfg, entries):
    p = cfg.path("report.json")
    rep = json.loads(p.read_text(encoding="utf-8")) if p.is_file() else {}
    rep.update(entries)
    _write_json(p, rep)
    return rep


# ------------------------------------------------------------------ stages

def cmd_synth(cfg, args):
    from .synth import synth_scene, write_scene
    size = (750, 500) if args.full else args.size
    scene = synth_scene(args.kind, cfg.seed, n_views=args.views, n_heldout=args.heldout, size=size)
    cfg.path().mkdir(parents=True, exist_ok=True)
    meta = write_scene(scene, cfg.workdir, init_noise=args.init_noise)
    print(f"synth: {args.kind} scene with {len(scene.images)} images "
          f"({len(meta['heldout'])} held out)")
    return 0


def cmd_ingest(cfg, args):
    cams, images, points = _load_model(cfg)
    missing = [im.name for im in images if not cfg.path(cfg.image_dir, im.name).is_file()]
    summary = {
        "cameras": len(cams),
        "camera_kinds": sorted({c.kind for c in cams}),
        "images": len(images),
        "points": len(points),
        "images_missing_on_disk": len(missing),
    }
    _write_json(cfg.path("scene.json"), summary)
    print(f"ingest: {len(cams)} cameras, {len(images)} images, {len(points)} points")
    if missing:
        print(f"ingest: warning: {len(missing)} photos not found, e.g. {missing[0]}", file=sys.stderr)
    return 0


def cmd_mask_points(cfg, args):
    from .mask_field import masked_points
    cams, images, points = _load_model(cfg)
    roots, sel = _roots(cfg, _views(cfg, cams, images, split="train"))
    kept = masked_points(points, roots)
    with open(cfg.path("masked_points.txt"), "w", encoding="ascii") as fh:
        for p in kept:
            x, y, z = (repr(float(v)) for v in p.position)
            r, g, b = (repr(float(v)) for v in p.color)
            fh.write(f"{p.point_id} {x} {y} {z} {r} {g} {b}\n")
    _write_json(cfg.path("roots.json"), {"roots": sorted(sel.root_ids), "children": sorted(sel.child_ids),
                                        "ratio": sel.ratio, "mode": cfg.root_mode})
    print(f"mask-points: {len(kept)} of {len(points)} points kept using {len(roots)} roots")
    return 0


def read_masked_points(path):
    import numpy as np
    from .scene_io import SparsePoint
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        f = line.split()
        if len(f) != 7:
            raise PipelineError(f"{path}:{n}: expected 7 fields, found {len(f)}")
        out.append(SparsePoint(int(f[0]), np.array(f[1:4], dtype=float), np.array(f[4:7], dtype=float), []))
    return out


def cmd_prompts(cfg, args):
    from .mask_field import export_child_prompts, prompt_filename, write_prompts
    cams, images, _ = _load_model(cfg)
    pts = read_masked_points(_require(cfg, "masked_points.txt"))
    roots = json.loads(_require(cfg, "roots.json").read_text(encoding="utf-8"))
    children = set(roots["children"])
    views = _views(cfg, cams, images, with_masks=False, split="train")
    out_dir = cfg.path("prompts")
    out_dir.mkdir(exist_ok=True)
    n = 0
    for v, _ in views:
        if v.image.image_id in children:
            write_prompts(out_dir / prompt_filename(v.image.name), export_child_prompts(pts, v))
            n += 1
    print(f"prompts: wrote prompt files for {n} child images")
    return 0


def _training_set(cfg):
    cams, images, _ = _load_model(cfg)
    pairs = _views(cfg, cams, images, split="train")
    missing = [v.image.name for v, t in pairs if t is None]
    if missing:
        raise MissingArtifact(f"images/{missing[0]}", cfg.workdir)
    return [v for v, _ in pairs], [t for _, t in pairs]


def cmd_train(cfg, args):
    from .gaussians import load_checkpoint, save_checkpoint
    from .train import fit, init_from_points
    views, targets = _training_set(cfg)
    if args.init == "points":
        pts = read_masked_points(_require(cfg, "masked_points.txt"))
        if not pts:
            raise PipelineError("masked_points.txt is empty; nothing to initialize from")
        init = init_from_points(pts)
    else:
        p = Path(args.init)
        if not p.is_absolute():
            p = cfg.path(args.init)
        if not p.is_file():
            raise PipelineError(f"--init checkpoint {args.init} not found")
        init = load_checkpoint(p)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    ck = cfg.path("checkpoints")
    ck.mkdir(exist_ok=True)
    res = fit(views, targets, cfg.train, init, log_path=cfg.path("train_log.csv"), checkpoint_dir=ck)
    save_checkpoint(res.field, ck / "final.mgf")
    last = res.history[-1].total if res.history else float("nan")
    print(f"train: {cfg.train.iterations} iterations, {len(res.field)} Gaussians, final loss {last:.6g}")
    return 0


def cmd_render(cfg, args):
    from .gaussians import load_checkpoint
    from .render import render_image, to_uint8
    from .scene_io import save_image
    import numpy as np
    fld = load_checkpoint(_require(cfg, "checkpoints/final.mgf"))
    cams, images, _ = _load_model(cfg)
    out = cfg.path("renders")
    out.mkdir(exist_ok=True)
    for v, _ in _views(cfg, cams, images):
        r = render_image(fld, v)
        img = to_uint8(r.color, v.pyramid.inside, preview=args.preview)
        save_image(out / v.image.name, img.astype(np.float64) / 255.0)
    print(f"render: wrote {len(images)} images")
    return 0


def cmd_screen(cfg, args):
    from .extract import screen_gaussians
    from .gaussians import load_checkpoint, save_checkpoint
    fld = load_checkpoint(_require(cfg, "checkpoints/final.mgf"))
    cams, images, _ = _load_model(cfg)
    roots, _ = _roots(cfg, _views(cfg, cams, images, split="train"))
    kept, keep = screen_gaussians(fld, roots)
    save_checkpoint(kept, cfg.path("checkpoints", "screened.mgf"))
    print(f"screen: kept {len(kept)} of {len(fld)} Gaussians")
    return 0


def cmd_mesh(cfg, args):
    from .extract import edge_manifold_report, extract_mesh
    from .gaussians import load_checkpoint
    from .scene_io import write_mesh
    ex = cfg.extract
    for name in ("mode", "cell", "refine_iters", "views"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(ex, name, val)
    fld = load_checkpoint(_require(cfg, "checkpoints/screened.mgf"))
    if len(fld) == 0:
        raise PipelineError("screened field is empty; nothing to mesh")
    if ex.views == "roots":
        cams, images, _ = _load_model(cfg)
        views, _ = _roots(cfg, _views(cfg, cams, images, split="train"))
    elif ex.views == "all":
        views, _ = _training_set(cfg)
    else:
        raise PipelineError(f"unknown view set {ex.views!r}")
    mesh, grid = extract_mesh(fld, views, mode=ex.mode, cell=ex.cell, refine_iters=ex.refine_iters,
                              seed=cfg.seed)
    write_mesh(mesh, cfg.path("mesh.obj"))
    closed, oriented = edge_manifold_report(mesh)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"(closed={closed}, oriented={oriented})")
    return 0


def cmd_eval_render(cfg, args):
    import numpy as np
    from .evaluate import score_render
    from .gaussians import load_checkpoint
    from .render import render_image
    fld = load_checkpoint(_require(cfg, "checkpoints/final.mgf"))
    cams, images, _ = _load_model(cfg)
    pairs = _views(cfg, cams, images)
    held = _heldout(cfg)
    if cfg.eval.split == "heldout" and held:
        pairs = [(v, t) for v, t in pairs if v.image.name in held]
    pairs = [(v, t) for v, t in pairs if t is not None and v.pyramid.inside.any()]
    if not pairs:
        raise PipelineError("no evaluation images with both a photo and a non-empty mask")
    scores = [score_render(render_image(fld, v).color, t, v.pyramid.inside) for v, t in pairs]
    rep = _update_report(cfg, {
        "psnr": float(np.mean([s.psnr for s in scores])),
        "ssim": float(np.mean([s.ssim for s in scores])),
        "render_views": len(scores),
        "seeds": {"global": cfg.seed},
    })
    print(f"eval-render: PSNR {rep['psnr']:.3f} dB, SSIM {rep['ssim']:.4f} over {len(scores)} views")
    return 0


def cmd_eval_mesh(cfg, args):
    from .evaluate import mesh_score, sample_mesh
    from .scene_io import read_mesh
    if args.th is not None:
        cfg.eval.th = args.th
    pred = read_mesh(_require(cfg, "mesh.obj"))
    if args.gt:
        gt_path = Path(args.gt)
        if not gt_path.is_file():
            raise PipelineError(f"--gt mesh {args.gt} not found")
    else:
        gt_path = _require(cfg, "gt_mesh.obj")
    gt = read_mesh(gt_path)
    s_pred, s_gt = cfg.seed + 1, cfg.seed + 2
    score = mesh_score(sample_mesh(pred, cfg.eval.samples, s_pred),
                       sample_mesh(gt, cfg.eval.samples, s_gt), cfg.eval.th)
    _update_report(cfg, {
        "accuracy": score.accuracy,
        "completeness": score.completeness,
        "f1": score.f1,
        "Th": score.threshold,
        "samples": cfg.eval.samples,
        "seeds": {"global": cfg.seed, "pred_samples": s_pred, "gt_samples": s_gt},
    })
    print(f"eval-mesh: accuracy {score.accuracy:.2f}, completeness {score.completeness:.2f}, "
          f"F1 {score.f1:.2f} at Th={score.threshold}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "mask-points": cmd_mask_points,
    "prompts": cmd_prompts, "train": cmd_train, "render": cmd_render, "screen": cmd_screen,
    "mesh": cmd_mesh, "eval-render": cmd_eval_render, "eval-mesh": cmd_eval_mesh,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=None, help="pipeline working directory (default: .)")
    common.add_argument("--config", default=None, help="JSON config file mirroring PipelineConfig")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.iterations=2000")
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 keeps runs bit-deterministic")
    common.add_argument("--full", action="store_true",
                        help="full-size 750x500 images instead of the 64x64 CI size")

    p = argparse.ArgumentParser(prog="mgf", description="Masked Gaussian field reconstruction pipeline.",
                                epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene into the workdir")
    s.add_argument("--kind", default="sphere", choices=["sphere", "two-box", "steel-frame-toy"])
    s.add_argument("--views", type=int, default=12, help="training views")
    s.add_argument("--heldout", type=int, default=4, help="extra held-out views")
    s.add_argument("--size", type=int, default=64, help="square image side in pixels")
    s.add_argument("--init-noise", type=float, default=0.05, help="relative noise of init.mgf")
    sub.add_parser("ingest", parents=[common], help="parse and summarize the COLMAP model")
    sub.add_parser("mask-points", parents=[common], help="select roots and mask the sparse points")
    sub.add_parser("prompts", parents=[common], help="export child-image prompt pixels")
    t = sub.add_parser("train", parents=[common], help="optimize the Gaussian field")
    t.add_argument("--init", default="points", help="'points' or a checkpoint path (e.g. init.mgf)")
    t.add_argument("--iterations", type=int, default=None)
    r = sub.add_parser("render", parents=[common], help="render every view of the trained field")
    r.add_argument("--preview", action="store_true", help="paint off-mask pixels for inspection")
    sub.add_parser("screen", parents=[common], help="drop Gaussians outside the root masks")
    m = sub.add_parser("mesh", parents=[common], help="extract the opacity level set")
    m.add_argument("--mode", choices=["delaunay", "bcc"], default=None)
    m.add_argument("--cell", type=float, default=None, help="BCC lattice spacing")
    m.add_argument("--refine", dest="refine_iters", type=int, default=None, help="crossing refinements")
    m.add_argument("--views", choices=["roots", "all"], default=None)
    sub.add_parser("eval-render", parents=[common], help="masked PSNR / SSIM on evaluation views")
    e = sub.add_parser("eval-mesh", parents=[common], help="accuracy / completeness / F1 against a mesh")
    e.add_argument("--gt", default=None, help="ground-truth mesh (default: workdir/gt_mesh.obj)")
    e.add_argument("--th", type=float, default=None, help="distance threshold (default 0.05)")
    return p


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        cfg = load_config(args.config, args.set, args.workdir, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (PipelineError, ValueError, FileNotFoundError) as exc:
        print(f"mgf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
