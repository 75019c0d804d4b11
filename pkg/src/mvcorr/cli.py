"""Command-line front end: ``mvcorr {gen,corr,edit,score,verify}``.

Numeric options can also come from a JSON ``--config`` file whose keys match
the long flag names (with underscores). Precedence is flag, then config
file, then built-in default.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .correspondence import (
    DEFAULT_BETA, AttentionMask, DEFAULT_PATCH, DEFAULT_TOL_TOKENS, build_correspondences, deserialize_correspondences,
    serialize_correspondences,
)
from .diffusion import DEFAULT_STEPS, make_schedule, toy_predictor
from .errors import MVCorrError
from .geometry import DEFAULT_TOL_DEPTH
from .io import read_grid, write_grid
from .pipeline import (
    DEFAULT_LAMBDA, EditSession, consistency_score, joint_edit, per_view_edit, read_scores, select_reference,
    semantic_features,
)
from .synthetic import KINDS, SceneSpec, generate, load_scene


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    scene: str | None = None
    out: str | None = None
    corr: str | None = None
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    steps: int = DEFAULT_STEPS
    patch: int = DEFAULT_PATCH
    reference: int | None = None
    scores: str | None = None
    seed: int = 0
    tol_px: float = DEFAULT_TOL_TOKENS
    tol_depth: float = DEFAULT_TOL_DEPTH

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError("--lambda must lie in [0, 1]")
        if not -1.0 <= self.beta <= 1.0:
            raise UsageError("--beta must lie in [-1, 1]")
        if self.steps < 1 or self.patch < 1:
            raise UsageError("--steps and --patch must be positive")
        if self.tol_px <= 0 or self.tol_depth <= 0:
            raise UsageError("tolerances must be positive")


_CONFIG_KEYS = {f.name for f in fields(RunConfig)} | {"lambda"}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    path = getattr(args, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        for k, v in data.items():
            setattr(cfg, k, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    cfg.validate()
    return cfg


def _add_run_flags(p, *names):
    helps = {
        "scene": ("--scene", dict(help="scene directory written by 'gen'")),
        "out": ("--out", dict(help="output path")),
        "corr": ("--corr", dict(help="MVCR correspondence file")),
        "lam": ("--lambda", dict(dest="lam", type=float, help=f"reference attention weight (default {DEFAULT_LAMBDA})")),
        "beta": ("--beta", dict(type=float, help=f"semantic similarity threshold (default {DEFAULT_BETA})")),
        "steps": ("--steps", dict(type=int, help=f"DDIM steps (default {DEFAULT_STEPS})")),
        "patch": ("--patch", dict(type=int, help=f"latent patch size in pixels (default {DEFAULT_PATCH})")),
        "reference": ("--reference", dict(type=int, help="manual reference view index")),
        "scores": ("--scores", dict(help="score file ('view_index score' per line) for automatic selection")),
        "seed": ("--seed", dict(type=int, help="seed for all randomness (default 0)")),
        "tol_px": ("--tol-px", dict(dest="tol_px", type=float, help=f"round-trip tolerance in latent tokens (default {DEFAULT_TOL_TOKENS})")),
        "tol_depth": ("--tol-depth", dict(dest="tol_depth", type=float, help=f"relative depth tolerance (default {DEFAULT_TOL_DEPTH})")),
    }
    for n in names:
        flag, kw = helps[n]
        p.add_argument(flag, default=None, **kw)
    p.add_argument("--config", help="JSON file with defaults for the flags above")


def _require(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


# --- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spec = SceneSpec(kind=args.kind, n_views=args.views, size=args.size, seed=seed, patch=args.patch,
                     dim=args.dim, span_deg=args.span, noise=args.noise)
    scene = generate(spec)
    scene.save(args.out)
    print(f"wrote {spec.n_views} views of a {spec.kind} scene to {args.out}")
    return 0


def cmd_corr(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "scene", "out")
    scene = load_scene(cfg.scene)
    if args.features == "recorder":
        pred = toy_predictor("mixer", dim=scene.features[0].shape[-1], seed=cfg.seed,
                             schedule=make_schedule(cfg.steps))
        session = EditSession(scene.batch, scene.features, schedule=make_schedule(cfg.steps), patch=cfg.patch)
        feats = semantic_features(session, pred)
    else:
        feats = scene.features
    cs, _ = build_correspondences(scene.batch, feats, cfg.patch, cfg.beta, cfg.tol_px, cfg.tol_depth)
    serialize_correspondences(cs, cfg.out)
    for k, v in cs.counts().items():
        print(f"{k} {v}")
    return 0


def _write_manifest(path: Path, items: dict):
    lines = [f"{k} {v}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n")


def cmd_edit(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "scene", "out")
    if (cfg.reference is None) == (cfg.scores is None):
        raise UsageError("give exactly one of --reference or --scores")
    scene = load_scene(cfg.scene)
    latents = scene.features
    dim = latents[0].shape[-1]
    sched = make_schedule(cfg.steps)
    pred = toy_predictor("mixer", dim=dim, seed=cfg.seed, schedule=sched)
    cond = np.random.default_rng([cfg.seed, 1]).normal(size=dim)
    corr = None
    if cfg.corr:
        cs = deserialize_correspondences(cfg.corr)
        corr = (cs, AttentionMask.from_correspondences(cs))
    session = EditSession(scene.batch, latents, schedule=sched, lam=cfg.lam, beta=cfg.beta, patch=cfg.patch,
                          tol_px=cfg.tol_px, tol_depth=cfg.tol_depth, corr=corr)
    candidates, records = per_view_edit(session, pred, cond)
    if cfg.reference is not None:
        ref = select_reference(candidates, index=cfg.reference)
        mode = "manual"
    else:
        ref = select_reference(candidates, scores=read_scores(cfg.scores))
        mode = "auto"
    session.reference_index = ref
    session.records = records
    edited = joint_edit(session, pred, cond)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (c, e) in enumerate(zip(candidates, edited)):
        write_grid(c, out / f"candidate_{i:03d}.mvdt")
        write_grid(e, out / f"edited_{i:03d}.mvdt")
    cs = session.corr[0]
    try:
        joint_score = f"{consistency_score(edited, cs):.9g}"
        pv_score = f"{consistency_score(candidates, cs):.9g}"
    except MVCorrError:
        joint_score = pv_score = "nan"
    _write_manifest(out / "manifest.txt", {
        "seed": cfg.seed,
        "lambda": cfg.lam,
        "beta": cfg.beta,
        "steps": cfg.steps,
        "patch": cfg.patch,
        "reference_mode": mode,
        "reference_index": ref,
        "score": joint_score,
        "per_view_score": pv_score,
        "n_views": len(edited),
    })
    print(f"reference {ref} ({mode}); consistency joint {joint_score} per-view {pv_score}")
    return 0


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "corr")
    if args.grids:
        paths = [Path(p) for p in args.grids]
    elif args.dir:
        paths = sorted(Path(args.dir).glob(f"{args.prefix}_*.mvdt"))
    else:
        raise UsageError("give --grids or --dir")
    if not paths:
        raise UsageError("no grid files found")
    cs = deserialize_correspondences(cfg.corr)
    print(f"{consistency_score([read_grid(p) for p in paths], cs):.9g}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    cfg = resolve_config(args)
    _require(cfg, "scene")
    results = run_checks(cfg.scene, patch=cfg.patch, beta=cfg.beta, tol_px=cfg.tol_px, tol_depth=cfg.tol_depth)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcorr", description=__doc__.splitlines()[0])
    parser.add_argument("--backend", choices=["auto", "native", "python"], help="kernel backend override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene directory")
    p.add_argument("--kind", choices=KINDS, default="plane", help="scene type (default plane)")
    p.add_argument("--views", type=int, default=4, help="number of views (default 4)")
    p.add_argument("--size", type=int, default=128, help="image width and height in pixels (default 128)")
    p.add_argument("--patch", type=int, default=DEFAULT_PATCH, help="latent patch size (default 8)")
    p.add_argument("--dim", type=int, default=16, help="feature dimension (default 16)")
    p.add_argument("--span", type=float, default=60.0, help="camera arc span in degrees (default 60)")
    p.add_argument("--noise", type=float, default=0.0, help="std of independent per-view feature noise (default 0)")
    p.add_argument("--seed", type=int, default=None, help="scene seed (default 0)")
    p.add_argument("--out", required=True, help="output scene directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("corr", help="build correspondences and write an MVCR file")
    _add_run_flags(p, "scene", "out", "beta", "patch", "tol_px", "tol_depth", "seed", "steps")
    p.add_argument("--features", choices=["scene", "recorder"], default="scene",
                   help="semantic features: the scene's feat files or the mixer's last layer (default scene)")
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("edit", help="per-view edit, reference selection and joint edit")
    _add_run_flags(p, "scene", "out", "corr", "lam", "beta", "steps", "patch", "reference", "scores", "seed",
                   "tol_px", "tol_depth")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("score", help="warped-feature consistency score of a set of grids")
    _add_run_flags(p, "corr")
    p.add_argument("--grids", nargs="+", help="grid files in view order")
    p.add_argument("--dir", help="directory holding <prefix>_###.mvdt grids")
    p.add_argument("--prefix", default="edited", help="grid file prefix within --dir (default edited)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("verify", help="run oracle and invariant checks on a scene")
    _add_run_flags(p, "scene", "beta", "patch", "tol_px", "tol_depth")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend:
        _kernels.use(args.backend)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        parser.error(f"missing file: {exc.filename}")
    except (MVCorrError, OSError) as exc:
        print(f"mvcorr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
