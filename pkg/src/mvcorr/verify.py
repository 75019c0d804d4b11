"""Oracle and invariant checks run by ``mvcorr verify`` on a scene directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .correspondence import (
    GEOMETRIC, SELF, SEMANTIC, AttentionMask, build_correspondences, decode_correspondences,
    encode_correspondences, rethreshold,
)
from .geometry import back_project, match_pixels, project
from .io import decode_array, encode_array
from .synthetic import load_scene

BETA_SWEEP = (0.8, 0.85, 0.9, 0.95)


def _check_formats(scene):
    for path in sorted(Path(scene.directory).glob("*.mvdt")):
        raw = path.read_bytes()
        if encode_array(decode_array(raw)) != raw:
            return False, f"{path.name} does not re-encode bitwise"
    return True, "all MVDT files re-encode bitwise"


def _check_depth(scene):
    for v in range(scene.batch.n_views):
        hit = scene.oracle(v)[:, :, v, 2] > 0
        d = scene.batch.depth(v)
        if np.any(d[hit] <= 0) or np.any(d[~hit] != 0):
            return False, f"view {v}: depth positivity disagrees with surface hits"
    return True, "depth > 0 exactly where a surface is hit"


def _check_roundtrip(scene, rng):
    worst = 0.0
    for cam in scene.batch.cameras:
        for _ in range(50):
            p = (rng.uniform(0, cam.width), rng.uniform(0, cam.height))
            z = rng.uniform(0.5, 10)
            x, y, zz = project(back_project(p, z, cam), cam)
            worst = max(worst, abs(x - p[0]), abs(y - p[1]), abs(zz - z))
    return worst <= 1e-5, f"max round-trip error {worst:.2e}"


def _check_geometry(scene, tol_px, tol_depth, stride=4):
    n = scene.batch.n_views
    agree = total = occluded = caught = visible = false_invalid = 0
    for s in range(n):
        table = scene.oracle(s)[::stride, ::stride]
        h, w = table.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w] * stride
        hit = table[:, :, s, 2] > 0
        for a in range(n):
            if a == s:
                continue
            ox, oy, vis = table[:, :, a, 0], table[:, :, a, 1], table[:, :, a, 2] > 0
            cam = scene.batch.cameras[a]
            inside = (ox >= 0) & (ox < cam.width) & (oy >= 0) & (oy < cam.height)
            x, y, _, ok = match_pixels(xs, ys, s, a, scene.batch, tol_px, tol_depth)
            x, y, ok = x.reshape(h, w), y.reshape(h, w), ok.reshape(h, w)
            err = np.hypot(x - ox, y - oy)
            total += vis.sum()
            agree += (ok & vis & (err <= 0.5)).sum()
            occ = hit & inside & ~vis
            occluded += occ.sum()
            caught += (~ok & occ).sum()
            visible += vis.sum()
            false_invalid += (~ok & vis).sum()
    results = []
    frac = agree / total if total else 1.0
    results.append(("geometric_oracle", frac >= 0.99, f"{frac:.4f} of visible pixels match within 0.5 px"))
    if occluded:
        frac = caught / occluded
        results.append(("occlusion_mask", frac >= 0.99, f"{frac:.4f} of occluded pixels invalid"))
    if scene.spec is not None and scene.spec.kind == "sphere":
        results.append(("false_invalid", True, "skipped: grazing-angle surface"))
    else:
        rate = false_invalid / visible if visible else 0.0
        results.append(("false_invalid", rate < 0.01, f"false-invalid rate {rate:.4f}"))
    return results


def _check_correspondences(scene, patch, beta, tol_px, tol_depth):
    cs, mask = build_correspondences(scene.batch, scene.features, patch, beta, tol_px, tol_depth)
    again, _ = build_correspondences(scene.batch, scene.features, patch, beta, tol_px, tol_depth)
    out = []
    n = cs.n_views
    diag = np.arange(n)
    self_ok = np.all(cs.kind[diag, :, :, diag] == SELF) and np.all(cs.valid[diag, :, :, diag])
    out.append(("self_entries", bool(self_ok), "self entry present and valid for every token"))
    sem = (cs.kind == SEMANTIC) & cs.valid
    out.append(("semantic_threshold", bool(np.all(cs.score[sem] > beta)), f"{sem.sum()} valid semantic entries above beta"))
    geo = cs.kind == GEOMETRIC
    out.append(("geometric_valid", bool(np.all(cs.valid[geo])), "geometric entries are all valid"))
    ref = AttentionMask.from_correspondences(cs)
    out.append(("mask_alignment", bool(np.array_equal(mask.bias, ref.bias)), "bias 0 exactly on valid entries"))
    raw = encode_correspondences(cs)
    out.append(("mvcr_roundtrip", encode_correspondences(decode_correspondences(raw)) == raw, f"{len(raw)} bytes"))
    out.append(("determinism", cs == again, "two builds are identical"))
    counts = [int(((rethreshold(cs, b).kind == SEMANTIC) & rethreshold(cs, b).valid).sum()) for b in BETA_SWEEP]
    mono = all(x >= y for x, y in zip(counts, counts[1:]))
    out.append(("beta_monotonicity", mono, f"semantic counts {counts} for beta {list(BETA_SWEEP)}"))
    return out


def run_checks(scene_dir, patch=8, beta=0.9, tol_px=1.0, tol_depth=0.05, seed=0):
    """Return a list of (name, passed, detail) tuples.

    ``tol_px`` is in latent tokens, as for correspondence building; the
    pixel-level checks use ``tol_px`` pixels directly.
    """
    scene = load_scene(scene_dir)
    rng = np.random.default_rng(seed)
    results = [
        ("mvdt_roundtrip", *_check_formats(scene)),
        ("depth_positive", *_check_depth(scene)),
        ("project_roundtrip", *_check_roundtrip(scene, rng)),
    ]
    results += _check_geometry(scene, tol_px, tol_depth)
    results += _check_correspondences(scene, patch, beta, tol_px, tol_depth)
    return results
