"""Two-stage selective editing: independent per-view edits, reference choice, joint edit.

Stage one edits every view on its own (DDIM inversion with a null
conditioning, then sampling with the edit conditioning) and keeps the
sampling-time attention features. Stage two re-runs all views together: each
attention layer becomes reference attention against the chosen view's
recorded features, followed by correspondence-constrained attention across
views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import cca, reference_attention, self_attention
from .correspondence import (
    DEFAULT_BETA, DEFAULT_PATCH, DEFAULT_TOL_TOKENS, GEOMETRIC, SELF, AttentionMask, CorrespondenceSet,
    build_correspondences,
)
from .diffusion import FeatureRecord, Schedule, ddim_invert, ddim_sample, make_schedule
from .errors import PipelineError, ScoreError, SelectionError, ShapeError
from .geometry import DEFAULT_TOL_DEPTH

DEFAULT_LAMBDA = 0.3
HIGH_VARIABILITY_LAMBDA = 0.5
DEFAULT_VIEWS = 20


@dataclass
class EditSession:
    batch: object
    latents: Sequence[np.ndarray]
    schedule: Schedule = field(default_factory=make_schedule)
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    patch: int = DEFAULT_PATCH
    tol_px: float = DEFAULT_TOL_TOKENS
    tol_depth: float = DEFAULT_TOL_DEPTH
    reference_index: Optional[int] = None
    records: Optional[list] = None
    corr: Optional[tuple] = None
    # Literal (projection-free) correspondence attention by default; see README.
    cca_projections: bool = False
    cca_in_inversion: bool = True

    def __post_init__(self):
        self.latents = [np.asarray(z, dtype=np.float64) for z in self.latents]
        if not self.latents:
            raise ShapeError("an edit session needs at least one view")
        shape = self.latents[0].shape
        if any(z.shape != shape for z in self.latents):
            raise ShapeError("all latents must share one shape")
        if self.batch is not None and self.batch.n_views != len(self.latents):
            raise ShapeError("latent count differs from the batch view count")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.reference_index is not None and not 0 <= self.reference_index < self.n_views:
            raise SelectionError(f"reference index {self.reference_index} out of range")
        if self.corr is not None:
            self._check_corr(self.corr[0])

    @property
    def n_views(self) -> int:
        return len(self.latents)

    def _check_corr(self, cs: CorrespondenceSet):
        h, w, _ = self.latents[0].shape
        if (cs.n_views, cs.grid_h, cs.grid_w) != (self.n_views, h, w):
            raise ShapeError("correspondence set does not match the latent grid")


def null_condition(dim: int) -> np.ndarray:
    return np.zeros(dim)


def per_view_edit(session: EditSession, pred, cond):
    """Edit every view independently; returns (candidates, sampling records)."""
    candidates, records = [], []
    null = null_condition(session.latents[0].shape[-1])
    for z in session.latents:
        z_t, _ = ddim_invert(z, session.schedule, pred, null)
        rec = FeatureRecord()
        candidates.append(ddim_sample(z_t, session.schedule, pred, cond, record=rec))
        records.append(rec)
    return candidates, records


def read_scores(path) -> dict:
    """Parse a score file with one ``view_index score`` pair per line."""
    scores = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise SelectionError(f"{path}:{lineno}: expected 'view_index score'")
        try:
            scores[int(parts[0])] = float(parts[1])
        except ValueError:
            raise SelectionError(f"{path}:{lineno}: cannot parse {line!r}") from None
    return scores


def select_reference(candidates, index: Optional[int] = None, scores=None) -> int:
    """Pick the reference view by explicit index or by highest score.

    ``scores`` may be a sequence (one per view) or a mapping view -> score.
    Ties go to the lowest view index.
    """
    n = len(candidates)
    if (index is None) == (scores is None):
        raise SelectionError("give exactly one of a manual index or a score table")
    if index is not None:
        if not 0 <= index < n:
            raise SelectionError(f"reference index {index} outside [0, {n})")
        return int(index)
    table = dict(scores) if isinstance(scores, dict) else dict(enumerate(scores))
    missing = [i for i in range(n) if i not in table]
    if missing or len(table) != n:
        raise SelectionError(f"need exactly one score per view; missing {missing}")
    vals = np.array([table[i] for i in range(n)], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise SelectionError("scores must be finite")
    return int(np.argmax(vals))


def semantic_features(session: EditSession, pred) -> list:
    """Last-layer features recorded during the first inversion step of each view."""
    sched = session.schedule
    first = Schedule(sched.alphas_cumprod[:2], sched.timesteps[:2])
    last = pred.n_layers - 1
    null = null_condition(session.latents[0].shape[-1])
    feats = []
    for z in session.latents:
        _, rec = ddim_invert(z, first, pred, null, fixed_point_iters=0)
        if (0, last) not in rec:
            raise PipelineError("predictor records no last-layer features")
        feats.append(rec[(0, last)])
    return feats


def ensure_correspondences(session: EditSession, pred, features=None):
    if session.corr is None:
        if session.batch is None:
            raise PipelineError("no correspondences and no geometry to build them from")
        feats = features if features is not None else semantic_features(session, pred)
        session.corr = build_correspondences(
            session.batch, feats, session.patch, session.beta, session.tol_px, session.tol_depth
        )
    session._check_corr(session.corr[0])
    return session.corr


def joint_edit(session: EditSession, pred, cond):
    """Jointly edit all views with reference and correspondence-constrained attention."""
    if session.reference_index is None:
        raise PipelineError("joint_edit needs a reference_index")
    if session.records is None:
        raise PipelineError("joint_edit needs the per-view records from per_view_edit")
    cs, mask = ensure_correspondences(session, pred)
    ref = session.records[session.reference_index]
    reuse = session.cca_projections

    def invert_hook(step, layer, f, w):
        return cca(self_attention(f, w), cs, mask, w, reuse)

    def sample_hook(step, layer, f, w):
        try:
            f_ref = ref[(step, layer)]
        except KeyError:
            raise PipelineError(f"reference record lacks step {step}, layer {layer}") from None
        z = np.stack([reference_attention(fi, f_ref, w, session.lam) for fi in f])
        return cca(z, cs, mask, w, reuse)

    x = np.stack(session.latents)
    null = null_condition(x.shape[-1])
    z_t, _ = ddim_invert(x, session.schedule, pred, null, hook=invert_hook if session.cca_in_inversion else None)
    out = ddim_sample(z_t, session.schedule, pred, cond, hook=sample_hook)
    return list(out)


def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    denom = na * nb
    return np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)


def geometric_pairs(cs: CorrespondenceSet):
    """Index arrays (s, y, x, a, ty, tx) of every valid geometric entry."""
    s, y, x, a = np.nonzero(cs.valid & (cs.kind == GEOMETRIC))
    return s, y, x, a, cs.ty[s, y, x, a], cs.tx[s, y, x, a]


def consistency_score(grids, cs: CorrespondenceSet) -> float:
    """1 - mean cosine similarity over valid geometric correspondences (lower is better)."""
    g = np.asarray(np.stack(list(grids)), dtype=np.float64)
    if g.shape[:3] != (cs.n_views, cs.grid_h, cs.grid_w):
        raise ShapeError("grids do not match the correspondence set")
    s, y, x, a, ty, tx = geometric_pairs(cs)
    if s.size == 0:
        raise ScoreError("no valid geometric correspondences to score")
    return float(1.0 - np.mean(_cosine(g[s, y, x], g[a, ty, tx])))


def correspondence_variance(grids, cs: CorrespondenceSet) -> float:
    """Mean cross-view variance of features over groups of geometric correspondences.

    Each source token forms a group with its valid geometric partners; the
    group's variance is the summed per-channel variance of its vectors.
    """
    g = np.asarray(np.stack(list(grids)), dtype=np.float64)
    geo = cs.valid & ((cs.kind == GEOMETRIC) | (cs.kind == SELF))
    sizes = geo.sum(axis=-1)
    keep = sizes > 1
    if not np.any(keep):
        raise ScoreError("no correspondence groups with more than one member")
    vals = g[cs.views(), cs.ty, cs.tx]  # (N, h, w, N, d)
    wts = geo[..., None].astype(np.float64)
    mean = (vals * wts).sum(axis=3) / np.maximum(sizes, 1)[..., None]
    var = (((vals - mean[:, :, :, None]) ** 2) * wts).sum(axis=(3, 4)) / np.maximum(sizes, 1)
    return float(var[keep].mean())
