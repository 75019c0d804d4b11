"""Multi-view correspondence, correspondence-constrained attention and DDIM editing."""

from . import _kernels
from .attention import AttentionWeights, cca, reference_attention, self_attention
from .correspondence import (
    GEOMETRIC, SELF, SEMANTIC, AttentionMask, CorrespondenceSet, build_correspondences,
    deserialize_correspondences, rethreshold, semantic_match, serialize_correspondences,
)
from .diffusion import (
    ConstantPredictor, LinearPredictor, MixerPredictor, ZeroPredictor, ddim_invert, ddim_sample,
    make_schedule, toy_predictor,
)
from .errors import MVCorrError
from .geometry import CameraParams, back_project, geometric_match, look_at, project
from .io import MultiViewBatch, Raster, read_array, read_grid, write_array, write_grid
from .pipeline import (
    EditSession, consistency_score, correspondence_variance, joint_edit, per_view_edit, select_reference,
)
from .synthetic import SceneSpec, generate, load_scene

__version__ = "0.1.0"


def backend() -> str:
    """Name of the kernel backend currently in use ("native" or "python")."""
    return _kernels.BACKEND
