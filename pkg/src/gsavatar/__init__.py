"""Canonical Gaussian avatar reconstruction from inconsistent views, plus animation."""

from .core import (Camera, GaussianCloud, covariance_from_scale_rotation,
                   gaussian_normal, sh_to_color)
from .errors import (ContractError, FormatError, GsAvatarError,
                     InvalidParameterError, InvalidStateError)
from .ply import ply_export, ply_import
from .render import (CloudGradients, RenderOutput, RenderSettings,
                     project_gaussian, render, render_backward, render_reference)

__all__ = [
    "Camera", "GaussianCloud", "covariance_from_scale_rotation", "gaussian_normal",
    "sh_to_color", "ply_export", "ply_import", "CloudGradients", "RenderOutput",
    "RenderSettings", "project_gaussian", "render", "render_backward",
    "render_reference", "GsAvatarError", "InvalidParameterError",
    "InvalidStateError", "ContractError", "FormatError",
]
