"""Fit a parametric articulated body to 2D keypoints and a silhouette."""

from .camera import Camera, project
from .energy import Keypoint, Observation, TermWeights, total_energy
from .errors import (BehindCameraError, DegenerateInputError, DegenerateMaskError, EmptyMaskError,
                     InvalidArgument, NumericalFailure)
from .field import AdfField, asymmetric_field, distance_transform
from .metrics import MetricReport, evaluate_fit, pa_v2v, pve_t_sc
from .model import (BodyModel, BodyParams, VirtualJoint, VirtualJointConfig, build_template_model,
                    default_virtual_joints, forward, virtual_joints)
from .optim import FitConfig, FitReport, StageConfig, default_config, fit_staged, lbfgs_minimize
from .raster import Silhouette, boundary, rasterize_hard, rasterize_soft
from .synth import NoiseSpec, Scene, generate_scene

__version__ = "0.1.0"
