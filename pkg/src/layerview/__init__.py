"""Layered novel-view synthesis from sparse camera rigs.

Pipeline: build a plane-sweep volume by inverse-homography warping the
input views onto depth planes of the target camera, process consecutive
plane groups independently with a shared-weight U-Net, assemble the head
outputs into a (super-sampled) multiplane image, and render novel views
with the over operator.
"""

from .backbone import UNetConfig, WeightStore, init_weights, load_weights, save_weights, unet_forward, run_groups
from .geometry import CameraModel, Homography, WarpGrid, plane_homography, sample_bilinear, warp_grid
from .mpi import (MultiplaneImage, NetHeadOutput, assemble_mpi, composite,
                  composite_depth, composite_disparity, load_mpi, predict_mpi,
                  save_mpi, warp_mpi)
from .psv import DepthSchedule, GroupedPsv, PlaneSweepVolume, build_psv, group, make_schedule, ungroup
from .scenes_io import SceneBundle, SyntheticScene, generate_scene_family, load_scene_dir, raytrace, save_scene_dir
from .tensor import GradTape, Tensor, conv2d, relu, softmax, upsample2x
from .training import Lion, LossConfig, TrainConfig, loss, sample_patch, ssim, train_toy

__version__ = "0.1.0"
