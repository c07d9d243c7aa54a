"""opstrack: object-preserving Siamese tracking on 3-D point clouds.

Pure-numpy pipeline with numba-accelerated geometric kernels: a Siamese
set-abstraction backbone, template/search cross-correlation with per-seed
objectness scores, score-guided candidate sampling, and bird's-eye-view box
localization, plus training, one-pass evaluation, and sampler comparisons.
"""

from .autodiff import Tensor, no_grad
from .backbone import (Backbone, BackboneConfig, SeedSet, ball_query,
                       furthest_point_sampling)
from .data import (CropConfig, SynthConfig, Tracklet, build_search_area,
                   build_template, generate_synthetic, jitter_box,
                   load_kitti_tracklet, load_tracklet, save_tracklet)
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     DivergenceError, EmptyRegionError, InvalidArgumentError,
                     OpsTrackError)
from .geometry import (BBox3D, PointCloud, TrackResult, box_in_frame,
                       box_to_world, canonicalize, center_distance, iou3d,
                       ope_metrics, points_in_box)
from .highlight import HighlightedSeeds, ObjectHighlighter
from .localization import (BevConfig, BevGrid, LossBreakdown, LossWeights,
                           decode_box, make_center_map, voxelize)
from .nn import (Adam, CrossAttentionBlock, GradCheckReport, MlpBlock, Module,
                 OptimConfig, grad_check, load_checkpoint, save_checkpoint)
from .sampling import (HighlightLabels, baseline_sample, focal_loss, make_labels,
                       recall_rate, select_candidates)
from .tracker import (CompareReport, EvalReport, SamplingConfig, TrackNet,
                      TrackerConfig, TrainReport, compare_sampling, config_from_dict,
                      config_hash, config_to_dict, evaluate, run_tracklet,
                      track_frame, train)

__version__ = "0.1.0"
