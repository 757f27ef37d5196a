"""anomflow: image-level anomaly detection scored by a normalizing flow.

A small attention-gated CNN turns an image into a multi-scale feature
vector, an affine-coupling flow maps features to a latent space, and the
negative log-likelihood there is the anomaly score.  Includes AUROC
evaluation, result tables, Grad-CAM attribution and a synthetic benchmark.
"""

import os as _os

# ADF_THREADS caps the BLAS thread pool; must be set before numpy loads.
_threads = _os.environ.get("ADF_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .attribution import Heatmap, grad_cam, write_heatmap_overlay
from .backbone import Backbone, BackboneSpec, StageSpec, build_backbone, \
    default_spec, export_weights, extract_features, import_weights
from .datapipe import DatasetLayout, Sample, decode_image, encode_ppm, \
    load_dataset, read_tensor, synth_dataset, write_tensor
from .errors import AnomflowError, ConfigError, DimensionError, FormatError, \
    InputError, LayoutError, NumericError
from .evalkit import EvalReport, ScoredSet, auroc, evaluate, render_report, \
    select_threshold
from .flow import FlowConfig, FlowModel, FlowOutput, build_flow, \
    flow_forward, flow_inverse, nll, nll_gradient
from .kernels import ConvSpec, conv2d, dense, elementwise, global_avg_pool, \
    max_pool
from .trainer import Checkpoint, ScoringConfig, TrainConfig, anomaly_score, \
    augment, train

__version__ = "0.1.0"
