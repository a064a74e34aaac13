"""Learned fabrication-deviation prediction and correction for binary layouts."""

__version__ = "0.1.0"

from .correct import InferenceParams, binarize, correct_layout, infer_full, uncertainty_mask
from .fabsim import FabParams, fabricate, fabricate_field, gaussian_kernel
from .kernels import BACKEND
from .metrics import diff_map, error_pixels, evaluate_bce, reduction_factor
from .neural import ModelWeights, init_weights, load_weights, save_weights
from .patterns import PatternSpec, generate_corpus, generate_pattern
from .raster import read_pgm, rasterize, slice_patches, stitch, write_pgm
from .training import (Dataset, Ensemble, TrainConfig, build_dataset, train_ensemble,
                       train_forward, train_inverse_independent, train_inverse_tandem)
