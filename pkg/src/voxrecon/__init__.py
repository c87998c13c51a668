"""Reconstruct images from voxel responses through sparse feature decoders.

Submodules
----------
convnet
    Layered network with forward pass, input gradients and the CAVW weight format.
sparse
    ROMP and L1-ADMM solvers for one feature's sparse regression.
decoder
    Per-layer decoders, accuracy, significant voxels, area trends, CAVD models.
inversion
    Image reconstruction from a target feature vector by momentum descent.
metrics
    Pearson r, t-tests, CW-SSIM and the permutation chance baseline.
synth
    Seeded stimuli, planted voxel encodings and visual-area maps.
cli
    The ``simulate / features / train / invert / evaluate`` pipeline.
"""
from . import convnet, decoder, inversion, metrics, sparse, synth
from .convnet import build_network, extract_features
from .decoder import DecoderModel, evaluate_accuracy, train_layer_decoder
from .inversion import InversionConfig, invert
from .metrics import cwssim, pearson
from .sparse import SolverConfig, solve
from .synth import TruthConfig, generate_stimuli, simulate_voxels

__version__ = "0.1.0"

__all__ = [
    "convnet", "decoder", "inversion", "metrics", "sparse", "synth",
    "build_network", "extract_features", "DecoderModel", "evaluate_accuracy", "train_layer_decoder",
    "InversionConfig", "invert", "cwssim", "pearson", "SolverConfig", "solve",
    "TruthConfig", "generate_stimuli", "simulate_voxels",
]
