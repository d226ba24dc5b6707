"""Whole-slide flow matching for spatial gene-expression prediction."""

from .data_io import SlideData, SynthConfig, load_slide, save_slide, synth_slide
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .estimator import SlideFlowRegressor
from .evaluation import EvalReport, evaluate, independent_baseline, pearson
from .flow import FlowConfig, TrainReport, fit, interpolate, sample
from .priors import Gaussian, ZinbParams, Zero

__all__ = [
    "Denoiser",
    "DenoiserConfig",
    "EvalReport",
    "FlowConfig",
    "Gaussian",
    "SlideData",
    "SlideFlowRegressor",
    "SynthConfig",
    "TrainReport",
    "Zero",
    "ZinbParams",
    "evaluate",
    "fit",
    "independent_baseline",
    "interpolate",
    "load_checkpoint",
    "load_slide",
    "pearson",
    "sample",
    "save_checkpoint",
    "save_slide",
    "synth_slide",
]

__version__ = "0.1.0"
