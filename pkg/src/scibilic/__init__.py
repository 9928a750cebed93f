"""Bayesian U-Net image translation with MC-dropout uncertainty for unsupervised anomaly segmentation."""

from .inference import McConfig, PredictiveOutput, mc_predict, scibilic_map, segmented_inference
from .phantom import PhantomSpec, build_dataset, generate_phantom_pair
from .rng import RngStream
from .trainer import TrainConfig, heteroscedastic_loss, train
from .unet import ForwardMode, UNetConfig, build_model, forward

__version__ = "0.1.0"
