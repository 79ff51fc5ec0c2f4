from .params import ParameterSet, GradientSet, save_params, load_params, is_trainable
from .unet import UNet, UNetConfig, init_params, unet_forward, unet_backward

__all__ = [
    "ParameterSet",
    "GradientSet",
    "save_params",
    "load_params",
    "is_trainable",
    "UNet",
    "UNetConfig",
    "init_params",
    "unet_forward",
    "unet_backward",
]
