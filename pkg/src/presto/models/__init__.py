from .denoiser import EdmDenoiser, Prediction
from .dit import DitConfig, DitModel, DitOutput, dit_forward, randomize
from .gmm import GmmDenoiser, GmmOracle, gmm_denoise
from .probe import ActivationProfile, variance_profile

__all__ = [
    "DitConfig", "DitModel", "DitOutput", "dit_forward", "randomize",
    "EdmDenoiser", "Prediction", "GmmOracle", "GmmDenoiser", "gmm_denoise",
    "ActivationProfile", "variance_profile",
]
