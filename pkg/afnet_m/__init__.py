"""
afnet_m: mask-guided attention and adaptive fusion of 2D texture and 3D depth features for
facial expression recognition, on a small numpy autodiff engine.
"""
__version__ = "0.1.0"

from .config import EXPRESSIONS, FusionStrategy, ModelConfig, TrainConfig, load_config
from .errors import AFNetError
from .model import AFNetM, count_params
