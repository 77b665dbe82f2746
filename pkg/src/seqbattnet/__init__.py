"""Physics-informed discharge-voltage model: HRM-GRU encoder plus a discrete ECM decoder."""
from .decoder import BatteryConfig, PredictionResult
from .encoder import HrmConfig
from .model import SeqBattNet
from .objective import LossConfig
from .trainer import Checkpoint, TrainConfig, evaluate, train

__all__ = ["BatteryConfig", "Checkpoint", "HrmConfig", "LossConfig", "PredictionResult",
           "SeqBattNet", "TrainConfig", "evaluate", "train"]
__version__ = "0.1.0"
