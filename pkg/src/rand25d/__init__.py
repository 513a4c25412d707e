"""Random 2.5D U-net for sparse volumetric binary segmentation."""
from .metrics import MetricsReport, dice_loss, evaluate, joint_loss
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .pipeline import Model25D, build_model25d, forward_path1, forward_path2, predict
from .training import TrainConfig, cross_validate, train, train_slice_baseline
from .unet import UNetConfig, build_unet

__all__ = [
    "MetricsReport", "dice_loss", "evaluate", "joint_loss",
    "PhantomSpec", "generate_dataset", "generate_phantom",
    "Model25D", "build_model25d", "forward_path1", "forward_path2", "predict",
    "TrainConfig", "cross_validate", "train", "train_slice_baseline",
    "UNetConfig", "build_unet",
]
__version__ = "0.1.0"
