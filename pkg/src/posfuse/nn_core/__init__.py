from .adam import AdamState, adam_step
from .losses import LOSS_OUTPUTS, evaluate_loss, mse_loss, mtl_loss, nll_loss, shared_loss_and_grads, task_loss
from .mcd import VARIANCE_FLOOR, Prediction, mcd_passes, mcd_predict, mcd_predict_batch, population_variance, summarise_passes
from .modelfile import ModelFile
from .network import MLP, Head, Trunk, flatten_input, forward

__all__ = [
    "LOSS_OUTPUTS",
    "MLP",
    "VARIANCE_FLOOR",
    "AdamState",
    "Head",
    "ModelFile",
    "Prediction",
    "Trunk",
    "adam_step",
    "evaluate_loss",
    "flatten_input",
    "forward",
    "mcd_passes",
    "mcd_predict",
    "mcd_predict_batch",
    "mse_loss",
    "mtl_loss",
    "nll_loss",
    "population_variance",
    "shared_loss_and_grads",
    "summarise_passes",
    "task_loss",
]
