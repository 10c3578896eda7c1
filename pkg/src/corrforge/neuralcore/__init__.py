"""A small differentiable core: the layers, losses and optimiser the patch network needs."""

from .gradcheck import check_layer, probe_gradients, rel_error
from .layers import (
    INFER,
    TRAIN,
    AvgPool2,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GradientReversal,
    Layer,
    LayerError,
    Softplus,
    Tensor,
    layer_backward,
    layer_forward,
)
from .losses import CORRESPONDING, NONCORRESPONDING, bce_loss, contrastive_batch, contrastive_loss
from .network import (
    SGD,
    ArchError,
    Sequential,
    WeightFile,
    build,
    domain_head_arch,
    init_params,
    load_weights,
    save_weights,
    sgd_step,
    siamese_arch,
)
from .siamese import adversarial_step, embed, siamese_step

__all__ = [
    "INFER", "TRAIN", "SGD", "ArchError", "AvgPool2", "BatchNorm", "CORRESPONDING", "Conv2D", "Dense",
    "Dropout", "Flatten", "GradientReversal", "Layer", "LayerError", "NONCORRESPONDING", "Sequential",
    "Softplus", "Tensor", "WeightFile", "adversarial_step", "bce_loss", "build", "check_layer",
    "contrastive_batch", "contrastive_loss", "domain_head_arch", "embed", "init_params", "layer_backward",
    "layer_forward", "load_weights", "probe_gradients", "rel_error", "save_weights", "sgd_step",
    "siamese_arch", "siamese_step",
]
