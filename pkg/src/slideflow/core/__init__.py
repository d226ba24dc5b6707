from .autodiff import Tensor, backward, const, param
from .linalg import PCA2D, pca_2d, pca_2d_batch, softmax_over_groups
from .nn import init_mlp, kaiming_uniform, mlp_forward
from .optim import AdamState, adam_step, clip_grad_norm, global_norm

__all__ = [
    "Tensor",
    "backward",
    "const",
    "param",
    "PCA2D",
    "pca_2d",
    "pca_2d_batch",
    "softmax_over_groups",
    "init_mlp",
    "kaiming_uniform",
    "mlp_forward",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
    "global_norm",
]
