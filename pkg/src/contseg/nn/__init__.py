from .kernels import KERNEL_KINDS, KernelKind, KernelSpec, kernel_param_count
from .layers import (
    BackwardError,
    BatchNorm3d,
    Conv3d,
    FrozenParameterError,
    InstanceNorm3d,
    Layer,
    LeakyReLU,
    MaxPool3d,
    Module,
    NearestUpsample,
    ReLU,
    Sequential,
    SoftmaxOverChannels,
    softmax,
)
from .optim import SGD, poly_lr, sgd_update
from .tensor import DivergenceError, checksum, load_tensor, save_tensor
