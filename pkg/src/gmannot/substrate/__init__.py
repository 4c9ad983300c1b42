"""Differentiation substrate: parameter containers, op kernels, autodiff
entry points, the SGD optimizer, and checkpoint I/O.
"""

from .diff import (
    GradCheckReport,
    check_all_kernels,
    check_gradients,
    fd_directional,
    fd_gradient,
    grad,
    jvp,
    jvp_with_primal,
    max_rel_err,
    value_and_grad,
)
from .kernels import (
    KernelCase,
    add,
    avgpool2x,
    conv2d_same,
    gather_classes,
    kernel_registry,
    log_softmax_channels,
    matmul,
    mean_all,
    mul,
    register_kernel,
    relu,
    sum_all,
    upsample2x,
)
from .optim import sgd_step
from .params import (
    CheckpointError,
    GradientBundle,
    LayerSpec,
    OptState,
    ParamSet,
    SubstrateError,
    dtype_name,
    he_uniform,
    init_layer,
    init_params,
    load_checkpoint,
    named_seed,
    save_checkpoint,
    stable_hash,
    torch_dtype,
)

__all__ = [name for name in dir() if not name.startswith("_")]
