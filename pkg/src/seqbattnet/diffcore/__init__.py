from .tensor import (
    GradMap,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    huber,
    no_grad,
    stack,
)
from .nn import (
    ConfigError,
    FnnParams,
    GruParams,
    activation,
    affine,
    dropout,
    fnn_forward,
    gru_cell,
    layer_norm,
    make_rng,
    ocv_network,
    resistance_network,
    softmax,
)
from .gradcheck import check_gradients, numeric_grad, rel_error
