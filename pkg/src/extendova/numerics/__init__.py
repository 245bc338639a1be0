from .rng import Rng
from .tensor import (
    Tensor,
    as_tensor,
    add,
    mul,
    matmul,
    relu,
    log,
    sqrt,
    sigmoid,
    logsigmoid,
    softmax_rows,
    log_softmax_rows,
    l2norm_rows,
    take_rows,
    take_cols,
    take_per_row,
    sum_all,
    sum_axis,
    mean_all,
    batchnorm_train,
)
from .stats import softmax, kl_divergence, cosine_similarity, gaussian_sample
from .gradcheck import grad_check, grad_check_many
from .optim import Adam
