from .core import (
    ConfigError,
    GraphError,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concat,
    conv2d,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    pixel_shuffle,
    pixel_unshuffle,
    power,
    reshape,
    roll,
    sigmoid,
    softmax,
    softplus,
    sub,
    tabs,
    take,
    tmax,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
