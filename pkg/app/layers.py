from typing import Dict, Optional

import numpy as np

from app.exception import ConfigValidationError
from app.functional import affine, batch_norm, conv2d, conv_output_size
from app.tensor import Tensor


class ConvBlock:
    """Convolution weights [C_out, C_in, k, k] with bias, stride and padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: Optional[int] = None):
        errors = []
        if kernel % 2 == 0 or kernel < 1:
            errors.append({"field": "kernel", "message": f"kernel size must be odd and positive, got {kernel}"})
        if stride < 1:
            errors.append({"field": "stride", "message": f"stride must be positive, got {stride}"})
        if padding is not None and padding < 0:
            errors.append({"field": "padding", "message": f"padding must be non-negative, got {padding}"})
        if errors:
            raise ConfigValidationError(errors)
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weights = Tensor.zeros((c_out, c_in, kernel, kernel), requires_grad=True)
        self.bias = Tensor.zeros((c_out,), requires_grad=True)

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    def output_size(self, height: int, width: int):
        return (conv_output_size(height, self.kernel, self.stride, self.padding),
                conv_output_size(width, self.kernel, self.stride, self.padding))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weights, self.bias, self.stride, self.padding)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weight": self.weights, f"{prefix}.bias": self.bias}


class BatchNorm:
    """Learned scale/shift plus running statistics, shared by every row of a batch."""

    def __init__(self, channels: int):
        self.gamma = Tensor.ones((channels,), requires_grad=True)
        self.beta = Tensor.zeros((channels,), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=training, update_stats=update_stats)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


class Affine:
    def __init__(self, d_in: int, d_out: int):
        self.weights = Tensor.zeros((d_in, d_out), requires_grad=True)
        self.bias = Tensor.zeros((d_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weights, self.bias)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weight": self.weights, f"{prefix}.bias": self.bias}
