"""Parameterised building blocks shared by the network stages."""
from __future__ import annotations

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor


def linear(params: ParameterStore, path: str, x: Tensor, d_in: int, d_out: int, bias: bool = True) -> Tensor:
    W = params.get_or_create(f"{path}/weight", (d_in, d_out))
    y = T.matmul(x, W)
    if bias:
        y = T.add(y, params.get_or_create(f"{path}/bias", (d_out,), "zeros"))
    return y


def mlp2(params: ParameterStore, path: str, x: Tensor, d_in: int, d_hidden: int, d_out: int, final_relu: bool = True) -> Tensor:
    h = T.relu(linear(params, f"{path}/fc1", x, d_in, d_hidden))
    y = linear(params, f"{path}/fc2", h, d_hidden, d_out)
    return T.relu(y) if final_relu else y


def layer_norm(params: ParameterStore, path: str, x: Tensor, d: int) -> Tensor:
    gamma = params.get_or_create(f"{path}/gamma", (d,), "ones")
    beta = params.get_or_create(f"{path}/beta", (d,), "zeros")
    return T.layer_norm(x, gamma, beta)
