"""
Conditional noise-prediction network f(x_t, t | x0_co, E(x0)).

A stack of bidirectional dilated-convolution residual blocks with gated
activations, conditioned on the diffusion step (sinusoidal encoding + MLP)
and on a user embedding (dense broadcast + per-block 2C bias).

Per block i, with h the block input:
    y    = h + t_proj_i(temb)                (per-channel bias)
    z    = dil_conv_i(y) + user_proj_i(u)    (2C channels, dilation 2^(i mod m))
    g    = tanh(z[:C]) * sigmoid(z[C:])
    h'   = (h + res_conv_i(g)) / sqrt(2)
    skip += skip_conv_i(g)
Head: relu(skip / sqrt(n_layers)) -> 1x1 conv -> relu -> 1x1 conv -> (2, L)
"""

import math
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple

import numpy as np

from checkpoint_utils import dataclass_from_dict
from diffusion import ConditioningBundle, TIMESTEP_ENCODING_DIM, timestep_encoding
from errors import DataError, NumericalError
import nn_layers as nn


Params = Dict[str, np.ndarray]

SQRT2 = math.sqrt(2.0)
# step MLP width 512 at 64 residual channels, scaled linearly below that
REFERENCE_HIDDEN = 512
REFERENCE_CHANNELS = 64


@dataclass
class DenoiserConfig:
    n_layers: int = 6
    residual_channels: int = 16
    kernel_size: int = 3
    dilation_cycle_length: int = 10
    sequence_length: int = 1000
    embedding_dim: int = 32
    t_embed_hidden: Optional[int] = None  # None: 512 scaled by C / 64

    def __post_init__(self):
        if self.n_layers < 1 or self.residual_channels < 1 or self.dilation_cycle_length < 1:
            raise DataError(f"Invalid denoiser config: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise DataError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def hidden(self) -> int:
        if self.t_embed_hidden is not None:
            return self.t_embed_hidden
        return max(1, REFERENCE_HIDDEN * self.residual_channels // REFERENCE_CHANNELS)

    def dilation(self, layer: int) -> int:
        return 2 ** (layer % self.dilation_cycle_length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        return dataclass_from_dict(cls, data)


def receptive_field(config: DenoiserConfig) -> int:
    """Samples of x_t seen by one output sample."""
    return 1 + sum((config.kernel_size - 1) * config.dilation(i) for i in range(config.n_layers))


def param_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def param_shapes(config: DenoiserConfig) -> Dict[str, Tuple[Tuple[int, ...], int]]:
    """name -> (shape, fan_in)."""
    c, d, h, k = config.residual_channels, config.embedding_dim, config.hidden, config.kernel_size
    shapes = {
        "input_proj.w": ((c, 4, 1), 4),
        "input_proj.b": ((c,), 4),
        "t_mlp1.w": ((h, TIMESTEP_ENCODING_DIM), TIMESTEP_ENCODING_DIM),
        "t_mlp1.b": ((h,), TIMESTEP_ENCODING_DIM),
        "t_mlp2.w": ((h, h), h),
        "t_mlp2.b": ((h,), h),
        "user_dense.w": ((d, d), d),
        "user_dense.b": ((d,), d),
        "head1.w": ((c, c, 1), c),
        "head1.b": ((c,), c),
        "head2.w": ((2, c, 1), c),
        "head2.b": ((2,), c),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "t_proj.w"] = ((c, h), h)
        shapes[p + "t_proj.b"] = ((c,), h)
        shapes[p + "dil_conv.w"] = ((2 * c, c, k), c * k)
        shapes[p + "dil_conv.b"] = ((2 * c,), c * k)
        shapes[p + "user_proj.w"] = ((2 * c, d), d)
        shapes[p + "user_proj.b"] = ((2 * c,), d)
        shapes[p + "res_conv.w"] = ((c, c, 1), c)
        shapes[p + "res_conv.b"] = ((c,), c)
        shapes[p + "skip_conv.w"] = ((c, c, 1), c)
        shapes[p + "skip_conv.b"] = ((c,), c)
    return shapes


def init_params(config: DenoiserConfig, seed: int, dtype=np.float32) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights; the final head conv starts at zero."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, (shape, fan_in) in sorted(param_shapes(config).items()):
        if name.startswith("head2."):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = nn.init_uniform(rng, shape, fan_in, dtype)
    return params


def _check_inputs(config: DenoiserConfig, x_t: np.ndarray, t: np.ndarray, cond: ConditioningBundle):
    n = x_t.shape[0]
    expected = (n, 2, config.sequence_length)
    if x_t.shape != expected:
        raise DataError(f"x_t shape {x_t.shape} does not match {expected}")
    if cond.observation.shape != expected:
        raise DataError(f"Observation shape {cond.observation.shape} does not match {expected}")
    if cond.user_embedding.shape != (n, config.embedding_dim):
        raise DataError(f"Embedding shape {cond.user_embedding.shape} does not match {(n, config.embedding_dim)}")
    if t.shape != (n,):
        raise DataError(f"Expected one step index per item, got shape {t.shape}")


def forward(params: Params, config: DenoiserConfig, x_t: np.ndarray, t, cond: ConditioningBundle,
            return_cache: bool = False):
    """Predict eps_hat with shape (N, 2, L). Inputs are cast to the params dtype."""
    dtype = params["input_proj.w"].dtype
    cond = cond.batched()
    x_t = np.asarray(x_t, dtype=dtype)
    if x_t.ndim == 2:
        x_t = x_t[None]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
    cond = ConditioningBundle(cond.observation.astype(dtype, copy=False),
                              cond.user_embedding.astype(dtype, copy=False))
    _check_inputs(config, x_t, t, cond)

    cache = {}
    # diffusion-step embedding
    te = timestep_encoding(t).astype(dtype)
    a1, cache["t_mlp1"] = nn.dense_forward(te, params["t_mlp1.w"], params["t_mlp1.b"])
    s1, cache["t_silu1"] = nn.silu_forward(a1)
    a2, cache["t_mlp2"] = nn.dense_forward(s1, params["t_mlp2.w"], params["t_mlp2.b"])
    temb, cache["t_silu2"] = nn.silu_forward(a2)

    # user embedding broadcast (same dense map at every position)
    ue, cache["user_dense"] = nn.dense_forward(cond.user_embedding, params["user_dense.w"], params["user_dense.b"])

    h, cache["input_proj"] = nn.conv1d_forward(
        np.concatenate([x_t, cond.observation], axis=1), params["input_proj.w"], params["input_proj.b"]
    )

    skip = np.zeros_like(h)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        tb, cache[p + "t_proj"] = nn.dense_forward(temb, params[p + "t_proj.w"], params[p + "t_proj.b"])
        z, cache[p + "dil_conv"] = nn.conv1d_forward(
            h + tb[:, :, None], params[p + "dil_conv.w"], params[p + "dil_conv.b"], dilation=config.dilation(i)
        )
        ub, cache[p + "user_proj"] = nn.dense_forward(ue, params[p + "user_proj.w"], params[p + "user_proj.b"])
        g, cache[p + "gate"] = nn.gate_forward(z + ub[:, :, None])
        r, cache[p + "res_conv"] = nn.conv1d_forward(g, params[p + "res_conv.w"], params[p + "res_conv.b"])
        s, cache[p + "skip_conv"] = nn.conv1d_forward(g, params[p + "skip_conv.w"], params[p + "skip_conv.b"])
        h = (h + r) / SQRT2
        skip = skip + s

    o, cache["head_relu1"] = nn.relu_forward(skip / math.sqrt(config.n_layers))
    o, cache["head1"] = nn.conv1d_forward(o, params["head1.w"], params["head1.b"])
    o, cache["head_relu2"] = nn.relu_forward(o)
    eps_hat, cache["head2"] = nn.conv1d_forward(o, params["head2.w"], params["head2.b"])

    if return_cache:
        return eps_hat, cache
    return eps_hat


def backward(params: Params, config: DenoiserConfig, cache: dict, d_eps_hat: np.ndarray) -> Params:
    """Exact gradients of sum(d_eps_hat * eps_hat) wrt every parameter."""
    grads: Params = {}

    do, grads["head2.w"], grads["head2.b"] = nn.conv1d_backward(d_eps_hat, cache["head2"])
    do = nn.relu_backward(do, cache["head_relu2"])
    do, grads["head1.w"], grads["head1.b"] = nn.conv1d_backward(do, cache["head1"])
    dskip = nn.relu_backward(do, cache["head_relu1"]) / math.sqrt(config.n_layers)

    dh = np.zeros_like(dskip)  # the last block output feeds nothing
    dtemb = None
    due = None
    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        dh_in = dh / SQRT2
        dg, grads[p + "skip_conv.w"], grads[p + "skip_conv.b"] = nn.conv1d_backward(dskip, cache[p + "skip_conv"])
        dg_res, grads[p + "res_conv.w"], grads[p + "res_conv.b"] = nn.conv1d_backward(dh_in, cache[p + "res_conv"])
        dz = nn.gate_backward(dg + dg_res, cache[p + "gate"])

        dub = dz.sum(axis=2)
        d_ue, grads[p + "user_proj.w"], grads[p + "user_proj.b"] = nn.dense_backward(dub, cache[p + "user_proj"])
        due = d_ue if due is None else due + d_ue

        dy, grads[p + "dil_conv.w"], grads[p + "dil_conv.b"] = nn.conv1d_backward(dz, cache[p + "dil_conv"])
        dtb = dy.sum(axis=2)
        d_temb, grads[p + "t_proj.w"], grads[p + "t_proj.b"] = nn.dense_backward(dtb, cache[p + "t_proj"])
        dtemb = d_temb if dtemb is None else dtemb + d_temb

        dh = dh_in + dy

    _, grads["input_proj.w"], grads["input_proj.b"] = nn.conv1d_backward(dh, cache["input_proj"], need_dx=False)
    _, grads["user_dense.w"], grads["user_dense.b"] = nn.dense_backward(due, cache["user_dense"])

    da2 = nn.silu_backward(dtemb, cache["t_silu2"])
    ds1, grads["t_mlp2.w"], grads["t_mlp2.b"] = nn.dense_backward(da2, cache["t_mlp2"])
    da1 = nn.silu_backward(ds1, cache["t_silu1"])
    _, grads["t_mlp1.w"], grads["t_mlp1.b"] = nn.dense_backward(da1, cache["t_mlp1"])

    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise DataError(f"Gradient for {name} has shape {grad.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("denoiser.backward", f"gradient of {name}")
    return grads


def relu_pattern(cache: dict) -> np.ndarray:
    """Concatenated ReLU masks; two evaluations on the same side of every kink share it."""
    return np.concatenate([cache["head_relu1"].ravel(), cache["head_relu2"].ravel()])


class Denoiser:
    """Binds params and config into the callable the sampling loop expects."""

    def __init__(self, params: Params, config: DenoiserConfig):
        self.params = params
        self.config = config

    def __call__(self, x_t: np.ndarray, t: np.ndarray, cond: ConditioningBundle) -> np.ndarray:
        return forward(self.params, self.config, x_t, t, cond)
