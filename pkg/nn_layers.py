"""
Forward/backward primitives for the numpy networks.

Every *_forward returns (out, cache); the matching *_backward takes the
upstream gradient and the cache. Tensors are channels-first:
sequences are (N, C, L), vectors (N, D).

conv1d:
- x: (N, C_in, L), w: (C_out, C_in, K), b: (C_out,)
- out[n, o, l] = b[o] + sum_{c,k} w[o, c, k] * xpad[n, c, l*stride + k*dilation]
- zero padding; the default padding keeps L unchanged for stride 1

Forward products run one batch item at a time, so an item's output is
bitwise independent of the rest of the batch.
"""

from typing import Dict, Optional, Tuple

import numpy as np


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_output_length(length: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1,
                   stride: int = 1, padding: Optional[int] = None):
    n, c_in, length = x.shape
    c_out, _, kernel = w.shape
    if padding is None:
        padding = dilation * (kernel - 1) // 2
    l_out = conv_output_length(length, kernel, stride, dilation, padding)

    xpad = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    span = stride * (l_out - 1) + 1
    cols = np.stack(
        [xpad[:, :, k * dilation: k * dilation + span: stride] for k in range(kernel)], axis=-1
    )  # (N, C_in, L_out, K)

    out = np.stack([np.tensordot(c, w, axes=([0, 2], [1, 2])) for c in cols])  # (N, L_out, C_out)
    out = out.transpose(0, 2, 1) + b[None, :, None]
    cache = (cols, w, xpad.shape, dilation, stride, padding, length)
    return out, cache


def conv1d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    cols, w, pad_shape, dilation, stride, padding, length = cache
    kernel = w.shape[2]
    l_out = dout.shape[2]

    dw = np.tensordot(dout, cols, axes=([0, 2], [0, 2]))  # (C_out, C_in, K)
    db = dout.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db

    dcols = np.tensordot(dout, w, axes=([1], [0]))  # (N, L_out, C_in, K)
    dxpad = np.zeros(pad_shape, dtype=dout.dtype)
    span = stride * (l_out - 1) + 1
    for k in range(kernel):
        dxpad[:, :, k * dilation: k * dilation + span: stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    dx = dxpad[:, :, padding: padding + length]
    return dx, dw, db


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (N, D_in), w: (D_out, D_in), b: (D_out,)."""
    out = np.stack([w @ row for row in x]) if len(x) else np.zeros((0, w.shape[0]), dtype=x.dtype)
    return out + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_forward(x: np.ndarray):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def gate_forward(z: np.ndarray):
    """Split channels in half: tanh(a) * sigmoid(b)."""
    half = z.shape[1] // 2
    ta = np.tanh(z[:, :half])
    sb = sigmoid(z[:, half:])
    return ta * sb, (ta, sb)


def gate_backward(dout: np.ndarray, cache) -> np.ndarray:
    ta, sb = cache
    da = dout * sb * (1.0 - ta * ta)
    db = dout * ta * sb * (1.0 - sb)
    return np.concatenate([da, db], axis=1)


def l2_normalize_forward(e: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt(np.sum(e * e, axis=1, keepdims=True))
    if np.any(norm <= eps):
        raise ZeroDivisionError("cannot normalize a zero-norm vector")
    u = e / norm
    return u, (u, norm)


def l2_normalize_backward(du: np.ndarray, cache) -> np.ndarray:
    u, norm = cache
    return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norm


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient wrt logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    n = len(labels)
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def add_grad(grads: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value
