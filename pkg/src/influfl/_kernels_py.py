"""Pure numpy kernels. Same signatures as the compiled ``_kernels`` module.

All 2-D arrays are row-major float64. Weight matrices are ``[out, in]``.
"""

import numpy as np

ACT_IDENTITY = 0
ACT_TANH = 1
ACT_RELU = 2


def dense_forward(x, w, b, act):
    """Return ``act(x @ w.T + b)`` as a new ``[n, out]`` array."""
    z = x @ w.T
    z += b
    if act == ACT_TANH:
        np.tanh(z, out=z)
    elif act == ACT_RELU:
        np.maximum(z, 0.0, out=z)
    return z


def dense_backward(grad_out, out, x, w, act, grad_w, grad_b, need_input_grad):
    """Backprop through one dense layer.

    ``out`` is the post-activation output saved by :func:`dense_forward`.
    Writes the weight and bias gradients into ``grad_w`` / ``grad_b`` and
    returns the gradient w.r.t. ``x`` (or ``None``).
    """
    if act == ACT_TANH:
        dz = grad_out * (1.0 - out * out)
    elif act == ACT_RELU:
        dz = grad_out * (out > 0.0)
    else:
        dz = grad_out
    np.matmul(dz.T, x, out=grad_w)
    np.sum(dz, axis=0, out=grad_b)
    if need_input_grad:
        return dz @ w
    return None


def softmax_xent(logits, labels, grad):
    """Mean softmax cross-entropy. If ``grad`` is given, d(loss)/d(logits) is written to it."""
    n = logits.shape[0]
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[rows, labels]))
    if grad is not None:
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        p /= n
        grad[...] = p
    return loss


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam step on flat arrays. ``step`` is the 1-based count."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)
