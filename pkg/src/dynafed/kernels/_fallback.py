"""Pure numpy versions of the compiled MLP kernels (same signatures)."""
import numpy as np


def _layers(params, sizes):
    off = 0
    for fin, fout in zip(sizes[:-1], sizes[1:]):
        W = params[off:off + fin * fout].reshape(fin, fout)
        off += fin * fout
        b = params[off:off + fout]
        off += fout
        yield W, b


def mlp_logits(params, sizes, X):
    layers = list(_layers(params, sizes))
    A = X
    for l, (W, b) in enumerate(layers):
        A = A @ W + b
        if l < len(layers) - 1:
            A = np.maximum(A, 0.0)
    return A


def mlp_loss_grad(params, sizes, X, T, grad):
    layers = list(_layers(params, sizes))
    n = X.shape[0]
    acts = [X]
    A = X
    for l, (W, b) in enumerate(layers):
        A = A @ W + b
        if l < len(layers) - 1:
            A = np.maximum(A, 0.0)
        acts.append(A)
    Z = acts[-1]
    lse = Z.max(axis=1, keepdims=True)
    lse = lse + np.log(np.exp(Z - lse).sum(axis=1, keepdims=True))
    loss = -(T * (Z - lse)).sum() / n
    dZ = (np.exp(Z - lse) * T.sum(axis=1, keepdims=True) - T) / n

    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        Aprev = acts[l]
        grads.append((Aprev.T @ dZ, dZ.sum(axis=0)))
        if l > 0:
            dZ = (dZ @ W.T) * (Aprev > 0.0)
    off = 0
    for dW, db in reversed(grads):
        grad[off:off + dW.size] = dW.ravel()
        off += dW.size
        grad[off:off + db.size] = db
        off += db.size
    return float(loss)


def adam_step(params, grad, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    params -= lr * mhat / (np.sqrt(vhat) + eps)
