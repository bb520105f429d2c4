"""Flat-parameter classifiers, losses and SGD.

Parameters live in a single 1-D float64 array. The layout is layer-major,
and within a layer the weight matrix (row-major, shape ``(fan_in, fan_out)``)
comes before the bias vector::

    [W_0.ravel(), b_0, W_1.ravel(), b_1, ..., W_L.ravel(), b_L]

A linear-softmax model is an MLP with no hidden layers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptyPartitionError, NumericError


@dataclass(frozen=True)
class Model:
    """Fully connected classifier with ReLU hidden layers.

    Parameters
    ----------
    d_in : int
        Input dimension.
    n_classes : int
        Number of output classes.
    hidden : tuple of int
        Hidden layer widths; empty for a linear-softmax model.
    """

    d_in: int
    n_classes: int
    hidden: tuple = ()
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d_in < 1 or self.n_classes < 2:
            raise ContractViolation(
                f"need d_in >= 1 and n_classes >= 2, got {self.d_in}, {self.n_classes}")
        hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in hidden):
            raise ContractViolation(f"hidden sizes must be positive, got {hidden}")
        object.__setattr__(self, "hidden", hidden)
        sizes = (self.d_in, *hidden, self.n_classes)
        object.__setattr__(self, "_shapes", tuple(zip(sizes[:-1], sizes[1:])))

    @property
    def architecture(self):
        return "linear-softmax" if not self.hidden else "mlp"

    @property
    def n_layers(self):
        return len(self._shapes)

    def parameter_count(self):
        return sum(i * o + o for i, o in self._shapes)

    def unpack(self, params):
        """Return ``[(W, b), ...]`` as views into ``params``."""
        params = self._check_params(params)
        layers = []
        pos = 0
        for fan_in, fan_out in self._shapes:
            W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = params[pos:pos + fan_out]
            pos += fan_out
            layers.append((W, b))
        return layers

    def init_params(self, rng):
        """He-uniform weights, zero biases."""
        chunks = []
        for fan_in, fan_out in self._shapes:
            bound = np.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _check_params(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.size != self.parameter_count():
            raise ContractViolation(
                f"parameter vector has shape {params.shape}, "
                f"model expects ({self.parameter_count()},)")
        return params

    def _check_batch(self, inputs, labels):
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels)
        if inputs.ndim != 2 or inputs.shape[1] != self.d_in:
            raise ContractViolation(
                f"inputs have shape {inputs.shape}, model expects (n, {self.d_in})")
        if labels.shape != (inputs.shape[0],):
            raise ContractViolation(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} inputs")
        if inputs.shape[0] < 1:
            raise ContractViolation("empty batch")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ContractViolation(f"labels must lie in [0, {self.n_classes})")
        return inputs, labels

    def _forward(self, layers, inputs):
        acts = [inputs]
        h = inputs
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            with np.errstate(over="ignore", invalid="ignore"):
                z = h @ W + b
            if not np.isfinite(z).all():
                raise NumericError(f"non-finite pre-activation in layer {i}")
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts

    def logits(self, params, inputs):
        inputs = np.asarray(inputs, dtype=np.float64)
        return self._forward(self.unpack(params), inputs)[-1]

    def predict(self, params, inputs):
        # np.argmax returns the lowest index on ties
        return np.argmax(self.logits(params, inputs), axis=1)


def linear_softmax(d_in, n_classes):
    return Model(d_in, n_classes)


def mlp(d_in, hidden, n_classes):
    return Model(d_in, n_classes, tuple(hidden))


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_gradient(model, params, inputs, labels):
    """Mean softmax cross-entropy over the batch and its exact gradient.

    Returns
    -------
    loss : float
    grad : ndarray, same shape as ``params``
    """
    inputs, labels = model._check_batch(inputs, labels)
    layers = model.unpack(params)
    acts = model._forward(layers, inputs)
    n = inputs.shape[0]
    logp = _log_softmax(acts[-1])
    loss = -logp[np.arange(n), labels].mean()

    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((acts[i].T @ delta).ravel())
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0)
    grad = np.concatenate(grads[::-1])
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient")
    return float(max(loss, 0.0)), grad


def sgd_step(params, grad, lr):
    """One plain gradient step ``params - lr * grad``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ContractViolation(f"params {params.shape} vs grad {grad.shape}")
    if not lr > 0:
        raise ContractViolation(f"lr must be positive, got {lr}")
    return params - lr * grad


@dataclass
class TrainStats:
    """Counters for local work; used to check compute-budget parity."""

    steps: int = 0
    epochs: int = 0


def local_train(model, params, inputs, labels, epochs, lr, batch_size, rng,
                momentum=0.0, prox_mu=0.0, prox_center=None, stats=None):
    """Mini-batch SGD over one device's data.

    Indices are reshuffled every epoch with ``rng``; the final partial batch
    is kept. Momentum is heavy-ball, ``v <- momentum * v + g``, and its
    velocity starts at zero on every call. With ``prox_mu > 0`` each step
    adds ``prox_mu * (w - prox_center)`` to the gradient (FedProx).

    Returns a new parameter array; ``params`` is not modified.
    """
    n = len(labels)
    if n == 0:
        raise EmptyPartitionError("device holds no samples")
    if epochs < 0 or batch_size < 1 or lr < 0:
        raise ContractViolation(
            f"bad training arguments: epochs={epochs}, batch_size={batch_size}, lr={lr}")
    w = np.array(params, dtype=np.float64)
    if prox_mu and prox_center is None:
        raise ContractViolation("prox_mu set without prox_center")
    velocity = np.zeros_like(w) if momentum else None
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_gradient(model, w, inputs[idx], labels[idx])
            if prox_mu:
                g += prox_mu * (w - prox_center)
            if velocity is not None:
                velocity *= momentum
                velocity += g
                g = velocity
            w -= lr * g
            if stats is not None:
                stats.steps += 1
        if stats is not None:
            stats.epochs += 1
    if not np.isfinite(w).all():
        raise NumericError("local training diverged to non-finite parameters")
    return w


def weighted_average(models):
    """Weighted mean of ``[(params, weight), ...]``.

    Weights are normalised before summation so a single entry is returned
    unchanged.
    """
    models = list(models)
    if not models:
        raise ContractViolation("weighted_average of an empty list")
    weights = np.array([w for _, w in models], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ContractViolation(f"weights must be non-negative with positive sum: {weights}")
    shape = np.shape(models[0][0])
    if any(np.shape(p) != shape for p, _ in models):
        raise ContractViolation("weighted_average over vectors of different dimension")
    weights = weights / weights.sum()
    out = weights[0] * np.asarray(models[0][0], dtype=np.float64)
    for (p, _), w in zip(models[1:], weights[1:]):
        out = out + w * np.asarray(p, dtype=np.float64)
    return out


def evaluate(model, params, inputs, labels):
    """Return ``(accuracy, mean_loss)`` on a labelled set."""
    inputs, labels = model._check_batch(inputs, labels)
    z = model.logits(params, inputs)
    logp = _log_softmax(z)
    n = len(labels)
    acc = float(np.mean(np.argmax(z, axis=1) == labels))
    return acc, float(-logp[np.arange(n), labels].mean())


def gradient_norm(model, params, inputs, labels):
    return float(np.linalg.norm(loss_and_gradient(model, params, inputs, labels)[1]))
