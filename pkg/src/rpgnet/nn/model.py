"""Executable network over a :class:`~rpgnet.config.ModelConfig`.

Layers bound in a :class:`~rpgnet.ring.RingGenerator` get their kernels
generated from the rings on every forward pass; every other conv/dense layer
owns its weight directly.  Batch-norm parameters and biases are always owned.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import detrand
from . import functional as F


@dataclass
class Param:
    name: str
    data: np.ndarray
    decay: bool = True
    grad: Optional[np.ndarray] = None


@dataclass
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray


class Network:
    def __init__(self, config, generator=None, weights=None, dtype=None,
                 seed=0):
        self.config = config
        self.generator = generator
        if dtype is None:
            dtype = generator.dtype if generator is not None else np.float32
        self.dtype = np.dtype(dtype)
        if generator is not None and generator.dtype != self.dtype:
            raise ValueError("ring dtype and network dtype differ")
        weights = weights or {}

        self.weights = {}
        self.biases = {}
        self.bn = {}
        bound = generator.bindings if generator is not None else {}
        for i, layer in enumerate(config.layers):
            if layer.kind in ("conv2d", "dense"):
                if layer.name not in bound:
                    if layer.name in weights:
                        w = np.array(weights[layer.name], dtype=self.dtype)
                    else:
                        w = detrand.normal(detrand.derive_seed(seed, 2 + i),
                                           layer.kernel_size_flat)
                        w = (w * math.sqrt(2.0 / layer.fan_in)).astype(self.dtype)
                    self.weights[layer.name] = Param(
                        layer.name + ".weight", w.reshape(-1).copy())
                if layer.bias:
                    self.biases[layer.name] = Param(
                        layer.name + ".bias",
                        np.zeros(layer.out_channels, self.dtype), decay=False)
            elif layer.kind == "batchnorm":
                c = layer.out_channels
                self.bn[layer.name] = BatchNormState(
                    Param(layer.name + ".gamma", np.ones(c, self.dtype)),
                    Param(layer.name + ".beta", np.zeros(c, self.dtype), decay=False),
                    np.zeros(c, self.dtype), np.ones(c, self.dtype))
        self.ring_params = []
        if generator is not None:
            self.ring_params = [Param(f"ring{r.id}", r.values)
                                for r in generator.rings]
        self._caches = None

    # -- parameters -----------------------------------------------------------
    def parameters(self):
        params = list(self.ring_params)
        params += list(self.weights.values())
        for st in self.bn.values():
            params += [st.gamma, st.beta]
        params += list(self.biases.values())
        return params

    def kernels(self):
        """Kernels for every conv/dense layer, flat, keyed by layer name."""
        out = self.generator.kernels() if self.generator is not None else {}
        for name, p in self.weights.items():
            out[name] = p.data
        return out

    def param_counts(self, count_bn=False):
        """``(backbone, total)`` parameter counts.

        Backbone counts ring elements plus owned conv/dense kernels; with
        ``count_bn`` it also includes batch-norm affine parameters.  Total adds
        batch-norm and biases.
        """
        kernels = sum(p.data.size for p in self.ring_params)
        kernels += sum(p.data.size for p in self.weights.values())
        bn = sum(st.gamma.data.size + st.beta.data.size for st in self.bn.values())
        bias = sum(p.data.size for p in self.biases.values())
        backbone = kernels + (bn if count_bn else 0)
        return backbone, kernels + bn + bias

    # -- forward / backward ---------------------------------------------------
    def forward(self, x, train=True, update_stats=True, capture=None):
        """Logits for a batch.

        ``capture`` may name a layer whose output is stored in
        ``self.captured``.  Caches for :meth:`backward` are kept only in
        train mode.
        """
        x = np.asarray(x, dtype=self.dtype)
        kernels = self.kernels()
        outputs = {}
        caches = []
        self.captured = None
        for layer in self.config.layers:
            kind = layer.kind
            cache = None
            if kind == "conv2d":
                k = kernels[layer.name].reshape(layer.kernel_shape)
                cache = (x, k)
                y = F.conv2d_forward(x, k, layer.stride, layer.padding)
            elif kind == "dense":
                w = kernels[layer.name].reshape(layer.kernel_shape)
                b = self.biases[layer.name].data if layer.bias else None
                cache = (x, w)
                y = F.dense_forward(x, w, b)
            elif kind == "batchnorm":
                st = self.bn[layer.name]
                y, cache = F.batchnorm_forward(
                    x, st.gamma.data, st.beta.data, st.running_mean,
                    st.running_var, train=train, update_stats=update_stats)
            elif kind == "relu":
                cache = x
                y = F.relu_forward(x)
            elif kind == "maxpool":
                y, arg = F.maxpool_forward(x, layer.kernel_size, layer.stride)
                cache = (x, arg)
            elif kind == "avgpool":
                cache = x
                y = F.avgpool_forward(x, layer.kernel_size, layer.stride)
            elif kind == "flatten":
                cache = x.shape
                y = x.reshape(x.shape[0], -1)
            elif kind == "residual_add":
                y = F.residual_add(x, outputs[layer.src])
            outputs[layer.name] = y
            if capture == layer.name:
                self.captured = y
            caches.append(cache)
            x = y
        self._caches = caches if train else None
        return x

    def backward(self, grad_out):
        """Backpropagate ``grad_out`` and fill ``.grad`` of every parameter."""
        if self._caches is None:
            raise RuntimeError("backward() needs a preceding train-mode forward()")
        layers = self.config.layers
        pending = {}
        kernel_grads = {}
        for p in self.parameters():
            p.grad = None
        g = grad_out
        for layer, cache in zip(reversed(layers), reversed(self._caches)):
            if layer.name in pending:
                g = g + pending.pop(layer.name)
            kind = layer.kind
            if kind == "conv2d":
                x, k = cache
                g, gk = F.conv2d_backward(x, k, g, layer.stride, layer.padding)
                kernel_grads[layer.name] = gk.reshape(-1)
            elif kind == "dense":
                x, w = cache
                g, gw, gb = F.dense_backward(x, w, g)
                kernel_grads[layer.name] = gw.reshape(-1)
                if layer.bias:
                    self.biases[layer.name].grad = gb
            elif kind == "batchnorm":
                st = self.bn[layer.name]
                g, st.gamma.grad, st.beta.grad = F.batchnorm_backward(g, cache)
            elif kind == "relu":
                g = F.relu_backward(cache, g)
            elif kind == "maxpool":
                x, arg = cache
                g = F.maxpool_backward(x, arg, g, layer.kernel_size, layer.stride)
            elif kind == "avgpool":
                g = F.avgpool_backward(cache, g, layer.kernel_size, layer.stride)
            elif kind == "flatten":
                g = g.reshape(cache)
            elif kind == "residual_add":
                pending[layer.src] = pending.get(layer.src, 0) + g
        for name, p in self.weights.items():
            p.grad = kernel_grads[name]
        if self.generator is not None:
            ring_grads = self.generator.scatter(
                {n: kernel_grads[n] for n in self.generator.bindings})
            for p, gw in zip(self.ring_params, ring_grads):
                p.grad = gw
        self._caches = None
        return kernel_grads

    def loss_and_grad(self, x, labels, loss_fn=F.softmax_cross_entropy):
        logits = self.forward(x, train=True)
        loss, grad = loss_fn(logits, labels)
        self.backward(grad.astype(self.dtype, copy=False))
        return float(loss), logits

    def predict(self, x, batch_size=256):
        preds = []
        for start in range(0, len(x), batch_size):
            logits = self.forward(x[start:start + batch_size], train=False)
            preds.append(logits.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def after_step(self):
        if self.generator is not None:
            self.generator.apply_masks()
