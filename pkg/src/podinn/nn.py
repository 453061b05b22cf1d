"""Feed-forward tanh networks and their closed-form input gradients."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


class MLP:
    """``stack`` independent tanh networks of identical shape.

    Inputs have shape ``(stack, batch, n_in)`` and outputs
    ``(stack, batch, n_out)``.  Parameters are stored in a flat mapping under
    ``{prefix}.W{k}`` / ``{prefix}.b{k}``, with weights laid out ``(stack, fan_in,
    fan_out)`` so that a layer is ``x @ W + b``.
    """

    def __init__(self, prefix: str, n_in: int, n_out: int = 1, hidden=(200, 200), stack: int = 1):
        self.prefix = prefix
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.hidden = tuple(int(h) for h in hidden)
        self.stack = int(stack)
        self.sizes = (self.n_in, *self.hidden, self.n_out)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def weight(self, k):
        return f"{self.prefix}.W{k}"

    def bias(self, k):
        return f"{self.prefix}.b{k}"

    def param_names(self):
        out = []
        for k in range(self.n_layers):
            out += [self.weight(k), self.bias(k)]
        return out

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        out = {}
        for k in range(self.n_layers):
            fan_in, fan_out = self.sizes[k], self.sizes[k + 1]
            bound = 1.0 / np.sqrt(fan_in)
            out[self.weight(k)] = rng.uniform(-bound, bound, (self.stack, fan_in, fan_out))
            out[self.bias(k)] = rng.uniform(-bound, bound, (self.stack, 1, fan_out))
        return out

    def _hidden(self, p, x):
        hs = []
        h = x
        for k in range(self.n_layers - 1):
            h = ad.dense_tanh(h, p[self.weight(k)], p[self.bias(k)])
            hs.append(h)
        return hs

    def forward(self, p, x):
        hs = self._hidden(p, x)
        last = self.n_layers - 1
        h = hs[-1] if hs else x
        return ad.add(ad.matmul(h, p[self.weight(last)]), p[self.bias(last)])

    def input_gradient(self, p, x):
        """d(output)/d(input) as an explicit forward expression.

        Back-propagates a unit output through the layers by hand:
        ``g <- ((1 - h_k**2) * g) @ W_k^T``.  Every step is a tape op, so a later
        backward pass differentiates the gradient itself w.r.t. the weights.
        """
        if self.n_out != 1:
            raise ValueError(f"input gradient needs a scalar-output network, got n_out={self.n_out}")
        hs = self._hidden(p, x)
        last = self.n_layers - 1
        g = ad.swap_last(p[self.weight(last)])  # (stack, 1, h)
        for k in range(last - 1, -1, -1):
            g = ad.tanh_backprop(hs[k], g, p[self.weight(k)])
        if self.n_layers == 1:
            batch = ad.value(x).shape[1]
            g = ad.mul(np.ones((1, batch, 1)), g)
        return g


def input_gradient_expression(net: MLP, params, x):
    """Gradient of a scalar network w.r.t. its input, recorded on the tape."""
    return net.input_gradient(params, x)
