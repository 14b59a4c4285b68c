"""Optimizers over Variable parameters.

A step reads each parameter's .grad, applies the update rule with plain
tensor math (off the tape), and swaps the parameter's data in place.
Weight decay is coupled L2: decay is added to the gradient before any
momentum or moment accumulation. All per-parameter state starts at zeros.
"""

from . import _tensor as T
from .errors import MissingGradient


class Optimizer:
    def __init__(self, params, lr):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grads(self, weight_decay):
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradient(f"parameter {i} has no gradient; run backward() first")
            g = p.grad
            if weight_decay:
                g = g + p.data * weight_decay
            grads.append(g)
        return grads

    def step(self):
        raise NotImplementedError

    # checkpoint hooks
    def state_config(self):
        return {}

    def load_state_config(self, config):
        pass

    def state_entries(self):
        return []

    def load_state_entries(self, entries):
        pass


class SGD(Optimizer):
    """v <- momentum * v + (grad + wd * theta); theta <- theta - lr * v."""

    def __init__(self, params, lr=0.01, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        if self.momentum:
            self.velocity = [_zeros_like(p) for p in self.params]
        else:
            self.velocity = None

    def step(self):
        grads = self._grads(self.weight_decay)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.velocity is not None:
                v = self.velocity[i] * self.momentum + g
                self.velocity[i] = v
            else:
                v = g
            p.data = p.data - v * self.lr

    def state_entries(self):
        if self.velocity is None:
            return []
        return [(f"velocity.{i}", v.to_host_buffer()) for i, v in enumerate(self.velocity)]

    def load_state_entries(self, entries):
        if self.velocity is None:
            return
        for i, p in enumerate(self.params):
            arr = entries.get(f"velocity.{i}")
            if arr is not None:
                self.velocity[i] = T.tensor(arr, backend=p.data.backend_id)


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [_zeros_like(p) for p in self.params]
        self.v = [_zeros_like(p) for p in self.params]

    def step(self):
        grads = self._grads(self.weight_decay)
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m = self.m[i] * self.beta1 + g * (1.0 - self.beta1)
            v = self.v[i] * self.beta2 + (g * g) * (1.0 - self.beta2)
            self.m[i] = m
            self.v[i] = v
            m_hat = m / bias1
            v_hat = v / bias2
            p.data = p.data - m_hat / (v_hat.sqrt() + self.eps) * self.lr

    def state_config(self):
        return {"t": self.t}

    def load_state_config(self, config):
        self.t = int(config.get("t", 0))

    def state_entries(self):
        out = [(f"m.{i}", m.to_host_buffer()) for i, m in enumerate(self.m)]
        out += [(f"v.{i}", v.to_host_buffer()) for i, v in enumerate(self.v)]
        return out

    def load_state_entries(self, entries):
        for i, p in enumerate(self.params):
            for field, slot in (("m", self.m), ("v", self.v)):
                arr = entries.get(f"{field}.{i}")
                if arr is not None:
                    slot[i] = T.tensor(arr, backend=p.data.backend_id)


def _zeros_like(p):
    return T.zeros(tuple(p.data.shape), dtype=p.data.dtype.name, backend=p.data.backend_id)
