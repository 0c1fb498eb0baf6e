"""
A small module system over `afnet_m.functional`: named parameters, batchnorm buffers and a
train/eval switch. Parameter names are dotted paths ("texture.layer1.0.conv1.weight");
each parameter's initial value is drawn from a seed derived from (root seed, name), so a
parameter with the same name starts from the same values in every configuration.
"""
from collections import OrderedDict

import numpy as np

from . import functional as F
from .optim import derive_seed, he_std, init_constant, init_normal, init_zeros


class Module:
    def __init__(self):
        self._params = OrderedDict()
        self._children = OrderedDict()
        self.training = True

    def add_param(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def add_child(self, name, module):
        self._children[str(name)] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return OrderedDict(self.named_parameters())

    def named_buffers(self, prefix=""):
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(prefix + name + ".")

    def num_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self):
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.parameters()
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in state]
        assert not missing, f"state is missing entries: {missing[:5]}"
        for k, p in params.items():
            assert state[k].shape == p.shape, f"{k}: shape {state[k].shape} != {p.shape}"
            p.data = np.array(state[k], dtype=np.float64)
        for name, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                prefix = name + "." if name else ""
                m.stats.mean = np.array(state[prefix + "running_mean"], dtype=np.float64)
                m.stats.var = np.array(state[prefix + "running_var"], dtype=np.float64)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, seed=0, name="", std=None):
        """
        :param std: weight std; He-normal (sqrt(2 / fan_in)) when None. Biases start at 0.
        """
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride, self.pad = cin, cout, kernel, stride, pad
        std = he_std(cin * kernel * kernel) if std is None else std
        self.weight = self.add_param("weight", init_normal((cout, cin, kernel, kernel), 0.0, std,
                                                           seed=derive_seed(seed, name + ".weight")))
        self.bias = self.add_param("bias", init_zeros((cout,)))

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    @staticmethod
    def count(cin, cout, kernel):
        return cout * cin * kernel * kernel + cout


class BatchNorm2d(Module):
    def __init__(self, channels):
        super().__init__()
        self.scale = self.add_param("scale", init_constant((channels,), 1.0))
        self.shift = self.add_param("shift", init_zeros((channels,)))
        self.stats = F.RunningStats.fresh(channels)

    def __call__(self, x):
        return F.batchnorm2d(x, self.scale, self.shift, self.stats, training=self.training)

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.stats.mean
        yield prefix + "running_var", self.stats.var

    @staticmethod
    def count(channels):
        return 2 * channels


class Linear(Module):
    def __init__(self, din, dout, seed=0, name=""):
        super().__init__()
        self.weight = self.add_param("weight", init_normal((din, dout), 0.0, he_std(din),
                                                           seed=derive_seed(seed, name + ".weight")))
        self.bias = self.add_param("bias", init_zeros((dout,)))

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)

    @staticmethod
    def count(din, dout):
        return din * dout + dout
