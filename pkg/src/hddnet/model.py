"""Parameter container shared by the detector and descriptor networks."""

import numpy as np

from .engine import DiffArray

DETECTOR = "det."
DESCRIPTOR = "desc."


class Model:
    """Named trainable leaves plus non-trainable buffers (normalisation statistics).

    Parameter names carry the network prefix (``det.`` / ``desc.``) so the
    trainer can update one side while leaving the other untouched.
    """

    def __init__(self, config, params=None, buffers=None):
        self.config = config
        self.params = dict(params or {})
        self.buffers = dict(buffers or {})
        self._bank_cache = None

    def add_param(self, name, data):
        self.params[name] = DiffArray(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)

    def add_buffer(self, name, data):
        self.buffers[name] = np.asarray(data, dtype=np.float64)

    def __getitem__(self, name):
        return self.params[name]

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def group(self, prefix):
        return [self.params[n] for n in self.names(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self, prefix=""):
        return int(sum(self.params[n].size for n in self.names(prefix)))

    def state(self):
        """Flat name -> ndarray mapping of everything a checkpoint stores."""
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self):
        m = Model(self.config)
        for n, p in self.params.items():
            m.add_param(n, p.data.copy())
        for n, b in self.buffers.items():
            m.add_buffer(n, b.copy())
        return m
