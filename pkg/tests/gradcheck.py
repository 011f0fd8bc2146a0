"""Finite-difference check of whole-network parameter gradients (float64).

Central differences are only meaningful where the loss is smooth over
``[theta - h, theta + h]``. A ReLU network is piecewise smooth, so every probe
records the ReLU masks and max-pool winners of both perturbed passes. A probe
whose activation pattern differs from the unperturbed pass crossed a kink and
is replaced by a fresh random parameter; the number of replacements is
reported.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from afnet import nn
from afnet.models import Network
from afnet.nn import Mode


@dataclass
class Probe:
    name: str
    index: int
    fd: float
    analytic: float

    @property
    def rel_err(self) -> float:
        return abs(self.fd - self.analytic) / max(abs(self.fd) + abs(self.analytic), 1e-7)


@dataclass
class GradcheckResult:
    probes: list
    kinked: int
    tensors_covered: int
    tensors_total: int

    @property
    def worst(self) -> float:
        return max(p.rel_err for p in self.probes)


@contextmanager
def _record_pattern(log):
    relu, pool = nn.relu, nn.maxpool1d

    def relu_rec(x):
        out = relu(x)
        log.append(np.packbits(out.data > 0))
        return out

    def pool_rec(x, size=2):
        n, t, c = x.shape
        w = x.data[:, : (t // size) * size, :].reshape(n, t // size, size, c)
        log.append(w.argmax(axis=2).astype(np.int8).tobytes())
        return pool(x, size)

    nn.relu, nn.maxpool1d = relu_rec, pool_rec
    try:
        yield
    finally:
        nn.relu, nn.maxpool1d = relu, pool


def network_gradcheck(spec, n_params=50, batch=2, length=500, seed=0, h=1e-3, max_draws=5000):
    """Sample ``n_params`` kink-free parameters and compare FD with backward()."""
    rng = np.random.default_rng(seed)
    net = Network(spec, seed=seed, dtype=np.float64)
    ecg = rng.standard_normal((batch, length, spec.n_leads)) if spec.ecg_trunk is not None else None
    tab = rng.standard_normal((batch, spec.n_features)) if spec.tab_trunk is not None else None
    y = np.arange(batch) % 2

    def loss_and_pattern():
        log = []
        with _record_pattern(log):
            fw = net.forward(ecg, tab, Mode.TRAINING, np.random.default_rng(seed + 1))
        loss = nn.softmax_cross_entropy(fw.logits, y)[0]
        return loss, b"".join(bytes(p) for p in log)

    net.store.zero_grad()
    loss, base_pattern = loss_and_pattern()
    loss.backward()
    grads = {k: t.grad.copy() for k, t in net.store.params.items()}

    names = sorted(net.store.params)
    sizes = np.array([net.store[k].data.size for k in names])
    # visit every tensor once, then draw proportionally to size
    order = [(k, int(rng.integers(net.store[k].data.size))) for k in rng.permutation(names)]
    probes, kinked, covered = [], 0, set()
    draws = 0
    while len(probes) < n_params and draws < max_draws:
        if order:
            name, i = order.pop()
        else:
            j = rng.choice(len(names), p=sizes / sizes.sum())
            name, i = names[j], int(rng.integers(sizes[j]))
        draws += 1
        flat = net.store[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up, pat_up = loss_and_pattern()
        flat[i] = old - h
        down, pat_down = loss_and_pattern()
        flat[i] = old
        if pat_up != base_pattern or pat_down != base_pattern:
            kinked += 1
            continue
        fd = (float(up.data) - float(down.data)) / (2 * h)
        probes.append(Probe(name, i, fd, float(grads[name].reshape(-1)[i])))
        covered.add(name)
    return GradcheckResult(probes, kinked, len(covered), len(names))


def layer_gradcheck(build, tensors, n_probe=40, seed=0, h=1e-3, abs_tol=1e-7) -> float:
    """Worst relative error of ``sum(build() * R)`` over sampled entries of ``tensors``.

    Entries whose gradient is essentially zero (``|fd| + |analytic| <= abs_tol``)
    have no meaningful relative error and are skipped.
    """
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(build().shape)
    for t in tensors:
        t.grad = None
    build().backward(proj)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = float((build().data * proj).sum())
            flat[i] = old - h
            down = float((build().data * proj).sum())
            flat[i] = old
            p = Probe(t.name or "?", int(i), (up - down) / (2 * h), float(t.grad.reshape(-1)[i]))
            if abs(p.fd) + abs(p.analytic) > abs_tol:
                worst = max(worst, p.rel_err)
    return worst
