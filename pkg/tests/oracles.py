"""Brute-force reference implementations used as test oracles."""

import numpy as np


def brute_nn(ref_pts, queries):
    """Nearest reference index and squared distance by full O(n*m) scan."""
    d2 = ((queries[:, None, :] - ref_pts[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, d2[np.arange(len(queries)), idx]


class _KinkRecorder:
    """Records the ReLU sign pattern and max-pool winners of a forward pass."""

    def __init__(self):
        import torch
        from torch.overrides import TorchFunctionMode

        rec = self

        class Mode(TorchFunctionMode):
            def __torch_function__(self, func, types, args=(), kwargs=None):
                kwargs = kwargs or {}
                out = func(*args, **kwargs)
                name = getattr(func, "__name__", "")
                if name == "relu":
                    rec.pattern.append((args[0] > 0).detach().clone())
                elif name == "amax":
                    dim = kwargs.get("dim", args[1] if len(args) > 1 else None)
                    rec.pattern.append(args[0].detach().argmax(dim=dim))
                return out

        self.mode_cls = Mode
        self.torch = torch

    def run(self, fn):
        self.pattern = []
        with self.mode_cls():
            val = fn().detach().reshape(-1).numpy().copy()
        return val, self.pattern

    @staticmethod
    def same(a, b):
        return len(a) == len(b) and all(x.shape == y.shape and bool((x == y).all()) for x, y in zip(a, b))


def central_difference_check(params, loss_fn, step=1e-4, floor=1e-5):
    """Compare autograd gradients of ``loss_fn()`` with hand-rolled central
    differences over every scalar entry of ``params`` (float64 tensors).

    ``loss_fn`` may return a scalar or a 1-d tensor of several losses; each
    component is checked against its own gradient from the same sweep.
    A coordinate whose +/- step changes a ReLU sign or a max-pool winner
    straddles a kink, where the function has no derivative, and is left out.
    Returns ``(worst relative error, n_checked, n_kink)`` with the relative
    error ``|a - n| / max(|a|, |n|, floor)``; counts are per component.
    """
    import torch

    rec = _KinkRecorder()
    loss = loss_fn().reshape(-1)
    n_out = loss.numel()
    grads = []
    for k in range(n_out):
        gk = torch.autograd.grad(loss[k], params, allow_unused=True, retain_graph=k + 1 < n_out)
        grads.append([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, gk)])
    worst, checked, kinks = 0.0, 0, 0
    with torch.no_grad():
        _, base = rec.run(loss_fn)
        for pi, p in enumerate(params):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up, pat_up = rec.run(loss_fn)
                flat[i] = orig - step
                down, pat_down = rec.run(loss_fn)
                flat[i] = orig
                if not (rec.same(base, pat_up) and rec.same(base, pat_down)):
                    kinks += n_out
                    continue
                num = (up - down) / (2 * step)
                for k in range(n_out):
                    ana = float(grads[k][pi][i])
                    worst = max(worst, abs(ana - num[k]) / max(abs(ana), abs(num[k]), floor))
                checked += n_out
    return worst, checked, kinks


def sample_group_batch(rng, n_groups=2, levels=5, m=4, s=16):
    """Random patch tensor plus labels, mixes and level groups for batch_losses."""
    import torch

    n = n_groups * levels
    pts = rng.standard_normal((n, m, s, 3))
    pts /= np.maximum(1.0, np.linalg.norm(pts, axis=-1, keepdims=True))
    labels = torch.tensor(rng.integers(0, 5, n))
    a = rng.random((n, 4)) + 0.05
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    groups = [list(range(g * levels, (g + 1) * levels)) for g in range(n_groups)]
    return torch.from_numpy(pts), labels, torch.from_numpy(a), groups
