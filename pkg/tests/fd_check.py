"""Central finite-difference gradient checking shared by the test modules.

Each parameter tensor is checked as a group: a few coordinates are sampled,
analytic and numeric directional derivatives are compared as vectors, and
the relative error uses a small floor so parameter groups whose true
gradient is exactly zero (e.g. biases absorbed by a following
normalization) are verified absolutely instead of dividing by noise.
"""

import numpy as np
import torch


def worst_group_rel_error(loss_fn, params, seed=0, samples_per_group=4,
                          h_scale=1e-5, floor=1e-6):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        gflat = g.detach().reshape(-1)
        idx = rng.choice(len(flat), size=min(samples_per_group, len(flat)),
                         replace=False)
        fd = []
        for i in idx:
            orig = float(flat[i])
            h = h_scale * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                lo = float(loss_fn())
                flat[i] = orig - h
                hi = float(loss_fn())
                flat[i] = orig
            fd.append((lo - hi) / (2 * h))
        fd = np.asarray(fd)
        an = gflat[np.asarray(idx)].numpy()
        rel = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), floor)
        worst = max(worst, rel)
    return worst
