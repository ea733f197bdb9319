"""Independent reference computations shared by the tests."""
import numpy as np
import torch


def central_difference(params, loss_fn, picks, eps=1e-4):
    """Numerical d loss / d p[idx] for each (param_index, flat_index) in ``picks``."""
    out = []
    with torch.no_grad():
        for pi, fi in picks:
            flat = params[pi].view(-1)
            orig = flat[fi].item()
            flat[fi] = orig + eps
            up = float(loss_fn())
            flat[fi] = orig - eps
            down = float(loss_fn())
            flat[fi] = orig
            out.append((up - down) / (2 * eps))
    return np.array(out)


def sample_picks(params, count, rng):
    """``count`` distinct (param_index, flat_index) pairs, at least one per tensor when possible."""
    sizes = [p.numel() for p in params]
    picks = [(i, int(rng.integers(s))) for i, s in enumerate(sizes)][:count]
    seen = set(picks)
    while len(picks) < count:
        i = int(rng.integers(len(sizes)))
        pick = (i, int(rng.integers(sizes[i])))
        if pick not in seen:
            seen.add(pick)
            picks.append(pick)
    return picks


def relative_error(a, b, floor=1e-7):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def nearest_centroid(train_x, train_y, test_x):
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(-1)
    return classes[d.argmin(1)]
