"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's numerics: the losses are scalar
Python loops, SSIM is evaluated window by window, and the t-distribution
CDF is integrated numerically from its density.
"""
import math

import numpy as np
import torch


def kl_scalar(mu, logvar):
    """Batch-mean of per-sample KL(N(mu, e^logvar) || N(0, 1)) summed over dims."""
    total = 0.0
    for row_m, row_l in zip(mu, logvar):
        s = 0.0
        for m, lv in zip(row_m, row_l):
            s += -0.5 * (1.0 + lv - m * m - math.exp(lv))
        total += s
    return total / len(mu)


def bce_scalar(x, x_hat, eps=1e-7):
    total = 0.0
    for xs, hs in zip(x, x_hat):
        s = 0.0
        for p, q in zip(np.ravel(xs), np.ravel(hs)):
            q = min(max(q, eps), 1.0 - eps)
            s -= p * math.log(q) + (1.0 - p) * math.log(1.0 - q)
        total += s
    return total / len(x)


def mse_scalar(x, x_hat):
    total = 0.0
    for xs, hs in zip(x, x_hat):
        xs, hs = np.ravel(xs), np.ravel(hs)
        total += sum((float(p) - float(q)) ** 2 for p, q in zip(xs, hs)) / len(xs)
    return total / len(x)


def ssim_bruteforce(a, b, L=1.0, win=8):
    """Window-by-window SSIM with population statistics, averaged over
    positions and channels; whole-image statistics below window size."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    h, w, ch = a.shape

    def one(pa, pb):
        ma, mb = pa.mean(), pb.mean()
        va = ((pa - ma) ** 2).mean()
        vb = ((pb - mb) ** 2).mean()
        cov = ((pa - ma) * (pb - mb)).mean()
        return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))

    vals = []
    for c in range(ch):
        if h < win or w < win:
            vals.append(one(a[:, :, c], b[:, :, c]))
            continue
        per = [one(a[i:i + win, j:j + win, c], b[i:i + win, j:j + win, c])
               for i in range(h - win + 1) for j in range(w - win + 1)]
        vals.append(np.mean(per))
    return float(np.mean(vals))


def student_t_two_sided_p(t, df, n=200_001):
    """Two-sided p-value by Simpson integration of the Student-t density on [0, |t|]."""
    t = abs(t)
    lg = math.lgamma((df + 1) / 2) - math.lgamma(df / 2)
    norm = math.exp(lg) / math.sqrt(df * math.pi)
    xs = np.linspace(0.0, t, n)
    f = norm * (1 + xs ** 2 / df) ** (-(df + 1) / 2)
    hstep = xs[1] - xs[0]
    area = hstep / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())
    return 1.0 - 2.0 * area


def finite_difference_check(loss_fn, params, h=1e-6):
    """Worst relative error between autograd and central differences.

    ``loss_fn()`` must be deterministic and rebuild its graph on each call.
    The error per parameter tensor is ``|g_auto - g_fd|_2 / max(|g_auto|_2, |g_fd|_2)``.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    auto = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in params]
    worst = 0.0
    for p, g in zip(params, auto):
        fd = torch.zeros_like(g)
        # .data keeps the perturbation out of the graph; loss_fn may need autograd itself
        flat, fd_flat = p.data.view(-1), fd.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            fd_flat[i] = (up - down) / (2 * h)
        scale = max(g.norm().item(), fd.norm().item())
        if scale > 1e-10:
            worst = max(worst, (g - fd).norm().item() / scale)
    return worst
