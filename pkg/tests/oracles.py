"""Independent reference computations shared by the test modules.

Nothing here imports the package: each function re-derives its quantity
from first principles so that tests compare two separate code paths.
"""

import math

import numpy as np


def cosine_alpha(t, lam_min=-20.0, lam_max=20.0):
    """alpha_t = sigmoid(logsnr) for the clamped cosine log-SNR, in scalar math."""
    if t <= 0.0:
        lam = lam_max
    elif t >= 1.0:
        lam = lam_min
    else:
        lam = min(max(-2.0 * math.log(math.tan(math.pi * t / 2)), lam_min), lam_max)
    return 1.0 / (1.0 + math.exp(-lam))


def posterior_moments_symbolic(s, t, z, x):
    """q(z_s | z_t, x) moments written out from the Gaussian conditioning rule.

    z_t = sqrt(a_t/a_s) z_s + noise(1 - a_t/a_s), z_s ~ N(sqrt(a_s) x, 1 - a_s);
    condition the joint Gaussian of (z_s, z_t) on z_t.
    """
    a_s, a_t = cosine_alpha(s), cosine_alpha(t)
    k = math.sqrt(a_t / a_s)
    var_s = 1 - a_s
    var_t = k * k * var_s + (1 - a_t / a_s)
    cov = k * var_s
    mean = math.sqrt(a_s) * x + cov / var_t * (z - math.sqrt(a_t) * x)
    var = var_s - cov * cov / var_t
    return mean, var


def optimal_eps_gaussian(z, t, m0, s0):
    """Bayes-optimal noise prediction for scalar data x ~ N(m0, s0^2)."""
    a = cosine_alpha(t)
    ex = (math.sqrt(a) * s0**2 * z + (1 - a) * m0) / (a * s0**2 + 1 - a)
    return (z - math.sqrt(a) * ex) / math.sqrt(1 - a)


def mse_psnr(a, b):
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))) / np.size(a)
    return 10 * math.log10(1 / mse)


def ssim_bruteforce(a, b):
    """Per-window SSIM with explicit loops over every valid 11x11 window."""
    g = np.array([math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)])
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[2]):
        A, B = a[:, :, ch], b[:, :, ch]
        acc = []
        for i in range(A.shape[0] - 10):
            for j in range(A.shape[1] - 10):
                pa, pb = A[i : i + 11, j : j + 11], B[i : i + 11, j : j + 11]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cab = (w * (pa - ma) * (pb - mb)).sum()
                acc.append(((2 * ma * mb + c1) * (2 * cab + c2))
                           / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))


def convolve_bruteforce(img, kernel):
    """2-D convolution with reflect-101 borders, one pixel at a time."""
    h, w = img.shape
    r = kernel.shape[0] // 2

    def refl(i, n):
        while i < 0 or i >= n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc += kernel[r + dy, r + dx] * img[refl(y - dy, h), refl(x - dx, w)]
            out[y, x] = acc
    return out


def area_resize_bruteforce(img, oh, ow):
    """Exact box-average resampling by integrating over source pixels."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    ry, rx = h / oh, w / ow
    for i in range(oh):
        for j in range(ow):
            y0, y1, x0, x1 = i * ry, (i + 1) * ry, j * rx, (j + 1) * rx
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    oy = max(0.0, min(y1, y + 1) - max(y0, y))
                    ox = max(0.0, min(x1, x + 1) - max(x0, x))
                    acc += oy * ox * img[y, x]
            out[i, j] = acc / (ry * rx)
    return out


def ddpm_gaussian_output_moments(T, m0, s0):
    """Exact mean/std of a T-step ancestral sampler driven by the optimal
    denoiser on scalar Gaussian data.

    Every step is affine in z with Gaussian noise, so mean and variance
    propagate in closed form.
    """
    mz, vz = 0.0, 1.0
    for k in range(T, 0, -1):
        t, s = k / T, (k - 1) / T
        a_t = cosine_alpha(t)
        gain = math.sqrt(a_t) * s0**2 / (a_t * s0**2 + 1 - a_t)
        offset = (1 - a_t) * m0 / (a_t * s0**2 + 1 - a_t)
        if k == 1:
            return gain * mz + offset, math.sqrt(gain * gain * vz)
        a_s = cosine_alpha(s)
        a_ts = a_t / a_s
        w_z = math.sqrt(a_ts) * (1 - a_s) / (1 - a_t)
        w_x = math.sqrt(a_s) * (1 - a_ts) / (1 - a_t)
        var = (1 - a_ts) * (1 - a_s) / (1 - a_t)
        A = w_z + w_x * gain
        mz, vz = A * mz + w_x * offset, A * A * vz + var


def unet_param_count_by_hand(img_ch, base, mults, blocks, emb):
    """Parameter total from layer shapes: conv k*k*cin*cout + cout, linear
    cin*cout + cout, group norm 2*c; skip 1x1 only when widths differ."""
    conv = lambda cin, cout, k=3: k * k * cin * cout + cout
    lin = lambda cin, cout: cin * cout + cout

    def res(cin, cout):
        n = 2 * cin + conv(cin, cout) + lin(emb, cout) + 2 * cout + conv(cout, cout)
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    widths = [base * m for m in mults]
    total = 2 * (lin(emb, emb) * 2)  # t and tau MLPs
    total += conv(2 * img_ch, widths[0])
    skips, ch = [widths[0]], widths[0]
    for i, c in enumerate(widths):
        for _ in range(blocks):
            total += res(ch, c)
            ch = c
            skips.append(ch)
        if i < len(widths) - 1:
            total += conv(ch, ch)
            skips.append(ch)
    total += res(ch, ch)
    for i in reversed(range(len(widths))):
        c = widths[i]
        for _ in range(blocks + 1):
            total += res(ch + skips.pop(), c)
            ch = c
        if i > 0:
            total += conv(ch, ch)
    return total + 2 * ch + conv(ch, img_ch)


def frechet_sqrtm(mu1, cov1, mu2, cov2):
    """Classic form with the principal square root of the (non-symmetric)
    product cov1 @ cov2."""
    from scipy import linalg

    covmean = linalg.sqrtm(cov1 @ cov2).real
    d = mu1 - mu2
    return float(d @ d + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean))
