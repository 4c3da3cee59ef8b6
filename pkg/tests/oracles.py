"""Independent reference computations used by the tests.

Nothing here imports the package's numeric code paths.
"""

import math

import numpy as np


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def naive_stft_magnitude(frame, n_fft=128, hop=8):
    """Direct O(N^2) DFT of every Hann-windowed frame, float64."""
    n_frames = (len(frame) - n_fft) // hop + 1
    w = [0.5 * (1.0 - math.cos(2.0 * math.pi * i / n_fft)) for i in range(n_fft)]
    kn = np.outer(np.arange(n_fft), np.arange(n_fft))
    basis = np.exp(-2j * np.pi * kn / n_fft)
    out = np.zeros((n_fft, n_frames))
    for m in range(n_frames):
        seg = np.array([complex(frame[m * hop + i]) * w[i] for i in range(n_fft)])
        out[:, m] = np.abs(basis @ seg)
    return out


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is perturbed in place, then restored)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|a| + 1e-6)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-6))) if a.size else 0.0


def gelu_tanh(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax_direct(row):
    e = [math.exp(v) for v in row]
    s = sum(e)
    return [v / s for v in e]


def binomial_sd(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
