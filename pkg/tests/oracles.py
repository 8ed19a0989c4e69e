"""Independent reference implementations used by the tests.

Nothing here touches an FFT: correlations are summed in the spatial domain.
"""

import numpy as np


def brute_xcorr(template, live):
    """Cyclic cross-correlation c[s] = sum_x template(x - s) * live(x) for every shift s.

    For each lateral shift the z-correlation is a matrix product over A-scans
    followed by a sum along wrapped diagonals.
    """
    t = np.asarray(template, dtype=np.float64)
    l = np.asarray(live, dtype=np.float64)
    nx, ny, nz = t.shape
    lz = l.reshape(-1, nz)
    zi = np.arange(nz)
    diag = (zi[:, None] - zi[None, :]) % nz  # dz = z - z'
    out = np.empty(t.shape)
    for dx in range(nx):
        for dy in range(ny):
            tr = np.roll(t, (dx, dy), axis=(0, 1)).reshape(-1, nz)
            m = lz.T @ tr  # m[z, z'] = sum over columns of live(z) * shifted template(z')
            out[dx, dy] = np.bincount(diag.ravel(), weights=m.ravel(), minlength=nz)
    return out


def brute_shift(template, live):
    c = brute_xcorr(template, live)
    idx = np.unravel_index(int(np.argmax(c)), c.shape)
    return tuple(int(i) if 2 * i <= n else int(i) - n for i, n in zip(idx, c.shape))


def sequential_argmax(grid):
    flat = np.asarray(grid).ravel()
    best = 0
    for i in range(1, flat.size):
        if flat[i] > flat[best]:
            best = i
    return np.unravel_index(best, np.shape(grid)), flat[best]
