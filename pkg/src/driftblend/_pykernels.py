"""Pure numpy implementation of the interpolation kernel.

Used when the compiled extension is unavailable, and as the reference the
compiled kernel is tested against.
"""

import numpy as np

_OFFSETS = np.arange(-1, 3)


def catmull_rom_weights(t):
    """Catmull-Rom weights and their t-derivatives for fractional offsets ``t``.

    Returns two arrays of shape ``t.shape + (4,)``.
    """
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    w = np.stack(
        [
            0.5 * (-t + 2.0 * t2 - t3),
            0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
            0.5 * (t + 4.0 * t2 - 3.0 * t3),
            0.5 * (-t2 + t3),
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            0.5 * (-1.0 + 4.0 * t - 3.0 * t2),
            0.5 * (-10.0 * t + 9.0 * t2),
            0.5 * (1.0 + 8.0 * t - 9.0 * t2),
            0.5 * (-2.0 * t + 3.0 * t2),
        ],
        axis=-1,
    )
    return w, dw


def eval_slabs(data, slabs, fx, fy):
    """Bicubic Catmull-Rom evaluation on padded 2D slabs.

    Parameters
    ----------
    data : (K, ny, nx) float64
        Stack of padded grids. Padding is one ghost node on each side, so
        fractional index ``fx`` refers to padded column ``fx``.
    slabs : (N, S) int64
        For each point, which ``S`` slabs of ``data`` to evaluate.
    fx, fy : (N,) float64
        Fractional padded indices; must satisfy ``1 <= fx < nx - 2``.

    Returns
    -------
    val, dval_dx, dval_dy : (N, S) float64
        Values and derivatives with respect to the fractional indices.
    """
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    ix = np.minimum(np.floor(fx).astype(np.int64), data.shape[2] - 3)
    iy = np.minimum(np.floor(fy).astype(np.int64), data.shape[1] - 3)
    wx, dwx = catmull_rom_weights(fx - ix)
    wy, dwy = catmull_rom_weights(fy - iy)

    cols = ix[:, None] + _OFFSETS  # (N, 4)
    rows = iy[:, None] + _OFFSETS
    # (N, S, 4, 4) support blocks, indexed [point, slab, row, col]
    block = data[slabs[:, :, None, None], rows[:, None, :, None], cols[:, None, None, :]]

    along_x = np.einsum("nsrc,nc->nsr", block, wx)
    dalong_x = np.einsum("nsrc,nc->nsr", block, dwx)
    val = np.einsum("nsr,nr->ns", along_x, wy)
    ddx = np.einsum("nsr,nr->ns", dalong_x, wy)
    ddy = np.einsum("nsr,nr->ns", along_x, dwy)
    return val, ddx, ddy
