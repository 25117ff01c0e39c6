"""Numpy reference kernels (also the fallback when the extension is missing)."""
import numpy as np

INV_2PI = 1.0 / (2.0 * np.pi)


def arccos_kernel_matrix(U, symmetric=False):
    """Arc-cosine kernel and its derivative at cosines U.

    kappa(u) = (sqrt(1 - u^2) + u (pi - arccos u)) / (2 pi)
    kappa'(u) = (pi - arccos u) / (2 pi)
    ``symmetric`` marks U as the cosine matrix of one set of unit vectors
    with itself, so its diagonal is exactly 1.
    """
    U = np.clip(U, -1.0, 1.0)
    if symmetric:
        U = U.copy()
        np.fill_diagonal(U, 1.0)
    t = np.pi - np.arccos(U)
    Kp = t * INV_2PI
    K = (np.sqrt(1.0 - U * U) + U * t) * INV_2PI
    return K, Kp


def relu_backprop(Z, r, c):
    """M_ij = r_i c_j where Z_ij > 0, else 0 (subgradient 0 at the kink)."""
    return (Z > 0) * np.outer(r, c)
