"""Wall detection: multi-scale Hessian eigenvalue response.

Tube walls separate two lumens by a thin dark sheet.  After inverting the
image, such sheets carry one strongly negative Hessian eigenvalue, which the
response below turns into a wall likelihood in [0, 1].
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .volume_io import Volume

DEFAULT_SCALES_MM = (2.0, 3.0)


def _gaussian_kernel1d(sigma_vox: float, order: int) -> np.ndarray:
    """Sampled Gaussian (derivative) kernel for correlate1d.

    The smoothing kernel is normalised to unit sum, derivative kernels carry
    the polynomial factors so that correlation computes d^order/dx^order in
    voxel units (signs arranged for correlation, not convolution).
    """
    radius = max(1, int(math.ceil(4.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma_vox) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        return g * (x / sigma_vox**2)
    if order == 2:
        return g * ((x * x - sigma_vox**2) / sigma_vox**4)
    raise ValueError(f"unsupported derivative order {order}")


def gaussian_hessian(vol: Volume, sigma_mm: float):
    """Scale-normalised Hessian of a volume at physical scale sigma_mm.

    Returns six Volumes (Hxx, Hxy, Hxz, Hyy, Hyz, Hzz) holding second
    derivatives in 1/mm^2 units multiplied by sigma_mm^2.  The input mean
    level is removed first so constant volumes produce exact zeros and the
    result is invariant under adding a constant.
    """
    if not (sigma_mm > 0) or not math.isfinite(sigma_mm):
        raise ValueError(f"sigma_mm must be positive and finite, got {sigma_mm}")
    if sigma_mm < min(vol.spacing):
        raise ValueError(
            f"sigma_mm {sigma_mm} below voxel spacing {min(vol.spacing)}; "
            "the kernel would be undersampled"
        )
    data = vol.data.astype(np.float64, copy=False)
    data = data - data.min()
    spacing = vol.spacing
    sigma_vox = [sigma_mm / s for s in spacing]

    kernels = {}
    for axis in range(3):
        for order in range(3):
            kernels[(axis, order)] = _gaussian_kernel1d(sigma_vox[axis], order)

    def filt(orders):
        out = data
        for axis, order in enumerate(orders):
            out = correlate1d(out, kernels[(axis, order)], axis=axis, mode="reflect")
        scale = sigma_mm**2
        for axis, order in enumerate(orders):
            scale /= spacing[axis] ** order
        return out * scale

    components = [
        filt((2, 0, 0)),  # xx
        filt((1, 1, 0)),  # xy
        filt((1, 0, 1)),  # xz
        filt((0, 2, 0)),  # yy
        filt((0, 1, 1)),  # yz
        filt((0, 0, 2)),  # zz
    ]
    return tuple(vol.like(c) for c in components)


def meijering_response(vol: Volume, scales_mm=DEFAULT_SCALES_MM, black_ridges: bool = True) -> Volume:
    """Multi-scale sheet/line response in [0, 1].

    Per scale: eigenvalues l1 <= l2 <= l3 of the Hessian are shifted to
    l'_i = l_i - (sum of the other two) / 3 and the response is
    max(0, -min_i l'_i), normalised by its volume-wide maximum.  The final
    map is the voxelwise maximum over scales.  With black_ridges the input
    is negated first so dark sheets (walls between bright lumens) light up.
    """
    scales = tuple(float(s) for s in scales_mm)
    if len(scales) == 0:
        raise ValueError("scales_mm must not be empty")
    work = vol.data.astype(np.float64)
    if black_ridges:
        work = -work
    src = Volume(work, vol.spacing, vol.origin)

    response = np.zeros(vol.dims, dtype=np.float64)
    for sigma in scales:
        hxx, hxy, hxz, hyy, hyz, hzz = (h.data for h in gaussian_hessian(src, sigma))
        hmat = np.empty(vol.dims + (3, 3), dtype=np.float64)
        hmat[..., 0, 0] = hxx
        hmat[..., 0, 1] = hmat[..., 1, 0] = hxy
        hmat[..., 0, 2] = hmat[..., 2, 0] = hxz
        hmat[..., 1, 1] = hyy
        hmat[..., 1, 2] = hmat[..., 2, 1] = hyz
        hmat[..., 2, 2] = hzz
        eigs = np.linalg.eigvalsh(hmat)
        # l'_i = l_i - (S - l_i)/3 is increasing in l_i, so its minimum
        # belongs to the smallest eigenvalue.
        lp_min = eigs[..., 0] - (eigs[..., 1] + eigs[..., 2]) / 3.0
        r = np.maximum(0.0, -lp_min)
        peak = r.max()
        if peak > 0:
            r /= peak
        np.maximum(response, r, out=response)
    return vol.like(response)
