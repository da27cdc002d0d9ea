"""Classical radar signal-processing chain used as the distillation teacher.

ADC cube -> windowed range DFT -> windowed Doppler DFT (fftshift-ed so zero
velocity sits at bin ``n_chirps // 2``) -> per-cell angle estimation.
RAD tensors hold magnitudes, not power.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .fmcw_sim import DatasetManifest, azimuth_grid
from .tensor import tensor_read, tensor_write, window

AOA_METHODS = ("fft", "music")


@dataclass(frozen=True)
class CfarConfig:
    """Cell-averaging CFAR window.

    ``guard_cells`` and ``train_cells`` are per side and may be an int (same
    on both axes) or a ``(range_axis, doppler_axis)`` pair.
    """

    guard_cells: object = 2
    train_cells: object = 4
    scale_factor: float = 4.0

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise ValueError(f"scale_factor must be > 0, got {self.scale_factor}")
        g, t = self.per_axis()
        object.__setattr__(self, "guard_cells", g)
        object.__setattr__(self, "train_cells", t)
        if min(g + t) < 0:
            raise ValueError("guard/train cell counts must be >= 0")
        if max(t) < 1:
            raise ValueError("at least one axis needs train_cells >= 1")

    def per_axis(self):
        g = self.guard_cells
        t = self.train_cells
        g = (int(g), int(g)) if np.isscalar(g) else tuple(int(x) for x in g)
        t = (int(t), int(t)) if np.isscalar(t) else tuple(int(x) for x in t)
        return g, t

    def to_dict(self):
        g, t = self.per_axis()
        return {"guard_cells": list(g), "train_cells": list(t), "scale_factor": self.scale_factor}


@dataclass(frozen=True)
class Detection:
    range_bin: int
    doppler_bin: int
    azimuth_rad: float
    snr_estimate: float
    azimuth_bin: int = -1


def default_windows(n_samples, n_chirps, kind="hann"):
    return window(kind, n_samples), window(kind, n_chirps)


def adc_to_rd(adc, win_range, win_doppler):
    """Range-Doppler cube from an ADC cube of shape ``(samples, chirps, antennas)``."""
    adc = np.asarray(adc)
    if adc.ndim != 3:
        raise ValueError(f"ADC cube must be 3-d, got shape {adc.shape}")
    n_samples, n_chirps, _ = adc.shape
    win_range = np.asarray(win_range, dtype=np.float64)
    win_doppler = np.asarray(win_doppler, dtype=np.float64)
    if win_range.shape != (n_samples,):
        raise ValueError(f"range window length {win_range.shape} != n_samples {n_samples}")
    if win_doppler.shape != (n_chirps,):
        raise ValueError(f"Doppler window length {win_doppler.shape} != n_chirps {n_chirps}")
    x = np.fft.fft(adc * win_range[:, None, None], axis=0)
    x = np.fft.fft(x * win_doppler[None, :, None], axis=1)
    return np.fft.fftshift(x, axes=1)


def aoa_fft(snapshot, n_azimuth_bins):
    """Zero-padded angle DFT magnitude along the last (antenna) axis.

    Output bin ``b`` corresponds to ``sin(theta) = azimuth_grid(n_azimuth_bins)[b]``.
    """
    snapshot = np.asarray(snapshot)
    n_antennas = snapshot.shape[-1]
    if n_azimuth_bins < n_antennas:
        raise ValueError(f"n_azimuth_bins={n_azimuth_bins} < n_antennas={n_antennas}")
    spec = np.fft.fft(snapshot, n=n_azimuth_bins, axis=-1)
    return np.abs(np.fft.fftshift(spec, axes=-1))


def steering_matrix(n_antennas, sin_grid, spacing=0.5):
    """Columns ``a(theta) = exp(2j*pi*spacing*k*sin(theta))`` for ``k < n_antennas``."""
    k = np.arange(n_antennas)[:, None]
    phase = np.mod(spacing * k * np.asarray(sin_grid)[None, :], 1.0)
    return np.exp(2j * np.pi * phase)


def jacobi_eigh(a, tol=1e-12, max_sweeps=60):
    """Eigendecomposition of Hermitian matrices by cyclic Jacobi rotations.

    ``a`` has shape ``(..., n, n)``; all matrices in the batch are rotated in
    lock-step. Sweeps visit pairs in row-cyclic order ``(0,1), (0,2), ...,
    (n-2, n-1)``. Iteration stops when every matrix has off-diagonal Frobenius
    norm below ``tol * ||a||_F``.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns, like ``numpy.linalg.eigh``.
    """
    a = np.array(a, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape((-1, n, n))
    a = 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))
    v = np.broadcast_to(np.eye(n, dtype=np.complex128), a.shape).copy()
    scale = np.sqrt(np.sum(np.abs(a) ** 2, axis=(-1, -2)))
    offdiag = ~np.eye(n, dtype=bool)

    def converged():
        off = np.sqrt(np.sum(np.abs(a[:, offdiag]) ** 2, axis=-1))
        return np.all(off <= tol * scale)

    sweeps = 0
    while not converged():
        if sweeps >= max_sweeps:
            raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                mag = np.abs(apq)
                # entries this small cannot affect convergence; rotating on them overflows theta
                active = mag > 1e-18 * scale
                if not np.any(active):
                    continue
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, apq / safe, 1.0)
                app = a[:, p, p].real
                aqq = a[:, q, q].real
                theta = (aqq - app) / (2.0 * safe)
                t = np.copysign(1.0, theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # U = diag(1, conj(phase)) @ [[c, s], [-s, c]] on the (p, q) plane
                u_pp = c
                u_pq = s
                u_qp = -s * np.conj(phase)
                u_qq = c * np.conj(phase)
                col_p = a[:, :, p].copy()
                col_q = a[:, :, q]
                a[:, :, p] = col_p * u_pp[:, None] + col_q * u_qp[:, None]
                a[:, :, q] = col_p * u_pq[:, None] + col_q * u_qq[:, None]
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :]
                a[:, p, :] = np.conj(u_pp)[:, None] * row_p + np.conj(u_qp)[:, None] * row_q
                a[:, q, :] = np.conj(u_pq)[:, None] * row_p + np.conj(u_qq)[:, None] * row_q
                a[:, p, q] = 0.0
                a[:, q, p] = 0.0
                a[:, p, p] = a[:, p, p].real
                a[:, q, q] = a[:, q, q].real
                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = vp * u_pp[:, None] + vq * u_qp[:, None]
                v[:, :, q] = vp * u_pq[:, None] + vq * u_qq[:, None]
    w = np.real(np.diagonal(a, axis1=-2, axis2=-1))
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return w.reshape(batch_shape + (n,)), v.reshape(batch_shape + (n, n))


def sample_covariance(snapshots):
    """``(1/K) sum_k s_k s_k^H`` for snapshots of shape ``(..., n_antennas, K)``."""
    snapshots = np.asarray(snapshots)
    k = snapshots.shape[-1]
    return snapshots @ np.conj(np.swapaxes(snapshots, -1, -2)) / k


def music_spectrum(snapshots, n_sources, sin_grid, spacing=0.5):
    """MUSIC pseudo-spectrum ``1 / (a^H E_n E_n^H a)`` over ``sin_grid``.

    ``snapshots`` has shape ``(..., n_antennas, K)``; leading axes are
    independent problems solved in one batched eigendecomposition.
    """
    snapshots = np.asarray(snapshots, dtype=np.complex128)
    if snapshots.ndim < 2:
        raise ValueError("snapshots must be at least 2-d (n_antennas x n_snapshots)")
    n_antennas, k = snapshots.shape[-2:]
    if k < 1:
        raise ValueError("need at least one snapshot")
    if not 1 <= n_sources < n_antennas:
        raise ValueError(f"n_sources must satisfy 1 <= n_sources < n_antennas={n_antennas}, "
                         f"got {n_sources}")
    _, vecs = jacobi_eigh(sample_covariance(snapshots))
    noise = vecs[..., :, : n_antennas - n_sources]
    steer = steering_matrix(n_antennas, sin_grid, spacing)
    proj = np.conj(np.swapaxes(noise, -1, -2)) @ steer
    denom = np.sum(np.abs(proj) ** 2, axis=-2)
    return 1.0 / np.maximum(denom, 1e-12 * n_antennas)


def aoa_music(snapshots, n_sources, grid, spacing=0.5):
    """MUSIC pseudo-spectrum for one ``(n_antennas, n_snapshots)`` snapshot matrix."""
    snapshots = np.asarray(snapshots)
    if snapshots.ndim != 2:
        raise ValueError(f"snapshots must be n_antennas x n_snapshots, got {snapshots.shape}")
    return music_spectrum(snapshots, n_sources, grid, spacing)


def neighborhood_snapshots(rd, radius=1):
    """Stack each RD cell's ``(2r+1)^2`` edge-clamped neighbours as snapshots.

    Returns shape ``(n_range, n_doppler, n_antennas, (2r+1)^2)``.
    """
    n_r, n_d, _ = rd.shape
    padded = np.pad(rd, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    cols = []
    for dr in range(2 * radius + 1):
        for dd in range(2 * radius + 1):
            cols.append(padded[dr:dr + n_r, dd:dd + n_d, :])
    return np.stack(cols, axis=-1)


def music_rad(rd, n_azimuth_bins, n_sources=1, spacing=0.5):
    """Per-cell MUSIC azimuth profile, rescaled to matched-filter peak height.

    Each cell's pseudo-spectrum is normalised to unit peak and multiplied by
    ``||s|| * sqrt(n_antennas)``, the FFT-AOA peak a pure plane wave of the
    same energy would give, so MUSIC and FFT RADs share a magnitude scale.
    """
    n_r, n_d, n_antennas = rd.shape
    grid = azimuth_grid(n_azimuth_bins, spacing)
    snaps = neighborhood_snapshots(rd)
    energy = np.sqrt(np.sum(np.abs(rd) ** 2, axis=-1))
    live = energy > 0
    out = np.zeros((n_r, n_d, n_azimuth_bins))
    if np.any(live):
        spec = music_spectrum(snaps[live], n_sources, grid, spacing)
        spec = spec / np.max(spec, axis=-1, keepdims=True)
        out[live] = spec * (energy[live] * math.sqrt(n_antennas))[:, None]
    return out


def build_rad(adc, n_azimuth_bins, aoa="fft", windows=None, n_sources=1, spacing=0.5):
    """RAD magnitude tensor ``(n_range, n_doppler, n_azimuth_bins)`` from an ADC cube."""
    if aoa not in AOA_METHODS:
        raise ValueError(f"unknown AOA method {aoa!r}; expected one of {AOA_METHODS}")
    adc = np.asarray(adc)
    if windows is None:
        windows = default_windows(adc.shape[0], adc.shape[1])
    rd = adc_to_rd(adc, *windows)
    if aoa == "fft":
        return aoa_fft(rd, n_azimuth_bins)
    return music_rad(rd, n_azimuth_bins, n_sources, spacing)


def downsample_rad(rad, factors):
    """Non-overlapping block mean pooling; trailing remainders are dropped."""
    rad = np.asarray(rad, dtype=np.float64)
    factors = tuple(int(f) for f in factors)
    if len(factors) != rad.ndim:
        raise ValueError(f"need one factor per axis ({rad.ndim}), got {factors}")
    if min(factors) < 1:
        raise ValueError(f"downsample factors must be >= 1, got {factors}")
    out_shape = [d // f for d, f in zip(rad.shape, factors)]
    if 0 in out_shape:
        raise ValueError(f"factors {factors} exceed tensor dims {rad.shape}")
    trimmed = rad[tuple(slice(0, o * f) for o, f in zip(out_shape, factors))]
    blocked = trimmed.reshape([x for o, f in zip(out_shape, factors) for x in (o, f)])
    return blocked.mean(axis=tuple(range(1, 2 * rad.ndim, 2)))


def _box_sums(plane, half_r, half_d):
    """Sum and count of the edge-truncated box of half-widths ``half_*`` around each cell."""
    n_r, n_d = plane.shape
    sat = np.zeros((n_r + 1, n_d + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(plane, axis=0), axis=1)
    r = np.arange(n_r)
    d = np.arange(n_d)
    r0 = np.clip(r - half_r, 0, n_r)[:, None]
    r1 = np.clip(r + half_r + 1, 0, n_r)[:, None]
    d0 = np.clip(d - half_d, 0, n_d)[None, :]
    d1 = np.clip(d + half_d + 1, 0, n_d)[None, :]
    total = sat[r1, d1] - sat[r0, d1] - sat[r1, d0] + sat[r0, d0]
    count = (r1 - r0) * (d1 - d0)
    return total, count


def cfar_statistics(plane, cfg):
    """Per-cell training-cell mean for 2-d cell-averaging CFAR.

    At the borders the training window is truncated to the plane (never
    wrapped), so every cell is tested.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError(f"CFAR expects a 2-d plane, got shape {plane.shape}")
    (g_r, g_d), (t_r, t_d) = cfg.per_axis()
    for axis, (g, t) in enumerate(((g_r, t_r), (g_d, t_d))):
        if 2 * (g + t) + 1 > plane.shape[axis]:
            raise ValueError(f"CFAR window (guard={g}, train={t}) does not fit axis {axis} "
                             f"of length {plane.shape[axis]}")
    outer, n_outer = _box_sums(plane, g_r + t_r, g_d + t_d)
    inner, n_inner = _box_sums(plane, g_r, g_d)
    return (outer - inner) / (n_outer - n_inner)


def _local_max(plane):
    padded = np.pad(plane, 1, mode="constant", constant_values=-np.inf)
    n_r, n_d = plane.shape
    neigh = np.max(np.stack([padded[i:i + n_r, j:j + n_d]
                             for i in range(3) for j in range(3) if (i, j) != (1, 1)]), axis=0)
    return plane >= neigh


def cfar_mask(plane, cfg):
    """Cells whose value exceeds ``scale_factor`` times their training mean."""
    plane = np.asarray(plane, dtype=np.float64)
    return plane > cfg.scale_factor * cfar_statistics(plane, cfg)


def cfar_detect(plane, cfg):
    """CA-CFAR detections that are also 3x3 local maxima, in row-major order."""
    plane = np.asarray(plane, dtype=np.float64)
    hits = cfar_mask(plane, cfg) & _local_max(plane)
    return [(int(r), int(d)) for r, d in zip(*np.nonzero(hits))]


def detect_targets(adc, cfar_cfg, n_azimuth_bins, windows=None, aoa="fft",
                   n_sources=1, spacing=0.5):
    """Full classic chain: RD, antenna-summed CA-CFAR, then per-detection AOA.

    Detections are sorted by decreasing SNR estimate (cell value over its
    CFAR training mean).
    """
    adc = np.asarray(adc)
    if windows is None:
        windows = default_windows(adc.shape[0], adc.shape[1])
    rd = adc_to_rd(adc, *windows)
    plane = np.sum(np.abs(rd), axis=-1)
    noise = cfar_statistics(plane, cfar_cfg)
    grid = azimuth_grid(n_azimuth_bins, spacing)
    dets = []
    cells = cfar_detect(plane, cfar_cfg)
    if aoa == "music" and cells:
        snaps = neighborhood_snapshots(rd)
        rs, ds = zip(*cells)
        spectra = music_spectrum(snaps[list(rs), list(ds)], n_sources, grid, spacing)
    for i, (r, d) in enumerate(cells):
        if aoa == "fft":
            profile = aoa_fft(rd[r, d], n_azimuth_bins)
        elif aoa == "music":
            profile = spectra[i]
        else:
            raise ValueError(f"unknown AOA method {aoa!r}")
        b = int(np.argmax(profile))
        snr = float(plane[r, d] / noise[r, d]) if noise[r, d] > 0 else math.inf
        dets.append(Detection(r, d, math.asin(max(-1.0, min(1.0, grid[b]))), snr, b))
    dets.sort(key=lambda det: -det.snr_estimate)
    return dets


def detect_from_rad(rad, cfar_cfg):
    """Classic detections from a RAD tensor alone (no complex data needed).

    CA-CFAR plus 3x3 peak picking runs on the azimuth-summed range-Doppler
    plane; each hit takes the azimuth bin where ``rad[r, d, :]`` peaks.
    Returns row-major ``(range_bin, doppler_bin, azimuth_bin)`` tuples.
    """
    rad = np.asarray(rad, dtype=np.float64)
    if rad.ndim != 3:
        raise ValueError(f"RAD tensor must be 3-d, got shape {rad.shape}")
    plane = rad.sum(axis=2)
    return [(r, d, int(np.argmax(rad[r, d]))) for r, d in cfar_detect(plane, cfar_cfg)]


def range_azimuth_mask(rad, cfar_cfg):
    """CA-CFAR mask (no peak picking) on the Doppler-summed range-azimuth plane."""
    return cfar_mask(np.asarray(rad, dtype=np.float64).sum(axis=1), cfar_cfg)


def teacher_batch(manifest, n_azimuth_bins, aoa, out_dir, windows=None, n_sources=1,
                  spacing=0.5, workers=1):
    """Pseudo-label every scene of ``manifest`` with a RAD tensor.

    Writes ``rad/scene_*.rten`` and a new ``manifest.jsonl`` under
    ``out_dir``. A scene that fails keeps ``rad_path = None`` and gains an
    ``error`` field; the remaining scenes are still processed.
    """
    os.makedirs(out_dir, exist_ok=True)
    out_root = os.path.abspath(out_dir)
    rad_dir = os.path.join(out_root, "rad")
    if manifest.records:
        os.makedirs(rad_dir, exist_ok=True)

    def job(rec):
        rec = dict(rec)
        rec.pop("error", None)
        adc_abs = manifest.resolve(rec["adc_path"])
        rec["adc_path"] = os.path.relpath(adc_abs, out_root)
        rel = os.path.join("rad", f"scene_{int(rec['scene_id']):06d}.rten")
        try:
            adc = tensor_read(adc_abs)
            rad = build_rad(adc, n_azimuth_bins, aoa, windows, n_sources, spacing)
            tensor_write(os.path.join(out_root, rel), rad)
            rec["rad_path"] = rel
        except (OSError, ValueError, NumericalError) as exc:
            rec["rad_path"] = None
            rec["error"] = f"{type(exc).__name__}: {exc}"
        rec["teacher"] = aoa
        return rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, manifest.records))
    else:
        records = [job(rec) for rec in manifest.records]
    out = DatasetManifest(out_root, records)
    out.write()
    return out
