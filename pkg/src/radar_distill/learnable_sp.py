"""Learnable signal-processing module: windows, real-pair DFT layers, magnitude.

Every complex weight matrix is stored as two real matrices ``(re, im)`` and
every complex product is done with four real matrix products::

    (Wr + i Wi)(xr + i xi) = (Wr xr - Wi xi) + i (Wr xi + Wi xr)

Forward pass for an ADC cube ``x`` of shape ``(..., N, M, A)``::

    x1 = win_range[n] * x
    x2 = W_range  applied along N
    x3 = win_doppler[m] * x2
    x4 = W_doppler applied along M
    x5 = W_angle  applied along A      -> (..., N, M, B)
    rad = |x5|
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .tensor import dft_matrix, make_rng, tensor_read, tensor_write, window

PARAM_NAMES = (
    "win_range", "win_doppler",
    "w_range_re", "w_range_im",
    "w_doppler_re", "w_doppler_im",
    "w_angle_re", "w_angle_im",
)
DFT_NAMES = PARAM_NAMES[2:6]

CHECKPOINT_FORMAT = "radar_distill.learnable_sp"
CHECKPOINT_VERSION = 1

VARIANTS = ("exact", "perturbed", "random_doppler", "random")
_ALIASES = {
    "exact": "exact", "exactdft": "exact", "exact_dft": "exact",
    "perturbed": "perturbed", "perturbeddft": "perturbed", "perturbed_dft": "perturbed",
    "perturb": "perturbed",
    "random_doppler": "random_doppler", "randomdoppler": "random_doppler",
    "random-doppler": "random_doppler",
    "random": "random",
}
MAG_EPS = 1e-12


@dataclass(frozen=True)
class InitScheme:
    variant: str = "perturbed"
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        key = _ALIASES.get(str(self.variant).lower().replace("-", "_"))
        if key is None:
            raise ValueError(f"unknown init variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", key)
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def label(self):
        if self.variant == "perturbed":
            return f"perturbed(gamma={self.gamma:g})"
        return self.variant

    def to_dict(self):
        return {"variant": self.variant, "gamma": self.gamma, "seed": self.seed}


@dataclass
class LearnableSpParams:
    win_range: np.ndarray
    win_doppler: np.ndarray
    w_range_re: np.ndarray
    w_range_im: np.ndarray
    w_doppler_re: np.ndarray
    w_doppler_im: np.ndarray
    w_angle_re: np.ndarray
    w_angle_im: np.ndarray

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: np.array(d[name], dtype=np.float64) for name in PARAM_NAMES})

    def copy(self):
        return LearnableSpParams.from_dict(self.as_dict())

    def zeros_like(self):
        return LearnableSpParams(**{n: np.zeros_like(v) for n, v in self.as_dict().items()})

    @property
    def dims(self):
        """``(n_samples, n_chirps, n_antennas, n_azimuth_bins)``."""
        b, a = self.w_angle_re.shape
        return self.win_range.shape[0], self.win_doppler.shape[0], a, b

    def w_range(self):
        return self.w_range_re + 1j * self.w_range_im

    def w_doppler(self):
        return self.w_doppler_re + 1j * self.w_doppler_im

    def w_angle(self):
        return self.w_angle_re + 1j * self.w_angle_im


Gradients = LearnableSpParams


def exact_matrices(n_samples, n_chirps, n_antennas, n_azimuth_bins):
    """DFT weights that reproduce the FFT teacher.

    The Doppler and angle matrices are row-permuted (fftshift-ed) DFT
    matrices, so their outputs use the teacher's centred bin order; the angle
    matrix keeps only the first ``n_antennas`` columns (zero padding).
    """
    w_range = dft_matrix(n_samples)
    w_doppler = np.fft.fftshift(dft_matrix(n_chirps), axes=0)
    w_angle = np.fft.fftshift(dft_matrix(n_azimuth_bins), axes=0)[:, :n_antennas]
    return w_range, w_doppler, w_angle


def _split(z):
    return np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag)


def _perturb_pair(z, gamma, rng):
    re, im = _split(z)
    if gamma == 0:
        return re, im
    std = np.sqrt(gamma)
    return re + std * rng.standard_normal(re.shape), im + std * rng.standard_normal(im.shape)


def _random_pair(shape, rng):
    """Gaussian matrix with variance ``1 / shape[1]`` (fan-in) per real component."""
    std = 1.0 / np.sqrt(shape[1])
    return std * rng.standard_normal(shape), std * rng.standard_normal(shape)


def init_params(scheme, cfg, window_kind="hann"):
    """Initialise module weights for ``cfg`` (a ``RadarConfig``) under ``scheme``.

    Windows start as ``window_kind`` (Hann by default) whatever the scheme.
    Each weight matrix draws from its own RNG substream ``(seed, k)``.
    """
    n, m, a, b = cfg.n_samples, cfg.n_chirps, cfg.n_antennas, cfg.n_azimuth_bins
    if b < a:
        raise ValueError(f"n_azimuth_bins={b} < n_antennas={a}")
    w_r, w_d, w_a = exact_matrices(n, m, a, b)
    rngs = [make_rng(scheme.seed, k) for k in range(3)]
    v = scheme.variant
    if v == "exact":
        pairs = [_split(w_r), _split(w_d), _split(w_a)]
    elif v == "perturbed":
        pairs = [_perturb_pair(w, scheme.gamma, rng) for w, rng in zip((w_r, w_d, w_a), rngs)]
    elif v == "random_doppler":
        pairs = [_split(w_r), _random_pair(w_d.shape, rngs[1]), _split(w_a)]
    else:
        pairs = [_random_pair(w.shape, rng) for w, rng in zip((w_r, w_d, w_a), rngs)]
    (rr, ri), (dr, di), (ar, ai) = pairs
    return LearnableSpParams(window(window_kind, n), window(window_kind, m),
                             rr, ri, dr, di, ar, ai)


@dataclass
class ForwardCache:
    x0: tuple
    x1: tuple
    x2: tuple
    x3: tuple
    x4: tuple
    x5: tuple
    rad: np.ndarray
    batched: bool


def _cmm(wr, wi, xr, xi):
    """``W @ x`` on real pairs with four real matrix products."""
    return wr @ xr - wi @ xi, wr @ xi + wi @ xr


def forward(params, adc):
    """Predict RAD magnitudes; returns ``(rad, cache)``.

    ``adc`` is one cube ``(N, M, A)`` or a batch ``(K, N, M, A)``.
    """
    adc = np.asarray(adc)
    n, m, a, b = params.dims
    batched = adc.ndim == 4
    if adc.ndim not in (3, 4) or adc.shape[-3:] != (n, m, a):
        raise ValueError(f"ADC shape {adc.shape} does not match module dims {(n, m, a)}")
    x = adc if batched else adc[None]
    k = x.shape[0]
    xr = np.ascontiguousarray(x.real, dtype=np.float64)
    xi = np.ascontiguousarray(x.imag, dtype=np.float64)

    wr = params.win_range[:, None, None]
    x1 = (wr * xr, wr * xi)
    s = x1[0].reshape(k, n, m * a), x1[1].reshape(k, n, m * a)
    x2 = tuple(t.reshape(k, n, m, a)
               for t in _cmm(params.w_range_re, params.w_range_im, *s))
    wd = params.win_doppler[:, None]
    x3 = (wd * x2[0], wd * x2[1])
    x4 = _cmm(params.w_doppler_re, params.w_doppler_im, *x3)
    # angle stage acts on the last axis: x @ W^T
    x4f = x4[0].reshape(-1, a), x4[1].reshape(-1, a)
    y = _cmm(params.w_angle_re, params.w_angle_im, x4f[0].T, x4f[1].T)
    x5 = (y[0].T.reshape(k, n, m, b), y[1].T.reshape(k, n, m, b))
    rad = np.sqrt(x5[0] ** 2 + x5[1] ** 2)
    cache = ForwardCache((xr, xi), x1, x2, x3, x4, x5, rad, batched)
    return (rad if batched else rad[0]), cache


def backward(params, cache, grad_rad):
    """Gradients of ``sum(grad_rad * rad)`` with respect to every parameter.

    The magnitude derivative is ``z / |z|``, taken as zero where
    ``|z| < 1e-12``.
    """
    if cache is None:
        raise ValueError("backward needs the cache returned by forward")
    g = np.asarray(grad_rad, dtype=np.float64)
    if not cache.batched:
        g = g[None]
    if g.shape != cache.rad.shape:
        raise ValueError(f"grad_rad shape {g.shape} != rad shape {cache.rad.shape}")
    n, m, a, b = params.dims
    k = g.shape[0]
    rad = cache.rad
    live = rad >= MAG_EPS
    scale = np.where(live, g / np.where(live, rad, 1.0), 0.0)
    g5r = scale * cache.x5[0]
    g5i = scale * cache.x5[1]

    # angle stage, y = x W^T: dW = g^T conj(x), dx = g conj(W)
    g5r_f = g5r.reshape(-1, b)
    g5i_f = g5i.reshape(-1, b)
    x4r_f = cache.x4[0].reshape(-1, a)
    x4i_f = cache.x4[1].reshape(-1, a)
    ar, ai = params.w_angle_re, params.w_angle_im
    d_ar = g5r_f.T @ x4r_f + g5i_f.T @ x4i_f
    d_ai = g5i_f.T @ x4r_f - g5r_f.T @ x4i_f
    g4r = (g5r_f @ ar + g5i_f @ ai).reshape(k, n, m, a)
    g4i = (g5i_f @ ar - g5r_f @ ai).reshape(k, n, m, a)

    # Doppler stage, y = W x along M: dW = sum g x^H, dx = W^H g
    dr, di = params.w_doppler_re, params.w_doppler_im
    x3r, x3i = cache.x3
    axes = ([0, 1, 3], [0, 1, 3])
    d_dr = np.tensordot(g4r, x3r, axes) + np.tensordot(g4i, x3i, axes)
    d_di = np.tensordot(g4i, x3r, axes) - np.tensordot(g4r, x3i, axes)
    g3r = dr.T @ g4r + di.T @ g4i
    g3i = dr.T @ g4i - di.T @ g4r

    # Doppler window
    x2r, x2i = cache.x2
    d_wd = np.sum(g3r * x2r + g3i * x2i, axis=(0, 1, 3))
    wd = params.win_doppler[:, None]
    g2r = (wd * g3r).reshape(k, n, m * a)
    g2i = (wd * g3i).reshape(k, n, m * a)

    # range stage, y = W x along N
    rr, ri = params.w_range_re, params.w_range_im
    x1r = cache.x1[0].reshape(k, n, m * a)
    x1i = cache.x1[1].reshape(k, n, m * a)
    axes = ([0, 2], [0, 2])
    d_rr = np.tensordot(g2r, x1r, axes) + np.tensordot(g2i, x1i, axes)
    d_ri = np.tensordot(g2i, x1r, axes) - np.tensordot(g2r, x1i, axes)
    g1r = (rr.T @ g2r + ri.T @ g2i).reshape(k, n, m, a)
    g1i = (rr.T @ g2i - ri.T @ g2r).reshape(k, n, m, a)

    x0r, x0i = cache.x0
    d_wr = np.sum(g1r * x0r + g1i * x0i, axis=(0, 2, 3))
    return Gradients(d_wr, d_wd, d_rr, d_ri, d_dr, d_di, d_ar, d_ai)


def weight_drift(init, trained):
    """Mean absolute difference per named tensor (real and imaginary parts separate)."""
    out = {}
    for name in PARAM_NAMES:
        a, b = getattr(init, name), getattr(trained, name)
        if a.shape != b.shape:
            raise ValueError(f"{name}: shape {a.shape} != {b.shape}")
        out[name] = float(np.mean(np.abs(b - a)))
    return out


def params_save(path, params, metadata=None):
    """Write a checkpoint directory: one RTEN file per tensor plus ``meta.json``."""
    os.makedirs(path, exist_ok=True)
    for name in PARAM_NAMES:
        tensor_write(os.path.join(path, f"{name}.rten"), getattr(params, name))
    n, m, a, b = params.dims
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"n_samples": n, "n_chirps": m, "n_antennas": a, "n_azimuth_bins": b},
    }
    meta.update(metadata or {})
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def params_load(path):
    """Load a checkpoint directory; returns ``(params, metadata)``."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"checkpoint {path} has no meta.json sidecar")
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt meta.json in {path}: {exc}", offset=exc.pos) from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{meta_path}: not a learnable-SP checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{meta_path}: checkpoint version {meta.get('version')} "
                          f"is not supported (expected {CHECKPOINT_VERSION})")
    tensors = {}
    for name in PARAM_NAMES:
        t = tensor_read(os.path.join(path, f"{name}.rten"))
        if np.iscomplexobj(t):
            raise FormatError(f"{name}.rten should hold a real tensor")
        tensors[name] = t
    params = LearnableSpParams.from_dict(tensors)
    dims = meta.get("dims", {})
    expect = (dims.get("n_samples"), dims.get("n_chirps"),
              dims.get("n_antennas"), dims.get("n_azimuth_bins"))
    if params.dims != expect or params.w_range_re.shape != (expect[0],) * 2 \
            or params.w_doppler_re.shape != (expect[1],) * 2:
        raise FormatError(f"checkpoint tensors in {path} do not match recorded dims {dims}")
    return params, meta

