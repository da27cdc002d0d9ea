"""Numerical substrate: DFT matrices, windows, seeded RNG and the RTEN format.

Tensors are plain numpy arrays: ``float64`` for real tensors and
``complex128`` for complex ones, always C-contiguous (row-major).

RTEN v1 layout (all little-endian, no padding)::

    bytes 0-3   magic b"RTEN"
    u32         version (1)
    u32         dtype   (0 = real f64, 1 = complex f64)
    u32         ndim    (1..8)
    ndim x u64  extents
    payload     row-major f64 values; complex tensors store the real
                block first, then the imaginary block
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"RTEN"
VERSION = 1
DTYPE_REAL = 0
DTYPE_COMPLEX = 1
MAX_NDIM = 8

_HEADER = struct.Struct("<4sIII")

WINDOW_KINDS = ("rectangular", "hann", "hamming", "blackman")


def make_rng(seed, *stream):
    """Return a PCG64 generator for ``seed`` and an optional substream key.

    ``make_rng(s, i)`` gives an independent stream per integer key ``i``,
    so per-scene or per-tensor draws never depend on execution order.
    Gaussian draws use numpy's ziggurat sampler on top of PCG64.
    """
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def dft_matrix(n, direction="forward", scaling="none"):
    """Dense ``n x n`` DFT matrix.

    Entry ``(j, k)`` is ``s * exp(-2j*pi*j*k/n)`` for the forward transform
    and its conjugate for the inverse; ``s`` is 1 or ``1/sqrt(n)``.
    """
    if n < 1:
        raise ValueError(f"dft_matrix needs n >= 1, got {n}")
    if direction not in ("forward", "inverse"):
        raise ValueError(f"unknown DFT direction {direction!r}")
    if scaling not in ("none", "unitary"):
        raise ValueError(f"unknown DFT scaling {scaling!r}")
    # reduce j*k mod n before scaling so large n keeps full phase precision
    jk = np.outer(np.arange(n), np.arange(n)) % n
    sign = -1.0 if direction == "forward" else 1.0
    m = np.exp(sign * 2j * np.pi * jk / n)
    if scaling == "unitary":
        m /= np.sqrt(n)
    return m


def window(kind, n):
    """Symmetric window of length ``n``.

    hann:     0.5 - 0.5 cos(2 pi k / (n-1))
    hamming:  0.54 - 0.46 cos(2 pi k / (n-1))
    blackman: 0.42 - 0.5 cos(2 pi k / (n-1)) + 0.08 cos(4 pi k / (n-1))

    A length-1 window is ``[1.0]`` for every kind.
    """
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    if kind not in WINDOW_KINDS:
        raise ValueError(f"unknown window kind {kind!r}; expected one of {WINDOW_KINDS}")
    if kind == "rectangular" or n == 1:
        return np.ones(n)
    phase = 2.0 * np.pi * np.arange(n) / (n - 1)
    if kind == "hann":
        w = 0.5 - 0.5 * np.cos(phase)
    elif kind == "hamming":
        w = 0.54 - 0.46 * np.cos(phase)
    else:
        w = 0.42 - 0.5 * np.cos(phase) + 0.08 * np.cos(2.0 * phase)
    # pin exact symmetry against cos rounding
    return 0.5 * (w + w[::-1])


def gaussian_perturb(m, gamma, rng):
    """Return ``m + E`` with i.i.d. ``N(0, gamma)`` noise.

    For complex ``m`` the real and imaginary parts each receive independent
    noise of variance ``gamma``. The input array is not modified.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    m = np.asarray(m)
    if gamma == 0:
        return m.copy()
    std = np.sqrt(gamma)
    if np.iscomplexobj(m):
        re = rng.standard_normal(m.shape)
        im = rng.standard_normal(m.shape)
        return m + std * (re + 1j * im)
    return m + std * rng.standard_normal(m.shape)


def check_finite(arr, name="tensor"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def tensor_write(path, t):
    """Write a real or complex tensor to ``path`` in RTEN v1 format."""
    t = np.asarray(t)
    if t.ndim == 0:
        raise ValueError("0-d tensors cannot be written; ndim must be 1..8")
    if t.ndim > MAX_NDIM:
        raise ValueError(f"ndim {t.ndim} exceeds the RTEN limit of {MAX_NDIM}")
    if 0 in t.shape:
        raise ValueError(f"tensor extents must be positive, got {t.shape}")
    if np.iscomplexobj(t):
        dtype = DTYPE_COMPLEX
        t = np.asarray(t, dtype=np.complex128)
        payload = (np.ascontiguousarray(t.real, dtype="<f8").tobytes()
                   + np.ascontiguousarray(t.imag, dtype="<f8").tobytes())
    elif np.issubdtype(t.dtype, np.number) or t.dtype == np.bool_:
        dtype = DTYPE_REAL
        payload = np.ascontiguousarray(t, dtype="<f8").tobytes()
    else:
        raise ValueError(f"unsupported dtype {t.dtype}")
    header = _HEADER.pack(MAGIC, VERSION, dtype, t.ndim)
    extents = struct.pack(f"<{t.ndim}Q", *t.shape)
    with open(path, "wb") as fh:
        fh.write(header + extents + payload)


def tensor_read(path):
    """Read an RTEN v1 file, returning a float64 or complex128 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return tensor_from_bytes(raw)


def tensor_from_bytes(raw):
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes, need {_HEADER.size}",
                          offset=len(raw))
    magic, version, dtype, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if dtype not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise FormatError(f"unknown dtype code {dtype}", offset=8)
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"ndim {ndim} outside 1..{MAX_NDIM}", offset=12)
    pos = _HEADER.size
    need = pos + 8 * ndim
    if len(raw) < need:
        raise FormatError("truncated extents", offset=len(raw))
    dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero extent", offset=pos + 8 * i)
        count *= d
        # anything past this cannot be backed by an in-memory payload
        if count > (1 << 60):
            raise FormatError("extent product overflows", offset=pos + 8 * i)
    pos = need
    n_values = count * (2 if dtype == DTYPE_COMPLEX else 1)
    expected = pos + 8 * n_values
    if len(raw) < expected:
        raise FormatError(f"truncated payload: have {len(raw) - pos} bytes, "
                          f"need {8 * n_values}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after payload",
                          offset=expected)
    values = np.frombuffer(raw, dtype="<f8", count=n_values, offset=pos).astype(np.float64)
    if dtype == DTYPE_COMPLEX:
        # assign parts separately so signed zeros survive the round-trip
        out = np.empty(count, dtype=np.complex128)
        out.real = values[:count]
        out.imag = values[count:]
    else:
        out = values
    return out.reshape(dims)

