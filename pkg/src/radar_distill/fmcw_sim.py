"""Synthetic FMCW scenes, raw ADC cubes and rasterized ground truth.

The radar is modelled as an ideal virtual uniform linear array with a
complex (analytic) dechirped baseband. For a point target the sample at
fast-time index ``n``, chirp ``m`` and antenna ``a`` is::

    A * exp(2j*pi*(f_beat*n/fs + f_dopp*m*Tc + d*a*sin(theta)))

with ``f_beat = 2*S*R/c``, ``S = B/Tc`` and ``f_dopp = 2*v*fc/c``.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import make_rng, tensor_read, tensor_write

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RadarConfig:
    """Sensor and waveform parameters.

    The default is the desk-scale sensor: 64 samples x 32 chirps x 8 virtual
    antennas, sampled over the whole chirp so that one range-DFT bin equals
    the range resolution ``c / (2 B)``.
    """

    carrier_freq_hz: float = 77e9
    bandwidth_hz: float = 4e9
    n_samples: int = 64
    n_chirps: int = 32
    n_antennas: int = 8
    sample_rate_hz: float = 1.28e6
    chirp_duration_s: float = 50e-6
    element_spacing_wavelengths: float = 0.5
    noise_std: float = 0.0
    n_azimuth_bins: int = 16
    max_targets: int = 8

    def __post_init__(self):
        for name in ("n_samples", "n_chirps", "n_antennas", "n_azimuth_bins", "max_targets"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("carrier_freq_hz", "bandwidth_hz", "sample_rate_hz",
                     "chirp_duration_s", "element_spacing_wavelengths"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.n_samples > self.sample_rate_hz * self.chirp_duration_s * (1 + 1e-9):
            raise ValueError("n_samples does not fit inside one chirp at this sample rate")

    @property
    def wavelength_m(self):
        return SPEED_OF_LIGHT / self.carrier_freq_hz

    @property
    def slope_hz_per_s(self):
        return self.bandwidth_hz / self.chirp_duration_s

    @property
    def range_resolution_m(self):
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)

    @property
    def range_bin_m(self):
        """Range covered by one range-DFT bin."""
        return SPEED_OF_LIGHT * self.sample_rate_hz / (2.0 * self.slope_hz_per_s * self.n_samples)

    @property
    def max_range_m(self):
        return self.n_samples * self.range_bin_m

    @property
    def velocity_resolution_mps(self):
        return self.wavelength_m / (2.0 * self.n_chirps * self.chirp_duration_s)

    @property
    def max_velocity_mps(self):
        """Doppler is unambiguous on ``[-max_velocity, max_velocity)``."""
        return 0.5 * self.n_chirps * self.velocity_resolution_mps

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        return config_digest(self.to_dict())


def config_digest(obj):
    """SHA-256 of the canonical JSON serialization of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Target:
    range_m: float
    velocity_mps: float
    azimuth_rad: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError(f"target amplitude must be > 0, got {self.amplitude}")
        if not -math.pi / 2 < self.azimuth_rad < math.pi / 2:
            raise ValueError(f"target azimuth {self.azimuth_rad} outside (-pi/2, pi/2)")
        if not self.range_m > 0:
            raise ValueError(f"target range {self.range_m} must be > 0")

    def check(self, cfg):
        """Raise ``ValueError`` if this target is ambiguous under ``cfg``."""
        if not self.range_m < cfg.max_range_m:
            raise ValueError(f"{self} is beyond the unambiguous range {cfg.max_range_m:.4g} m")
        vmax = cfg.max_velocity_mps
        if not -vmax <= self.velocity_mps < vmax:
            raise ValueError(f"{self} is outside the unambiguous velocity interval "
                             f"[{-vmax:.4g}, {vmax:.4g}) m/s")
        u = cfg.element_spacing_wavelengths * math.sin(self.azimuth_rad)
        if not -0.5 <= u < 0.5:
            raise ValueError(f"{self} aliases in azimuth at element spacing "
                             f"{cfg.element_spacing_wavelengths} wavelengths")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Scene:
    targets: tuple = ()
    rng_seed: int = 0
    scene_id: int = 0

    def check(self, cfg):
        if len(self.targets) > cfg.max_targets:
            raise ValueError(f"scene {self.scene_id} has {len(self.targets)} targets, "
                             f"more than max_targets={cfg.max_targets}")
        for t in self.targets:
            t.check(cfg)


@dataclass
class RaMaps:
    """Per-cell range-azimuth maps.

    ``y_reg[..., 0]`` is the range residual in metres and ``y_reg[..., 1]``
    the azimuth residual in radians; both are zero away from object cells.
    """

    y_cls: np.ndarray
    y_reg: np.ndarray
    y_seg: np.ndarray


def azimuth_grid(n_bins, spacing=0.5):
    """sin(theta) at each azimuth bin: ``(b - n_bins//2) / (n_bins * spacing)``.

    This is the fftshift-ed grid of a zero-padded ``n_bins``-point DFT across
    the array, so bin ``n_bins//2`` is broadside.
    """
    return (np.arange(n_bins) - n_bins // 2) / (n_bins * spacing)


def doppler_velocities(cfg):
    """Radial velocity at each fftshift-ed Doppler bin."""
    return (np.arange(cfg.n_chirps) - cfg.n_chirps // 2) * cfg.velocity_resolution_mps


def synth_adc(scene, cfg):
    """Complex ADC cube of shape ``(n_samples, n_chirps, n_antennas)``."""
    scene.check(cfg)
    n = np.arange(cfg.n_samples)[:, None, None]
    m = np.arange(cfg.n_chirps)[None, :, None]
    a = np.arange(cfg.n_antennas)[None, None, :]
    data = np.zeros((cfg.n_samples, cfg.n_chirps, cfg.n_antennas), dtype=np.complex128)
    for t in scene.targets:
        f_beat = 2.0 * cfg.slope_hz_per_s * t.range_m / SPEED_OF_LIGHT
        f_dopp = 2.0 * t.velocity_mps * cfg.carrier_freq_hz / SPEED_OF_LIGHT
        # per-axis cycles reduced mod 1 to keep phases small
        fast = np.mod(f_beat / cfg.sample_rate_hz * n, 1.0)
        slow = np.mod(f_dopp * cfg.chirp_duration_s * m, 1.0)
        spatial = np.mod(cfg.element_spacing_wavelengths * math.sin(t.azimuth_rad) * a, 1.0)
        data += t.amplitude * (np.exp(2j * np.pi * fast)
                               * np.exp(2j * np.pi * slow)
                               * np.exp(2j * np.pi * spatial))
    if cfg.noise_std > 0:
        rng = make_rng(scene.rng_seed)
        shape = data.shape
        data = data + cfg.noise_std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return data


def range_bin_size(cfg, n_range_bins):
    return cfg.max_range_m / n_range_bins


def azimuth_bin_index(azimuth_rad, n_azimuth_bins, spacing=0.5):
    """Azimuth bin holding ``azimuth_rad``; bins span ``[grid[b], grid[b+1])`` in sin space.

    Returns -1 for angles below the first grid point (only possible for odd
    bin counts).
    """
    s = math.sin(azimuth_rad)
    b = math.floor((s * n_azimuth_bins * spacing) + n_azimuth_bins // 2 + 1e-9)
    if b < 0:
        return -1
    return min(b, n_azimuth_bins - 1)


def azimuth_bin_edge(b, n_azimuth_bins, spacing=0.5):
    """Angle (radians) at the lower edge of azimuth bin ``b``."""
    s = (b - n_azimuth_bins // 2) / (n_azimuth_bins * spacing)
    return math.asin(max(-1.0, min(1.0, s)))


def rasterize_labels(scene, cfg, n_range_bins, n_azimuth_bins, seg_radius=1.0):
    """Ground-truth range-azimuth maps for ``scene``.

    A target at range ``R`` lands in range bin ``floor(R / dr)`` with residual
    ``R mod dr``, where ``dr = max_range / n_range_bins``. Azimuth bins are
    uniform in sin(theta) (see :func:`azimuth_grid`); the azimuth residual
    is ``theta`` minus the angle of the bin's lower edge. ``y_seg`` marks the
    cells within Euclidean distance ``seg_radius`` (in cells) of a target.
    """
    if n_range_bins < 1 or n_azimuth_bins < 1:
        raise ValueError("bin counts must be >= 1")
    spacing = cfg.element_spacing_wavelengths
    y_cls = np.zeros((n_range_bins, n_azimuth_bins))
    y_reg = np.zeros((n_range_bins, n_azimuth_bins, 2))
    y_seg = np.zeros((n_range_bins, n_azimuth_bins))
    dr = range_bin_size(cfg, n_range_bins)
    rr, bb = np.meshgrid(np.arange(n_range_bins), np.arange(n_azimuth_bins), indexing="ij")
    for t in scene.targets:
        # tiny slack so a target placed on a grid point never floors one bin low
        k = int(math.floor(t.range_m / dr + 1e-9))
        b = azimuth_bin_index(t.azimuth_rad, n_azimuth_bins, spacing)
        if not (0 <= k < n_range_bins and 0 <= b < n_azimuth_bins):
            continue
        y_cls[k, b] = 1.0
        y_reg[k, b, 0] = max(0.0, t.range_m - k * dr)
        y_reg[k, b, 1] = max(0.0, t.azimuth_rad - azimuth_bin_edge(b, n_azimuth_bins, spacing))
        y_seg[(rr - k) ** 2 + (bb - b) ** 2 <= seg_radius ** 2] = 1.0
    return RaMaps(y_cls, y_reg, y_seg)


def random_scene(rng, cfg, n_targets, scene_id, amplitude_range=(0.5, 2.0),
                 on_grid=False, min_separation_bins=0.0, grid_jitter=0.0):
    """Draw a scene of ``n_targets`` point targets.

    Ranges keep two bins of margin on each side of the unambiguous interval.
    With ``on_grid`` range and azimuth sit exactly on DFT grid points
    (velocity stays continuous); ``grid_jitter`` then moves each range up by
    a uniform fraction of a bin in ``[0, grid_jitter)``. ``min_separation_bins``
    rejects targets closer than that many (range bin, azimuth bin) cells to an
    earlier one.
    """
    spacing = cfg.element_spacing_wavelengths
    grid = azimuth_grid(cfg.n_azimuth_bins, spacing)
    lo_amp, hi_amp = amplitude_range
    targets = []
    cells = []
    attempts = 0
    while len(targets) < n_targets:
        attempts += 1
        if attempts > 1000 * max(1, n_targets):
            raise ValueError("could not place targets with the requested separation")
        if on_grid:
            k = int(rng.integers(2, cfg.n_samples - 2))
            b = int(rng.integers(1, cfg.n_azimuth_bins))
            frac = grid_jitter * float(rng.uniform()) if grid_jitter else 0.0
            r = (k + frac) * cfg.range_bin_m
            az = math.asin(grid[b])
        else:
            r = float(rng.uniform(2.0, cfg.n_samples - 2.0)) * cfg.range_bin_m
            # keep off the endfire edge of the sin grid
            u = float(rng.uniform(grid[0], grid[-1])) if len(grid) > 1 else 0.0
            az = math.asin(max(-0.999, min(0.999, u)))
            k = r / cfg.range_bin_m
            b = u * cfg.n_azimuth_bins * spacing + cfg.n_azimuth_bins // 2
        vmax = cfg.max_velocity_mps
        v = float(rng.uniform(-0.9 * vmax, 0.9 * vmax))
        if lo_amp == hi_amp:
            amp = float(lo_amp)
        else:
            amp = float(np.exp(rng.uniform(math.log(lo_amp), math.log(hi_amp))))
        if min_separation_bins > 0 and any(
                (k - k2) ** 2 + (b - b2) ** 2 < min_separation_bins ** 2 for k2, b2 in cells):
            continue
        cells.append((k, b))
        targets.append(Target(r, v, az, amp))
    seed = int(rng.integers(0, 2 ** 63 - 1))
    return Scene(tuple(targets), rng_seed=seed, scene_id=scene_id)


@dataclass
class DatasetManifest:
    """JSON-lines manifest; record paths are relative to ``root``."""

    root: str
    records: list = field(default_factory=list)

    @property
    def path(self):
        return os.path.join(self.root, "manifest.jsonl")

    def resolve(self, rel):
        return os.path.join(self.root, rel)

    def write(self, path=None):
        path = path or self.path
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        return path

    @classmethod
    def read(cls, path):
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
        return cls(os.path.dirname(os.path.abspath(path)), records)

    def scenes(self):
        return [scene_from_record(rec) for rec in self.records]


def scene_from_record(rec):
    targets = tuple(Target(**t) for t in rec["targets"])
    return Scene(targets, rng_seed=rec.get("rng_seed", 0), scene_id=rec["scene_id"])


def synth_dataset(n_scenes, cfg, target_count_range, seed, out_dir, cfg_digest=None,
                  amplitude_range=(0.5, 2.0), on_grid=False, min_separation_bins=0.0,
                  grid_jitter=0.0):
    """Write ``n_scenes`` ADC cubes plus ``manifest.jsonl`` into ``out_dir``.

    The radar configuration goes alongside as ``radar_config.json`` so later
    stages can recover it from the dataset directory.

    Scene ``i`` is drawn from its own RNG substream ``(seed, i)``, so the
    output is identical for equal arguments regardless of how it is run.
    """
    lo, hi = target_count_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad target_count_range {target_count_range}")
    if hi > cfg.max_targets:
        raise ValueError(f"target_count_range upper bound {hi} exceeds max_targets")
    digest = cfg_digest or cfg.digest()
    adc_dir = os.path.join(out_dir, "adc")
    try:
        os.makedirs(out_dir, exist_ok=True)
        if n_scenes > 0:
            os.makedirs(adc_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    manifest = DatasetManifest(os.path.abspath(out_dir))
    for i in range(n_scenes):
        rng = make_rng(seed, i)
        n_t = int(rng.integers(lo, hi + 1))
        scene = random_scene(rng, cfg, n_t, scene_id=i, amplitude_range=amplitude_range,
                             on_grid=on_grid, min_separation_bins=min_separation_bins,
                             grid_jitter=grid_jitter)
        rel = os.path.join("adc", f"scene_{i:06d}.rten")
        path = manifest.resolve(rel)
        try:
            tensor_write(path, synth_adc(scene, cfg))
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        manifest.records.append({
            "scene_id": i,
            "adc_path": rel,
            "rad_path": None,
            "rng_seed": scene.rng_seed,
            "targets": [t.to_dict() for t in scene.targets],
            "cfg_digest": digest,
        })
    manifest.write()
    write_radar_config(os.path.join(out_dir, RADAR_CONFIG_NAME), cfg)
    return manifest


RADAR_CONFIG_NAME = "radar_config.json"


def write_radar_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_radar_config(path):
    """Load a :class:`RadarConfig` from JSON; unknown keys raise ``ValueError``."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    known = {f.name for f in dataclasses.fields(RadarConfig)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown radar config keys: {sorted(extra)}")
    return RadarConfig(**d)


def load_adc(manifest, rec):
    return tensor_read(manifest.resolve(rec["adc_path"]))
