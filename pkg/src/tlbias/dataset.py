"""Reactor geometry, synthetic fuel-cycle generation, and the cycle file format.

Plant data is proprietary, so cycles are synthesized. Each cycle draws fixed
per-assembly power and peaking factors, evolves an axial power shape with
exposure, and applies a smooth, mostly input-dependent bias field to turn
offline MFLPD into "online" MFLPD.

Randomness: ``numpy.random.default_rng([global_seed, cycle_seed])`` (PCG64
seeded through SeedSequence). Draw order per cycle: assembly normals (H, W),
peaking uniforms (H, W), harmonic parameters, then one (H, W, D) normal array
per statepoint for observation noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError, UsageError

CYCLE_FORMAT_VERSION = 1
PRNG_NAME = "numpy.PCG64(SeedSequence([global_seed, cycle_seed]))"
BLOB_KINDS = ("np", "mflpd_off", "mflpd_on")


@dataclass
class ReactorGeometry:
    H: int
    W: int
    D: int
    chamfer: int
    mask: np.ndarray = field(repr=False)

    @property
    def column_mask(self) -> np.ndarray:
        return self.mask[:, :, 0]

    @property
    def valid_columns(self) -> int:
        return int(self.column_mask.sum())

    @property
    def valid_nodes(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> tuple:
        return (self.H, self.W, self.D)


def build_octagon_mask(H: int, W: int, D: int, chamfer: int) -> ReactorGeometry:
    """Rectangular lattice with its four corners cut off at depth ``chamfer``.

    Column (h, w) is outside the core when
    ``min(h, H-1-h) + min(w, W-1-w) < chamfer``; the mask is the same on
    every axial level.
    """
    if min(H, W, D) < 1:
        raise DomainError(f"lattice extents must be positive, got {(H, W, D)}")
    if not 0 <= chamfer <= min(H, W) // 2:
        raise DomainError(f"chamfer {chamfer} outside [0, {min(H, W) // 2}] for a {H}x{W} lattice")
    h = np.arange(H)[:, None]
    w = np.arange(W)[None, :]
    cols = np.minimum(h, H - 1 - h) + np.minimum(w, W - 1 - w) >= chamfer
    if not cols.any():
        raise DomainError(f"chamfer {chamfer} leaves no valid column")
    mask = np.repeat(cols[:, :, None], D, axis=2)
    return ReactorGeometry(H, W, D, chamfer, mask)


@dataclass
class GeneratorParams:
    target_peak_mflpd: float = 0.85
    assembly_sigma: float = 0.1
    peaking_amplitude: float = 0.15
    alpha: float = 0.06
    beta: float = 0.03
    gamma: float = 0.01
    noise_sigma: float = 0.004
    statepoints: int = 48
    clamp_max: float = 1.2

    def validate(self) -> None:
        bad = []
        for k in ("target_peak_mflpd", "clamp_max"):
            if getattr(self, k) <= 0:
                bad.append(f"{k} must be > 0")
        for k in ("assembly_sigma", "peaking_amplitude", "alpha", "beta", "gamma", "noise_sigma"):
            if getattr(self, k) < 0:
                bad.append(f"{k} must be >= 0")
        if self.statepoints < 2:
            bad.append("statepoints must be >= 2")
        if bad:
            raise ConfigError("invalid GeneratorParams: " + "; ".join(bad))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GeneratorParams fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Statepoint:
    index: int
    exposure_fraction: float
    np_off: np.ndarray = field(repr=False)
    mflpd_off: np.ndarray = field(repr=False)
    mflpd_on: np.ndarray = field(repr=False)


@dataclass
class FuelCycle:
    cycle_id: str
    geometry: ReactorGeometry
    statepoints: list[Statepoint]
    provenance: dict

    @property
    def T(self) -> int:
        return len(self.statepoints)


def _radial_coords(geom: ReactorGeometry):
    h = np.arange(geom.H)[:, None] - (geom.H - 1) / 2.0
    w = np.arange(geom.W)[None, :] - (geom.W - 1) / 2.0
    rho = np.sqrt(h * h + w * w)
    theta = np.arctan2(w, h)
    rho_max = rho[geom.column_mask].max()
    if rho_max == 0:
        rho_max = 1.0
    return rho, theta, rho_max


def radial_harmonic(geom: ReactorGeometry, harmonic: dict) -> np.ndarray:
    """Unit-amplitude smooth radial/azimuthal pattern g(h, w)."""
    rho, theta, rho_max = _radial_coords(geom)
    return (np.cos(harmonic["m"] * theta + harmonic["phase_theta"])
            * np.cos(math.pi * harmonic["k"] * rho / rho_max + harmonic["phase_rho"]))


def axial_shape(D: int, tau: float) -> np.ndarray:
    z = (np.arange(D) + 0.5) / D
    return np.sin(math.pi * z ** (0.9 + 0.2 * tau))


def axial_tilt(D: int) -> np.ndarray:
    if D == 1:
        return np.zeros(1)
    return 2.0 * np.arange(D) / (D - 1) - 1.0


def systematic_bias(np_off: np.ndarray, tau: float, params: GeneratorParams) -> np.ndarray:
    """Bias factor minus its cycle-specific harmonic and noise terms.

    This is the part that depends only on observable inputs (nodal power,
    axial position, exposure).
    """
    D = np_off.shape[2]
    return (1.0 + params.alpha * (np_off - 1.0) * math.sin(math.pi * tau)
            + params.beta * axial_tilt(D)[None, None, :] * math.cos(math.pi * tau))


def generate_cycle(geom: ReactorGeometry, params: GeneratorParams, global_seed: int,
                   cycle_seed: int, cycle_id: str | None = None) -> FuelCycle:
    """Synthesize one fuel cycle; deterministic in (global_seed, cycle_seed)."""
    params.validate()
    T = params.statepoints
    mask = geom.mask
    cols = geom.column_mask
    rng = np.random.default_rng([int(global_seed), int(cycle_seed)])
    u = rng.standard_normal((geom.H, geom.W))
    v = rng.uniform(0.0, 1.0, (geom.H, geom.W))
    harmonic = {
        "m": int(rng.integers(1, 4)),
        "k": int(rng.integers(1, 3)),
        "phase_theta": float(rng.uniform(0.0, 2 * math.pi)),
        "phase_rho": float(rng.uniform(0.0, 2 * math.pi)),
    }
    rho, _, rho_max = _radial_coords(geom)
    radial = np.cos(math.pi * rho / (2.2 * rho_max))
    assembly = np.where(cols, np.exp(params.assembly_sigma * u), 0.0)
    peaking = 1.0 + params.peaking_amplitude * v
    g = radial_harmonic(geom, harmonic)

    nodal_power, taus = [], []
    for t in range(T):
        tau = t / (T - 1)
        raw = axial_shape(geom.D, tau)[None, None, :] * (radial * assembly)[:, :, None]
        raw = np.where(mask, raw, 0.0)
        nodal_power.append(raw / raw[mask].mean())
        taus.append(tau)
    # normalizer playing the thermal-mechanical-limit role, one per cycle
    kappa = max(float((p * peaking[:, :, None])[mask].max()) for p in nodal_power)
    kappa /= params.target_peak_mflpd

    statepoints = []
    for t, (npo, tau) in enumerate(zip(nodal_power, taus)):
        eps = params.noise_sigma * rng.standard_normal(mask.shape)
        mflpd_off = npo * peaking[:, :, None] / kappa
        b = systematic_bias(npo, tau, params) + params.gamma * g[:, :, None] + eps
        mflpd_on = np.clip(mflpd_off * b, 0.0, params.clamp_max)
        statepoints.append(Statepoint(
            index=t,
            exposure_fraction=tau,
            np_off=np.where(mask, npo, 0.0).astype(np.float32),
            mflpd_off=np.where(mask, mflpd_off, 0.0).astype(np.float32),
            mflpd_on=np.where(mask, mflpd_on, 0.0).astype(np.float32),
        ))

    provenance = {
        "global_seed": int(global_seed),
        "cycle_seed": int(cycle_seed),
        "prng": PRNG_NAME,
        "params": params.to_dict(),
        "kappa": kappa,
        "harmonic": harmonic,
    }
    return FuelCycle(cycle_id or f"cycle_{cycle_seed:02d}", geom, statepoints, provenance)


def generate_dataset(geom: ReactorGeometry, params: GeneratorParams, n_cycles: int,
                     global_seed: int) -> list[FuelCycle]:
    """``n_cycles`` cycles with ids ``cycle_00``... in chronological order."""
    if n_cycles < 1:
        raise ConfigError("n_cycles must be >= 1")
    return [generate_cycle(geom, params, global_seed, i) for i in range(n_cycles)]


def limit_series(cycle: FuelCycle, which: str) -> np.ndarray:
    """Per-statepoint masked maximum of ``np_off``/``mflpd_off``/``mflpd_on``."""
    m = cycle.geometry.mask
    return np.array([float(getattr(sp, which)[m].max()) for sp in cycle.statepoints])


def learnability_floor(cycle: FuelCycle) -> dict:
    """Error left by an ideal regressor that knows the systematic bias exactly.

    Such a regressor misses only the harmonic perturbation and the noise;
    returned metrics are against the cycle's online values, in float64.
    """
    params = GeneratorParams.from_dict(cycle.provenance["params"])
    m = cycle.geometry.mask
    sq, count, gaps = 0.0, 0, []
    for sp in cycle.statepoints:
        off = sp.mflpd_off.astype(np.float64)
        ideal = np.clip(off * systematic_bias(sp.np_off.astype(np.float64),
                                              sp.exposure_fraction, params),
                        0.0, params.clamp_max)
        on = sp.mflpd_on.astype(np.float64)
        d = ideal[m] - on[m]
        sq += float(np.sum(d * d))
        count += d.size
        gaps.append(abs(float(ideal[m].max()) - float(on[m].max())))
    return {"nodal_mse": sq / count, "limit_mae": float(np.mean(gaps)),
            "max_limit_bias": float(np.max(gaps))}


# ---- on-disk format ---------------------------------------------------------

def _blob_name(t: int, kind: str) -> str:
    return f"sp{t}.{kind}.bin"


def _to_le_f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_cycle(cycle: FuelCycle, directory) -> Path:
    """Write a cycle directory: manifest.json, mask.bin, three blobs per statepoint."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = cycle.geometry
    manifest = {
        "format_version": CYCLE_FORMAT_VERSION,
        "cycle_id": cycle.cycle_id,
        "H": g.H, "W": g.W, "D": g.D, "chamfer": g.chamfer,
        "T": cycle.T,
        "dtype": "f32",
        "array_order": "row-major H,W,D",
        "seeds": {"global_seed": cycle.provenance.get("global_seed"),
                  "cycle_seed": cycle.provenance.get("cycle_seed")},
        "generator": {k: v for k, v in cycle.provenance.items()
                      if k not in ("global_seed", "cycle_seed")},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (d / "mask.bin").write_bytes(g.mask.astype(np.uint8).tobytes())
    for sp in cycle.statepoints:
        for kind, arr in zip(BLOB_KINDS, (sp.np_off, sp.mflpd_off, sp.mflpd_on)):
            (d / _blob_name(sp.index, kind)).write_bytes(_to_le_f32(arr))
    return d


def read_blob(path, shape) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing blob {p.name}")
    raw = p.read_bytes()
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise FormatError(f"{p.name}: {len(raw)} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def read_cycle(directory) -> FuelCycle:
    """Load and validate a cycle directory written by :func:`write_cycle`."""
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"{d}: missing manifest.json")
    try:
        man = json.loads(mpath.read_text(encoding="utf-8"))
        H, W, D, T = (int(man[k]) for k in ("H", "W", "D", "T"))
        chamfer = int(man["chamfer"])
        cycle_id = str(man["cycle_id"])
        version = man["format_version"]
        dtype = man["dtype"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{d}: corrupt manifest ({e})") from None
    if version != CYCLE_FORMAT_VERSION or dtype != "f32":
        raise FormatError(f"{d}: unsupported format_version/dtype {version!r}/{dtype!r}")
    if T < 1:
        raise FormatError(f"{d}: T must be positive")
    try:
        geom = build_octagon_mask(H, W, D, chamfer)
    except DomainError as e:
        raise FormatError(f"{d}: bad geometry ({e})") from None
    mraw = (d / "mask.bin").read_bytes() if (d / "mask.bin").is_file() else None
    if mraw is None or len(mraw) != H * W * D:
        raise FormatError(f"{d}: mask.bin missing or of wrong length")
    mask = np.frombuffer(mraw, dtype=np.uint8).reshape(H, W, D)
    if not np.array_equal(mask.astype(bool), geom.mask) or mask.max() > 1:
        raise FormatError(f"{d}: mask.bin disagrees with the declared chamfer")
    n_blobs = sum(1 for p in d.glob("sp*.bin"))
    if n_blobs != 3 * T:
        raise FormatError(f"{d}: manifest declares T={T} ({3 * T} blobs), found {n_blobs}")
    statepoints = []
    for t in range(T):
        arrs = [read_blob(d / _blob_name(t, k), (H, W, D)) for k in BLOB_KINDS]
        statepoints.append(Statepoint(t, t / (T - 1) if T > 1 else 0.0, *arrs))
    prov = dict(man.get("generator", {}))
    prov.update(man.get("seeds", {}))
    return FuelCycle(cycle_id, geom, statepoints, prov)


def split_train_val(items: list, fraction: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first ``round(fraction * n)`` items train."""
    if not 0 < fraction < 1:
        raise UsageError(f"fraction must lie in (0, 1), got {fraction}")
    if not items:
        raise UsageError("cannot split an empty list")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(fraction * len(items)))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]
