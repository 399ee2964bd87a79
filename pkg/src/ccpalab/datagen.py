"""Labeled CCPA datasets and meta-learning task families.

Each sample draws its own generator from ``(master_seed, sample_index)``, so a
dataset is a pure function of grid, config and seed regardless of how the
indices are scheduled.

On disk a dataset is ``<name>.csv`` (header ``z_1..z_m,y_1..y_L``) next to
``<name>.manifest.json``. The manifest records the config, grid fingerprints
and SHA-256 digests of both the CSV bytes and the manifest itself.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackScenario, ObservedSample, Variant, observe, sample_distortion
from .case_model import DEFAULT_SIGMA, GridCase, MeasurementModel
from .errors import ConfigError, ExhaustedResampling, HashMismatch, IslandingOutage, SchemaMismatch
from .powerflow import apply_outage, injections

DATASET_FORMAT = "ccpalab-dataset"


@dataclass(frozen=True)
class GenConfig:
    n_samples: int = 1000
    attack_mix: dict = field(default_factory=lambda: {"partial": 1.0})
    max_outage: int = 2
    load_range: tuple[float, float] = (0.8, 1.2)
    noisy: bool = True
    mtd_active: bool = False
    master_seed: int = 0
    sigma: float = DEFAULT_SIGMA
    c_support: tuple[int, int] = (1, 4)
    c_scale: float = 0.1
    max_resample: int = 100

    def __post_init__(self):
        mix = {Variant(k).value: float(v) for k, v in dict(self.attack_mix).items()}
        object.__setattr__(self, "attack_mix", mix)
        object.__setattr__(self, "load_range", tuple(self.load_range))
        object.__setattr__(self, "c_support", tuple(self.c_support))
        if any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
            raise ConfigError("attack_mix weights must be non-negative with a positive sum")
        if self.max_outage < 1:
            raise ConfigError("max_outage must be at least 1")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative")
        lo, hi = self.load_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad load_range {self.load_range}")

    @classmethod
    def single(cls, variant, **kw) -> GenConfig:
        return cls(attack_mix={Variant(variant).value: 1.0}, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["load_range"] = list(self.load_range)
        d["c_support"] = list(self.c_support)
        return d


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stacked samples: ``z`` is (K, m), ``y`` is (K, L)."""

    z: np.ndarray
    y: np.ndarray
    manifest: dict

    def __len__(self) -> int:
        return len(self.z)

    @property
    def samples(self) -> list[ObservedSample]:
        variants = self.manifest.get("variants")
        meta = {"mtd_active": self.manifest["config"]["mtd_active"]}
        return [
            ObservedSample(
                z_obs=self.z[k],
                y=self.y[k],
                meta=dict(meta, variant=variants if isinstance(variants, str) else variants[k], seed=k),
            )
            for k in range(len(self))
        ]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        manifest = dict(self.manifest, n_samples=int(idx.size), parent_indices=idx.tolist())
        variants = manifest.get("variants")
        if isinstance(variants, list):
            manifest["variants"] = [variants[i] for i in idx]
        return Dataset(z=self.z[idx], y=self.y[idx], manifest=manifest)


def outage_candidates(grid: GridCase) -> list[int]:
    """In-service non-bridge branches; bridges are never sampled as outages."""
    bridges = grid.bridges()
    return [br.index for br in grid.branches if br.in_service and br.index not in bridges]


def _sample(grid, attacker_view, cfg, candidates, variants, weights, sigma, index):
    rng = np.random.default_rng([cfg.master_seed, index])
    lo, hi = cfg.load_range
    loads = injections(grid, rng.uniform(lo, hi, grid.n_bus))
    for _ in range(cfg.max_resample):
        k = int(rng.integers(1, min(cfg.max_outage, len(candidates)) + 1))
        lines = frozenset(int(l) for l in rng.choice(candidates, size=k, replace=False))
        try:
            apply_outage(grid, lines)
            break
        except IslandingOutage:
            continue
    else:
        raise ExhaustedResampling(f"no admissible outage after {cfg.max_resample} draws (sample {index})")
    variant = variants[int(rng.choice(len(variants), p=weights))]
    c = None
    if variant is Variant.EXTRA:
        c = sample_distortion(attacker_view.n_states, rng, cfg.c_support, cfg.c_scale)
    scenario = AttackScenario(outage_lines=lines, variant=variant, attacker_view=attacker_view, c=c)
    return observe(grid, scenario, loads, sigma, rng, cfg.noisy, mtd_active=cfg.mtd_active, seed=index)


def generate_dataset(
    grid: GridCase,
    model: MeasurementModel | None,
    cfg: GenConfig,
    *,
    attacker_view: GridCase | None = None,
    topology_id: str = "base",
) -> Dataset:
    """Sample ``cfg.n_samples`` attacked measurements on ``grid``.

    ``grid`` is the physical (post-MTD, if any) system; ``attacker_view`` is
    what the attacker believes, and defaults to ``grid``. ``model`` only
    supplies the per-channel noise level; ``cfg.sigma`` is used without it.
    """
    if cfg.mtd_active and attacker_view is None:
        raise ConfigError("mtd_active needs the attacker's stale view of the grid")
    if not cfg.mtd_active and attacker_view is not None and attacker_view != grid:
        raise ConfigError("attacker view differs from the grid but mtd_active is off")
    view = grid if attacker_view is None else attacker_view
    sigma = cfg.sigma if model is None else model.sigma
    candidates = outage_candidates(grid)
    if not candidates:
        raise ExhaustedResampling("grid has no non-bridge branch to outage")
    variants = [Variant(v) for v in sorted(cfg.attack_mix)]
    w = np.array([cfg.attack_mix[v.value] for v in variants])
    weights = w / w.sum()
    m, L = grid.n_measurements, grid.n_branch
    z = np.empty((cfg.n_samples, m))
    y = np.empty((cfg.n_samples, L))
    kinds = []
    for k in range(cfg.n_samples):
        s = _sample(grid, view, cfg, candidates, variants, weights, sigma, k)
        z[k], y[k] = s.z_obs, s.y
        kinds.append(s.meta["variant"])
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "config": cfg.to_dict(),
        "grid_fingerprint": grid.fingerprint(),
        "attacker_fingerprint": view.fingerprint(),
        "topology_id": topology_id,
        "creation_seed": cfg.master_seed,
        "n_samples": cfg.n_samples,
        "m": m,
        "L": L,
        "bridge_lines": sorted(grid.bridges()),
        "variants": kinds[0] if len(set(kinds)) == 1 else kinds,
    }
    if not kinds:
        manifest["variants"] = variants[0].value if len(variants) == 1 else []
    return Dataset(z=z, y=y, manifest=manifest)


def perturbed_topology(grid: GridCase, rng, width: float = 0.2) -> GridCase:
    """All reactances scaled i.i.d. uniform in [1 - width, 1 + width]."""
    scale = rng.uniform(1 - width, 1 + width, grid.n_branch)
    return grid.with_reactances(grid.reactances * scale)


def generate_meta_tasks(
    grid: GridCase,
    n_topologies: int,
    n_per_topology: int,
    cfg: GenConfig,
    rng,
    width: float = 0.2,
) -> list[Dataset]:
    """One dataset per randomized topology.

    With ``cfg.mtd_active`` the attacker keeps the unperturbed ``grid`` as
    its (stale) view, mirroring what happens after an MTD move.
    """
    tasks = []
    for k in range(n_topologies):
        topo = perturbed_topology(grid, rng, width)
        task_cfg = replace(cfg, n_samples=n_per_topology, master_seed=int(rng.integers(2**62)))
        tasks.append(
            generate_dataset(
                topo,
                None,
                task_cfg,
                attacker_view=grid if cfg.mtd_active else None,
                topology_id=f"topology-{k}",
            )
        )
    return tasks


# -- persistence -----------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


def _digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _csv_bytes(ds: Dataset) -> bytes:
    m, L = ds.z.shape[1], ds.y.shape[1]
    buf = io.StringIO()
    buf.write(",".join([f"z_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(L)]) + "\n")
    for zr, yr in zip(ds.z.tolist(), ds.y.astype(int).tolist()):
        buf.write(",".join([repr(v) for v in zr] + [str(v) for v in yr]) + "\n")
    return buf.getvalue().encode()


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    data = _csv_bytes(ds)
    manifest = dict(ds.manifest, data_sha256=hashlib.sha256(data).hexdigest(), n_samples=len(ds))
    manifest["manifest_sha256"] = _digest(manifest)
    path.write_bytes(data)
    _sidecar(path).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def load_dataset(path, grid: GridCase | None = None) -> Dataset:
    path = Path(path)
    try:
        data = path.read_bytes()
        manifest = json.loads(_sidecar(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise SchemaMismatch("not a dataset manifest")
    if manifest.get("manifest_sha256") != _digest(manifest):
        raise HashMismatch("manifest digest does not match its contents")
    if manifest.get("data_sha256") != hashlib.sha256(data).hexdigest():
        raise HashMismatch("CSV content does not match the manifest digest")
    if grid is not None and grid.fingerprint() != manifest["grid_fingerprint"]:
        raise HashMismatch("dataset was generated on a different grid")
    lines = data.decode().splitlines()
    m, L = manifest["m"], manifest["L"]
    header = lines[0].split(",")
    if header != [f"z_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(L)]:
        raise SchemaMismatch("CSV header does not match manifest dimensions")
    rows = lines[1:]
    if len(rows) != manifest["n_samples"]:
        raise SchemaMismatch(f"manifest says {manifest['n_samples']} rows, CSV has {len(rows)}")
    table = np.array([[float(v) for v in r.split(",")] for r in rows]).reshape(len(rows), m + L)
    return Dataset(z=table[:, :m], y=table[:, m:], manifest=manifest)
