"""Analytic toy flow samples, rigid-motion augmentation and on-disk datasets.

Two generators stand in for the two symmetry regimes of CFD benchmarks:

* external flow: potential flow past a sphere, inflow fixed along +x in the
  canonical regime (wind-tunnel convention);
* internal flow: Poiseuille flow in a straight tube whose axis is drawn
  uniformly on the sphere (no canonical frame).

Datasets live on disk as ``<root>/<split>/sample_%06d.nsf`` plus
``<root>/manifest.json``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from equiflow import meshes, nsf
from equiflow.errors import AngleOutOfRange, ShapeMismatch, ValidationError
from equiflow.pga import RigidMotion

SPLITS = ("train", "val", "test")

_ARRAY_FIELDS = (
    "surface_pos",
    "volume_pos",
    "surface_vec",
    "volume_vec",
    "surface_scal",
    "volume_scal",
    "surface_target",
    "volume_target",
    "mesh_vertices",
    "triangles",
)


@dataclass
class Sample:
    """One simulation case in raw (unscaled) units.

    ``*_vec`` hold vector-valued input features ``[N, K, 3]``; ``*_scal`` hold invariant
    scalar features ``[N, D]``.  ``surface_target`` is ``[Ns]`` for a scalar field or
    ``[Ns, 3]`` for a vector field; ``volume_target`` is always ``[Nv, 3]``.
    """

    surface_pos: np.ndarray
    volume_pos: np.ndarray
    surface_vec: np.ndarray
    volume_vec: np.ndarray
    surface_scal: np.ndarray
    volume_scal: np.ndarray
    surface_target: np.ndarray
    volume_target: np.ndarray
    mesh_vertices: np.ndarray
    triangles: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def surface_target_is_vector(self) -> bool:
        return self.surface_target.ndim == 2

    def to_fields(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS}

    @classmethod
    def from_fields(cls, fields: dict[str, np.ndarray], meta: dict) -> Sample:
        missing = [n for n in _ARRAY_FIELDS if n not in fields]
        if missing:
            raise ShapeMismatch(f"sample file lacks fields {missing}")
        return cls(**{n: fields[n] for n in _ARRAY_FIELDS}, meta=meta)

    def copy(self) -> Sample:
        return Sample(**{n: getattr(self, n).copy() for n in _ARRAY_FIELDS}, meta=json.loads(json.dumps(self.meta)))

    def subsample(self, n_surface: int, n_volume: int, rng: np.random.Generator) -> Sample:
        si = np.sort(rng.choice(len(self.surface_pos), size=min(n_surface, len(self.surface_pos)), replace=False))
        vi = np.sort(rng.choice(len(self.volume_pos), size=min(n_volume, len(self.volume_pos)), replace=False))
        return replace(
            self,
            surface_pos=self.surface_pos[si],
            surface_vec=self.surface_vec[si],
            surface_scal=self.surface_scal[si],
            surface_target=self.surface_target[si],
            volume_pos=self.volume_pos[vi],
            volume_vec=self.volume_vec[vi],
            volume_scal=self.volume_scal[vi],
            volume_target=self.volume_target[vi],
        )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _uniform_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    return _unit(rng.normal(size=(n, 3)))


# --- external flow ------------------------------------------------------------------------


@dataclass
class ToyAeroParams:
    radius: float = 1.0
    speed: float = 1.0
    inflow: tuple[float, float, float] = (1.0, 0.0, 0.0)
    subdivisions: int = 3
    n_surface: int = 512
    n_volume: int = 2048

    def __post_init__(self):
        if not self.radius > 0 or not self.speed > 0:
            raise ValidationError("radius and speed must be positive")
        if self.n_surface < 1 or self.n_volume < 1:
            raise ValidationError("point counts must be positive")

    @classmethod
    def draw(cls, rng: np.random.Generator, **overrides) -> ToyAeroParams:
        kw = dict(radius=float(rng.uniform(0.5, 1.5)), speed=float(rng.uniform(0.5, 2.0)))
        kw.update(overrides)
        return cls(**kw)


def potential_flow_velocity(x: np.ndarray, radius: float, speed: float, inflow) -> np.ndarray:
    """Velocity of inviscid incompressible flow past a sphere centred at the origin."""
    d = _unit(np.asarray(inflow, dtype=float))
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    rhat = x / r
    k = radius**3 / r**3
    cos = rhat @ d
    return speed * (d * (1 + 0.5 * k) - 1.5 * k * cos[..., None] * rhat)


def pressure_coefficient(x: np.ndarray, inflow) -> np.ndarray:
    """Surface pressure coefficient ``1 - 9/4 sin^2(theta)`` for flow past a sphere."""
    d = _unit(np.asarray(inflow, dtype=float))
    cos = _unit(x) @ d
    return 1.0 - 2.25 * (1.0 - cos**2)


def gen_external_flow_sample(p: ToyAeroParams, rng: np.random.Generator) -> Sample:
    d = _unit(np.asarray(p.inflow, dtype=float))
    a, U = p.radius, p.speed

    nrm = _uniform_directions(rng, p.n_surface)
    spos = a * nrm
    cp = pressure_coefficient(spos, d)

    r_lo, r_hi = a * (1 + 1e-3), 4 * a
    r = np.cbrt(rng.uniform(r_lo**3, r_hi**3, size=p.n_volume))
    vdir = _uniform_directions(rng, p.n_volume)
    vpos = r[:, None] * vdir
    u = potential_flow_velocity(vpos, a, U, d)

    prior_s = np.broadcast_to(U * d, (p.n_surface, 3))
    prior_v = np.broadcast_to(U * d, (p.n_volume, 3))
    verts, faces = meshes.icosphere(p.subdivisions, a)
    meta = {
        "kind": "aero",
        "alignment": "canonical",
        "params": {**asdict(p), "inflow": d.tolist()},
        "surface_target_name": "cp",
        "volume_target_name": "u",
        "surface_vec_names": ["normal", "freestream"],
        "volume_vec_names": ["freestream", "wall_normal"],
        "surface_scal_names": [],
        "volume_scal_names": ["dist_wall"],
        "surface_scal_length": [],
        "volume_scal_length": [True],
    }
    return Sample(
        surface_pos=spos,
        volume_pos=vpos,
        surface_vec=np.stack([nrm, prior_s], axis=1),
        volume_vec=np.stack([prior_v, vdir], axis=1),
        surface_scal=np.zeros((p.n_surface, 0)),
        volume_scal=(r - a)[:, None],
        surface_target=cp,
        volume_target=u,
        mesh_vertices=verts,
        triangles=faces,
        meta=meta,
    )


# --- internal flow ------------------------------------------------------------------------


@dataclass
class ToyHemoParams:
    radius: float = 0.75
    length: float = 5.0
    peak_speed: float = 1.0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_surface: int = 512
    n_volume: int = 2048
    n_theta: int = 24
    n_z: int = 16

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("tube radius must be positive")
        if not self.length > 2 * self.radius:
            raise ValidationError("tube length must exceed its diameter")
        if self.n_surface < 1 or self.n_volume < 1:
            raise ValidationError("point counts must be positive")

    @classmethod
    def draw(cls, rng: np.random.Generator, **overrides) -> ToyHemoParams:
        kw = dict(
            radius=float(rng.uniform(0.5, 1.0)),
            length=float(rng.uniform(4.0, 6.0)),
            peak_speed=float(rng.uniform(0.5, 2.0)),
            axis=tuple(_uniform_directions(rng, 1)[0]),
            offset=tuple(rng.uniform(-0.5, 0.5, size=3)),
        )
        kw.update(overrides)
        return cls(**kw)


VISCOSITY = 1.0


def _frame_to_axis(axis: np.ndarray) -> np.ndarray:
    """Rotation taking +z to ``axis``."""
    axis = _unit(axis)
    z = np.array([0.0, 0.0, 1.0])
    c = float(z @ axis)
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    rot, _ = Rotation.align_vectors([axis], [z])
    return rot.as_matrix()


def poiseuille_velocity(s: np.ndarray, radius: float, peak_speed: float, axis) -> np.ndarray:
    """Velocity at distance ``s`` from the tube axis."""
    return np.asarray(axis, dtype=float) * (peak_speed * (1 - (s / radius) ** 2))[..., None]


def gen_internal_flow_sample(p: ToyHemoParams, rng: np.random.Generator) -> Sample:
    R, L = p.radius, p.length
    axis = _unit(np.asarray(p.axis, dtype=float))
    frame = _frame_to_axis(axis)
    origin = np.asarray(p.offset, dtype=float)

    def place(local):
        local = local - np.array([0.0, 0.0, L / 2])
        return local @ frame.T + origin

    th = rng.uniform(0, 2 * np.pi, size=p.n_surface)
    zs = rng.uniform(0, L, size=p.n_surface)
    radial = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
    spos = place(R * radial + zs[:, None] * np.array([0.0, 0.0, 1.0]))
    normal = radial @ frame.T
    tau = np.broadcast_to(axis * (2 * VISCOSITY * p.peak_speed / R), (p.n_surface, 3)).copy()

    s = R * np.sqrt(rng.uniform(0, 1, size=p.n_volume))
    tv = rng.uniform(0, 2 * np.pi, size=p.n_volume)
    zv = rng.uniform(0, L, size=p.n_volume)
    vlocal = np.stack([s * np.cos(tv), s * np.sin(tv), zv], axis=1)
    vpos = place(vlocal)
    u = poiseuille_velocity(s, R, p.peak_speed, axis)

    verts, faces = meshes.open_cylinder(R, L, p.n_theta, p.n_z)
    verts = place(verts)

    ones_s, ones_v = np.ones(p.n_surface), np.ones(p.n_volume)
    meta = {
        "kind": "hemo",
        "alignment": "canonical",
        "params": {**asdict(p), "axis": axis.tolist(), "offset": origin.tolist()},
        "surface_target_name": "wss",
        "volume_target_name": "u",
        "surface_vec_names": ["normal", "inflow_dir"],
        "volume_vec_names": ["inflow_dir"],
        "surface_scal_names": ["dist_inlet", "dist_outlet", "peak_speed", "inlet_radius"],
        "volume_scal_names": ["dist_wall", "dist_inlet", "dist_outlet", "peak_speed", "inlet_radius"],
        "surface_scal_length": [True, True, False, True],
        "volume_scal_length": [True, True, True, False, True],
    }
    return Sample(
        surface_pos=spos,
        volume_pos=vpos,
        surface_vec=np.stack([normal, np.broadcast_to(axis, (p.n_surface, 3))], axis=1),
        volume_vec=np.broadcast_to(axis, (p.n_volume, 3))[:, None, :].copy(),
        surface_scal=np.stack([zs, L - zs, p.peak_speed * ones_s, R * ones_s], axis=1),
        volume_scal=np.stack([R - s, zv, L - zv, p.peak_speed * ones_v, R * ones_v], axis=1),
        surface_target=tau,
        volume_target=u,
        mesh_vertices=verts,
        triangles=faces,
        meta=meta,
    )


# --- rigid motions ------------------------------------------------------------------------


def parse_rotation_mode(mode: str) -> tuple[str, float | None]:
    """``"haar"``, ``"bounded:30"``, ``"per_axis_bounded:30"``, ``"none"``/``"canonical"``."""
    name, _, arg = mode.partition(":")
    if name in ("none", "canonical"):
        return "none", None
    if name == "haar":
        return "haar", None
    if name in ("bounded", "per_axis_bounded"):
        try:
            deg = float(arg)
        except ValueError:
            raise ValidationError(f"rotation mode {mode!r} needs a degree bound, e.g. {name}:30") from None
        return name, deg
    raise ValidationError(f"unknown rotation mode {mode!r}")


def random_rotation(mode: str, rng: np.random.Generator, x_deg: float | None = None) -> RigidMotion:
    """Random rotation about the origin.

    ``haar``: uniform on SO(3) from a normalised Gaussian quaternion.
    ``per_axis_bounded``: intrinsic X-Y-Z angles each uniform in ``[-x_deg, x_deg]``.
    ``bounded``: uniform axis, angle uniform in ``[0, x_deg]``.
    """
    if ":" in mode:
        mode, x_deg = parse_rotation_mode(mode)
    if mode == "none":
        return RigidMotion.identity()
    if mode == "haar":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return RigidMotion(Rotation.from_quat(q).as_matrix(), np.zeros(3))
    if x_deg is None or not 0.0 <= x_deg <= 180.0:
        raise AngleOutOfRange(f"rotation bound must be in [0, 180], got {x_deg}")
    if mode == "per_axis_bounded":
        angles = rng.uniform(-x_deg, x_deg, size=3)
        if x_deg == 0:
            return RigidMotion.identity()
        return RigidMotion(Rotation.from_euler("XYZ", angles, degrees=True).as_matrix(), np.zeros(3))
    if mode == "bounded":
        axis = _uniform_directions(rng, 1)[0]
        angle = rng.uniform(0.0, x_deg)
        if x_deg == 0:
            return RigidMotion.identity()
        return RigidMotion(Rotation.from_rotvec(np.deg2rad(angle) * axis).as_matrix(), np.zeros(3))
    raise ValidationError(f"unknown rotation mode {mode!r}")


def rotation_about(m: RigidMotion, center) -> RigidMotion:
    """The motion ``m`` conjugated so its rotation pivots on ``center``."""
    c = np.asarray(center, dtype=float)
    return RigidMotion(m.rotation, m.rotation @ (-c) + c + m.translation)


def _is_identity(m: RigidMotion) -> bool:
    return np.array_equal(m.rotation, np.eye(3)) and not np.any(m.translation)


def apply_rigid_motion(sample: Sample, m: RigidMotion) -> Sample:
    """Positions move, vector fields rotate, scalars and connectivity stay."""
    m.check(1e-10)
    if _is_identity(m):
        return sample.copy()
    target = sample.surface_target
    meta = json.loads(json.dumps(sample.meta))
    params = meta.get("params", {})
    for key in ("inflow", "axis"):
        if key in params:
            params[key] = m.apply_vectors(np.asarray(params[key])).tolist()
    if "offset" in params:
        params["offset"] = m.apply_points(np.asarray(params["offset"])).tolist()
    return Sample(
        surface_pos=m.apply_points(sample.surface_pos),
        volume_pos=m.apply_points(sample.volume_pos),
        surface_vec=m.apply_vectors(sample.surface_vec),
        volume_vec=m.apply_vectors(sample.volume_vec),
        surface_scal=sample.surface_scal.copy(),
        volume_scal=sample.volume_scal.copy(),
        surface_target=m.apply_vectors(target) if sample.surface_target_is_vector else target.copy(),
        volume_target=m.apply_vectors(sample.volume_target),
        mesh_vertices=m.apply_points(sample.mesh_vertices),
        triangles=sample.triangles.copy(),
        meta=meta,
    )


# --- datasets -----------------------------------------------------------------------------


def sample_path(root: Path, split: str, i: int) -> Path:
    return Path(root) / split / f"sample_{i:06d}.nsf"


def nsf_write(path, sample: Sample) -> None:
    nsf.write(path, sample.to_fields(), sample.meta)


def nsf_read(path) -> Sample:
    fields, meta = nsf.read(path)
    return Sample.from_fields(fields, meta)


def generate_sample(kind: str, alignment: str, rng: np.random.Generator, n_surface: int, n_volume: int) -> Sample:
    if kind == "aero":
        s = gen_external_flow_sample(ToyAeroParams.draw(rng, n_surface=n_surface, n_volume=n_volume), rng)
    elif kind == "hemo":
        s = gen_internal_flow_sample(
            ToyHemoParams.draw(rng, n_surface=n_surface, n_volume=n_volume, axis=(1.0, 0.0, 0.0)), rng
        )
    else:
        raise ValidationError(f"unknown dataset kind {kind!r}")
    mode, deg = parse_rotation_mode(alignment)
    if mode != "none":
        s = apply_rigid_motion(s, random_rotation(mode, rng, deg))
    s.meta["alignment"] = alignment_label(alignment)
    return s


def alignment_label(alignment: str) -> str:
    mode, deg = parse_rotation_mode(alignment)
    if mode == "none":
        return "canonical"
    if mode == "haar":
        return "haar"
    return f"{mode}:{deg:g}"


def generate_dataset(
    kind: str,
    counts: dict[str, int],
    alignment: str = "canonical",
    seed: int = 0,
    n_surface: int = 512,
    n_volume: int = 2048,
) -> dict[str, list[Sample]]:
    """Deterministic in ``seed``; every sample gets its own spawned generator."""
    if any(c < 0 for c in counts.values()) or sum(counts.values()) < 1:
        raise ValidationError("dataset needs at least one sample")
    seqs = np.random.SeedSequence(seed).spawn(sum(counts.values()))
    out: dict[str, list[Sample]] = {}
    k = 0
    for split, count in counts.items():
        out[split] = []
        for _ in range(count):
            out[split].append(generate_sample(kind, alignment, np.random.default_rng(seqs[k]), n_surface, n_volume))
            k += 1
    return out


def all_positions(sample: Sample) -> np.ndarray:
    return np.concatenate([sample.surface_pos, sample.volume_pos])


def write_dataset(root, data: dict[str, list[Sample]], manifest: dict) -> None:
    from equiflow.preprocess import compute_position_scaling

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scaling = compute_position_scaling([s for split in data.values() for s in split])
    for split, samples in data.items():
        for i, s in enumerate(samples):
            nsf_write(sample_path(root, split, i), s)
    manifest = {
        **manifest,
        "splits": {k: len(v) for k, v in data.items()},
        "scaling": scaling.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{path} not found; is this a dataset directory?")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[Sample]:
    manifest = read_manifest(root)
    n = manifest["splits"].get(split, 0)
    return [nsf_read(sample_path(root, split, i)) for i in range(n)]


def load_dataset(root) -> dict[str, list[Sample]]:
    manifest = read_manifest(root)
    return {split: load_split(root, split) for split in manifest["splits"]}
