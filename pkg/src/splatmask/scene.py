"""Gaussian scene representation, region labels, procedural synthesis and scene files.

A :class:`Scene` stores its primitives column-wise (one array per attribute) so the
renderer can work on whole arrays at once. :class:`GaussianPrimitive` is the per-element
view used for construction and inspection.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

SCHEMA_VERSION = 1
REGIONS = ("eyes", "forehead", "nose", "lips", "other")
REGION_LETTERS = {"E": "eyes", "F": "forehead", "N": "nose", "L": "lips", "O": "other"}
SCALE_FLOOR = 1e-6
_UNIT_TOL = 1e-9


class SceneError(ValueError):
    """Invalid scene contents (invariant violation)."""


class SceneParseError(SceneError):
    """Malformed scene file."""


class SchemaVersionError(SceneError):
    """Scene file declares an unsupported schema_version."""


def n_rest_coeffs(sh_bands: int) -> int:
    """Number of higher-order SH coefficients per channel for ``sh_bands`` bands."""
    return sh_bands * sh_bands - 1


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # (w, x, y, z)
    scale: tuple[float, float, float]
    opacity: float
    sh_dc: tuple[float, float, float]
    sh_rest: tuple[tuple[float, float, float], ...] = ()
    region: str = "other"


@dataclass(frozen=True, eq=False)
class Scene:
    """An ordered, immutable set of anisotropic 3D Gaussians.

    Array shapes: ``means`` (N,3), ``rotations`` (N,4) unit quaternions in (w,x,y,z)
    order, ``scales`` (N,3), ``opacities`` (N,), ``sh_dc`` (N,3),
    ``sh_rest`` (N, B*B-1, 3), ``regions`` length-N tuple of labels.
    """

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray
    regions: tuple[str, ...]
    sh_bands: int = 1
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    schema_version: int = SCHEMA_VERSION
    _validated: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("means", "rotations", "scales", "opacities", "sh_dc", "sh_rest"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        if not self._validated:
            validate_scene(self)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=tuple(self.means[i]),
            rotation=tuple(self.rotations[i]),
            scale=tuple(self.scales[i]),
            opacity=float(self.opacities[i]),
            sh_dc=tuple(self.sh_dc[i]),
            sh_rest=tuple(tuple(row) for row in self.sh_rest[i]),
            region=self.regions[i],
        )

    @classmethod
    def from_primitives(cls, primitives, sh_bands=1, background=(0.5, 0.5, 0.5)) -> Scene:
        primitives = list(primitives)
        if not primitives:
            raise SceneError("scene must contain at least one primitive")
        n_rest = n_rest_coeffs(sh_bands)
        rest = []
        for i, p in enumerate(primitives):
            r = np.zeros((n_rest, 3)) if len(p.sh_rest) == 0 and n_rest else np.asarray(p.sh_rest, float)
            if r.size == 0:
                r = np.zeros((0, 3))
            if r.shape != (n_rest, 3):
                raise SceneError(f"primitive {i}: sh_rest has shape {r.shape}, expected ({n_rest}, 3)")
            rest.append(r)
        return cls(
            means=[p.mean for p in primitives],
            rotations=[p.rotation for p in primitives],
            scales=[p.scale for p in primitives],
            opacities=[p.opacity for p in primitives],
            sh_dc=[p.sh_dc for p in primitives],
            sh_rest=np.stack(rest),
            regions=[p.region for p in primitives],
            sh_bands=sh_bands,
            background=background,
        )

    def replace(self, **changes) -> Scene:
        """Copy with some attribute arrays swapped out; the result is re-validated."""
        kwargs = {
            name: getattr(self, name)
            for name in ("means", "rotations", "scales", "opacities", "sh_dc", "sh_rest",
                         "regions", "sh_bands", "background", "schema_version")
        }
        kwargs.update(changes)
        return Scene(**kwargs)

    def equals(self, other: Scene) -> bool:
        """Field-exact (bitwise for floats) comparison."""
        if not isinstance(other, Scene):
            return False
        if (self.sh_bands, self.background, self.schema_version, self.regions) != (
            other.sh_bands, other.background, other.schema_version, other.regions
        ):
            return False
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("means", "rotations", "scales", "opacities", "sh_dc", "sh_rest")
        )


def validate_scene(scene: Scene) -> None:
    n = scene.means.shape[0] if scene.means.ndim == 2 else 0
    if n == 0:
        raise SceneError("scene must contain at least one primitive")
    if scene.sh_bands < 1 or scene.sh_bands > 3:
        raise SceneError(f"sh_bands must be in 1..3, got {scene.sh_bands}")
    expected = {
        "means": (n, 3),
        "rotations": (n, 4),
        "scales": (n, 3),
        "opacities": (n,),
        "sh_dc": (n, 3),
        "sh_rest": (n, n_rest_coeffs(scene.sh_bands), 3),
    }
    for name, shape in expected.items():
        arr = getattr(scene, name)
        if arr.shape != shape:
            raise SceneError(f"{name} has shape {arr.shape}, expected {shape}")
        bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
        if bad.any():
            raise SceneError(f"primitive {int(np.argmax(bad))}: non-finite {name}")
    if len(scene.regions) != n:
        raise SceneError(f"regions has length {len(scene.regions)}, expected {n}")
    for i, r in enumerate(scene.regions):
        if r not in REGIONS:
            raise SceneError(f"primitive {i}: unknown region {r!r}")
    qn = np.linalg.norm(scene.rotations, axis=1)
    bad = np.abs(qn - 1.0) > _UNIT_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise SceneError(f"primitive {i}: rotation is not a unit quaternion (norm {qn[i]!r})")
    bad = (scene.scales <= 0).any(axis=1)
    if bad.any():
        raise SceneError(f"primitive {int(np.argmax(bad))}: scale components must be > 0")
    bad = (scene.opacities < 0) | (scene.opacities > 1)
    if bad.any():
        i = int(np.argmax(bad))
        raise SceneError(f"primitive {i}: opacity {scene.opacities[i]!r} outside [0, 1]")
    bg = np.asarray(scene.background)
    if bg.shape != (3,) or (bg < 0).any() or (bg > 1).any():
        raise SceneError(f"background must be RGB in [0,1], got {scene.background}")


# --------------------------------------------------------------------------- synthesis


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _inverse_sh(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb) - 0.5) / 0.28209479177387814


# Feature anchors on the unit sphere, (theta = elevation, phi = azimuth from +z).
_ANCHORS = {
    "eyes": [(0.22, -0.38), (0.22, 0.38)],
    "forehead": [(0.62, 0.0)],
    "nose": [(-0.02, 0.0)],
    "lips": [(-0.38, 0.0)],
}
_REGION_SHARE = {"eyes": 0.10, "forehead": 0.12, "nose": 0.06, "lips": 0.07}
_HEAD_CONTRAST = 0.2
_REGION_SPREAD = {"eyes": 0.09, "forehead": 0.22, "nose": 0.08, "lips": 0.09}


def _sphere_dir(theta, phi):
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta), np.cos(theta) * np.cos(phi)], axis=-1)


def _head_like(rng: np.random.Generator, n: int):
    """Layered head: a semi-transparent skin shell over two colored interior layers.

    Identity lives mostly in the low-contrast colors of the layers. Seen from any orbit
    viewpoint the layers project to nearly the same radial color profile, so identity
    survives moderate head rotation while the labeled facial clusters on the front of
    the skin give region masking something to act on.
    """
    radii = np.array([0.82, 0.92, 0.85]) * rng.uniform(0.95, 1.05, size=3)
    n_skin = max(1, int(round(0.6 * n)))
    n_core = n - n_skin
    counts = {r: int(math.floor(_REGION_SHARE[r] * n)) for r in _REGION_SHARE}
    if n >= 5:
        for r in counts:
            counts[r] = max(counts[r], 1)
    else:
        counts = {r: 0 for r in counts}
    n_other = max(n_skin - sum(counts.values()), 0)
    if n_other == 0:
        n_core = n - sum(counts.values())

    def tone(center, spread):
        return np.clip(center + rng.normal(scale=spread, size=3), 0.05, 0.95)

    skin = tone(0.5, 0.12)
    layer_colors = [tone(0.5, 0.15), tone(0.5, 0.15)]
    feature = {
        "eyes": tone(skin, 0.15),
        "forehead": tone(skin, 0.06),
        "nose": tone(skin, 0.06),
        "lips": tone(skin, 0.12),
    }
    wave_k = rng.normal(scale=1.5, size=(3, 3))
    wave_phase = rng.uniform(0, 2 * np.pi, size=3)

    dirs, regs, radial = [], [], []
    d = rng.normal(size=(n_other, 3))
    dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    regs += ["other"] * n_other
    radial.append(np.ones(n_other))
    for r in ("eyes", "forehead", "nose", "lips"):
        anchors = _ANCHORS[r]
        k = counts[r]
        which = np.arange(k) % len(anchors)
        th = np.array([anchors[w][0] for w in which]) + rng.normal(scale=_REGION_SPREAD[r], size=k)
        ph = np.array([anchors[w][1] for w in which]) + rng.normal(scale=_REGION_SPREAD[r], size=k)
        dirs.append(_sphere_dir(th, ph))
        regs += [r] * k
        radial.append(np.full(k, 1.08 if r == "nose" else 1.0))
    # Interior layers, volumetric.
    d = rng.normal(size=(n_core, 3))
    dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    regs += ["other"] * n_core
    layer = np.arange(n_core) % 2
    radial.append(np.where(layer == 0, rng.uniform(0.15, 0.45, n_core), rng.uniform(0.5, 0.8, n_core)))

    dirs = np.concatenate(dirs)
    radial = np.concatenate(radial)
    means = dirs * radii * radial[:, None]
    is_skin = np.zeros(n, dtype=bool)
    is_skin[: n - n_core] = True

    pattern = 0.03 * np.sin(dirs @ wave_k + wave_phase)
    colors = np.empty((n, 3))
    colors[is_skin] = skin
    start = n_other
    for r in ("eyes", "forehead", "nose", "lips"):
        colors[start:start + counts[r]] = feature[r]
        start += counts[r]
    colors[~is_skin] = np.where(layer[:, None] == 0, layer_colors[0], layer_colors[1])
    colors = np.clip(colors + pattern + rng.normal(scale=0.01, size=colors.shape), 0.02, 0.98)
    colors = 0.5 + _HEAD_CONTRAST * (colors - 0.5)

    shell_area = 4 * np.pi * radii.mean() ** 2
    spacing = np.sqrt(shell_area / max(n_skin, 1))
    scales = spacing * np.exp(rng.uniform(np.log(0.5), np.log(0.9), size=(n, 3)))
    scales[~is_skin] *= 1.3
    opac = np.where(is_skin, rng.uniform(0.35, 0.6, size=n), rng.uniform(0.6, 0.9, size=n))
    return means, scales, opac, colors, regs


def synth_scene(seed: int, n_primitives: int, layout: str = "head_like", sh_bands: int = 1) -> Scene:
    """Procedurally generate a scene; a pure function of its arguments.

    ``blob`` scatters Gaussians in a ball, all labeled ``other``. ``head_like`` places them
    on a seed-dependent ellipsoid facing +z, with labeled eye, forehead, nose and lip
    clusters and an identity-specific color palette.
    """
    if n_primitives < 1:
        raise ValueError(f"n_primitives must be >= 1, got {n_primitives}")
    if layout not in ("blob", "head_like"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = substream(seed, "scene", layout)
    n = n_primitives
    n_rest = n_rest_coeffs(sh_bands)

    if layout == "blob":
        means = rng.normal(scale=0.35, size=(n, 3))
        scales = np.exp(rng.uniform(np.log(0.05), np.log(0.2), size=(n, 3)))
        opac = rng.uniform(0.4, 0.95, size=n)
        colors = rng.uniform(0.1, 0.9, size=(n, 3))
        regions = ["other"] * n
    else:
        means, scales, opac, colors, regions = _head_like(rng, n)
    rotations = _random_quaternions(rng, n)
    sh_rest = np.zeros((n, n_rest, 3))
    if n_rest:
        sh_rest[:] = rng.normal(scale=0.05, size=(n, n_rest, 3))
    return Scene(
        means=means,
        rotations=rotations,
        scales=scales,
        opacities=opac,
        sh_dc=_inverse_sh(colors),
        sh_rest=sh_rest,
        regions=regions,
        sh_bands=sh_bands,
        background=(0.5, 0.5, 0.5),
    )


# --------------------------------------------------------------------------- regions


def parse_regions(spec) -> frozenset[str]:
    """Normalize a region selection.

    Accepts ``"all"``, letter codes such as ``"EFN"``, a comma-separated string, or an
    iterable of labels.
    """
    if isinstance(spec, str):
        s = spec.strip()
        if s.lower() == "all":
            return frozenset(["all"])
        if s and s.isupper() and all(c in REGION_LETTERS for c in s):
            return frozenset(REGION_LETTERS[c] for c in s)
        items = [x.strip() for x in s.split(",") if x.strip()]
    else:
        items = list(spec)
    out = set()
    for it in items:
        if it == "all":
            return frozenset(["all"])
        if it not in REGIONS:
            raise ValueError(f"unknown region label {it!r}")
        out.add(it)
    return frozenset(out)


def select_region(scene: Scene, labels) -> np.ndarray:
    """Sorted indices of primitives whose region is in ``labels``."""
    labels = parse_regions(labels)
    if not labels:
        raise ValueError("region selection must be nonempty")
    if "all" in labels:
        return np.arange(scene.n)
    return np.array([i for i, r in enumerate(scene.regions) if r in labels], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class ColorTensor:
    """DC colors of a primitive subset together with their frozen originals."""

    values: np.ndarray
    reference: np.ndarray
    index_map: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        ref = np.array(self.reference, dtype=np.float64)
        idx = np.asarray(self.index_map, dtype=np.int64)
        if values.shape != ref.shape:
            raise ValueError("values and reference must have identical shape")
        if idx.ndim != 1 or (idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0)):
            raise ValueError("index_map must be sorted and unique")
        ref.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "index_map", idx)

    @classmethod
    def from_scene(cls, scene: Scene, labels="all") -> ColorTensor:
        idx = select_region(scene, labels)
        return cls(scene.sh_dc[idx].copy(), scene.sh_dc[idx].copy(), idx)

    def apply(self, scene: Scene) -> Scene:
        if self.index_map.size and self.index_map[-1] >= scene.n:
            raise ValueError("index_map out of range for scene")
        dc = scene.sh_dc.copy()
        dc[self.index_map] = self.values
        return scene.replace(sh_dc=dc)


def check_epsilon_range(scene: Scene, epsilon: float) -> bool:
    """Warn when ``epsilon`` exceeds the dynamic range of the DC coefficients."""
    span = float(scene.sh_dc.max() - scene.sh_dc.min())
    if epsilon > span:
        warnings.warn(f"epsilon {epsilon} exceeds DC coefficient range {span:.6g}", stacklevel=2)
        return False
    return True


# --------------------------------------------------------------------------- files


def scene_to_dict(scene: Scene) -> dict:
    prims = []
    for i in range(scene.n):
        prims.append({
            "mean": scene.means[i].tolist(),
            "rotation": scene.rotations[i].tolist(),
            "scale": scene.scales[i].tolist(),
            "opacity": float(scene.opacities[i]),
            "sh_dc": scene.sh_dc[i].tolist(),
            "sh_rest": scene.sh_rest[i].reshape(-1).tolist(),
            "region": scene.regions[i],
        })
    return {
        "schema_version": scene.schema_version,
        "sh_bands": scene.sh_bands,
        "background": list(scene.background),
        "count": scene.n,
        "primitives": prims,
    }


def dumps_scene(scene: Scene) -> str:
    # One primitive per line keeps files diffable; repr-based floats round-trip exactly.
    d = scene_to_dict(scene)
    head = {k: d[k] for k in ("schema_version", "sh_bands", "background", "count")}
    lines = ["{"]
    for k, v in head.items():
        lines.append(f"  {json.dumps(k)}: {json.dumps(v)},")
    lines.append('  "primitives": [')
    body = [f"    {json.dumps(p, allow_nan=False)}" for p in d["primitives"]]
    lines.append(",\n".join(body))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


_FIELD_LEN = {"mean": 3, "rotation": 4, "scale": 3, "sh_dc": 3}


def _line_of_primitive(text: str, index: int) -> int:
    # Primitives are written one per line after the '"primitives": [' line.
    lines = text.splitlines()
    for no, line in enumerate(lines, start=1):
        if line.strip().startswith('"primitives"'):
            return no + 1 + index
    return 0


def loads_scene(text: str) -> Scene:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise SceneParseError("line 1: scene file must be an object")
    for key in ("schema_version", "sh_bands", "background", "primitives"):
        if key not in d:
            raise SceneParseError(f"missing header field {key!r}")
    if d["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported schema_version {d['schema_version']!r} (supported: {SCHEMA_VERSION})"
        )
    bands = d["sh_bands"]
    if not isinstance(bands, int) or not 1 <= bands <= 3:
        raise SceneParseError(f"field 'sh_bands': expected integer in 1..3, got {bands!r}")
    prims = d["primitives"]
    if not isinstance(prims, list):
        raise SceneParseError("field 'primitives': expected a list")
    if "count" in d and d["count"] != len(prims):
        raise SceneParseError(f"field 'count': header says {d['count']}, found {len(prims)} primitives")
    if not prims:
        raise SceneError("scene must contain at least one primitive")
    n_rest = n_rest_coeffs(bands)
    out = []
    for i, p in enumerate(prims):
        where = f"line {_line_of_primitive(text, i)}, primitive {i}"
        if not isinstance(p, dict):
            raise SceneParseError(f"{where}: expected an object")
        for key, length in {**_FIELD_LEN, "sh_rest": 3 * n_rest}.items():
            v = p.get(key, [] if key == "sh_rest" else None)
            if not isinstance(v, list) or len(v) != length or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
            ):
                raise SceneParseError(f"{where}: field {key!r} must be a list of {length} numbers")
        op = p.get("opacity")
        if not isinstance(op, (int, float)) or isinstance(op, bool):
            raise SceneParseError(f"{where}: field 'opacity' must be a number")
        if not 0.0 <= op <= 1.0:
            raise SceneError(f"primitive {i}: opacity {op!r} outside [0, 1]")
        region = p.get("region", "other")
        if region not in REGIONS:
            raise SceneError(f"primitive {i}: unknown region {region!r}")
        out.append(GaussianPrimitive(
            mean=tuple(p["mean"]),
            rotation=tuple(p["rotation"]),
            scale=tuple(p["scale"]),
            opacity=float(op),
            sh_dc=tuple(p["sh_dc"]),
            sh_rest=tuple(tuple(p["sh_rest"][3 * k:3 * k + 3]) for k in range(n_rest)),
            region=region,
        ))
    return Scene.from_primitives(out, sh_bands=bands, background=tuple(d["background"]))


def load_scene(path) -> Scene:
    return loads_scene(Path(path).read_text())
