"""Declarative synthetic underwater scenes and the analytic oracle renderer.

Scenes are JSON documents: static primitives (spheres / axis-aligned boxes)
inside the unit cube, a homogeneous medium, per-frame distractors (floater
swarms and a fish ellipsoid), and an orbit camera trajectory. The oracle
renders them exactly: nearest ray-primitive hit at depth t_s gives

    pixel = exp(-sigma_m t_s) * albedo + (1 - exp(-sigma_m t_s)) * medium_color

which is the closed form of volumetric attenuation through a constant-density
medium; rays that miss everything see the medium color.
"""

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from aquarender import images
from aquarender.geometry import Camera, full_image_pixels, generate_rays

_TMIN = 1e-9

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_COLOR = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
          "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "medium", "static", "camera"],
    "properties": {
        "name": {"type": "string"},
        "medium": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sigma", "color"],
            "properties": {
                "sigma": {"type": "number", "minimum": 0},
                "color": _COLOR,
            },
        },
        "static": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["type", "albedo"],
                "properties": {
                    "type": {"enum": ["sphere", "box"]},
                    "albedo": _COLOR,
                    "center": _VEC3,
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "min": _VEC3,
                    "max": _VEC3,
                },
            },
        },
        "distractors": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind", "albedo"],
                "properties": {
                    "kind": {"enum": ["floaters", "fish"]},
                    "albedo": _COLOR,
                    "count": {"type": "integer", "minimum": 1},
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "region": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["min", "max"],
                        "properties": {"min": _VEC3, "max": _VEC3},
                    },
                    "axes": _VEC3,
                    "start": _VEC3,
                    "end": _VEC3,
                    "wiggle": {"type": "number", "minimum": 0},
                },
            },
        },
        "camera": {
            "type": "object",
            "additionalProperties": False,
            "required": ["frames", "orbit_radius", "target", "width", "height"],
            "properties": {
                "frames": {"type": "integer", "minimum": 1},
                "orbit_radius": {"type": "number", "exclusiveMinimum": 0},
                "orbit_height": {"type": "number"},
                "target": _VEC3,
                "fov_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 170},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "near": {"type": "number", "exclusiveMinimum": 0},
                "far": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


class SceneError(ValueError):
    """Scene document failed validation."""


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = 2.0 * np.einsum("nd,nd->n", dirs, oc)
        c = np.einsum("nd,nd->n", oc, oc) - self.radius**2
        disc = b * b - 4.0 * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / 2.0
        t1 = (-b + sq) / 2.0
        t = np.where(t0 > _TMIN, t0, np.where(t1 > _TMIN, t1, np.inf))
        return np.where(hit, t, np.inf)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def intersect(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (self.lo - origins) * inv
            tb = (self.hi - origins) * inv
        near = np.nanmax(np.minimum(ta, tb), axis=-1)
        far = np.nanmin(np.maximum(ta, tb), axis=-1)
        hit = (near <= far) & (far > _TMIN)
        t = np.where(near > _TMIN, near, far)
        return np.where(hit, t, np.inf)


@dataclass
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray
    albedo: np.ndarray

    def intersect(self, origins, dirs):
        q = (origins - self.center) / self.axes
        dq = dirs / self.axes
        a = np.einsum("nd,nd->n", dq, dq)
        b = 2.0 * np.einsum("nd,nd->n", q, dq)
        c = np.einsum("nd,nd->n", q, q) - 1.0
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
        t = np.where(t0 > _TMIN, t0, np.where(t1 > _TMIN, t1, np.inf))
        return np.where(hit, t, np.inf)


@dataclass
class FloaterSwarm:
    count: int
    radius: float
    albedo: np.ndarray
    region_lo: np.ndarray
    region_hi: np.ndarray

    def primitives(self, frame, seed, slot):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(frame), int(slot)]))
        pos = rng.uniform(self.region_lo, self.region_hi, size=(self.count, 3))
        return [Sphere(p, self.radius, self.albedo) for p in pos]


@dataclass
class FishPath:
    axes: np.ndarray
    albedo: np.ndarray
    start: np.ndarray
    end: np.ndarray
    wiggle: float

    def primitives(self, frame, n_frames):
        s = frame / max(n_frames - 1, 1)
        pos = self.start + (self.end - self.start) * s
        pos = pos + np.array([0.0, self.wiggle * np.sin(2.0 * np.pi * s), 0.0])
        return [Ellipsoid(pos, self.axes, self.albedo)]


@dataclass
class OrbitSpec:
    radius: float
    height: float
    target: np.ndarray
    frames: int
    fov_deg: float
    width: int
    height_px: int
    near: float
    far: float


@dataclass
class SceneSpec:
    name: str
    medium_sigma: float
    medium_color: np.ndarray
    static: list
    floaters: list
    fish: list
    orbit: OrbitSpec
    raw: dict

    @property
    def n_frames(self):
        return self.orbit.frames


def _check_unit_cube(prim, index):
    if isinstance(prim, Sphere):
        lo = prim.center - prim.radius
        hi = prim.center + prim.radius
    else:
        lo, hi = prim.lo, prim.hi
    if np.any(lo < -1.0 - 1e-9) or np.any(hi > 1.0 + 1e-9):
        raise SceneError(f"static primitive $.static[{index}] extends outside the unit cube")


def load_scene(source):
    """Parse and validate a scene document (dict, JSON file path, or preset name)."""
    if isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if not path.exists():
            preset = preset_path(str(source))
            if preset is None:
                raise FileNotFoundError(f"scene file not found: {source}")
            path = preset
        with open(path) as f:
            doc = json.load(f)
    validator = jsonschema.Draft202012Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        e = errors[0]
        raise SceneError(f"scene validation error at {e.json_path}: {e.message}")

    static = []
    for i, p in enumerate(doc["static"]):
        albedo = np.asarray(p["albedo"], dtype=float)
        if p["type"] == "sphere":
            if "center" not in p or "radius" not in p:
                raise SceneError(f"scene validation error at $.static[{i}]: sphere needs center and radius")
            prim = Sphere(np.asarray(p["center"], dtype=float), float(p["radius"]), albedo)
        else:
            if "min" not in p or "max" not in p:
                raise SceneError(f"scene validation error at $.static[{i}]: box needs min and max")
            prim = Box(np.asarray(p["min"], dtype=float), np.asarray(p["max"], dtype=float), albedo)
        _check_unit_cube(prim, i)
        static.append(prim)

    floaters, fish = [], []
    for i, d in enumerate(doc.get("distractors", [])):
        albedo = np.asarray(d["albedo"], dtype=float)
        if d["kind"] == "floaters":
            for key in ("count", "radius", "region"):
                if key not in d:
                    raise SceneError(f"scene validation error at $.distractors[{i}]: floaters need {key}")
            floaters.append(FloaterSwarm(
                int(d["count"]), float(d["radius"]), albedo,
                np.asarray(d["region"]["min"], dtype=float),
                np.asarray(d["region"]["max"], dtype=float),
            ))
        else:
            for key in ("axes", "start", "end"):
                if key not in d:
                    raise SceneError(f"scene validation error at $.distractors[{i}]: fish need {key}")
            fish.append(FishPath(
                np.asarray(d["axes"], dtype=float), albedo,
                np.asarray(d["start"], dtype=float), np.asarray(d["end"], dtype=float),
                float(d.get("wiggle", 0.0)),
            ))

    cam = doc["camera"]
    orbit = OrbitSpec(
        radius=float(cam["orbit_radius"]),
        height=float(cam.get("orbit_height", 0.0)),
        target=np.asarray(cam["target"], dtype=float),
        frames=int(cam["frames"]),
        fov_deg=float(cam.get("fov_deg", 60.0)),
        width=int(cam["width"]),
        height_px=int(cam["height"]),
        near=float(cam.get("near", 0.05)),
        far=float(cam.get("far", 4.0)),
    )
    if orbit.near >= orbit.far:
        raise SceneError("scene validation error at $.camera: near must be < far")
    return SceneSpec(
        name=doc["name"],
        medium_sigma=float(doc["medium"]["sigma"]),
        medium_color=np.asarray(doc["medium"]["color"], dtype=float),
        static=static, floaters=floaters, fish=fish, orbit=orbit, raw=doc,
    )


def preset_path(name):
    """Path of a bundled preset scene, or None."""
    base = resources.files("aquarender") / "presets" / f"{name}.json"
    return Path(str(base)) if base.is_file() else None


def orbit_camera(scene, frame):
    """Camera for one frame of the orbit trajectory."""
    o = scene.orbit
    theta = 2.0 * np.pi * frame / o.frames
    position = o.target + np.array(
        [o.radius * np.cos(theta), o.height, o.radius * np.sin(theta)]
    )
    return Camera.look_at(position, o.target, fov_deg=o.fov_deg, width=o.width, height=o.height_px)


def frame_primitives(scene, frame, seed):
    """(primitive, is_distractor) pairs active in a frame."""
    prims = [(p, False) for p in scene.static]
    for slot, swarm in enumerate(scene.floaters):
        prims.extend((p, True) for p in swarm.primitives(frame, seed, slot))
    for f in scene.fish:
        prims.extend((p, True) for p in f.primitives(frame, scene.n_frames))
    return prims


def oracle_render(scene, camera, frame=0, seed=0, include_distractors=True):
    """Analytic render of one frame.

    Returns (image (h, w, 3) float, depth (h, w), static_mask (h, w) bool);
    static_mask is True where the nearest hit is not a distractor (misses
    count as static).
    """
    o = scene.orbit
    rays = generate_rays(camera, full_image_pixels(camera), o.near, o.far)
    n = len(rays)
    best_t = np.full(n, np.inf)
    best_albedo = np.zeros((n, 3))
    is_distractor = np.zeros(n, dtype=bool)
    prims = frame_primitives(scene, frame, seed)
    if not include_distractors:
        prims = [(p, d) for p, d in prims if not d]
    for prim, distractor in prims:
        t = prim.intersect(rays.origins, rays.directions)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_albedo = np.where(closer[:, None], prim.albedo, best_albedo)
        is_distractor = np.where(closer, distractor, is_distractor)

    hit = np.isfinite(best_t)
    att = np.where(hit, np.exp(-scene.medium_sigma * np.where(hit, best_t, 0.0)), 0.0)
    color = att[:, None] * best_albedo + (1.0 - att)[:, None] * scene.medium_color

    h, w = camera.height, camera.width
    image = color.reshape(h, w, 3)
    depth = best_t.reshape(h, w)
    static_mask = (~is_distractor).reshape(h, w)
    return image, depth, static_mask


def split_frames(n):
    """Contiguous train/val/test segments with an 80:10:10 frame split."""
    n_val = max(1, round(0.1 * n)) if n >= 3 else 0
    n_test = max(1, round(0.1 * n)) if n >= 3 else 0
    n_train = n - n_val - n_test
    ids = list(range(n))
    return {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }


@dataclass
class Dataset:
    root: Path
    images: np.ndarray   # (F, h, w, 3) float
    masks: np.ndarray    # (F, h, w) bool
    cameras: list
    near: float
    far: float
    splits: dict
    scene: dict
    seed: int

    @property
    def n_frames(self):
        return self.images.shape[0]

    def frames(self, split):
        return self.splits[split]


def generate_dataset(scene, out_dir, seed=0):
    """Render every orbit frame to disk and return the in-memory Dataset.

    Layout: frames/frame_###.ppm, masks/mask_###.pgm, depth/depth_###.npy,
    cameras.json, manifest.json, scene.json. Deterministic per seed.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)

    n = scene.n_frames
    splits = split_frames(n)
    split_of = {}
    for name, ids in splits.items():
        for i in ids:
            split_of[i] = name

    cams, imgs, masks, records = [], [], [], []
    for f in range(n):
        cam = orbit_camera(scene, f)
        image, depth, static_mask = oracle_render(scene, cam, frame=f, seed=seed)
        img_name = f"frames/frame_{f:03d}.ppm"
        mask_name = f"masks/mask_{f:03d}.pgm"
        depth_name = f"depth/depth_{f:03d}.npy"
        images.write_ppm(out / img_name, image)
        images.write_pgm(out / mask_name, static_mask)
        np.save(out / depth_name, depth)
        cams.append(cam)
        imgs.append(images.from_u8(images.to_u8(image)))  # store what was quantized to disk
        masks.append(static_mask)
        records.append({
            "index": f, "image": img_name, "mask": mask_name, "depth": depth_name,
            "split": split_of[f],
        })

    with open(out / "cameras.json", "w") as f:
        json.dump(
            {"near": scene.orbit.near, "far": scene.orbit.far,
             "cameras": [c.to_dict() for c in cams]},
            f, indent=1, sort_keys=True,
        )
    with open(out / "scene.json", "w") as f:
        json.dump(scene.raw, f, indent=1, sort_keys=True)
    with open(out / "manifest.json", "w") as f:
        json.dump({"name": scene.name, "seed": seed, "frames": records, "splits": splits},
                  f, indent=1, sort_keys=True)

    return Dataset(
        root=out, images=np.stack(imgs), masks=np.stack(masks), cameras=cams,
        near=scene.orbit.near, far=scene.orbit.far, splits=splits,
        scene=scene.raw, seed=seed,
    )


def load_dataset(root):
    """Load a dataset directory written by generate_dataset."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(root / "cameras.json") as f:
        camdoc = json.load(f)
    with open(root / "scene.json") as f:
        scene_doc = json.load(f)

    missing = [r["image"] for r in manifest["frames"] if not (root / r["image"]).exists()]
    if missing:
        raise FileNotFoundError(f"dataset frames missing: {missing}")

    imgs = np.stack([images.read_ppm(root / r["image"]) for r in manifest["frames"]])
    masks = np.stack([images.read_pgm(root / r["mask"]) > 127 for r in manifest["frames"]])
    cams = [Camera.from_dict(d) for d in camdoc["cameras"]]
    return Dataset(
        root=root, images=imgs, masks=masks, cameras=cams,
        near=float(camdoc["near"]), far=float(camdoc["far"]),
        splits=manifest["splits"], scene=scene_doc, seed=int(manifest["seed"]),
    )
