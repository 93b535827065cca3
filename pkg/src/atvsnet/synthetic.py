"""Deterministic toy multi-view scenes with exact ground-truth disparity.

Scenes are textured planes, rectangles and spheres ray-cast from a reference
camera (the world frame) and a rig of source cameras looking at the scene.
Textures are solid 3-D functions of the surface point, so every view sees the
same colours at the same surface location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from atvsnet.geometry import CameraModel, DisparityHypotheses, disparity_planes
from atvsnet.io import ParseError, read_camera, read_pfm, read_png, write_camera, write_pfm, write_png

DEFAULT_PLANES = (0.1, 0.025, 16)
NOISE_LATTICE = 16
# largest gap between interpolated and exact source disparity for a visible pixel
INTERP_TOLERANCE = 1e-4


class SceneError(ValueError):
    """Raised when a scene violates the declared disparity range."""


@dataclass
class Primitive:
    kind: str  # "plane", "rect" or "sphere"
    name: str
    center: np.ndarray
    normal: np.ndarray | None = None
    axes: np.ndarray | None = None  # (2, 3) in-plane unit axes for rectangles
    half_size: tuple[float, float] | None = None
    radius: float | None = None
    texture_id: int = 0
    texture_scale: float = 3.0
    low_texture: bool = False

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "center": [float(v) for v in self.center],
             "texture_id": int(self.texture_id), "texture_scale": float(self.texture_scale),
             "low_texture": bool(self.low_texture)}
        if self.normal is not None:
            d["normal"] = [float(v) for v in self.normal]
        if self.axes is not None:
            d["axes"] = [[float(v) for v in a] for a in self.axes]
        if self.half_size is not None:
            d["half_size"] = [float(v) for v in self.half_size]
        if self.radius is not None:
            d["radius"] = float(self.radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            kind=d["kind"], name=d["name"], center=np.array(d["center"]),
            normal=None if "normal" not in d else np.array(d["normal"]),
            axes=None if "axes" not in d else np.array(d["axes"]),
            half_size=None if "half_size" not in d else tuple(d["half_size"]),
            radius=d.get("radius"), texture_id=d["texture_id"], texture_scale=d["texture_scale"],
            low_texture=d["low_texture"],
        )

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit (``inf`` on a miss); rays are ``origin + t * dirs``."""
        t = np.full(len(dirs), np.inf)
        if self.kind in ("plane", "rect"):
            denom = dirs @ self.normal
            ok = np.abs(denom) > 1e-12
            tt = np.where(ok, ((self.center - origin) @ self.normal) / np.where(ok, denom, 1.0), np.inf)
            hit = ok & (tt > 1e-9)
            if self.kind == "rect":
                p = origin + tt[:, None] * dirs - self.center
                with np.errstate(invalid="ignore"):
                    hit &= np.abs(p @ self.axes[0]) <= self.half_size[0]
                    hit &= np.abs(p @ self.axes[1]) <= self.half_size[1]
            t[hit] = tt[hit]
        elif self.kind == "sphere":
            oc = origin - self.center
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * dirs @ oc
            c = oc @ oc - self.radius**2
            disc = b * b - 4 * a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            t[ok] = tt[ok]
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        return t

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius)
        rel = points - self.center
        dist = np.abs(rel @ self.normal)
        if self.kind == "rect":
            ex = np.maximum(np.abs(rel @ self.axes[0]) - self.half_size[0], 0.0)
            ey = np.maximum(np.abs(rel @ self.axes[1]) - self.half_size[1], 0.0)
            dist = np.sqrt(dist**2 + ex**2 + ey**2)
        return dist


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]
    intrinsics: np.ndarray
    ref_pose: np.ndarray
    src_poses: list[np.ndarray]
    image_size: tuple[int, int] = (64, 64)
    disparity_range: tuple[float, float, int] = DEFAULT_PLANES
    noise_std: float = 0.01
    supersample: int = 2

    @property
    def planes(self) -> DisparityHypotheses:
        return disparity_planes(*self.disparity_range)

    def cameras(self) -> list[CameraModel]:
        return [CameraModel(self.intrinsics, pose, self.image_size) for pose in [self.ref_pose, *self.src_poses]]

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "primitives": [p.to_dict() for p in self.primitives],
            "intrinsics": np.asarray(self.intrinsics).tolist(),
            "ref_pose": np.asarray(self.ref_pose).tolist(),
            "src_poses": [np.asarray(p).tolist() for p in self.src_poses],
            "image_size": list(self.image_size),
            "disparity_range": [float(self.disparity_range[0]), float(self.disparity_range[1]), int(self.disparity_range[2])],
            "noise_std": float(self.noise_std),
            "supersample": int(self.supersample),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=d["seed"], primitives=[Primitive.from_dict(p) for p in d["primitives"]],
            intrinsics=np.array(d["intrinsics"]), ref_pose=np.array(d["ref_pose"]),
            src_poses=[np.array(p) for p in d["src_poses"]], image_size=tuple(d["image_size"]),
            disparity_range=(d["disparity_range"][0], d["disparity_range"][1], int(d["disparity_range"][2])),
            noise_std=d["noise_std"], supersample=d["supersample"],
        )

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest primitive surface."""
        return np.min(np.stack([p.surface_distance(points) for p in self.primitives]), axis=0)


@dataclass
class MVSample:
    """A reference view (index 0) and its sources with cameras and ground truth.

    ``disparities`` is (V, H, W) float32 with 0 marking invalid pixels;
    ``visibility[n]`` marks reference pixels seen unoccluded by source ``n + 1``
    with a footprint on a single surface.
    """

    images: np.ndarray
    cameras: list[CameraModel]
    disparities: np.ndarray
    visibility: np.ndarray
    planes: DisparityHypotheses
    sample_id: str = "sample"
    scene: SceneSpec | None = field(default=None, repr=False)

    @property
    def num_sources(self) -> int:
        return len(self.cameras) - 1


# ---------------------------------------------------------------------------
# rendering


def _rays(cam: CameraModel, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and world directions scaled so the ray parameter equals camera depth."""
    uh = np.concatenate([coords, np.ones((len(coords), 1))], axis=1)
    d_cam = uh @ np.linalg.inv(cam.intrinsics).T
    return cam.center, d_cam @ cam.rotation


def _cast(prims: Sequence[Primitive], origin, dirs):
    ts = np.stack([p.intersect(origin, dirs) for p in prims])
    ids = np.argmin(ts, axis=0)
    t = ts[ids, np.arange(len(dirs))]
    ids = np.where(np.isfinite(t), ids, -1)
    return t, ids


def _smooth(x):
    return x * x * (3 - 2 * x)


def _value_noise(points: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    G = lattice.shape[0]
    base = np.floor(points)
    f = _smooth(points - base)
    i = base.astype(np.int64) % G
    j = (i + 1) % G
    out = 0.0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = j[:, 0] if dx else i[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = j[:, 1] if dy else i[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = j[:, 2] if dz else i[:, 2]
                out = out + wx * wy * wz * lattice[ix, iy, iz]
    return out


def _texture(seed: int, prim: Primitive, points: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([seed, prim.texture_id, 7919])
    base = rng.uniform(0.2, 0.8, size=3)
    lattices = rng.uniform(0.0, 1.0, size=(2, 3, NOISE_LATTICE, NOISE_LATTICE, NOISE_LATTICE))
    offset = rng.uniform(0, NOISE_LATTICE, size=3)
    p = points * prim.texture_scale + offset
    if prim.low_texture:
        amp_noise, amp_fine, amp_check = 0.03, 0.0, 0.0
    else:
        amp_noise, amp_fine, amp_check = 0.45, 0.25, 0.12
    color = np.empty((len(points), 3))
    checker = (np.floor(p * 0.5).sum(axis=1) % 2) * 2 - 1
    for c in range(3):
        coarse = _value_noise(p, lattices[0, c]) - 0.5
        fine = _value_noise(p * 2.7, lattices[1, c]) - 0.5
        color[:, c] = base[c] + amp_noise * coarse + amp_fine * fine + amp_check * checker
    return np.clip(color, 0.0, 1.0)


def _pixel_coords(w: int, h: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def render_view(spec: SceneSpec, cam: CameraModel, view_index: int):
    """Return ``(image uint8 (H, W, 3), depth (H, W), ids (H, W))`` for one camera.

    Depth is the camera-frame Z of the centre ray; ``ids`` is -1 on misses.
    """
    w, h = spec.image_size
    coords = _pixel_coords(w, h)
    origin, dirs = _rays(cam, coords)
    depth, ids = _cast(spec.primitives, origin, dirs)

    ss = spec.supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    color = np.zeros((len(coords), 3))
    for oy in offs:
        for ox in offs:
            o, d = _rays(cam, coords + np.array([ox, oy]))
            t, sid = _cast(spec.primitives, o, d)
            pts = o + t[:, None] * d
            col = np.full((len(coords), 3), 0.5)
            for k, prim in enumerate(spec.primitives):
                m = sid == k
                if m.any():
                    col[m] = _texture(spec.seed, prim, pts[m])
            color += col
    color /= ss * ss
    rng = np.random.default_rng([spec.seed, 1000 + view_index])
    color = color + rng.normal(0.0, spec.noise_std, size=color.shape)
    image = np.round(np.clip(color, 0, 1) * 255).astype(np.uint8).reshape(h, w, 3)
    depth = np.where(ids >= 0, depth, np.inf).reshape(h, w)
    return image, depth, ids.reshape(h, w)


def _visibility(spec, ref: CameraModel, src: CameraModel, ref_depth, ref_ids, src_depth, src_ids) -> np.ndarray:
    """Reference pixels whose surface point is seen unoccluded by ``src``.

    The point's bilinear footprint in the source must lie on the same primitive
    and interpolate the source disparity to within ``INTERP_TOLERANCE`` of the
    exact value, which drops grazing footprints near curved silhouettes.
    """
    w, h = spec.image_size
    coords = _pixel_coords(w, h)
    origin, dirs = _rays(ref, coords)
    z = ref_depth.ravel()
    hit = np.isfinite(z)
    pts = origin + np.where(hit, z, 0.0)[:, None] * dirs
    pc = pts @ src.rotation.T + src.translation
    zs = pc[:, 2]
    front = hit & (zs > 1e-6)
    uv = (pc @ src.intrinsics.T)[:, :2] / np.where(front, zs, 1.0)[:, None]
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    vis = np.zeros(len(coords), dtype=bool)
    if inside.any():
        o, d = _rays(src, uv[inside])
        t, sid = _cast(spec.primitives, o, d)
        same = (sid == ref_ids.ravel()[inside]) & (np.abs(t - zs[inside]) <= 1e-6 * zs[inside])
        x0 = np.floor(uv[inside, 0]).astype(int)
        y0 = np.floor(uv[inside, 1]).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        rid = ref_ids.ravel()[inside]
        clean = (src_ids[y0, x0] == rid) & (src_ids[y0, x1] == rid) & (src_ids[y1, x0] == rid) & (src_ids[y1, x1] == rid)
        d_src = np.where(np.isfinite(src_depth), 1.0 / src_depth, 0.0)
        fx, fy = uv[inside, 0] - x0, uv[inside, 1] - y0
        interp = (
            d_src[y0, x0] * (1 - fx) * (1 - fy) + d_src[y0, x1] * fx * (1 - fy)
            + d_src[y1, x0] * (1 - fx) * fy + d_src[y1, x1] * fx * fy
        )
        resolvable = np.abs(interp - 1.0 / zs[inside]) <= INTERP_TOLERANCE
        vis[inside] = same & clean & resolvable
    return vis.reshape(h, w)


def generate_scene(spec: SceneSpec, sample_id: str | None = None) -> MVSample:
    """Ray-cast every view of ``spec``; raises :class:`SceneError` on out-of-range disparity."""
    planes = spec.planes
    cams = spec.cameras()
    images, disps, ids_all, depths = [], [], [], []
    for v, cam in enumerate(cams):
        img, depth, ids = render_view(spec, cam, v)
        disp = np.where(np.isfinite(depth), 1.0 / depth, 0.0)
        hit = ids >= 0
        bad = hit & ((disp < planes.lowest - 1e-9) | (disp > planes.highest + 1e-9))
        if bad.any():
            prim = spec.primitives[int(ids[bad][0])]
            raise SceneError(
                f"primitive {prim.name!r} has disparity {disp[bad][0]:.4f} in view {v}, outside "
                f"[{planes.lowest:.4f}, {planes.highest:.4f}]"
            )
        images.append(img)
        disps.append(disp.astype(np.float32))
        ids_all.append(ids)
        depths.append(depth)
    vis = np.stack(
        [_visibility(spec, cams[0], cams[n], depths[0], ids_all[0], depths[n], ids_all[n]) for n in range(1, len(cams))]
    ) if len(cams) > 1 else np.zeros((0, *disps[0].shape), dtype=bool)
    return MVSample(
        images=np.stack(images),
        cameras=cams,
        disparities=np.stack(disps),
        visibility=vis,
        planes=planes,
        sample_id=sample_id or f"scene_{spec.seed:06d}",
        scene=spec,
    )


# ---------------------------------------------------------------------------
# random scene layouts


def default_intrinsics(image_size=(64, 64)) -> np.ndarray:
    w, h = image_size
    f = 0.9 * w
    return np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])


def look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera pose of a camera at ``center`` looking at ``target`` (y down)."""
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ center
    return E


def _rotation_towards(n: np.ndarray) -> np.ndarray:
    """Orthonormal in-plane axes for a plane with normal ``n``."""
    a = np.cross(n, [0.0, 1.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(n, [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    return np.stack([a, b])


def _tilted_normal(rng, max_deg):
    ax, ay = np.radians(rng.uniform(-max_deg, max_deg, size=2))
    n = np.array([np.sin(ax), np.sin(ay), -1.0])
    return n / np.linalg.norm(n)


def random_scene_spec(
    seed: int,
    num_sources: int = 5,
    image_size=(64, 64),
    disparity_range=DEFAULT_PLANES,
    baseline=(0.5, 1.2),
    low_texture_prob: float = 0.2,
    max_objects: int = 3,
    noise_std: float = 0.01,
    attempt: int = 0,
) -> SceneSpec:
    rng = np.random.default_rng([seed, attempt])
    planes = disparity_planes(*disparity_range)
    z_near, z_far = 1.0 / planes.highest, 1.0 / planes.lowest
    prims = []
    # background
    z_bg = rng.uniform(z_near + 0.55 * (z_far - z_near), z_near + 0.75 * (z_far - z_near))
    prims.append(Primitive("plane", "background", np.array([0.0, 0.0, z_bg]), normal=_tilted_normal(rng, 12.0),
                           texture_id=0, texture_scale=rng.uniform(1.5, 3.0)))
    n_obj = int(rng.integers(1, max_objects + 1))
    for k in range(n_obj):
        z = rng.uniform(z_near + 0.08 * (z_far - z_near), z_near + 0.35 * (z_far - z_near))
        x, y = rng.uniform(-0.25, 0.25, size=2) * z
        low = bool(rng.random() < low_texture_prob)
        if rng.random() < 0.5:
            r = min(rng.uniform(0.35, 0.8), z - 1.05 * z_near)
            prims.append(Primitive("sphere", f"sphere{k}", np.array([x, y, z]), radius=r, texture_id=k + 1,
                                   texture_scale=rng.uniform(2.0, 4.0), low_texture=low))
        else:
            n = _tilted_normal(rng, 30.0)
            prims.append(Primitive("rect", f"rect{k}", np.array([x, y, z]), normal=n, axes=_rotation_towards(n),
                                   half_size=tuple(rng.uniform(0.3, 0.8, size=2)), texture_id=k + 1,
                                   texture_scale=rng.uniform(2.0, 4.0), low_texture=low))
    target = np.array([0.0, 0.0, 0.5 * (z_near + z_bg)])
    poses = []
    for _ in range(num_sources):
        ang = rng.uniform(0, 2 * np.pi)
        b = rng.uniform(*baseline)
        c = np.array([b * np.cos(ang), b * np.sin(ang) * 0.6, rng.uniform(-0.2, 0.2)])
        poses.append(look_at(c, target))
    return SceneSpec(
        seed=seed, primitives=prims, intrinsics=default_intrinsics(image_size), ref_pose=np.eye(4),
        src_poses=poses, image_size=tuple(image_size), disparity_range=tuple(disparity_range), noise_std=noise_std,
    )


def make_sample(seed: int, max_attempts: int = 100, **kwargs) -> MVSample:
    """Random valid scene for ``seed``; layouts violating the range are redrawn deterministically."""
    last = None
    for attempt in range(max_attempts):
        spec = random_scene_spec(seed, attempt=attempt, **kwargs)
        try:
            return generate_scene(spec)
        except SceneError as exc:
            last = exc
    raise SceneError(f"no valid layout for seed {seed} after {max_attempts} attempts: {last}")


def make_dataset(count: int, seed: int = 0, **kwargs) -> list[MVSample]:
    return [make_sample(seed * 100003 + i, **kwargs) for i in range(count)]


# ---------------------------------------------------------------------------
# serialization


def _view_name(v: int) -> str:
    return f"{v:02d}"


def write_sample(sample: MVSample, directory) -> Path:
    """Layout: images/VV.png, cams/VV.txt, disp/VV.pfm, masks/VV.png, meta.json."""
    root = Path(directory)
    for sub in ("images", "cams", "disp", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for v, cam in enumerate(sample.cameras):
        name = _view_name(v)
        write_png(root / "images" / f"{name}.png", sample.images[v])
        write_camera(root / "cams" / f"{name}.txt", cam)
        write_pfm(root / "disp" / f"{name}.pfm", sample.disparities[v])
        if v > 0:
            write_png(root / "masks" / f"{name}.png", sample.visibility[v - 1].astype(np.uint8) * 255)
    meta = {
        "sample_id": sample.sample_id,
        "num_views": len(sample.cameras),
        "planes": [sample.planes.d_min, sample.planes.delta, sample.planes.count],
        "scene": None if sample.scene is None else sample.scene.to_dict(),
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return root


def read_sample(directory) -> MVSample:
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise ParseError(f"{meta_path}: missing sample metadata")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: line {exc.lineno}: {exc.msg}") from None
    images, cams, disps, vis = [], [], [], []
    for v in range(meta["num_views"]):
        name = _view_name(v)
        img = read_png(root / "images" / f"{name}.png")
        h, w = img.shape[:2]
        cam_path = root / "cams" / f"{name}.txt"
        if not cam_path.exists():
            raise ParseError(f"{cam_path}: camera file for view {name} missing")
        cams.append(read_camera(cam_path, (w, h)))
        disp_path = root / "disp" / f"{name}.pfm"
        if not disp_path.exists():
            raise ParseError(f"{disp_path}: disparity file for view {name} missing")
        images.append(img)
        disps.append(read_pfm(disp_path))
        if v > 0:
            vis.append(read_png(root / "masks" / f"{name}.png") > 127)
    scene = None if meta.get("scene") is None else SceneSpec.from_dict(meta["scene"])
    h, w = images[0].shape[:2]
    return MVSample(
        images=np.stack(images),
        cameras=cams,
        disparities=np.stack(disps),
        visibility=np.stack(vis) if vis else np.zeros((0, h, w), dtype=bool),
        planes=disparity_planes(*meta["planes"]),
        sample_id=meta["sample_id"],
        scene=scene,
    )


def write_dataset(samples: Sequence[MVSample], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for s in samples:
        write_sample(s, root / s.sample_id)
        names.append(s.sample_id)
    (root / "index.txt").write_text("".join(n + "\n" for n in names))
    return root


def read_dataset(root) -> list[MVSample]:
    root = Path(root)
    index = root / "index.txt"
    if not index.exists():
        raise ParseError(f"{index}: dataset index missing")
    names = [ln.strip() for ln in index.read_text().splitlines() if ln.strip()]
    return [read_sample(root / n) for n in names]
