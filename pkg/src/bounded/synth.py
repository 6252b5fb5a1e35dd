"""Labeled synthetic point clouds with known creases and open rims.

Surfaces are sampled with stratified jitter (one point per cell of area
``1 / density``), so the mean spacing is ``h = 1 / sqrt(density)``. Labels
come from in-surface distances to the analytic features:

* sharp edge if within ``epsilon * h`` of a crease,
* otherwise boundary if within ``epsilon * h`` of an open rim,
* otherwise non-edge.

Crop borders of the unbounded primitives (plane, wedge, half-plane) are not
annotated. Noise is applied after labeling, as isotropic Gaussian displacement
with sigma ``noise * h``; outliers are extra points pushed off the surface and
labeled non-edge.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .io import BOUNDARY, NON_EDGE, SHARP_EDGE, PointCloud

KINDS = ("plane", "wedge", "box", "open-disk", "curved-sheet", "half-plane")
PROFILES = ("default-like", "defaultpp-like")

# side tags for parallelogram faces
NONE, CREASE, RIM = 0, 1, 2


@dataclass(frozen=True)
class SceneSpec:
    """One primitive surface.

    Lengths are in scene units. ``angle`` is the wedge's dihedral angle or the
    skew angle of a box base (degrees); ``size`` is the side length of planar
    primitives or ``(a, b, c)`` edge lengths of a box; ``radius`` and ``arc``
    describe disks and cylindrical sheets.
    """

    kind: str
    density: float = 400.0
    noise: float = 0.0
    outlier_fraction: float = 0.0
    epsilon: float = 1.0
    size: tuple = (2.0, 2.0, 2.0)
    angle: float = 90.0
    radius: float = 1.0
    arc: float = 120.0
    open_top: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}; expected one of {KINDS}")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not self.noise >= 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.outlier_fraction < 0.1:
            raise ValueError("outlier_fraction must lie in [0, 0.1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "size", tuple(float(s) for s in np.atleast_1d(self.size)))
        if min(self.size) <= 0 or self.radius <= 0:
            raise ValueError("sizes and radius must be positive")
        if not 0 < self.angle < 180:
            raise ValueError("angle must lie in (0, 180) degrees")
        if not 0 < self.arc < 360:
            raise ValueError("arc must lie in (0, 360) degrees")

    @property
    def spacing(self) -> float:
        return 1.0 / np.sqrt(self.density)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


@dataclass
class Surface:
    """Samples of one primitive in its own frame, before noise and placement."""

    points: np.ndarray
    d_crease: np.ndarray    # in-surface distance to the nearest crease (inf if none)
    d_rim: np.ndarray       # in-surface distance to the nearest open rim (inf if none)

    def labels(self, tol: float) -> np.ndarray:
        lab = np.full(len(self.points), NON_EDGE, dtype=np.uint8)
        lab[self.d_rim <= tol] = BOUNDARY
        lab[self.d_crease <= tol] = SHARP_EDGE
        return lab


def _stratified(rng, nu, nv):
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = (i.ravel() + rng.random(i.size)) / nu
    v = (j.ravel() + rng.random(i.size)) / nv
    return u, v


def _face(rng, h, origin, e1, e2, sides):
    """Parallelogram ``origin + u e1 + v e2``; ``sides`` tags (u=0, u=1, v=0, v=1)."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    area = np.linalg.norm(np.cross(e1, e2))
    l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
    nu = max(1, int(round(l1 / h)))
    nv = max(1, int(round(area / l1 / h)))
    u, v = _stratified(rng, nu, nv)
    pts = np.asarray(origin, dtype=np.float64) + u[:, None] * e1 + v[:, None] * e2
    # perpendicular in-plane distance to each side line
    dist = (u * area / l2, (1 - u) * area / l2, v * area / l1, (1 - v) * area / l1)
    d_crease = np.full(len(u), np.inf)
    d_rim = np.full(len(u), np.inf)
    for tag, d in zip(sides, dist):
        if tag == CREASE:
            np.minimum(d_crease, d, out=d_crease)
        elif tag == RIM:
            np.minimum(d_rim, d, out=d_rim)
    return Surface(pts, d_crease, d_rim)


def _merge(parts):
    return Surface(np.concatenate([p.points for p in parts]),
                   np.concatenate([p.d_crease for p in parts]),
                   np.concatenate([p.d_rim for p in parts]))


def _box(rng, h, a, b, c, skew_deg, open_top):
    t = np.radians(skew_deg)
    ea = np.array([a, 0.0, 0.0])
    eb = np.array([b * np.cos(t), b * np.sin(t), 0.0])
    ec = np.array([0.0, 0.0, c])
    o = np.zeros(3)
    top = RIM if open_top else CREASE
    faces = [
        _face(rng, h, o, ea, eb, (CREASE,) * 4),                      # bottom
        _face(rng, h, o, ea, ec, (CREASE, CREASE, CREASE, top)),      # sides: v=1 is the top edge
        _face(rng, h, eb, ea, ec, (CREASE, CREASE, CREASE, top)),
        _face(rng, h, o, eb, ec, (CREASE, CREASE, CREASE, top)),
        _face(rng, h, ea, eb, ec, (CREASE, CREASE, CREASE, top)),
    ]
    if not open_top:
        faces.append(_face(rng, h, ec, ea, eb, (CREASE,) * 4))
    return _merge(faces)


def _disk(rng, h, radius):
    n = max(1, int(np.ceil(2 * radius / h)))
    u, v = _stratified(rng, n, n)
    x = (u - 0.5) * n * h
    y = (v - 0.5) * n * h
    r = np.hypot(x, y)
    keep = r <= radius
    pts = np.column_stack([x[keep], y[keep], np.zeros(keep.sum())])
    return Surface(pts, np.full(len(pts), np.inf), radius - r[keep])


def _sheet(rng, h, radius, arc_deg, height):
    length = radius * np.radians(arc_deg)
    u, v = _stratified(rng, max(1, int(round(length / h))), max(1, int(round(height / h))))
    s = u * length
    y = v * height
    phi = s / radius
    pts = np.column_stack([radius * np.sin(phi), y, radius * np.cos(phi)])
    d_rim = np.minimum.reduce([s, length - s, y, height - y])
    return Surface(pts, np.full(len(pts), np.inf), d_rim)


def sample_surface(spec: SceneSpec, rng) -> Surface:
    """Noise-free samples of ``spec`` in its canonical frame."""
    h = spec.spacing
    size = spec.size
    if spec.kind == "plane":
        L = size[0]
        W = size[1] if len(size) > 1 else L
        return _face(rng, h, (0, 0, 0), (L, 0, 0), (0, W, 0), (NONE,) * 4)
    if spec.kind == "half-plane":
        L = size[0]
        W = size[1] if len(size) > 1 else L
        return _face(rng, h, (0, 0, 0), (L, 0, 0), (0, W, 0), (NONE, NONE, RIM, NONE))
    if spec.kind == "wedge":
        L = size[0]
        W = size[1] if len(size) > 1 else L / 2
        t = np.radians(spec.angle)
        # crease along x; the faces leave it in directions at angle `angle`
        return _merge([
            _face(rng, h, (0, 0, 0), (L, 0, 0), (0, W, 0), (NONE, NONE, CREASE, NONE)),
            _face(rng, h, (0, 0, 0), (L, 0, 0), (0, W * np.cos(t), W * np.sin(t)), (NONE, NONE, CREASE, NONE)),
        ])
    if spec.kind == "box":
        a, b, c = (size + size[-1:] * 3)[:3]
        return _box(rng, h, a, b, c, spec.angle, spec.open_top)
    if spec.kind == "open-disk":
        return _disk(rng, h, spec.radius)
    # curved-sheet: cylindrical shell segment, all four borders open
    return _sheet(rng, h, spec.radius, spec.arc, size[0])


def _random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def _outliers(rng, points, count, h):
    src = points[rng.integers(0, len(points), count)]
    direction = rng.standard_normal((count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return src + direction * rng.uniform(3.0, 6.0, (count, 1)) * h


def _realize(spec: SceneSpec, rng):
    """Points (placed, noisy, with outliers) and labels for one primitive at the origin."""
    surf = sample_surface(spec, rng)
    h = spec.spacing
    labels = surf.labels(spec.epsilon * h)
    pts = surf.points - surf.points.mean(axis=0)
    pts = pts @ _random_rotation(rng).T
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise * h, pts.shape)
    n_out = int(round(spec.outlier_fraction * len(pts)))
    if n_out:
        pts = np.concatenate([pts, _outliers(rng, pts, n_out, h)])
        labels = np.concatenate([labels, np.full(n_out, NON_EDGE, dtype=np.uint8)])
    return pts, labels


def generate(spec: SceneSpec, seed=0) -> PointCloud:
    """Deterministic labeled cloud for one primitive."""
    pts, labels = _realize(spec, np.random.default_rng(seed))
    return PointCloud(pts, labels)


def compose(specs, seed=0, gap: float = 20.0) -> PointCloud:
    """Several primitives in one cloud, laid out along x with ``gap`` spacings between them."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one primitive")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(len(specs))
    all_pts, all_lab = [], []
    cursor = 0.0
    for spec, child in zip(specs, children):
        pts, lab = _realize(spec, np.random.default_rng(child))
        r = float(np.linalg.norm(pts, axis=1).max())
        if all_pts:
            cursor += r
        all_pts.append(pts + np.array([cursor, 0.0, 0.0]))
        all_lab.append(lab)
        cursor += r + gap * spec.spacing
    return PointCloud(np.concatenate(all_pts), np.concatenate(all_lab))


@dataclass
class Suite:
    """Training clouds, a validation selection inside them, and held-out evaluation clouds.

    ``validation[i]`` is a boolean mask over ``train[i]``; those points are
    excluded from the training pool.
    """

    profile: str
    seed: int
    train: list = field(default_factory=list)        # (name, PointCloud)
    validation: list = field(default_factory=list)   # bool masks aligned with train
    evaluation: list = field(default_factory=list)   # (name, PointCloud)
    specs: dict = field(default_factory=dict)        # cloud name -> list of SceneSpec

    def pooled_counts(self) -> np.ndarray:
        counts = np.zeros(3, dtype=np.int64)
        for _, cloud in self.train:
            counts += np.bincount(cloud.labels, minlength=3)[:3]
        return counts


VALIDATION_PER_CLASS = {NON_EDGE: 1000, SHARP_EDGE: 1000, BOUNDARY: 100}


def _box_specs(rng, count, noise, density):
    out = []
    for _ in range(count):
        dims = tuple(float(x) for x in rng.uniform(2.0, 4.0, 3))
        out.append(SceneSpec("box", density=density, noise=float(noise), size=dims,
                             angle=float(rng.uniform(60.0, 120.0))))
    return out


def _rim_specs(rng, noise, density, radii):
    out = [SceneSpec("open-disk", density=density, noise=noise, radius=float(r)) for r in radii]
    out.append(SceneSpec("curved-sheet", density=density, noise=noise,
                         radius=float(rng.uniform(0.8, 2.0)), arc=float(rng.uniform(90.0, 180.0)),
                         size=(float(rng.uniform(1.5, 2.5)),)))
    out.append(SceneSpec("box", density=density, noise=noise, open_top=True,
                         size=tuple(float(x) for x in rng.uniform(1.5, 2.5, 3)),
                         angle=float(rng.uniform(70.0, 110.0))))
    return out


def suite_layout(profile: str, seed=0, density: float = 400.0) -> dict:
    """Cloud name -> primitive list for a profile. Training noise levels are
    0, 0.05 and 0.1 spacings; evaluation clouds mix every class."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    with_rims = profile == "defaultpp-like"
    layout = {}
    for name, noise in (("train_clean", 0.0), ("train_noise05", 0.05), ("train_noise10", 0.1)):
        specs = _box_specs(rng, 4, noise, density)
        if with_rims:
            specs += _rim_specs(rng, noise, density, rng.uniform(0.4, 1.6, 1))
        layout[name] = specs
    for e, noise in enumerate((0.0, 0.0, 0.05, 0.1)):
        specs = _box_specs(rng, 1, noise, density)
        if with_rims:
            specs += _rim_specs(rng, noise, density, rng.uniform(0.4, 1.6, 1))
        layout[f"eval_{e}"] = specs
    return layout


def sample_validation(rng, label_arrays, per_class=None):
    """Boolean masks (one per array) selecting a per-class validation sample.

    At most half of any class is taken so that training keeps examples of it.
    """
    per_class = VALIDATION_PER_CLASS if per_class is None else per_class
    sizes = [len(a) for a in label_arrays]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    labels = np.concatenate([np.asarray(a) for a in label_arrays])
    chosen = np.zeros(len(labels), dtype=bool)
    for cls, want in per_class.items():
        idx = np.flatnonzero(labels == cls)
        if len(idx) == 0:
            continue
        take = min(want, len(idx) // 2)   # leave at least half of a class for training
        chosen[rng.choice(idx, take, replace=False)] = True
    return [chosen[offsets[i]:offsets[i + 1]] for i in range(len(label_arrays))]


def generate_suite(profile: str, seed=0, density: float = 400.0) -> Suite:
    """Training, validation and evaluation sets for a profile.

    ``defaultpp-like`` adds open disks, cylindrical sheets and open boxes to
    the closed boxes of ``default-like``, which carries no boundary labels.
    Validation takes 1000 random points per class (100 for boundary) from the
    training clouds.
    """
    layout = suite_layout(profile, seed, density)
    root = np.random.SeedSequence([int(seed), 2])
    cloud_seeds = root.spawn(len(layout) + 1)
    suite = Suite(profile, int(seed), specs=layout)
    for (name, specs), ss in zip(layout.items(), cloud_seeds):
        cloud = compose(specs, ss)
        (suite.evaluation if name.startswith("eval") else suite.train).append((name, cloud))
    suite.validation = sample_validation(np.random.default_rng(cloud_seeds[-1]),
                                        [c.labels for _, c in suite.train])
    return suite


def relabel(spec: SceneSpec, epsilon: float, seed=0) -> PointCloud:
    """The cloud of ``generate(spec, seed)`` labeled with a different tolerance."""
    return generate(replace(spec, epsilon=epsilon), seed)
