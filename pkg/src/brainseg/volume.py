"""Volumes, the native file format, slice tiling and synthetic phantoms."""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

NUM_CLASSES = 4
VOLUME_MAGIC = b"NTVOL001"
LABEL_MAGIC = b"NTLBL001"


class VolumeFormatError(ValueError):
    pass


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive floats, got {spacing}")
    return spacing


@dataclass
class Volume:
    """3D intensity grid, axes (D, H, W), spacing in mm per axis."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """3D label grid with values 0=background, 1=CSF, 2=GM, 3=WM."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"label volume must be 3D with positive dims, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1}")
        self.data = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# native file format


def save_volume(vol, path, meta=None):
    """Write a Volume or LabelVolume: magic, one JSON header line, raw payload."""
    if isinstance(vol, LabelVolume):
        magic, dtype, payload = LABEL_MAGIC, "u8", vol.data.astype("u1")
    elif isinstance(vol, Volume):
        magic, dtype, payload = VOLUME_MAGIC, "f32", vol.data.astype("<f4")
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")
    header = {"dims": list(vol.dims), "spacing": list(vol.spacing), "dtype": dtype}
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload.tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:8]
    if magic not in (VOLUME_MAGIC, LABEL_MAGIC):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    end = raw.find(b"\n", 8)
    if end < 0:
        raise VolumeFormatError(f"{path}: header line not terminated")
    try:
        header = json.loads(raw[8:end].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = header["spacing"]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    expected_dtype = "u8" if magic == LABEL_MAGIC else "f32"
    if dtype != expected_dtype:
        raise VolumeFormatError(f"{path}: dtype {dtype!r} does not match magic {magic!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: invalid dims {dims}")

    np_dtype = np.dtype("u1") if dtype == "u8" else np.dtype("<f4")
    payload = raw[end + 1:]
    expected = math.prod(dims) * np_dtype.itemsize
    if len(payload) < expected:
        raise VolumeFormatError(
            f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise VolumeFormatError(
            f"{path}: dims/payload mismatch ({len(payload)} bytes for dims {dims})")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    if magic == LABEL_MAGIC:
        if arr.size and arr.max() >= NUM_CLASSES:
            raise VolumeFormatError(f"{path}: label value {int(arr.max())} out of range 0..3")
        return LabelVolume(arr.copy(), spacing)
    return Volume(arr.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Patch:
    volume_id: str
    slice_index: int
    row: int
    col: int
    image: np.ndarray
    label: np.ndarray = None


@dataclass
class SliceGeometry:
    dims: tuple      # original volume dims (D, H, W)
    axis: int
    padded: tuple    # padded in-slice dims (rows, cols)
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class PatchSet:
    patches: list = field(default_factory=list)
    geometry: dict = field(default_factory=dict)
    patch_size: int = 64

    def __len__(self):
        return len(self.patches)

    def images(self, indices=None):
        sel = self.patches if indices is None else [self.patches[i] for i in indices]
        return np.stack([p.image for p in sel])[:, None]

    def labels(self, indices=None):
        sel = self.patches if indices is None else [self.patches[i] for i in indices]
        return np.stack([p.label for p in sel])

    def extend(self, other):
        if other.patch_size != self.patch_size:
            raise ValueError("cannot merge patch sets with different patch sizes")
        merged = PatchSet(self.patches + other.patches, dict(self.geometry), self.patch_size)
        merged.geometry.update(other.geometry)
        return merged

    def drop_background_slices(self):
        """Remove every patch of slices whose labels are all background."""
        keep = {}
        for p in self.patches:
            key = (p.volume_id, p.slice_index)
            keep[key] = keep.get(key, False) or bool(p.label.any())
        kept = [p for p in self.patches if keep[(p.volume_id, p.slice_index)]]
        return PatchSet(kept, dict(self.geometry), self.patch_size)


def _slices(arr, axis):
    return np.moveaxis(arr, axis, 0)


def tile_patches(img, lab=None, axis=0, volume_id="vol", patch_size=64, normalize=False):
    """Cut each slice along ``axis`` into zero-padded, non-overlapping square patches."""
    if lab is not None and lab.dims != img.dims:
        raise ValueError(f"image dims {img.dims} != label dims {lab.dims}")
    data = img.data
    if normalize:
        lo, hi = float(data.min()), float(data.max())
        data = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    imgs = _slices(data, axis)
    labs = _slices(lab.data, axis) if lab is not None else None
    rows, cols = imgs.shape[1:]
    pr = -(-rows // patch_size) * patch_size
    pc = -(-cols // patch_size) * patch_size

    patches = []
    for s in range(imgs.shape[0]):
        im = np.zeros((pr, pc), dtype=np.float32)
        im[:rows, :cols] = imgs[s]
        lb = None
        if labs is not None:
            lb = np.zeros((pr, pc), dtype=np.uint8)
            lb[:rows, :cols] = labs[s]
        for r in range(0, pr, patch_size):
            for c in range(0, pc, patch_size):
                patches.append(Patch(
                    volume_id, s, r, c,
                    im[r:r + patch_size, c:c + patch_size].copy(),
                    None if lb is None else lb[r:r + patch_size, c:c + patch_size].copy(),
                ))
    geom = SliceGeometry(img.dims, axis, (pr, pc), img.spacing)
    return PatchSet(patches, {volume_id: geom}, patch_size)


def untile_probabilities(patchset, probs, volume_id=None):
    """Reassemble (N, K, P, P) patch probabilities into a (K, D, H, W) volume."""
    if volume_id is None:
        if len(patchset.geometry) != 1:
            raise ValueError("volume_id required when the patch set holds several volumes")
        volume_id = next(iter(patchset.geometry))
    geom = patchset.geometry[volume_id]
    probs = np.asarray(probs)
    if probs.shape[0] != len(patchset):
        raise ValueError(f"{probs.shape[0]} probability patches for {len(patchset)} patches")
    P = patchset.patch_size
    K = probs.shape[1]
    n_slices = geom.dims[geom.axis]
    pr, pc = geom.padded
    out = np.zeros((K, n_slices, pr, pc), dtype=probs.dtype)
    covered = np.zeros((n_slices, pr // P, pc // P), dtype=bool)
    for p, pp in zip(patchset.patches, probs):
        if p.volume_id != volume_id:
            continue
        out[:, p.slice_index, p.row:p.row + P, p.col:p.col + P] = pp
        covered[p.slice_index, p.row // P, p.col // P] = True
    if not covered.all():
        s, r, c = np.argwhere(~covered)[0]
        raise ValueError(
            f"missing patch for volume {volume_id!r} slice {s} origin ({r * P}, {c * P})")
    in_slice = [d for i, d in enumerate(geom.dims) if i != geom.axis]
    out = out[:, :, :in_slice[0], :in_slice[1]]
    return np.moveaxis(out, 1, geom.axis + 1)


def untile(patchset, probs, volume_id=None):
    """Reassemble patch probabilities and take the per-voxel argmax."""
    from .losses import reconstruct_labels

    vol = untile_probabilities(patchset, probs, volume_id)
    key = volume_id if volume_id is not None else next(iter(patchset.geometry))
    labels = reconstruct_labels(vol[None])[0]
    return LabelVolume(labels, patchset.geometry[key].spacing)


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    dims: tuple = (16, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    wm_axes: tuple = (4.0, 12.0, 15.0)
    gm_axes: tuple = (5.5, 18.0, 22.0)
    csf_axes: tuple = (7.0, 23.0, 28.0)
    # background, CSF, GM, WM on an 8-bit-like scale; see README on why not [0, 1]
    means: tuple = (0.0, 25.0, 55.0, 85.0)
    sigma: object = 3.0                      # scalar or one value per class
    bias_amplitude: float = 0.0
    center_offset: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"phantom dims must be 3 positive ints, got {self.dims}")
        _check_spacing(self.spacing)
        for name, ax in (("wm_axes", self.wm_axes), ("gm_axes", self.gm_axes),
                         ("csf_axes", self.csf_axes)):
            if len(ax) != 3 or min(ax) <= 0:
                raise ValueError(f"{name} must be 3 positive semi-axes, got {ax}")
        for i in range(3):
            if not self.wm_axes[i] < self.gm_axes[i] < self.csf_axes[i]:
                raise ValueError(
                    f"invalid nesting on axis {i}: need WM < GM < CSF, got "
                    f"{self.wm_axes[i]}, {self.gm_axes[i]}, {self.csf_axes[i]}")
        if len(self.means) != NUM_CLASSES:
            raise ValueError("means must give one intensity per class")
        if np.any(np.asarray(self.sigma, dtype=float) < 0):
            raise ValueError("sigma must be >= 0")

    def to_dict(self):
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("dims", "spacing", "wm_axes", "gm_axes", "csf_axes", "means", "center_offset"):
            if k in d:
                d[k] = tuple(d[k])
        if "dims" in d:
            d["dims"] = tuple(int(x) for x in d["dims"])
        if isinstance(d.get("sigma"), list):
            d["sigma"] = tuple(d["sigma"])
        return cls(**d)


def phantom_labels(spec):
    grid = np.indices(spec.dims, dtype=np.float64)
    center = [(n - 1) / 2 + off for n, off in zip(spec.dims, spec.center_offset)]

    def inside(axes):
        r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
        return r2 <= 1.0

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[inside(spec.csf_axes)] = 1
    labels[inside(spec.gm_axes)] = 2
    labels[inside(spec.wm_axes)] = 3
    return labels


def bias_field(dims, amplitude, rng):
    """Smooth multiplicative field ``1 + amplitude * ramp`` with ramp in [-1, 1]."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    grid = np.indices(dims, dtype=np.float64)
    centered = [(g - (n - 1) / 2) / max((n - 1) / 2, 1) for g, n in zip(grid, dims)]
    ramp = sum(d * g for d, g in zip(direction, centered))
    ramp /= max(np.abs(ramp).max(), 1e-12)
    return 1.0 + amplitude * ramp


def phantom_generate(spec):
    """Nested-ellipsoid phantom.  Returns (Volume, LabelVolume)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = phantom_labels(spec)
    means = np.asarray(spec.means, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(spec.sigma, dtype=np.float64), (NUM_CLASSES,))
    noise = rng.standard_normal(spec.dims)
    field_rng = np.random.default_rng([spec.seed, 1])
    intensity = means[labels] + sigma[labels] * noise
    if spec.bias_amplitude:
        intensity = intensity * bias_field(spec.dims, spec.bias_amplitude, field_rng)
    return Volume(intensity, spec.spacing), LabelVolume(labels, spec.spacing)


# ---------------------------------------------------------------------------
# splits


def make_split(volume_ids, roles, seed=0):
    """Assign volume ids to disjoint roles.

    ``roles`` maps role name to either a count (filled from a seeded shuffle
    of the remaining ids) or an explicit list of ids.
    """
    pool = list(volume_ids)
    if len(set(pool)) != len(pool):
        raise ValueError("duplicate volume ids in pool")
    split = {}
    taken = {}
    for role, spec in roles.items():
        if isinstance(spec, int):
            continue
        for vid in spec:
            if vid not in pool:
                raise ValueError(f"volume id {vid!r} (role {role!r}) is not in the pool")
            if vid in taken:
                raise ValueError(f"volume id {vid!r} assigned to both {taken[vid]!r} and {role!r}")
            taken[vid] = role
        split[role] = list(spec)
    rest = [v for v in pool if v not in taken]
    rest = [rest[i] for i in np.random.default_rng(seed).permutation(len(rest))]
    for role, spec in roles.items():
        if not isinstance(spec, int):
            continue
        if spec > len(rest):
            raise ValueError(f"role {role!r} wants {spec} volumes, only {len(rest)} left")
        split[role], rest = rest[:spec], rest[spec:]
    return {role: split[role] for role in roles}


def check_split(split):
    seen = {}
    for role, ids in split.items():
        for vid in ids:
            if vid in seen:
                raise ValueError(f"volume id {vid!r} assigned to both {seen[vid]!r} and {role!r}")
            seen[vid] = role
    return split


def save_split(split, path, **extra):
    doc = {"roles": check_split(split)}
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return check_split(doc["roles"])


def phantom_series(base, n, seed, axis_jitter=0.1, max_shift=2.0, **overrides):
    """``n`` variations of ``base`` with jittered ellipsoids and centres.

    Scaling all three shells of an axis by one factor keeps the nesting valid.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        scale = 1 + rng.uniform(-axis_jitter, axis_jitter, size=3)
        shift = rng.uniform(-max_shift, max_shift, size=3)
        shift[0] *= base.dims[0] / max(base.dims)
        fields = base.to_dict()
        fields.update(
            wm_axes=tuple(np.asarray(base.wm_axes) * scale),
            gm_axes=tuple(np.asarray(base.gm_axes) * scale),
            csf_axes=tuple(np.asarray(base.csf_axes) * scale),
            center_offset=tuple(shift),
            seed=int(rng.integers(2 ** 31)),
        )
        fields.update(overrides)
        specs.append(PhantomSpec.from_dict(fields))
    return specs
