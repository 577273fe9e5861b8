"""
Synthetic flat-field camera dataset.

Each simulated camera model imprints its own acquisition traces on flat,
mildly shaded scenes: a fixed multiplicative PRNU field, read noise, channel
gains, Bayer sampling with one of two demosaicing kernels, and a
model-specific quantisation step.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .imaging import IMAGE_EXTENSIONS, read_image, write_png16
from .seeding import rng_for, sub_seed

BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
DEMOSAIC_KERNELS = ("bilinear", "smooth_hue")
QUANT_RANGE = (0.004, 0.02)
GAIN_AMPLITUDE = 0.03
_GOLDEN = (5 ** 0.5 - 1) / 2

_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4
_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4


@dataclass(frozen=True)
class CameraProfile:
    model_id: str
    prnu_seed: int
    prnu_strength: float
    bayer_pattern: str
    demosaic_kernel: str
    quant_step: float
    channel_gains: tuple
    read_noise_sigma: float

    def __post_init__(self):
        if self.bayer_pattern not in BAYER_PATTERNS:
            raise ValueError(f"unknown Bayer pattern {self.bayer_pattern!r}")
        if self.demosaic_kernel not in DEMOSAIC_KERNELS:
            raise ValueError(f"unknown demosaic kernel {self.demosaic_kernel!r}")
        if not 0 < self.quant_step <= 0.1:
            raise ValueError("quant_step must lie in (0, 0.1]")
        if self.prnu_strength < 0 or self.read_noise_sigma < 0:
            raise ValueError("prnu_strength and read_noise_sigma must be non-negative")
        if len(self.channel_gains) != 3 or min(self.channel_gains) <= 0:
            raise ValueError("channel_gains must be three positive reals")


@dataclass(frozen=True)
class SceneSpec:
    base_brightness: float
    gradient_slope: float
    seed: int

    def __post_init__(self):
        if not 0.2 <= self.base_brightness <= 0.95:
            raise ValueError("base_brightness must lie in [0.2, 0.95]")


def _index_from_id(model_id):
    m = re.search(r"(\d+)$", model_id)
    return int(m.group(1)) if m else 0


def make_profile(model_id, master_seed, index=None, prnu_strength=0.02):
    """Deterministic synthetic camera.

    ``index`` is the model's position in its set (defaults to the trailing
    number of ``model_id``). It drives the cycled Bayer layout, the
    alternating demosaic kernel and a golden-ratio spread of quantisation
    steps, so the first four indices always get distinct combinations.
    """
    if not model_id:
        raise ValueError("model_id must be non-empty")
    if index is None:
        index = _index_from_id(model_id)
    rng = rng_for(master_seed, "profile", index, model_id)
    lo, hi = QUANT_RANGE
    return CameraProfile(
        model_id=model_id,
        prnu_seed=sub_seed(master_seed, "prnu", index, model_id),
        prnu_strength=float(prnu_strength),
        bayer_pattern=BAYER_PATTERNS[index % 4],
        demosaic_kernel=DEMOSAIC_KERNELS[index % 2],
        quant_step=float(lo + (hi - lo) * ((index * _GOLDEN) % 1.0)),
        channel_gains=_gains(index),
        read_noise_sigma=float(rng.uniform(0.001, 0.004)),
    )


def _gains(index, amplitude=GAIN_AMPLITUDE):
    """Unit-mean channel gains whose hue angle follows the golden-ratio sequence."""
    angle = 2 * np.pi * ((index * _GOLDEN) % 1.0)
    return tuple(float(1 + amplitude * np.cos(angle + 2 * np.pi * c / 3)) for c in range(3))


def make_profiles(n, master_seed, prnu_strength=0.02):
    return [make_profile(f"cam{i:02d}", master_seed, index=i, prnu_strength=prnu_strength) for i in range(n)]


def prnu_field(seed, height, width):
    """Zero-mean, unit-variance sensor field."""
    f = np.random.default_rng(seed).standard_normal((height, width))
    f -= f.mean()
    return f / f.std()


def bayer_masks(pattern, height, width):
    """[3,H,W] 0/1 masks telling which channel each photosite samples."""
    masks = np.zeros((3, height, width))
    for k, ch in enumerate(pattern):
        dy, dx = divmod(k, 2)
        masks["RGB".index(ch), dy::2, dx::2] = 1
    return masks


def _interp(plane, mask, kernel):
    return correlate(plane * mask, kernel, mode="mirror")


def demosaic(raw, pattern, kernel="bilinear"):
    """Reconstruct [3,H,W] from a single-plane mosaic."""
    h, w = raw.shape
    masks = bayer_masks(pattern, h, w)
    green = _interp(raw, masks[1], _G_KERNEL)
    out = np.empty((3, h, w))
    out[1] = green
    for c in (0, 2):
        if kernel == "bilinear":
            out[c] = _interp(raw, masks[c], _RB_KERNEL)
        elif kernel == "smooth_hue":
            ratio = raw / np.maximum(green, 1e-6)
            out[c] = _interp(ratio, masks[c], _RB_KERNEL) * green
        else:
            raise ValueError(f"unknown demosaic kernel {kernel!r}")
    return out


def render_image(profile, scene, width, height):
    """Run the acquisition pipeline on a flat scene; float32 [3,H,W] in [0,1]."""
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise ValueError(f"image extents must be positive and even, got {width}x{height}")
    xs = np.arange(width) - (width - 1) / 2
    plane = np.clip(scene.base_brightness + scene.gradient_slope * xs, 0.0, 1.0)
    sensor = np.broadcast_to(plane, (height, width)).copy()
    sensor *= 1 + profile.prnu_strength * prnu_field(profile.prnu_seed, height, width)
    if profile.read_noise_sigma > 0:
        noise_rng = np.random.default_rng([scene.seed, profile.prnu_seed])
        sensor += profile.read_noise_sigma * noise_rng.standard_normal((height, width))
    rgb = sensor[None] * np.asarray(profile.channel_gains)[:, None, None]
    raw = (rgb * bayer_masks(profile.bayer_pattern, height, width)).sum(axis=0)
    img = demosaic(raw, profile.bayer_pattern, profile.demosaic_kernel)
    img = np.round(img / profile.quant_step) * profile.quant_step
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    model_id: str
    scene_seed: int | None = None


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    @property
    def counts(self):
        out = {}
        for e in self.entries:
            out[e.model_id] = out.get(e.model_id, 0) + 1
        return out

    @property
    def model_ids(self):
        return sorted(self.counts)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def save(self, path):
        path = Path(path)
        lines = [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        path.write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path):
        path = Path(path)
        entries = [ManifestEntry(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        return cls(entries, root=path.parent)


def scene_for(seed, model_id, index, height):
    rng = rng_for(seed, "scene", model_id, index)
    return SceneSpec(
        base_brightness=float(rng.uniform(0.3, 0.8)),
        gradient_slope=float(rng.uniform(-0.1, 0.1) / height),
        seed=sub_seed(seed, "scene-noise", model_id, index),
    )


def build_dataset(profiles, images_per_model, out_dir, seed, width=192, height=192):
    """Render ``images_per_model`` images per profile and write them plus ``manifest.jsonl``."""
    if images_per_model < 3:
        raise ValueError("images_per_model must be >= 3 so every split gets an image")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries = []
    for profile in sorted(profiles, key=lambda p: p.model_id):
        (out_dir / profile.model_id).mkdir(exist_ok=True)
        for i in range(images_per_model):
            scene = scene_for(seed, profile.model_id, i, height)
            rel = f"{profile.model_id}/{profile.model_id}_{i:04d}.png"
            write_png16(render_image(profile, scene, width, height), out_dir / rel)
            entries.append(ManifestEntry(rel, profile.model_id, scene.seed))
    manifest = DatasetManifest(entries, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def ingest_directory(root, label_rule=None):
    """Manifest over ``root/<subdir>/<image>``; subdirectory names map to model ids.

    ``label_rule`` may be a dict or a callable; by default the subdirectory
    name is the model id. Files with unknown extensions or that fail to
    decode land in ``manifest.skipped`` as ``(path, reason)`` pairs.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    if label_rule is None:
        rule = lambda name: name  # noqa: E731
    elif isinstance(label_rule, dict):
        rule = label_rule.get
    else:
        rule = label_rule
    entries, skipped = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        model_id = rule(sub.name)
        if model_id is None:
            continue
        for f in sorted(p for p in sub.iterdir() if p.is_file()):
            rel = str(f.relative_to(root))
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                skipped.append((rel, "unsupported extension"))
            elif read_image(f) is None:
                skipped.append((rel, "undecodable"))
            else:
                entries.append(ManifestEntry(rel, model_id))
    if not entries:
        raise ValueError(f"no decodable images under {root}")
    return DatasetManifest(entries, root=root, skipped=skipped)
