"""
Patch protocol: non-overlapping 32x32 windows that inherit their image's
label, image-level train/val/test splits, and majority-vote image decisions.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import read_image
from .model import predict
from .seeding import sub_seed

PATCH = 32
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)


@dataclass
class PatchRecord:
    pixels: np.ndarray
    image_id: str
    true_label: int
    patch_index: int
    position: tuple = (0, 0)

    def __post_init__(self):
        if self.pixels.shape != (3, PATCH, PATCH):
            raise ValueError(f"patch must be 3x{PATCH}x{PATCH}, got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("patch pixels must lie in [0, 1]")


@dataclass
class ImagePrediction:
    image_id: str
    patch_labels: list
    confidences: list
    label: int
    votes: dict


# --------------------------------------------------------------------------
# extraction


def _overlaps(a, b):
    return abs(a[0] - b[0]) < PATCH and abs(a[1] - b[1]) < PATCH


def patch_positions(height, width, k, seed):
    """Top-left corners of ``k`` pairwise disjoint windows.

    Uniform proposals are accepted when they clear every accepted window;
    after ``1000 * k`` proposals the search falls back to a seeded choice of
    cells from the aligned grid.
    """
    if height < PATCH or width < PATCH:
        raise ValueError(f"image {height}x{width} is smaller than one {PATCH}x{PATCH} patch")
    max_k = (height // PATCH) * (width // PATCH)
    if k < 1 or k > max_k:
        raise ValueError(f"cannot place {k} disjoint patches in {height}x{width}; max feasible is {max_k}")
    rng = np.random.default_rng(seed)
    accepted = []
    for _ in range(1000 * k):
        y = int(rng.integers(0, height - PATCH + 1))
        x = int(rng.integers(0, width - PATCH + 1))
        if not any(_overlaps((y, x), a) for a in accepted):
            accepted.append((y, x))
            if len(accepted) == k:
                return accepted
    cells = [(r * PATCH, c * PATCH) for r in range(height // PATCH) for c in range(width // PATCH)]
    pick = sorted(rng.choice(len(cells), size=k, replace=False))
    return [cells[i] for i in pick]


def extract_patches(image, k, seed, image_id="", label=-1):
    """Cut ``k`` disjoint 32x32 patches out of a [3,H,W] image."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    records = []
    for i, (y, x) in enumerate(patch_positions(h, w, k, seed)):
        px = np.ascontiguousarray(image[:, y:y + PATCH, x:x + PATCH])
        records.append(PatchRecord(px, image_id, label, i, (y, x)))
    return records


def image_id_for(entry):
    return entry.path


def label_map(manifest):
    return {m: i for i, m in enumerate(manifest.model_ids)}


def patches_from_manifest(manifest, k, seed, labels=None, image_ids=None):
    """Patches for every manifest image (or those in ``image_ids``), label from ``labels``."""
    labels = labels or label_map(manifest)
    out = []
    for entry in manifest.entries:
        iid = image_id_for(entry)
        if image_ids is not None and iid not in image_ids:
            continue
        img = read_image(manifest.resolve(entry))
        if img is None:
            raise ValueError(f"cannot decode {entry.path}")
        out.extend(extract_patches(img, k, sub_seed(seed, "patching", iid), iid, labels[entry.model_id]))
    return out


# --------------------------------------------------------------------------
# splitting


def split_counts(n, fractions=DEFAULT_FRACTIONS):
    """Largest-remainder allocation of ``n`` images, then no empty split."""
    if n < len(fractions):
        raise ValueError(f"need at least {len(fractions)} images per model, got {n}")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_by_image(manifest, fractions=DEFAULT_FRACTIONS, seed=0):
    """Map image id -> split, shuffled within each model."""
    assignment = {}
    by_model = {}
    for entry in manifest.entries:
        by_model.setdefault(entry.model_id, []).append(image_id_for(entry))
    for model_id in sorted(by_model):
        ids = sorted(by_model[model_id])
        counts = split_counts(len(ids), fractions)
        rng = np.random.default_rng(sub_seed(seed, "split", model_id))
        ids = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for name, c in zip(SPLITS, counts):
            for iid in ids[start:start + c]:
                assignment[iid] = name
            start += c
    return assignment


def save_split(assignment, path):
    Path(path).write_text(json.dumps(assignment, sort_keys=True, indent=1) + "\n")


def load_split(path):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# patch cache: index.jsonl + patches.bin (little-endian float32 blobs)


def save_patch_cache(records, directory, split=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(directory / "patches.bin", "wb") as blob, open(directory / "index.jsonl", "w") as index:
        for r in records:
            raw = r.pixels.astype("<f4").tobytes()
            row = {
                "image_id": r.image_id,
                "patch_index": r.patch_index,
                "true_label": int(r.true_label),
                "position": list(r.position),
                "offset": offset,
                "nbytes": len(raw),
            }
            if split is not None:
                row["split"] = split[r.image_id]
            index.write(json.dumps(row, sort_keys=True) + "\n")
            blob.write(raw)
            offset += len(raw)


def load_patch_cache(directory):
    directory = Path(directory)
    blob = (directory / "patches.bin").read_bytes()
    records = []
    for line in (directory / "index.jsonl").read_text().splitlines():
        row = json.loads(line)
        chunk = blob[row["offset"]:row["offset"] + row["nbytes"]]
        if len(chunk) != row["nbytes"]:
            raise ValueError(f"patch cache truncated at {row['image_id']}#{row['patch_index']}")
        px = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(3, PATCH, PATCH)
        records.append(PatchRecord(px, row["image_id"], row["true_label"], row["patch_index"], tuple(row["position"])))
    return records


def stack(records):
    """``(pixels [N,3,32,32], labels [N])`` arrays for a list of records."""
    if not records:
        return np.zeros((0, 3, PATCH, PATCH), np.float32), np.zeros(0, np.int64)
    return np.stack([r.pixels for r in records]), np.array([r.true_label for r in records], dtype=np.int64)


# --------------------------------------------------------------------------
# prediction


def predict_patch(model, patch):
    """``(label, confidence)`` for one patch; exact ties go to the lowest class."""
    pixels = patch.pixels if isinstance(patch, PatchRecord) else patch
    labels, conf = predict(model, np.asarray(pixels)[None])
    return int(labels[0]), float(conf[0])


def majority_vote(labels, num_classes=None):
    """Most frequent label, lowest class index on ties; returns ``(label, histogram)``."""
    if len(labels) == 0:
        raise ValueError("majority vote needs at least one label")
    hist = Counter(int(v) for v in labels)
    best = max(hist.values())
    winner = min(lbl for lbl, c in hist.items() if c == best)
    return winner, dict(sorted(hist.items()))


def predict_image(model, patches):
    if not patches:
        raise ValueError("predict_image needs at least one patch")
    ids = {p.image_id for p in patches}
    if len(ids) != 1:
        raise ValueError(f"patches come from several images: {sorted(ids)}")
    x, _ = stack(patches)
    labels, conf = predict(model, x)
    winner, votes = majority_vote(labels)
    return ImagePrediction(ids.pop(), [int(v) for v in labels], [float(c) for c in conf], winner, votes)


def group_by_image(records):
    groups = {}
    for r in records:
        groups.setdefault(r.image_id, []).append(r)
    return groups
