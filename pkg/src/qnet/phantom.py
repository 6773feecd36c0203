"""Synthetic 3-channel phantom scans, the on-disk dataset format and
subject-level fold splitting.

A scan is an ordered stack of slices sharing smooth elliptical "anatomy"
with small per-slice drift, plus a central elliptical target region whose
bounding box is recorded. Scans labelled HH additionally receive Gaussian
"deposit" blobs inside that region on the two iron-sensitive channels
(0 and 1); channel 2 carries anatomy only. Blob parameters are drawn for
every scan regardless of label and scaled by ``amplitude`` times the label
indicator, so at amplitude zero the two classes are bit-identical given
the same seed. Blob centers drift by at most one pixel per axis between
consecutive slices and blobs (3-sigma support) stay inside the box.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SLICE_MAGIC = b"QNS1"
LABELS = ("HC", "HH")
MANIFEST_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset file is malformed."""


@dataclass
class PhantomParams:
    amplitude: float = 1.0
    seq_len: int = 8
    size: int = 96
    n_anatomy: int = 6          # background structures per scan
    n_blobs: int = 3            # deposits per HH scan
    blob_sigma: tuple = (1.8, 3.0)
    blob_strength: float = 0.5  # peak intensity at amplitude 1
    noise_sigma: float = 0.02

    def validate(self):
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.seq_len < 1 or self.size < 48:
            raise ValueError("seq_len must be >= 1 and size >= 48")
        return self


@dataclass
class Scan:
    subject_id: str
    label: str
    slices: np.ndarray               # (T, 3, H, W) float32 in [0,1]
    bbox: tuple                      # (r0, c0, rows, cols)
    lesions: list = field(default=None, repr=False)  # in-memory metadata only


@dataclass
class FoldSplit:
    k: int
    fold_of: dict                    # subject_id -> fold index

    def test_ids(self, fold):
        return sorted(s for s, f in self.fold_of.items() if f == fold)

    def train_ids(self, fold):
        return sorted(s for s, f in self.fold_of.items() if f != fold)


def _soft_ellipse(rr, cc, cy, cx, ry, rx):
    """Smooth bump with compact support on an ellipse."""
    d2 = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2
    return np.maximum(0.0, 1.0 - d2) ** 1.5


def generate_phantom_scan(subject_seed, label, params: PhantomParams) -> Scan:
    """Deterministically generate one scan for ``subject_seed``."""
    params.validate()
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")
    rng = np.random.default_rng(subject_seed)
    s = params.size
    t_len = params.seq_len
    rr, cc = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64), indexing="ij")
    center = (s - 1) / 2.0

    # whole-head ellipse and per-channel base intensity
    head_cy = center + rng.uniform(-2, 2)
    head_cx = center + rng.uniform(-2, 2)
    head_ry = s * 0.42 + rng.uniform(-2, 2)
    head_rx = s * 0.36 + rng.uniform(-2, 2)
    base = np.array([0.35, 0.45, 0.55]) + rng.uniform(-0.05, 0.05, size=3)

    # background anatomy: soft ellipses shared across the scan
    anat = []
    for _ in range(params.n_anatomy):
        anat.append(dict(
            cy=head_cy + rng.uniform(-0.55, 0.55) * head_ry,
            cx=head_cx + rng.uniform(-0.55, 0.55) * head_rx,
            ry=rng.uniform(4, 14), rx=rng.uniform(4, 14),
            amp=rng.uniform(-0.18, 0.18, size=3),
            drift=rng.uniform(-0.7, 0.7, size=(t_len, 2)).cumsum(axis=0),
        ))

    # central target region ("basal ganglia"): bbox recorded in the manifest
    bg_cy = center + rng.uniform(-3, 3)
    bg_cx = center + rng.uniform(-3, 3)
    bg_ry = rng.uniform(11, 13)
    bg_rx = rng.uniform(15, 17)
    r0 = int(np.floor(bg_cy - bg_ry))
    c0 = int(np.floor(bg_cx - bg_rx))
    rows = int(np.ceil(bg_cy + bg_ry)) - r0 + 1
    cols = int(np.ceil(bg_cx + bg_rx)) - c0 + 1
    bbox = (r0, c0, rows, cols)
    bg_amp = rng.uniform(0.06, 0.12, size=3)

    # deposits: drawn for both labels, applied only for HH via the indicator
    lesions = []
    for _ in range(params.n_blobs):
        sigma = rng.uniform(*params.blob_sigma)
        margin = int(np.ceil(3 * sigma)) + 1
        lo_r, hi_r = r0 + margin, r0 + rows - 1 - margin
        lo_c, hi_c = c0 + margin, c0 + cols - 1 - margin
        base_r = rng.uniform(lo_r, hi_r)
        base_c = rng.uniform(lo_c, hi_c)
        steps = rng.integers(-1, 2, size=(t_len, 2)).cumsum(axis=0)
        centers = np.stack([np.clip(base_r + steps[:, 0], lo_r, hi_r),
                            np.clip(base_c + steps[:, 1], lo_c, hi_c)], axis=1)
        strength = rng.uniform(0.6, 1.0) * params.blob_strength
        lesions.append(dict(sigma=sigma, centers=centers, strength=strength))

    signal = params.amplitude * (1.0 if label == "HH" else 0.0)
    chan_weight = np.array([1.0, 0.8, 0.0])  # iron contrast on channels 0-1 only

    slices = np.empty((t_len, 3, s, s), dtype=np.float32)
    for t in range(t_len):
        head = _soft_ellipse(rr, cc, head_cy, head_cx, head_ry, head_rx)
        img = base[:, None, None] * head[None]
        for a in anat:
            e = _soft_ellipse(rr, cc, a["cy"] + a["drift"][t, 0],
                              a["cx"] + a["drift"][t, 1], a["ry"], a["rx"])
            img = img + a["amp"][:, None, None] * (e * head)[None]
        bg = _soft_ellipse(rr, cc, bg_cy, bg_cx, bg_ry, bg_rx)
        img = img + bg_amp[:, None, None] * bg[None]
        if signal > 0:
            for les in lesions:
                cy, cx = les["centers"][t]
                d2 = (rr - cy) ** 2 + (cc - cx) ** 2
                blob = np.exp(-d2 / (2 * les["sigma"] ** 2))
                blob[d2 > (3 * les["sigma"]) ** 2] = 0.0  # compact support
                img = img + (signal * les["strength"] * chan_weight)[:, None, None] * blob[None]
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
        slices[t] = np.clip(img, 0.0, 1.0).astype(np.float32)

    return Scan(subject_id="", label=label, slices=slices, bbox=bbox, lesions=lesions)


def generate_dataset(n_subjects, params: PhantomParams, seed) -> list:
    """Balanced dataset: first half HC, second half HH, ids s000, s001, ..."""
    n_hh = n_subjects // 2
    scans = []
    for i in range(n_subjects):
        label = "HC" if i < n_subjects - n_hh else "HH"
        scan = generate_phantom_scan([seed, i], label, params)
        scan.subject_id = f"s{i:03d}"
        scans.append(scan)
    return scans


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_slice_file(path: Path, img: np.ndarray):
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(SLICE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_slice_file(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SLICE_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise DatasetFormatError(f"{path}: truncated header")
        h, w, c = struct.unpack("<III", header)
        payload = fh.read()
    expected = c * h * w * 4
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()


def write_dataset(scans, out_dir, params: PhantomParams, seed) -> dict:
    """Write slices plus manifest.json; returns the manifest dict."""
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    t_len = scans[0].slices.shape[0]
    h, w = scans[0].slices.shape[2:]
    subjects = []
    for scan in scans:
        names = []
        for t in range(scan.slices.shape[0]):
            name = f"slices/{scan.subject_id}_{t:02d}.qns"
            write_slice_file(out / name, scan.slices[t])
            names.append(name)
        subjects.append(dict(id=scan.subject_id, label=scan.label,
                             bbox=list(scan.bbox), slices=names))
    manifest = dict(version=MANIFEST_VERSION, height=h, width=w, channels=3,
                    seq_len=t_len, subjects=subjects,
                    generator=dict(amplitude=params.amplitude, seed=seed))
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: manifest not found")
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})")
    required = {"version", "height", "width", "channels", "seq_len",
                "subjects", "generator"}
    missing = required - manifest.keys()
    if missing:
        raise DatasetFormatError(f"{path}: missing fields {sorted(missing)}")
    for rec in manifest["subjects"]:
        if rec["label"] not in LABELS:
            raise DatasetFormatError(
                f"{path}: subject {rec['id']} has unknown label {rec['label']!r}")
    return manifest


def read_dataset(data_dir):
    """Returns (manifest, list of Scan). Bitwise inverse of write_dataset."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    h, w, c = manifest["height"], manifest["width"], manifest["channels"]
    scans = []
    for rec in manifest["subjects"]:
        slices = np.empty((len(rec["slices"]), c, h, w), dtype=np.float32)
        for t, name in enumerate(rec["slices"]):
            img = read_slice_file(root / name)
            if img.shape != (c, h, w):
                raise DatasetFormatError(
                    f"{root / name}: shape {img.shape} does not match manifest {(c, h, w)}")
            slices[t] = img
        scans.append(Scan(subject_id=rec["id"], label=rec["label"],
                          slices=slices, bbox=tuple(rec["bbox"])))
    return manifest, scans


# ---------------------------------------------------------------------------
# fold splitting
# ---------------------------------------------------------------------------

def make_folds(subject_labels, k, seed) -> FoldSplit:
    """Stratified subject-level split into k folds.

    ``subject_labels``: list of (subject_id, label). Fold sizes differ by
    at most one overall and per class. A class with fewer than k members
    cannot be stratified; falls back to an unstratified split with a
    warning.
    """
    import warnings

    ids = [s for s, _ in subject_labels]
    if k > len(ids):
        raise ValueError(f"k={k} exceeds subject count {len(ids)}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for sid, lab in subject_labels:
        by_class.setdefault(lab, []).append(sid)
    stratified = all(len(v) >= k for v in by_class.values())
    fold_of = {}
    if stratified:
        # continuing round-robin pointer keeps totals balanced across classes
        ptr = 0
        for lab in sorted(by_class):
            members = sorted(by_class[lab])
            rng.shuffle(members)
            for sid in members:
                fold_of[sid] = ptr % k
                ptr += 1
    else:
        warnings.warn("a class has fewer members than folds; "
                      "falling back to an unstratified split")
        members = sorted(ids)
        rng.shuffle(members)
        for i, sid in enumerate(members):
            fold_of[sid] = i % k
    return FoldSplit(k=k, fold_of=fold_of)
