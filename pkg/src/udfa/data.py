"""Dataset ingestion and augmentation.

On-disk layout (one root per dataset):

    root/
      manifest.json            split case lists + per-file sha256 checksums
      train_npz/{case}_slice{k:03d}.npz     keys: image (float), label (int)
      test_vol_h5/{vol}.npy.h5              datasets: image, label; attr: spacing
      val_vol_h5/{vol}.npy.h5               ACDC only

Train slices and test volumes follow the community-standard preprocessed
Synapse/ACDC releases (already clipped and intensity-normalized); the
`prepare-data` command indexes such a tree and writes the manifest, or
generates a synthetic tree for desk-scale runs.
"""

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


class DataError(RuntimeError):
    """Raised when a dataset root is missing, inconsistent, or corrupt."""


@dataclass
class SliceSample:
    image: np.ndarray  # (H, W) float
    label: np.ndarray  # (H, W) int
    case_id: str
    slice_index: int

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise DataError(
                f"{self.case_id}[{self.slice_index}]: image {self.image.shape} vs label {self.label.shape}"
            )


@dataclass
class VolumeSample:
    image: np.ndarray  # (S, H, W) float
    label: np.ndarray  # (S, H, W) int
    case_id: str
    spacing: tuple | None = None

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise DataError(f"{self.case_id}: image {self.image.shape} vs label {self.label.shape}")
        if self.image.ndim != 3 or self.image.shape[0] < 1:
            raise DataError(f"{self.case_id}: expected (S, H, W) with S >= 1, got {self.image.shape}")


# Canonical splits. Synapse: the standard 18/12 case split used throughout
# the compared literature. ACDC: 100 patients in five pathology blocks of
# 20; per block the first 14 go to train, the next 2 to val, the last 4 to
# test, giving a stratified 70/10/20.
SYNAPSE_TRAIN_CASES = (
    "case0005", "case0006", "case0007", "case0009", "case0010", "case0021",
    "case0023", "case0024", "case0026", "case0027", "case0028", "case0030",
    "case0031", "case0033", "case0034", "case0037", "case0039", "case0040",
)
SYNAPSE_TEST_CASES = (
    "case0001", "case0002", "case0003", "case0004", "case0008", "case0022",
    "case0025", "case0029", "case0032", "case0035", "case0036", "case0038",
)

def _acdc_block_split():
    train, val, test = [], [], []
    for block in range(5):
        base = block * 20
        ids = [f"patient{base + i + 1:03d}" for i in range(20)]
        train += ids[:14]
        val += ids[14:16]
        test += ids[16:]
    return tuple(train), tuple(val), tuple(test)

ACDC_TRAIN_CASES, ACDC_VAL_CASES, ACDC_TEST_CASES = _acdc_block_split()

SYNAPSE_CLASS_NAMES = (
    "Aorta", "Gallbladder", "Kidney(L)", "Kidney(R)",
    "Liver", "Pancreas", "Spleen", "Stomach",
)
ACDC_CLASS_NAMES = ("RV", "Myo", "LV")

DATASET_NUM_CLASSES = {"synapse": 9, "acdc": 4}


def class_names_for(dataset: str, num_classes: int) -> list:
    if dataset == "synapse" and num_classes == 9:
        return list(SYNAPSE_CLASS_NAMES)
    if dataset == "acdc" and num_classes == 4:
        return list(ACDC_CLASS_NAMES)
    return [f"class{c}" for c in range(1, num_classes)]


def case_of(stem: str) -> str:
    """Map a file stem to its case id: ACDC volume/slice stems keep the
    patient prefix; everything else keeps the part before `_slice`.
    """
    m = re.match(r"(patient\d+)", stem)
    if m:
        return m.group(1)
    return stem.split("_slice")[0]


# -- resizing and augmentation ----------------------------------------------

def resize_image(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize to an exact (H, W)."""
    if tuple(image.shape) == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image)).float()[None, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def resize_label(label: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbor resize; never invents class ids."""
    if tuple(label.shape) == tuple(size):
        return label
    t = torch.from_numpy(np.ascontiguousarray(label)).float()[None, None]
    out = F.interpolate(t, size=tuple(size), mode="nearest")
    return out[0, 0].numpy().astype(label.dtype)


def flip_rot90(sample: SliceSample, axis: int, k: int) -> SliceSample:
    image = np.rot90(np.flip(sample.image, axis=axis), k)
    label = np.rot90(np.flip(sample.label, axis=axis), k)
    return SliceSample(np.ascontiguousarray(image), np.ascontiguousarray(label), sample.case_id, sample.slice_index)


def rotate_angle(sample: SliceSample, angle: float) -> SliceSample:
    """Free-angle rotation; image bilinear, label nearest-neighbor."""
    image = ndimage.rotate(sample.image, angle, order=1, reshape=False, mode="constant", cval=0.0)
    label = ndimage.rotate(sample.label, angle, order=0, reshape=False, mode="constant", cval=0)
    return SliceSample(image, label.astype(sample.label.dtype), sample.case_id, sample.slice_index)


def augment(sample: SliceSample, rng: np.random.Generator, out_size: tuple,
            flip: bool = True, rotation: bool = True, intensity: bool = True) -> SliceSample:
    """Random flip/rot90, free-angle rotation, intensity jitter, then a
    resize to the model input size. Fully determined by the generator.
    """
    s = sample
    if flip and rng.random() < 0.5:
        s = flip_rot90(s, axis=int(rng.integers(0, 2)), k=int(rng.integers(0, 4)))
    if rotation and rng.random() < 0.5:
        s = rotate_angle(s, float(rng.uniform(-20.0, 20.0)))
    image = s.image.astype(np.float32)
    if intensity:
        image = image * float(rng.uniform(0.9, 1.1)) + float(rng.uniform(-0.1, 0.1))
    image = resize_image(image, out_size)
    label = resize_label(s.label, out_size)
    return SliceSample(image, label, sample.case_id, sample.slice_index)


def to_model_tensor(image: np.ndarray) -> torch.Tensor:
    """Replicate a grayscale slice to the 3 channels the backbone expects."""
    t = torch.from_numpy(np.ascontiguousarray(image)).float()
    return t[None].repeat(3, 1, 1)


class TrainingSliceDataset(torch.utils.data.Dataset):
    """Lazy training view over slice files (or in-memory samples) with
    per-item augmentation. The RNG is derived from (seed, epoch, index) so
    results do not depend on worker count or iteration order.
    """

    def __init__(self, entries, out_size, seed=0, flip=True, rotation=True, intensity=True, augment_enabled=True):
        self.entries = list(entries)  # paths or SliceSamples
        self.out_size = tuple(out_size)
        self.seed = seed
        self.epoch = 0
        self.flip = flip
        self.rotation = rotation
        self.intensity = intensity
        self.augment_enabled = augment_enabled

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.entries)

    def _load(self, entry) -> SliceSample:
        if isinstance(entry, SliceSample):
            return entry
        return load_slice_npz(entry)

    def case_id_of(self, index: int) -> str:
        entry = self.entries[index]
        if isinstance(entry, SliceSample):
            return entry.case_id
        return case_of(Path(entry).name.split(".npz")[0])

    def __getitem__(self, index):
        s = self._load(self.entries[index])
        if self.augment_enabled:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            s = augment(s, rng, self.out_size, flip=self.flip, rotation=self.rotation, intensity=self.intensity)
        else:
            s = SliceSample(resize_image(s.image.astype(np.float32), self.out_size),
                            resize_label(s.label, self.out_size), s.case_id, s.slice_index)
        return to_model_tensor(s.image), torch.from_numpy(np.ascontiguousarray(s.label)).long(), index


# -- file I/O ----------------------------------------------------------------

def load_slice_npz(path) -> SliceSample:
    path = Path(path)
    try:
        with np.load(path) as z:
            image, label = z["image"], z["label"]
    except Exception as e:
        raise DataError(f"could not read slice file {path}: {e}") from e
    stem = path.name[: -len(".npz")]
    case = case_of(stem)
    m = re.search(r"_slice(\d+)$", stem)
    idx = int(m.group(1)) if m else 0
    return SliceSample(image.astype(np.float32), label.astype(np.int64), case, idx)


def load_volume_h5(path) -> VolumeSample:
    path = Path(path)
    try:
        with h5py.File(path, "r") as f:
            image = f["image"][()]
            label = f["label"][()]
            spacing = tuple(float(x) for x in f.attrs["spacing"]) if "spacing" in f.attrs else None
    except OSError as e:
        raise DataError(f"could not read volume file {path}: {e}") from e
    stem = path.name[: -len(".npy.h5")] if path.name.endswith(".npy.h5") else path.stem
    return VolumeSample(image.astype(np.float32), label.astype(np.int64), stem, spacing)


def save_slice_npz(path, sample: SliceSample) -> None:
    np.savez(path, image=sample.image.astype(np.float32), label=sample.label.astype(np.int64))


def save_volume_h5(path, vol: VolumeSample) -> None:
    with h5py.File(path, "w") as f:
        f.create_dataset("image", data=vol.image.astype(np.float32))
        f.create_dataset("label", data=vol.label.astype(np.int64))
        f.attrs["spacing"] = vol.spacing if vol.spacing is not None else (1.0, 1.0, 1.0)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- manifest + split loading -------------------------------------------------

def expected_splits(dataset: str) -> dict | None:
    if dataset == "synapse":
        return {"train": list(SYNAPSE_TRAIN_CASES), "val": [], "test": list(SYNAPSE_TEST_CASES)}
    if dataset == "acdc":
        return {"train": list(ACDC_TRAIN_CASES), "val": list(ACDC_VAL_CASES), "test": list(ACDC_TEST_CASES)}
    return None  # synthetic: manifest-defined


def write_manifest(root, dataset: str, num_classes: int, splits: dict) -> dict:
    """Checksum every data file under root and write manifest.json."""
    root = Path(root)
    files = {}
    for sub in ("train_npz", "test_vol_h5", "val_vol_h5"):
        d = root / sub
        if d.is_dir():
            for p in sorted(d.iterdir()):
                if p.suffix in (".npz", ".h5"):
                    files[f"{sub}/{p.name}"] = file_sha256(p)
    manifest = {
        "dataset": dataset,
        "num_classes": num_classes,
        "splits": {k: sorted(v) for k, v in splits.items()},
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {path}: {e}") from e


def _check_leak(splits: dict) -> None:
    train = set(splits.get("train", ()))
    for other in ("val", "test"):
        overlap = train & set(splits.get(other, ()))
        if overlap:
            raise DataError(f"split leak: cases {sorted(overlap)} appear in both train and {other}")
    overlap = set(splits.get("val", ())) & set(splits.get("test", ()))
    if overlap:
        raise DataError(f"split leak: cases {sorted(overlap)} appear in both val and test")


def _files_for_cases(root, sub: str, cases, suffix: str) -> list:
    d = Path(root) / sub
    if not d.is_dir():
        return []
    wanted = set(cases)
    out = []
    for p in sorted(d.iterdir()):
        if p.name.endswith(suffix) and case_of(p.name[: -len(suffix)]) in wanted:
            out.append(p)
    return out


def load_split(dataset: str, root, verify: bool = True) -> dict:
    """Load {train: [SliceSample], eval: [VolumeSample], val: [...]} per
    the manifest, enforcing the canonical case splits and checking for
    leaks on every call.
    """
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.get("dataset") != dataset:
        raise DataError(f"root {root} holds dataset {manifest.get('dataset')!r}, expected {dataset!r}")
    splits = manifest.get("splits", {})
    _check_leak(splits)

    canonical = expected_splits(dataset)
    if canonical is not None:
        for name in ("train", "val", "test"):
            got, want = sorted(splits.get(name, [])), sorted(canonical[name])
            if got != want:
                raise DataError(
                    f"{dataset} {name} split does not match the canonical case list "
                    f"({len(got)} vs {len(want)} cases)"
                )

    if verify:
        for rel, digest in manifest.get("files", {}).items():
            p = root / rel
            if not p.exists():
                raise DataError(f"missing data file: {p}")
            if file_sha256(p) != digest:
                raise DataError(f"checksum mismatch: {p}")

    train_files = _files_for_cases(root, "train_npz", splits.get("train", []), ".npz")
    missing = set(splits.get("train", [])) - {case_of(p.name[: -len(".npz")]) for p in train_files}
    if missing:
        raise DataError(f"missing train cases: {sorted(missing)}")
    test_files = _files_for_cases(root, "test_vol_h5", splits.get("test", []), ".npy.h5")
    missing = set(splits.get("test", [])) - {case_of(p.name[: -len(".npy.h5")]) for p in test_files}
    if missing:
        raise DataError(f"missing test cases: {sorted(missing)}")

    out = {
        "train": [load_slice_npz(p) for p in train_files],
        "eval": [load_volume_h5(p) for p in test_files],
    }
    if splits.get("val"):
        val_files = _files_for_cases(root, "val_vol_h5", splits["val"], ".npy.h5")
        missing = set(splits["val"]) - {case_of(p.name[: -len(".npy.h5")]) for p in val_files}
        if missing:
            raise DataError(f"missing val cases: {sorted(missing)}")
        out["val"] = [load_volume_h5(p) for p in val_files]
    return out


def train_slice_files(dataset: str, root) -> list:
    """Paths of the training slices (lazy counterpart of load_split)."""
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.get("dataset") != dataset:
        raise DataError(f"root {root} holds dataset {manifest.get('dataset')!r}, expected {dataset!r}")
    _check_leak(manifest.get("splits", {}))
    return _files_for_cases(root, "train_npz", manifest.get("splits", {}).get("train", []), ".npz")


def volume_files(dataset: str, root, split: str = "test") -> list:
    """Paths of the eval ('test') or validation ('val') volumes."""
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.get("dataset") != dataset:
        raise DataError(f"root {root} holds dataset {manifest.get('dataset')!r}, expected {dataset!r}")
    _check_leak(manifest.get("splits", {}))
    sub = "test_vol_h5" if split == "test" else "val_vol_h5"
    return _files_for_cases(root, sub, manifest.get("splits", {}).get(split, []), ".npy.h5")


# -- volume <-> slice plumbing -------------------------------------------------

def volume_to_model_slices(vol: VolumeSample, size: tuple) -> list:
    """Per-slice views resized to the model input size."""
    out = []
    for k in range(vol.image.shape[0]):
        out.append(SliceSample(
            resize_image(vol.image[k].astype(np.float32), size),
            resize_label(vol.label[k], size),
            vol.case_id, k,
        ))
    return out


def reassemble(preds: list, vol: VolumeSample) -> np.ndarray:
    """Stack per-slice predictions back to the volume's native grid."""
    if len(preds) != vol.image.shape[0]:
        raise DataError(f"{vol.case_id}: {len(preds)} predictions for {vol.image.shape[0]} slices")
    native = vol.image.shape[1:]
    return np.stack([resize_label(np.asarray(p), native) for p in preds], axis=0)


# -- synthetic data ------------------------------------------------------------

def _paint_ellipsoids(shape: tuple, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One ellipsoid per foreground class, each inside its own cell of a
    grid partition of the plane, so every class id is present and none
    overlap.
    """
    s, h, w = shape
    n_fg = num_classes - 1
    cols = int(np.ceil(np.sqrt(n_fg)))
    rows = int(np.ceil(n_fg / cols))
    label = np.zeros(shape, dtype=np.int64)
    zz, yy, xx = np.mgrid[0:s, 0:h, 0:w]
    for c in range(1, num_classes):
        cell = c - 1
        r, q = divmod(cell, cols)
        y0, y1 = r * h // rows, (r + 1) * h // rows
        x0, x1 = q * w // cols, (q + 1) * w // cols
        cy = rng.uniform(y0 + (y1 - y0) * 0.35, y0 + (y1 - y0) * 0.65)
        cx = rng.uniform(x0 + (x1 - x0) * 0.35, x0 + (x1 - x0) * 0.65)
        cz = rng.uniform(s * 0.35, s * 0.65)
        ry = rng.uniform(0.18, 0.3) * (y1 - y0)
        rx = rng.uniform(0.18, 0.3) * (x1 - x0)
        rz = rng.uniform(0.45, 0.75) * s
        ry, rx, rz = max(ry, 1.0), max(rx, 1.0), max(rz, 1.0)
        inside = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        label[inside] = c
    return label


def synth_volume(shape: tuple, num_classes: int, rng: np.random.Generator, case_id: str) -> VolumeSample:
    label = _paint_ellipsoids(shape, num_classes, rng)
    # distinct mean intensity per class plus mild noise: trivially learnable
    intensities = np.linspace(0.1, 0.9, num_classes)
    image = intensities[label] + rng.normal(0.0, 0.02, size=shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return VolumeSample(image, label, case_id, spacing=(1.0, 1.0, 1.0))


def synth_dataset(num_cases: int, shape: tuple, num_classes: int, seed: int) -> dict:
    """Deterministic synthetic cases; first half feeds train (as slices),
    second half eval (as volumes), mirroring load_split's structure.
    """
    if num_cases < 2:
        raise DataError(f"need at least 2 synthetic cases (train + eval), got {num_cases}")
    vols = [
        synth_volume(shape, num_classes, np.random.default_rng([seed, i]), f"synth{i:04d}")
        for i in range(num_cases)
    ]
    n_train = (num_cases + 1) // 2
    train = [
        SliceSample(v.image[k], v.label[k], v.case_id, k)
        for v in vols[:n_train]
        for k in range(v.image.shape[0])
    ]
    return {"train": train, "eval": vols[n_train:]}


def write_dataset(root, dataset: str, num_classes: int, train_slices, eval_volumes, val_volumes=None) -> dict:
    """Materialize samples into the documented layout and manifest."""
    root = Path(root)
    (root / "train_npz").mkdir(parents=True, exist_ok=True)
    (root / "test_vol_h5").mkdir(parents=True, exist_ok=True)
    for s in train_slices:
        save_slice_npz(root / "train_npz" / f"{s.case_id}_slice{s.slice_index:03d}.npz", s)
    for v in eval_volumes:
        save_volume_h5(root / "test_vol_h5" / f"{v.case_id}.npy.h5", v)
    splits = {
        "train": sorted({s.case_id for s in train_slices}),
        "val": [],
        "test": sorted({v.case_id for v in eval_volumes}),
    }
    if val_volumes:
        (root / "val_vol_h5").mkdir(parents=True, exist_ok=True)
        for v in val_volumes:
            save_volume_h5(root / "val_vol_h5" / f"{v.case_id}.npy.h5", v)
        splits["val"] = sorted({v.case_id for v in val_volumes})
    return write_manifest(root, dataset, num_classes, splits)


def prepare_data(dataset: str, root, num_cases: int = 4, shape: tuple = (8, 64, 64),
                 num_classes: int | None = None, seed: int = 0) -> dict:
    """`prepare-data` entry point.

    synthetic: generate volumes under root. synapse/acdc: index an
    existing tree in the documented layout (community preprocessed files),
    verify the canonical cases are all present, and write the manifest.
    """
    root = Path(root)
    if dataset == "synthetic":
        num_classes = num_classes or 4
        ds = synth_dataset(num_cases, shape, num_classes, seed)
        return write_dataset(root, "synthetic", num_classes, ds["train"], ds["eval"])

    if dataset not in DATASET_NUM_CLASSES:
        raise DataError(f"unknown dataset {dataset!r}")
    num_classes = num_classes or DATASET_NUM_CLASSES[dataset]
    canonical = expected_splits(dataset)
    present = {case_of(p.name[: -len(".npz")]) for p in (root / "train_npz").glob("*.npz")} if (root / "train_npz").is_dir() else set()
    missing = set(canonical["train"]) - present
    if missing:
        raise DataError(f"{dataset} train cases missing under {root / 'train_npz'}: {sorted(missing)}")
    present = {case_of(p.name[: -len(".npy.h5")]) for p in (root / "test_vol_h5").glob("*.npy.h5")} if (root / "test_vol_h5").is_dir() else set()
    missing = set(canonical["test"]) - present
    if missing:
        raise DataError(f"{dataset} test cases missing under {root / 'test_vol_h5'}: {sorted(missing)}")
    if canonical["val"]:
        present = {case_of(p.name[: -len(".npy.h5")]) for p in (root / "val_vol_h5").glob("*.npy.h5")} if (root / "val_vol_h5").is_dir() else set()
        missing = set(canonical["val"]) - present
        if missing:
            raise DataError(f"{dataset} val cases missing under {root / 'val_vol_h5'}: {sorted(missing)}")
    return write_manifest(root, dataset, num_classes, canonical)
