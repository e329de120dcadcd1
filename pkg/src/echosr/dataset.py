"""Quality-annotated echo frames: ingestion, phantoms, stratification, splits."""

import csv
import json
import logging
import math
import os
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import ValidationError

logger = logging.getLogger(__name__)

MIN_FRAME_SIZE = 32


class View(str, Enum):
    CH2 = "2CH"
    CH4 = "4CH"


class Phase(str, Enum):
    ED = "ED"
    ES = "ES"


class Quality(str, Enum):
    GOOD = "Good"
    MEDIUM = "Medium"
    POOR = "Poor"


class Provenance(str, Enum):
    CAMUS = "CAMUS"
    MANIFEST = "MANIFEST"
    SYNTHETIC = "SYNTHETIC"


class Task(str, Enum):
    VIEW = "view"
    PHASE = "phase"


QUALITIES = (Quality.GOOD, Quality.MEDIUM, Quality.POOR)
CELLS = tuple((v, p) for v in View for p in Phase)


def _parse_enum(enum_cls, token):
    if isinstance(token, enum_cls):
        return token
    text = str(token).strip().lower()
    for member in enum_cls:
        if text in (member.value.lower(), member.name.lower()):
            return member
    raise ValidationError(f"unknown {enum_cls.__name__.lower()} {token!r}")


def parse_view(token):
    return _parse_enum(View, token)


def parse_phase(token):
    return _parse_enum(Phase, token)


def parse_quality(token):
    return _parse_enum(Quality, token)


def parse_task(token):
    return _parse_enum(Task, token)


def task_classes(task):
    """The two labels of a task in class-index order."""
    return (View.CH2, View.CH4) if Task(task) is Task.VIEW else (Phase.ED, Phase.ES)


def task_label(frame, task):
    """Integer class index (0 or 1) of ``frame`` for ``task``."""
    value = frame.view if Task(task) is Task.VIEW else frame.phase
    return task_classes(task).index(value)


@dataclass(frozen=True, eq=False)
class EchoFrame:
    patient_id: str
    view: View
    phase: Phase
    quality: Quality
    image: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        for name, cls in (("view", View), ("phase", Phase), ("quality", Quality)):
            value = getattr(self, name)
            if value is None:
                raise ValidationError(f"frame {self.patient_id!r} is missing {name}")
            object.__setattr__(self, name, _parse_enum(cls, value))
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ValidationError(f"frame {self.key} image must be 2D, got {img.shape}")
        if img.shape[0] < MIN_FRAME_SIZE or img.shape[1] < MIN_FRAME_SIZE:
            raise ValidationError(f"frame {self.key} image {img.shape} is below {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError(f"frame {self.key} intensities must be finite and within [0, 1]")
        if img is self.image:
            img = img.copy()
        img.setflags(write=False)
        object.__setattr__(self, "image", img)

    @property
    def key(self):
        return (self.patient_id, self.view.value, self.phase.value)

    def with_image(self, image, source_path=None):
        return EchoFrame(
            self.patient_id, self.view, self.phase, self.quality, image,
            self.source_path if source_path is None else source_path,
        )


@dataclass(frozen=True)
class EchoDataset:
    """Immutable ordered collection of frames.

    Empty datasets are permitted so that quality subsets can be empty;
    the loaders refuse to return one.
    """

    frames: tuple = ()
    provenance: Provenance = Provenance.SYNTHETIC

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        dupes = [k for k, n in Counter(f.key for f in self.frames).items() if n > 1]
        if dupes:
            raise ValidationError(f"duplicate (patient, view, phase) entries: {dupes[:5]}")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, idx):
        return self.frames[idx]

    def filter(self, quality=None, view=None, phase=None):
        keep = [
            f for f in self.frames
            if (quality is None or f.quality is Quality(quality))
            and (view is None or f.view is View(view))
            and (phase is None or f.phase is Phase(phase))
        ]
        return EchoDataset(keep, self.provenance)

    def replace_frames(self, frames):
        """Dataset with frames swapped in by key; unmatched frames are kept."""
        by_key = {f.key: f for f in frames}
        return EchoDataset([by_key.get(f.key, f) for f in self.frames], self.provenance)

    def cell_counts(self):
        """Counts keyed by (view, phase, quality)."""
        return Counter((f.view, f.phase, f.quality) for f in self.frames)

    def distribution_table(self):
        counts = self.cell_counts()
        header = f"{'View':<6}{'Phase':<7}" + "".join(f"{q.value:>8}" for q in QUALITIES) + f"{'Total':>8}"
        lines = [header]
        for view, phase in CELLS:
            row = [counts[(view, phase, q)] for q in QUALITIES]
            lines.append(f"{view.value:<6}{phase.value:<7}" + "".join(f"{n:>8}" for n in row) + f"{sum(row):>8}")
        totals = [sum(counts[(v, p, q)] for v, p in CELLS) for q in QUALITIES]
        lines.append(f"{'Total':<13}" + "".join(f"{n:>8}" for n in totals) + f"{sum(totals):>8}")
        return "\n".join(lines)


def _require_frames(frames, provenance, skipped=0):
    if not frames:
        raise ValidationError("no frames ingested")
    if skipped:
        logger.warning("ingested %d frames; skipped %d patients", len(frames), skipped)
    else:
        logger.info("ingested %d frames", len(frames))
    return EchoDataset(frames, provenance)


# --------------------------------------------------------------------------
# image readers

_MET_TYPES = {
    "MET_UCHAR": np.uint8, "MET_CHAR": np.int8,
    "MET_USHORT": np.uint16, "MET_SHORT": np.int16,
    "MET_UINT": np.uint32, "MET_INT": np.int32,
    "MET_FLOAT": np.float32, "MET_DOUBLE": np.float64,
}


def read_metaimage(path):
    """Read a 2D MetaImage (.mhd header + raw/zraw payload, or inline .mha)."""
    import zlib

    path = Path(path)
    header = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                break
            key, _, value = line.decode("latin-1").partition("=")
            key, value = key.strip(), value.strip()
            header[key] = value
            if key == "ElementDataFile":
                break
        inline = fh.read()
    dims = [int(d) for d in header["DimSize"].split()]
    dtype = np.dtype(_MET_TYPES[header["ElementType"]])
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    data_file = header["ElementDataFile"]
    payload = inline if data_file == "LOCAL" else (path.parent / data_file).read_bytes()
    if header.get("CompressedData", "False").lower() == "true":
        payload = zlib.decompress(payload)
    arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)))
    arr = arr.reshape(dims[::-1]).squeeze()
    if arr.ndim != 2:
        raise ValidationError(f"{path} is not a 2D image (shape {arr.shape})")
    return arr


def _read_nifti(path):
    try:
        import nibabel
    except ImportError as exc:
        raise ValidationError(f"reading {path} needs nibabel") from exc
    arr = np.asarray(nibabel.load(str(path)).dataobj).squeeze()
    return arr.T if arr.ndim == 2 else arr


def to_unit_range(arr):
    """Rescale raw intensities to [0, 1] by bit depth (8-bit /255, 16-bit /65535)."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.uint32) and arr.max(initial=0) <= 65535 and arr.min(initial=0) >= 0:
        # PIL reports 16-bit PNGs as 32-bit 'I' mode
        return arr.astype(np.float64) / 65535.0
    out = arr.astype(np.float64)
    if out.min() >= 0.0 and out.max() <= 1.0:
        return out
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def read_image(path):
    """Read a grayscale raster (PNG/TIFF/...), MetaImage, NIfTI or .npy file into [0, 1]."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".mhd", ".mha")):
        return to_unit_range(read_metaimage(path))
    if name.endswith((".nii", ".nii.gz")):
        return to_unit_range(_read_nifti(path))
    if name.endswith(".npy"):
        return to_unit_range(np.load(path))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        arr = np.array(im)
        if im.mode.startswith("I;16"):
            return arr.astype(np.float64) / 65535.0
    return to_unit_range(arr)


# --------------------------------------------------------------------------
# CAMUS

CAMUS_PATTERNS = {
    "patient_dir": r"patient\d+",
    "image": ["{patient}_{view}_{phase}.mhd", "{patient}_{view}_{phase}.nii.gz"],
    "info": "Info_{view}.cfg",
}


def read_info_file(path):
    info = {}
    for line in Path(path).read_text(encoding="latin-1").splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            key, sep, value = line.partition("=")
        if sep:
            info[key.strip()] = value.strip()
    return info


def _camus_patient(pdir, patterns):
    patient = pdir.name
    frames = []
    for view in View:
        info_path = pdir / patterns["info"].format(patient=patient, view=view.value)
        info = read_info_file(info_path)
        quality = parse_quality(info["ImageQuality"])
        for phase in Phase:
            candidates = patterns["image"]
            if isinstance(candidates, str):
                candidates = [candidates]
            for pattern in candidates:
                img_path = pdir / pattern.format(patient=patient, view=view.value, phase=phase.value)
                if img_path.exists():
                    break
            else:
                raise FileNotFoundError(f"no {view.value} {phase.value} image for {patient}")
            frames.append(EchoFrame(patient, view, phase, quality, read_image(img_path), str(img_path)))
    return frames


def load_camus(root_path, patterns=None, n_jobs=4):
    """Ingest the annotated ED/ES frames of a CAMUS-layout directory tree.

    Patients whose info files are missing or unparseable are skipped with
    a warning; the skip count is logged once ingestion finishes.
    """
    patterns = {**CAMUS_PATTERNS, **(patterns or {})}
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"CAMUS root {root} is not a directory")
    pat = re.compile(patterns["patient_dir"])
    patient_dirs = sorted(p for p in root.rglob("*") if p.is_dir() and pat.fullmatch(p.name))

    def load_one(pdir):
        try:
            return _camus_patient(pdir, patterns)
        except (OSError, KeyError, ValidationError, ValueError) as exc:
            logger.warning("skipping %s: %s", pdir.name, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, n_jobs)) as pool:
        results = list(pool.map(load_one, patient_dirs))
    frames = [f for r in results if r for f in r]
    skipped = sum(1 for r in results if r is None)
    return _require_frames(frames, Provenance.CAMUS, skipped)


# --------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = ("patient_id", "view", "phase", "quality", "image_path")


def _manifest_rows(path):
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())
        if isinstance(rows, dict):
            rows = rows["frames"]
        return rows
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"manifest {path} lacks columns {sorted(missing)}")
        return list(reader)


def load_manifest(manifest_path):
    """Load frames listed in a CSV (or JSON list) manifest.

    Relative ``image_path`` entries resolve against the manifest's folder.
    """
    path = Path(manifest_path)
    rows = _manifest_rows(path)
    frames = []
    for lineno, row in enumerate(rows, start=2):
        try:
            view = parse_view(row["view"])
            phase = parse_phase(row["phase"])
            quality = parse_quality(row["quality"])
        except (ValidationError, KeyError) as exc:
            raise ValidationError(f"manifest row {lineno} ({row}): {exc}") from None
        img_path = Path(row["image_path"])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        try:
            image = read_image(img_path)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"manifest row {lineno}: cannot read image {img_path}: {exc}") from exc
        frames.append(EchoFrame(str(row["patient_id"]), view, phase, quality, image, str(img_path)))
    return _require_frames(frames, Provenance.MANIFEST)


# --------------------------------------------------------------------------
# synthetic phantoms

# tier -> (structural blur sigma, speckle std), blur in units of a 64px frame
QUALITY_DEGRADATION = {
    Quality.GOOD: (0.4, 0.03),
    Quality.MEDIUM: (0.8, 0.08),
    Quality.POOR: (1.2, 0.15),
}
ED_VENTRICLE_SCALE = 1.2  # per axis; ED/ES ventricle area ratio = 1.44


@dataclass(frozen=True)
class Chamber:
    cy: float
    cx: float
    ry: float
    rx: float
    ventricle: bool

    @property
    def area(self):
        return math.pi * self.ry * self.rx


def phantom_chambers(view, phase, jitter):
    """Chamber ellipses in unit coordinates (row fraction, column fraction)."""
    view, phase = View(view), Phase(phase)
    dy, dx, size = jitter
    if view is View.CH2:
        layout = [(0.42, 0.50, 0.17, 0.085, True), (0.74, 0.50, 0.09, 0.08, False)]
    else:
        layout = [
            (0.42, 0.585, 0.16, 0.065, True), (0.43, 0.405, 0.135, 0.055, True),
            (0.74, 0.585, 0.08, 0.065, False), (0.74, 0.405, 0.08, 0.06, False),
        ]
    ventricle_scale = ED_VENTRICLE_SCALE if phase is Phase.ED else 1.0
    atrium_scale = 1.0 if phase is Phase.ED else 1.1
    chambers = []
    for cy, cx, ry, rx, vent in layout:
        s = size * (ventricle_scale if vent else atrium_scale)
        chambers.append(Chamber(cy + dy, cx + dx, ry * s, rx * s, vent))
    return chambers


def _sector_mask(n):
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    apex_r, apex_c = 0.03 * n, 0.5 * n
    dist = np.hypot(rows - apex_r, cols - apex_c)
    angle = np.degrees(np.arctan2(cols - apex_c, rows - apex_r))
    return (dist <= 0.95 * n) & (np.abs(angle) <= 38.0) & (rows >= apex_r)


def _phantom(n, view, phase, quality, rng_patient, rng_frame):
    jitter = (
        rng_patient.uniform(-0.03, 0.03),
        rng_patient.uniform(-0.03, 0.03),
        rng_patient.uniform(0.9, 1.1),
    )
    tissue = rng_patient.uniform(0.5, 0.58)
    blood = rng_patient.uniform(0.1, 0.16)
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64) / n
    sector = _sector_mask(n)

    img = np.where(sector, tissue, 0.0)
    # slow depth attenuation across the fan
    img = img * (1.0 - 0.25 * rows)
    for ch in phantom_chambers(view, phase, jitter):
        inside = ((rows - ch.cy) / ch.ry) ** 2 + ((cols - ch.cx) / ch.rx) ** 2 <= 1.0
        img = np.where(inside & sector, blood, img)

    blur, speckle_std = QUALITY_DEGRADATION[quality]
    scale = n / 64.0
    img = ndimage.gaussian_filter(img, blur * scale, mode="nearest")
    grain = ndimage.gaussian_filter(rng_frame.standard_normal((n, n)), 0.7 * scale, mode="wrap")
    grain /= grain.std()
    img = img + speckle_std * grain * sector
    return np.clip(img, 0.0, 1.0)


def synthesize_dataset(n_patients, image_size=64, seed=0):
    """Deterministic phantom dataset: 4 frames per patient, tiers assigned round-robin."""
    if n_patients < 1:
        raise ValidationError("n_patients must be >= 1")
    if image_size < 64:
        raise ValidationError("image_size must be >= 64")
    frames = []
    for i in range(n_patients):
        quality = QUALITIES[i % 3]
        pid = f"synth{i:04d}"
        for view in View:
            for phase in Phase:
                # same anatomy for both phases of a view, fresh noise per frame
                rng_patient = np.random.default_rng([seed, i, list(View).index(view)])
                rng_frame = np.random.default_rng([seed, i, list(View).index(view), list(Phase).index(phase), 1])
                img = _phantom(image_size, view, phase, quality, rng_patient, rng_frame)
                frames.append(EchoFrame(pid, view, phase, quality, img, f"synthetic://{pid}/{view.value}_{phase.value}"))
    return EchoDataset(frames, Provenance.SYNTHETIC)


# --------------------------------------------------------------------------
# stratification and splits


def stratify_by_quality(ds):
    if len(ds) == 0:
        raise ValidationError("cannot stratify an empty dataset")
    return {q: ds.filter(quality=q) for q in QUALITIES}


@dataclass(frozen=True)
class TrainTestSplit:
    task: Task
    train: tuple
    test: tuple
    seed: int
    quality: Quality = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        overlap = {f.key for f in self.train} & {f.key for f in self.test}
        if overlap:
            raise ValidationError(f"train and test share frames: {sorted(overlap)[:5]}")

    def labels(self, part="train"):
        return [task_label(f, self.task) for f in getattr(self, part)]


def _sorted(frames):
    return sorted(frames, key=lambda f: f.key)


def capped_pool(ds, quality, seed, cap_reference=Quality.POOR):
    """Per-(view, phase) sample of ``quality`` frames, capped at the reference tier's cell counts.

    With ``cap_reference=None`` every frame of the tier is returned.
    """
    quality = Quality(quality)
    counts = ds.cell_counts()
    rng = np.random.default_rng(seed)
    pool = []
    for view, phase in CELLS:
        cell = _sorted(f for f in ds if f.quality is quality and f.view is view and f.phase is phase)
        order = rng.permutation(len(cell))
        cap = len(cell) if cap_reference is None else counts[(view, phase, Quality(cap_reference))]
        pool.extend(cell[i] for i in order[:cap])
    return pool


def build_classification_split(ds, task, quality, seed, cap_reference=Quality.POOR,
                               train_fraction=0.8, by_patient=False):
    """Balanced, capped train/test split for one quality tier.

    Within each class the train side receives ``floor(train_fraction * n)``
    frames. ``by_patient=True`` instead assigns whole patients to one side
    (floor of the patient count per class), which prevents a patient's ED and
    ES frames from straddling the split.
    """
    task = Task(task)
    pool = capped_pool(ds, quality, seed, cap_reference)
    classes = task_classes(task)
    by_class = {c: [f for f in pool if task_label(f, task) == i] for i, c in enumerate(classes)}
    for c, frames in by_class.items():
        if not frames:
            raise ValidationError(f"class {c.value} has no {Quality(quality).value} frames for the {task.value} task")

    rng = np.random.default_rng([seed, 1])
    train, test = [], []
    for c in classes:
        frames = _sorted(by_class[c])
        if by_patient:
            patients = sorted({f.patient_id for f in frames})
            perm = rng.permutation(len(patients))
            keep = {patients[i] for i in perm[: math.floor(train_fraction * len(patients))]}
            train.extend(f for f in frames if f.patient_id in keep)
            test.extend(f for f in frames if f.patient_id not in keep)
        else:
            perm = rng.permutation(len(frames))
            n_train = math.floor(train_fraction * len(frames))
            train.extend(frames[i] for i in perm[:n_train])
            test.extend(frames[i] for i in perm[n_train:])
    if by_patient:
        # a patient can sit in both classes for the phase task; keep sides disjoint by patient
        train_patients = {f.patient_id for f in train}
        test = [f for f in test if f.patient_id not in train_patients]
    return TrainTestSplit(
        task, train, test, seed, Quality(quality),
        {"cap_reference": None if cap_reference is None else Quality(cap_reference).value,
         "by_patient": by_patient},
    )


# --------------------------------------------------------------------------
# bundles


def save_bundle(ds, path):
    """Write a dataset to a single compressed ``.npz`` (JSON metadata + one array per frame)."""
    meta = {
        "version": 1,
        "provenance": ds.provenance.value,
        "frames": [
            {"patient_id": f.patient_id, "view": f.view.value, "phase": f.phase.value,
             "quality": f.quality.value, "source_path": f.source_path}
            for f in ds
        ],
    }
    arrays = {f"img_{i:06d}": f.image for i, f in enumerate(ds)}
    np.savez_compressed(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_bundle(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        frames = [
            EchoFrame(m["patient_id"], m["view"], m["phase"], m["quality"], data[f"img_{i:06d}"], m["source_path"])
            for i, m in enumerate(meta["frames"])
        ]
    return EchoDataset(frames, meta["provenance"])


def dataset_checksum(ds):
    import hashlib

    h = hashlib.sha256()
    for f in ds:
        h.update("|".join(f.key + (f.quality.value,)).encode())
        h.update(np.ascontiguousarray(f.image).tobytes())
    return h.hexdigest()


def cache_dir():
    return Path(os.environ.get("ECHOSR_CACHE", Path.home() / ".cache" / "echosr"))
