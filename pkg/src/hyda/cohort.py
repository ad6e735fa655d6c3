"""Multi-modal subject cohorts: data model, synthetic generator, scaling, folds, file format."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import MinMaxScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, FormatError, LabelError, ShapeError

FORMAT_VERSION = "HYC1"
IMAGING, TABULAR = "imaging", "tabular"

# minimum gap between the winning and runner-up latent components
_LABEL_MARGIN = 0.3


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    dim: int  # embedding length for imaging, raw feature count for tabular
    map_shape: tuple = ()  # (C_hid, D, H, W) for imaging

    def __post_init__(self):
        if self.kind not in (IMAGING, TABULAR):
            raise ConfigError(f"modality {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == IMAGING:
            if len(self.map_shape) != 4:
                raise ConfigError(f"modality {self.name!r}: map shape must be (C, D, H, W)")
            voxels = int(np.prod(self.map_shape[1:]))
            if self.dim % voxels:
                raise ConfigError(
                    f"modality {self.name!r}: embedding length {self.dim} not divisible by D*H*W={voxels}")

    @property
    def map_size(self):
        return int(np.prod(self.map_shape)) if self.kind == IMAGING else 0

    def to_json(self):
        return {"name": self.name, "kind": self.kind, "dim": self.dim,
                "map_shape": list(self.map_shape), "dtype": "f32le"}

    @classmethod
    def from_json(cls, d):
        return cls(d["name"], d["kind"], int(d["dim"]), tuple(int(s) for s in d.get("map_shape", ())))


@dataclass
class SubjectRecord:
    subject_id: str
    embeddings: dict  # imaging modality -> [E_m]
    feature_maps: dict  # imaging modality -> [C_hid, D, H, W]
    tabular: np.ndarray | None
    label: int


@dataclass
class CohortDataset:
    subjects: list
    modalities: tuple
    num_classes: int
    scaler: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        imaging = {m.name for m in self.modalities if m.kind == IMAGING}
        tab = [m for m in self.modalities if m.kind == TABULAR]
        if len(tab) > 1:
            raise ConfigError("at most one tabular modality is supported")
        for s in self.subjects:
            if set(s.embeddings) != imaging or set(s.feature_maps) != imaging:
                raise ShapeError(f"subject {s.subject_id}: imaging modalities do not match descriptors")
            if not 0 <= s.label < self.num_classes:
                raise LabelError(f"subject {s.subject_id}: label {s.label} outside [0, {self.num_classes})")
            if (s.tabular is None) != (not tab):
                raise ShapeError(f"subject {s.subject_id}: tabular features inconsistent with descriptors")

    @property
    def N(self):
        return len(self.subjects)

    @property
    def M(self):
        return len(self.modalities)

    @property
    def ids(self):
        return [s.subject_id for s in self.subjects]

    @property
    def labels(self):
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    @property
    def imaging(self):
        return [m for m in self.modalities if m.kind == IMAGING]

    @property
    def tabular_spec(self):
        tab = [m for m in self.modalities if m.kind == TABULAR]
        return tab[0] if tab else None

    def index_of(self, ids):
        pos = {sid: i for i, sid in enumerate(self.ids)}
        try:
            return np.array([pos[i] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise ConfigError(f"unknown subject id {e.args[0]!r}") from None

    def subset(self, ids):
        idx = self.index_of(ids)
        return CohortDataset([self.subjects[i] for i in idx], self.modalities, self.num_classes, self.scaler)

    def select_modalities(self, names):
        names = list(names)
        known = {m.name for m in self.modalities}
        missing = [n for n in names if n not in known]
        if missing or not names:
            raise ConfigError(f"unknown or empty modality subset {names} (have {sorted(known)})")
        mods = tuple(m for m in self.modalities if m.name in names)
        keep = {m.name for m in mods if m.kind == IMAGING}
        has_tab = any(m.kind == TABULAR for m in mods)
        subjects = [SubjectRecord(s.subject_id,
                                  {k: v for k, v in s.embeddings.items() if k in keep},
                                  {k: v for k, v in s.feature_maps.items() if k in keep},
                                  s.tabular if has_tab else None, s.label)
                    for s in self.subjects]
        return CohortDataset(subjects, mods, self.num_classes, self.scaler)

    def to_matrix(self):
        """Pack subjects into one row each; column layout follows ``self.modalities``."""
        return pack(self), self.labels


def layout_width(layout) -> int:
    return int(sum(m.dim + m.map_size for m in layout))


def pack(dataset: CohortDataset) -> np.ndarray:
    rows = []
    for s in dataset.subjects:
        parts = []
        for m in dataset.modalities:
            if m.kind == IMAGING:
                parts += [s.embeddings[m.name], s.feature_maps[m.name].reshape(-1)]
            else:
                parts.append(s.tabular)
        rows.append(np.concatenate(parts))
    return np.asarray(rows, dtype=np.float64).reshape(dataset.N, layout_width(dataset.modalities))


def unpack(X, layout) -> dict:
    """Split a packed matrix into per-modality blocks.

    Returns ``{name: (embedding [N, E], map [N, C, D, H, W] or None)}``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layout_width(layout):
        raise ShapeError(f"packed matrix shape {X.shape} does not match layout width {layout_width(layout)}")
    out, col = {}, 0
    for m in layout:
        emb = X[:, col:col + m.dim]
        col += m.dim
        fmap = None
        if m.kind == IMAGING:
            fmap = X[:, col:col + m.map_size].reshape((X.shape[0],) + tuple(m.map_shape))
            col += m.map_size
        out[m.name] = (emb, fmap)
    return out


def scaled_columns(layout) -> np.ndarray:
    """Boolean mask of the packed columns that min-max scaling applies to."""
    mask, col = np.zeros(layout_width(layout), dtype=bool), 0
    for m in layout:
        mask[col:col + m.dim] = True
        col += m.dim + m.map_size
    return mask


def from_matrix(X, y, layout, num_classes, ids=None) -> CohortDataset:
    blocks = unpack(X, layout)
    n = np.asarray(X).shape[0]
    ids = ids if ids is not None else [f"s{i:03d}" for i in range(n)]
    subjects = []
    for i in range(n):
        emb = {m.name: blocks[m.name][0][i] for m in layout if m.kind == IMAGING}
        maps = {m.name: blocks[m.name][1][i] for m in layout if m.kind == IMAGING}
        tab = next((blocks[m.name][0][i] for m in layout if m.kind == TABULAR), None)
        subjects.append(SubjectRecord(ids[i], emb, maps, tab, int(y[i])))
    return CohortDataset(subjects, layout, num_classes)


# --- synthetic cohorts -----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    N: int = 200
    M_imaging: int = 2
    has_tabular: bool = True
    E_m: int = 128
    map_dims: tuple = (16, 4, 4, 4)
    K: int = 2
    imbalance_ratio: float = 3.0
    complementarity: float = 0.5
    noise_sigma: float = 0.1
    tab_dim: int = 6


def imaging_names(m):
    base = ["mri", "pet"]
    return [base[i] if i < len(base) else f"img{i}" for i in range(m)]


def class_sizes(N, K, ratio):
    if K < 2 or N < 2 * K:
        raise ConfigError(f"need K >= 2 and N >= 2K, got N={N}, K={K}")
    if ratio < 1:
        raise ConfigError(f"imbalance ratio must be >= 1, got {ratio}")
    w = ratio ** (-np.arange(K) / (K - 1))
    raw = N * w / w.sum()
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: N - sizes.sum()]:
        sizes[i] += 1
    if sizes.min() < 1:
        raise ConfigError(f"imbalance ratio {ratio} leaves an empty class at N={N}, K={K}")
    return sizes


def _draw_latents(rng, sizes, parts, K):
    """Per-part latent vectors whose normalized sum has argmax == label, filled to quota."""
    want = sizes.copy()
    chosen = {k: [] for k in range(K)}
    while want.sum() > 0:
        u = rng.standard_normal((4096, parts, K))
        z = u.sum(axis=1) / np.sqrt(parts)
        srt = np.sort(z, axis=1)
        ok = (srt[:, -1] - srt[:, -2]) >= _LABEL_MARGIN
        lab = z.argmax(axis=1)
        for i in np.flatnonzero(ok):
            k = lab[i]
            if want[k] > 0:
                chosen[k].append(u[i])
                want[k] -= 1
    labels = np.concatenate([np.full(s, k) for k, s in enumerate(sizes)])
    u = np.concatenate([np.array(chosen[k]).reshape(-1, parts, K) for k in range(K)])
    order = rng.permutation(len(labels))
    return u[order], labels[order]


def _blob_maps(rng, views, map_dims, noise):
    C, D, H, W = map_dims
    n, K = views.shape
    grid = np.stack(np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij"), -1).astype(float)
    centers = rng.uniform(0, [D - 1, H - 1, W - 1], size=(C, 3))
    amp_dir = rng.standard_normal((C, K)) / np.sqrt(K)
    width_dir = rng.standard_normal((C, K)) / np.sqrt(K)
    amp = 1.0 + views @ amp_dir.T  # [n, C]
    width = 0.5 + 0.5 * max(D, H, W) / 2 * np.exp(0.3 * np.tanh(views @ width_dir.T))
    d2 = ((grid[None] - centers[:, None, None, None]) ** 2).sum(-1)  # [C, D, H, W]
    maps = amp[:, :, None, None, None] * np.exp(-d2[None] / (2 * width[:, :, None, None, None] ** 2))
    return maps + noise * rng.standard_normal(maps.shape)


def synth_cohort(spec: SynthSpec, seed: int) -> CohortDataset:
    """Deterministic synthetic cohort standing in for frozen-encoder outputs.

    Labels come from the argmax of a latent disease vector that is the sum of
    per-modality parts. ``complementarity`` blends each modality's view from the
    full latent (0) to only its own part (1).
    """
    c = float(spec.complementarity)
    if not 0.0 <= c <= 1.0:
        raise ConfigError(f"complementarity must be in [0, 1], got {c}")
    if spec.M_imaging < 0 or (spec.M_imaging == 0 and not spec.has_tabular):
        raise ConfigError("need at least one modality")
    sizes = class_sizes(spec.N, spec.K, spec.imbalance_ratio)
    map_dims = tuple(int(d) for d in spec.map_dims)
    names = imaging_names(spec.M_imaging)
    modalities = [ModalitySpec(n, IMAGING, spec.E_m, map_dims) for n in names]
    if spec.has_tabular:
        modalities.append(ModalitySpec("clinical", TABULAR, spec.tab_dim))

    rng = np.random.default_rng(seed)
    parts = len(modalities)
    u, labels = _draw_latents(rng, sizes, parts, spec.K)
    z = u.sum(axis=1) / np.sqrt(parts)
    views = (1 - c) * z[:, None, :] + c * u  # [N, parts, K]
    sigma = float(spec.noise_sigma)

    emb, maps = {}, {}
    for p, name in enumerate(names):
        A = rng.standard_normal((spec.E_m, spec.K))
        offset = rng.uniform(-1, 1, spec.E_m)
        emb[name] = views[:, p] @ A.T + offset + sigma * rng.standard_normal((spec.N, spec.E_m))
        maps[name] = _blob_maps(rng, views[:, p], map_dims, sigma)
    tab = None
    if spec.has_tabular:
        G = rng.standard_normal((spec.tab_dim, spec.K))
        shift = rng.uniform(-0.5, 0.5, spec.tab_dim)
        tab = np.tanh(views[:, -1] @ G.T + shift) + sigma * rng.standard_normal((spec.N, spec.tab_dim))

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    subjects = [SubjectRecord(f"s{i:03d}",
                              {n: f32(emb[n][i]) for n in names},
                              {n: f32(maps[n][i]) for n in names},
                              None if tab is None else f32(tab[i]),
                              int(labels[i]))
                for i in range(spec.N)]
    return CohortDataset(subjects, modalities, spec.K)


# --- normalization ------------------------------------------------------------------

class CohortScaler(TransformerMixin, BaseEstimator):
    """Min-max scaling of embedding and tabular columns of a packed cohort matrix.

    Feature-map columns pass through. Values outside the fitted range are
    clipped into [0, 1]; constant features map to 0.
    """

    def __init__(self, layout=None):
        self.layout = layout

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.columns_ = scaled_columns(self.layout) if self.layout is not None else np.ones(X.shape[1], bool)
        if self.columns_.size != X.shape[1]:
            raise ShapeError(f"matrix width {X.shape[1]} does not match layout width {self.columns_.size}")
        self.scaler_ = MinMaxScaler(clip=True).fit(X[:, self.columns_])
        return self

    def transform(self, X):
        check_is_fitted(self, "scaler_")
        X = check_array(X, dtype=np.float64, copy=True)
        if X.shape[1] != self.columns_.size:
            raise ShapeError(f"matrix width {X.shape[1]} does not match fitted width {self.columns_.size}")
        X[:, self.columns_] = self.scaler_.transform(X[:, self.columns_])
        return X

    def to_dict(self):
        check_is_fitted(self, "scaler_")
        return {"data_min": self.scaler_.data_min_.tolist(), "data_max": self.scaler_.data_max_.tolist()}

    @classmethod
    def from_arrays(cls, layout, data_min, data_max):
        obj = cls(layout)
        obj.columns_ = scaled_columns(layout)
        lo, hi = np.asarray(data_min, float), np.asarray(data_max, float)
        obj.scaler_ = MinMaxScaler(clip=True).fit(np.stack([lo, hi]))
        return obj


def normalize(dataset: CohortDataset, train_ids=None):
    """Min-max scale embeddings/tabular features using statistics of ``train_ids`` only.

    Returns the scaled dataset (with the fitted scaler attached) and the scaler.
    """
    X, y = dataset.to_matrix()
    fit_rows = dataset.index_of(train_ids) if train_ids is not None else slice(None)
    scaler = CohortScaler(dataset.modalities).fit(X[fit_rows])
    out = from_matrix(scaler.transform(X), y, dataset.modalities, dataset.num_classes, dataset.ids)
    out.scaler = scaler.to_dict()
    return out, scaler


# --- folds ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    val_ids: tuple


def kfold_split(labels, folds: int, seed: int, ids=None) -> list:
    """Seeded stratified split; validation folds partition the subjects."""
    labels = np.asarray(labels)
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    classes, counts = np.unique(labels, return_counts=True)
    small = [int(c) for c, n in zip(classes, counts) if n < folds]
    if small:
        raise ConfigError(f"classes {small} have fewer than {folds} members")
    ids = list(ids) if ids is not None else list(range(len(labels)))
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    out = []
    for i, (tr, va) in enumerate(skf.split(np.zeros(len(labels)), labels)):
        out.append(FoldSplit(i, tuple(ids[j] for j in tr), tuple(ids[j] for j in va)))
    return out


# --- file format --------------------------------------------------------------------------

def _tensor_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_cohort(dataset: CohortDataset, path) -> None:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    table = []
    for s in dataset.subjects:
        files = {}
        for m in dataset.modalities:
            tensors = ([("embedding", s.embeddings[m.name]), ("map", s.feature_maps[m.name])]
                       if m.kind == IMAGING else [("features", s.tabular)])
            for part, arr in tensors:
                rel = f"tensors/{s.subject_id}.{m.name}.{part}.f32"
                data = _tensor_bytes(arr)
                (root / rel).write_bytes(data)
                files[f"{m.name}.{part}"] = {"path": rel, "shape": list(np.shape(arr)),
                                             "sha256": hashlib.sha256(data).hexdigest()}
        table.append({"id": s.subject_id, "label": int(s.label), "files": files})
    manifest = {"format_version": FORMAT_VERSION, "N": dataset.N, "K": dataset.num_classes,
                "modalities": [m.to_json() for m in dataset.modalities], "subjects": table}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def _read_tensor(root, key, entry, expected_shape):
    if entry is None:
        raise FormatError(f"manifest entry {key!r} missing")
    if list(entry["shape"]) != list(expected_shape):
        raise FormatError(f"{key}: shape {entry['shape']} does not match descriptor {list(expected_shape)}")
    fp = root / entry["path"]
    if not fp.is_file():
        raise FormatError(f"{key}: file {entry['path']} missing")
    data = fp.read_bytes()
    want = 4 * int(np.prod(expected_shape))
    if len(data) != want:
        raise FormatError(f"{key}: {entry['path']} has {len(data)} bytes, expected {want}")
    if "sha256" in entry and hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise FormatError(f"{key}: checksum mismatch for {entry['path']}")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(expected_shape)


def load_cohort(path) -> CohortDataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise FormatError(f"{os.fspath(mf)} not found")
    try:
        manifest = json.loads(mf.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest.json unreadable: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        modalities = [ModalitySpec.from_json(d) for d in manifest["modalities"]]
        table = manifest["subjects"]
        K = int(manifest["K"])
    except (KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"malformed manifest: {e}") from None
    if len(table) != int(manifest.get("N", -1)):
        raise FormatError(f"manifest N={manifest.get('N')} but {len(table)} subjects listed")
    subjects = []
    try:
        for row in table:
            sid = row["id"]
            emb, maps, tab = {}, {}, None
            for m in modalities:
                get = lambda part: row["files"].get(f"{m.name}.{part}")  # noqa: E731
                if m.kind == IMAGING:
                    emb[m.name] = _read_tensor(root, f"{sid}/{m.name}.embedding", get("embedding"), (m.dim,))
                    maps[m.name] = _read_tensor(root, f"{sid}/{m.name}.map", get("map"), m.map_shape)
                else:
                    tab = _read_tensor(root, f"{sid}/{m.name}.features", get("features"), (m.dim,))
            subjects.append(SubjectRecord(sid, emb, maps, tab, int(row["label"])))
        return CohortDataset(subjects, modalities, K)
    except (KeyError, TypeError, AttributeError) as e:
        raise FormatError(f"malformed subject entry in manifest: {e!r}") from None
    except (ConfigError, LabelError, ShapeError) as e:
        raise FormatError(f"cohort contents inconsistent: {e}") from None
