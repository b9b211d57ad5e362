# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Data ingestion and generation.

OFF meshes and `.xyz` clouds are read into float64 arrays, turned into fixed
size unit-sphere clouds and labeled through a CSV manifest. The synthetic
corpus generates analytic shapes so training can run without any dataset.

Manifest layout: `manifest.csv` with the header `path,split,label` and a
sibling `classes.txt` holding one class name per line (line order is label
order). Paths are relative to the manifest's directory. Row numbers in
errors count the header as row 1.
"""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from aws_lambda_powertools import Logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from point_ln.config import SHAPE_KINDS, AugmentationConfig, DataConfig, SyntheticCorpusConfig, SyntheticShapeSpec
from point_ln.exceptions import DataError, GeometryError, ManifestError, ParseError
from point_ln.geometry import PointCloud, as_point_cloud, farthest_point_sample

logger = Logger(service='point-ln', child=True)

MANIFEST_HEADER = ['path', 'split', 'label']
CLASSES_FILE = 'classes.txt'
SPLITS = ('train', 'test')
CLOUD_EXTENSIONS = ('.off', '.xyz')

TORUS_MAJOR_RADIUS = 1.0
TORUS_MINOR_RADIUS = 0.25


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError('mesh vertices must be V x 3')
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError('mesh faces must be F x 3')
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError('index out of bounds')


@dataclass(frozen=True)
class LabeledCloud:
    cloud: PointCloud
    label: int
    source_id: str
    split: str = 'train'


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    source: str = Field(min_length=1)
    path: Path
    split: Literal['train', 'test']
    label: int = Field(ge=0)
    row: int = Field(ge=2)


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    root: Path
    class_names: List[str]
    entries: List[ManifestEntry]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == name]

    def split_counts(self) -> dict:
        return {name: len(self.split(name)) for name in SPLITS}


@dataclass
class Dataset:
    class_names: List[str]
    train: List[LabeledCloud] = field(default_factory=list)
    test: List[LabeledCloud] = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> List[LabeledCloud]:
        if name not in SPLITS:
            raise DataError('unknown split: {}'.format(name))
        return self.train if name == 'train' else self.test


# OFF

def _content_lines(text: str) -> Iterator[Tuple[int, List[str]]]:
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if stripped:
            yield number, stripped.split()


def _parse_int(token: str, line: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError('non-numeric {}: {!r}'.format(what, token), line)


def _parse_float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError('non-numeric coordinate: {!r}'.format(token), line)
    if not math.isfinite(value):
        raise ParseError('non-finite coordinate: {!r}'.format(token), line)
    return value


def parse_off(text: Union[bytes, str]) -> Mesh:
    if isinstance(text, bytes):
        try:
            text = text.decode('utf-8')
        except UnicodeDecodeError:
            raise ParseError('file is not UTF-8 text', 1)
    lines = list(_content_lines(text))
    if not lines:
        raise ParseError('malformed header: empty file', 1)

    cursor = 0
    header_line, tokens = lines[0]
    first = tokens[0]
    if first == 'OFF':
        counts = tokens[1:]
    elif first.startswith('OFF') and first[3:].lstrip('+-').isdigit():
        # Some ModelNet40 files fuse the counts onto the header: "OFF3 1 0".
        counts = [first[3:]] + tokens[1:]
    elif first.lstrip('+-').isdigit():
        counts = tokens
    else:
        raise ParseError('malformed header: expected OFF, got {!r}'.format(first), header_line)
    cursor = 1
    if not counts:
        if len(lines) < 2:
            raise ParseError('malformed header: missing counts line', header_line + 1)
        header_line, counts = lines[1]
        cursor = 2
    if len(counts) != 3:
        raise ParseError('malformed header: counts line must be "V F E"', header_line)
    vertex_count, face_count, _ = (_parse_int(token, header_line, 'count') for token in counts)
    if vertex_count < 0 or face_count < 0:
        raise ParseError('malformed header: negative count', header_line)

    vertices = np.empty((vertex_count, 3), dtype=np.float64)
    for i in range(vertex_count):
        if cursor >= len(lines):
            raise ParseError('count mismatch: expected {} vertices, found {}'.format(vertex_count, i),
                             len(text.splitlines()) + 1)
        number, tokens = lines[cursor]
        if len(tokens) < 3:
            raise ParseError('vertex needs 3 coordinates', number)
        # Extra tokens (per-vertex colors) are ignored.
        vertices[i] = [_parse_float(token, number) for token in tokens[:3]]
        cursor += 1

    triangles = []
    for i in range(face_count):
        if cursor >= len(lines):
            raise ParseError('count mismatch: expected {} faces, found {}'.format(face_count, i),
                             len(text.splitlines()) + 1)
        number, tokens = lines[cursor]
        size = _parse_int(tokens[0], number, 'face size')
        if size < 3:
            raise ParseError('face needs at least 3 vertices', number)
        if len(tokens) < size + 1:
            raise ParseError('face lists {} of {} indices'.format(len(tokens) - 1, size), number)
        indices = [_parse_int(token, number, 'index') for token in tokens[1:size + 1]]
        for index in indices:
            if not 0 <= index < vertex_count:
                raise ParseError('index {} out of range for {} vertices'.format(index, vertex_count), number)
        triangles.extend((indices[0], indices[j], indices[j + 1]) for j in range(1, size - 1))
        cursor += 1

    if cursor < len(lines):
        raise ParseError('count mismatch: unexpected trailing data', lines[cursor][0])
    faces = np.array(triangles, dtype=np.intp).reshape(-1, 3)
    return Mesh(vertices=vertices, faces=faces)


def serialize_off(mesh: Mesh) -> str:
    out = io.StringIO()
    out.write('OFF\n{} {} 0\n'.format(len(mesh.vertices), len(mesh.faces)))
    for x, y, z in mesh.vertices.tolist():
        out.write('{!r} {!r} {!r}\n'.format(x, y, z))
    for a, b, c in mesh.faces.tolist():
        out.write('3 {} {} {}\n'.format(a, b, c))
    return out.getvalue()


def read_off(path: Union[str, Path]) -> Mesh:
    return parse_off(_read_bytes(path))


# XYZ

def parse_xyz(text: Union[bytes, str]) -> PointCloud:
    if isinstance(text, bytes):
        try:
            text = text.decode('utf-8')
        except UnicodeDecodeError:
            raise ParseError('file is not UTF-8 text', 1)
    rows = []
    for number, tokens in _content_lines(text):
        if len(tokens) != 3:
            raise ParseError('expected "x y z", got {} fields'.format(len(tokens)), number)
        rows.append([_parse_float(token, number) for token in tokens])
    if not rows:
        raise ParseError('file contains no points', 1)
    return np.array(rows, dtype=np.float64)


def read_xyz(path: Union[str, Path]) -> PointCloud:
    return parse_xyz(_read_bytes(path))


def write_xyz(path: Union[str, Path], cloud: npt.ArrayLike) -> None:
    points = as_point_cloud(cloud)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8', newline='\n') as f:
        np.savetxt(f, points, fmt='%.9g', delimiter=' ')


def _read_bytes(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError('cannot read {}: {}'.format(path, e.strerror or e))


def read_cloud_file(path: Union[str, Path]) -> Union[Mesh, PointCloud]:
    suffix = Path(path).suffix.lower()
    if suffix == '.off':
        return read_off(path)
    if suffix == '.xyz':
        return read_xyz(path)
    raise DataError('unknown extension {!r} for {} (expected one of {})'.format(suffix, path, ', '.join(CLOUD_EXTENSIONS)))


# Sampling and preprocessing

def triangle_areas(mesh: Mesh) -> np.ndarray:
    corners = mesh.vertices[mesh.faces]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface.

    Zero-area triangles get zero probability and are never drawn.
    """
    if n < 1:
        raise GeometryError('sample count must be positive')
    if len(mesh.faces) == 0:
        raise GeometryError('mesh has no faces to sample')
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise GeometryError('mesh has zero surface area')
    chosen = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    weights = np.stack((1.0 - r1, r1 * (1.0 - r2), r1 * r2), axis=1)
    corners = mesh.vertices[mesh.faces[chosen]]
    return np.einsum('nk,nkd->nd', weights, corners)


def resample_to_n(cloud: npt.ArrayLike, n: int, rng: np.random.Generator, method: str = 'fps') -> PointCloud:
    points = as_point_cloud(cloud)
    if n < 1:
        raise GeometryError('target point count must be positive')
    count = len(points)
    if count == n:
        return points.copy()
    if count > n:
        if method == 'fps':
            return points[farthest_point_sample(points, n)]
        if method == 'random':
            return points[np.sort(rng.choice(count, size=n, replace=False))]
        raise DataError('unknown resample method: {}'.format(method))
    extra = rng.integers(0, count, size=n - count)
    return np.concatenate((points, points[extra]))


def normalize_unit_sphere(cloud: npt.ArrayLike) -> PointCloud:
    points = as_point_cloud(cloud)
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    return centered


def augment(cloud: npt.ArrayLike, cfg: AugmentationConfig, rng: np.random.Generator) -> PointCloud:
    points = as_point_cloud(cloud)
    if not cfg.enabled:
        return points.copy()
    low, high = cfg.scale_range
    scale = rng.uniform(low, high, size=3)
    shift = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)
    return points * scale + shift


# Synthetic shapes

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    w, x, y, z = _unit_quaternion(rng)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def _disk(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    radius = np.sqrt(rng.random(n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return radius * np.cos(theta), radius * np.sin(theta)


def _sphere(n: int, rng: np.random.Generator) -> PointCloud:
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _cube(n: int, rng: np.random.Generator) -> PointCloud:
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    face = rng.integers(0, 6, size=n)
    points[np.arange(n), face // 2] = np.where(face % 2, 1.0, -1.0)
    return points


def _cylinder(n: int, rng: np.random.Generator) -> PointCloud:
    # Lateral area 4*pi, each cap pi.
    part = rng.choice(3, size=n, p=[4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0])
    points = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    height = rng.uniform(-1.0, 1.0, size=n)
    dx, dy = _disk(n, rng)
    lateral = part == 0
    points[lateral] = np.stack((np.cos(theta), np.sin(theta), height), axis=1)[lateral]
    caps = ~lateral
    points[caps] = np.stack((dx, dy, np.where(part == 1, 1.0, -1.0)), axis=1)[caps]
    return points


def _cone(n: int, rng: np.random.Generator) -> PointCloud:
    # Base radius 1 at z = -1, apex at z = 1; lateral area pi * sqrt(5), base pi.
    lateral_share = math.sqrt(5.0) / (math.sqrt(5.0) + 1.0)
    lateral = rng.random(n) < lateral_share
    t = np.sqrt(rng.random(n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    dx, dy = _disk(n, rng)
    side = np.stack((t * np.cos(theta), t * np.sin(theta), 1.0 - 2.0 * t), axis=1)
    base = np.stack((dx, dy, np.full(n, -1.0)), axis=1)
    return np.where(lateral[:, None], side, base)


def _torus(n: int, rng: np.random.Generator) -> PointCloud:
    big, small = TORUS_MAJOR_RADIUS, TORUS_MINOR_RADIUS
    accepted = []
    remaining = n
    while remaining > 0:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=2 * remaining)
        # Area element is proportional to (R + r cos(theta)).
        keep = rng.random(len(theta)) * (big + small) < big + small * np.cos(theta)
        accepted.append(theta[keep][:remaining])
        remaining -= len(accepted[-1])
    tube = np.concatenate(accepted)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = big + small * np.cos(tube)
    return np.stack((ring * np.cos(phi), ring * np.sin(phi), small * np.sin(tube)), axis=1)


_SHAPE_SAMPLERS = {
    'sphere': _sphere,
    'cube': _cube,
    'cylinder': _cylinder,
    'cone': _cone,
    'torus': _torus,
}


def sample_shape_surface(kind: str, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform surface samples of a shape in its own frame.

    Frames: unit sphere; cube of half-extent 1; cylinder of radius 1 with
    z in [-1, 1]; cone with base radius 1 at z = -1 and apex at z = 1;
    torus with R = 1, r = 0.25 around the z axis. Samples lie on the surface
    up to float64 rounding (1e-12 for the analytic residuals).
    """
    if n < 1:
        raise GeometryError('sample count must be positive')
    try:
        sampler = _SHAPE_SAMPLERS[kind]
    except KeyError:
        raise DataError('unknown shape kind: {}'.format(kind))
    return sampler(n, rng)


def generate_shape(spec: SyntheticShapeSpec, rng: np.random.Generator, label: Optional[int] = None,
                   source_id: str = '') -> LabeledCloud:
    """Shape-frame sample, then rotation, isotropic scale and Gaussian jitter.

    Without jitter the surface equation holds exactly up to the similarity
    transform; with jitter sigma each point moves by a 3D Gaussian offset,
    so residual distances stay below 5 * sigma * sqrt(3) with overwhelming
    probability.
    """
    points = sample_shape_surface(spec.kind, spec.points, rng)
    if spec.rotate:
        points = points @ random_rotation(rng).T
    low, high = spec.scale_range
    points = points * rng.uniform(low, high)
    if spec.jitter > 0:
        points = points + rng.normal(0.0, spec.jitter, size=points.shape)
    return LabeledCloud(
        cloud=points,
        label=SHAPE_KINDS.index(spec.kind) if label is None else label,
        source_id=source_id or spec.kind
    )


def synthetic_seed(corpus_cfg: SyntheticCorpusConfig, seed: int) -> int:
    return corpus_cfg.seed if corpus_cfg.seed is not None else seed


def iter_synthetic(corpus_cfg: SyntheticCorpusConfig, seed: int) -> Iterator[LabeledCloud]:
    """Yields raw generated clouds in (split, class, index) order.

    Each sample draws from its own generator keyed by (seed, split, label,
    index), so a sample never depends on how many others were generated.
    """
    base = synthetic_seed(corpus_cfg, seed)
    for split_code, (split, count) in enumerate((('train', corpus_cfg.train_per_class),
                                                 ('test', corpus_cfg.test_per_class))):
        for label, kind in enumerate(corpus_cfg.kinds):
            spec = corpus_cfg.shape_spec(kind)
            for i in range(count):
                rng = np.random.default_rng(np.random.SeedSequence([base, split_code, label, i]))
                generated = generate_shape(spec, rng, label=label, source_id='{}/{}_{:04d}'.format(split, kind, i))
                yield LabeledCloud(cloud=generated.cloud, label=label, source_id=generated.source_id, split=split)


def synthetic_dataset(corpus_cfg: SyntheticCorpusConfig, seed: int) -> Dataset:
    dataset = Dataset(class_names=list(corpus_cfg.kinds))
    for item in iter_synthetic(corpus_cfg, seed):
        normalized = LabeledCloud(
            cloud=normalize_unit_sphere(item.cloud),
            label=item.label,
            source_id=item.source_id,
            split=item.split
        )
        dataset.split(item.split).append(normalized)
    logger.info('Synthetic corpus ready', classes=dataset.class_count, train=len(dataset.train), test=len(dataset.test))
    return dataset


# Manifest

def _read_class_names(path: Path) -> List[str]:
    if not path.is_file():
        raise ManifestError('class list not found: {}'.format(path))
    names = [line.strip() for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
    if not names:
        raise ManifestError('class list is empty: {}'.format(path))
    if len(set(names)) != len(names):
        raise ManifestError('class list has duplicate names: {}'.format(path))
    return names


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise ManifestError('manifest not found: {}'.format(manifest_path))
    root = manifest_path.parent
    class_names = _read_class_names(root / CLASSES_FILE)
    reader = csv.reader(io.StringIO(manifest_path.read_text(encoding='utf-8')))
    header = next(reader, None)
    if header is None or [column.strip() for column in header] != MANIFEST_HEADER:
        raise ManifestError('header must be {}'.format(','.join(MANIFEST_HEADER)), row=1)

    entries, seen = [], set()
    for row, fields in enumerate(reader, start=2):
        if not any(value.strip() for value in fields):
            continue
        if len(fields) != len(MANIFEST_HEADER):
            raise ManifestError('expected {} fields, got {}'.format(len(MANIFEST_HEADER), len(fields)), row=row)
        source, split, label = (value.strip() for value in fields)
        try:
            entry = ManifestEntry(source=source, path=root / source, split=split, label=label, row=row)
        except ValidationError as e:
            problem = e.errors()[0]
            raise ManifestError('{}: {}'.format(problem['loc'][0], problem['msg']), row=row)
        if entry.label >= len(class_names):
            raise ManifestError('label {} out of range for {} classes'.format(entry.label, len(class_names)), row=row)
        if entry.path.suffix.lower() not in CLOUD_EXTENSIONS:
            raise ManifestError('unknown extension for {}'.format(source), row=row)
        resolved = entry.path.resolve()
        if resolved in seen:
            raise ManifestError('duplicate path {}'.format(source), row=row)
        if not entry.path.is_file():
            raise ManifestError('file not found: {}'.format(source), row=row)
        seen.add(resolved)
        entries.append(entry)

    manifest = DatasetManifest(root=root, class_names=class_names, entries=entries)
    logger.info('Manifest loaded', path=str(manifest_path), classes=manifest.class_count, **manifest.split_counts())
    return manifest


def prepare_cloud(path: Union[str, Path], data_cfg: DataConfig, rng: np.random.Generator) -> PointCloud:
    """File -> fixed-size unit-sphere cloud; meshes are surface-sampled first."""
    loaded = read_cloud_file(path)
    if isinstance(loaded, Mesh):
        cloud = sample_surface(loaded, data_cfg.points_per_cloud, rng)
    else:
        cloud = loaded
    return normalize_unit_sphere(resample_to_n(cloud, data_cfg.points_per_cloud, rng, data_cfg.resample_method))


def load_labeled_cloud(entry: ManifestEntry, data_cfg: DataConfig, rng: np.random.Generator,
                       augment_train: bool = True) -> LabeledCloud:
    cloud = prepare_cloud(entry.path, data_cfg, rng)
    if augment_train and entry.split == 'train':
        cloud = augment(cloud, data_cfg.augmentation, rng)
    return LabeledCloud(cloud=cloud, label=entry.label, source_id=entry.source, split=entry.split)


def load_dataset(manifest: DatasetManifest, split: str, data_cfg: DataConfig, seed: int, threads: int = 1,
                 augment_train: bool = False) -> List[LabeledCloud]:
    entries = manifest.split(split)

    def load(entry: ManifestEntry) -> LabeledCloud:
        rng = np.random.default_rng(np.random.SeedSequence([seed, entry.row]))
        return load_labeled_cloud(entry, data_cfg, rng, augment_train=augment_train)

    if threads > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            clouds = list(pool.map(load, entries))
    else:
        clouds = [load(entry) for entry in entries]
    logger.info('Split loaded', split=split, clouds=len(clouds))
    return clouds


def build_dataset(data_cfg: DataConfig, seed: int, threads: int = 1) -> Dataset:
    """The run's dataset: the configured manifest, else the synthetic corpus."""
    if data_cfg.manifest is None:
        return synthetic_dataset(data_cfg.synthetic, seed)
    manifest = load_manifest(data_cfg.manifest)
    return Dataset(
        class_names=manifest.class_names,
        train=load_dataset(manifest, 'train', data_cfg, seed, threads),
        test=load_dataset(manifest, 'test', data_cfg, seed, threads)
    )


def write_synthetic_corpus(corpus_cfg: SyntheticCorpusConfig, seed: int, out_dir: Union[str, Path]) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / CLASSES_FILE).write_text(''.join('{}\n'.format(kind) for kind in corpus_cfg.kinds), encoding='utf-8')
    rows = []
    for item in iter_synthetic(corpus_cfg, seed):
        relative = '{}.xyz'.format(item.source_id)
        write_xyz(root / relative, item.cloud)
        rows.append((relative, item.split, item.label))
    manifest_path = root / 'manifest.csv'
    with open(manifest_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    logger.info('Synthetic corpus written', path=str(manifest_path), files=len(rows))
    return manifest_path


def class_counts(clouds: Sequence[LabeledCloud], class_count: int) -> np.ndarray:
    return np.bincount([item.label for item in clouds], minlength=class_count)
