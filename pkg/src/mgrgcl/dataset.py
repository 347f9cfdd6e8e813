"""Manifests, the MGRF feature-file container, and the synthetic
source/target generator.

Feature file layout (little-endian, 16-byte header)::

    offset  size  field
    0       4     magic b"MGRF"
    4       2     version (u16, = 1)
    6       4     count (u32)
    10      2     C (u16)
    12      2     H (u16)
    14      2     W (u16)
    16      ...   count*C*H*W float32, sample-major then (c, h, w) row-major
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .errors import BadMagic, CorruptHeader, InvalidConfig, ShapeMismatch, ValidationError
from .numerics import child_seed, make_rng

FEATURE_MAGIC = b"MGRF"
FEATURE_VERSION = 1
HEADER = struct.Struct("<4sHIHHH")
HEADER_SIZE = HEADER.size  # 16

SOURCE, TARGET = "source", "target"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    identity: "int | None"
    camera: int
    domain: str
    feature_index: int


@dataclass
class DatasetManifest:
    records: list
    feature_file: str
    map_shape: tuple

    @property
    def num_samples(self):
        return len(self.records)

    def validate(self, feature_count=None):
        """Check manifest invariants; ``feature_count`` enables the range check."""
        seen = set()
        for i, r in enumerate(self.records):
            if r.sample_id in seen:
                raise ValidationError(f"records[{i}].sample_id: duplicate id {r.sample_id}")
            seen.add(r.sample_id)
            if r.domain not in (SOURCE, TARGET):
                raise ValidationError(f"records[{i}].domain: unknown domain {r.domain!r}")
            if (r.identity is not None) != (r.domain == SOURCE):
                raise ValidationError(f"records[{i}].identity: must be set iff domain is source")
            if r.feature_index < 0 or (feature_count is not None and r.feature_index >= feature_count):
                raise ValidationError(
                    f"records[{i}].feature_index: {r.feature_index} out of range for {feature_count} maps"
                )
        if len(self.map_shape) != 3 or min(self.map_shape) < 1:
            raise ValidationError(f"map_shape: invalid {self.map_shape}")

    def to_json(self):
        return {
            "feature_file": self.feature_file,
            "map_shape": list(self.map_shape),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, doc):
        try:
            records = [
                SampleRecord(
                    int(r["sample_id"]),
                    None if r["identity"] is None else int(r["identity"]),
                    int(r["camera"]),
                    str(r["domain"]),
                    int(r["feature_index"]),
                )
                for r in doc["records"]
            ]
            return cls(records, str(doc["feature_file"]), tuple(int(v) for v in doc["map_shape"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"manifest: malformed document ({exc})") from exc


@dataclass
class Dataset:
    """A manifest together with the maps it indexes (float32, as stored)."""

    manifest: DatasetManifest
    maps: np.ndarray

    def __len__(self):
        return self.manifest.num_samples

    def sample_maps(self, indices=None):
        idx = [r.feature_index for r in self.manifest.records]
        if indices is not None:
            idx = [idx[i] for i in indices]
        return self.maps[idx]

    @property
    def identities(self):
        return np.array([-1 if r.identity is None else r.identity for r in self.manifest.records])

    @property
    def cameras(self):
        return np.array([r.camera for r in self.manifest.records])


# -- binary feature file -----------------------------------------------------


def write_feature_file(maps, path, map_shape=None):
    """Write maps (sequence or (n, C, H, W) array) to ``path``.

    ``map_shape`` is required only when ``maps`` is empty and shapeless.
    """
    if isinstance(maps, np.ndarray) and maps.ndim == 4:
        arr = maps
    else:
        maps = list(maps)
        shapes = {np.shape(m) for m in maps}
        if len(shapes) > 1:
            raise ShapeMismatch(f"maps do not share one shape: {sorted(shapes)}")
        if maps:
            arr = np.stack([np.asarray(m) for m in maps])
        else:
            arr = np.zeros((0, *(map_shape or (1, 1, 1))))
    if arr.ndim != 4:
        raise ShapeMismatch(f"each map must be C x H x W, got {arr.shape[1:]}")
    count, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, count, c, h, w))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path):
    """Return an ``(count, C, H, W)`` float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < HEADER_SIZE:
        raise CorruptHeader(f"{path}: header truncated")
    _, version, count, c, h, w = HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    expected = count * c * h * w * 4
    if len(blob) - HEADER_SIZE != expected:
        raise CorruptHeader(f"{path}: payload is {len(blob) - HEADER_SIZE} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).astype(np.float32)
    return data.reshape(count, c, h, w)


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        return DatasetManifest.from_json(json.load(fh))


def load_dataset(manifest_path):
    """Read a manifest and its feature file (relative paths resolve next to the manifest)."""
    manifest = read_manifest(manifest_path)
    feat = manifest.feature_file
    if not os.path.isabs(feat):
        feat = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), feat)
    maps = read_feature_file(feat)
    manifest.validate(len(maps))
    if tuple(maps.shape[1:]) != tuple(manifest.map_shape) and len(maps):
        raise ValidationError(f"map_shape: manifest says {manifest.map_shape}, file holds {maps.shape[1:]}")
    return Dataset(manifest, maps)


def save_dataset(dataset, manifest_path):
    feat = dataset.manifest.feature_file
    if not os.path.isabs(feat):
        feat = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), feat)
    write_feature_file(dataset.maps, feat, dataset.manifest.map_shape)
    write_manifest(dataset.manifest, manifest_path)


# -- synthetic generator -----------------------------------------------------


@dataclass
class DomainShift:
    rotation_strength: float = 2.0
    bias_sigma: float = 1.0
    extra_noise_sigma: float = 0.5


@dataclass
class SynthConfig:
    num_identities: int = 40
    samples_per_identity: int = 12
    cameras: int = 4
    map_shape: tuple = (32, 6, 6)
    identity_signal_scale: float = 1.0
    part_signal_fraction: float = 0.6
    noise_sigma: float = 1.1
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0
    camera_sigma: float = 0.3
    base_sigma: float = 0.5
    signature_rank: int = 8  # 0 or >= C means full channel rank

    def validate(self):
        if self.num_identities < 2:
            raise InvalidConfig("synth.num_identities", "must be >= 2")
        if self.samples_per_identity < 2:
            raise InvalidConfig("synth.samples_per_identity", "must be >= 2")
        if self.cameras < 1:
            raise InvalidConfig("synth.cameras", "must be >= 1")
        if len(self.map_shape) != 3 or min(self.map_shape) < 1:
            raise InvalidConfig("synth.map_shape", "must be three positive ints")
        if not 0.0 <= self.part_signal_fraction <= 1.0:
            raise InvalidConfig("synth.part_signal_fraction", "must lie in [0, 1]")
        for key in ("noise_sigma", "camera_sigma", "base_sigma", "identity_signal_scale"):
            if getattr(self, key) < 0:
                raise InvalidConfig(f"synth.{key}", "must be >= 0")
        for key in ("rotation_strength", "bias_sigma", "extra_noise_sigma"):
            if getattr(self.domain_shift, key) < 0:
                raise InvalidConfig(f"synth.domain_shift.{key}", "must be >= 0")
        if self.signature_rank < 0:
            raise InvalidConfig("synth.signature_rank", "must be >= 0")


@dataclass
class IdentitySignature:
    uniform: np.ndarray
    row: np.ndarray
    col: np.ndarray
    rows: tuple
    cols: tuple


def render_signature(sig, map_shape, part_fraction):
    """Spatial signature map for one identity.

    ``1 - part_fraction`` of the energy is spread uniformly; the rest is split
    evenly between the identity's row-bands and column-bands, where it is
    concentrated (amplitude scaled so energies match a uniform placement).
    """
    c, h, w = map_shape
    out = np.sqrt(1.0 - part_fraction) * np.broadcast_to(sig.uniform[:, None, None], map_shape).copy()
    if part_fraction > 0:
        row_amp = np.sqrt(0.5 * part_fraction * h / len(sig.rows))
        col_amp = np.sqrt(0.5 * part_fraction * w / len(sig.cols))
        for r in sig.rows:
            out[:, r, :] += row_amp * sig.row[:, None]
        for k in sig.cols:
            out[:, :, k] += col_amp * sig.col[:, None]
    return out


def _draw_signatures(cfg, rng, count, basis):
    c, h, w = cfg.map_shape
    # rescale so expected energy does not depend on the subspace rank
    gain = cfg.identity_signal_scale * np.sqrt(c / basis.shape[1])
    sigs = []
    for _ in range(count):
        vecs = [basis @ rng.normal(size=basis.shape[1]) * gain for _ in range(3)]
        rows = tuple(sorted(rng.choice(h, size=min(h, int(rng.integers(1, 3))), replace=False).tolist()))
        cols = tuple(sorted(rng.choice(w, size=min(w, int(rng.integers(1, 3))), replace=False).tolist()))
        sigs.append(IdentitySignature(vecs[0], vecs[1], vecs[2], rows, cols))
    return sigs


def domain_rotation(channels, strength, rng):
    """Orthogonal channel mixing ``expm(strength * S)`` with S a random skew matrix."""
    a = rng.normal(size=(channels, channels)) / np.sqrt(2.0 * channels)
    return expm(strength * (a - a.T))


def _render_domain(cfg, rng, sigs, base, id_offset, sample_offset, domain, mixing, bias, extra_sigma):
    c, h, w = cfg.map_shape
    cam_offsets = rng.normal(scale=cfg.camera_sigma, size=(cfg.cameras, c, h, w))
    n = len(sigs) * cfg.samples_per_identity
    maps = np.empty((n, c, h, w))
    records, truth = [], []
    i = 0
    for k, sig in enumerate(sigs):
        pattern = base + render_signature(sig, cfg.map_shape, cfg.part_signal_fraction)
        for j in range(cfg.samples_per_identity):
            cam = j % cfg.cameras
            m = pattern + cam_offsets[cam] + rng.normal(scale=cfg.noise_sigma, size=(c, h, w))
            if mixing is not None:
                m = np.einsum("dc,chw->dhw", mixing, m) + bias[:, None, None]
                m = m + rng.normal(scale=extra_sigma, size=(c, h, w))
            maps[i] = m
            identity = id_offset + k
            truth.append(identity)
            records.append(
                SampleRecord(sample_offset + i, identity if domain == SOURCE else None, cam, domain, i)
            )
            i += 1
    return maps.astype(np.float32), records, np.array(truth)


@dataclass
class SyntheticPair:
    source: Dataset
    target: Dataset
    target_identities: np.ndarray  # held-out ground truth, evaluation only


def generate_synthetic_pair(cfg, source_file="source.mgrf", target_file="target.mgrf"):
    """Generate a labelled source domain and an unlabelled, shifted target domain.

    Identity sets are disjoint (target ids continue after the source ids).
    The target shift is identity-preserving: an orthogonal channel mixing,
    a per-channel bias and extra noise applied to every map.
    """
    cfg.validate()
    c, h, w = cfg.map_shape
    rng = make_rng(child_seed(cfg.seed, 0))
    rank = min(cfg.signature_rank or c, c)
    basis = np.linalg.qr(rng.normal(size=(c, rank)))[0] if rank < c else np.eye(c)
    base = rng.normal(scale=cfg.base_sigma, size=(c, h, w))
    src_sigs = _draw_signatures(cfg, rng, cfg.num_identities, basis)
    tgt_sigs = _draw_signatures(cfg, rng, cfg.num_identities, basis)

    shift_rng = make_rng(child_seed(cfg.seed, 1))
    mixing = domain_rotation(c, cfg.domain_shift.rotation_strength, shift_rng)
    bias = shift_rng.normal(scale=cfg.domain_shift.bias_sigma, size=c)

    src_maps, src_records, _ = _render_domain(
        cfg, make_rng(child_seed(cfg.seed, 2)), src_sigs, base, 0, 0, SOURCE, None, None, 0.0
    )
    tgt_maps, tgt_records, truth = _render_domain(
        cfg, make_rng(child_seed(cfg.seed, 3)), tgt_sigs, base, cfg.num_identities,
        len(src_records), TARGET, mixing, bias, cfg.domain_shift.extra_noise_sigma,
    )
    source = Dataset(DatasetManifest(src_records, source_file, tuple(cfg.map_shape)), src_maps)
    target = Dataset(DatasetManifest(tgt_records, target_file, tuple(cfg.map_shape)), tgt_maps)
    return SyntheticPair(source, target, truth)


def write_truth(path, manifest, identities):
    doc = {str(r.sample_id): int(t) for r, t in zip(manifest.records, identities)}
    with open(path, "w") as fh:
        json.dump({"identities": doc}, fh, indent=1)
        fh.write("\n")


def read_truth(path, manifest):
    with open(path) as fh:
        doc = json.load(fh)["identities"]
    try:
        return np.array([int(doc[str(r.sample_id)]) for r in manifest.records])
    except KeyError as exc:
        raise ValidationError(f"truth: no label for sample_id {exc}") from exc


def with_records(dataset, records):
    """Same maps, different record list."""
    return Dataset(replace(dataset.manifest, records=list(records)), dataset.maps)
