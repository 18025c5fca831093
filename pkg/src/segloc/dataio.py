"""File formats, dataset manifests, and the synthetic data generator.

Feature and parameter files share one container: an 8-byte magic, two
little-endian u32 dimensions, then row-major f32 payload. Storage is 32-bit
while all in-memory math stays 64-bit. Manifests are plain tab-separated
text so golden files diff cleanly.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    Config,
    ConfigError,
    FormatError,
    FrameFeatures,
    InvalidInputError,
    ManifestError,
    ModelParams,
    OneShotLabel,
    QueryEmbedding,
    VideoInstance,
)

MAGIC = b"MHSTF1\x00\x00"
HEADER_LEN = len(MAGIC) + 8  # magic + u32 rows + u32 cols


# --- matrix container ---------------------------------------------------------------

def matrix_to_bytes(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"container holds 2-d matrices, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("refusing to write non-finite values")
    rows, cols = m.shape
    payload = m.astype("<f4").tobytes(order="C")
    return MAGIC + struct.pack("<II", rows, cols) + payload


def write_feature_file(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(matrix))


def _parse_container(buf: bytes, offset: int, origin: str) -> tuple[np.ndarray, int]:
    if len(buf) - offset < len(MAGIC):
        raise FormatError(
            f"{origin}: at byte {offset}: file too short for magic "
            f"({len(buf) - offset} bytes left)"
        )
    if buf[offset : offset + len(MAGIC)] != MAGIC:
        raise FormatError(f"{origin}: at byte {offset}: bad magic")
    if len(buf) - offset < HEADER_LEN:
        raise FormatError(
            f"{origin}: at byte {offset + len(MAGIC)}: truncated header"
        )
    rows, cols = struct.unpack_from("<II", buf, offset + len(MAGIC))
    need = rows * cols * 4
    start = offset + HEADER_LEN
    if len(buf) - start < need:
        raise FormatError(
            f"{origin}: at byte {len(buf)}: payload needs {need} bytes "
            f"for {rows}x{cols}, found {len(buf) - start}"
        )
    flat = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError(
            f"{origin}: non-finite value at byte {start + int(bad[0]) * 4}"
        )
    matrix = flat.astype(np.float64).reshape(rows, cols)
    return matrix, start + need


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    matrix, end = _parse_container(buf, 0, str(path))
    if end != len(buf):
        raise FormatError(
            f"{path}: at byte {end}: {len(buf) - end} trailing bytes after payload"
        )
    return matrix


def read_matrix_header(path) -> tuple[int, int]:
    """Rows and cols without loading the payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_LEN)
    if len(head) < len(MAGIC) or head[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: at byte 0: bad magic")
    if len(head) < HEADER_LEN:
        raise FormatError(f"{path}: at byte {len(MAGIC)}: truncated header")
    rows, cols = struct.unpack_from("<II", head, len(MAGIC))
    return rows, cols


# --- parameter files ----------------------------------------------------------------

def write_params_file(path, params: ModelParams) -> None:
    """Six containers back to back: W1, W2, W3, b, w_s, b_s."""
    d = params.dim
    sections = (
        params.W1,
        params.W2,
        params.W3,
        params.b.reshape(1, d),
        params.w_s.reshape(1, d),
        np.array([[params.b_s]]),
    )
    Path(path).write_bytes(b"".join(matrix_to_bytes(s) for s in sections))


def read_params_file(path) -> ModelParams:
    path = Path(path)
    buf = path.read_bytes()
    mats = []
    offset = 0
    for _ in range(6):
        m, offset = _parse_container(buf, offset, str(path))
        mats.append(m)
    if offset != len(buf):
        raise FormatError(
            f"{path}: at byte {offset}: {len(buf) - offset} trailing bytes "
            "after the six parameter sections"
        )
    W1, W2, W3, b, w_s, b_s = mats
    d = W1.shape[0]
    expect = [(d, d), (d, d), (d, d), (1, d), (1, d), (1, 1)]
    names = ["W1", "W2", "W3", "b", "w_s", "b_s"]
    for name, m, shape in zip(names, mats, expect):
        if m.shape != shape:
            raise FormatError(
                f"{path}: section {name} has shape {m.shape}, expected {shape}"
            )
    return ModelParams(
        W1=W1, W2=W2, W3=W3, b=b[0], w_s=w_s[0], b_s=float(b_s[0, 0])
    )


# --- manifests ----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    video_id: str
    feature_path: Path
    query_id: str
    query_path: Path
    labeled_frame: int
    gt_span: tuple[int, int] | None

    def label(self) -> OneShotLabel:
        return OneShotLabel(self.video_id, self.labeled_frame, self.gt_span)


def seconds_to_span(start_s: float, end_s: float, fps: float, n_frames: int) -> tuple[int, int]:
    """Second-valued boundaries onto the frame grid: floor start, ceil end."""
    if fps <= 0:
        raise InvalidInputError(f"fps must be positive to convert seconds, got {fps}")
    fs = max(0, min(n_frames - 1, math.floor(start_s * fps)))
    fe = max(0, min(n_frames - 1, math.ceil(end_s * fps) - 1))
    return (fs, max(fs, fe))


def load_manifest(path, fps: float = 0.0) -> list[ManifestEntry]:
    """Parse and validate a tab-separated manifest.

    Columns: video_id, feature_path, query_id, query_path, labeled_frame,
    gt_start, gt_end. The gt columns hold `-` when unknown; with fps > 0 they
    are read as seconds and mapped to frames, otherwise as frame indices.
    Paths are relative to the manifest's directory. Every entry is checked
    against its feature file header.
    """
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        cols = raw.split("\t")
        if len(cols) != 7:
            raise ManifestError(
                f"{path}:{lineno}: expected 7 tab-separated fields, found {len(cols)}"
            )
        video_id, fpath, query_id, qpath, labeled_s, gt_s, gt_e = cols
        if not video_id:
            raise ManifestError(f"{path}:{lineno}: empty video_id field")
        if video_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate video_id {video_id!r}")
        seen.add(video_id)
        try:
            labeled = int(labeled_s)
        except ValueError:
            raise ManifestError(
                f"{path}:{lineno}: labeled_frame {labeled_s!r} is not an integer"
            ) from None
        if (gt_s == "-") != (gt_e == "-"):
            raise ManifestError(
                f"{path}:{lineno}: gt_start and gt_end must both be set or both `-`"
            )
        feature_path = (base / fpath).resolve()
        query_path = (base / qpath).resolve()
        for field_name, p in (("feature_path", feature_path), ("query_path", query_path)):
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: {field_name} {p} does not exist")
        try:
            n_frames, dim = read_matrix_header(feature_path)
            q_rows, q_dim = read_matrix_header(query_path)
        except FormatError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        if q_rows != 1:
            raise ManifestError(
                f"{path}:{lineno}: query file holds {q_rows} rows, expected 1"
            )
        if q_dim != dim:
            raise ManifestError(
                f"{path}:{lineno}: query dim {q_dim} differs from feature dim {dim}"
            )
        if not 0 <= labeled < n_frames:
            raise ManifestError(
                f"{path}:{lineno}: labeled_frame {labeled} outside the "
                f"{n_frames} frames of {video_id!r}"
            )
        gt_span = None
        if gt_s != "-":
            try:
                if fps > 0:
                    gt_span = seconds_to_span(float(gt_s), float(gt_e), fps, n_frames)
                else:
                    gt_span = (int(gt_s), int(gt_e))
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: ground-truth columns {gt_s!r}, {gt_e!r} "
                    "are not numbers"
                ) from None
            try:
                OneShotLabel(video_id, labeled, gt_span).validate(n_frames)
            except InvalidInputError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        entries.append(
            ManifestEntry(video_id, feature_path, query_id, query_path, labeled, gt_span)
        )
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in entries:
        gt_s, gt_e = ("-", "-") if e.gt_span is None else map(str, e.gt_span)
        lines.append(
            "\t".join(
                (
                    e.video_id,
                    str(Path(e.feature_path).resolve().relative_to(base))
                    if Path(e.feature_path).resolve().is_relative_to(base)
                    else str(e.feature_path),
                    e.query_id,
                    str(Path(e.query_path).resolve().relative_to(base))
                    if Path(e.query_path).resolve().is_relative_to(base)
                    else str(e.query_path),
                    str(e.labeled_frame),
                    str(gt_s),
                    str(gt_e),
                )
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_instances(entries: list[ManifestEntry]) -> list[VideoInstance]:
    out = []
    for e in entries:
        feats = FrameFeatures(e.video_id, read_feature_file(e.feature_path))
        qmat = read_feature_file(e.query_path)
        query = QueryEmbedding(e.query_id, qmat[0])
        out.append(VideoInstance(feats, query, e.label()))
    return out


# --- config files -------------------------------------------------------------------

def _parse_config_value(name: str, ftype, text: str, where: str):
    text = text.strip()
    try:
        if ftype is float:
            return float(text)
        if ftype is int:
            return int(text)
        if ftype is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype == tuple[float, float, float]:
            parts = [float(p) for p in text.split(",")]
            if len(parts) != 3:
                raise ValueError(f"need 3 comma-separated values, got {len(parts)}")
            return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {name}: {exc}") from None
    raise ConfigError(f"{where}: no parser for field {name}")


def parse_config_text(text: str, origin: str = "<config>") -> Config:
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    # annotations may arrive as strings under deferred evaluation
    resolved = {
        "alpha": float, "tau": float, "lambda1": float, "lambda2": float,
        "L": int, "K": int, "beta": float, "merge_stop_threshold": float,
        "loss_weights": tuple[float, float, float], "learning_rate": float,
        "seed": int, "downweight_once": bool, "lr_decay_factor": float,
        "lr_decay_every": int, "fps": float,
    }
    assert set(resolved) == set(fields), "config parser out of sync with Config"
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in resolved:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        overrides[key] = _parse_config_value(key, resolved[key], value, f"{origin}:{lineno}")
    return Config(**overrides)


def load_config(path) -> Config:
    path = Path(path)
    return parse_config_text(path.read_text(), origin=str(path))


def apply_config_overrides(cfg: Config, assignments: list[str]) -> Config:
    """Apply `key=value` strings on top of an existing Config."""
    if not assignments:
        return cfg
    text = "\n".join(a.replace("=", " = ", 1) for a in assignments)
    merged = dataclasses.asdict(cfg)
    override_cfg = parse_config_text(text, origin="<override>")
    for a in assignments:
        key = a.partition("=")[0].strip()
        merged[key] = getattr(override_cfg, key)
    return Config(**merged)


# --- loss log and predictions --------------------------------------------------------

def format_loss_line(epoch: int, report) -> str:
    return (
        f"{epoch} {report.rank_loss:.6f} {report.inter_loss:.6f} "
        f"{report.intra_loss:.6f} {report.total:.6f}"
    )


def format_prediction_line(video_id: str, span: tuple[int, int], confidence: float) -> str:
    return f"{video_id}\t{span[0]}\t{span[1]}\t{confidence:.6f}"


# --- synthetic data -------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 100
    n_frames: int = 32
    dim: int = 16
    n_segments_per_video: int = 4
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_videos, self.n_frames, self.dim, self.n_segments_per_video) < 1:
            raise InvalidInputError("all synthetic sizes must be positive")
        if self.n_segments_per_video > self.n_frames:
            raise InvalidInputError(
                f"{self.n_segments_per_video} segments cannot fit in "
                f"{self.n_frames} frames"
            )
        if self.noise_sigma < 0:
            raise InvalidInputError(f"noise_sigma must be non-negative")


def synth_generate(scfg: SynthConfig, out_dir) -> tuple[Path, list[ManifestEntry]]:
    """Write a synthetic dataset and its manifest; deterministic in the seed.

    Each video is a random contiguous partition into segments, one unit
    concept vector per segment, frames = own concept + Gaussian noise. The
    query is the target segment's concept plus independent noise, the label
    a uniform frame inside the target, the ground truth the whole segment.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "queries").mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    F, d, S = scfg.n_frames, scfg.dim, scfg.n_segments_per_video
    for v in range(scfg.n_videos):
        rng = np.random.default_rng([scfg.seed, v])
        video_id = f"v{v:04d}"
        # even split: segment lengths differ by at most one frame
        bounds = [(i * F) // S for i in range(S + 1)]
        segments = [(bounds[i], bounds[i + 1] - 1) for i in range(S)]
        concepts = rng.standard_normal((S, d))
        concepts /= np.maximum(np.linalg.norm(concepts, axis=1, keepdims=True), 1e-12)
        frames = np.empty((F, d))
        for si, (s, e) in enumerate(segments):
            frames[s : e + 1] = concepts[si]
        frames += scfg.noise_sigma * rng.standard_normal((F, d))
        target = int(rng.integers(S))
        query = concepts[target] + scfg.noise_sigma * rng.standard_normal(d)
        ts, te = segments[target]
        labeled = int(rng.integers(ts, te + 1))
        fpath = out_dir / "features" / f"{video_id}.bin"
        qpath = out_dir / "queries" / f"{video_id}.bin"
        write_feature_file(fpath, frames)
        write_feature_file(qpath, query.reshape(1, d))
        entries.append(
            ManifestEntry(
                video_id=video_id,
                feature_path=fpath,
                query_id=f"q{v:04d}",
                query_path=qpath,
                labeled_frame=labeled,
                gt_span=(ts, te),
            )
        )
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, entries)
    return manifest_path, entries
