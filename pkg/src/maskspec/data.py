"""Dataset manifests, run configs and spectrogram dump formats."""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .audio import read_wav, spectrogram, standardize

SEED_ENV = "MASKSPEC_SEED"
SPLITS = ("train", "eval")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    path: str
    labels: list[int]
    fold: int | None = None
    split: str = "train"
    sample_weight: float | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d)


def load_manifest(path: str | os.PathLike, num_classes: int | None = None, check_paths: bool = True) -> list[ManifestRecord]:
    """Read a JSON-lines manifest; relative clip paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                d = json.loads(line)
                rec = ManifestRecord(
                    path=str(d["path"]),
                    labels=[int(k) for k in d.get("labels", [])],
                    fold=int(d["fold"]) if d.get("fold") is not None else None,
                    split=d.get("split", "train"),
                    sample_weight=float(d["sample_weight"]) if d.get("sample_weight") is not None else None,
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from exc
            if rec.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}")
            clip = Path(rec.path)
            if not clip.is_absolute():
                rec.path = str(path.parent / clip)
            if check_paths and not Path(rec.path).is_file():
                raise FileNotFoundError(f"{path}:{lineno}: clip not found: {rec.path}")
            if num_classes is not None and any(not 0 <= k < num_classes for k in rec.labels):
                raise ManifestError(f"{path}:{lineno}: label out of range for {num_classes} classes")
            records.append(rec)
    return records


def write_manifest(path: str | os.PathLike, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_config(path: str | os.PathLike) -> dict:
    """YAML or JSON mapping; ``MASKSPEC_SEED`` overrides its ``seed``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a mapping")
    if os.environ.get(SEED_ENV):
        cfg["seed"] = int(os.environ[SEED_ENV])
    cfg["_base_dir"] = str(path.parent)
    return cfg


def resolve(cfg: dict, key: str, default: str | None = None) -> Path | None:
    value = cfg.get(key, default)
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def load_spectrogram(path: str | os.PathLike, channel: str = "mean", dtype=np.float32) -> np.ndarray:
    """Spectrogram for a manifest entry: a WAV goes through the frontend, ``.npy``/``.spec`` load directly."""
    suffix = Path(path).suffix.lower()
    if suffix == ".npy":
        return np.load(path).astype(dtype)
    if suffix == ".spec":
        return read_spectrogram_bin(path).astype(dtype)
    return spectrogram(read_wav(path), channel, dtype)


def load_waveform(path: str | os.PathLike, channel: str = "mean") -> np.ndarray:
    return standardize(read_wav(path), channel).mono


# --- spectrogram dumps -----------------------------------------------------


def write_spectrogram_bin(path: str | os.PathLike, values: np.ndarray) -> None:
    """``u32`` header length, JSON header ``{"shape", "dtype"}``, float32 LE payload."""
    values = np.ascontiguousarray(values, dtype="<f4")
    header = json.dumps({"shape": list(values.shape), "dtype": "float32"}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(values.tobytes())


def read_spectrogram_bin(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<I", blob, 0)
    header = json.loads(blob[4 : 4 + hlen])
    if header.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')}")
    return np.frombuffer(blob, dtype="<f4", offset=4 + hlen).reshape(header["shape"]).astype(np.float32)


def write_matrix_csv(path: str | os.PathLike, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.6g")


def to_pgm_bytes(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    """8-bit binary PGM with frequency on the vertical axis (low frequencies at the bottom)."""
    img = np.asarray(values, dtype=np.float64).T[::-1]
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    scaled = np.zeros_like(img) if hi <= lo else (np.clip(img, lo, hi) - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def write_pgm(path: str | os.PathLike, values: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    Path(path).write_bytes(to_pgm_bytes(values, lo, hi))


def write_report(json_path: str | os.PathLike, report: dict, csv_path: str | os.PathLike | None = None) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "average_precision"])
            for k, ap in enumerate(report.get("per_class_ap", [])):
                w.writerow([k, "" if ap is None else repr(ap)])
            for key in ("mAP", "accuracy"):
                if report.get(key) is not None:
                    w.writerow([key, repr(report[key])])


def stack_spectrograms(records: Sequence[ManifestRecord], channel: str = "mean") -> np.ndarray:
    specs = [load_spectrogram(r.path, channel) for r in records]
    shapes = {s.shape for s in specs}
    if len(shapes) != 1:
        raise ManifestError(f"spectrogram shapes differ across the manifest: {sorted(shapes)}")
    return np.stack(specs)
