"""Dataset ingest: manifest-driven loading of frames, landmarks and labels.

The on-disk format is the one the synthetic generator emits, and real data
can be supplied in the same shape. Label files either hold binary columns
(``labels.csv``) or 0-5 intensity codes (``intensities.csv``), which are
binarized at a configurable threshold on the way in. All validation errors
name the offending file (and line where applicable).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .synth import read_pgm

DEFAULT_INTENSITY_THRESHOLD = 2


class DataError(ValueError):
    pass


@dataclass
class FrameRecord:
    subject: str
    session: str
    frame_id: int
    image: np.ndarray  # (1, H, W) float in [0, 1]
    landmarks: geometry.LandmarkSet
    labels: np.ndarray  # (num_aus,) int8
    latents: Optional[np.ndarray] = None

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.subject, self.session, self.frame_id)


@dataclass
class Dataset:
    frames: List[FrameRecord]
    au_list: tuple
    image_size: tuple
    schema_size: int = geometry.DEFAULT_SCHEMA_SIZE
    _window_cache: Dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.frames)

    @property
    def num_aus(self) -> int:
        return len(self.au_list)

    def subjects(self) -> List[str]:
        seen = []
        for f in self.frames:
            if f.subject not in seen:
                seen.append(f.subject)
        return seen

    def label_matrix(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = self.frames if indices is None else [self.frames[i] for i in indices]
        return np.stack([f.labels for f in rows]).astype(np.int8)

    def indices_of_subjects(self, subjects) -> List[int]:
        wanted = set(subjects)
        return [i for i, f in enumerate(self.frames) if f.subject in wanted]

    def sessions_of(self, indices: Sequence[int]) -> List[List[int]]:
        """Group the given frame indices into per-(subject, session) runs, in order."""
        groups: Dict[Tuple[str, str], List[int]] = {}
        for i in indices:
            f = self.frames[i]
            groups.setdefault((f.subject, f.session), []).append(i)
        return [sorted(g, key=lambda i: self.frames[i].frame_id) for _, g in sorted(groups.items())]

    def priors_of(self, index: int) -> List[int]:
        """Indices of same-session frames strictly earlier than the given frame."""
        f = self.frames[index]
        return [i for i, g in enumerate(self.frames)
                if g.subject == f.subject and g.session == f.session and g.frame_id < f.frame_id]

    def window_tops(self, indices: Sequence[int], grid_size: tuple,
                    rules: Sequence[geometry.AuCenterRule], window: int = 3) -> np.ndarray:
        """Top-left crop corners (len(indices), 20, 2) on the given feature grid, cached."""
        key = (grid_size, window, id(rules))
        cache = self._window_cache.setdefault(key, {})
        out = np.empty((len(indices), geometry.NUM_REGIONS, 2), dtype=np.intp)
        for row, i in enumerate(indices):
            tops = cache.get(i)
            if tops is None:
                wins = geometry.grid_windows(self.frames[i].landmarks, rules, self.image_size,
                                             grid_size, window)
                tops = np.array([w.top_left for w in wins], dtype=np.intp)
                cache[i] = tops
            out[row] = tops
        return out

    def images(self, indices: Sequence[int]) -> np.ndarray:
        return np.stack([self.frames[i].image for i in indices])


def _read_csv_rows(path, expect_cols: int):
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != expect_cols:
                raise DataError(f"{path}:{lineno}: expected {expect_cols} columns, got {len(parts)}")
            try:
                frame_id = int(parts[0])
                values = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            rows[frame_id] = values
    return header, rows


def load_dataset(manifest_path, intensity_threshold: int = DEFAULT_INTENSITY_THRESHOLD) -> Dataset:
    """Load a dataset tree; frames come back ordered by subject, session, frame id."""
    if not os.path.exists(manifest_path):
        raise DataError(f"missing file: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON: {exc}") from exc
    for key in ("au_list", "schema_size", "image_size", "subjects"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: manifest lacks required key {key!r}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    au_list = tuple(int(a) for a in manifest["au_list"])
    schema_size = int(manifest["schema_size"])
    image_size = tuple(int(v) for v in manifest["image_size"])
    n_aus = len(au_list)
    frames: List[FrameRecord] = []
    for subject in manifest["subjects"]:
        for session in subject["sessions"]:
            sess_dir = os.path.join(root, subject["id"], session["id"])
            lm_path = os.path.join(sess_dir, "landmarks.csv")
            _, lm_rows = _read_csv_rows(lm_path, 1 + 2 * schema_size)
            labels_path = os.path.join(sess_dir, "labels.csv")
            intensities_path = os.path.join(sess_dir, "intensities.csv")
            if os.path.exists(labels_path):
                _, label_rows = _read_csv_rows(labels_path, 1 + n_aus)
                binarize = False
                label_file = labels_path
            elif os.path.exists(intensities_path):
                _, label_rows = _read_csv_rows(intensities_path, 1 + n_aus)
                binarize = True
                label_file = intensities_path
            else:
                raise DataError(f"missing file: {labels_path} (or intensities.csv)")
            latents_path = os.path.join(sess_dir, "latents.csv")
            latent_rows = {}
            if os.path.exists(latents_path):
                _, latent_rows = _read_csv_rows(latents_path, 1 + n_aus)
            frame_ids = sorted(int(f) for f in session["frames"])
            for fid in frame_ids:
                image_path = os.path.join(sess_dir, f"frame{fid:04d}.pgm")
                if not os.path.exists(image_path):
                    raise DataError(f"missing file: {image_path}")
                image = read_pgm(image_path)
                if image.shape != image_size:
                    raise DataError(f"{image_path}: image is {image.shape}, manifest says {image_size}")
                if fid not in lm_rows:
                    raise DataError(f"{lm_path}: no landmark row for frame {fid}")
                if fid not in label_rows:
                    raise DataError(f"{label_file}: no label row for frame {fid}")
                points = np.array(lm_rows[fid], dtype=np.float64).reshape(schema_size, 2)
                landmarks = geometry.LandmarkSet(points, schema_size).clamped(image_size)
                raw = np.array(label_rows[fid])
                if binarize:
                    if ((raw < 0) | (raw > 5)).any():
                        raise DataError(f"{label_file}: intensity outside 0..5 for frame {fid}")
                    labels = (raw >= intensity_threshold).astype(np.int8)
                else:
                    if ((raw != 0) & (raw != 1)).any():
                        raise DataError(f"{label_file}: non-binary label for frame {fid}")
                    labels = raw.astype(np.int8)
                latents = np.array(latent_rows[fid]) if fid in latent_rows else None
                frames.append(FrameRecord(subject["id"], session["id"], fid,
                                          image[None, :, :], landmarks, labels, latents))
    frames.sort(key=lambda f: (f.subject, f.session, f.frame_id))
    return Dataset(frames, au_list, image_size, schema_size)
