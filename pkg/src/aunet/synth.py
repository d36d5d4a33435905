"""Deterministic synthetic face-sequence generator.

Each subject is a jittered instance of a canonical 68-point face template.
Per session, every AU carries a latent activation in [0, 1] that evolves as
a smooth mean-reverting random walk (bounded step size, so neighboring
frames are informative about each other); the frame label is latent >= 0.5.
An active AU both deforms its nearby landmarks and renders an oriented
intensity blob at its rule-table region center, with per-frame amplitude
noise, so a single frame is informative but imperfect near the threshold.
The whole face also drifts around the canvas frame to frame, which keeps
absolute image position uninformative and makes landmark-adaptive cropping
matter.

Correlated AU pairs (cheek raiser and lip corner puller, the classic
smile pair) share a latent driver. Output trees are byte-identical for
identical seeds: per-session generators derive from the master seed and
all files are written with fixed formatting.

Layout on disk:

    out_dir/manifest.json
    out_dir/sub{S}/ses{E}/frame{F:04d}.pgm      8-bit binary PGM
    out_dir/sub{S}/ses{E}/landmarks.csv         frame,x0,y0,...,x67,y67
    out_dir/sub{S}/ses{E}/labels.csv            frame,au1,au2,...
    out_dir/sub{S}/ses{E}/latents.csv           frame,au1,...  (synthetic only)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry

LABEL_THRESHOLD = 0.5
PATTERN_SIGMA_ALONG = 2.2
PATTERN_SIGMA_ACROSS = 1.1
MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


@dataclass
class SynthConfig:
    subjects: int = 6
    sessions: int = 2
    frames: int = 120
    image_size: tuple = (40, 40)
    au_list: tuple = geometry.BP4D_AUS
    prevalence: tuple = (0.45, 0.25, 0.30, 0.50, 0.45, 0.40, 0.50, 0.35, 0.15, 0.30, 0.15, 0.20)
    contrast: float = 0.60
    observation_noise: float = 0.12
    walk_step: float = 0.05
    walk_pull: float = 0.06
    drift_step: float = 0.8
    drift_limit: float = 4.0
    subject_scale_jitter: float = 0.08
    landmark_jitter: float = 0.4
    correlated_pairs: tuple = ((6, 12),)
    driver_weight: float = 0.45

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.au_list = tuple(self.au_list)
        self.prevalence = tuple(self.prevalence)
        self.correlated_pairs = tuple(tuple(p) for p in self.correlated_pairs)
        if len(self.prevalence) != len(self.au_list):
            raise ValueError(f"{len(self.prevalence)} prevalence values for {len(self.au_list)} AUs")


def face_template() -> np.ndarray:
    """Canonical 68-point layout in a unit box, x right, y down."""
    pts = np.zeros((68, 2))
    # jaw 0-16: open arc from left temple over the chin to right temple
    theta = np.linspace(np.pi, 2 * np.pi, 17)
    pts[0:17, 0] = 0.5 + 0.40 * np.cos(theta)
    pts[0:17, 1] = 0.42 - 0.52 * np.sin(theta)
    # brows 17-21 (left), 22-26 (right)
    bx = np.linspace(0.18, 0.42, 5)
    pts[17:22, 0] = bx
    pts[17:22, 1] = 0.28 - 0.03 * np.sin(np.linspace(0, np.pi, 5))
    pts[22:27, 0] = 1.0 - bx[::-1]
    pts[22:27, 1] = pts[17:22, 1][::-1]
    # nose bridge 27-30 and nostril line 31-35
    pts[27:31, 0] = 0.5
    pts[27:31, 1] = np.linspace(0.36, 0.52, 4)
    pts[31:36, 0] = np.linspace(0.42, 0.58, 5)
    pts[31:36, 1] = 0.58
    # eyes 36-41 (left, 36 outer), 42-47 (right, 45 outer)
    def eye(cx):
        return np.array([
            (cx - 0.065, 0.36), (cx - 0.03, 0.345), (cx + 0.03, 0.345),
            (cx + 0.065, 0.36), (cx + 0.03, 0.375), (cx - 0.03, 0.375),
        ])
    pts[36:42] = eye(0.30)
    # right eye runs inner -> outer: 42 nearest the nose, 45 the outer corner
    pts[42:48] = np.array([
        (0.635, 0.36), (0.67, 0.345), (0.73, 0.345),
        (0.765, 0.36), (0.73, 0.375), (0.67, 0.375),
    ])
    # mouth outer 48-59 and inner 60-67
    mouth = np.array([
        (0.36, 0.74), (0.41, 0.715), (0.46, 0.705), (0.50, 0.71), (0.54, 0.705),
        (0.59, 0.715), (0.64, 0.74), (0.59, 0.77), (0.54, 0.785), (0.50, 0.79),
        (0.46, 0.785), (0.41, 0.77),
    ])
    pts[48:60] = mouth
    inner = mouth * 0.6 + np.array([0.5, 0.745]) * 0.4
    pts[60:68] = inner[[0, 2, 3, 4, 6, 8, 9, 10]]
    return pts


def pattern_angle(au_position: int) -> float:
    """Orientation of an AU's intensity pattern; three angles cycle by list position."""
    return (au_position % 3) * np.pi / 3.0


def pattern_kind(au_position: int) -> int:
    """0 = even blob, 1 = signed edge; alternating kinds keep AUs that share a
    region center (lip tightener vs presser) linearly separable."""
    return au_position % 2


def render_pattern(image: np.ndarray, center: np.ndarray, amplitude: float, angle: float,
                   kind: int = 0) -> None:
    """Add one oriented pattern in place, clipped to the canvas."""
    h, w = image.shape
    cx, cy = center
    reach = int(3 * PATTERN_SIGMA_ALONG) + 1
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / PATTERN_SIGMA_ALONG
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / PATTERN_SIGMA_ACROSS
    envelope = np.exp(-0.5 * u * u - 0.5 * v * v)
    if kind == 1:
        envelope = envelope * u * np.exp(0.5)  # unit peak magnitude at u = 1
    image[y0:y1, x0:x1] += amplitude * envelope


_AU_LANDMARK_PULL = {
    1: ((21, 22), (0.0, -1.0)),
    2: ((18, 25), (0.0, -1.0)),
    4: ((21, 22), (0.0, 0.8)),
    6: ((41, 46), (0.0, 0.6)),
    7: ((40, 47), (0.0, 0.5)),
    10: ((50, 52), (0.0, -0.8)),
    12: ((48, 54), (0.9, -0.7)),
    14: ((48, 54), (1.0, 0.0)),
    15: ((48, 54), (0.0, 0.9)),
    17: ((57, 8), (0.0, -0.8)),
    23: ((51, 57), (0.0, 0.3)),
    24: ((51, 57), (0.0, 0.3)),
}


def deform_landmarks(points: np.ndarray, au_list: Sequence[int], latents: np.ndarray,
                     scale: float) -> np.ndarray:
    """Shift the landmarks each active AU pulls on, proportional to activation."""
    out = points.copy()
    for au, latent in zip(au_list, latents):
        pull = _AU_LANDMARK_PULL.get(au)
        if pull is None or latent <= 0.0:
            continue
        indices, (dx, dy) = pull
        # mirror the x component on the left-side landmark of the pair
        out[indices[0], 0] -= dx * latent * scale
        out[indices[1], 0] += dx * latent * scale
        out[list(indices), 1] += dy * latent * scale
    return out


def amplitude_ramp(latent: np.ndarray) -> np.ndarray:
    """Monotone map from activation to rendered contrast, steepest at the
    label threshold so near-boundary frames stay separable despite noise."""
    t = np.clip((latent - 0.35) / 0.30, 0.0, 1.0)
    return 0.4 * latent + 0.6 * (3.0 * t * t - 2.0 * t * t * t)


def latent_trajectories(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-AU activation walks in [0, 1]; per-step change stays below 0.2."""
    n_aus = len(config.au_list)
    # mean-reversion targets placed so time spent above 0.5 approximates the
    # requested prevalence (probit via the logistic approximation)
    prev = np.clip(np.asarray(config.prevalence), 0.02, 0.98)
    sd = config.walk_step / np.sqrt(2.0 * config.walk_pull)
    mu = 0.5 + sd * np.log(prev / (1.0 - prev)) / 1.702
    mu = np.clip(mu, 0.05, 0.95)
    position = {au: i for i, au in enumerate(config.au_list)}
    driver_of = {}
    for pair_index, pair in enumerate(config.correlated_pairs):
        for au in pair:
            if au in position:
                driver_of[position[au]] = pair_index
    drivers = np.empty((config.frames, len(config.correlated_pairs) or 1))
    base = np.empty((config.frames, n_aus))
    d = rng.uniform(0.2, 0.8, size=drivers.shape[1])
    x = rng.uniform(0.0, 1.0, size=n_aus) * 0.5 + mu * 0.5
    for t in range(config.frames):
        drivers[t] = d
        base[t] = x
        step_d = rng.normal(0.0, config.walk_step, size=d.shape) + config.walk_pull * (0.5 - d)
        d = np.clip(d + np.clip(step_d, -0.19, 0.19), 0.0, 1.0)
        step = rng.normal(0.0, config.walk_step, size=n_aus) + config.walk_pull * (mu - x)
        x = np.clip(x + np.clip(step, -0.19, 0.19), 0.0, 1.0)
    latents = base.copy()
    w = config.driver_weight
    for col, pair_index in driver_of.items():
        latents[:, col] = np.clip((1 - w) * base[:, col] + w * drivers[:, pair_index], 0.0, 1.0)
    return latents


def render_frame(config: SynthConfig, points: np.ndarray, centers: np.ndarray,
                 region_aus: Sequence[tuple], latents: np.ndarray, amp_noise: np.ndarray) -> np.ndarray:
    """One grayscale frame: face scaffold plus one blob per active AU region."""
    h, w = config.image_size
    image = np.full((h, w), 0.25)
    ys, xs = np.mgrid[0:h, 0:w]
    face_center = points.mean(axis=0)
    spread = max(np.ptp(points[:, 0]), np.ptp(points[:, 1])) * 0.7 + 1e-9
    dist2 = ((xs - face_center[0]) ** 2 + (ys - face_center[1]) ** 2) / spread ** 2
    image += 0.12 * np.exp(-dist2)
    # faint fixed anatomy so the backbone has anchors: eyes and mouth line
    for anchor in (points[36:42].mean(axis=0), points[42:48].mean(axis=0)):
        render_pattern(image, anchor, -0.08, 0.0)
    render_pattern(image, points[48:60].mean(axis=0), -0.04, 0.0)
    position = {au: i for i, au in enumerate(config.au_list)}
    ramped = amplitude_ramp(latents)
    for region_index, aus in enumerate(region_aus):
        for au in aus:
            col = position[au]
            amplitude = config.contrast * max(ramped[col] * (1.0 + amp_noise[col]), 0.0)
            if amplitude <= 0.01:
                continue
            render_pattern(image, centers[region_index], amplitude, pattern_angle(col),
                           pattern_kind(col))
    return np.clip(image, 0.0, 1.0)


# ----------------------------------------------------------------------
# file formats


def write_pgm(path, image: np.ndarray) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def _write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def session_seed(master_seed: int, subject: int, session: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(subject, session)))


def generate_dataset(config: SynthConfig, seed: int, out_dir) -> str:
    """Write a full synthetic dataset tree; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rules = geometry.default_rules()
    region_aus = [r.au_links for r in sorted(rules, key=lambda r: r.rule_id)]
    template = face_template()
    h, w = config.image_size
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "au_list": list(config.au_list),
        "schema_size": geometry.DEFAULT_SCHEMA_SIZE,
        "image_size": [h, w],
        "label_file": "labels.csv",
        "subjects": [],
    }
    au_headers = [f"au{a}" for a in config.au_list]
    for s in range(config.subjects):
        subject_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s,)))
        scale = min(h, w) * 0.78 * (1.0 + subject_rng.uniform(-1, 1) * config.subject_scale_jitter)
        base_center = np.array([w / 2.0, h / 2.0]) + subject_rng.uniform(-1.5, 1.5, size=2)
        identity_jitter = subject_rng.normal(0.0, config.landmark_jitter, size=(68, 2))
        subject_entry = {"id": f"sub{s}", "sessions": []}
        for e in range(config.sessions):
            rng = session_seed(seed, s, e)
            sess_dir = os.path.join(out_dir, f"sub{s}", f"ses{e}")
            os.makedirs(sess_dir, exist_ok=True)
            latents = latent_trajectories(config, rng)
            drift = np.zeros(2)
            landmark_rows, label_rows, latent_rows = [], [], []
            frame_ids = list(range(config.frames))
            for t in frame_ids:
                drift = np.clip(drift + rng.normal(0.0, config.drift_step, size=2),
                                -config.drift_limit, config.drift_limit)
                pts = (template - 0.5) * scale + base_center + identity_jitter + drift
                pts = deform_landmarks(pts, config.au_list, latents[t], scale * 0.03)
                pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
                pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
                landmarks = geometry.LandmarkSet(pts)
                centers = geometry.compute_au_centers(landmarks, rules, (h, w)).centers
                amp_noise = np.clip(rng.normal(0.0, config.observation_noise, size=len(config.au_list)),
                                    -0.8, 0.8)
                image = render_frame(config, pts, centers, region_aus, latents[t], amp_noise)
                write_pgm(os.path.join(sess_dir, f"frame{t:04d}.pgm"), image)
                landmark_rows.append([str(t)] + [f"{v:.4f}" for v in pts.reshape(-1)])
                labels = (latents[t] >= LABEL_THRESHOLD).astype(int)
                label_rows.append([str(t)] + [str(v) for v in labels])
                latent_rows.append([str(t)] + [f"{v:.6f}" for v in latents[t]])
            coord_header = [f"{axis}{i}" for i in range(68) for axis in ("x", "y")]
            _write_csv(os.path.join(sess_dir, "landmarks.csv"), ["frame"] + coord_header, landmark_rows)
            _write_csv(os.path.join(sess_dir, "labels.csv"), ["frame"] + au_headers, label_rows)
            _write_csv(os.path.join(sess_dir, "latents.csv"), ["frame"] + au_headers, latent_rows)
            subject_entry["sessions"].append({"id": f"ses{e}", "frames": frame_ids})
        manifest["subjects"].append(subject_entry)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path
