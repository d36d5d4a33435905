"""Landmark-driven region-of-interest geometry.

Facial action units are anchored to muscles, so each of the 20 regions of
interest is placed at a facial landmark plus a muscle-informed offset
measured in inter-ocular-distance units. Region centers map onto the
convolutional feature grid by the image/grid size ratio, and crop windows
are shifted inward at the edges so every region yields a full-size patch.

The default rule table targets the 68-point landmark convention (jaw 0-16,
brows 17-26, nose 27-35, eyes 36-47, mouth 48-67) and covers the 12
standard AUs: 1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_SCHEMA_SIZE = 68
NUM_REGIONS = 20
BP4D_AUS = (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24)
DISFA_AUS = (1, 2, 4, 6, 9, 12, 25, 26)

# outer eye corners in the 68-point schema; their distance normalizes offsets
LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45


class GeometryError(ValueError):
    pass


@dataclass
class LandmarkSet:
    """Per-frame 2-d landmark coordinates in image pixels (x right, y down)."""

    points: np.ndarray
    schema_size: int = DEFAULT_SCHEMA_SIZE

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (self.schema_size, 2):
            raise GeometryError(
                f"expected {self.schema_size} landmark rows of (x, y), got array of shape {self.points.shape}")

    def clamped(self, image_size: tuple) -> "LandmarkSet":
        h, w = image_size
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
        return LandmarkSet(pts, self.schema_size)

    def inter_ocular(self, pair: tuple = (LEFT_EYE_OUTER, RIGHT_EYE_OUTER)) -> float:
        a, b = pair
        return float(np.hypot(*(self.points[b] - self.points[a])))


@dataclass(frozen=True)
class AuCenterRule:
    """One region: a base landmark, an offset in inter-ocular units, and AU links."""

    rule_id: int
    base_landmark: int
    offset: tuple
    au_links: tuple
    symmetry_partner: Optional[int] = None


@dataclass
class RoiCenterSet:
    """The 20 region centers for one frame, in image coordinates."""

    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.shape != (NUM_REGIONS, 2):
            raise GeometryError(f"expected {NUM_REGIONS} centers, got shape {self.centers.shape}")


@dataclass(frozen=True)
class GridWindow:
    """Inclusive row/col bounds of a square window on the feature grid."""

    row_range: tuple
    col_range: tuple

    @property
    def top_left(self) -> tuple:
        return self.row_range[0], self.col_range[0]

    @property
    def size(self) -> int:
        return self.row_range[1] - self.row_range[0] + 1


# one rule per region: (rule_id, base_landmark, dx, dy, au_links, partner)
_DEFAULT_RULE_ROWS = (
    (1, 21, 0.00, -0.18, (1,), 2),     # inner brow, left
    (2, 22, 0.00, -0.18, (1,), 1),     # inner brow, right
    (3, 18, 0.00, -0.18, (2,), 4),     # outer brow, left
    (4, 25, 0.00, -0.18, (2,), 3),     # outer brow, right
    (5, 21, 0.14, 0.14, (4,), 6),      # brow lowerer, toward glabella
    (6, 22, -0.14, 0.14, (4,), 5),
    (7, 41, 0.00, 0.30, (6,), 8),      # cheek raiser, below lower eyelid
    (8, 46, 0.00, 0.30, (6,), 7),
    (9, 40, 0.00, 0.10, (7,), 10),     # lid tightener
    (10, 47, 0.00, 0.10, (7,), 9),
    (11, 50, 0.00, -0.12, (10,), 12),  # upper lip raiser
    (12, 52, 0.00, -0.12, (10,), 11),
    (13, 48, 0.00, 0.00, (12,), 14),   # lip corner puller, at the corner
    (14, 54, 0.00, 0.00, (12,), 13),
    (15, 48, -0.16, 0.00, (14,), 16),  # dimpler, outside the corner
    (16, 54, 0.16, 0.00, (14,), 15),
    (17, 48, 0.00, 0.20, (15,), 18),   # lip corner depressor
    (18, 54, 0.00, 0.20, (15,), 17),
    (19, 57, 0.00, 0.20, (17,), None),       # chin raiser
    (20, 51, 0.00, 0.05, (23, 24), None),    # lip tightener / pressor, mouth center
)


def default_rules() -> tuple:
    return tuple(AuCenterRule(r, b, (dx, dy), aus, p) for r, b, dx, dy, aus, p in _DEFAULT_RULE_ROWS)


def validate_rules(rules: Sequence[AuCenterRule], au_list: Sequence[int] = BP4D_AUS,
                   schema_size: int = DEFAULT_SCHEMA_SIZE) -> None:
    if len(rules) != NUM_REGIONS:
        raise GeometryError(f"rule table must hold exactly {NUM_REGIONS} rules, got {len(rules)}")
    by_id = {r.rule_id: r for r in rules}
    if sorted(by_id) != list(range(1, NUM_REGIONS + 1)):
        raise GeometryError(f"rule ids must be 1..{NUM_REGIONS} without repeats, got {sorted(by_id)}")
    for r in rules:
        if not 0 <= r.base_landmark < schema_size:
            raise GeometryError(f"rule {r.rule_id}: base landmark {r.base_landmark} outside schema of {schema_size}")
        if r.symmetry_partner is not None:
            partner = by_id.get(r.symmetry_partner)
            if partner is None or partner.symmetry_partner != r.rule_id:
                raise GeometryError(f"rule {r.rule_id}: symmetry partner {r.symmetry_partner} is not mutual")
    covered = {au for r in rules for au in r.au_links}
    missing = [au for au in au_list if au not in covered]
    if missing:
        raise GeometryError(f"no rule serves AU(s) {missing}")


def regions_for_au(rules: Sequence[AuCenterRule], au: int) -> tuple:
    """Rule ids linked to an AU, ascending; 1 or 2 regions for the default table."""
    linked = tuple(sorted(r.rule_id for r in rules if au in r.au_links))
    if not linked:
        raise GeometryError(f"AU {au} has no linked region in the rule table")
    return linked


def compute_au_centers(landmarks: LandmarkSet, rules: Sequence[AuCenterRule],
                       image_size: tuple) -> RoiCenterSet:
    """Place each region at base landmark + offset x inter-ocular distance.

    Centers are clamped to image bounds. Degenerate landmark sets with
    coincident eye corners are rejected because the offset unit vanishes.
    """
    iod = landmarks.inter_ocular()
    if iod <= 0.0:
        raise GeometryError("degenerate landmarks: inter-ocular distance is zero")
    h, w = image_size
    centers = np.empty((NUM_REGIONS, 2))
    for r in sorted(rules, key=lambda rr: rr.rule_id):
        base = landmarks.points[r.base_landmark]
        x = base[0] + r.offset[0] * iod
        y = base[1] + r.offset[1] * iod
        centers[r.rule_id - 1] = (min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0))
    return RoiCenterSet(centers)


def map_to_feature_grid(point: tuple, image_size: tuple, grid_size: tuple) -> tuple:
    """Image point -> (row, col) on the feature grid by the size ratio, floored."""
    x, y = point
    h_img, w_img = image_size
    h, w = grid_size
    if not (0.0 <= x <= w_img - 1 and 0.0 <= y <= h_img - 1):
        raise GeometryError(f"point ({x}, {y}) outside {h_img}x{w_img} image")
    return math.floor(y * h / h_img), math.floor(x * w / w_img)


def crop_window(center: tuple, window_size: int = 3, grid_size: tuple = (14, 14)) -> GridWindow:
    """Full-size square window around a grid cell, shifted inward at edges."""
    h, w = grid_size
    if window_size > min(h, w):
        raise GeometryError(f"window of {window_size} exceeds {h}x{w} grid")
    row, col = center
    if not (0 <= row < h and 0 <= col < w):
        raise GeometryError(f"center {center} outside {h}x{w} grid")
    r0 = min(max(row - (window_size - 1) // 2, 0), h - window_size)
    c0 = min(max(col - (window_size - 1) // 2, 0), w - window_size)
    return GridWindow((r0, r0 + window_size - 1), (c0, c0 + window_size - 1))


def grid_windows(landmarks: LandmarkSet, rules: Sequence[AuCenterRule], image_size: tuple,
                 grid_size: tuple, window_size: int = 3) -> list:
    """All 20 crop windows for one frame, ordered by rule id."""
    centers = compute_au_centers(landmarks, rules, image_size)
    return [crop_window(map_to_feature_grid(tuple(c), image_size, grid_size), window_size, grid_size)
            for c in centers.centers]


# ----------------------------------------------------------------------
# rule-table file: one rule per line,
#   rule_id base_landmark dx dy au_list symmetry_partner
# with comma-separated au_list and '-' for no partner


def format_rules(rules: Sequence[AuCenterRule]) -> str:
    lines = ["# rule_id base_landmark dx dy au_list symmetry_partner"]
    for r in sorted(rules, key=lambda rr: rr.rule_id):
        partner = "-" if r.symmetry_partner is None else str(r.symmetry_partner)
        aus = ",".join(str(a) for a in r.au_links)
        lines.append(f"{r.rule_id} {r.base_landmark} {r.offset[0]:g} {r.offset[1]:g} {aus} {partner}")
    return "\n".join(lines) + "\n"


def parse_rules(text: str, au_list: Sequence[int] = BP4D_AUS,
                schema_size: int = DEFAULT_SCHEMA_SIZE) -> tuple:
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise GeometryError(f"rule table line {lineno}: expected 6 fields, got {len(parts)}: {raw!r}")
        try:
            rule_id = int(parts[0])
            base = int(parts[1])
            dx, dy = float(parts[2]), float(parts[3])
            aus = tuple(int(a) for a in parts[4].split(","))
            partner = None if parts[5] == "-" else int(parts[5])
        except ValueError as exc:
            raise GeometryError(f"rule table line {lineno}: {exc}") from exc
        rules.append(AuCenterRule(rule_id, base, (dx, dy), aus, partner))
    rules = tuple(rules)
    validate_rules(rules, au_list=au_list, schema_size=schema_size)
    return rules


def load_rules(path, au_list: Sequence[int] = BP4D_AUS) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(fh.read(), au_list=au_list)


def save_rules(path, rules: Sequence[AuCenterRule]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_rules(rules))
