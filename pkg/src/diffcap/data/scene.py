"""Procedural 2-D scenes: a 3x3 grid of simple objects rendered to 8-bit RGB."""

from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw


class ChangeType(str, Enum):
    VIEWPOINT = "viewpoint"
    ILLUMINATION = "illumination"
    ADDITION = "addition"
    DISAPPEARANCE = "disappearance"
    REMOVAL = "removal"
    SUBSTITUTION = "substitution"
    SIZE = "size"
    COLOR = "color"
    ORIENTATION = "orientation"
    POSE = "pose"
    OCR = "ocr"
    COUNTING = "counting"

    def __str__(self):
        return self.value


# distractor-like categories: never declared on their own
GLOBAL_CHANGES = frozenset({ChangeType.VIEWPOINT, ChangeType.ILLUMINATION})

SHAPES = ("square", "circle", "triangle", "glyph")
COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 210, 40),
    "purple": (150, 60, 190),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "white": (235, 235, 235),
}
SIZES = ("small", "large")
ORIENTATIONS = ("up", "right", "down", "left")
POSES = ("raised", "lowered")
GRID = 3
BACKGROUND = (52, 52, 64)

_LETTERS = {
    "a": (".###.", "#...#", "#####", "#...#", "#...#"),
    "e": ("#####", "#....", "####.", "#....", "#####"),
    "f": ("#####", "#....", "####.", "#....", "#...."),
    "h": ("#...#", "#...#", "#####", "#...#", "#...#"),
    "l": ("#....", "#....", "#....", "#....", "#####"),
    "t": ("#####", "..#..", "..#..", "..#..", "..#.."),
    "x": ("#...#", ".#.#.", "..#..", ".#.#.", "#...#"),
    "z": ("#####", "...#.", "..#..", ".#...", "#####"),
}
LETTERS = tuple(sorted(_LETTERS))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    orientation: str
    cell: Tuple[int, int]
    letter: Optional[str] = None
    pose: Optional[str] = None

    @property
    def kind(self) -> Tuple[str, str]:
        return (self.shape, self.color)

    def moved(self, cell) -> "SceneObject":
        return replace(self, cell=tuple(cell))

    def same_except_cell(self, other: "SceneObject") -> bool:
        return replace(self, cell=other.cell) == other


@dataclass(frozen=True)
class SceneSpec:
    objects: Tuple[SceneObject, ...]
    brightness: float = 1.0
    offset: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        if not 0.5 <= self.brightness <= 1.5:
            raise ValueError(f"brightness {self.brightness} outside [0.5, 1.5]")
        if any(abs(v) > 2 for v in self.offset):
            raise ValueError(f"viewpoint offset {self.offset} outside [-2, 2]")

    def by_cell(self) -> Dict[Tuple[int, int], SceneObject]:
        return {o.cell: o for o in self.objects}

    def free_cells(self):
        used = {o.cell for o in self.objects}
        return [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in used]

    def count(self, kind) -> int:
        return sum(1 for o in self.objects if o.kind == kind)

    def with_objects(self, objects) -> "SceneSpec":
        return replace(self, objects=tuple(sorted(objects, key=lambda o: o.cell)))

    def to_dict(self):
        return asdict(self)


def sample_object(rng: np.random.Generator, cell, shape=None, color=None) -> SceneObject:
    shape = shape or SHAPES[rng.integers(len(SHAPES))]
    color = color or list(COLORS)[rng.integers(len(COLORS))]
    size = SIZES[rng.integers(len(SIZES))]
    if shape == "glyph":
        return SceneObject(shape, color, size, "up", tuple(cell),
                           letter=LETTERS[rng.integers(len(LETTERS))],
                           pose=POSES[rng.integers(len(POSES))])
    return SceneObject(shape, color, size, ORIENTATIONS[rng.integers(4)], tuple(cell))


def sample_scene(rng: np.random.Generator, min_objects: int = 2, max_objects: int = 8) -> SceneSpec:
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = [(r, c) for r in range(GRID) for c in range(GRID)]
    order = rng.permutation(len(cells))[:n]
    objs = [sample_object(rng, cells[i]) for i in sorted(order)]
    brightness = float(np.round(rng.uniform(0.8, 1.2), 4))
    offset = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
    return SceneSpec(tuple(objs), brightness, offset)


_DIRS = {"up": (0, -1), "right": (1, 0), "down": (0, 1), "left": (-1, 0)}


def _draw_object(draw: ImageDraw.ImageDraw, obj: SceneObject, cx: int, cy: int):
    rgb = COLORS[obj.color]
    dark = tuple(v // 4 for v in rgb)
    if obj.shape == "glyph":
        scale = 2 if obj.size == "small" else 3
        x0, y0 = cx - (5 * scale) // 2, cy - (5 * scale) // 2
        for r, row in enumerate(_LETTERS[obj.letter]):
            for c, b in enumerate(row):
                if b == "#":
                    draw.rectangle([x0 + c * scale, y0 + r * scale,
                                    x0 + (c + 1) * scale - 1, y0 + (r + 1) * scale - 1], fill=rgb)
        # two-segment arm on the right edge; its bend encodes the pose
        ax, ay = x0 + 5 * scale, cy
        ex, ey = ax + scale * 2, ay
        tip = (ex + scale, ey - 2 * scale) if obj.pose == "raised" else (ex + scale, ey + 2 * scale)
        draw.line([(ax, ay), (ex, ey), tip], fill=rgb, width=max(1, scale - 1))
        return
    half = 4 if obj.size == "small" else 7
    box = [cx - half, cy - half, cx + half, cy + half]
    dx, dy = _DIRS[obj.orientation]
    if obj.shape == "square":
        draw.rectangle(box, fill=rgb)
    elif obj.shape == "circle":
        draw.ellipse(box, fill=rgb)
    else:
        apex = (cx + dx * half, cy + dy * half)
        px, py = -dy, dx
        base = [(cx - dx * half + px * half, cy - dy * half + py * half),
                (cx - dx * half - px * half, cy - dy * half - py * half)]
        draw.polygon([apex, *base], fill=rgb)
        return
    # orientation tick for squares and circles
    draw.line([(cx, cy), (cx + dx * half, cy + dy * half)], fill=dark, width=2)


def render(scene: SceneSpec, size: int = 64) -> np.ndarray:
    """Render to an (size, size, 3) uint8 array; pure function of the spec."""
    img = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(img)
    ox, oy = scene.offset
    step = size // 8
    # floor grid lines make viewpoint shifts visible away from objects
    for k in range(-1, 10):
        draw.line([(k * step + ox, 0), (k * step + ox, size)], fill=(62, 62, 76))
        draw.line([(0, k * step + oy), (size, k * step + oy)], fill=(62, 62, 76))
    cell = (size - 4) // GRID
    for obj in scene.objects:
        r, c = obj.cell
        cx = 2 + c * cell + cell // 2 + ox
        cy = 2 + r * cell + cell // 2 + oy
        _draw_object(draw, obj, cx, cy)
    arr = np.asarray(img, dtype=np.float64) * scene.brightness
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def location_phrase(cell) -> str:
    rows = ("top", "middle", "bottom")
    cols = ("left", "center", "right")
    r, c = cell
    if (r, c) == (1, 1):
        return "in the center"
    if r == 1:
        return f"on the {cols[c]}"
    if c == 1:
        return f"at the {rows[r]}"
    return f"at the {rows[r]} {cols[c]}"


def target_phrase(cell) -> str:
    r, c = cell
    if (r, c) == (1, 1):
        return "to the center"
    return "to the " + location_phrase(cell).split(" the ", 1)[1]
