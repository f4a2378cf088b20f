"""Deterministic synthetic change pairs with two-part templated captions."""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .scene import (
    COLORS,
    GLOBAL_CHANGES,
    GRID,
    LETTERS,
    ORIENTATIONS,
    POSES,
    SHAPES,
    SIZES,
    ChangeType,
    SceneObject,
    SceneSpec,
    location_phrase,
    render,
    sample_object,
    sample_scene,
    target_phrase,
)

ALL_TYPES: Tuple[ChangeType, ...] = tuple(ChangeType)
MIN_OBJECTS, MAX_OBJECTS = 2, 8
# declared global changes are at least this large; distractor jitter stays below
ILLUMINATION_MIN_DELTA = 0.25
VIEWPOINT_MIN_DELTA = 2


class GenerationError(RuntimeError):
    pass


@dataclass
class ChangePair:
    id: str
    image_a: Union[np.ndarray, str]
    image_b: Union[np.ndarray, str]
    change_types: Tuple[ChangeType, ...]
    captions: List[str]
    split: str = "train"
    source: str = "synthetic"
    scene_a: Optional[SceneSpec] = field(default=None, repr=False)
    scene_b: Optional[SceneSpec] = field(default=None, repr=False)
    seed: Optional[int] = None


def canonical_types(types: Iterable) -> Tuple[ChangeType, ...]:
    wanted = {ChangeType(t) for t in types}
    return tuple(t for t in ALL_TYPES if t in wanted)


# ----------------------------------------------------------------------------
# label checker


def spec_changes(a: SceneSpec, b: SceneSpec) -> Set[ChangeType]:
    """Recompute the semantic change set from two scene specs."""
    found: Set[ChangeType] = set()
    if abs(b.brightness - a.brightness) >= ILLUMINATION_MIN_DELTA:
        found.add(ChangeType.ILLUMINATION)
    if max(abs(x - y) for x, y in zip(a.offset, b.offset)) >= VIEWPOINT_MIN_DELTA:
        found.add(ChangeType.VIEWPOINT)
    ca, cb = a.by_cell(), b.by_cell()
    for cell in sorted(ca.keys() & cb.keys()):
        oa, ob = ca[cell], cb[cell]
        if oa.shape != ob.shape:
            found.add(ChangeType.SUBSTITUTION)
            continue
        if oa.color != ob.color:
            found.add(ChangeType.COLOR)
        if oa.size != ob.size:
            found.add(ChangeType.SIZE)
        if oa.orientation != ob.orientation:
            found.add(ChangeType.ORIENTATION)
        if oa.pose != ob.pose:
            found.add(ChangeType.POSE)
        if oa.letter != ob.letter:
            found.add(ChangeType.OCR)
    gone = [ca[c] for c in sorted(ca.keys() - cb.keys())]
    new = [cb[c] for c in sorted(cb.keys() - ca.keys())]
    for og in list(gone):
        match = next((on for on in new if og.same_except_cell(on)), None)
        if match is not None:
            found.add(ChangeType.REMOVAL)
            gone.remove(og)
            new.remove(match)
    kinds_a = {o.kind for o in a.objects}
    for on in new:
        found.add(ChangeType.COUNTING if on.kind in kinds_a else ChangeType.ADDITION)
    for og in gone:
        found.add(ChangeType.COUNTING if a.count(og.kind) >= 2 else ChangeType.DISAPPEARANCE)
    return found


# ----------------------------------------------------------------------------
# change appliers: mutate the working cell->object map, return a caption note


_NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
_PLURAL = {"square": "squares", "circle": "circles", "triangle": "triangles", "glyph": "signs"}


def _noun(obj: SceneObject) -> str:
    if obj.shape == "glyph":
        return f"sign with the letter {obj.letter}"
    return obj.shape


def _desc(obj: SceneObject) -> str:
    return f"{obj.size} {obj.color} {_noun(obj)}"


class _Work:
    def __init__(self, rng, scene_a: SceneSpec):
        self.rng = rng
        self.a = scene_a
        self.objs: Dict[Tuple[int, int], SceneObject] = scene_a.by_cell()
        self.touched: Set[Tuple[int, int]] = set()
        self.brightness = scene_a.brightness
        self.offset = scene_a.offset

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))] if seq else None

    def candidates(self, pred: Callable[[SceneObject], bool]) -> List[SceneObject]:
        return [o for c, o in sorted(self.objs.items()) if c not in self.touched and pred(o)]

    def free(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in range(GRID) for c in range(GRID)
                if (r, c) not in self.objs and (r, c) not in self.touched]

    def kinds(self):
        return {o.kind for o in self.a.objects} | {o.kind for o in self.objs.values()}

    def scene(self) -> SceneSpec:
        return SceneSpec(tuple(o for _, o in sorted(self.objs.items())),
                         round(self.brightness, 4), tuple(self.offset))


def _addition(w: _Work):
    cells = w.free()
    if not cells or len(w.objs) >= MAX_OBJECTS:
        return None
    taken = w.kinds()
    novel = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in taken]
    kind = w.pick(novel)
    if kind is None:
        return None
    cell = w.pick(cells)
    obj = sample_object(w.rng, cell, *kind)
    w.objs[cell] = obj
    w.touched.add(cell)
    return ChangeType.ADDITION, obj


def _disappearance(w: _Work):
    if len(w.objs) <= MIN_OBJECTS:
        return None
    obj = w.pick(w.candidates(lambda o: w.a.count(o.kind) == 1 and o in w.a.objects))
    if obj is None:
        return None
    del w.objs[obj.cell]
    w.touched.add(obj.cell)
    return ChangeType.DISAPPEARANCE, obj


def _removal(w: _Work):
    cells = w.free()
    obj = w.pick(w.candidates(lambda o: o in w.a.objects))
    if obj is None or not cells:
        return None
    dst = w.pick(cells)
    del w.objs[obj.cell]
    w.objs[dst] = obj.moved(dst)
    w.touched.update({obj.cell, dst})
    return ChangeType.REMOVAL, (obj, dst)


def _substitution(w: _Work):
    obj = w.pick(w.candidates(lambda o: True))
    if obj is None:
        return None
    shape = w.pick([s for s in SHAPES if s != obj.shape])
    new = sample_object(w.rng, obj.cell, shape=shape)
    w.objs[obj.cell] = new
    w.touched.add(obj.cell)
    return ChangeType.SUBSTITUTION, (obj, new)


def _attribute(kind: ChangeType, attr: str, values, pred):
    def apply(w: _Work):
        obj = w.pick(w.candidates(pred))
        if obj is None:
            return None
        value = w.pick([v for v in values if v != getattr(obj, attr)])
        new = replace(obj, **{attr: value})
        w.objs[obj.cell] = new
        w.touched.add(obj.cell)
        return kind, (obj, new)

    return apply


def _counting(w: _Work):
    ups = [o for o in w.candidates(lambda o: True)] if w.free() and len(w.objs) < MAX_OBJECTS else []
    downs = w.candidates(lambda o: w.a.count(o.kind) >= 2) if len(w.objs) > MIN_OBJECTS else []
    options = [("up", o) for o in ups] + [("down", o) for o in downs]
    choice = w.pick(options)
    if choice is None:
        return None
    direction, obj = choice
    if direction == "up":
        cell = w.pick(w.free())
        new = sample_object(w.rng, cell, obj.shape, obj.color)
        w.objs[cell] = new
        w.touched.add(cell)
        return ChangeType.COUNTING, new
    del w.objs[obj.cell]
    w.touched.add(obj.cell)
    return ChangeType.COUNTING, obj


def _illumination(w: _Work):
    mag = float(w.rng.uniform(0.3, 0.45))
    signs = [s for s in (-1, 1) if 0.5 <= w.brightness + s * mag <= 1.5]
    w.brightness = w.brightness + w.pick(signs) * mag
    return ChangeType.ILLUMINATION, None


def _viewpoint(w: _Work):
    moves = [(axis, s) for axis in (0, 1) for s in (-2, 2) if abs(w.offset[axis] + s) <= 2]
    axis, s = w.pick(moves)
    off = list(w.offset)
    off[axis] += s
    w.offset = tuple(off)
    return ChangeType.VIEWPOINT, None


_APPLIERS = {
    ChangeType.ADDITION: _addition,
    ChangeType.DISAPPEARANCE: _disappearance,
    ChangeType.REMOVAL: _removal,
    ChangeType.SUBSTITUTION: _substitution,
    ChangeType.SIZE: _attribute(ChangeType.SIZE, "size", SIZES, lambda o: True),
    ChangeType.COLOR: _attribute(ChangeType.COLOR, "color", tuple(COLORS), lambda o: True),
    ChangeType.ORIENTATION: _attribute(
        ChangeType.ORIENTATION, "orientation", ORIENTATIONS, lambda o: o.shape != "glyph"
    ),
    ChangeType.POSE: _attribute(ChangeType.POSE, "pose", POSES, lambda o: o.shape == "glyph"),
    ChangeType.OCR: _attribute(ChangeType.OCR, "letter", LETTERS, lambda o: o.shape == "glyph"),
    ChangeType.COUNTING: _counting,
    ChangeType.ILLUMINATION: _illumination,
    ChangeType.VIEWPOINT: _viewpoint,
}


def _jitter(w: _Work, declared: Set[ChangeType]):
    """Sub-threshold brightness and camera jitter; never part of the label set."""
    if ChangeType.ILLUMINATION not in declared:
        mag = float(w.rng.uniform(0.05, 0.15))
        signs = [s for s in (-1, 1) if 0.5 <= w.brightness + s * mag <= 1.5]
        w.brightness += w.pick(signs) * mag
    if ChangeType.VIEWPOINT not in declared:
        moves = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                 if (dx or dy) and abs(w.offset[0] + dx) <= 2 and abs(w.offset[1] + dy) <= 2]
        dx, dy = w.pick(moves)
        w.offset = (w.offset[0] + dx, w.offset[1] + dy)


# ----------------------------------------------------------------------------
# captions


def _sentence(note, a: SceneSpec, b: SceneSpec, form: int) -> str:
    kind, data = note
    if kind is ChangeType.ADDITION:
        ref = f"a {_desc(data)} {location_phrase(data.cell)}"
        chg = ("appeared", "has appeared in the scene", "newly appeared")[form]
    elif kind is ChangeType.DISAPPEARANCE:
        ref = f"the {_desc(data)} {location_phrase(data.cell)}"
        chg = ("disappeared", "has vanished from the scene", "is no longer there")[form]
    elif kind is ChangeType.REMOVAL:
        obj, dst = data
        ref = f"the {_desc(obj)} {location_phrase(obj.cell)}"
        chg = (f"was moved {target_phrase(dst)}", f"has been relocated {target_phrase(dst)}",
               f"now stands {location_phrase(dst)}")[form]
    elif kind is ChangeType.SUBSTITUTION:
        old, new = data
        ref = f"the {_desc(old)} {location_phrase(old.cell)}"
        chg = (f"was replaced by a {_desc(new)}", f"has been swapped for a {_desc(new)}",
               f"turned into a {_desc(new)}")[form]
    elif kind is ChangeType.SIZE:
        old, new = data
        ref = f"the {old.color} {_noun(old)} {location_phrase(old.cell)}"
        bigger = new.size == "large"
        chg = (f"became {'larger' if bigger else 'smaller'}",
               f"changed from {old.size} to {new.size}",
               f"{'grew' if bigger else 'shrank'} in size")[form]
    elif kind is ChangeType.COLOR:
        old, new = data
        ref = f"the {_desc(old)} {location_phrase(old.cell)}"
        chg = (f"changed color from {old.color} to {new.color}", f"was repainted {new.color}",
               f"turned {new.color}")[form]
    elif kind is ChangeType.ORIENTATION:
        old, new = data
        ref = f"the {_desc(old)} {location_phrase(old.cell)}"
        chg = (f"now points {new.orientation}", f"was rotated to face {new.orientation}",
               f"changed direction from {old.orientation} to {new.orientation}")[form]
    elif kind is ChangeType.POSE:
        old, new = data
        ref = f"the {_desc(old)} {location_phrase(old.cell)}"
        up = new.pose == "raised"
        chg = (f"{'raised' if up else 'lowered'} its arm",
               f"moved its arm {'up' if up else 'down'}",
               f"changed pose with its arm now {new.pose}")[form]
    elif kind is ChangeType.OCR:
        old, new = data
        ref = f"the {old.size} {old.color} sign {location_phrase(old.cell)}"
        chg = (f"changed its letter from {old.letter} to {new.letter}",
               f"now shows the letter {new.letter}",
               f"had its letter replaced by {new.letter}")[form]
    elif kind is ChangeType.COUNTING:
        na, nb = a.count(data.kind), b.count(data.kind)
        ref = f"the {data.color} {_PLURAL[data.shape]}"
        n_a, n_b = _NUMBERS[na], _NUMBERS[nb]
        chg = (f"{'increased' if nb > na else 'decreased'} in number from {n_a} to {n_b}",
               f"went from {n_a} to {n_b}",
               f"now number {n_b} instead of {n_a}")[form]
    elif kind is ChangeType.ILLUMINATION:
        ref = "the lighting of the whole scene"
        word = "brighter" if b.brightness > a.brightness else "darker"
        chg = (f"became {word}", f"is now {word}", f"turned {word}")[form]
    else:
        ref = "the camera"
        dx = b.offset[0] - a.offset[0]
        dy = b.offset[1] - a.offset[1]
        if abs(dx) >= abs(dy):
            where = "left" if dx > 0 else "right"
        else:
            where = "up" if dy > 0 else "down"
        chg = (f"moved to the {where}" if where in ("left", "right") else f"tilted {where}",
               "shifted its viewpoint",
               f"changed its viewpoint towards the {where}" if where in ("left", "right")
               else f"changed its viewpoint by tilting {where}")[form]
    return f"{ref}, {chg}."


def make_captions(notes, a: SceneSpec, b: SceneSpec, rng, n: int) -> List[str]:
    captions: List[str] = []
    for _ in range(n):
        text = " ".join(_sentence(note, a, b, int(rng.integers(3))) for note in notes)
        captions.append(text)
    return captions


# ----------------------------------------------------------------------------


def generate_pair(
    seed: int,
    change_menu: Iterable = ALL_TYPES,
    distractors: bool = False,
    n_captions: int = 1,
    must_include: Optional[ChangeType] = None,
    image_size: int = 64,
    max_attempts: int = 200,
    pair_id: Optional[str] = None,
) -> ChangePair:
    """Render a scene, apply 1-3 changes from ``change_menu`` and caption them.

    The result is a pure function of the arguments. Declared viewpoint or
    illumination changes always co-occur with at least one object-level change.
    """
    menu = canonical_types(change_menu)
    semantic = [t for t in menu if t not in GLOBAL_CHANGES]
    if not semantic:
        raise ValueError("change_menu needs at least one object-level change type")
    if must_include is not None and ChangeType(must_include) not in menu:
        raise ValueError(f"{must_include} is not in the change menu")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        scene_a = sample_scene(rng, MIN_OBJECTS, MAX_OBJECTS)
        k = int(rng.integers(1, min(3, len(menu)) + 1))
        rest = [t for t in menu if t != must_include]
        picked = [rest[i] for i in rng.permutation(len(rest))[:k]]
        if must_include is not None:
            picked = [ChangeType(must_include)] + picked[: k - 1]
        if all(t in GLOBAL_CHANGES for t in picked):
            extra = [t for t in semantic if t not in picked]
            picked.append(extra[int(rng.integers(len(extra)))])
        w = _Work(rng, scene_a)
        notes = []
        for t in picked:
            note = _APPLIERS[t](w)
            if note is None:
                break
            notes.append(note)
        else:
            if distractors:
                _jitter(w, set(picked))
            try:
                scene_b = w.scene()
            except ValueError:
                continue
            if not MIN_OBJECTS <= len(scene_b.objects) <= MAX_OBJECTS:
                continue
            if spec_changes(scene_a, scene_b) != set(picked):
                continue
            return ChangePair(
                id=pair_id if pair_id is not None else f"syn{seed:08d}",
                image_a=render(scene_a, image_size),
                image_b=render(scene_b, image_size),
                change_types=canonical_types(picked),
                captions=make_captions(notes, scene_a, scene_b, rng, n_captions),
                scene_a=scene_a,
                scene_b=scene_b,
                seed=seed,
            )
    raise GenerationError(
        f"no feasible change set for seed {seed} and menu {[str(t) for t in menu]} "
        f"after {max_attempts} attempts"
    )
