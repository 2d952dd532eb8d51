"""Procedural paired-example generator: flat-shaded grid-aligned scenes.

Scenes are 32x32 images of 1-3 flat-colored shapes (squares and discs) on a
flat background. All geometry is anchored to the 4-px patch grid and shape
stencils are defined on 2-px cells, so the set of distinct 4x4 patches over
the whole generative space stays small enough for a 256-entry codebook to be
lossless. All intensities lie exactly on the 8-bit grid (k/255), so PPM file
round trips are lossless too.

Supported task families:
  edit      scene -> edited scene (recolor / remove / add / identity)
  canny     edge map -> scene
  depth     depth map -> scene
  seg       segmentation map -> scene
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .seeding import make_rng
from . import text as textmod

CANVAS = 32
PATCH = 4

_8 = lambda *v: np.array(v, dtype=np.float64) / 255.0

OBJECT_COLORS = {
    "red": _8(255, 0, 0),
    "green": _8(0, 255, 0),
    "blue": _8(0, 0, 255),
    "yellow": _8(255, 255, 0),
    "cyan": _8(0, 255, 255),
    "magenta": _8(255, 0, 255),
}
BACKGROUND_COLORS = {
    "light": _8(230, 230, 230),
    "dark": _8(40, 40, 40),
}
SEG_CLASS_COLORS = {
    "square": _8(255, 140, 0),   # orange
    "disc": _8(150, 60, 220),    # purple
}
DEPTH_LEVELS = {z: round(255 * z / 3) / 255.0 for z in (1, 2, 3)}
EDGE_THRESHOLD = 0.3

CONDITION_KINDS = ("edit", "canny", "depth", "seg")
EDIT_OPS = ("recolor", "remove", "add", "identity")


class SpecError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class Shape:
    kind: str          # "square" | "disc"
    color: str         # OBJECT_COLORS key
    cx: int            # on the 4-px grid
    cy: int
    size: int          # 8 | 12
    z: int             # depth level 1..3

    def box(self):
        """(top, left, bottom, right), half-open, aligned to the patch grid."""
        top = self.cy - 4
        left = self.cx - 4
        return top, left, top + self.size, left + self.size


@dataclass
class SceneSpec:
    background: str
    shapes: list = field(default_factory=list)

    def validate(self):
        if self.background not in BACKGROUND_COLORS:
            raise SpecError(f"unknown background {self.background!r}")
        if not 0 <= len(self.shapes) <= 3:
            raise SpecError("scene must have 0-3 shapes")
        boxes = []
        for s in self.shapes:
            if s.kind not in ("square", "disc") or s.color not in OBJECT_COLORS:
                raise SpecError(f"bad shape {s}")
            if s.size not in (8, 12) or s.z not in (1, 2, 3):
                raise SpecError(f"bad shape {s}")
            if s.cx % 4 or s.cy % 4:
                raise SpecError("shape center must lie on the 4-px grid")
            t, l, b, r = s.box()
            if t < 0 or l < 0 or b > CANVAS or r > CANVAS:
                raise SpecError("shape leaves the canvas")
            boxes.append((t, l, b, r))
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                t0, l0, b0, r0 = boxes[i]
                t1, l1, b1, r1 = boxes[j]
                if t0 < b1 and t1 < b0 and l0 < r1 and l1 < r0:
                    raise SpecError("shape bounding boxes overlap")

    def to_dict(self):
        return {"background": self.background,
                "shapes": [asdict(s) for s in self.shapes]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["background"], [Shape(**s) for s in d["shapes"]])


def _stencil(kind, size):
    """Boolean (size,size) pixel mask; defined on 2-px cells."""
    cells = size // 2
    m = np.ones((cells, cells), dtype=bool)
    if kind == "disc":
        if size == 8:
            for r, c in ((0, 0), (0, 3), (3, 0), (3, 3)):
                m[r, c] = False
        else:
            for r, c in ((0, 0), (0, 1), (1, 0)):
                m[r, c] = m[r, cells - 1 - c] = False
                m[cells - 1 - r, c] = m[cells - 1 - r, cells - 1 - c] = False
    return np.repeat(np.repeat(m, 2, axis=0), 2, axis=1)


def shape_pixel_mask(shape):
    """Canvas-sized boolean mask of the shape's pixels."""
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    t, l, b, r = shape.box()
    mask[t:b, l:r] = _stencil(shape.kind, shape.size)
    return mask


def render_scene(spec):
    """Deterministic flat-shaded rasterization, ascending z."""
    spec.validate()
    img = np.empty((CANVAS, CANVAS, 3), dtype=np.float64)
    img[:] = BACKGROUND_COLORS[spec.background]
    for s in sorted(spec.shapes, key=lambda s: s.z):
        img[shape_pixel_mask(s)] = OBJECT_COLORS[s.color]
    return img


def extract_edges(img):
    """Forward-difference edge extractor shared with the eval metrics.

    A pixel is an edge iff its max-channel absolute difference to the right
    or down neighbor exceeds EDGE_THRESHOLD (out-of-canvas neighbors count
    as identical), giving one-pixel-wide transition lines.
    """
    img = np.asarray(img, dtype=np.float64)
    dx = np.abs(np.diff(img, axis=1)).max(axis=2)
    dy = np.abs(np.diff(img, axis=0)).max(axis=2)
    edges = np.zeros(img.shape[:2], dtype=bool)
    edges[:, :-1] |= dx > EDGE_THRESHOLD
    edges[:-1, :] |= dy > EDGE_THRESHOLD
    return edges


def derive_condition(spec, kind):
    """Render the condition-image modality for a scene."""
    spec.validate()
    img = np.zeros((CANVAS, CANVAS, 3), dtype=np.float64)
    if kind == "canny":
        img[extract_edges(render_scene(spec))] = 1.0
    elif kind == "depth":
        for s in sorted(spec.shapes, key=lambda s: s.z):
            img[shape_pixel_mask(s)] = DEPTH_LEVELS[s.z]
    elif kind == "seg":
        for s in sorted(spec.shapes, key=lambda s: s.z):
            img[shape_pixel_mask(s)] = SEG_CLASS_COLORS[s.kind]
    else:
        raise SpecError(f"unknown condition kind {kind!r}")
    return img


@dataclass
class TrainingExample:
    condition: np.ndarray
    kind: str                 # CONDITION_KINDS
    instruction: str
    target: np.ndarray
    edit_mask: np.ndarray     # (32,32) bool, True = allowed to change
    meta: dict

    def validate(self):
        assert self.condition.shape == (CANVAS, CANVAS, 3)
        assert self.target.shape == (CANVAS, CANVAS, 3)
        assert self.kind in CONDITION_KINDS


def _dilated_box_mask(shape, pad=2):
    t, l, b, r = shape.box()
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    mask[max(t - pad, 0):min(b + pad, CANVAS),
         max(l - pad, 0):min(r + pad, CANVAS)] = True
    return mask


def _free_color(spec, rng):
    used = {s.color for s in spec.shapes}
    options = [c for c in textmod.COLOR_WORDS if c not in used]
    return options[rng.integers(len(options))]


def _place_shape(spec, rng, attempts=64):
    """Try to add one random non-overlapping shape; None if space ran out."""
    for _ in range(attempts):
        size = int(rng.choice((8, 12)))
        lo, hi = 4, CANVAS - size + 4  # inclusive center range keeping the box inside
        cx = int(rng.integers(lo // 4, hi // 4 + 1)) * 4
        cy = int(rng.integers(lo // 4, hi // 4 + 1)) * 4
        used_z = {s.z for s in spec.shapes}
        z = int(rng.choice([v for v in (1, 2, 3) if v not in used_z]))
        cand = Shape(kind=str(rng.choice(("square", "disc"))),
                     color=_free_color(spec, rng), cx=cx, cy=cy, size=size, z=z)
        t, l, b, r = cand.box()
        clear = True
        for s in spec.shapes:
            t1, l1, b1, r1 = s.box()
            # keep a 4-px gap so shapes never become adjacent
            if t - 4 < b1 and t1 - 4 < b and l - 4 < r1 and l1 - 4 < r:
                clear = False
                break
        if clear:
            spec.shapes.append(cand)
            return cand
    return None


def sample_scene(rng, n_shapes):
    spec = SceneSpec(background=str(rng.choice(("light", "dark"))))
    for _ in range(n_shapes):
        if _place_shape(spec, rng) is None:
            break
    spec.validate()
    return spec


def describe_scene(spec):
    """Deterministic scene caption used by translation instructions."""
    if not spec.shapes:
        return f"on {spec.background} background"
    parts = [f"a {s.color} {s.kind}" for s in spec.shapes]
    return " and ".join(parts) + f" on {spec.background} background"


def make_edit_pair(spec, edit_op, rng):
    """One supervised editing pair; remove pairs flip to add with p=0.5."""
    spec.validate()
    if edit_op in ("recolor", "remove") and not spec.shapes:
        raise SpecError(f"{edit_op} needs at least one shape")
    if edit_op == "add" and len(spec.shapes) >= 3:
        raise SpecError("add needs fewer than 3 shapes")

    if edit_op == "identity":
        img = render_scene(spec)
        return TrainingExample(
            condition=img, kind="edit",
            instruction=textmod.render_instruction("identity"),
            target=img.copy(),
            edit_mask=np.zeros((CANVAS, CANVAS), dtype=bool),
            meta={"edit_op": "identity", "source": spec.to_dict(),
                  "result": spec.to_dict()})

    if edit_op == "recolor":
        i = int(rng.integers(len(spec.shapes)))
        src = spec.shapes[i]
        color2 = str(rng.choice([c for c in textmod.COLOR_WORDS
                                 if c != src.color]))
        mutated = SceneSpec.from_dict(spec.to_dict())
        mutated.shapes[i].color = color2
        return TrainingExample(
            condition=render_scene(spec), kind="edit",
            instruction=textmod.render_instruction(
                "recolor", {"color": src.color, "shape": src.kind,
                            "color2": color2}),
            target=render_scene(mutated),
            edit_mask=_dilated_box_mask(src),
            meta={"edit_op": "recolor", "shape_index": i, "color2": color2,
                  "source": spec.to_dict(), "result": mutated.to_dict()})

    if edit_op == "add":
        mutated = SceneSpec.from_dict(spec.to_dict())
        added = _place_shape(mutated, rng)
        if added is None:
            raise SpecError("no room to add a shape")
        return TrainingExample(
            condition=render_scene(spec), kind="edit",
            instruction=textmod.render_instruction(
                "add", {"color": added.color, "shape": added.kind}),
            target=render_scene(mutated),
            edit_mask=_dilated_box_mask(added),
            meta={"edit_op": "add", "source": spec.to_dict(),
                  "result": mutated.to_dict()})

    # remove, possibly flipped to add
    i = int(rng.integers(len(spec.shapes)))
    gone = spec.shapes[i]
    mutated = SceneSpec.from_dict(spec.to_dict())
    del mutated.shapes[i]
    flip = bool(rng.random() < 0.5)
    mask = _dilated_box_mask(gone)
    if flip:
        return TrainingExample(
            condition=render_scene(mutated), kind="edit",
            instruction=textmod.render_instruction(
                "add", {"color": gone.color, "shape": gone.kind}),
            target=render_scene(spec), edit_mask=mask,
            meta={"edit_op": "add", "flipped": True,
                  "source": mutated.to_dict(), "result": spec.to_dict()})
    return TrainingExample(
        condition=render_scene(spec), kind="edit",
        instruction=textmod.render_instruction(
            "remove", {"color": gone.color, "shape": gone.kind}),
        target=render_scene(mutated), edit_mask=mask,
        meta={"edit_op": "remove", "flipped": False,
              "source": spec.to_dict(), "result": mutated.to_dict()})


def make_translation_pair(spec, kind, rng):
    if kind not in ("canny", "depth", "seg"):
        raise SpecError(f"unknown translation kind {kind!r}")
    spec.validate()
    return TrainingExample(
        condition=derive_condition(spec, kind), kind=kind,
        instruction=textmod.render_instruction(
            kind, {"desc": describe_scene(spec)}),
        target=render_scene(spec),
        edit_mask=np.ones((CANVAS, CANVAS), dtype=bool),
        meta={"source": spec.to_dict(), "result": spec.to_dict()})


DEFAULT_MIX = {"edit": 0.55, "canny": 0.15, "depth": 0.15, "seg": 0.15}


def sample_example(seed, index, mix=None):
    """Deterministically build example `index` of the corpus with root `seed`."""
    mix = dict(DEFAULT_MIX if mix is None else mix)
    kinds = sorted(mix)
    fracs = np.array([mix[k] for k in kinds], dtype=np.float64)
    rng = make_rng(seed, index)
    kind = kinds[int(rng.choice(len(kinds), p=fracs / fracs.sum()))]
    if kind == "edit":
        op = str(rng.choice(("recolor", "remove", "identity")))
        n_shapes = int(rng.integers(1, 4))
        spec = sample_scene(rng, n_shapes)
        return make_edit_pair(spec, op, rng)
    # translation scenes carry one shape so the caption fits the text window
    spec = sample_scene(rng, 1)
    return make_translation_pair(spec, kind, rng)


def sample_corpus(n, mix=None, seed=0):
    """Deterministic corpus; per-example seeds derived from (seed, index)."""
    mix = dict(DEFAULT_MIX if mix is None else mix)
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ConfigError("mix fractions must sum to 1")
    if set(mix) - set(CONDITION_KINDS):
        raise ConfigError(f"unknown mix keys {set(mix) - set(CONDITION_KINDS)}")
    return [sample_example(seed, i, mix) for i in range(n)]
