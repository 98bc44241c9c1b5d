"""Procedural grounding benchmark: shape scenes plus unambiguous referring expressions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .boxes import Box
from .encoders import RESERVED, Vocabulary
from .errors import FormatError, GenerationError

GRAMMAR_VERSION = 1
IMAGE_SIZE = 64
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple")
SIZES = ("small", "large")
SIZE_PIXELS = {"small": 10, "large": 16}
RELATIONS = ("left", "right", "above", "below")
SUPERLATIVES = ("largest", "smallest", "leftmost", "rightmost", "topmost", "bottommost")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
}
BACKGROUND = (0.5, 0.5, 0.5)
MIN_CENTER_DIST = 0.15
RETRY_BUDGET = 1000

VOCAB = Vocabulary(
    list(RESERVED) + list(SIZES) + list(COLORS) + list(SHAPES) + ["left", "right", "of", "above", "below"] + list(SUPERLATIVES)
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    box: Box

    def to_dict(self) -> dict:
        b = self.box
        return {"shape": self.shape, "color": self.color, "size": self.size, "box": [b.cx, b.cy, b.w, b.h]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], d["color"], d["size"], Box(*d["box"]))


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    target_index: int = 0

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_index]

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects], "target_index": self.target_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject.from_dict(o) for o in d["objects"]), int(d["target_index"]))


@dataclass
class GroundingSample:
    pixels: np.ndarray  # uint8 [3, 64, 64]
    tokens: list[int]
    gt: Box
    scene: Scene

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / np.float32(255)

    @property
    def words(self) -> list[str]:
        return VOCAB.decode(self.tokens)


# -- expressions ------------------------------------------------------------------


@dataclass(frozen=True)
class Phrase:
    shape: str
    color: str | None = None
    size: str | None = None

    def matches(self, obj: SceneObject) -> bool:
        return (
            obj.shape == self.shape
            and (self.color is None or obj.color == self.color)
            and (self.size is None or obj.size == self.size)
        )

    def words(self) -> list[str]:
        return [w for w in (self.size, self.color, self.shape) if w is not None]


@dataclass(frozen=True)
class Expression:
    """``phrase`` alone, ``phrase <relation> landmark`` or ``<superlative> phrase``."""

    phrase: Phrase
    relation: str | None = None
    landmark: Phrase | None = None
    superlative: str | None = None

    def words(self) -> list[str]:
        if self.superlative:
            return [self.superlative] + self.phrase.words()
        out = self.phrase.words()
        if self.relation:
            out += [self.relation, "of"] if self.relation in ("left", "right") else [self.relation]
            out += self.landmark.words()
        return out

    @property
    def kind(self) -> str:
        return "superlative" if self.superlative else "relation" if self.relation else "attribute"


def _related(a: SceneObject, b: SceneObject, relation: str) -> bool:
    # image y grows downward, so "above" means a smaller cy
    if relation == "left":
        return a.box.cx < b.box.cx
    if relation == "right":
        return a.box.cx > b.box.cx
    if relation == "above":
        return a.box.cy < b.box.cy
    return a.box.cy > b.box.cy


_SUPERLATIVE_KEY = {
    "largest": lambda o: o.box.w * o.box.h,
    "smallest": lambda o: -o.box.w * o.box.h,
    "leftmost": lambda o: -o.box.cx,
    "rightmost": lambda o: o.box.cx,
    "topmost": lambda o: -o.box.cy,
    "bottommost": lambda o: o.box.cy,
}


def referents(expr: Expression, scene: Scene) -> list[int]:
    """Indices of every object satisfying ``expr`` (brute force)."""
    objs = scene.objects
    cands = [i for i, o in enumerate(objs) if expr.phrase.matches(o)]
    if expr.superlative:
        if not cands:
            return []
        key = _SUPERLATIVE_KEY[expr.superlative]
        best = max(key(objs[i]) for i in cands)
        return [i for i in cands if key(objs[i]) == best]
    if expr.relation:
        return [
            i
            for i in cands
            if any(j != i and expr.landmark.matches(objs[j]) and _related(objs[i], objs[j], expr.relation) for j in range(len(objs)))
        ]
    return cands


def parse_expression(words: Sequence[str]) -> Expression:
    """Inverse of :meth:`Expression.words`; raises ``FormatError`` on bad input."""
    words = list(words)
    sup = None
    if words and words[0] in SUPERLATIVES:
        sup, words = words[0], words[1:]

    def phrase(ws):
        size = ws.pop(0) if ws and ws[0] in SIZES else None
        color = ws.pop(0) if ws and ws[0] in COLORS else None
        if not ws or ws[0] not in SHAPES:
            raise FormatError(f"expected a shape, got {ws[:1]}")
        return Phrase(ws.pop(0), color, size)

    head = phrase(words)
    if sup:
        if words:
            raise FormatError(f"trailing words {words}")
        return Expression(head, superlative=sup)
    if not words:
        return Expression(head)
    rel = words.pop(0)
    if rel not in RELATIONS:
        raise FormatError(f"unknown relation {rel!r}")
    if rel in ("left", "right"):
        if not words or words.pop(0) != "of":
            raise FormatError(f"expected 'of' after {rel!r}")
    landmark = phrase(words)
    if words:
        raise FormatError(f"trailing words {words}")
    return Expression(head, rel, landmark)


def _phrases_for(obj: SceneObject) -> list[Phrase]:
    return [
        Phrase(obj.shape),
        Phrase(obj.shape, obj.color),
        Phrase(obj.shape, None, obj.size),
        Phrase(obj.shape, obj.color, obj.size),
    ]


def candidate_expressions(scene: Scene, target: int) -> list[Expression]:
    """Unambiguous expressions for ``target``: attribute-only ones when any exist,
    otherwise relational and superlative ones."""
    objs = scene.objects
    tgt = objs[target]
    attrs = [Expression(p) for p in _phrases_for(tgt)]
    unique = [e for e in attrs if referents(e, scene) == [target]]
    if unique:
        return unique
    rich = [Expression(p, superlative=s) for p in _phrases_for(tgt) for s in SUPERLATIVES]
    for j, other in enumerate(objs):
        if j == target:
            continue
        for rel in RELATIONS:
            if not _related(tgt, other, rel):
                continue
            rich += [Expression(p, rel, q) for p in _phrases_for(tgt) for q in _phrases_for(other)]
    seen, out = set(), []
    for e in rich:
        if e not in seen and referents(e, scene) == [target]:
            seen.add(e)
            out.append(e)
    return out


def generate_expression(scene: Scene, rng: np.random.Generator | int | None = None) -> tuple[list[int], int]:
    rng = np.random.default_rng(rng)
    cands = candidate_expressions(scene, scene.target_index)
    if not cands:
        raise GenerationError("no unambiguous expression for this scene")
    expr = cands[int(rng.integers(len(cands)))]
    return VOCAB.encode(expr.words()), scene.target_index


# -- scenes -----------------------------------------------------------------------


def _place(rng, sizes_px: list[int]) -> list[tuple[int, int, int]] | None:
    # restart the layout when one object gets stuck; RETRY_BUDGET bounds all draws
    attempts = 0
    while attempts < RETRY_BUDGET:
        placed: list[tuple[int, int, int]] = []
        for s in sizes_px:
            for _ in range(50):
                attempts += 1
                x, y = (int(v) for v in rng.integers(0, IMAGE_SIZE - s + 1, size=2))
                if all(_separated((x, y, s), p) for p in placed):
                    placed.append((x, y, s))
                    break
            else:
                break
        if len(placed) == len(sizes_px):
            return placed
    return None


def _separated(a, b) -> bool:
    ax, ay, s = a
    bx, by, t = b
    # no pixel overlap, and centres far enough apart
    disjoint = ax + s <= bx or bx + t <= ax or ay + s <= by or by + t <= ay
    dx = (ax + s / 2 - bx - t / 2) / IMAGE_SIZE
    dy = (ay + s / 2 - by - t / 2) / IMAGE_SIZE
    return disjoint and (dx * dx + dy * dy) >= MIN_CENTER_DIST**2


def generate_scene(rng_seed: int | np.random.Generator | None = None, distractor_prob: float = 0.5) -> Scene:
    """Random scene of 2-5 non-overlapping objects.

    With probability ``distractor_prob`` a second object copies the target's
    shape and colour so that attributes alone cannot single it out.
    """
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(2, 6))
    attrs = [(SHAPES[rng.integers(3)], COLORS[rng.integers(5)], SIZES[rng.integers(2)]) for _ in range(n)]
    if rng.random() < distractor_prob:
        attrs[1] = (attrs[0][0], attrs[0][1], SIZES[rng.integers(2)])
    spots = _place(rng, [SIZE_PIXELS[a[2]] for a in attrs])
    if spots is None:
        raise GenerationError(f"could not place {n} objects within {RETRY_BUDGET} attempts")
    objs = [
        SceneObject(shape, color, size, Box.from_corners(x / IMAGE_SIZE, y / IMAGE_SIZE, (x + s) / IMAGE_SIZE, (y + s) / IMAGE_SIZE))
        for (shape, color, size), (x, y, s) in zip(attrs, spots)
    ]
    order = rng.permutation(n)
    objs = [objs[i] for i in order]
    target = int(np.flatnonzero(order == 0)[0])
    return Scene(tuple(objs), target)


def render(scene: Scene) -> np.ndarray:
    """Rasterise onto gray, ``[3, 64, 64]`` floats; pixel centres decide coverage."""
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    img[:] = np.array(BACKGROUND)[:, None, None]
    centers = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    py, px = np.meshgrid(centers, centers, indexing="ij")
    for obj in scene.objects:
        x1, y1, x2, y2 = obj.box.corners
        inside = (px >= x1) & (px < x2) & (py >= y1) & (py < y2)
        if obj.shape == "circle":
            r = obj.box.w / 2
            inside &= (px - obj.box.cx) ** 2 + (py - obj.box.cy) ** 2 <= r * r
        elif obj.shape == "triangle":
            # apex at top centre, base along the bottom edge
            half = (py - y1) / (y2 - y1) * (obj.box.w / 2)
            inside &= np.abs(px - obj.box.cx) <= half
        img[:, inside] = np.array(RGB[obj.color])[:, None]
    return img


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def generate_sample(seed: int, max_tries: int = 50) -> GroundingSample:
    """Sample from a single integer seed; regenerates the scene on ambiguity."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        scene = generate_scene(rng)
        try:
            tokens, target = generate_expression(scene, rng)
        except GenerationError:
            continue
        return GroundingSample(quantize(render(scene)), tokens, scene.objects[target].box, scene)
    raise GenerationError(f"seed {seed}: no unambiguous sample in {max_tries} scenes")


def generate_samples(n: int, seed: int) -> list[GroundingSample]:
    return [generate_sample(seed + i) for i in range(n)]


def symbolic_oracle(sample: GroundingSample) -> Box:
    """Resolve the expression against scene metadata; no pixels involved."""
    hits = referents(parse_expression(sample.words), sample.scene)
    if len(hits) != 1:
        raise GenerationError(f"expression {' '.join(sample.words)!r} has {len(hits)} referents")
    return sample.scene.objects[hits[0]].box


# -- files ------------------------------------------------------------------------


def _sample_line(s: GroundingSample) -> str:
    b = s.gt
    rec = {"image": s.pixels.tolist(), "tokens": list(map(int, s.tokens)), "box": [b.cx, b.cy, b.w, b.h], "scene": s.scene.to_dict()}
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(n: int, seed: int, path) -> Path:
    path = Path(path)
    header = {"version": GRAMMAR_VERSION, "seed": seed, "count": n, "vocab_hash": VOCAB.hash()}
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [_sample_line(s) for s in generate_samples(n, seed)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def iter_dataset(path) -> Iterator[GroundingSample]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
            count = int(header["count"])
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"bad header: {e}", line=1) from None
        if header.get("vocab_hash") != VOCAB.hash():
            raise FormatError("vocabulary hash mismatch", line=1)
        seen = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pixels = np.asarray(rec["image"], dtype=np.int64)
                if pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE) or pixels.min() < 0 or pixels.max() > 255:
                    raise ValueError(f"image must be 3x{IMAGE_SIZE}x{IMAGE_SIZE} bytes")
                sample = GroundingSample(
                    pixels.astype(np.uint8), [int(t) for t in rec["tokens"]], Box(*rec["box"]), Scene.from_dict(rec["scene"])
                )
            except (ValueError, KeyError, TypeError) as e:
                raise FormatError(str(e), line=lineno) from None
            seen += 1
            yield sample
        if seen != count:
            raise FormatError(f"header promises {count} samples, file holds {seen}", line=seen + 2)


def load_dataset(path) -> list[GroundingSample]:
    return list(iter_dataset(path))


def stack(samples: Sequence[GroundingSample]) -> tuple[np.ndarray, list[list[int]], np.ndarray]:
    """Images ``[n, 3, 64, 64]`` (float32), token lists and gt boxes ``[n, 4]``."""
    images = np.stack([s.pixels for s in samples]).astype(np.float32) / np.float32(255)
    boxes = np.array([[s.gt.cx, s.gt.cy, s.gt.w, s.gt.h] for s in samples])
    return images, [list(s.tokens) for s in samples], boxes
