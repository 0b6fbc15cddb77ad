"""Synthetic scene corpus: rendered shape images, captions, QA prompts, PPM I/O,
and the closed word-level vocabulary.

Scenes place 1..3 hard-edged shapes on distinct cells of a 2x2 grid; the
canonical caption chains each object to the next with a spatial relation
("a red circle above a blue square"). The grammar is unambiguous, so every
caption parses back to exactly the scene that was rendered. Rendering uses
integer arithmetic only — no anti-aliasing — so files are byte-identical
across platforms for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Tensor


COLOR_RGB = {
    "red": (220, 30, 30),
    "green": (30, 160, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 200, 40),
    "purple": (140, 60, 200),
    "orange": (240, 130, 30),
    "black": (25, 25, 25),
    "white": (250, 250, 250),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = (170, 170, 170)
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")


class PpmError(ValueError):
    """Malformed PPM file; the message carries the failing byte offset."""


class CaptionParseError(ValueError):
    """Caption does not conform to the scene grammar."""


class VocabError(KeyError):
    """Word outside the closed vocabulary."""


@dataclass
class SceneSpec:
    canvas_min: int = 28
    canvas_max: int = 44
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLOR_RGB)
    min_objects: int = 1
    max_objects: int = 3
    grammar: str = "v1"
    qa_fraction: float = 0.0
    heldout_fraction: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("shapes", "colors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass
class Scene:
    width: int
    height: int
    objects: list[SceneObject]


@dataclass
class DatasetRecord:
    image: str
    caption: str
    prompt: Optional[str]
    split: str

    def to_json(self) -> str:
        row = {"caption": self.caption, "image": self.image, "split": self.split}
        if self.prompt is not None:
            row["prompt"] = self.prompt
        return json.dumps(row, sort_keys=True)


# ------------------------------------------------------------------ scenes

def sample_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    w = int(rng.integers(spec.canvas_min, spec.canvas_max + 1))
    h = int(rng.integers(spec.canvas_min, spec.canvas_max + 1))
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cells = rng.choice(4, size=n, replace=False)
    objects = [
        SceneObject(shape=str(rng.choice(spec.shapes)), color=str(rng.choice(spec.colors)),
                    row=int(cell) // 2, col=int(cell) % 2)
        for cell in cells
    ]
    return Scene(width=w, height=h, objects=objects)


def render_scene(scene: Scene) -> np.ndarray:
    canvas = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    canvas[...] = BACKGROUND
    cell_h, cell_w = scene.height // 2, scene.width // 2
    radius = max(3, min(cell_h, cell_w) // 2 - 2)
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    for obj in scene.objects:
        cy = obj.row * cell_h + cell_h // 2
        cx = obj.col * cell_w + cell_w // 2
        if obj.shape == "square":
            mask = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
        elif obj.shape == "circle":
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
        elif obj.shape == "triangle":
            # upward triangle: half-width grows linearly from apex to base
            mask = (ys >= cy - radius) & (ys <= cy + radius) \
                & (2 * np.abs(xs - cx) <= (ys - cy + radius))
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")
        canvas[mask] = COLOR_RGB[obj.color]
    return canvas


def relation_between(a: SceneObject, b: SceneObject) -> str:
    if a.row < b.row:
        return "above"
    if a.row > b.row:
        return "below"
    return "left of" if a.col < b.col else "right of"


def caption_for(scene: Scene) -> str:
    words: list[str] = []
    for i, obj in enumerate(scene.objects):
        if i:
            words.append(relation_between(scene.objects[i - 1], obj))
        words.extend(["a", obj.color, obj.shape])
    return " ".join(words)


def scene_abstract(scene: Scene) -> tuple:
    objs = tuple((o.color, o.shape) for o in scene.objects)
    rels = tuple(relation_between(a, b) for a, b in zip(scene.objects, scene.objects[1:]))
    return objs, rels


def parse_caption(text: str, shapes: Sequence[str] = SHAPES,
                  colors: Sequence[str] = tuple(COLOR_RGB)) -> tuple:
    """Parse a caption back into ((color, shape), ...) plus relations.

    The grammar is LL(1): 'a COLOR SHAPE (REL a COLOR SHAPE)*' with REL one of
    above / below / 'left of' / 'right of'. Any deviation raises.
    """
    toks = text.split()
    pos = 0

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise CaptionParseError(f"caption ended early after {pos} words: {text!r}")
        word = toks[pos]
        if expected is not None and word != expected:
            raise CaptionParseError(f"expected {expected!r} at word {pos}, got {word!r}")
        pos += 1
        return word

    objs: list[tuple] = []
    rels: list[str] = []
    while True:
        take("a")
        color = take()
        if color not in colors:
            raise CaptionParseError(f"unknown color {color!r} at word {pos - 1}")
        shape = take()
        if shape not in shapes:
            raise CaptionParseError(f"unknown shape {shape!r} at word {pos - 1}")
        objs.append((color, shape))
        if pos == len(toks):
            return tuple(objs), tuple(rels)
        rel = take()
        if rel in ("above", "below"):
            rels.append(rel)
        elif rel in ("left", "right"):
            take("of")
            rels.append(f"{rel} of")
        else:
            raise CaptionParseError(f"unknown relation {rel!r} at word {pos - 1}")


def qa_for(scene: Scene, rng: np.random.Generator) -> tuple[str, str]:
    """One question with a single unambiguous one-word answer."""
    shape_counts: dict[str, list[SceneObject]] = {}
    color_counts: dict[str, list[SceneObject]] = {}
    for obj in scene.objects:
        shape_counts.setdefault(obj.shape, []).append(obj)
        color_counts.setdefault(obj.color, []).append(obj)
    candidates: list[tuple[str, str]] = [
        ("how many shapes are there ?", COUNT_WORDS[len(scene.objects)])
    ]
    for shape, objs in sorted(shape_counts.items()):
        if len(objs) == 1:
            candidates.append((f"what color is the {shape} ?", objs[0].color))
    for color, objs in sorted(color_counts.items()):
        if len(objs) == 1:
            candidates.append((f"what shape is the {color} one ?", objs[0].shape))
    return candidates[int(rng.integers(len(candidates)))]


# ------------------------------------------------------------------ PPM I/O

def write_ppm(path, pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"write_ppm expects uint8 H x W x 3 pixels, got {pixels.shape}")
    h, w = pixels.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            return next_token()
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"{path}: header ended at byte {start}")
        return raw[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise PpmError(f"{path}: expected P6 magic at byte 0, got {magic!r}")
    fields = []
    for _ in range(3):
        tok = next_token()
        if not tok.isdigit():
            raise PpmError(f"{path}: non-numeric header field {tok!r} before byte {pos}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PpmError(f"{path}: only 8-bit (maxval 255) supported, got {maxval}")
    pos += 1  # the single whitespace after maxval
    expected = w * h * 3
    payload = raw[pos:pos + expected]
    if len(payload) != expected:
        raise PpmError(
            f"{path}: truncated pixel data at byte {pos + len(payload)}: "
            f"expected {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def load_image(path) -> Tensor:
    """PPM file to an H x W x 3 tensor with values in [0, 1]."""
    return Tensor(read_ppm(path).astype(np.float64) / 255.0)


# ------------------------------------------------------------------ dataset

def generate_dataset(spec: SceneSpec, n: int, seed: int, out_dir) -> Path:
    """Render n records into out_dir/images plus a manifest.jsonl.

    Deterministic: record i is driven by SeedSequence([seed, i]); split and QA
    assignment are index rules (see SceneSpec fractions).
    """
    if n < 1:
        raise ValueError(f"need n >= 1 records, got {n}")
    out_dir = Path(out_dir)
    images = out_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    n_heldout = round(n * spec.heldout_fraction)
    n_qa = round(n * spec.qa_fraction)
    lines = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = sample_scene(spec, rng)
        rel_path = f"images/{i:05d}.ppm"
        write_ppm(out_dir / rel_path, render_scene(scene))
        split = "heldout" if i >= n - n_heldout else "train"
        if i < n_qa:
            prompt, answer = qa_for(scene, rng)
            record = DatasetRecord(image=rel_path, caption=answer, prompt=prompt, split=split)
        else:
            record = DatasetRecord(image=rel_path, caption=caption_for(scene),
                                   prompt=None, split=split)
        lines.append(record.to_json())
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path, split: Optional[str] = None) -> list[DatasetRecord]:
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        record = DatasetRecord(image=row["image"], caption=row["caption"],
                               prompt=row.get("prompt"), split=row["split"])
        if split is None or record.split == split:
            records.append(record)
    return records


def record_image_path(manifest_path, record: DatasetRecord) -> Path:
    return Path(manifest_path).parent / record.image


# ------------------------------------------------------------------ vocabulary

class Vocabulary:
    """Word <-> id bijection with reserved pad/bos/eos entries."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:3] != list(RESERVED):
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self._ids:
                raise VocabError(f"word {word!r} outside the vocabulary")
            ids.append(self._ids[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i > EOS_ID)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({w for text in texts for w in text.split()})
        return cls(list(RESERVED) + words)


def build_vocab(source) -> Vocabulary:
    """Vocabulary over every caption and prompt. ``source`` is a manifest path
    or an iterable of strings."""
    if isinstance(source, (str, Path)):
        records = load_manifest(source)
        texts = [r.caption for r in records] + [r.prompt for r in records if r.prompt]
        return Vocabulary.from_texts(texts)
    return Vocabulary.from_texts(source)
