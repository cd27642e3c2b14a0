"""Synthetic tabletop scenes with instructions and target actions.

Each image shows a fixed dark "arm" anchored at the bottom edge, a target
shape and up to two small distractor shapes on a tiled table whose tile tint
encodes the tile's row and column. The instruction names the target's colour
and shape; the action is the target centre normalised to [-1, 1] plus a
grip flag (+1 for squares and circles, -1 otherwise).

On disk a dataset is a directory holding ``index.json`` and one EDT1 image
tensor per record under ``images/``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from edpa.errors import ConfigError, FormatError
from edpa.tensorio import decode_tensor, encode_tensor

PALETTES = {
    "A": {
        "red": (0.90, 0.10, 0.10),
        "green": (0.10, 0.75, 0.20),
        "blue": (0.15, 0.25, 0.95),
        "yellow": (0.95, 0.90, 0.10),
    },
    "B": {
        "orange": (1.00, 0.55, 0.05),
        "purple": (0.55, 0.15, 0.75),
        "cyan": (0.10, 0.85, 0.90),
        "magenta": (0.95, 0.25, 0.70),
    },
}
SHAPES = ("square", "circle", "triangle", "diamond")
GRIP_SHAPES = {"square", "circle"}
TEMPLATES = (
    ("pick", "up", "the", "{color}", "{shape}"),
    ("move", "to", "the", "{color}", "{shape}"),
    ("reach", "for", "the", "{color}", "{shape}"),
)
VOCAB = (
    "<pad>", "pick", "up", "the", "move", "to", "reach", "for",
    *SHAPES,
    *PALETTES["A"], *PALETTES["B"],
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

ARM_COLOR = (0.25, 0.25, 0.28)
MAX_PLACEMENT_TRIES = 200


@dataclass
class SceneSample:
    image: np.ndarray
    tokens: list[int]
    action: np.ndarray
    objects: list[dict] = field(default_factory=list)
    target: int = 0


@dataclass
class DatasetSpec:
    suite: str = "A"
    count: int = 1000
    seed: int = 0
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_radius: float = 5.0
    max_radius: float = 8.0
    distractor_min_radius: float = 2.5
    distractor_max_radius: float = 3.5
    noise: float = 0.02
    tile: int = 16
    shapes: tuple[str, ...] = SHAPES
    templates: tuple[tuple[str, ...], ...] = TEMPLATES

    def __post_init__(self):
        if self.suite not in PALETTES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {sorted(PALETTES)}")
        if self.count < 1 or self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError(f"invalid counts in dataset spec: {self}")
        if not self.shapes or not self.palette:
            raise ConfigError("object vocabulary must be non-empty")

    @property
    def palette(self) -> dict[str, tuple[float, float, float]]:
        return PALETTES[self.suite]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "DatasetSpec":
        from edpa.config import build

        kv = dict(kv)
        if "templates" in kv:
            raise ConfigError("templates cannot be set from a spec file")
        shapes = kv.pop("shapes", None)
        spec = build(cls, kv)
        if shapes is not None:
            spec = replace(spec, shapes=tuple(s.strip() for s in shapes.split(",") if s.strip()))
        return spec


def tokenize(words) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise ConfigError(f"word {exc.args[0]!r} not in vocabulary") from None


def normalize_center(cx: float, cy: float, height: int, width: int) -> tuple[float, float]:
    """Pixel-centre coordinates -> [-1, 1]; the image centre maps to (0, 0)."""
    hx, hy = (width - 1) / 2.0, (height - 1) / 2.0
    return (cx - hx) / hx, (cy - hy) / hy


def action_from_object(obj: dict, height: int, width: int) -> np.ndarray:
    x, y = normalize_center(obj["cx"], obj["cy"], height, width)
    grip = 1.0 if obj["shape"] in GRIP_SHAPES else -1.0
    return np.array([x, y, grip])


def _background(height: int, width: int, tile: int = 0) -> np.ndarray:
    """Table shading: a smooth ramp, or flat tiles whose tint encodes the tile's row and column."""
    ys, xs = np.mgrid[0:height, 0:width]
    if tile > 0:
        fx = (xs // tile) / max((width - 1) // tile, 1)
        fy = (ys // tile) / max((height - 1) // tile, 1)
    else:
        fx, fy = xs / (width - 1), ys / (height - 1)
    return np.stack([0.45 + 0.35 * fx, 0.45 + 0.35 * fy, 0.62 + 0.0 * fx], axis=-1)


def arm_mask(height: int, width: int) -> np.ndarray:
    """Trapezoidal arm rising from the bottom edge with a two-finger gripper."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx = (width - 1) / 2.0
    top = int(round(height * 0.78))
    t = np.clip((ys - top) / max(height - 1 - top, 1), 0, 1)
    half = width * (0.06 + 0.06 * t)
    body = (ys >= top) & (np.abs(xs - cx) <= half)
    fy0 = top - int(round(height * 0.07))
    fingers = (ys >= fy0) & (ys < top) & (np.abs(np.abs(xs - cx) - width * 0.06) <= width * 0.02)
    return body | fingers


def shape_mask(shape: str, cx: float, cy: float, r: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    raise ConfigError(f"unknown shape {shape!r}")


def render_scene(spec: DatasetSpec, objects: list[dict], rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = _background(h, w, spec.tile)
    img[arm_mask(h, w)] = ARM_COLOR
    for obj in objects:
        img[shape_mask(obj["shape"], obj["cx"], obj["cy"], obj["r"], h, w)] = spec.palette[obj["color"]]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _place_objects(spec: DatasetSpec, rng: np.random.Generator, index: int) -> list[dict]:
    """Target first (full size), then the smaller distractors."""
    h, w = spec.height, spec.width
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    colors = list(spec.palette)
    chosen = rng.choice(len(colors) * len(spec.shapes), size=n, replace=False)
    arm_top = h * 0.70
    objects: list[dict] = []
    for rank, k in enumerate(chosen):
        color, shape = colors[k // len(spec.shapes)], spec.shapes[k % len(spec.shapes)]
        lo, hi = (spec.min_radius, spec.max_radius) if rank == 0 else (spec.distractor_min_radius, spec.distractor_max_radius)
        for _ in range(MAX_PLACEMENT_TRIES):
            r = float(rng.uniform(lo, hi))
            if r + 1 > w - 2 - r or r + 1 > arm_top - r:
                continue
            cx = float(rng.uniform(r + 1, w - 2 - r))
            cy = float(rng.uniform(r + 1, arm_top - r))
            if all((cx - o["cx"]) ** 2 + (cy - o["cy"]) ** 2 > (r + o["r"] + 2) ** 2 for o in objects):
                objects.append({"shape": shape, "color": color, "cx": cx, "cy": cy, "r": r})
                break
        else:
            raise ConfigError(f"record {index}: could not place {n} objects after {MAX_PLACEMENT_TRIES} tries")
    return objects


def generate_sample(spec: DatasetSpec, index: int) -> SceneSample:
    rng = np.random.default_rng([spec.seed, index, ord(spec.suite[0])])
    objects = _place_objects(spec, rng, index)
    target = 0
    tmpl = spec.templates[int(rng.integers(0, len(spec.templates)))]
    tgt = objects[target]
    words = [t.format(color=tgt["color"], shape=tgt["shape"]) for t in tmpl]
    image = render_scene(spec, objects, rng)
    return SceneSample(image, tokenize(words), action_from_object(tgt, spec.height, spec.width), objects, target)


def generate_dataset(spec: DatasetSpec) -> list[SceneSample]:
    return [generate_sample(spec, i) for i in range(spec.count)]


def save_dataset(samples: list[SceneSample], path, spec: DatasetSpec | None = None) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = f"images/{i:05d}.edt"
        (root / name).write_bytes(encode_tensor(s.image))
        records.append({
            "image": name,
            "tokens": [int(t) for t in s.tokens],
            "action": [float(a) for a in s.action],
            "objects": s.objects,
            "target": s.target,
        })
    (root / "index.json").write_text(json.dumps({"records": records}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(_spec_json(spec), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _spec_json(spec: DatasetSpec) -> dict:
    out = asdict(spec)
    out["shapes"] = list(spec.shapes)
    out["templates"] = [list(t) for t in spec.templates]
    return out


def load_dataset(path) -> list[SceneSample]:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FormatError(f"{root}: no index (index.json missing)")
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
        records = index["records"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{index_path}: malformed index: {exc}") from None
    samples = []
    for i, rec in enumerate(records):
        where = f"record {i} ({rec.get('image', '?')})"
        try:
            buf = (root / rec["image"]).read_bytes()
            image, end = decode_tensor(buf, 0, where=where)
            if end != len(buf):
                raise FormatError(f"{where}: {len(buf) - end} trailing bytes after offset {end}")
            samples.append(SceneSample(
                image, list(rec["tokens"]), np.array(rec["action"], dtype=np.float64),
                rec.get("objects", []), rec.get("target", 0),
            ))
        except (KeyError, OSError, TypeError) as exc:
            raise FormatError(f"{where}: {exc}") from None
    return samples


def load_spec_file(path) -> DatasetSpec:
    from edpa.config import read_kv

    return DatasetSpec.from_mapping(read_kv(path))
