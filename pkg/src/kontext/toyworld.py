"""Procedural shape scenes, captions and task generators with programmatic oracles.

Every generator is a pure function of its ``numpy.random.Generator``; use
:func:`sample_rng` to derive per-sample generators from ``(seed, index)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from kontext.errors import ContractError
from kontext.rope import SOURCE, TokenRole, reference

CANVAS = 64

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
COLOR_NAMES = list(COLORS)
BACKGROUNDS: dict[str, tuple[float, float, float]] = {"black": (0.0, 0.0, 0.0), "gray": (0.5, 0.5, 0.5)}
SCENE_BG, NEUTRAL_BG = 0, 1
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "right of", "above", "below", "and")
SPATIAL_RELATIONS = RELATIONS[:4]

EDIT_CATEGORIES = ("replace", "add", "remove", "recolor")
TRANSFORM_FAMILIES = {
    "viewpoint": ("shift left", "shift right", "shift up", "shift down", "same scene"),
    "structure": ("zoom in", "zoom out"),
    "appearance": tuple(f"paint everything {c}" for c in COLORS),
}
ZOOM_FACTORS = {"zoom in": 1.5, "zoom out": 0.75}
SHIFT_PIXELS = 8

TASKS = ("t2i", "reconstruction", "transformation", "edit", "customized", "multisubject")

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<img>")
WORDS = (
    "a", "the", "left", "right", "of", "above", "below", "and",
    "reconstruct", "image", "shift", "up", "down", "same", "scene", "zoom", "in", "out",
    "paint", "everything", "replace", "with", "add", "remove", "make", "first", "second",
)  # fmt: skip


def vocabulary() -> list[str]:
    return list(SPECIAL_TOKENS) + list(WORDS) + COLOR_NAMES + list(SHAPES)


def write_vocabulary(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(vocabulary()) + "\n", encoding="utf-8")
    return path


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# scenes and rendering


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def key(self) -> tuple[str, str]:
        return (self.shape, self.color)

    def bbox(self, pad: float = 0.0) -> tuple[float, float, float, float]:
        r = self.size / 2 + pad
        return (self.cx - r, self.cy - r, self.cx + r, self.cy + r)


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]
    background: int = SCENE_BG
    canvas: int = CANVAS

    def with_objects(self, objects) -> "Scene":
        return replace(self, objects=tuple(objects))


def _shape_mask(obj: Obj, canvas: int) -> np.ndarray:
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    dx, dy = xs - obj.cx, ys - obj.cy
    r = obj.size / 2
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if obj.shape == "triangle":
        # apex up, base at the bottom edge of the bounding box
        frac = (dy + r) / (2 * r)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= r * frac)
    raise ContractError(f"unknown shape {obj.shape!r}")


def render(scene: Scene) -> np.ndarray:
    img = np.empty((scene.canvas, scene.canvas, 3), dtype=np.float32)
    img[:] = list(BACKGROUNDS.values())[scene.background]
    for obj in scene.objects:
        img[_shape_mask(obj, scene.canvas)] = COLORS[obj.color]
    return img


def _inside(obj: Obj, canvas: int, margin: float = 1.0) -> bool:
    x0, y0, x1, y1 = obj.bbox()
    return x0 >= margin and y0 >= margin and x1 <= canvas - margin and y1 <= canvas - margin


def _overlaps(a: Obj, b: Obj, gap: float = 3.0) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox(gap / 2)
    bx0, by0, bx1, by1 = b.bbox(gap / 2)
    return not (ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0)


def relation_holds(a: tuple[float, float], b: tuple[float, float], rel: str, margin: float = 0.0) -> bool:
    (ax, ay), (bx, by) = a, b
    if rel == "left of":
        return ax < bx - margin
    if rel == "right of":
        return ax > bx + margin
    if rel == "above":
        return ay < by - margin
    if rel == "below":
        return ay > by + margin
    return True


def _place(rng, shape, color, size, canvas, others, rel_to: Obj | None = None, rel: str | None = None, tries=400) -> Obj | None:
    r = size / 2 + 1.0
    spatial = rel_to is not None and rel in SPATIAL_RELATIONS
    for _ in range(tries):
        if spatial:
            # sample the offset from rel_to directly: clear primary-axis gap, bounded cross-axis drift
            d = rng.uniform(max(12.0, (size + rel_to.size) / 2 + 3.0), canvas * 0.75)
            o = rng.uniform(-0.6, 0.6) * d
            sign = -1.0 if rel in ("left of", "above") else 1.0
            dx, dy = (sign * d, o) if rel in ("left of", "right of") else (o, sign * d)
            cx, cy = rel_to.cx + dx, rel_to.cy + dy
        else:
            cx, cy = rng.uniform(r, canvas - r, size=2)
        obj = Obj(shape, color, round(float(cx), 1), round(float(cy), 1), float(size))
        if not _inside(obj, canvas) or any(_overlaps(obj, o) for o in others):
            continue
        if spatial and not relation_holds((obj.cx, obj.cy), (rel_to.cx, rel_to.cy), rel, margin=11.9):
            continue
        return obj
    return None


def _distinct_keys(rng, n: int, exclude=()) -> list[tuple[str, str]]:
    keys: list[tuple[str, str]] = []
    while len(keys) < n:
        k = (SHAPES[rng.integers(len(SHAPES))], COLOR_NAMES[rng.integers(len(COLOR_NAMES))])
        if k not in keys and k not in exclude:
            keys.append(k)
    return keys


def random_scene(rng, n_objects: int, size_range=(14, 20), background: int = SCENE_BG, canvas: int = CANVAS) -> Scene:
    while True:
        objs: list[Obj] = []
        for shape, color in _distinct_keys(rng, n_objects):
            o = _place(rng, shape, color, int(rng.integers(size_range[0], size_range[1] + 1)), canvas, objs)
            if o is None:
                break
            objs.append(o)
        if len(objs) == n_objects:
            return Scene(tuple(objs), background, canvas)


def related_pair(rng, a_key, b_key, rel: str, size_range=(14, 20), canvas: int = CANVAS) -> tuple[Obj, Obj]:
    """Place two objects so that ``a rel b`` holds with a clear margin."""
    while True:
        b = _place(rng, *b_key, int(rng.integers(size_range[0], size_range[1] + 1)), canvas, [])
        a = _place(rng, *a_key, int(rng.integers(size_range[0], size_range[1] + 1)), canvas, [b], rel_to=b, rel=rel, tries=50)
        if a is not None:
            return a, b


# ---------------------------------------------------------------------------
# captions


def describe(key: tuple[str, str], article: str = "a") -> str:
    return f"{article} {key[1]} {key[0]}"


def t2i_caption(keys: list[tuple[str, str]], rel: str | None) -> str:
    if len(keys) == 1:
        return describe(keys[0])
    return f"{describe(keys[0])} {rel} {describe(keys[1])}"


def parse_t2i(caption: str) -> tuple[list[tuple[str, str]], str | None]:
    """Inverse of :func:`t2i_caption`."""
    w = caption.split()
    if len(w) < 3 or w[0] != "a" or w[1] not in COLORS or w[2] not in SHAPES:
        raise ContractError(f"not a scene caption: {caption!r}")
    first = (w[2], w[1])
    if len(w) == 3:
        return [first], None
    rest = w[3:]
    rel_len = 2 if rest[0] in ("left", "right") else 1
    rel = " ".join(rest[:rel_len])
    tail = rest[rel_len:]
    if rel not in RELATIONS or len(tail) != 3 or tail[0] != "a" or tail[1] not in COLORS or tail[2] not in SHAPES:
        raise ContractError(f"not a scene caption: {caption!r}")
    return [first, (tail[2], tail[1])], rel


# ---------------------------------------------------------------------------
# oracle specs and samples


@dataclass
class OracleSpec:
    present: list[tuple[str, str]] = field(default_factory=list)
    absent: list[tuple[str, str]] = field(default_factory=list)
    relation: tuple[int, str, int] | None = None  # indices into ``present``
    identity: list[tuple[str, str]] = field(default_factory=list)
    preserved_mask: np.ndarray | None = None  # (H, W) bool
    preserved_reference: np.ndarray | None = None  # (H, W, 3)

    def to_json(self) -> dict:
        return {
            "present": [list(k) for k in self.present],
            "absent": [list(k) for k in self.absent],
            "relation": list(self.relation) if self.relation else None,
            "identity": [list(k) for k in self.identity],
        }


@dataclass
class ToySample:
    task: str
    caption: str
    cond_images: list[tuple[np.ndarray, TokenRole]]
    target: np.ndarray
    oracle_spec: OracleSpec
    meta: dict = field(default_factory=dict)
    aspect: str = "1:1"

    @property
    def tokens(self) -> list[str]:
        return self.caption.split()

    @property
    def n_refs(self) -> int:
        return len(self.cond_images)


def _t2i_spec(keys, rel) -> OracleSpec:
    relation = (0, rel, 1) if rel is not None and rel != "and" else None
    return OracleSpec(present=list(keys), relation=relation)


def scene_for_caption(rng, keys, rel) -> Scene:
    if len(keys) == 1:
        o = _place(rng, *keys[0], int(rng.integers(14, 21)), CANVAS, [])
        return Scene((o,))
    a, b = related_pair(rng, keys[0], keys[1], rel)
    return Scene((a, b))


def gen_t2i(rng) -> ToySample:
    n = 1 + int(rng.integers(2))
    keys = _distinct_keys(rng, n)
    rel = RELATIONS[rng.integers(len(RELATIONS))] if n == 2 else None
    scene = scene_for_caption(rng, keys, rel)
    caption = t2i_caption(keys, rel)
    return ToySample("t2i", caption, [], render(scene), _t2i_spec(keys, rel), {"scene": scene})


def gen_reconstruction(rng) -> ToySample:
    scene = random_scene(rng, 1 + int(rng.integers(3)))
    img = render(scene)
    full = np.ones(img.shape[:2], dtype=bool)
    spec = OracleSpec(present=[o.key for o in scene.objects], preserved_mask=full, preserved_reference=img)
    return ToySample("reconstruction", "reconstruct the image", [(img, SOURCE)], img.copy(), spec, {"scene": scene})


def _transform(scene: Scene, instruction: str) -> Scene:
    objs = list(scene.objects)
    if instruction.startswith("shift"):
        dx, dy = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}[instruction.split()[1]]
        objs = [replace(o, cx=o.cx + dx * SHIFT_PIXELS, cy=o.cy + dy * SHIFT_PIXELS) for o in objs]
    elif instruction in ZOOM_FACTORS:
        f = ZOOM_FACTORS[instruction]
        c = scene.canvas / 2
        objs = [replace(o, cx=c + f * (o.cx - c), cy=c + f * (o.cy - c), size=o.size * f) for o in objs]
    elif instruction.startswith("paint everything"):
        color = instruction.split()[-1]
        objs = [replace(o, color=color) for o in objs]
    return scene.with_objects(objs)


def gen_transformation(rng) -> ToySample:
    family = list(TRANSFORM_FAMILIES)[rng.integers(len(TRANSFORM_FAMILIES))]
    options = TRANSFORM_FAMILIES[family]
    instruction = options[rng.integers(len(options))]
    while True:
        if instruction in ZOOM_FACTORS:
            size_range = (12, 16) if instruction == "zoom in" else (16, 20)
            src = random_scene(rng, 1, size_range)
        else:
            src = random_scene(rng, 1 + int(rng.integers(2)))
        tgt = _transform(src, instruction)
        if all(_inside(o, tgt.canvas) for o in tgt.objects):
            break
    spec = OracleSpec(present=[o.key for o in tgt.objects])
    meta = {"family": family, "instruction": instruction, "scene": src, "target_scene": tgt}
    if instruction in ZOOM_FACTORS:
        meta["factor"] = ZOOM_FACTORS[instruction]
    return ToySample("transformation", instruction, [(render(src), SOURCE)], render(tgt), spec, meta)


def _edit_mask(objs: list[Obj], canvas: int, pad: float = 1.5) -> np.ndarray:
    """True outside the (padded) bounding boxes of ``objs``."""
    keep = np.ones((canvas, canvas), dtype=bool)
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    for o in objs:
        x0, y0, x1, y1 = o.bbox(pad)
        keep &= ~((xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1))
    return keep


def gen_edit(rng, category: str | None = None) -> ToySample:
    category = category or EDIT_CATEGORIES[rng.integers(len(EDIT_CATEGORIES))]
    while True:
        n = 1 + int(rng.integers(2))
        src = random_scene(rng, n)
        objs = list(src.objects)
        keys = [o.key for o in objs]
        touched: list[Obj] = []
        if category == "add":
            (new_key,) = _distinct_keys(rng, 1, exclude=keys)
            new = _place(rng, *new_key, int(rng.integers(14, 21)), CANVAS, objs)
            if new is None:
                continue
            tgt_objs = objs + [new]
            touched = [new]
            caption = f"add {describe(new_key)}"
            spec = OracleSpec(present=[o.key for o in tgt_objs])
        else:
            victim = objs[int(rng.integers(len(objs)))]
            others = [o for o in objs if o is not victim]
            if category == "remove":
                tgt_objs = others
                caption = f"remove {describe(victim.key, 'the')}"
                spec = OracleSpec(present=[o.key for o in others], absent=[victim.key])
                touched = [victim]
            elif category == "recolor":
                choices = [c for c in COLOR_NAMES if (victim.shape, c) not in keys]
                color = choices[rng.integers(len(choices))]
                new = replace(victim, color=color)
                tgt_objs = others + [new]
                caption = f"make {describe(victim.key, 'the')} {color}"
                spec = OracleSpec(present=[o.key for o in tgt_objs], absent=[victim.key])
                touched = [victim]
            else:  # replace
                (new_key,) = _distinct_keys(rng, 1, exclude=keys)
                new = replace(victim, shape=new_key[0], color=new_key[1])
                tgt_objs = others + [new]
                caption = f"replace {describe(victim.key, 'the')} with {describe(new_key)}"
                spec = OracleSpec(present=[o.key for o in tgt_objs], absent=[victim.key])
                touched = [victim, new]
        break
    tgt = src.with_objects(tgt_objs)
    src_img, tgt_img = render(src), render(tgt)
    spec.preserved_mask = _edit_mask(touched, CANVAS)
    spec.preserved_reference = src_img
    meta = {"category": category, "scene": src, "target_scene": tgt, "edited": touched}
    return ToySample("edit", caption, [(src_img, SOURCE)], tgt_img, spec, meta)


def _subject_image(rng, key) -> tuple[np.ndarray, Obj]:
    o = _place(rng, *key, int(rng.integers(16, 23)), CANVAS, [])
    return render(Scene((o,), NEUTRAL_BG)), o


def gen_customized(rng) -> ToySample:
    subject, other = _distinct_keys(rng, 2)
    rel = RELATIONS[rng.integers(len(RELATIONS))]
    ref_img, _ = _subject_image(rng, subject)
    a, b = related_pair(rng, subject, other, rel)
    target = render(Scene((a, b)))
    caption = f"the first {rel} {describe(other)}"
    spec = OracleSpec(present=[subject, other], relation=(0, rel, 1) if rel != "and" else None, identity=[subject])
    meta = {"subjects": [subject], "rel": rel, "other": other}
    return ToySample("customized", caption, [(ref_img, reference(1))], target, spec, meta)


def multisubject_spec(subjects: list[tuple[str, str]], rel: str) -> OracleSpec:
    return OracleSpec(present=list(subjects), relation=(0, rel, 1) if rel != "and" else None, identity=list(subjects))


def gen_multisubject(rng) -> ToySample:
    s1, s2 = _distinct_keys(rng, 2)
    rel = SPATIAL_RELATIONS[rng.integers(len(SPATIAL_RELATIONS))]
    r1, _ = _subject_image(rng, s1)
    r2, _ = _subject_image(rng, s2)
    a, b = related_pair(rng, s1, s2, rel)
    caption = f"the first {rel} the second"
    meta = {"subjects": [s1, s2], "rel": rel}
    return ToySample("multisubject", caption, [(r1, reference(1)), (r2, reference(2))], render(Scene((a, b))), multisubject_spec([s1, s2], rel), meta)


def swap_references(sample: ToySample) -> ToySample:
    """Exchange the two reference images; the oracle's identity-to-position map follows."""
    if sample.task != "multisubject":
        raise ContractError("only multisubject samples carry two references")
    (i1, _), (i2, _) = sample.cond_images
    s1, s2 = sample.meta["subjects"]
    spec = multisubject_spec([s2, s1], sample.meta["rel"])
    meta = dict(sample.meta, subjects=[s2, s1])
    return replace(sample, cond_images=[(i2, reference(1)), (i1, reference(2))], oracle_spec=spec, meta=meta)


GENERATORS: dict[str, Callable[[np.random.Generator], ToySample]] = {
    "t2i": gen_t2i,
    "reconstruction": gen_reconstruction,
    "transformation": gen_transformation,
    "edit": gen_edit,
    "customized": gen_customized,
    "multisubject": gen_multisubject,
}


def generate(task: str, seed: int, index: int) -> ToySample:
    if task not in GENERATORS:
        raise ContractError(f"unknown task {task!r}")
    return GENERATORS[task](sample_rng(seed, index))


# ---------------------------------------------------------------------------
# oracle


_PALETTE = np.array([BACKGROUNDS["black"], BACKGROUNDS["gray"]] + [COLORS[c] for c in COLOR_NAMES], dtype=np.float32)
MIN_AREA = 20


@dataclass(frozen=True)
class Component:
    shape: str
    color: str
    cx: float
    cy: float
    area: int


def classify_pixels(img: np.ndarray) -> np.ndarray:
    """Index into [black, gray, *palette] of the nearest color per pixel."""
    d = ((img[:, :, None, :] - _PALETTE[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def classify_shape(mask: np.ndarray) -> str:
    """Blur-tolerant shape call from a component mask.

    Triangles (apex up) put about a quarter of their mass in the upper half of
    the bounding box; squares fill the bbox corners, circles leave them empty.
    """
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    box = mask[y0:y1, x0:x1].astype(np.float64)
    h, w = box.shape
    top = box[: h // 2].sum()
    bottom = box[h - h // 2 :].sum()
    if top < 0.6 * bottom:
        return "triangle"
    ch, cw = max(1, h // 4), max(1, w // 4)
    corners = np.concatenate(
        [box[:ch, :cw].ravel(), box[:ch, w - cw :].ravel(), box[h - ch :, :cw].ravel(), box[h - ch :, w - cw :].ravel()]
    )
    return "square" if corners.mean() >= 0.6 else "circle"


def detect(img: np.ndarray, min_area: int = MIN_AREA) -> list[Component]:
    labels = classify_pixels(np.clip(img, 0.0, 1.0))
    comps = []
    for ci, color in enumerate(COLOR_NAMES):
        lab, n = ndimage.label(labels == ci + 2)
        for k in range(1, n + 1):
            m = lab == k
            area = int(m.sum())
            if area < min_area:
                continue
            ys, xs = np.nonzero(m)
            comps.append(Component(classify_shape(m), color, float(xs.mean() + 0.5), float(ys.mean() + 0.5), area))
    comps.sort(key=lambda c: -c.area)
    return comps


def _match(keys: list[tuple[str, str]], comps: list[Component]) -> list[Component | None]:
    used: set[int] = set()
    out: list[Component | None] = []
    for shape, color in keys:
        hit = None
        for i, c in enumerate(comps):
            if i not in used and c.shape == shape and c.color == color:
                hit = i
                break
        if hit is not None:
            used.add(hit)
        out.append(comps[hit] if hit is not None else None)
    return out


def oracle_score(img: np.ndarray, spec: OracleSpec) -> dict[str, float]:
    comps = detect(img)
    matched = _match(spec.present, comps)
    atoms = [m is not None for m in matched]
    found = {(c.shape, c.color) for c in comps}
    atoms += [k not in found for k in spec.absent]
    if spec.relation is not None:
        ia, rel, ib = spec.relation
        a, b = matched[ia], matched[ib]
        atoms.append(a is not None and b is not None and relation_holds((a.cx, a.cy), (b.cx, b.cy), rel))
    compliance = float(np.mean(atoms)) if atoms else 1.0
    if spec.identity:
        identity = float(np.mean([m is not None for m in _match(spec.identity, comps)]))
    else:
        identity = 1.0
    if spec.preserved_mask is not None and spec.preserved_mask.any():
        diff = (np.asarray(img, np.float64) - spec.preserved_reference) ** 2
        locality = float(diff[spec.preserved_mask].mean())
    else:
        locality = 0.0
    return {"compliance": compliance, "identity": identity, "locality_mse": locality}


# ---------------------------------------------------------------------------
# manifests


def save_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_manifest(path: str | Path, tasks: dict[str, int], seed: int) -> Path:
    """Materialize samples to PNGs plus a line-delimited JSON manifest."""
    path = Path(path)
    root = path.parent
    lines = []
    for task, count in tasks.items():
        for i in range(count):
            s = generate(task, seed, _task_offset(task) + i)
            rec = {"task": task, "seed": seed, "index": _task_offset(task) + i, "caption": s.caption}
            tgt = root / "images" / f"{task}_{i:05d}_target.png"
            save_png(tgt, s.target)
            rec["target"] = str(tgt.relative_to(root))
            rec["cond"] = []
            for k, (img, role) in enumerate(s.cond_images):
                p = root / "images" / f"{task}_{i:05d}_cond{k}.png"
                save_png(p, img)
                rec["cond"].append({"path": str(p.relative_to(root)), "role": str(role)})
            rec["oracle"] = s.oracle_spec.to_json()
            lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> list[ToySample]:
    """Samples are regenerated from (task, seed, index); image files are for inspection."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(generate(rec["task"], rec["seed"], rec["index"]))
    return out


def _task_offset(task: str) -> int:
    return (TASKS.index(task) + 1) * 1_000_000
