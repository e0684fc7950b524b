"""Synthetic cabin/windshield detection corpus with non-IID client splits.

Every image holds exactly one "cabin": a filled body rectangle whose color
belongs to one simulated manufacturer, optionally carrying a "windshield"
(an inner rectangle over the top third of the body, inset one pixel so the
body outline stays body-colored and a pixel scan recovers the exact box).
Label rule: class 1 iff a windshield is rendered, class 0 otherwise.

Scene randomness is drawn in a fixed order from a per-sample Rng stream
(``Rng(seed, derive_stream(f"sample/{index}"))``), so a PartitionSpec fully
determines every pixel of the corpus.

Dataset directory layout (written by write_yolo):

    images/NNNNN.ppm    binary 8-bit P6 portable pixmap
    labels/NNNNN.txt    YOLO lines "class_id cx cy w h", 6 decimals
    manifest.json       per-sample meta + split name + spec echo + seed
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FedodError
from .params import Rng, derive_stream

BODY_COLORS = {
    "blue": (0.1, 0.2, 0.8),
    "red": (0.8, 0.15, 0.1),
    "gray": (0.55, 0.55, 0.55),
}
WINDSHIELD_COLORS = {
    "A": (0.9, 0.9, 0.3),
    "B": (0.3, 0.9, 0.9),
    "C": (0.9, 0.5, 0.9),
    "D": (0.5, 0.9, 0.5),
}
NO_WINDSHIELD = "none"

# three base backgrounds for training-domain scenes
BACKGROUNDS = ((0.75, 0.75, 0.72), (0.58, 0.48, 0.38), (0.22, 0.26, 0.32))
# three different backgrounds for the domain-shift ("demonstrator") set
SHIFT_BACKGROUNDS = ((0.25, 0.5, 0.28), (0.45, 0.3, 0.52), (0.9, 0.88, 0.82))

NOISE_AMPLITUDE = 0.05
BLUR_PROBABILITY = 0.2
BODY_FRACTION = (0.30, 0.60)

CLASS_NAMES = ("Cabin_without_windshield", "Cabin_with_windshield")


class SpecInvalid(FedodError):
    """A PartitionSpec cannot be satisfied."""


class IoFailure(FedodError):
    """A dataset directory is missing or unreadable."""


class MalformedLabelLine(FedodError):
    """A YOLO label line has the wrong field count or out-of-range values."""


@dataclass(frozen=True)
class BBox:
    """YOLO-normalized box: center (cx, cy), size (w, h), all in [0, 1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in normalized coordinates."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def area(self) -> float:
        return self.w * self.h


@dataclass
class Sample:
    """One image, its ground-truth boxes, and the scene metadata."""

    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    boxes: list[BBox]
    body_color: str
    windshield: str
    background_id: int


@dataclass(frozen=True)
class SceneSpec:
    """Scene parameters for a single generated sample."""

    body_color: str = "blue"
    windshield: str = NO_WINDSHIELD
    background_id: int = 0
    image_size: int = 32
    backgrounds: tuple = BACKGROUNDS
    brightness_range: tuple[float, float] = (0.7, 1.3)
    blur_prob: float = BLUR_PROBABILITY


@dataclass(frozen=True)
class PartitionSpec:
    """Recipe for the full experiment corpus.

    `clients` maps client id -> allowed (body_color, windshield) combos;
    the non-IID structure comes from giving clients disjoint combo sets.
    `cross_combos`, when omitted, defaults to every combination of a used
    color and a used windshield option that no client is allowed to see.
    """

    clients: dict[str, tuple[tuple[str, str], ...]]
    samples_per_client: int = 200
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0
    cross_samples: int = 60
    shift_samples: int = 60
    image_size: int = 32
    cross_combos: tuple[tuple[str, str], ...] | None = None

    def validate(self) -> None:
        if not self.clients:
            raise SpecInvalid("at least one client required")
        for cid, combos in self.clients.items():
            if not combos:
                raise SpecInvalid(f"client {cid!r} has an empty combination set")
            for color, shield in combos:
                if color not in BODY_COLORS:
                    raise SpecInvalid(f"unknown body color {color!r}")
                if shield != NO_WINDSHIELD and shield not in WINDSHIELD_COLORS:
                    raise SpecInvalid(f"unknown windshield type {shield!r}")
        if self.samples_per_client < 1:
            raise SpecInvalid("samples_per_client must be >= 1")
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise SpecInvalid(f"split fractions sum to {total}, expected 1.0")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise SpecInvalid("split fractions must be non-negative")
        if self.cross_combos is not None:
            allowed = {c for combos in self.clients.values() for c in combos}
            bad = [c for c in self.cross_combos if c in allowed]
            if bad:
                raise SpecInvalid(f"cross combos {bad} appear in a client's allowed set")


@dataclass
class ClientData:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


@dataclass
class Partitions:
    clients: dict[str, ClientData]
    cross_test: list[Sample]
    domain_shift: list[Sample]
    cross_combos: tuple[tuple[str, str], ...]
    cross_empty: bool  # True when no unseen combination exists (clients overlap fully)
    clients_spec: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=dict)

    def swap_set(self, client_id: str) -> list[Sample]:
        """cross_test restricted to this client's body colors (its future combos)."""
        colors = {color for color, _ in self.clients_spec[client_id]}
        return [s for s in self.cross_test if s.body_color in colors]


def generate(spec: SceneSpec, rng: Rng) -> Sample:
    """Render one scene. Draw order is fixed; equal (spec, rng) => equal pixels."""
    size = spec.image_size
    base = np.array(spec.backgrounds[spec.background_id % len(spec.backgrounds)], np.float64)
    img = base + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, (size, size, 3))

    lo, hi = BODY_FRACTION
    bw = int(round(rng.uniform(lo, hi) * size))
    bh = int(round(rng.uniform(lo, hi) * size))
    bw, bh = max(3, min(bw, size)), max(3, min(bh, size))
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))

    body = np.array(BODY_COLORS[spec.body_color], np.float64)
    img[y0 : y0 + bh, x0 : x0 + bw] = body + rng.uniform(
        -NOISE_AMPLITUDE, NOISE_AMPLITUDE, (bh, bw, 3)
    )

    if spec.windshield != NO_WINDSHIELD:
        # top third of the body, inset 1px so the body outline survives
        wy0, wy1 = y0 + 1, max(y0 + 2, y0 + bh // 3)
        wx0, wx1 = x0 + 1, x0 + bw - 1
        shield = np.array(WINDSHIELD_COLORS[spec.windshield], np.float64)
        img[wy0:wy1, wx0:wx1] = shield + rng.uniform(
            -NOISE_AMPLITUDE, NOISE_AMPLITUDE, (wy1 - wy0, wx1 - wx0, 3)
        )

    img *= rng.uniform(*spec.brightness_range)
    if rng.random() < spec.blur_prob:
        img = _box_blur3(img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    box = BBox(
        class_id=1 if spec.windshield != NO_WINDSHIELD else 0,
        cx=(x0 + bw / 2) / size,
        cy=(y0 + bh / 2) / size,
        w=bw / size,
        h=bh / size,
    )
    return Sample(
        image=img,
        boxes=[box],
        body_color=spec.body_color,
        windshield=spec.windshield,
        background_id=spec.background_id % len(spec.backgrounds),
    )


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge-replicate padding."""
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += p[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out / 9.0


def split_sizes(n: int, fracs: tuple[float, ...]) -> list[int]:
    """Floor each share, then hand leftovers to the largest remainders
    (ties go to the earlier split)."""
    floors = [math.floor(n * f) for f in fracs]
    rem = n - sum(floors)
    order = sorted(range(len(fracs)), key=lambda i: (-(n * fracs[i] - floors[i]), i))
    for i in range(rem):
        floors[order[i]] += 1
    return floors


def default_cross_combos(clients: dict[str, tuple]) -> tuple[tuple[str, str], ...]:
    """All (used color, used windshield option) pairs no client is allowed."""
    colors = sorted({color for combos in clients.values() for color, _ in combos})
    shields = sorted({shield for combos in clients.values() for _, shield in combos})
    allowed = {c for combos in clients.values() for c in combos}
    return tuple(
        (color, shield)
        for color in colors
        for shield in shields
        if (color, shield) not in allowed
    )


def build_partitions(spec: PartitionSpec) -> Partitions:
    """Generate and split the whole corpus deterministically from `spec`."""
    spec.validate()
    counter = 0

    def gen_batch(combos, count, backgrounds, brightness) -> list[Sample]:
        nonlocal counter
        out = []
        for i in range(count):
            color, shield = combos[i % len(combos)]
            scene = SceneSpec(
                body_color=color,
                windshield=shield,
                background_id=i % len(backgrounds),
                image_size=spec.image_size,
                backgrounds=backgrounds,
                brightness_range=brightness,
            )
            out.append(generate(scene, Rng(spec.seed, derive_stream(f"sample/{counter}"))))
            counter += 1
        return out

    clients: dict[str, ClientData] = {}
    for cid in sorted(spec.clients):
        combos = tuple(spec.clients[cid])
        samples = gen_batch(combos, spec.samples_per_client, BACKGROUNDS, (0.7, 1.3))
        order = Rng(spec.seed, derive_stream(f"split/{cid}")).permutation(len(samples))
        n_train, n_val, n_test = split_sizes(
            len(samples), (spec.train_frac, spec.val_frac, spec.test_frac)
        )
        shuffled = [samples[i] for i in order]
        clients[cid] = ClientData(
            train=shuffled[:n_train],
            val=shuffled[n_train : n_train + n_val],
            test=shuffled[n_train + n_val :],
        )

    cross_combos = (
        spec.cross_combos
        if spec.cross_combos is not None
        else default_cross_combos(spec.clients)
    )
    cross_empty = len(cross_combos) == 0
    cross = (
        gen_batch(cross_combos, spec.cross_samples, BACKGROUNDS, (0.7, 1.3))
        if not cross_empty
        else []
    )

    # domain shift: combinations every client already makes, but new
    # backgrounds and a wider brightness range
    seen_combos = tuple(sorted({c for combos in spec.clients.values() for c in combos}))
    shift = gen_batch(seen_combos, spec.shift_samples, SHIFT_BACKGROUNDS, (0.4, 1.6))

    return Partitions(
        clients=clients,
        cross_test=cross,
        domain_shift=shift,
        cross_combos=cross_combos,
        cross_empty=cross_empty,
        clients_spec={cid: tuple(spec.clients[cid]) for cid in spec.clients},
    )


def _image_to_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    raw = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes()


def _ppm_to_image(data: bytes, path: str) -> np.ndarray:
    # P6 header: three whitespace-separated integers after the magic, then
    # exactly one whitespace byte, then raw w*h*3 bytes (which may themselves
    # contain whitespace values, so only the header is tokenized)
    if not data.startswith(b"P6"):
        raise IoFailure(f"{path}: not a binary P6 pixmap")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoFailure(f"{path}: truncated PPM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as e:
            raise IoFailure(f"{path}: bad PPM header: {e}") from e
    w, h, maxval = fields
    if maxval != 255:
        raise IoFailure(f"{path}: unsupported maxval {maxval}")
    pos += 1  # the single whitespace byte after maxval
    raw = data[pos : pos + w * h * 3]
    if len(raw) < w * h * 3:
        raise IoFailure(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)


def format_label_line(box: BBox) -> str:
    return f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def parse_label_line(line: str, where: str = "label") -> BBox:
    fields = line.split()
    if len(fields) != 5:
        raise MalformedLabelLine(f"{where}: expected 5 fields, got {len(fields)}")
    try:
        class_id = int(fields[0])
        cx, cy, w, h = (float(v) for v in fields[1:])
    except ValueError as e:
        raise MalformedLabelLine(f"{where}: {e}") from e
    if class_id < 0:
        raise MalformedLabelLine(f"{where}: negative class id {class_id}")
    tol = 1e-5  # 6-decimal formatting can push corners out by < 1e-6
    if not (0 < w <= 1 and 0 < h <= 1):
        raise MalformedLabelLine(f"{where}: size out of range w={w} h={h}")
    if not (-tol <= cx - w / 2 and cx + w / 2 <= 1 + tol
            and -tol <= cy - h / 2 and cy + h / 2 <= 1 + tol):
        raise MalformedLabelLine(f"{where}: box not inside the image")
    return BBox(class_id, cx, cy, w, h)


def write_yolo(directory, samples, *, split: str | None = None,
               spec_echo: dict | None = None, seed: int | None = None) -> None:
    """Write samples as PPM images + YOLO labels + a manifest."""
    directory = os.fspath(directory)
    img_dir = os.path.join(directory, "images")
    lbl_dir = os.path.join(directory, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lbl_dir, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name = f"images/{i:05d}.ppm"
        lbl_name = f"labels/{i:05d}.txt"
        with open(os.path.join(directory, img_name), "wb") as f:
            f.write(_image_to_ppm(s.image))
        with open(os.path.join(directory, lbl_name), "w") as f:
            for box in s.boxes:
                f.write(format_label_line(box) + "\n")
        entries.append(
            {
                "index": i,
                "image": img_name,
                "label": lbl_name,
                "body_color": s.body_color,
                "windshield": s.windshield,
                "background_id": s.background_id,
            }
        )
    manifest = {
        "schema": "fedod-dataset/1",
        "split": split,
        "seed": seed,
        "spec": spec_echo,
        "count": len(entries),
        "samples": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_yolo(directory) -> list[Sample]:
    """Read a dataset directory written by write_yolo."""
    directory = os.fspath(directory)
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise IoFailure(f"cannot read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise IoFailure(f"{manifest_path}: invalid JSON: {e}") from e

    samples = []
    for entry in manifest.get("samples", []):
        img_path = os.path.join(directory, entry["image"])
        lbl_path = os.path.join(directory, entry["label"])
        try:
            with open(img_path, "rb") as f:
                image = _ppm_to_image(f.read(), img_path)
            with open(lbl_path) as f:
                lines = [ln for ln in (l.strip() for l in f) if ln]
        except OSError as e:
            raise IoFailure(f"cannot read sample files: {e}") from e
        boxes = [parse_label_line(ln, f"{lbl_path}:{i + 1}") for i, ln in enumerate(lines)]
        samples.append(
            Sample(
                image=image,
                boxes=boxes,
                body_color=entry.get("body_color", "unknown"),
                windshield=entry.get("windshield", NO_WINDSHIELD),
                background_id=entry.get("background_id", 0),
            )
        )
    return samples
