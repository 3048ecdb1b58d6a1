"""Dataset ingestion, splitting, augmentation, and synthetic icon corpora.

Icons are 8-bit grayscale rasters stored as binary PGM (P5); PNG decoding
is available behind a feature switch (requires Pillow). The synthetic
generator replaces non-redistributable online icon data: every generated
collection shares one frame motif and stroke style while the inner glyph
(the icon's "meaning", recorded as its keyword) varies per icon.
"""

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import FormatError, TruncatedFileError
from .tensor import Tensor

SPLITS = ("train", "val", "test")


@dataclass
class IconRecord:
    id: str
    path: str
    collection: str
    split: str = "train"
    keyword: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    provenance: str = ""
    root: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise FormatError(f"duplicate icon id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self):
        return len(self.records)

    def by_id(self, icon_id: str) -> IconRecord:
        for rec in self.records:
            if rec.id == icon_id:
                return rec
        raise KeyError(icon_id)

    def ids(self):
        return [r.id for r in self.records]

    def subset(self, split: str) -> "Manifest":
        return Manifest(
            [r for r in self.records if r.split == split],
            provenance=self.provenance,
            root=self.root,
        )

    def by_collection(self) -> dict:
        """Collection label -> records, both in manifest order."""
        out: dict[str, list] = {}
        for rec in self.records:
            out.setdefault(rec.collection, []).append(rec)
        return out

    def resolve_path(self, rec: IconRecord) -> Path:
        p = Path(rec.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse a line-delimited JSON manifest.

    The first line may be a {"provenance": ...} header; every other line
    is one icon record. Malformed lines and duplicate ids raise with the
    offending line number.
    """
    path = Path(path)
    records = []
    provenance = ""
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if lineno == 1 and set(obj) == {"provenance"}:
                provenance = obj["provenance"]
                continue
            for key in ("id", "path", "collection"):
                if key not in obj:
                    raise FormatError(f"{path}:{lineno}: missing {key!r}")
            if obj["id"] in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            records.append(
                IconRecord(
                    id=obj["id"],
                    path=obj["path"],
                    collection=obj["collection"],
                    split=obj.get("split", "train"),
                    keyword=obj.get("keyword", ""),
                )
            )
    manifest = Manifest(records, provenance=provenance, root=path.parent)
    if check_files:
        missing = [r.id for r in records if not manifest.resolve_path(r).exists()]
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} manifest entries point to missing files, "
                f"first: {missing[0]!r}"
            )
    return manifest


def save_manifest(manifest: Manifest, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if manifest.provenance:
            fh.write(json.dumps({"provenance": manifest.provenance}) + "\n")
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "path": rec.path,
                        "collection": rec.collection,
                        "split": rec.split,
                        "keyword": rec.keyword,
                    }
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# image IO


def decode_pgm(raw: bytes) -> np.ndarray:
    """Binary PGM (P5) bytes -> float32 [0,1] array of shape [H,W]."""
    if raw[:2] != b"P5":
        raise FormatError(f"not a P5 PGM (starts {raw[:2]!r})")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"bad PGM header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit PGM supported (maxval {maxval})")
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise TruncatedFileError(
            f"PGM body has {len(body)} bytes, expected {width * height}"
        )
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float32) / maxval


def encode_pgm(img: np.ndarray) -> bytes:
    """uint8 [H,W] array -> binary PGM bytes."""
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes()


def write_pgm(path, img: np.ndarray):
    Path(path).write_bytes(encode_pgm(img))


def decode_png(raw: bytes) -> np.ndarray:
    """PNG bytes -> float32 [0,1] grayscale array (feature switch: Pillow)."""
    try:
        from PIL import Image
    except ImportError as exc:
        raise FormatError("PNG support requires pillow") from exc
    import io

    with Image.open(io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def read_image(path) -> Tensor:
    """Load an icon image as a [1,H,W] float tensor with values in [0,1]."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".png":
        img = decode_png(raw)
    else:
        img = decode_pgm(raw)
    return Tensor(img[None, :, :])


# ---------------------------------------------------------------------------
# splitting and train-time transforms


def stratified_split(manifest: Manifest, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> Manifest:
    """Assign splits per collection, proportional to ``fractions``.

    Subsets are mutually exclusive and jointly exhaustive. Leftover slots
    after flooring go to the subsets with the largest fractional
    remainders (ties favour train, then val). Collections with fewer than
    3 records go entirely to train, with a warning.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for collection, records in manifest.by_collection().items():
        n = len(records)
        if n == 0:
            continue
        if n < 3:
            warnings.warn(
                f"collection {collection!r} has {n} < 3 records; assigning all to train"
            )
            for rec in records:
                assignment[rec.id] = "train"
            continue
        counts = [int(math.floor(f * n)) for f in fractions]
        remainders = [f * n - c for f, c in zip(fractions, counts)]
        for _ in range(n - sum(counts)):
            best = max(range(3), key=lambda i: (remainders[i], -i))
            counts[best] += 1
            remainders[best] = -1.0
        order = rng.permutation(n)
        cursor = 0
        for split, count in zip(SPLITS, counts):
            for k in order[cursor : cursor + count]:
                assignment[records[int(k)].id] = split
            cursor += count
    new_records = [replace(rec, split=assignment[rec.id]) for rec in manifest.records]
    return Manifest(new_records, provenance=manifest.provenance, root=manifest.root)


def augment(img: Tensor, rng: np.random.Generator) -> Tensor:
    """Random lossless augmentation: maybe rotate by a multiple of 90
    degrees, maybe flip. Pure pixel permutation."""
    data = img.data
    if rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        data = np.rot90(data, k=k, axes=(1, 2))
    if rng.random() < 0.5:
        axis = 2 if rng.random() < 0.5 else 1
        data = np.flip(data, axis=axis)
    return Tensor(np.ascontiguousarray(data))


def corner_crop(img: Tensor, size: int, corner: Optional[int] = None, rng=None) -> Tensor:
    """One of the four corner-aligned size x size windows (0=TL 1=TR 2=BL 3=BR)."""
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    if corner is None:
        corner = int(rng.integers(0, 4))
    if corner not in (0, 1, 2, 3):
        raise ValueError(f"corner must be 0..3, got {corner}")
    top = 0 if corner in (0, 1) else h - size
    left = 0 if corner in (0, 2) else w - size
    return Tensor(np.ascontiguousarray(img.data[:, top : top + size, left : left + size]))


def resize_bilinear(img: Tensor, target: int) -> Tensor:
    """Corner-aligned bilinear resample of [1,H,W] to [1,target,target]."""
    if target < 1:
        raise ValueError("target must be >= 1")
    _, h, w = img.shape
    data = img.data[0]
    if (h, w) == (target, target):
        return Tensor(data[None].copy())

    def src_coords(n_src, n_dst):
        if n_dst == 1:
            return np.zeros(1)
        return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    ys = src_coords(h, target)
    xs = src_coords(w, target)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None].astype(np.float32)
    fx = (xs - x0)[None, :].astype(np.float32)
    top = data[np.ix_(y0, x0)] * (1 - fx) + data[np.ix_(y0, x1)] * fx
    bot = data[np.ix_(y1, x0)] * (1 - fx) + data[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    return Tensor(out[None].astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic corpus generation

MOTIFS = ("circle-frame", "square-frame", "tag", "arrow", "notebook", "shield")

GLYPHS = (
    "dots-four",
    "dots-nine",
    "bars-two",
    "bars-three",
    "pillars",
    "plus",
    "saltire",
    "diamond",
    "peak",
    "valley",
    "ring",
    "target",
    "box",
    "quincunx",
    "chevron",
    "beacon",
)


@dataclass
class StyleSpec:
    """Per-collection rendering style; glyph varies per icon.

    ``filled`` selects solid vs hollow glyph rendering; the frame motif is
    always stroked so that the collection signature stays a thin shape
    cue rather than a dominant ink mass.
    """

    motif: str
    stroke_width: int
    filled: bool
    corner_radius: int
    jitter_seed: int

    def key(self):
        return (self.motif, self.stroke_width, self.filled, self.corner_radius)


class Raster:
    """Minimal scanline rasterizer on a uint8 canvas (255 = paper)."""

    def __init__(self, size: int):
        self.size = size
        self.px = np.full((size, size), 255, dtype=np.uint8)

    def ink_ratio(self) -> float:
        return float((self.px < 128).mean())

    def fill_disk(self, cx, cy, r, value):
        if r <= 0:
            return
        y0, y1 = max(0, int(math.ceil(cy - r))), min(self.size - 1, int(math.floor(cy + r)))
        for y in range(y0, y1 + 1):
            dy = y - cy
            half = math.sqrt(max(r * r - dy * dy, 0.0))
            x0 = max(0, int(math.ceil(cx - half)))
            x1 = min(self.size - 1, int(math.floor(cx + half)))
            if x1 >= x0:
                self.px[y, x0 : x1 + 1] = value

    def fill_rect(self, x0, y0, x1, y1, value, radius=0):
        x0i, y0i = max(0, int(round(x0))), max(0, int(round(y0)))
        x1i, y1i = min(self.size - 1, int(round(x1))), min(self.size - 1, int(round(y1)))
        if x1i < x0i or y1i < y0i:
            return
        if radius <= 0:
            self.px[y0i : y1i + 1, x0i : x1i + 1] = value
            return
        r = min(radius, (x1i - x0i) // 2, (y1i - y0i) // 2)
        for y in range(y0i, y1i + 1):
            inset = 0
            if y < y0i + r:
                dy = y0i + r - y
                inset = r - math.sqrt(max(r * r - dy * dy, 0.0))
            elif y > y1i - r:
                dy = y - (y1i - r)
                inset = r - math.sqrt(max(r * r - dy * dy, 0.0))
            a = int(math.ceil(x0i + inset))
            b = int(math.floor(x1i - inset))
            if b >= a:
                self.px[y, a : b + 1] = value

    def fill_polygon(self, pts, value):
        """Even-odd scanline fill of a closed polygon ([(x,y), ...])."""
        ys = [p[1] for p in pts]
        y0 = max(0, int(math.floor(min(ys))))
        y1 = min(self.size - 1, int(math.ceil(max(ys))))
        n = len(pts)
        for y in range(y0, y1 + 1):
            yc = y + 0.5
            xs = []
            for i in range(n):
                (ax, ay), (bx, by) = pts[i], pts[(i + 1) % n]
                if (ay <= yc < by) or (by <= yc < ay):
                    xs.append(ax + (yc - ay) * (bx - ax) / (by - ay))
            xs.sort()
            for j in range(0, len(xs) - 1, 2):
                a = max(0, int(math.ceil(xs[j] - 0.5)))
                b = min(self.size - 1, int(math.floor(xs[j + 1] - 0.5)))
                if b >= a:
                    self.px[y, a : b + 1] = value

    def stroke_polygon(self, pts, width, value):
        """Outline by filling the polygon and knocking out an inset copy."""
        self.fill_polygon(pts, value)
        cx = sum(p[0] for p in pts) / len(pts)
        cy = sum(p[1] for p in pts) / len(pts)
        d = sum(math.hypot(p[0] - cx, p[1] - cy) for p in pts) / len(pts)
        f = max(0.0, 1.0 - width / max(d, 1e-9))
        inner = [(cx + (x - cx) * f, cy + (y - cy) * f) for x, y in pts]
        self.fill_polygon(inner, 255 if value == 0 else 0)


def _scaled(pts, size):
    return [(x * size, y * size) for x, y in pts]


def _draw_motif(canvas: Raster, style: StyleSpec, ox: float = 0.0, oy: float = 0.0, sc: float = 1.0):
    """Stroke the collection frame along the canvas border.

    Every motif is a border-hugging loop plus a small motif-specific
    detail (corner treatment, binder ticks, notch-and-hole, point tab,
    bottom taper). Frames of different collections therefore share most
    of their pixels: the collection signature is a localized shape cue,
    not an ink-mass cue. ``ox``/``oy``/``sc`` apply per-icon jitter so
    two icons of one collection never have pixel-identical frames.
    """
    s = canvas.size
    w = style.stroke_width
    ink = 0
    half = s / 2

    def tx(x):
        return half + (x - half) * sc + ox

    def ty(y):
        return half + (y - half) * sc + oy

    def loop(radius):
        m = 0.04 * s
        canvas.fill_rect(tx(m), ty(m), tx(s - m), ty(s - m), ink, radius=int(radius))
        canvas.fill_rect(
            tx(m) + w, ty(m) + w, tx(s - m) - w, ty(s - m) - w, 255,
            radius=max(0, int(radius) - w),
        )

    if style.motif == "circle-frame":
        loop(0.46 * s * sc)
    elif style.motif == "square-frame":
        loop(style.corner_radius)
    elif style.motif == "notebook":
        loop(0.12 * s)
        for fx in (0.30, 0.50, 0.70):
            canvas.fill_rect(
                tx(fx * s) - max(1, w // 2), ty(0.012 * s), tx(fx * s) + max(1, w // 2), ty(0.12 * s), ink
            )
    elif style.motif == "tag":
        loop(0.10 * s)
        # notch cut into the right edge plus the tag hole beside it
        canvas.fill_polygon(
            [
                (tx(0.985 * s), ty(0.38 * s)), (tx(0.80 * s), ty(0.50 * s)),
                (tx(0.985 * s), ty(0.62 * s)),
            ],
            255,
        )
        canvas.fill_disk(tx(0.88 * s), ty(0.50 * s), max(2.0, 0.045 * s), ink)
    elif style.motif == "arrow":
        loop(0.10 * s)
        # point tab on the inside of the right edge
        canvas.fill_polygon(
            [
                (tx(0.96 * s), ty(0.36 * s)), (tx(0.78 * s), ty(0.50 * s)),
                (tx(0.96 * s), ty(0.64 * s)),
            ],
            ink,
        )
    elif style.motif == "shield":
        loop(0.10 * s)
        # bottom taper: white wedges squeeze the lower border to a point
        for pts in (
            [(tx(0.02 * s), ty(0.70 * s)), (tx(0.5 * s), ty(0.99 * s)), (tx(0.02 * s), ty(0.99 * s))],
            [(tx(0.98 * s), ty(0.70 * s)), (tx(0.5 * s), ty(0.99 * s)), (tx(0.98 * s), ty(0.99 * s))],
        ):
            canvas.fill_polygon(pts, 255)
        a = (tx(0.02 * s), ty(0.70 * s))
        b = (tx(0.5 * s), ty(0.96 * s))
        c = (tx(0.98 * s), ty(0.70 * s))
        canvas.fill_polygon([a, b, (b[0], b[1] + w * 1.4), (a[0], a[1] + w * 1.4)], ink)
        canvas.fill_polygon([c, b, (b[0], b[1] + w * 1.4), (c[0], c[1] + w * 1.4)], ink)
    else:
        raise ValueError(f"unknown motif {style.motif!r}")


def _draw_glyph(canvas: Raster, glyph: str, cx, cy, half, width, filled):
    """Draw one glyph centered at (cx, cy). Glyphs carry most of the icon's
    ink; ``filled`` switches the large shapes between solid and hollow."""
    s2 = half
    w = width
    ink = 0

    def bar(x0, y0, x1, y1):
        canvas.fill_rect(x0, y0, x1, y1, ink)

    def disk(x, y, r):
        canvas.fill_disk(x, y, r, ink)
        if not filled and r > 2.5 * w:
            canvas.fill_disk(x, y, r - w, 255)

    def polygon(pts):
        if filled:
            canvas.fill_polygon(pts, ink)
        else:
            canvas.stroke_polygon(pts, w, ink)

    if glyph == "dots-four":
        for fx in (-0.55, 0.55):
            for fy in (-0.55, 0.55):
                disk(cx + fx * s2, cy + fy * s2, 0.38 * s2)
    elif glyph == "dots-nine":
        for fx in (-0.72, 0.0, 0.72):
            for fy in (-0.72, 0.0, 0.72):
                disk(cx + fx * s2, cy + fy * s2, 0.25 * s2)
    elif glyph == "bars-two":
        for fy in (-0.5, 0.5):
            bar(cx - s2, cy + fy * s2 - 0.22 * s2, cx + s2, cy + fy * s2 + 0.22 * s2)
    elif glyph == "bars-three":
        for fy in (-0.7, 0.0, 0.7):
            bar(cx - s2, cy + fy * s2 - 0.14 * s2, cx + s2, cy + fy * s2 + 0.14 * s2)
    elif glyph == "pillars":
        for fx in (-0.7, 0.0, 0.7):
            bar(cx + fx * s2 - 0.14 * s2, cy - s2, cx + fx * s2 + 0.14 * s2, cy + s2)
    elif glyph == "plus":
        bar(cx - s2, cy - 0.3 * s2, cx + s2, cy + 0.3 * s2)
        bar(cx - 0.3 * s2, cy - s2, cx + 0.3 * s2, cy + s2)
    elif glyph == "saltire":
        d = 0.9 * s2
        t = 0.3 * s2
        canvas.fill_polygon(
            [(cx - d - t, cy - d + t), (cx - d + t, cy - d - t), (cx + d + t, cy + d - t), (cx + d - t, cy + d + t)],
            ink,
        )
        canvas.fill_polygon(
            [(cx + d - t, cy - d - t), (cx + d + t, cy - d + t), (cx - d + t, cy + d + t), (cx - d - t, cy + d - t)],
            ink,
        )
    elif glyph == "diamond":
        polygon([(cx, cy - s2), (cx + s2, cy), (cx, cy + s2), (cx - s2, cy)])
    elif glyph == "peak":
        polygon([(cx, cy - s2), (cx + s2, cy + 0.85 * s2), (cx - s2, cy + 0.85 * s2)])
    elif glyph == "valley":
        polygon([(cx - s2, cy - 0.85 * s2), (cx + s2, cy - 0.85 * s2), (cx, cy + s2)])
    elif glyph == "ring":
        canvas.fill_disk(cx, cy, s2, ink)
        canvas.fill_disk(cx, cy, (0.45 if filled else 0.72) * s2, 255)
    elif glyph == "target":
        canvas.fill_disk(cx, cy, s2, ink)
        canvas.fill_disk(cx, cy, 0.66 * s2, 255)
        canvas.fill_disk(cx, cy, 0.33 * s2, ink)
    elif glyph == "box":
        canvas.fill_rect(cx - s2, cy - s2, cx + s2, cy + s2, ink)
        inset = (0.45 if filled else 0.75) * s2
        canvas.fill_rect(cx - inset, cy - inset, cx + inset, cy + inset, 255)
    elif glyph == "quincunx":
        disk(cx, cy, 0.34 * s2)
        for fx in (-0.72, 0.72):
            for fy in (-0.72, 0.72):
                disk(cx + fx * s2, cy + fy * s2, 0.3 * s2)
    elif glyph == "chevron":
        t = 0.42 * s2
        for off in (-0.45 * s2, 0.45 * s2):
            canvas.fill_polygon(
                [
                    (cx - s2, cy + off + t), (cx, cy + off - 0.4 * s2 + t), (cx + s2, cy + off + t),
                    (cx + s2, cy + off), (cx, cy + off - 0.4 * s2), (cx - s2, cy + off),
                ],
                ink,
            )
    elif glyph == "beacon":
        bar(cx - 0.22 * s2, cy - s2, cx + 0.22 * s2, cy + 0.3 * s2)
        disk(cx, cy + 0.66 * s2, 0.36 * s2)
    else:
        raise ValueError(f"unknown glyph {glyph!r}")


def render_icon(size: int, style: StyleSpec, glyph: str, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one icon: thin collection frame plus a dominant glyph.

    The glyph position and scale jitter per icon, so two icons sharing a
    glyph are never pixel-identical.
    """
    canvas = Raster(size)
    fmax = max(1, round(0.03 * size))
    _draw_motif(
        canvas,
        style,
        ox=int(rng.integers(-fmax, fmax + 1)),
        oy=int(rng.integers(-fmax, fmax + 1)),
        sc=0.93 + 0.1 * rng.random(),
    )
    jmax = max(1, round(0.06 * size))
    cx = size / 2 + int(rng.integers(-jmax, jmax + 1))
    cy = size / 2 + int(rng.integers(-jmax, jmax + 1))
    half = 0.29 * size * (0.72 + 0.42 * rng.random())
    gw = max(1.0, style.stroke_width * 1.0)
    _draw_glyph(canvas, glyph, cx, cy, half, gw, style.filled)
    return canvas.px


def _style_for(index: int, rng: np.random.Generator, size: int) -> StyleSpec:
    stroke = int(rng.choice([2, 3])) * max(1, size // 64)
    return StyleSpec(
        motif=MOTIFS[index % len(MOTIFS)],
        stroke_width=stroke,
        filled=bool(rng.random() < 0.5),
        corner_radius=int(rng.choice([0, 2, 4])) * max(1, size // 64),
        jitter_seed=int(rng.integers(0, 2**31)),
    )


def generate_synthetic_dataset(
    n_collections: int,
    per_collection: int,
    image_size: int,
    seed: int,
    out_dir,
) -> Manifest:
    """Write a deterministic synthetic corpus and its manifest.

    Collections share motif/stroke/fill/corner-radius; the glyph (stored
    as the record keyword) varies per icon and repeats across collections.
    Identical arguments produce byte-identical files.
    """
    if n_collections < 2 or per_collection < 2:
        raise ValueError("need at least 2 collections of at least 2 icons")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    styles: list[StyleSpec] = []
    used = set()
    for c in range(n_collections):
        style = _style_for(c, rng, image_size)
        while style.key() in used:
            style = _style_for(c, rng, image_size)
        used.add(style.key())
        styles.append(style)

    records = []
    for c, style in enumerate(styles):
        collection = f"c{c:03d}"
        icon_rng = np.random.default_rng(style.jitter_seed)
        for i in range(per_collection):
            glyph = GLYPHS[i % len(GLYPHS)]
            px = render_icon(image_size, style, glyph, icon_rng)
            icon_id = f"{collection}-{i:03d}"
            filename = f"{icon_id}.pgm"
            write_pgm(out_dir / filename, px)
            records.append(
                IconRecord(
                    id=icon_id,
                    path=filename,
                    collection=collection,
                    split="train",
                    keyword=glyph,
                )
            )
    manifest = Manifest(
        records,
        provenance=f"synthetic motif corpus (seed={seed}, size={image_size})",
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_icon(manifest: Manifest, rec_or_id) -> Tensor:
    rec = manifest.by_id(rec_or_id) if isinstance(rec_or_id, str) else rec_or_id
    return read_image(manifest.resolve_path(rec))
