"""Procedural training corpus and pair construction.

Panoramas are synthesized from analytic radiance fields (sky gradients, sun
disks, interior lamps, checkered ground), so high-resolution HDR ground truth
exists at any sampling density.  Pair construction mirrors the target
pipeline: tone map, calibrate once per panorama, then crop scale-matched
HDR/LDR patches and draw pixel samples with their sphere coordinates.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .raster import (
    CalibrationError,
    HdrImage,
    LdrImage,
    calibrate,
    reinhard_tonemap,
    resample_area,
    rotate_horizontal,
)
from .sphere import pano_angle_grid, pixel_to_sphere
from .sritmo import PatchExtent

SCENE_CLASSES = ("sky-gradient", "sun-disk", "interior-lamp", "checker-ground")

PAIR_MAGIC = b"T2LPAIR"
PAIR_VERSION = 1


class DataError(ValueError):
    pass


# palette words shared between text tags and colors, so same-class scenes
# correlate in both toy embedding spaces
_COLOR_WORDS = {
    "azure": (0.25, 0.45, 0.85),
    "amber": (0.9, 0.65, 0.25),
    "rose": (0.85, 0.4, 0.45),
    "teal": (0.2, 0.65, 0.6),
    "violet": (0.5, 0.35, 0.8),
    "olive": (0.5, 0.55, 0.25),
    "slate": (0.35, 0.4, 0.5),
    "coral": (0.95, 0.5, 0.35),
}

_TAG_TEMPLATES = {
    "sky-gradient": "clear {a} sky fading to {b} haze over open ground",
    "sun-disk": "bright sun disk blazing in a {a} sky above {b} terrain",
    "interior-lamp": "indoor room with {a} walls lit by a glowing ceiling lamp",
    "checker-ground": "checkered {a} and {b} ground under a {a} sky",
}


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one procedural panorama; synthesis is deterministic."""

    scene_class: str
    palette: tuple            # ((word, rgb), (word, rgb))
    sun_theta: float = 0.0
    sun_phi: float = -0.9     # negative latitude: upper hemisphere
    sun_radiance: float = 50.0
    sun_radius: float = 0.12
    text_tag: str = ""

    def __post_init__(self):
        if self.scene_class not in SCENE_CLASSES:
            raise DataError(f"unknown scene class {self.scene_class!r}")
        if self.sun_radiance <= 1.0:
            raise DataError("sun radiance must exceed 1 (true HDR content)")
        if not self.text_tag:
            a, b = self.palette[0][0], self.palette[1][0]
            object.__setattr__(
                self, "text_tag", _TAG_TEMPLATES[self.scene_class].format(a=a, b=b)
            )

    def has_sun(self):
        return self.scene_class in ("sun-disk", "interior-lamp")


def random_scene_spec(rng, scene_class=None):
    scene_class = scene_class or SCENE_CLASSES[rng.integers(0, len(SCENE_CLASSES))]
    words = list(_COLOR_WORDS)
    ia = int(rng.integers(0, len(words)))
    ib = int(rng.integers(0, len(words) - 1))
    ib = ib + 1 if ib >= ia else ib
    return SceneSpec(
        scene_class=scene_class,
        palette=((words[ia], _COLOR_WORDS[words[ia]]),
                 (words[ib], _COLOR_WORDS[words[ib]])),
        sun_theta=float(rng.uniform(-math.pi, math.pi)),
        sun_phi=float(rng.uniform(-1.2, -0.35)),
        sun_radiance=float(rng.uniform(20.0, 80.0)),
        sun_radius=float(rng.uniform(0.08, 0.16)),
    )


def _smoothstep(x):
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _radiance_field(spec, theta, phi, edge=0.01):
    """Analytic radiance at (theta, phi) arrays; phi < 0 is the sky half."""
    ca, cb = np.array(spec.palette[0][1]), np.array(spec.palette[1][1])
    sky_t = ((phi + math.pi / 2) / (math.pi / 2))[..., None]  # 0 zenith, 1 horizon
    sky = ca * (1.0 - 0.6 * sky_t) + cb * 0.6 * sky_t
    ground_t = (phi / (math.pi / 2))[..., None]
    ground = cb * (0.55 - 0.3 * ground_t) + ca * 0.1
    above = (phi < 0.0)[..., None]
    out = np.where(above, sky, ground)

    if spec.scene_class == "interior-lamp":
        bands = 0.5 + 0.35 * np.sin(3.0 * theta)[..., None]
        walls = ca * bands + cb * (1.0 - bands) * 0.5
        floor = cb * 0.35 + ca * 0.1
        out = np.where(above, walls, floor)

    if spec.scene_class == "checker-ground":
        checker = np.sin(8.0 * theta) * np.sin(10.0 * phi)
        blend = _smoothstep((checker / 0.3 + 1.0) / 2.0)[..., None]
        pattern = ca * blend + cb * (1.0 - blend)
        out = np.where(above, out, 0.2 * out + 0.8 * pattern)

    if spec.has_sun():
        v = np.stack(
            [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)],
            axis=-1,
        )
        sp = spec.sun_phi if spec.scene_class == "sun-disk" else -1.35
        vs = np.array(
            [math.cos(sp) * math.cos(spec.sun_theta),
             math.cos(sp) * math.sin(spec.sun_theta),
             math.sin(sp)]
        )
        dist = np.arccos(np.clip(v @ vs, -1.0, 1.0))
        disk = _smoothstep((spec.sun_radius - dist) / edge)[..., None]
        sun_color = np.array([1.0, 0.95, 0.85]) * spec.sun_radiance
        out = out * (1.0 - disk) + sun_color * disk
    return out


def synth_pano(spec, h, w):
    """Rasterize a SceneSpec at h x w (2:1 aspect enforced)."""
    if w != 2 * h:
        raise DataError(f"panorama aspect must be 1:2, got {h}x{w}")
    theta, phi = pano_angle_grid(h, w)
    edge = 2.0 * math.pi / w  # one-pixel antialias band at the sun rim
    return HdrImage(_radiance_field(spec, theta, phi, edge=edge))


def synth_patch(spec, extent, out_hw):
    """Rasterize just a footprint of the scene at an arbitrary resolution.

    This is the analytic ground truth used to evaluate out-of-range upscale
    factors.
    """
    gi, gj = np.meshgrid(np.arange(out_hw[0]), np.arange(out_hw[1]), indexing="ij")
    theta, phi = extent.angles_at(out_hw, gi, gj)
    edge = 2.0 * math.pi / extent.pano_hw[1] * extent.size[1] / out_hw[1]
    return HdrImage(_radiance_field(spec, theta, phi, edge=max(edge, 1e-4)))


# ---------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class ScenePair:
    """One training record: low-res LDR input and sampled hi-res targets."""

    ldr_lr: LdrImage
    extent: PatchExtent
    sample_ij: np.ndarray    # (n, 2) pano pixel indices of the samples
    theta: np.ndarray        # (n,)
    phi: np.ndarray          # (n,)
    hdr: np.ndarray          # (n, 3) calibrated linear radiance
    ldr_hr: np.ndarray       # (n, 3) tone-mapped values at the same pixels
    beta: float
    source_id: str

    def __post_init__(self):
        if self.beta < 1.0:
            raise DataError(f"scale factor must be >= 1, got {self.beta}")
        if np.any(self.hdr < 0.0):
            raise DataError("negative radiance in samples")


def build_pairs(hdr, count, rng, base=32, sigma=0.83, source_id="scene",
                calib_policy="skip", beta_range=(1.0, 4.0)):
    """Cut `count` scale-matched training pairs from one panorama.

    Tone mapping and calibration happen once, before any cropping.  Each pair
    draws a scale factor, crops aligned HDR/LDR patches, box-downsamples the
    LDR to the base size and samples base^2 distinct pixels of the crop.  On
    calibration failure the panorama is skipped (or kept uncalibrated when
    `calib_policy` is "identity").
    """
    h, w = hdr.height, hdr.width
    ldr = reinhard_tonemap(hdr)
    try:
        hdr_cal = calibrate(hdr, ldr, sigma)
    except CalibrationError:
        if calib_policy == "identity":
            hdr_cal = hdr
        elif calib_policy == "skip":
            return []
        else:
            raise
    pairs = []
    for _ in range(count):
        beta = float(rng.uniform(*beta_range))
        crop = int(round(base * beta))
        crop = min(crop, h, w)
        beta = crop / base
        oi = int(rng.integers(0, h - crop + 1))
        oj = int(rng.integers(0, w - crop + 1))
        ldr_patch = LdrImage(ldr.pixels[oi : oi + crop, oj : oj + crop])
        ldr_lr = ldr_patch if crop == base else resample_area(ldr_patch, base, base)
        n = base * base
        flat = rng.choice(crop * crop, size=n, replace=False)
        pi, pj = np.divmod(flat, crop)
        ii, jj = oi + pi, oj + pj
        theta, phi = pixel_to_sphere(ii, jj, h, w)
        pairs.append(
            ScenePair(
                ldr_lr=ldr_lr,
                extent=PatchExtent((h, w), (oi, oj), (crop, crop)),
                sample_ij=np.stack([ii, jj], axis=1).astype(np.int64),
                theta=theta,
                phi=phi,
                hdr=hdr_cal.pixels[ii, jj].astype(np.float64),
                ldr_hr=ldr.pixels[ii, jj].astype(np.float64),
                beta=beta,
                source_id=source_id,
            )
        )
    return pairs


def augment_rotations(pano, copies=10):
    """Evenly spaced circular rotations; the identity copy is dropped.

    Returns [(shift_px, rotated_image), ...] with w/copies spacing, rounded.
    """
    w = pano.pixels.shape[1]
    out = []
    seen = set()
    for k in range(1, copies + 1):
        shift = int(round(k * w / copies)) % w
        if shift == 0 or shift in seen:
            continue
        seen.add(shift)
        out.append((shift, rotate_horizontal(pano, shift)))
    return out


def make_split(scene_ids, train_frac, seed):
    """Disjoint train/test scene split; rotations follow their source scene."""
    ids = list(scene_ids)
    if not ids:
        raise DataError("empty corpus")
    if not 0.0 < train_frac <= 1.0:
        raise DataError(f"train fraction must be in (0, 1], got {train_frac}")
    if train_frac < 1.0 and len(ids) < 2:
        raise DataError("cannot split a single-scene corpus")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    n_train = int(round(train_frac * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - (1 if train_frac < 1.0 else 0))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


# ---------------------------------------------------------------------------
# corpus directory


@dataclass
class CorpusEntry:
    scene_id: str
    shift: int
    split: str


def build_corpus(out_dir, n_scenes, pano_hw, seed, rotations=10, train_frac=0.8):
    """Write scenes/<id>.hdr + .json, ldr/<id>.png and manifest.txt.

    Rotated copies are manifest rows, not files; loaders re-derive them from
    the base panorama.  Returns the manifest entries.
    """
    from pathlib import Path

    from .raster import save_png
    from .rgbe import save_hdr

    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "ldr").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    specs = {}
    for i in range(n_scenes):
        cls = SCENE_CLASSES[i % len(SCENE_CLASSES)]
        sid = f"scene{i:03d}"
        specs[sid] = random_scene_spec(rng, cls)
    train, test = make_split(sorted(specs), train_frac, seed)
    split_of = {sid: "train" for sid in train}
    split_of.update({sid: "test" for sid in test})

    entries = []
    for sid, spec in sorted(specs.items()):
        pano = synth_pano(spec, *pano_hw)
        save_hdr(pano, out / "scenes" / f"{sid}.hdr")
        (out / "scenes" / f"{sid}.json").write_text(json.dumps(asdict(spec), indent=1))
        save_png(reinhard_tonemap(pano), out / "ldr" / f"{sid}.png")
        entries.append(CorpusEntry(sid, 0, split_of[sid]))
        for shift, _ in augment_rotations(pano, rotations):
            entries.append(CorpusEntry(sid, shift, split_of[sid]))
    with open(out / "manifest.txt", "w") as fh:
        for e in entries:
            fh.write(f"{e.scene_id}\t{e.shift}\t{e.split}\n")
    return entries


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"manifest line {line_no}: expected 3 fields")
            entries.append(CorpusEntry(parts[0], int(parts[1]), parts[2]))
    return entries


def load_scene_spec(path):
    raw = json.loads(open(path).read())
    raw["palette"] = tuple((w, tuple(c)) for w, c in raw["palette"])
    return SceneSpec(**raw)


def load_corpus_pano(corpus_dir, entry):
    """Base panorama of an entry with its rotation applied."""
    from pathlib import Path

    from .rgbe import load_hdr

    pano = load_hdr(Path(corpus_dir) / "scenes" / f"{entry.scene_id}.hdr")
    return rotate_horizontal(pano, entry.shift)


# ---------------------------------------------------------------------------
# pair archive


def save_pairs(pairs, path):
    """Flat binary archive; see the struct layout inline.

    Header: magic "T2LPAIR", u8 version, u32 count.  Record: u16 id length +
    UTF-8 id, f32 beta, u32 pano_h/pano_w/origin_i/origin_j/crop/base/n,
    then base*base*3 f32 LDR input pixels, n u32 flat sample indices
    (row-major into the panorama), n*3 f32 HDR values, n*3 f32 LDR values.
    All little-endian; angles are recomputed from indices on load.
    """
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<BI", PAIR_VERSION, len(pairs)))
        for p in pairs:
            sid = p.source_id.encode("utf-8")
            base = p.ldr_lr.height
            n = p.theta.shape[0]
            ph, pw = p.extent.pano_hw
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(
                struct.pack(
                    "<fIIIIIII",
                    p.beta,
                    ph,
                    pw,
                    p.extent.origin[0],
                    p.extent.origin[1],
                    p.extent.size[0],
                    base,
                    n,
                )
            )
            fh.write(p.ldr_lr.pixels.astype("<f4").tobytes())
            flat = (p.sample_ij[:, 0] * pw + p.sample_ij[:, 1]).astype("<u4")
            fh.write(flat.tobytes())
            fh.write(p.hdr.astype("<f4").tobytes())
            fh.write(p.ldr_hr.astype("<f4").tobytes())


def load_pairs(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(PAIR_MAGIC)] != PAIR_MAGIC:
        raise DataError(f"{path}: bad pair archive magic")
    version, count = struct.unpack_from("<BI", raw, len(PAIR_MAGIC))
    if version != PAIR_VERSION:
        raise DataError(f"{path}: unsupported pair archive version {version}")
    pos = len(PAIR_MAGIC) + 5
    pairs = []
    for i in range(count):
        try:
            (sid_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            sid = raw[pos : pos + sid_len].decode("utf-8")
            pos += sid_len
            beta, ph, pw, oi, oj, crop, base, n = struct.unpack_from("<fIIIIIII", raw, pos)
            pos += 32
            ldr_lr = np.frombuffer(raw, "<f4", base * base * 3, pos).reshape(base, base, 3)
            pos += base * base * 3 * 4
            flat = np.frombuffer(raw, "<u4", n, pos).astype(np.int64)
            pos += n * 4
            hdr = np.frombuffer(raw, "<f4", n * 3, pos).reshape(n, 3).astype(np.float64)
            pos += n * 3 * 4
            ldr_hr = np.frombuffer(raw, "<f4", n * 3, pos).reshape(n, 3).astype(np.float64)
            pos += n * 3 * 4
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated record {i} at byte {pos}: {exc}") from None
        ii, jj = np.divmod(flat, pw)
        theta, phi = pixel_to_sphere(ii, jj, ph, pw)
        pairs.append(
            ScenePair(
                ldr_lr=LdrImage(ldr_lr.astype(np.float64)),
                extent=PatchExtent((ph, pw), (oi, oj), (crop, crop)),
                sample_ij=np.stack([ii, jj], axis=1),
                theta=theta,
                phi=phi,
                hdr=hdr,
                ldr_hr=ldr_hr,
                beta=beta,
                source_id=sid,
            )
        )
    return pairs
