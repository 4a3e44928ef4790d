"""Synthetic nested-tumor cases: volumes, labels, templated reports.

Each case is a pure function of ``(cfg.seed, index)``. Three axis-aligned
ellipsoids (WT, TC, ET) are nested by construction; four MRI-like channels
receive region-specific intensity offsets on top of Gaussian tissue noise,
and a report is assembled from phrase templates whose content mirrors the
label geometry (edema iff WT\\TC, necrosis iff TC\\ET, enhancement iff ET).

On-disk layout (one dataset root)::

    manifest.json          case ids, grid size, vocab file, generator config
    vocab.json             token -> id
    <case_id>/meta.json    shapes, dtypes, token ids, attention mask
    <case_id>/volume.f32   float32 little-endian, C-order, [4, D, H, W]
    <case_id>/labels.u8    uint8, C-order, [3, D, H, W] (WT, TC, ET)
    <case_id>/report.txt   UTF-8
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CaseIOError, ConfigError

CHANNELS = ("T1", "T1ce", "T2", "FLAIR")
REGIONS = ("WT", "TC", "ET")

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)

# Phrase lexicons. The coupling tests check membership of these exact phrases.
EDEMA_PHRASES = ("vasogenic edema", "peritumoral edema", "perilesional flair hyperintensity")
NECROSIS_PHRASES = ("central necrosis", "necrotic core", "cystic necrotic component")
ENHANCEMENT_PHRASES = ("ring-enhancing", "avid enhancement", "heterogeneous enhancement")

_SIZE_WORDS = ("small", "moderate", "large")
_SIDE_WORDS = ("left", "right")
_LOBE_WORDS = ("frontal", "parietal", "temporal", "occipital")

_TEMPLATES = {
    "intro": "a {size} mass is seen in the {side} {lobe} lobe.",
    "edema": "there is surrounding {edema}.",
    "no_edema": "the margins are sharp without perilesional signal change.",
    "necrosis": "the lesion shows {necrosis}.",
    "no_necrosis": "the core appears solid and homogeneous.",
    "enhancement_ring": "the lesion is ring-enhancing on post-contrast images.",
    "enhancement": "post-contrast images show {enhancement}.",
    "no_enhancement": "no contrast uptake is identified on post-contrast images.",
}

# Per-region additive offsets in (T1, T1ce, T2, FLAIR) order.
_BASE_LEVEL = np.array([1.0, 1.0, 0.8, 0.8])
_EDEMA_OFFSET = np.array([-0.3, 0.0, 1.0, 1.5])
_NECROSIS_OFFSET = np.array([-0.8, -0.3, 1.5, 0.5])
_ENHANCING_OFFSET = np.array([0.0, 1.5, 0.5, 0.5])
_VESSEL_OFFSET = np.array([0.0, 1.5, 0.0, 0.0])

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


@dataclass
class GeneratorConfig:
    grid_size: tuple[int, int, int] = (32, 32, 32)
    num_cases: int = 64
    seed: int = 0
    wt_radius: tuple[float, float] = (7.0, 10.0)
    tc_radius: tuple[float, float] = (4.0, 6.5)
    et_radius: tuple[float, float] = (2.0, 3.5)
    p_no_enhancement: float = 0.35
    p_no_necrosis: float = 0.2
    noise_sigma: float = 0.5
    # Per-case multiplier on the enhancing-tissue offset.
    enhancement_strength: tuple[float, float] = (0.5, 1.5)
    # Cases without ET carry a faint ET-like signal in the core; overlapping
    # the range above leaves ET presence ambiguous from the image alone.
    mimic_strength: tuple[float, float] = (0.3, 0.9)
    # Small enhancing blobs in healthy tissue; make ET depend on tumor context.
    n_vessels: int = 3
    token_length: int = 32

    def __post_init__(self):
        self.grid_size = tuple(int(n) for n in self.grid_size)
        self.wt_radius = tuple(float(r) for r in self.wt_radius)
        self.tc_radius = tuple(float(r) for r in self.tc_radius)
        self.et_radius = tuple(float(r) for r in self.et_radius)
        self.enhancement_strength = tuple(float(r) for r in self.enhancement_strength)
        self.mimic_strength = tuple(float(r) for r in self.mimic_strength)

    def validate(self) -> None:
        if len(self.grid_size) != 3 or min(self.grid_size) < 8:
            raise ConfigError(f"grid_size must be three dims >= 8, got {self.grid_size}", "grid_size")
        if self.num_cases < 1:
            raise ConfigError("num_cases must be >= 1", "num_cases")
        for name in ("wt_radius", "tc_radius", "et_radius"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}", name)
        if self.tc_radius[1] >= self.wt_radius[0]:
            raise ConfigError(
                f"tc_radius {self.tc_radius} must lie strictly below wt_radius {self.wt_radius}",
                "tc_radius",
            )
        if self.et_radius[1] >= self.tc_radius[0]:
            raise ConfigError(
                f"et_radius {self.et_radius} must lie strictly below tc_radius {self.tc_radius}",
                "et_radius",
            )
        if 2 * self.wt_radius[1] + 4 > min(self.grid_size):
            raise ConfigError(
                f"wt_radius {self.wt_radius} does not fit in grid {self.grid_size}", "wt_radius"
            )
        for name in ("p_no_enhancement", "p_no_necrosis"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}", name)
        for name in ("enhancement_strength", "mimic_strength"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}", name)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", "noise_sigma")
        if self.n_vessels < 0:
            raise ConfigError("n_vessels must be >= 0", "n_vessels")
        if self.token_length < 2:
            raise ConfigError("token_length must be >= 2", "token_length")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator config fields: {sorted(unknown)}", sorted(unknown)[0])
        return cls(**data)


@dataclass
class Vocabulary:
    token_to_id: dict[str, int] = field(default_factory=dict)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        words = sorted(set(tokens) - set(RESERVED))
        mapping = {tok: i for i, tok in enumerate(RESERVED)}
        mapping.update({w: i + len(RESERVED) for i, w in enumerate(words)})
        return cls(mapping)

    @classmethod
    def from_lexicon(cls) -> "Vocabulary":
        return cls.from_tokens(split_words(" ".join(_lexicon_texts())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        try:
            mapping = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CaseIOError(f"missing vocabulary file: {path}") from exc
        except json.JSONDecodeError as exc:
            raise CaseIOError(f"corrupt vocabulary file: {path}: {exc}") from exc
        for tok in RESERVED:
            if tok not in mapping:
                raise CaseIOError(f"vocabulary file {path} lacks reserved token {tok}")
        if len(set(mapping.values())) != len(mapping):
            raise CaseIOError(f"vocabulary file {path} maps two tokens to one id")
        return cls({str(k): int(v) for k, v in mapping.items()})


def _lexicon_texts():
    fills = {
        "size": _SIZE_WORDS,
        "side": _SIDE_WORDS,
        "lobe": _LOBE_WORDS,
        "edema": EDEMA_PHRASES,
        "necrosis": NECROSIS_PHRASES,
        "enhancement": ENHANCEMENT_PHRASES,
    }
    for template in _TEMPLATES.values():
        yield re.sub(r"\{\w+\}", "", template)
    for words in fills.values():
        yield from words


@dataclass(eq=False)
class Case:
    case_id: str
    volume: np.ndarray  # float32 [4, D, H, W]
    labels: np.ndarray  # uint8 [3, D, H, W], channels WT, TC, ET
    report: str
    token_ids: np.ndarray  # int64 [L]
    attention_mask: np.ndarray  # uint8 [L]

    def __eq__(self, other):
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.report == other.report
            and _same_array(self.volume, other.volume)
            and _same_array(self.labels, other.labels)
            and _same_array(self.token_ids, other.token_ids)
            and _same_array(self.attention_mask, other.attention_mask)
        )

    @property
    def grid_size(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape[1:])


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, keeping hyphenated words whole."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(report: str, vocab: Vocabulary, length: int) -> tuple[np.ndarray, np.ndarray]:
    if length < 2:
        raise ConfigError(f"token length must be >= 2, got {length}", "token_length")
    ids = [vocab.token_to_id.get(w, vocab.unk_id) for w in split_words(report)][:length]
    token_ids = np.full(length, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(length, dtype=np.uint8)
    token_ids[: len(ids)] = ids
    mask[: len(ids)] = 1
    return token_ids, mask


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def normalize_nonzero(volume: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit variance over nonzero voxels; zeros stay zero."""
    out = np.zeros(volume.shape, dtype=np.float64)
    for c in range(volume.shape[0]):
        ch = volume[c].astype(np.float64)
        nz = ch != 0
        if not nz.any():
            continue
        vals = ch[nz]
        std = vals.std()
        out[c][nz] = (vals - vals.mean()) / (std if std > 0 else 1.0)
    return out.astype(np.float32)


def _nested_center(rng, outer_center, outer_radii, inner_radii):
    slack = np.maximum(np.asarray(outer_radii) - np.asarray(inner_radii), 0.0)
    return np.asarray(outer_center) + rng.uniform(-0.5, 0.5, size=3) * slack


def _describe(rng, wt, tc, et, wt_center, grid) -> str:
    has_edema = bool((wt & ~tc).any())
    has_necrosis = bool((tc & ~et).any())
    has_enh = bool(et.any())

    frac = wt.sum() / wt.size
    size = _SIZE_WORDS[0] if frac < 0.06 else _SIZE_WORDS[1] if frac < 0.1 else _SIZE_WORDS[2]
    side = _SIDE_WORDS[int(wt_center[2] >= grid[2] / 2)]
    lobe = _LOBE_WORDS[2 * int(wt_center[0] >= grid[0] / 2) + int(wt_center[1] >= grid[1] / 2)]

    parts = [_TEMPLATES["intro"].format(size=size, side=side, lobe=lobe)]
    if has_edema:
        parts.append(_TEMPLATES["edema"].format(edema=rng.choice(EDEMA_PHRASES)))
    else:
        parts.append(_TEMPLATES["no_edema"])
    if has_enh:
        if has_necrosis and rng.random() < 0.5:
            parts.append(_TEMPLATES["enhancement_ring"])
        else:
            parts.append(_TEMPLATES["enhancement"].format(enhancement=rng.choice(ENHANCEMENT_PHRASES)))
    else:
        parts.append(_TEMPLATES["no_enhancement"])
    if has_necrosis:
        parts.append(_TEMPLATES["necrosis"].format(necrosis=rng.choice(NECROSIS_PHRASES)))
    else:
        parts.append(_TEMPLATES["no_necrosis"])
    return " ".join(p[0].upper() + p[1:] for p in parts)


def case_id_for(index: int) -> str:
    return f"case_{index:04d}"


def generate_case(cfg: GeneratorConfig, index: int, vocab: Vocabulary | None = None) -> Case:
    cfg.validate()
    if not 0 <= index < cfg.num_cases:
        raise ConfigError(f"index {index} outside [0, {cfg.num_cases})", "num_cases")
    vocab = vocab or Vocabulary.from_lexicon()
    rng = np.random.default_rng([cfg.seed, index])
    grid = cfg.grid_size

    wt_r = rng.uniform(*cfg.wt_radius, size=3)
    margin = np.ceil(wt_r) + 1
    wt_c = np.array([rng.uniform(m, n - 1 - m) for m, n in zip(margin, grid)])
    wt = ellipsoid_mask(grid, wt_c, wt_r)

    no_enh = rng.random() < cfg.p_no_enhancement
    no_nec = rng.random() < cfg.p_no_necrosis

    tc_r = rng.uniform(*cfg.tc_radius, size=3)
    tc_c = _nested_center(rng, wt_c, wt_r, tc_r)
    et_r = rng.uniform(*cfg.et_radius, size=3)
    et_c = _nested_center(rng, tc_c, tc_r, et_r)

    et = np.zeros(grid, bool) if no_enh else ellipsoid_mask(grid, et_c, et_r)
    if no_nec:
        tc = et.copy()
    else:
        tc = ellipsoid_mask(grid, tc_c, tc_r) & wt
    et &= tc
    if not no_enh and not et.any():
        # degenerate rounding; fall back to the TC voxel nearest the ET center
        idx = np.argwhere(tc)
        nearest = idx[np.argmin(((idx - et_c) ** 2).sum(1))]
        et[tuple(nearest)] = True

    brain = ellipsoid_mask(grid, (np.asarray(grid) - 1) / 2, np.asarray(grid) * 0.47) | wt
    vessels = np.zeros(grid, bool)
    if cfg.n_vessels:
        outside = np.argwhere(brain & ~_dilate(wt, 2))
        for _ in range(cfg.n_vessels):
            if len(outside) == 0:
                break
            vc = outside[rng.integers(len(outside))]
            vessels |= ellipsoid_mask(grid, vc, rng.uniform(1.0, 2.0, size=3))
        vessels &= brain & ~wt

    strength = rng.uniform(*cfg.enhancement_strength)
    mimic = np.zeros(grid, bool)
    if no_enh:
        mimic = ellipsoid_mask(grid, et_c, et_r) & tc
        strength = rng.uniform(*cfg.mimic_strength)

    noise = rng.normal(0.0, cfg.noise_sigma, size=(4, *grid))
    vol = _BASE_LEVEL[:, None, None, None] + noise
    for offset, region in (
        (_EDEMA_OFFSET, wt & ~tc),
        (_NECROSIS_OFFSET, tc & ~et & ~mimic),
        (_ENHANCING_OFFSET * strength, et | mimic),
        (_VESSEL_OFFSET, vessels),
    ):
        vol += offset[:, None, None, None] * region[None]
    vol *= brain[None]
    volume = normalize_nonzero(vol)

    labels = np.stack([wt, tc, et]).astype(np.uint8)
    report = _describe(rng, wt, tc, et, wt_c, grid)
    token_ids, mask = tokenize(report, vocab, cfg.token_length)
    return Case(case_id_for(index), volume, labels, report, token_ids, mask)


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=iterations)


# ---------------------------------------------------------------------------
# persistence


def save_case(dir_path, case: Case) -> Path:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "case_id": case.case_id,
        "volume": {"file": "volume.f32", "dtype": "<f4", "shape": list(case.volume.shape)},
        "labels": {
            "file": "labels.u8",
            "dtype": "|u1",
            "shape": list(case.labels.shape),
            "channels": list(REGIONS),
        },
        "report": "report.txt",
        "token_ids": case.token_ids.tolist(),
        "attention_mask": case.attention_mask.tolist(),
    }
    np.ascontiguousarray(case.volume, dtype="<f4").tofile(d / "volume.f32")
    np.ascontiguousarray(case.labels, dtype="|u1").tofile(d / "labels.u8")
    (d / "report.txt").write_bytes(case.report.encode("utf-8"))
    (d / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return d


def _read_raw(path: Path, what: str, dtype: str, shape) -> np.ndarray:
    if not path.is_file():
        raise CaseIOError(f"missing {what} file: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise CaseIOError(f"corrupt {what} file {path}: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def load_case(dir_path, grid_size=None) -> Case:
    """Load one case directory; ``grid_size`` (from the manifest) is cross-checked."""
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise CaseIOError(f"missing meta file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        vshape = tuple(meta["volume"]["shape"])
        lshape = tuple(meta["labels"]["shape"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CaseIOError(f"corrupt meta file {meta_path}: {exc}") from exc
    if len(vshape) != 4 or vshape[0] != 4 or len(lshape) != 4 or lshape[0] != 3 or vshape[1:] != lshape[1:]:
        raise CaseIOError(f"inconsistent shapes in {meta_path}: volume {vshape}, labels {lshape}")
    if grid_size is not None and tuple(grid_size) != vshape[1:]:
        raise CaseIOError(
            f"grid size {tuple(grid_size)} from manifest disagrees with {meta_path} shape {vshape[1:]}"
        )
    volume = _read_raw(d / meta["volume"]["file"], "volume", "<f4", vshape)
    labels = _read_raw(d / meta["labels"]["file"], "labels", "|u1", lshape)
    report_path = d / meta.get("report", "report.txt")
    if not report_path.is_file():
        raise CaseIOError(f"missing report file: {report_path}")
    try:
        report = report_path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CaseIOError(f"corrupt report file {report_path}: {exc}") from exc
    token_ids = np.asarray(meta["token_ids"], dtype=np.int64)
    mask = np.asarray(meta["attention_mask"], dtype=np.uint8)
    if token_ids.shape != mask.shape:
        raise CaseIOError(f"token_ids and attention_mask lengths differ in {meta_path}")
    return Case(meta["case_id"], volume, labels, report, token_ids, mask)


def generate_dataset(cfg: GeneratorConfig, root) -> list[str]:
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.from_lexicon()
    vocab.save(root / "vocab.json")
    ids = []
    for i in range(cfg.num_cases):
        case = generate_case(cfg, i, vocab)
        save_case(root / case.case_id, case)
        ids.append(case.case_id)
    manifest = {
        "case_ids": ids,
        "grid_size": list(cfg.grid_size),
        "vocab_file": "vocab.json",
        "generator_config": cfg.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return ids


@dataclass
class Dataset:
    root: Path
    manifest: dict
    vocab: Vocabulary
    cases: list[Case]

    @property
    def grid_size(self) -> tuple[int, int, int]:
        return tuple(self.manifest["grid_size"])

    @property
    def token_length(self) -> int:
        return int(self.cases[0].token_ids.shape[0])

    def by_id(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise CaseIOError(f"missing manifest file: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        grid = tuple(manifest["grid_size"])
        ids = list(manifest["case_ids"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CaseIOError(f"corrupt manifest file {mpath}: {exc}") from exc
    vocab = Vocabulary.load(root / manifest.get("vocab_file", "vocab.json"))
    cases = [load_case(root / cid, grid_size=grid) for cid in ids]
    if not cases:
        raise CaseIOError(f"dataset {root} lists no cases")
    return Dataset(root, manifest, vocab, cases)


def containment_ok(labels: np.ndarray) -> bool:
    wt, tc, et = (labels[i].astype(bool) for i in range(3))
    return not ((et & ~tc).any() or (tc & ~wt).any())
