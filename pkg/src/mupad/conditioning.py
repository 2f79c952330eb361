"""Frozen condition/teacher encoders, text and RNA preprocessing, latent codec.

The image-condition encoder and the alignment teacher are random-weight
frozen conv stacks generated from two distinct seeds; they stand in for the
pretrained encoders the full-scale system would use while preserving their
architectural role (a fixed conditioning/target space).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import erf

from .tensor import Tensor, _im2col, take_rows

CONDITION_ENCODER_SEED = 101
TEACHER_ENCODER_SEED = 202

PATHWAY_DIM = 331
GENE_PANEL_SIZE = 512

_RUIFROK_ROWS = np.array([
    [0.65, 0.70, 0.29],   # hematoxylin
    [0.07, 0.99, 0.11],   # eosin
    [0.27, 0.57, 0.78],   # DAB
])


# -- frozen encoders -------------------------------------------------------------


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _conv_np(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    co = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    return (w.reshape(co, -1) @ cols).reshape(co, oh, ow) + b[:, None, None]


class StubEncoder:
    """Frozen conv stack with seeded random weights.

    `depth` stride-2 conv layers, so the output grid is the input extent
    divided by 2**depth. Never updated by training.
    """

    def __init__(self, seed: int, in_channels: int = 3, out_dim: int = 32, depth: int = 2):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.stride = 2 ** depth
        widths = [in_channels] + [16] * (depth - 1) + [out_dim]
        self.weights = []
        self.biases = []
        for ci, co in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / (ci * 9))
            self.weights.append(scale * rng.standard_normal((co, ci, 3, 3)))
            self.biases.append(0.1 * rng.standard_normal(co))

    def feature_grid(self, img: np.ndarray) -> np.ndarray:
        """Spatial feature grid [out_dim, H/stride, W/stride]."""
        if img.ndim != 3 or img.shape[0] != self.in_channels:
            raise ValueError(f"expected [{self.in_channels},H,W] image, got {img.shape}")
        h = np.asarray(img, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _conv_np(h, w, b, stride=2, pad=1)
            if i < len(self.weights) - 1:
                h = _gelu_np(h)
        return h

    def encode(self, img: np.ndarray):
        """(tokens [N, out_dim], cls [out_dim]) with cls the spatial mean."""
        grid = self.feature_grid(img)
        tokens = grid.reshape(self.out_dim, -1).T.copy()
        return tokens, grid.mean(axis=(1, 2))

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


def condition_encoder(out_dim: int = 32) -> StubEncoder:
    """The frozen encoder supplying c_image tokens and the semantic CLS z_cls."""
    return StubEncoder(CONDITION_ENCODER_SEED, out_dim=out_dim, depth=2)


def teacher_encoder(out_dim: int = 32) -> StubEncoder:
    """The frozen alignment/metric teacher; distinct seed, 4x4 grid on 32px input."""
    return StubEncoder(TEACHER_ENCODER_SEED, out_dim=out_dim, depth=3)


def encode_image_condition(img: np.ndarray, encoder: StubEncoder | None = None):
    enc = encoder if encoder is not None else condition_encoder()
    return enc.encode(img)


def teacher_features(x0: np.ndarray, teacher: StubEncoder | None = None) -> np.ndarray:
    t = teacher if teacher is not None else teacher_encoder()
    return t.feature_grid(x0)


# -- text pathway ---------------------------------------------------------------


UNK_TOKEN = "<unk>"


class TextVocab:
    """Fixed template vocabulary; unknown words map to the reserved UNK id."""

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.words = [UNK_TOKEN] + list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, caption: str) -> list[int]:
        return [self.ids.get(w, 0) for w in caption.lower().split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    @staticmethod
    def load_default() -> "TextVocab":
        text = resources.files("mupad.assets").joinpath("vocab.txt").read_text()
        return TextVocab([w for w in text.splitlines() if w])


def tokenize(caption: str, vocab: TextVocab | None = None) -> list[int]:
    v = vocab if vocab is not None else TextVocab.load_default()
    return v.tokenize(caption)


class TextEmbedder:
    """Learned embedding table plus learned positional offsets for caption tokens."""

    def __init__(self, vocab_size: int, dim: int, max_len: int = 16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.max_len = max_len
        self.table = Tensor(0.02 * rng.standard_normal((vocab_size, dim)), requires_grad=True)
        self.pos = Tensor(0.02 * rng.standard_normal((max_len, dim)), requires_grad=True)

    def embed(self, ids: list[int]) -> Tensor:
        if len(ids) == 0:
            raise ValueError("cannot embed an empty token sequence")
        if len(ids) > self.max_len:
            ids = ids[: self.max_len]
        return take_rows(self.table, ids) + take_rows(self.pos, list(range(len(ids))))

    def parameters(self, prefix: str = "text") -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table, f"{prefix}.pos": self.pos}


# -- RNA pathway ------------------------------------------------------------------


@dataclass(frozen=True)
class GeneSet:
    name: str
    genes: tuple[int, ...]


class GeneSetTable:
    """331 named gene sets over the synthetic gene panel."""

    def __init__(self, sets: list[GeneSet], panel_size: int = GENE_PANEL_SIZE):
        if len(sets) != PATHWAY_DIM:
            raise ValueError(f"expected {PATHWAY_DIM} gene sets, got {len(sets)}")
        for s in sets:
            if len(s.genes) == 0:
                raise ValueError(f"gene set '{s.name}' is empty")
            if any(g < 0 or g >= panel_size for g in s.genes):
                raise ValueError(f"gene set '{s.name}' indexes outside the panel")
        self.sets = sets
        self.panel_size = panel_size

    @staticmethod
    def build(seed: int = 7, panel_size: int = GENE_PANEL_SIZE, max_size: int = 8) -> "GeneSetTable":
        rng = np.random.default_rng(seed)
        sets = []
        for i in range(PATHWAY_DIM):
            size = int(rng.integers(1, max_size + 1))
            genes = tuple(sorted(rng.choice(panel_size, size=size, replace=False).tolist()))
            sets.append(GeneSet(f"SET_{i:03d}", genes))
        return GeneSetTable(sets, panel_size)

    @staticmethod
    def load_default() -> "GeneSetTable":
        text = resources.files("mupad.assets").joinpath("gene_sets.txt").read_text()
        sets = []
        for line in text.splitlines():
            if not line:
                continue
            name, idx = line.split("\t")
            sets.append(GeneSet(name, tuple(int(i) for i in idx.split(","))))
        return GeneSetTable(sets)

    def dump(self) -> str:
        return "\n".join(f"{s.name}\t{','.join(str(g) for g in s.genes)}" for s in self.sets) + "\n"


def rna_preprocess(counts: np.ndarray, lengths: np.ndarray, exclude=None) -> np.ndarray:
    """TPM over the kept genes: length-normalize, then scale rates to sum 1e6."""
    counts = np.asarray(counts, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if counts.shape != lengths.shape:
        raise ValueError("counts/lengths shape mismatch")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if np.any(lengths <= 0):
        raise ValueError("lengths must be positive")
    if exclude is not None and len(exclude):
        keep = np.ones(counts.shape, dtype=bool)
        keep[np.asarray(list(exclude), dtype=np.int64)] = False
        counts, lengths = counts[keep], lengths[keep]
    rates = counts / lengths
    total = rates.sum()
    if total == 0:
        raise ValueError("all-zero counts after exclusion")
    return rates / total * 1e6


def pathway_scores(tpm: np.ndarray, gsets: GeneSetTable) -> np.ndarray:
    """Per-set mean of the sample-wise z-scored log1p(TPM)."""
    tpm = np.asarray(tpm, dtype=np.float64)
    if tpm.shape != (gsets.panel_size,):
        raise ValueError(f"expected TPM of length {gsets.panel_size}, got {tpm.shape}")
    x = np.log1p(tpm)
    std = x.std()
    if np.ptp(x) == 0.0 or std == 0.0:
        return np.zeros(len(gsets.sets))
    z = (x - x.mean()) / std
    return np.array([z[list(s.genes)].mean() for s in gsets.sets])


# -- latent codec ------------------------------------------------------------------


def latent_encode(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Lossless space-to-depth: [C,H,W] -> [C*f*f, H/f, W/f].

    Pixel (i,j) of channel c lands in channel c*f*f + (i%f)*f + (j%f) at
    position (i//f, j//f).
    """
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {factor}")
    z = img.reshape(c, h // factor, factor, w // factor, factor)
    return np.ascontiguousarray(z.transpose(0, 2, 4, 1, 3).reshape(c * factor * factor, h // factor, w // factor))


def latent_decode(z: np.ndarray, factor: int = 4) -> np.ndarray:
    """Exact inverse of latent_encode."""
    cf, gh, gw = z.shape
    if cf % (factor * factor):
        raise ValueError(f"channel count {cf} not divisible by factor^2")
    c = cf // (factor * factor)
    img = z.reshape(c, factor, factor, gh, gw).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(img.reshape(c, gh * factor, gw * factor))


# -- stain-space augmentation -------------------------------------------------------


@dataclass(frozen=True)
class StainMatrix:
    """RGB<->HED optical-density deconvolution pair (Ruifrok stain vectors)."""

    rgb_from_hed: np.ndarray
    hed_from_rgb: np.ndarray

    @staticmethod
    def ruifrok() -> "StainMatrix":
        m = _RUIFROK_ROWS / np.linalg.norm(_RUIFROK_ROWS, axis=1, keepdims=True)
        return StainMatrix(m, np.linalg.inv(m))


def hed_augment(rgb: np.ndarray, scales=(1.0, 1.0, 1.0), shifts=(0.0, 0.0, 0.0),
                stain: StainMatrix | None = None) -> np.ndarray:
    """Perturb the H/E/DAB optical-density channels, then invert and clamp.

    With identity perturbation the round trip deviates from the input by
    less than 1e-6.
    """
    sm = stain if stain is not None else StainMatrix.ruifrok()
    c, h, w = rgb.shape
    if c != 3:
        raise ValueError("hed_augment expects an RGB image")
    pix = np.clip(rgb.reshape(3, -1).T, 1e-6, 1.0)
    od = -np.log10(pix)
    hed = od @ sm.hed_from_rgb
    hed = hed * np.asarray(scales) + np.asarray(shifts)
    od_back = hed @ sm.rgb_from_hed
    out = np.power(10.0, -od_back).T.reshape(3, h, w)
    return np.clip(out, 0.0, 1.0)


def hed_channels(rgb: np.ndarray, stain: StainMatrix | None = None) -> np.ndarray:
    """Per-pixel H/E/DAB optical densities, [3,H,W]."""
    sm = stain if stain is not None else StainMatrix.ruifrok()
    c, h, w = rgb.shape
    pix = np.clip(rgb.reshape(3, -1).T, 1e-6, 1.0)
    hed = (-np.log10(pix)) @ sm.hed_from_rgb
    return hed.T.reshape(3, h, w)


# -- multiplex grouping ---------------------------------------------------------------


def group_channels(mif: np.ndarray) -> list[np.ndarray]:
    """Split [K,H,W] into consecutive 3-channel groups, padding the last by
    repeating its final channel."""
    k = mif.shape[0]
    if k < 1:
        raise ValueError("need at least one channel")
    groups = []
    for start in range(0, k, 3):
        idx = list(range(start, min(start + 3, k)))
        while len(idx) < 3:
            idx.append(idx[-1])
        groups.append(mif[idx].copy())
    return groups


def ungroup_channels(groups: list[np.ndarray], k: int) -> np.ndarray:
    """Reassemble the original [K,H,W] stack from its 3-channel groups."""
    flat = np.concatenate(groups, axis=0)
    if flat.shape[0] < k:
        raise ValueError("groups do not cover the requested channel count")
    return flat[:k].copy()
