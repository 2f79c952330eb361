"""Procedural synthetic-histology corpus with known generative factors.

Every sample is a deterministic function of (dataset seed, sample id): a
32x32 tissue image whose nucleus count, nucleus size, and background hue
follow three interpretable factors, plus five nuisance factors, a caption
built from binned factor words, a 331-dim pathway vector that is a fixed
seeded linear read-out of the factors, and four multiplex marker channels
with exact ground truth (nucleus mask, boundary, gradient, sparse dots).

Nuclei are placed on a jittered 4x4 grid so they can never touch, which
keeps the connected-component density oracle exact on clean images.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .storage import file_digest, read_blob_file, write_blob_file

IMG_SIDE = 32
PATHWAY_DIM = 331
N_FACTORS = 8
PATHWAY_MATRIX_SEED = 331        # shared across datasets so c_RNA semantics are stable
PATHWAY_NOISE_STD = 0.1          # eta ~ N(0, 0.01)

LUMA = np.array([0.2126, 0.7152, 0.0722])
DENSITY_THRESHOLD = 0.35

_PINK = np.array([0.97, 0.80, 0.85])
_PURPLE = np.array([0.90, 0.78, 0.95])
_NUCLEUS_BASE = np.array([0.32, 0.18, 0.42])

FREEZE_STREAKS = 4
FREEZE_AMPLITUDE = 0.3
FREEZE_JITTER = 0.1

DENSITY_WORDS = ("sparse", "moderate", "dense")
SIZE_WORDS = ("small", "medium", "large")
HUE_WORDS = ("pink", "magenta", "purple")


@dataclass(frozen=True)
class SyntheticFactors:
    values: np.ndarray  # 8 floats in [0,1]: density, size, hue, 5 nuisance

    def __post_init__(self):
        if self.values.shape != (N_FACTORS,) or np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("factors must be 8 values in [0,1]")

    @property
    def density(self) -> float:
        return float(self.values[0])

    @property
    def size(self) -> float:
        return float(self.values[1])

    @property
    def hue(self) -> float:
        return float(self.values[2])


@dataclass
class SyntheticSample:
    sample_id: int
    image: np.ndarray          # [3,32,32] in [0,1]
    caption: str
    pathway: np.ndarray        # [331]
    multiplex: np.ndarray      # [4,32,32]
    domain: str                # clean | frozen
    factors: SyntheticFactors


def _bin_word(value: float, words) -> str:
    return words[min(2, int(value * 3))]


def caption_for(factors: SyntheticFactors, domain: str) -> str:
    return (f"{_bin_word(factors.density, DENSITY_WORDS)} cellularity with "
            f"{_bin_word(factors.size, SIZE_WORDS)} nuclei and "
            f"{_bin_word(factors.hue, HUE_WORDS)} background {domain} tissue section")


def pathway_matrix() -> np.ndarray:
    rng = np.random.default_rng(PATHWAY_MATRIX_SEED)
    return rng.standard_normal((PATHWAY_DIM, N_FACTORS))


_PATHWAY_M = pathway_matrix()


def nucleus_count(density: float) -> int:
    return int(round(3 + 12 * density))


def nucleus_radius(size: float) -> float:
    return 1.0 + 2.0 * size


def _render(factors: SyntheticFactors, rng) -> tuple[np.ndarray, np.ndarray]:
    """Clean image and multiplex channels from the factors."""
    n = IMG_SIDE
    nuis = factors.values[3:]
    bg = _PINK + (_PURPLE - _PINK) * factors.hue
    bg = bg + 0.03 * (nuis[1] - 0.5)  # eosin tint shift
    img = np.repeat(np.repeat(bg[:, None], n, axis=1)[:, :, None], n, axis=2)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    # faint sinusoidal texture
    img += 0.02 * nuis[3] * np.sin(2 * np.pi * xx / 9.0) * np.sin(2 * np.pi * yy / 7.0)

    count = nucleus_count(factors.density)
    radius = nucleus_radius(factors.size)
    cells = rng.permutation(16)[:count]
    nucleus_color = _NUCLEUS_BASE + 0.05 * (nuis[4] - 0.5)
    nucleus_color = nucleus_color + 0.04 * (factors.hue - 0.5) * np.array([0.3, 0.1, 0.8])

    mask = np.zeros((n, n))
    boundary = np.zeros((n, n))
    cell_side = n // 4
    margin = radius + 1.0
    for c in cells:
        ci, cj = divmod(int(c), 4)
        lo = margin
        hi = cell_side - margin
        jit_y = lo + (hi - lo) * rng.random() if hi > lo else cell_side / 2.0
        jit_x = lo + (hi - lo) * rng.random() if hi > lo else cell_side / 2.0
        cy, cx = ci * cell_side + jit_y, cj * cell_side + jit_x
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blend = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        img = img * (1 - blend) + nucleus_color[:, None, None] * blend
        mask = np.maximum(mask, (dist <= radius).astype(np.float64))
        boundary = np.maximum(boundary, ((dist <= radius) & (dist > radius - 1.2)).astype(np.float64))

    img += 0.04 * nuis[0] * rng.standard_normal((n, n))
    img = np.clip(img, 0.0, 1.0)

    gradient = yy / (n - 1)
    dot_rate = 0.02 * (1 + factors.density)
    dots = (rng.random((n, n)) < dot_rate).astype(np.float64)
    multiplex = np.stack([mask, boundary, gradient, dots])
    return img, multiplex


def freeze_artifacts(img: np.ndarray, rng) -> np.ndarray:
    """Frozen-section corruption: bright vertical streaks plus brightness jitter."""
    out = img.copy()
    cols = rng.choice(IMG_SIDE, size=FREEZE_STREAKS, replace=False)
    for col in cols:
        out[:, :, col] += FREEZE_AMPLITUDE
    out += FREEZE_JITTER * (2.0 * rng.random() - 1.0)
    return np.clip(out, 0.0, 1.0)


def generate_sample(seed: int, sample_id: int) -> SyntheticSample:
    """Deterministically regenerate sample `sample_id` of dataset `seed`."""
    rng = np.random.default_rng([seed, sample_id])
    factors = SyntheticFactors(rng.random(N_FACTORS))
    domain = "clean" if sample_id % 2 == 0 else "frozen"
    image, multiplex = _render(factors, rng)
    if domain == "frozen":
        image = freeze_artifacts(image, rng)
    pathway = _PATHWAY_M @ factors.values + PATHWAY_NOISE_STD * rng.standard_normal(PATHWAY_DIM)
    return SyntheticSample(sample_id=sample_id, image=image,
                           caption=caption_for(factors, domain), pathway=pathway,
                           multiplex=multiplex, domain=domain, factors=factors)


# -- density oracle ---------------------------------------------------------------


def luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=(0, 0))


def _count_components(mask: np.ndarray) -> int:
    """4-connected components via iterative flood fill."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or seen[si, sj]:
                continue
            count += 1
            stack = [(si, sj)]
            seen[si, sj] = True
            while stack:
                i, j = stack.pop()
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
    return count


def oracle_density(img: np.ndarray) -> float:
    """Estimate the density factor by counting dark connected components."""
    mask = luminance(img) < DENSITY_THRESHOLD
    c = _count_components(mask)
    return float(np.clip((c - 3) / 12.0, 0.0, 1.0))


# -- persistence --------------------------------------------------------------------


class DatasetError(ValueError):
    pass


def sample_file_name(sample_id: int) -> str:
    return f"sample_{sample_id:06d}.bin"


def gen_dataset(n: int, seed: int, out_dir) -> Path:
    """Write n samples plus a manifest; returns the manifest path."""
    if n < 1:
        raise DatasetError("need n >= 1")
    out = Path(out_dir)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# mupad dataset\tseed={seed}\tn={n}"]
    for i in range(n):
        s = generate_sample(seed, i)
        rel = f"samples/{sample_file_name(i)}"
        path = out / rel
        write_blob_file(path, {"image": s.image, "multiplex": s.multiplex,
                               "pathway": s.pathway})
        factors = ",".join(f"{v:.17g}" for v in s.factors.values)
        lines.append(f"{i}\t{rel}\t{s.domain}\t{s.caption}\t{factors}\t{file_digest(path)}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class DatasetEntry:
    sample_id: int
    path: Path
    domain: str
    caption: str
    factors: SyntheticFactors
    digest: str


class Dataset:
    """Manifest-backed dataset with digest verification and cached loading."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.entries: list[DatasetEntry] = []
        text = self.manifest_path.read_text().splitlines()
        if not text or not text[0].startswith("# mupad dataset"):
            raise DatasetError(f"{manifest_path} is not a dataset manifest")
        header = dict(kv.split("=") for kv in text[0].split("\t")[1:])
        self.seed = int(header["seed"])
        for line in text[1:]:
            if not line:
                continue
            sid, rel, domain, caption, factors, digest = line.split("\t")
            self.entries.append(DatasetEntry(
                sample_id=int(sid), path=self.root / rel, domain=domain,
                caption=caption,
                factors=SyntheticFactors(np.array([float(v) for v in factors.split(",")])),
                digest=digest))
        self._cache: dict[int, dict[str, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def verify(self) -> None:
        for e in self.entries:
            if not e.path.exists():
                raise DatasetError(f"missing sample file {e.path}")
            if file_digest(e.path) != e.digest:
                raise DatasetError(f"digest mismatch for {e.path}")

    def arrays(self, idx: int) -> dict[str, np.ndarray]:
        if idx not in self._cache:
            self._cache[idx] = read_blob_file(self.entries[idx].path)
        return self._cache[idx]

    def image(self, idx: int) -> np.ndarray:
        return self.arrays(idx)["image"]

    def multiplex(self, idx: int) -> np.ndarray:
        return self.arrays(idx)["multiplex"]

    def pathway(self, idx: int) -> np.ndarray:
        return self.arrays(idx)["pathway"]


def tree_digest(root) -> str:
    """Digest of every file under root, for byte-identity comparisons."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
