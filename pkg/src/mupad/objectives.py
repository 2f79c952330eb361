"""Training objectives: flow-matching patch loss with the auxiliary CLS term,
spatial (CNN) and token-wise (MLP) teacher alignment, condition dropout, and
the embedding-space flow translator.

The teacher is always consumed as a plain numpy constant, so its parameters
can never receive gradient under any configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MODALITIES, ConditionSet, DenoiserOutput
from .tensor import Tensor

ARMS = ("mupad", "repa", "naive")


@dataclass
class LossWeights:
    lambda_patch: float = 1.0
    lambda_cls: float = 0.1
    lambda_align: float = 0.5


def denoise_loss(out: DenoiserOutput, v_star_patch: np.ndarray,
                 v_star_cls: np.ndarray, w: LossWeights) -> Tensor:
    """lambda_patch * MSE(v_patch, v*) + lambda_cls * MSE(v_cls, v*_cls)."""
    loss = Tensor(w.lambda_patch) * T.mse(out.v_patch, Tensor(v_star_patch))
    if w.lambda_cls != 0.0:
        loss = loss + Tensor(w.lambda_cls) * T.mse(out.v_cls, Tensor(v_star_cls))
    return loss


class AlignProjector:
    """Small conv stack bridging a denoiser token grid to the teacher grid."""

    def __init__(self, dim: int, teacher_dim: int, grid_side: int,
                 hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.grid_side = grid_side
        s1 = np.sqrt(2.0 / (dim * 9))
        s2 = np.sqrt(2.0 / (hidden * 9))
        self.params = {
            "align.conv1.w": Tensor(s1 * rng.standard_normal((hidden, dim, 3, 3)), requires_grad=True),
            "align.conv1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "align.conv2.w": Tensor(s2 * rng.standard_normal((teacher_dim, hidden, 3, 3)), requires_grad=True),
            "align.conv2.b": Tensor(np.zeros(teacher_dim), requires_grad=True),
        }

    def project(self, tokens: Tensor) -> Tensor:
        g = self.grid_side
        grid = T.permute(T.reshape(tokens, (g, g, self.dim)), (2, 0, 1))
        h = T.conv2d(grid, self.params["align.conv1.w"], stride=1, pad=1)
        h = T.gelu(h + T.reshape(self.params["align.conv1.b"], (-1, 1, 1)))
        h = T.conv2d(h, self.params["align.conv2.w"], stride=1, pad=1)
        return h + T.reshape(self.params["align.conv2.b"], (-1, 1, 1))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


class RepaProjector:
    """Per-token two-layer perceptron to the teacher width (ablation arm)."""

    def __init__(self, dim: int, teacher_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "repa.w1": Tensor(np.sqrt(2.0 / dim) * rng.standard_normal((dim, hidden)), requires_grad=True),
            "repa.b1": Tensor(np.zeros(hidden), requires_grad=True),
            "repa.w2": Tensor(np.sqrt(2.0 / hidden) * rng.standard_normal((hidden, teacher_dim)), requires_grad=True),
            "repa.b2": Tensor(np.zeros(teacher_dim), requires_grad=True),
        }

    def project(self, tokens: Tensor) -> Tensor:
        h = T.gelu(T.matmul(tokens, self.params["repa.w1"]) + self.params["repa.b1"])
        return T.matmul(h, self.params["repa.w2"]) + self.params["repa.b2"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def align_loss(features: Tensor, proj: AlignProjector, teacher_grid: np.ndarray) -> Tensor:
    """MSE between the projected denoiser grid and the frozen teacher grid."""
    projected = proj.project(features)
    if projected.shape != teacher_grid.shape:
        raise ValueError(f"projected grid {projected.shape} != teacher grid {teacher_grid.shape}")
    return T.mse(projected, Tensor(teacher_grid))


def repa_align_loss(features: Tensor, proj: RepaProjector, teacher_grid: np.ndarray) -> Tensor:
    """Token-wise variant: the teacher grid is flattened to tokens in the same
    row-major order as the denoiser tokens, isolating CNN-vs-MLP projection."""
    projected = proj.project(features)
    dt = teacher_grid.shape[0]
    teacher_tokens = teacher_grid.reshape(dt, -1).T
    if projected.shape != teacher_tokens.shape:
        raise ValueError(f"projected tokens {projected.shape} != teacher tokens {teacher_tokens.shape}")
    return T.mse(projected, Tensor(teacher_tokens))


def condition_dropout(cond: ConditionSet, p: float, rng) -> ConditionSet:
    """Independently deactivate each modality with probability p.

    A dropped modality becomes an exact null (field removed). The semantic
    CLS hint travels with the image modality. Three uniforms are always
    drawn so the stream does not depend on which modalities are present.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0,1], got {p}")
    drops = {m: rng.random() < p for m in MODALITIES}
    out = cond
    for m in MODALITIES:
        if drops[m] and out.active(m):
            out = out.without(m)
    if drops["image"] and out.z_cls is not None:
        out = ConditionSet(rna_vector=out.rna_vector, text_tokens=out.text_tokens,
                           image_tokens=out.image_tokens, z_cls=None)
    return out


class EmbeddingFlowNet:
    """Six fully-connected layers mapping (z_t, t) to a velocity of the same
    width as the embedding; the final layer is zero-initialized so the
    untrained flow is the identity transport."""

    def __init__(self, width: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.width = width
        sizes = [width + 1] + [hidden] * 4 + [hidden]
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            s = np.sqrt(2.0 / a)
            self.params[f"flow.w{i}"] = Tensor(s * rng.standard_normal((a, b)), requires_grad=True)
            self.params[f"flow.b{i}"] = Tensor(np.zeros(b), requires_grad=True)
        self.params["flow.w5"] = Tensor(np.zeros((hidden, width)), requires_grad=True)
        self.params["flow.b5"] = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, z: np.ndarray, t: float) -> Tensor:
        if z.shape != (self.width,):
            raise ValueError(f"expected embedding of width {self.width}, got {z.shape}")
        h = Tensor(np.concatenate([z, [t]])[None, :])
        for i in range(5):
            h = T.gelu(T.matmul(h, self.params[f"flow.w{i}"]) + self.params[f"flow.b{i}"])
        h = T.matmul(h, self.params["flow.w5"]) + self.params["flow.b5"]
        return T.reshape(h, (self.width,))

    def velocity(self, z: np.ndarray, t: float) -> np.ndarray:
        return self(z, t).data

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def embedding_flow_loss(net: EmbeddingFlowNet, z0: np.ndarray, z1: np.ndarray,
                        t: float) -> Tensor:
    """MSE(v_theta(z_t, t), z1 - z0) on the linear path between embeddings."""
    if z0.shape != z1.shape:
        raise ValueError("embedding width mismatch")
    z_t = (1.0 - t) * z0 + t * z1
    return T.mse(net(z_t, t), Tensor(z1 - z0))


def total_loss(out: DenoiserOutput, v_star_patch: np.ndarray, v_star_cls: np.ndarray,
               weights: LossWeights, arm: str,
               align_proj: AlignProjector | None = None,
               repa_proj: RepaProjector | None = None,
               teacher_grid: np.ndarray | None = None,
               align_layer: int | None = None):
    """Compose the arm's objective; inactive terms never enter the tape.

    Arms: 'naive' = patch loss only; 'repa' = patch + MLP alignment;
    'mupad' = patch + CLS + CNN alignment. Alignment taps the block at
    `align_layer` (middle block when unset). Returns (loss, per-term values).
    """
    if arm not in ARMS:
        raise ValueError(f"unknown objective arm '{arm}'")
    patch = Tensor(weights.lambda_patch) * T.mse(out.v_patch, Tensor(v_star_patch))
    terms = {"patch": float(patch.data)}
    loss = patch
    if arm == "mupad":
        cls = Tensor(weights.lambda_cls) * T.mse(out.v_cls, Tensor(v_star_cls))
        terms["cls"] = float(cls.data)
        loss = loss + cls
    if arm in ("mupad", "repa"):
        if not out.features:
            raise ValueError("alignment arms require denoiser features")
        layer = align_layer if align_layer is not None else len(out.features) // 2
        feats = out.features[layer]
        if arm == "mupad":
            al = align_loss(feats, align_proj, teacher_grid)
        else:
            al = repa_align_loss(feats, repa_proj, teacher_grid)
        al = Tensor(weights.lambda_align) * al
        terms["align"] = float(al.data)
        loss = loss + al
    terms["total"] = float(loss.data)
    return loss, terms
