"""The denoiser: patch tokens, timestep-modulated transformer blocks, and
per-modality decoupled cross-attention with an additive CLS stream.

Each block applies self-attention, then cross-modal attention over the
condition set, then a feed-forward layer; all three residual branches are
gated by zero-initialized timestep modulation so an untrained model is the
identity between patch embedding and output head. Self-attention maps can
be captured per layer and re-injected in a later pass (values and
projections always come from the current pass).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("rna", "text", "image")


class ConditionError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 2
    latent_shape: tuple[int, int, int] = (48, 8, 8)
    cond_dims: dict[str, int] = field(
        default_factory=lambda: {"rna": 331, "text": 32, "image": 32})
    variant: str = "dca"
    cls_dim: int = 32
    use_zcls_input: bool = True
    struct_channels: int = 0
    align_layer: int = -1          # -1: middle block
    mlp_ratio: int = 4
    shared_cond_dim: int = 32
    vocab_size: int = 32
    max_text_len: int = 16

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        c, h, w = self.latent_shape
        if h % self.patch or w % self.patch:
            raise ValueError("latent extent must be divisible by patch size")
        if self.variant not in ("dca", "shared"):
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.align_layer == -1:
            self.align_layer = self.depth // 2

    @property
    def tokens(self) -> int:
        _, h, w = self.latent_shape
        return (h // self.patch) * (w // self.patch)

    @property
    def in_channels(self) -> int:
        return self.latent_shape[0] + self.struct_channels


@dataclass
class ConditionSet:
    """C = {c_rna, c_text, c_image} with per-modality availability flags.

    A modality is active iff its field is present; `flags` may be passed to
    assert intent and is validated against presence.
    """

    rna_vector: np.ndarray | None = None
    text_tokens: Tensor | None = None
    image_tokens: np.ndarray | None = None
    z_cls: np.ndarray | None = None
    flags: dict[str, bool] | None = None

    def __post_init__(self):
        if self.rna_vector is not None:
            self.rna_vector = np.asarray(self.rna_vector, dtype=np.float64)
            if self.rna_vector.shape != (331,):
                raise ConditionError(f"rna_vector must have length 331, got {self.rna_vector.shape}")
        if self.flags is not None:
            for m in MODALITIES:
                if self.flags.get(m, False) and self._field(m) is None:
                    raise ConditionError(f"modality '{m}' flagged active but its embedding is absent")

    def _field(self, m: str):
        return {"rna": self.rna_vector, "text": self.text_tokens, "image": self.image_tokens}[m]

    def active(self, m: str) -> bool:
        present = self._field(m) is not None
        if self.flags is not None:
            return present and self.flags.get(m, True)
        return present

    def any_active(self) -> bool:
        return any(self.active(m) for m in MODALITIES)

    def tokens_for(self, m: str) -> Tensor:
        x = self._field(m)
        if isinstance(x, Tensor):
            return x
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        return Tensor(arr)

    def without(self, m: str) -> "ConditionSet":
        kw = dict(rna_vector=self.rna_vector, text_tokens=self.text_tokens,
                  image_tokens=self.image_tokens, z_cls=self.z_cls)
        kw[{"rna": "rna_vector", "text": "text_tokens", "image": "image_tokens"}[m]] = None
        return ConditionSet(**kw)

    def without_conditions(self) -> "ConditionSet":
        """The classifier-free null: every modality and the CLS hint dropped."""
        return ConditionSet()


@dataclass
class DenoiserOutput:
    v_patch: Tensor
    v_cls: Tensor
    features: list[Tensor]
    attn: dict[int, np.ndarray] | None = None


# -- tokenization of the latent grid ----------------------------------------------


def patchify(z: np.ndarray, patch: int) -> np.ndarray:
    """[C,H,W] -> [N, C*p*p]; token (i,j) holds exactly the pixels of patch (i,j)."""
    c, h, w = z.shape
    if h % patch or w % patch:
        raise ValueError(f"extent {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = z.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(t.reshape(gh * gw, c * patch * patch))


def unpatchify(tokens: np.ndarray, patch: int, latent_shape) -> np.ndarray:
    """Inverse of patchify (numpy side)."""
    c, h, w = latent_shape
    gh, gw = h // patch, w // patch
    t = tokens.reshape(gh, gw, c, patch, patch).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(t.reshape(c, h, w))


def _unpatchify_t(tokens: Tensor, patch: int, latent_shape) -> Tensor:
    c, h, w = latent_shape
    gh, gw = h // patch, w // patch
    t = T.reshape(tokens, (gh, gw, c, patch, patch))
    t = T.permute(t, (2, 0, 3, 1, 4))
    return T.reshape(t, (c, h, w))


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep in [0,1]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)])[None, :]


# -- attention pieces -------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.permute(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (n, h * dh))


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
               inject: np.ndarray | None = None):
    """Multi-head scaled dot-product attention over row matrices.

    Returns (output [Nq, dim], probs [heads, Nq, Nk] as numpy). When
    `inject` is given it replaces the probability maps before value
    aggregation.
    """
    dh = q.shape[-1] // heads
    q3, k3, v3 = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.matmul(q3, T.transpose_last2(k3)) * Tensor(1.0 / np.sqrt(dh))
    probs = T.softmax_lastdim(scores)
    if inject is not None:
        if inject.shape != probs.shape:
            raise ValueError(f"injected attention shape {inject.shape} != {probs.shape}")
        rows = inject.sum(axis=-1)
        if not np.allclose(rows, 1.0, atol=1e-6):
            raise ValueError("injected attention rows must sum to 1")
        probs = Tensor(inject)
    out = _merge_heads(T.matmul(probs, v3))
    return out, probs.data


def dca_forward(h: Tensor, cond: ConditionSet, weights: dict[str, Tensor],
                heads: int) -> Tensor:
    """Decoupled cross-attention: one parallel stream per active modality,
    fused additively. Inactive modalities contribute exactly zero."""
    q = T.matmul(h, weights["wq"])
    delta = None
    for m in MODALITIES:
        if not cond.active(m):
            continue
        c_m = cond.tokens_for(m)
        k = T.matmul(c_m, weights[f"{m}.wk"])
        v = T.matmul(c_m, weights[f"{m}.wv"])
        out, _ = _attention(q, k, v, heads)
        delta = out if delta is None else delta + out
    if delta is None:
        return Tensor(np.zeros(h.shape))
    return delta


def shared_attention_forward(h: Tensor, cond: ConditionSet, weights: dict[str, Tensor],
                             heads: int) -> Tensor:
    """Ablation variant: adapt every active modality to a common width, add a
    learned type embedding, concatenate along the sequence axis, and run a
    single shared attention call."""
    parts = []
    for m in MODALITIES:
        if not cond.active(m):
            continue
        c_m = cond.tokens_for(m)
        adapted = T.matmul(c_m, weights[f"{m}.adapt"]) + weights[f"{m}.type"]
        parts.append(adapted)
    if not parts:
        return Tensor(np.zeros(h.shape))
    c_all = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    q = T.matmul(h, weights["wq"])
    k = T.matmul(c_all, weights["wk"])
    v = T.matmul(c_all, weights["wv"])
    out, _ = _attention(q, k, v, heads)
    return out


# -- the denoiser -----------------------------------------------------------------


class Denoiser:
    """Flow-matching denoiser over the latent grid.

    Parameters live in a flat name->Tensor dict so the optimizer, EMA, and
    checkpoint code can treat the model uniformly.
    """

    N_MOD = 7  # shift/scale/gate for self-attn and ffn, plus the cross-attn gate

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = config
        p, d = cfg.patch, cfg.dim

        def par(name, shape, scale=0.02, zero=False):
            data = np.zeros(shape) if zero else scale * rng.standard_normal(shape)
            self.params[name] = Tensor(data, requires_grad=True)

        par("patch_embed.w", (cfg.in_channels * p * p, d))
        par("patch_embed.b", (d,), zero=True)
        par("pos", (cfg.tokens, d))
        par("cls_token", (1, d))
        if cfg.use_zcls_input:
            par("zcls_proj.w", (cfg.cls_dim, d))
        par("time.w1", (d, d))
        par("time.b1", (d,), zero=True)
        par("time.w2", (d, d))
        par("time.b2", (d,), zero=True)
        for i in range(cfg.depth):
            b = f"block{i}"
            par(f"{b}.adaln.w", (d, self.N_MOD * d), zero=True)
            par(f"{b}.adaln.b", (self.N_MOD * d,), zero=True)
            for ln in ("ln1", "ln2", "ln3"):
                self.params[f"{b}.{ln}.g"] = Tensor(np.ones(d), requires_grad=True)
                self.params[f"{b}.{ln}.b"] = Tensor(np.zeros(d), requires_grad=True)
            for w in ("wq", "wk", "wv", "wo"):
                par(f"{b}.attn.{w}", (d, d))
            if cfg.variant == "dca":
                par(f"{b}.dca.wq", (d, d))
                for m in MODALITIES:
                    par(f"{b}.dca.{m}.wk", (cfg.cond_dims[m], d))
                    par(f"{b}.dca.{m}.wv", (cfg.cond_dims[m], d))
            else:
                dc = cfg.shared_cond_dim
                par(f"{b}.sha.wq", (d, d))
                par(f"{b}.sha.wk", (dc, d))
                par(f"{b}.sha.wv", (dc, d))
                for m in MODALITIES:
                    par(f"{b}.sha.{m}.adapt", (cfg.cond_dims[m], dc))
                    par(f"{b}.sha.{m}.type", (dc,))
            par(f"{b}.ffn.w1", (d, cfg.mlp_ratio * d))
            par(f"{b}.ffn.b1", (cfg.mlp_ratio * d,), zero=True)
            par(f"{b}.ffn.w2", (cfg.mlp_ratio * d, d))
            par(f"{b}.ffn.b2", (d,), zero=True)
        self.params["head.ln.g"] = Tensor(np.ones(d), requires_grad=True)
        self.params["head.ln.b"] = Tensor(np.zeros(d), requires_grad=True)
        par("head.w", (d, cfg.latent_shape[0] * p * p), zero=True)
        par("head.b", (cfg.latent_shape[0] * p * p,), zero=True)
        par("cls_head.w", (d, cfg.cls_dim))
        par("cls_head.b", (cfg.cls_dim,), zero=True)
        if "text" in cfg.cond_dims:
            par("text.table", (cfg.vocab_size, cfg.cond_dims["text"]))
            par("text.pos", (cfg.max_text_len, cfg.cond_dims["text"]))

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': {src.shape} vs {p.data.shape}")
            p.data = src.copy()

    def randomize(self, rng, scale: float = 0.05) -> None:
        """Overwrite every parameter (gates included) with random values.

        Used by gradient checks and fixed-random-model fixtures where the
        zero-initialized gates would otherwise hide entire subgraphs.
        """
        for p in self.params.values():
            p.data = scale * rng.standard_normal(p.data.shape)

    def embed_text_ids(self, ids: list[int]) -> Tensor:
        if len(ids) == 0:
            raise ConditionError("cannot embed an empty token sequence")
        ids = ids[: self.config.max_text_len]
        return T.take_rows(self.params["text.table"], ids) + \
            T.take_rows(self.params["text.pos"], list(range(len(ids))))

    # -- forward ----------------------------------------------------------------

    def _time_vec(self, t: float) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.config.dim))
        h = T.gelu(T.matmul(emb, self.params["time.w1"]) + self.params["time.b1"])
        return T.matmul(h, self.params["time.w2"]) + self.params["time.b2"]

    def forward(self, z_t: np.ndarray, t: float, cond: ConditionSet,
                struct: np.ndarray | None = None,
                capture_attn: bool = False,
                inject: dict[int, np.ndarray] | None = None,
                want_features: bool = False) -> DenoiserOutput:
        cfg = self.config
        if z_t.shape != cfg.latent_shape:
            raise ValueError(f"latent shape {z_t.shape} != {cfg.latent_shape}")
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0,1], got {t}")
        if cfg.struct_channels:
            if struct is None:
                raise ValueError("model expects a structural latent")
            zin = np.concatenate([z_t, struct], axis=0)
        else:
            zin = z_t

        tok = Tensor(patchify(zin, cfg.patch))
        h = T.matmul(tok, self.params["patch_embed.w"]) + self.params["patch_embed.b"]
        h = h + self.params["pos"]
        cls = self.params["cls_token"]
        if cfg.use_zcls_input and cond.z_cls is not None:
            cls = cls + T.matmul(Tensor(cond.z_cls[None, :]), self.params["zcls_proj.w"])
        h = T.concat_rows([cls, h])

        tvec = self._time_vec(t)
        features: list[Tensor] = []
        attn_maps: dict[int, np.ndarray] = {}
        one = Tensor(1.0)

        for i in range(cfg.depth):
            b = f"block{i}"
            mod = T.matmul(tvec, self.params[f"{b}.adaln.w"]) + self.params[f"{b}.adaln.b"]
            mod = T.reshape(mod, (self.N_MOD, cfg.dim))
            sh_sa, sc_sa, g_sa, sh_ff, sc_ff, g_ff, g_ca = (
                T.take_rows(mod, [j]) for j in range(self.N_MOD))

            x = T.layer_norm(h, self.params[f"{b}.ln1.g"], self.params[f"{b}.ln1.b"])
            x = x * (one + sc_sa) + sh_sa
            q = T.matmul(x, self.params[f"{b}.attn.wq"])
            k = T.matmul(x, self.params[f"{b}.attn.wk"])
            v = T.matmul(x, self.params[f"{b}.attn.wv"])
            sa, probs = _attention(q, k, v, cfg.heads,
                                   inject=None if inject is None else inject.get(i))
            if capture_attn:
                attn_maps[i] = probs
            sa = T.matmul(sa, self.params[f"{b}.attn.wo"])
            h = h + g_sa * sa

            x = T.layer_norm(h, self.params[f"{b}.ln2.g"], self.params[f"{b}.ln2.b"])
            if cfg.variant == "dca":
                w = {"wq": self.params[f"{b}.dca.wq"]}
                for m in MODALITIES:
                    w[f"{m}.wk"] = self.params[f"{b}.dca.{m}.wk"]
                    w[f"{m}.wv"] = self.params[f"{b}.dca.{m}.wv"]
                delta = dca_forward(x, cond, w, cfg.heads)
            else:
                w = {"wq": self.params[f"{b}.sha.wq"], "wk": self.params[f"{b}.sha.wk"],
                     "wv": self.params[f"{b}.sha.wv"]}
                for m in MODALITIES:
                    w[f"{m}.adapt"] = self.params[f"{b}.sha.{m}.adapt"]
                    w[f"{m}.type"] = self.params[f"{b}.sha.{m}.type"]
                delta = shared_attention_forward(x, cond, w, cfg.heads)
            h = h + g_ca * delta

            x = T.layer_norm(h, self.params[f"{b}.ln3.g"], self.params[f"{b}.ln3.b"])
            x = x * (one + sc_ff) + sh_ff
            ff = T.gelu(T.matmul(x, self.params[f"{b}.ffn.w1"]) + self.params[f"{b}.ffn.b1"])
            ff = T.matmul(ff, self.params[f"{b}.ffn.w2"]) + self.params[f"{b}.ffn.b2"]
            h = h + g_ff * ff

            if want_features:
                features.append(T.take_rows(h, list(range(1, cfg.tokens + 1))))

        hn = T.layer_norm(h, self.params["head.ln.g"], self.params["head.ln.b"])
        n = cfg.tokens
        cls_out = T.take_rows(hn, [0])
        tok_out = T.take_rows(hn, list(range(1, n + 1)))
        patches = T.matmul(tok_out, self.params["head.w"]) + self.params["head.b"]
        v_patch = _unpatchify_t(patches, cfg.patch, cfg.latent_shape)
        v_cls = T.reshape(T.matmul(cls_out, self.params["cls_head.w"]) + self.params["cls_head.b"],
                          (cfg.cls_dim,))
        return DenoiserOutput(v_patch=v_patch, v_cls=v_cls, features=features,
                              attn=attn_maps if capture_attn else None)
