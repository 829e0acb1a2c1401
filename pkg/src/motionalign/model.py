"""Pyramidal alignment network.

Tiny from-scratch attention encoders for text and motion patches, a body
compressor (attention pooling over body parts), a clustering token
compressor producing segment tokens with provenance, a projection-head
pooled cosine similarity, a subset scoring function for interaction
computation, and a convolution+attention head that predicts pairwise
interaction logits directly from token embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import clustering
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .interactions import TokenUniverse
from .patches import PatchGrid


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    depth: int = 2
    ratio_text: float = 0.25
    ratio_motion: float = 0.25
    n_p: int = 16
    stride: int = 8
    sti_channels: int = 32
    sti_heads: int = 4
    max_windows: int = 32
    init_scale: float = 0.02
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.sti_channels % self.sti_heads:
            raise ValueError("sti_channels must be divisible by sti_heads")
        for r in (self.ratio_text, self.ratio_motion):
            if not 0.0 < r <= 1.0:
                raise ValueError("compression ratios must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "heads": self.heads, "depth": self.depth,
            "ratio_text": self.ratio_text, "ratio_motion": self.ratio_motion,
            "n_p": self.n_p, "stride": self.stride,
            "sti_channels": self.sti_channels, "sti_heads": self.sti_heads,
            "max_windows": self.max_windows, "init_scale": self.init_scale,
            "vocab": dict(self.vocab),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class StageEmbeddings:
    stage: str                                   # jnt | sgm | hlt
    text: Tensor                                 # (N_t, D)
    motion: Tensor                               # (N_m, D)
    text_provenance: Optional[list[list[int]]] = None
    motion_provenance: Optional[list[list[int]]] = None


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class AlignmentModel:
    """All learnable components, flat-registered in ``self.params``."""

    HEAD_PREFIX = "sti."

    def __init__(self, config: ModelConfig, seed: int = 0):
        if not config.vocab:
            raise ValueError("model needs a non-empty vocabulary")
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d = config.d_model
        c = config.sti_channels

        def w(name, *shape, scale=config.init_scale):
            self.params[name] = Tensor(
                rng.normal(0.0, scale, shape), requires_grad=True)

        def zeros(name, *shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, *shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        def block(prefix, dim):
            for ln in ("ln1", "ln2"):
                ones(f"{prefix}.{ln}.g", dim)
                zeros(f"{prefix}.{ln}.b", dim)
            for m in ("wq", "wk", "wv", "wo"):
                w(f"{prefix}.{m}", dim, dim)
                zeros(f"{prefix}.{m}_b", dim)
            w(f"{prefix}.ff.w1", dim, 2 * dim)
            zeros(f"{prefix}.ff.b1", 2 * dim)
            w(f"{prefix}.ff.w2", 2 * dim, dim)
            zeros(f"{prefix}.ff.b2", dim)

        def attn_only(prefix, dim):
            for m in ("wq", "wk", "wv", "wo"):
                w(f"{prefix}.{m}", dim, dim)
                zeros(f"{prefix}.{m}_b", dim)

        # unit-scale embeddings so token identity is not swamped by the
        # (fixed, 0.5-scaled) sinusoidal position signal added in the encoder
        w("text.embed", len(config.vocab), d, scale=1.0)
        for i in range(config.depth):
            block(f"text.blk{i}", d)
        ones("text.lnf.g", d)
        zeros("text.lnf.b", d)

        w("motion.proj.w", 3 * config.n_p * config.n_p, d)
        zeros("motion.proj.b", d)
        w("motion.part_pos", 5, d, scale=0.5)
        # temporal positions start from a scaled sinusoid so window order is
        # visible to the encoder from the first step, then train freely
        self.params["motion.time_pos"] = Tensor(
            0.5 * _sinusoid(config.max_windows, d), requires_grad=True)
        for i in range(config.depth):
            block(f"motion.blk{i}", d)
        ones("motion.lnf.g", d)
        zeros("motion.lnf.b", d)

        w("body.query", d, 1)

        for comp in ("comp_text", "comp_motion"):
            w(f"{comp}.conv.w", 3 * d, d)
            zeros(f"{comp}.conv.b", d)
            ones(f"{comp}.ln1.g", d)
            zeros(f"{comp}.ln1.b", d)
            attn_only(f"{comp}.attn1", d)
            w(f"{comp}.score.w", d, 1)
            zeros(f"{comp}.score.b", 1)
            ones(f"{comp}.ln2.g", d)
            zeros(f"{comp}.ln2.b", d)
            attn_only(f"{comp}.attn2", d)

        for ph in ("ph_text", "ph_motion"):
            w(f"{ph}.w1", d, 2 * d)
            zeros(f"{ph}.b1", 2 * d)
            w(f"{ph}.w2", 2 * d, 1)
            zeros(f"{ph}.b2", 1)

        w("sti.feat.w", 3 * d, c)
        zeros("sti.feat.b", c)
        w("sti.conv1.w", c, c, 3, 3)
        zeros("sti.conv1.b", c)
        attn_only("sti.attn", c)
        w("sti.conv2.w", c, c, 3, 3)
        zeros("sti.conv2.b", c)
        w("sti.out.w", c, 1)
        zeros("sti.out.b", 1)

    # -- basic layers -------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _attention(self, x: Tensor, prefix: str, heads: int) -> Tensor:
        t_len, dim = x.shape
        dh = dim // heads
        q = ad.matmul(x, self._p(f"{prefix}.wq")) + self._p(f"{prefix}.wq_b")
        k = ad.matmul(x, self._p(f"{prefix}.wk")) + self._p(f"{prefix}.wk_b")
        v = ad.matmul(x, self._p(f"{prefix}.wv")) + self._p(f"{prefix}.wv_b")
        q = ad.transpose(ad.reshape(q, (t_len, heads, dh)), (1, 0, 2))
        k = ad.transpose(ad.reshape(k, (t_len, heads, dh)), (1, 0, 2))
        v = ad.transpose(ad.reshape(v, (t_len, heads, dh)), (1, 0, 2))
        att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                                1.0 / math.sqrt(dh)), axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (1, 0, 2)), (t_len, dim))
        return ad.matmul(out, self._p(f"{prefix}.wo")) + self._p(f"{prefix}.wo_b")

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        x = x + self._attention(self._ln(x, f"{prefix}.ln1"), prefix,
                                self.config.heads)
        h = ad.matmul(self._ln(x, f"{prefix}.ln2"), self._p(f"{prefix}.ff.w1"))
        h = ad.gelu(h + self._p(f"{prefix}.ff.b1"))
        return x + (ad.matmul(h, self._p(f"{prefix}.ff.w2"))
                    + self._p(f"{prefix}.ff.b2"))

    # -- encoders -----------------------------------------------------------

    def encode_tokens(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.config.vocab[w] for w in words]
        except KeyError as e:
            raise ValueError(f"token not in vocabulary: {e.args[0]!r}") from None

    def encode_text_joint(self, token_ids: Sequence[int]) -> Tensor:
        ids = list(token_ids)
        if not ids:
            raise ValueError("empty token sequence")
        if min(ids) < 0 or max(ids) >= len(self.config.vocab):
            raise ValueError("token id out of vocabulary range")
        x = ad.gather_rows(self._p("text.embed"), ids)
        x = x + Tensor(0.5 * _sinusoid(len(ids), self.config.d_model))
        for i in range(self.config.depth):
            x = self._block(x, f"text.blk{i}")
        return self._ln(x, "text.lnf")

    def encode_motion_joint(self, grid: PatchGrid) -> Tensor:
        """(5 parts * P windows) x D token matrix, part-major order."""
        n_windows = grid.patches.shape[0]
        if n_windows > self.config.max_windows:
            raise ValueError(
                f"{n_windows} windows exceed max_windows={self.config.max_windows}")
        # (P, 5, 3, n_p, n_p) -> part-major rows (5*P, 3*n_p*n_p)
        feat = grid.patches.transpose(1, 0, 2, 3, 4).reshape(5 * n_windows, -1)
        x = ad.matmul(Tensor(feat), self._p("motion.proj.w")) + self._p("motion.proj.b")
        part_idx = np.repeat(np.arange(5), n_windows)
        time_idx = np.tile(np.arange(n_windows), 5)
        pos = (ad.gather_rows(self._p("motion.part_pos"), part_idx)
               + ad.gather_rows(self._p("motion.time_pos"), time_idx))
        x = x + pos
        for i in range(self.config.depth):
            x = self._block(x, f"motion.blk{i}")
        return self._ln(x, "motion.lnf")

    # -- compressors ----------------------------------------------------------

    def body_compress(self, motion_jnt: Tensor, n_windows: int) -> Tensor:
        """Attention-pool the 5 part tokens of each time step -> (P, D)."""
        d = self.config.d_model
        x = ad.transpose(ad.reshape(motion_jnt, (5, n_windows, d)), (1, 0, 2))
        logits = ad.mul(ad.matmul(x, self._p("body.query")), 1.0 / math.sqrt(d))
        weights = ad.softmax(logits, axis=1)                  # (P, 5, 1)
        pooled = ad.matmul(ad.transpose(weights, (0, 2, 1)), x)   # (P, 1, D)
        return ad.reshape(pooled, (n_windows, d))

    def token_compress(self, tokens: Tensor, which: str,
                       ratio: Optional[float] = None
                       ) -> tuple[Tensor, list[list[int]]]:
        """Compress N tokens to max(1, round(ratio*N)) segment tokens.

        Gradients flow through the per-token scores and the token features;
        center selection itself (clustering) is non-differentiable and runs
        on detached features.
        """
        prefix = {"text": "comp_text", "motion": "comp_motion"}[which]
        if ratio is None:
            ratio = (self.config.ratio_text if which == "text"
                     else self.config.ratio_motion)
        n = tokens.shape[0]
        # 3x1 conv over the token axis (zero padded)
        xp = ad.pad_rows(tokens, 1, 1)
        idx = np.arange(n)
        cols = ad.concat([ad.gather_rows(xp, idx),
                          ad.gather_rows(xp, idx + 1),
                          ad.gather_rows(xp, idx + 2)], axis=1)
        h = ad.matmul(cols, self._p(f"{prefix}.conv.w")) + self._p(f"{prefix}.conv.b")
        h = self._ln(h, f"{prefix}.ln1")
        h = h + self._attention(h, f"{prefix}.attn1", self.config.heads)
        scores = ad.matmul(h, self._p(f"{prefix}.score.w")) + self._p(f"{prefix}.score.b")

        result = clustering.cluster(h.data, ratio)
        provenance = [result.provenance[c] for c in result.centers]
        segs = []
        for members in provenance:
            m_scores = ad.gather_rows(scores, members)           # (m, 1)
            weights = ad.softmax(m_scores, axis=0)
            seg = ad.matmul(ad.transpose(weights), ad.gather_rows(h, members))
            segs.append(seg)
        agg = segs[0] if len(segs) == 1 else ad.concat(segs, axis=0)
        out = agg + self._attention(self._ln(agg, f"{prefix}.ln2"),
                                    f"{prefix}.attn2", self.config.heads)
        return out, provenance

    @staticmethod
    def holistic_pool(segment_tokens: Tensor) -> Tensor:
        """Unweighted mean over segment tokens -> (1, D)."""
        return ad.reshape(ad.tmean(segment_tokens, axis=0),
                          (1, segment_tokens.shape[1]))

    # -- similarity ------------------------------------------------------------

    def ph_logits(self, tokens: Tensor, which: str) -> Tensor:
        prefix = {"text": "ph_text", "motion": "ph_motion"}[which]
        h = ad.gelu(ad.matmul(tokens, self._p(f"{prefix}.w1"))
                    + self._p(f"{prefix}.b1"))
        return ad.matmul(h, self._p(f"{prefix}.w2")) + self._p(f"{prefix}.b2")

    def pooled_vector(self, tokens: Tensor, which: str) -> Tensor:
        """Projection-head softmax pooling of token features -> (1, D)."""
        if tokens.shape[0] < 1:
            raise ValueError("empty token set")
        weights = ad.softmax(self.ph_logits(tokens, which), axis=0)
        return ad.matmul(ad.transpose(weights), tokens)

    @staticmethod
    def cosine(a: Tensor, b: Tensor) -> Tensor:
        dot = ad.tsum(ad.mul(a, b))
        na = ad.power(ad.tsum(ad.mul(a, a)) + 1e-12, 0.5)
        nb = ad.power(ad.tsum(ad.mul(b, b)) + 1e-12, 0.5)
        return ad.div(dot, ad.mul(na, nb))

    def pair_similarity(self, text_tokens: Tensor, motion_tokens: Tensor) -> Tensor:
        """Cosine of the two projection-head pooled modality vectors."""
        return self.cosine(self.pooled_vector(text_tokens, "text"),
                           self.pooled_vector(motion_tokens, "motion"))

    # -- subset scoring for interaction computation -----------------------------

    def subset_scorer(self, text_tokens, motion_tokens) -> "SubsetScorer":
        et = text_tokens.data if isinstance(text_tokens, Tensor) else np.asarray(text_tokens)
        em = motion_tokens.data if isinstance(motion_tokens, Tensor) else np.asarray(motion_tokens)
        return SubsetScorer(self, et, em)

    def subset_score(self, text_tokens, motion_tokens, subset) -> float:
        """Pooled similarity restricted to `subset` (unified indices).

        Zero when the subset misses either modality entirely.  Evaluated
        without gradient tracking (teacher side).
        """
        return self.subset_scorer(text_tokens, motion_tokens)(tuple(subset))

    def token_universe(self, text_tokens, motion_tokens) -> TokenUniverse:
        scorer = self.subset_scorer(text_tokens, motion_tokens)
        return TokenUniverse(n_text=scorer.n_text, n_motion=scorer.n_motion,
                             score_fn=scorer, batch_score_fn=scorer.batch)

    # -- interaction estimation head --------------------------------------------

    def sti_head_forward(self, text_tokens: Tensor, motion_tokens: Tensor) -> Tensor:
        """Pairwise interaction logits (N_t x N_m) from token embeddings."""
        n_t, d = text_tokens.shape
        n_m = motion_tokens.shape[0]
        if n_t < 1 or n_m < 1:
            raise ValueError("empty token set")
        c = self.config.sti_channels
        idx_t = np.repeat(np.arange(n_t), n_m)
        idx_m = np.tile(np.arange(n_m), n_t)
        et = ad.gather_rows(text_tokens, idx_t)
        em = ad.gather_rows(motion_tokens, idx_m)
        feat = ad.concat([et, em, ad.mul(et, em)], axis=1)
        cells = ad.matmul(feat, self._p("sti.feat.w")) + self._p("sti.feat.b")
        grid = ad.transpose(ad.reshape(cells, (n_t, n_m, c)), (2, 0, 1))
        grid = ad.relu(ad.conv2d(grid, self._p("sti.conv1.w"),
                                 self._p("sti.conv1.b"), padding=1))
        cells = ad.transpose(ad.reshape(grid, (c, n_t * n_m)))
        cells = cells + self._attention(cells, "sti.attn", self.config.sti_heads)
        grid = ad.reshape(ad.transpose(cells), (c, n_t, n_m))
        grid = ad.conv2d(grid, self._p("sti.conv2.w"), self._p("sti.conv2.b"),
                         padding=1)
        cells = ad.transpose(ad.reshape(grid, (c, n_t * n_m)))
        logits = ad.matmul(cells, self._p("sti.out.w")) + self._p("sti.out.b")
        return ad.reshape(logits, (n_t, n_m))

    # -- full pyramid ------------------------------------------------------------

    def forward_sample(self, token_ids: Sequence[int],
                       grid: PatchGrid) -> dict[str, StageEmbeddings]:
        n_windows = grid.patches.shape[0]
        jnt_text = self.encode_text_joint(token_ids)
        jnt_motion = self.encode_motion_joint(grid)
        sgm_text, text_prov = self.token_compress(jnt_text, "text")
        body = self.body_compress(jnt_motion, n_windows)
        sgm_motion, motion_prov = self.token_compress(body, "motion")
        hlt_text = self.holistic_pool(sgm_text)
        hlt_motion = self.holistic_pool(sgm_motion)
        return {
            "jnt": StageEmbeddings("jnt", jnt_text, jnt_motion),
            "sgm": StageEmbeddings("sgm", sgm_text, sgm_motion,
                                   text_provenance=text_prov,
                                   motion_provenance=motion_prov),
            "hlt": StageEmbeddings("hlt", hlt_text, hlt_motion),
        }

    # -- parameter plumbing --------------------------------------------------------

    def head_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items()
                if k.startswith(self.HEAD_PREFIX)}

    def model_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items()
                if not k.startswith(self.HEAD_PREFIX)}

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {"config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str) -> "AlignmentModel":
        params, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        for name, tensor in params.items():
            if name not in model.params:
                raise ValueError(f"unexpected parameter in checkpoint: {name}")
            if tensor.shape != model.params[name].shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            model.params[name].data = tensor.data
        return model


class SubsetScorer:
    """Detached numpy evaluation of subset-restricted pooled similarity.

    Precomputes token features and projection-head logits once; each
    subset evaluation is then a softmax-weighted pooling over the subset
    members followed by a cosine.  ``batch`` scores many subsets given as
    boolean membership rows over the unified index set.
    """

    def __init__(self, model: AlignmentModel, text_tokens: np.ndarray,
                 motion_tokens: np.ndarray):
        self.n_text = text_tokens.shape[0]
        self.n_motion = motion_tokens.shape[0]
        self.e_t = np.asarray(text_tokens, dtype=np.float64)
        self.e_m = np.asarray(motion_tokens, dtype=np.float64)
        with ad.no_grad():
            l_t = model.ph_logits(Tensor(self.e_t), "text").data.reshape(-1)
            l_m = model.ph_logits(Tensor(self.e_m), "motion").data.reshape(-1)
        # global shift keeps exp bounded; subset softmax is shift invariant
        self.w_t = np.exp(l_t - l_t.max())
        self.w_m = np.exp(l_m - l_m.max())
        self.wt_e = self.w_t[:, None] * self.e_t
        self.wm_e = self.w_m[:, None] * self.e_m

    def __call__(self, subset: tuple) -> float:
        mask = np.zeros((1, self.n_text + self.n_motion), dtype=bool)
        mask[0, list(subset)] = True
        return float(self.batch(mask)[0])

    def batch(self, masks: np.ndarray) -> np.ndarray:
        mt = masks[:, :self.n_text].astype(np.float64)
        mm = masks[:, self.n_text:].astype(np.float64)
        zt = mt @ self.w_t
        zm = mm @ self.w_m
        pt = mt @ self.wt_e
        pm = mm @ self.wm_e
        valid = (zt > 0) & (zm > 0)
        zt_safe = np.where(zt > 0, zt, 1.0)
        zm_safe = np.where(zm > 0, zm, 1.0)
        pt /= zt_safe[:, None]
        pm /= zm_safe[:, None]
        dot = (pt * pm).sum(axis=1)
        norm = (np.sqrt((pt * pt).sum(axis=1) + 1e-12)
                * np.sqrt((pm * pm).sum(axis=1) + 1e-12))
        return np.where(valid, dot / norm, 0.0)
