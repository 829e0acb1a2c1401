"""Training loop and evaluation harness.

One Adam drives the encoders/compressors/projection heads, a second the
interaction estimation head.  Each batch: forward all three pyramid
stages, InfoNCE per stage, a detached Monte-Carlo interaction teacher on
a subsample of positive pairs, interaction distillation, and cross-stage
self-distillation; a single backward feeds both optimizers.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CorpusSample, Dataset, alignment_ground_truth
from .interactions import sti_distributions, sti_monte_carlo
from .losses import (LossConfig, info_nce, self_distillation,
                     sti_distillation, total_loss)
from .model import AlignmentModel
from .optim import Adam
from .patches import NormStats, PatchGrid, build_patches, fit_zscore

LOG_HEADER = ["step", "loss_total", "loss_jnt", "loss_sgm", "loss_hlt",
              "loss_sd", "loss_d"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr_model: float = 1e-4
    lr_sti_head: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    mc_permutations: int = 16
    mc_pair_subsample: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if min(self.epochs, self.mc_permutations, self.mc_pair_subsample) < 1:
            raise ValueError("config values must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RetrievalReport:
    direction: str                       # t2m | m2t
    recall: dict[int, float]             # rank -> percentage
    medr: float
    protocol: str

    def to_dict(self) -> dict:
        return {"direction": self.direction, "protocol": self.protocol,
                "medr": self.medr,
                "recall": {f"R@{k}": v for k, v in sorted(self.recall.items())}}


@dataclass
class PreparedSample:
    sample: CorpusSample
    token_ids: list[int]
    grid: PatchGrid


def prepare_samples(model: AlignmentModel, samples: Sequence[CorpusSample],
                    stats: NormStats) -> list[PreparedSample]:
    cfg = model.config
    out = []
    for s in samples:
        out.append(PreparedSample(
            sample=s,
            token_ids=model.encode_tokens(s.tokens),
            grid=build_patches(s.motion, cfg.n_p, cfg.stride, stats)))
    return out


def similarity_matrix(pooled_text: list[Tensor],
                      pooled_motion: list[Tensor]) -> Tensor:
    """Row-normalised pooled vectors -> B x B cosine matrix."""
    pt = ad.concat(pooled_text, axis=0)
    pm = ad.concat(pooled_motion, axis=0)

    def normalise(x):
        n = ad.power(ad.tsum(ad.mul(x, x), axis=1, keepdims=True) + 1e-12, 0.5)
        return ad.div(x, n)

    return ad.matmul(normalise(pt), ad.transpose(normalise(pm)))


def train(model: AlignmentModel, dataset: Dataset, train_cfg: TrainConfig,
          loss_cfg: LossConfig, out_dir: str,
          log_rows: Optional[list] = None) -> NormStats:
    """Train in place; writes loss CSV and per-epoch checkpoints under out_dir."""
    train_samples = dataset.splits.get("train", [])
    if not train_samples:
        raise ValueError("empty training split")
    os.makedirs(out_dir, exist_ok=True)
    stats = fit_zscore([s.motion for s in train_samples], model.config.n_p)
    prepared = prepare_samples(model, train_samples, stats)
    if len(prepared) < train_cfg.batch_size:
        raise ValueError("training split smaller than one batch")

    opt_model = Adam(model.model_params(), lr=train_cfg.lr_model,
                     beta1=train_cfg.beta1, beta2=train_cfg.beta2)
    opt_head = Adam(model.head_params(), lr=train_cfg.lr_sti_head,
                    beta1=train_cfg.beta1, beta2=train_cfg.beta2)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    pair_rng = np.random.default_rng([train_cfg.seed, 2])
    meta = {"norm_stats": stats.to_dict(), "train_config": train_cfg.to_dict()}

    step = 0
    csv_path = os.path.join(out_dir, "loss_log.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch in range(train_cfg.epochs):
            order = order_rng.permutation(len(prepared))
            n_batches = len(prepared) // train_cfg.batch_size
            for b in range(n_batches):
                batch = [prepared[i] for i in
                         order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
                try:
                    row = _train_step(model, batch, train_cfg, loss_cfg,
                                      opt_model, opt_head, pair_rng, step)
                except FloatingPointError as e:
                    raise FloatingPointError(
                        f"non-finite loss at step {step}: {e}") from e
                writer.writerow(row)
                if log_rows is not None:
                    log_rows.append(row)
                step += 1
            model.save(os.path.join(out_dir, "latest"), meta)
    model.save(os.path.join(out_dir, "final"), meta)
    return stats


def _train_step(model, batch, train_cfg, loss_cfg, opt_model, opt_head,
                pair_rng, step):
    stages = [model.forward_sample(p.token_ids, p.grid) for p in batch]
    sims = {}
    for stage in ("jnt", "sgm", "hlt"):
        pt = [model.pooled_vector(st[stage].text, "text") for st in stages]
        pm = [model.pooled_vector(st[stage].motion, "motion") for st in stages]
        sims[stage] = similarity_matrix(pt, pm)
    l_stage = {k: info_nce(v, loss_cfg.tau) for k, v in sims.items()}

    n_pairs = min(train_cfg.mc_pair_subsample, len(batch))
    picks = pair_rng.choice(len(batch), size=n_pairs, replace=False)
    l_sd = {"jnt": Tensor(0.0), "sgm": Tensor(0.0)}
    if loss_cfg.lambda_s:
        for slot, pos in enumerate(picks):
            for stage_id, stage in enumerate(("jnt", "sgm")):
                emb = stages[pos][stage]
                universe = model.token_universe(emb.text, emb.motion)
                mc_seed = ((train_cfg.seed * 1_000_003 + step) * 64
                           + slot * 4 + stage_id)
                grid = sti_monte_carlo(universe, None,
                                       train_cfg.mc_permutations, mc_seed)
                teacher = sti_distributions(grid)
                student = model.sti_head_forward(emb.text, emb.motion)
                l_sd[stage] = l_sd[stage] + sti_distillation(teacher, student)
        l_sd = {k: ad.mul(v, 1.0 / n_pairs) for k, v in l_sd.items()}

    l_d = self_distillation(sims["jnt"], sims["sgm"], loss_cfg.tau)
    loss = total_loss(l_stage["jnt"], l_stage["sgm"], l_stage["hlt"],
                      l_sd["jnt"], l_sd["sgm"], l_d, loss_cfg)
    opt_model.zero_grad()
    opt_head.zero_grad()
    loss.backward()
    opt_model.step()
    opt_head.step()
    return [step, loss.item(), l_stage["jnt"].item(), l_stage["sgm"].item(),
            l_stage["hlt"].item(), (l_sd["jnt"] + l_sd["sgm"]).item(),
            l_d.item()]


# -- retrieval evaluation -----------------------------------------------------

def ranks_from_similarity(sim: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1-indexed rank of the true match per query; ties -> lower gallery index."""
    n = sim.shape[0]
    t2m = np.empty(n, dtype=np.int64)
    m2t = np.empty(n, dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        row = sim[i, :]
        t2m[i] = 1 + (row > row[i]).sum() + ((row == row[i]) & (idx < i)).sum()
        col = sim[:, i]
        m2t[i] = 1 + (col > col[i]).sum() + ((col == col[i]) & (idx < i)).sum()
    return t2m, m2t


RECALL_KS = (1, 2, 3, 5, 10)


def metrics_from_ranks(ranks: np.ndarray) -> tuple[dict[int, float], float]:
    recall = {k: 100.0 * float((ranks <= k).mean()) for k in RECALL_KS}
    return recall, float(np.median(ranks))


def holistic_similarity(model: AlignmentModel,
                        prepared: Sequence[PreparedSample]) -> np.ndarray:
    with ad.no_grad():
        pt, pm = [], []
        for p in prepared:
            stages = model.forward_sample(p.token_ids, p.grid)
            pt.append(model.pooled_vector(stages["hlt"].text, "text"))
            pm.append(model.pooled_vector(stages["hlt"].motion, "motion"))
        return similarity_matrix(pt, pm).data


def evaluate_retrieval(model: AlignmentModel,
                       prepared: Sequence[PreparedSample],
                       protocol: str,
                       chunk_size: int = 32,
                       shuffles: int = 10,
                       seed: int = 0) -> dict[str, RetrievalReport]:
    """R@k / median-rank over the full gallery or averaged 32-sample chunks."""
    if not prepared:
        raise ValueError("empty evaluation split")
    if protocol not in ("all", "small"):
        raise ValueError(f"unknown protocol '{protocol}'")
    sim = holistic_similarity(model, prepared)
    n = len(prepared)
    if protocol == "all":
        t2m, m2t = ranks_from_similarity(sim)
        rec_t, med_t = metrics_from_ranks(t2m)
        rec_m, med_m = metrics_from_ranks(m2t)
    else:
        if n < chunk_size:
            raise ValueError(
                f"gallery smaller than batch: {n} < {chunk_size}")
        rng = np.random.default_rng([seed, 5])
        acc: dict[str, list] = {"rt": [], "mt": [], "rm": [], "mm": []}
        for _ in range(shuffles):
            perm = rng.permutation(n)
            for c in range(n // chunk_size):
                ix = perm[c * chunk_size:(c + 1) * chunk_size]
                t2m, m2t = ranks_from_similarity(sim[np.ix_(ix, ix)])
                rec, med = metrics_from_ranks(t2m)
                acc["rt"].append(rec)
                acc["mt"].append(med)
                rec, med = metrics_from_ranks(m2t)
                acc["rm"].append(rec)
                acc["mm"].append(med)
        rec_t = {k: float(np.mean([r[k] for r in acc["rt"]])) for k in RECALL_KS}
        rec_m = {k: float(np.mean([r[k] for r in acc["rm"]])) for k in RECALL_KS}
        med_t = float(np.mean(acc["mt"]))
        med_m = float(np.mean(acc["mm"]))
    return {
        "t2m": RetrievalReport("t2m", rec_t, med_t, protocol),
        "m2t": RetrievalReport("m2t", rec_m, med_m, protocol),
    }


# -- segment alignment evaluation ----------------------------------------------

def evaluate_alignment(model: AlignmentModel,
                       prepared: Sequence[PreparedSample]
                       ) -> tuple[float, dict[int, tuple[int, int]]]:
    """Fraction of motion segment tokens matched to their true phrase.

    Returns overall accuracy plus a {segment count: (correct, total)}
    breakdown.  Deterministic per checkpoint.
    """
    cfg = model.config
    correct = 0
    total = 0
    breakdown: dict[int, list[int]] = {}
    with ad.no_grad():
        for p in prepared:
            stages = model.forward_sample(p.token_ids, p.grid)
            sgm = stages["sgm"]
            labels = alignment_ground_truth(p.sample, sgm.motion_provenance,
                                            cfg.n_p, cfg.stride)
            jnt_text = stages["jnt"].text
            # score at the window level: the compressor's global attention
            # mixes all windows, so its output tokens lose the temporal
            # locality the pre-compression window features still carry
            body = model.body_compress(stages["jnt"].motion,
                                       p.grid.patches.shape[0])
            n_windows = body.shape[0]
            sims = np.zeros((len(p.sample.segments), n_windows))
            for s_i, seg in enumerate(p.sample.segments):
                phrase_tokens = ad.gather_rows(
                    jnt_text, np.arange(seg.token_start, seg.token_end))
                pv = model.pooled_vector(phrase_tokens, "text")
                for w in range(n_windows):
                    wv = ad.reshape(ad.gather_rows(body, [w]),
                                    (1, cfg.d_model))
                    sims[s_i, w] = model.cosine(pv, wv).item()
            # per-phrase centering removes each phrase's baseline similarity
            # offset, leaving the temporal response profile
            sims -= sims.mean(axis=1, keepdims=True)
            n_seg = len(p.sample.segments)
            stat = breakdown.setdefault(n_seg, [0, 0])
            for m in range(sgm.motion.shape[0]):
                members = sgm.motion_provenance[m]
                pred = int(np.argmax(sims[:, members].mean(axis=1)))
                ok = pred == labels[m]
                correct += ok
                total += 1
                stat[0] += ok
                stat[1] += 1
    accuracy = correct / total if total else 0.0
    return accuracy, {k: (v[0], v[1]) for k, v in breakdown.items()}


# -- heatmap export --------------------------------------------------------------

def export_heatmaps(model: AlignmentModel, prep: PreparedSample,
                    stage: str) -> dict:
    """Token-level cosine and interaction-head grids for one sample."""
    if stage not in ("jnt", "sgm"):
        raise ValueError(f"invalid stage '{stage}' (expected jnt or sgm)")
    with ad.no_grad():
        stages = model.forward_sample(prep.token_ids, prep.grid)
        emb = stages[stage]
        et, em = emb.text.data, emb.motion.data

        def unit(x):
            return x / np.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-12)

        cos_grid = unit(et) @ unit(em).T
        sti_grid = model.sti_head_forward(emb.text, emb.motion).data
    if stage == "jnt":
        n_windows = prep.grid.patches.shape[0]
        from .patches import PART_NAMES
        motion_labels = [f"{PART_NAMES[part]}:w{w}"
                         for part in range(5) for w in range(n_windows)]
        text_labels = list(prep.sample.tokens)
        provenance = None
    else:
        motion_labels = [f"motion_seg{i}" for i in range(em.shape[0])]
        text_labels = [f"text_seg{i}" for i in range(et.shape[0])]
        provenance = {"text": emb.text_provenance,
                      "motion": emb.motion_provenance}
    out = {
        "stage": stage,
        "text_labels": text_labels,
        "motion_labels": motion_labels,
        "cosine": cos_grid.tolist(),
        "sti_head": sti_grid.tolist(),
    }
    if provenance is not None:
        out["provenance"] = provenance
    return out


def load_model_and_stats(checkpoint_dir: str) -> tuple[AlignmentModel, NormStats]:
    from .checkpoint import load_checkpoint
    model = AlignmentModel.load(checkpoint_dir)
    _, meta = load_checkpoint(checkpoint_dir)
    if "norm_stats" not in meta:
        raise ValueError("checkpoint missing normalisation statistics")
    return model, NormStats.from_dict(meta["norm_stats"])
