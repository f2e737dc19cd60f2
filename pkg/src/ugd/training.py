"""Self-supervised multi-task training of the patch encoder.

Three tasks share the encoder: pairwise ranking of two distortion levels of
the same cloud, distortion-type classification, and prediction of the noise
mix.  Task weights are balanced with GradNorm on the encoder's pooling layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .distortion import N_LEVELS, DistortedSample, build_distortion_set
from .encoder import UGDNet
from .pointcloud import PipelineConfig, PointCloud, extract_patches, patches_to_array
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)

TASKS = ("rank", "classify", "distribution")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    lr_decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 4
    epochs: int = 100
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    weight_floor: float = 0.05
    train_patches: int = 16
    tasks: tuple = TASKS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1 or self.train_patches < 1:
            raise ValueError("epochs, batch_size, decay_every and train_patches must be >= 1")
        if not (self.lr > 0 and self.lr_decay > 0 and self.gradnorm_lr > 0 and self.weight_floor > 0):
            raise ValueError("rates and floors must be positive")
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["tasks"] = list(self.tasks)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TrainConfig":
        rec = dict(rec)
        rec["tasks"] = tuple(rec.get("tasks", TASKS))
        return cls(**rec)


# ---------------------------------------------------------------------------
# losses


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _out(val, like):
    return val if torch.is_tensor(like) else float(val)


def rank_probability(I_a, I_b):
    """Probability that A is better than B: logistic of the index difference."""
    return _out(torch.sigmoid(_t(I_a) - _t(I_b)), I_a)


def ranking_loss(p_ab, target):
    p = torch.clamp(_t(p_ab), 1e-12, 1.0 - 1e-12)
    t = _t(target).to(p.dtype)
    return _out(-t * torch.log(p) - (1 - t) * torch.log1p(-p), p_ab)


def ranking_loss_from_diff(diff, target):
    """Same loss expressed on ``I_a - I_b``; stable for large differences."""
    diff = _t(diff)
    t = _t(target).to(diff.dtype)
    return _out(t * F.softplus(-diff) + (1 - t) * F.softplus(diff), diff)


def classification_loss(logits, label: int):
    logits = _t(logits)
    return _out(-torch.log_softmax(logits, dim=-1)[..., label], logits)


def distribution_loss(alpha, alpha_hat):
    """KL(alpha || alpha_hat) with alpha rescaled to sum to one."""
    a = _t(alpha)
    q = torch.clamp(_t(alpha_hat).to(a.dtype), min=1e-12)
    a = a / a.sum(dim=-1, keepdim=True)
    terms = torch.where(a > 0, a * (torch.log(torch.where(a > 0, a, torch.ones_like(a))) - torch.log(q)),
                        torch.zeros_like(a))
    return _out(terms.sum(dim=-1), alpha)


# ---------------------------------------------------------------------------
# GradNorm


@dataclass(frozen=True)
class GradNormState:
    weights: tuple = (1.0, 1.0, 1.0)
    initial_losses: Optional[tuple] = None
    history: tuple = ()

    @property
    def total(self) -> float:
        return float(len(self.weights))


def gradnorm_step(state: GradNormState, task_losses, shared_grad_norms, lr_w: float,
                  alpha: float = 1.5, floor: float = 1e-3) -> GradNormState:
    """One GradNorm update of the task weights.

    ``shared_grad_norms`` are the norms of each *unweighted* task loss'
    gradient on the shared layer.  The weighted norms are pulled towards
    ``mean(weighted norms) * r_i ** alpha`` where ``r_i`` is the task's
    relative inverse training rate; weights are then renormalised to sum to
    the number of tasks.
    """
    L = np.asarray(task_losses, dtype=np.float64)
    g = np.asarray(shared_grad_norms, dtype=np.float64)
    w = np.asarray(state.weights, dtype=np.float64)
    init = L.copy() if state.initial_losses is None else np.asarray(state.initial_losses)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(init > 0, L / init, 1.0)
    r = ratio / ratio.mean() if ratio.mean() > 0 else np.ones_like(ratio)
    G = w * g
    target = G.mean() * r**alpha
    grad = np.sign(G - target) * g
    w_new = np.maximum(w - lr_w * grad, floor)
    w_new = w_new * (len(w) / w_new.sum())
    rec = {"weights": w_new.tolist(), "losses": L.tolist(), "grad_norms": g.tolist()}
    return GradNormState(tuple(w_new.tolist()), tuple(init.tolist()), state.history + (rec,))


# ---------------------------------------------------------------------------
# rank pairs


@dataclass(frozen=True)
class RankPair:
    a: int
    b: int
    target: int
    parent: int
    kind: str


def make_rank_pairs(samples: Sequence[DistortedSample]) -> list[RankPair]:
    """All C(5, 2) level pairs per (clean cloud, kind); ``a`` is the lower
    (better) level, so ``target`` is 1."""
    groups: dict = {}
    for i, smp in enumerate(samples):
        groups.setdefault((smp.parent, smp.spec.kind), {})[smp.spec.level_index] = i
    pairs = []
    for (parent, kind), levels in sorted(groups.items()):
        missing = sorted(set(range(1, N_LEVELS + 1)) - set(levels))
        if missing:
            raise ValueError(f"cloud {parent} kind {kind} is missing levels {missing}")
        for la in range(1, N_LEVELS + 1):
            for lb in range(la + 1, N_LEVELS + 1):
                pairs.append(RankPair(levels[la], levels[lb], 1, parent, kind))
    return pairs


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: UGDNet
    log: list = field(default_factory=list)
    gradnorm: GradNormState = field(default_factory=GradNormState)


def _prepare(clean, pipeline: PipelineConfig, tcfg: TrainConfig):
    samples = build_distortion_set(clean, derive_seed(tcfg.seed, "distortions"))
    patch_cfg = replace(pipeline, m=tcfg.train_patches)
    arrays = []
    for i, smp in enumerate(samples):
        patches = extract_patches(smp.cloud, patch_cfg, seed=derive_seed(tcfg.seed, "train-patches", i))
        arr = patches_to_array(patches)
        if arr.shape[0] < tcfg.train_patches:
            # tiny clouds: repeat patches so every sample has the same count
            reps = -(-tcfg.train_patches // arr.shape[0])
            arr = np.concatenate([arr] * reps)[: tcfg.train_patches]
        arrays.append(arr)
    X = torch.from_numpy(np.stack(arrays).astype(np.float32))
    labels = torch.tensor([s.spec.class_index for s in samples])
    alphas = torch.tensor([s.spec.alpha for s in samples], dtype=torch.float32)
    groups: dict = {}
    for i, smp in enumerate(samples):
        groups.setdefault((smp.parent, smp.spec.kind), []).append((smp.spec.level_index, i))
    group_list = [[i for _, i in sorted(v)] for _, v in sorted(groups.items())]
    return samples, X, labels, alphas, group_list


def batch_losses(net: UGDNet, X: torch.Tensor, labels: torch.Tensor, alphas: torch.Tensor,
                 groups: Sequence[Sequence[int]]) -> dict:
    """Per-task mean losses for a batch of level groups.

    ``X`` holds patches (n_samples, m, s, 3); each group lists the sample
    indices of one (cloud, kind) ordered from least to most distorted.
    """
    idx = [i for g in groups for i in g]
    feats = net.encoder(X[idx])                       # (B, m, d)
    heads = net.heads
    w = torch.sigmoid(heads.weight(feats))[..., 0]    # (B, m)
    patch_I = heads.index(feats)[..., 0]
    I = (w * patch_I).sum(-1) / w.sum(-1)
    pooled = (w[..., None] * feats).sum(-2)           # (B, d)

    diffs = []
    start = 0
    for g in groups:
        for a in range(len(g)):
            for b in range(a + 1, len(g)):
                diffs.append(I[start + a] - I[start + b])
        start += len(g)
    rank = ranking_loss_from_diff(torch.stack(diffs), 1.0).mean()
    logits = heads.classify(pooled)
    cls = F.cross_entropy(logits, labels[idx])
    mix = torch.softmax(heads.mix(pooled), dim=-1)
    dist = distribution_loss(alphas[idx].to(mix.dtype), mix).mean()
    return {"rank": rank, "classify": cls, "distribution": dist}


def train(clean: Sequence[PointCloud], pipeline: PipelineConfig, tcfg: TrainConfig,
          net: Optional[UGDNet] = None, progress=None) -> TrainResult:
    """Train the encoder and heads; returns the trained net and the loss log.

    A batch is ``batch_size`` level groups, each group being the five levels
    of one clean cloud under one distortion kind (10 rank pairs).
    """
    if len(clean) < 2:
        raise TrainingError("training needs at least 2 clean clouds")
    _, X, labels, alphas, groups = _prepare(clean, pipeline, tcfg)
    if net is None:
        net = UGDNet.from_config(pipeline, seed=derive_seed(tcfg.seed, "init"))
    net.float().train()
    active = [t for t in TASKS if t in tcfg.tasks]
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=tcfg.decay_every, gamma=tcfg.lr_decay)
    gn = GradNormState(weights=tuple(1.0 for _ in active))
    shared = net.shared_layer().weight
    log_rows = []
    for epoch in range(1, tcfg.epochs + 1):
        order = derive_rng(tcfg.seed, "epoch", epoch).permutation(len(groups))
        sums = {t: 0.0 for t in TASKS}
        n_batches = 0
        for bi in range(0, len(order), tcfg.batch_size):
            batch = [groups[j] for j in order[bi:bi + tcfg.batch_size]]
            losses = batch_losses(net, X, labels, alphas, batch)
            for t in TASKS:
                val = float(losses[t].detach())
                if not math.isfinite(val):
                    raise TrainingError(f"non-finite {t} loss at epoch {epoch}, batch {bi // tcfg.batch_size}")
                sums[t] += val
            task_losses = [losses[t] for t in active]
            if len(active) > 1:
                norms = [float(torch.linalg.vector_norm(
                    torch.autograd.grad(L, shared, retain_graph=True)[0])) for L in task_losses]
                weights = gn.weights
                gn = gradnorm_step(gn, [float(L.detach()) for L in task_losses], norms, tcfg.gradnorm_lr,
                                   tcfg.gradnorm_alpha, tcfg.weight_floor)
            else:
                weights = (1.0,)
            total = sum(wt * L for wt, L in zip(weights, task_losses))
            opt.zero_grad()
            total.backward()
            opt.step()
            n_batches += 1
        row = {
            "epoch": epoch,
            "lr": opt.param_groups[0]["lr"],
            "loss": {t: sums[t] / n_batches for t in TASKS},
            "task_weights": dict(zip(active, gn.weights if len(active) > 1 else (1.0,))),
        }
        log_rows.append(row)
        log.info("epoch %d %s", epoch, row)
        if progress is not None:
            progress(row)
        sched.step()
    net.eval()
    net.invalidate()
    return TrainResult(net=net, log=log_rows, gradnorm=gn)
