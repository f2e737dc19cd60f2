"""Pairwise ranking-accuracy benchmark.

Every test cloud is degraded at four increasing levels per distortion column;
all six level pairs are scored by each metric and a trial counts as correct
when the metric orders the pair like the true levels (ties count as wrong).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .distortion import BASE_KINDS, NoiseSpec, apply_noise, level_table, normalize_mix
from .encoder import UGDNet
from .metrics import chamfer, pl2pl, po2pl, po2po
from .pointcloud import PipelineConfig, PointCloud, avg_nn_edge_length, estimate_normals
from .prior import GmmPrior, ugd_details
from .rng import derive_seed

# alpha profiles are written in the column order GN, EN, IN, UN
TABLE_ORDER = ("GN", "EN", "IN", "UN")
DEFAULT_MIXES = ((0.5, 0.5, 0.0, 0.0), (0.33, 0.33, 0.33, 0.0), (0.25, 0.25, 0.25, 0.25))

# +1: higher score is better quality; -1: lower is better
POLARITY = {
    "UGD": 1,
    "UGD_uniform": 1,
    "po2po_PSNR": 1,
    "po2po_HD": -1,
    "po2pl_PSNR": 1,
    "po2pl_HD": -1,
    "pl2pl_PSNR": 1,
    "pl2pl_HD": 1,
    "CD": -1,
}
DEFAULT_METRICS = tuple(POLARITY)


def evaluation_levels(profile: str = "training") -> dict:
    """Four ξ values per base kind for a named level profile."""
    if profile == "training":
        return {k: level_table(k)[:4] for k in BASE_KINDS}
    if profile == "even-steps":
        return {k: (0.05, 0.1, 0.15, 0.2) for k in BASE_KINDS}
    raise ValueError(f"unknown level profile {profile!r}")


def mix_from_table_order(profile) -> tuple:
    """Reorder a (GN, EN, IN, UN) weight profile to (GN, UN, IN, EN) and
    normalise it to unit L2 norm."""
    gn, en, in_, un = (float(x) for x in profile)
    return normalize_mix([gn, un, in_, en])


def column_name(kind: str, mix=None) -> str:
    if kind != "MN":
        return kind
    return "MN(" + ",".join(f"{x:g}" for x in mix) + ")"


@dataclass(frozen=True)
class RankingTrial:
    cloud_id: str
    column: str
    levels: tuple
    scores: dict
    correct: dict

    def to_record(self) -> dict:
        return {"cloud": self.cloud_id, "column": self.column, "levels": list(self.levels),
                "scores": {k: [_jf(a), _jf(b)] for k, (a, b) in self.scores.items()},
                "correct": {k: (None if v is None else bool(v)) for k, v in self.correct.items()}}


def _jf(x):
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def pair_correct(score_a: float, score_b: float, polarity: int, a_better: bool = True) -> Optional[bool]:
    """Whether the metric ranks the pair in the true order; None if a score
    is NaN/missing."""
    if score_a is None or score_b is None or math.isnan(score_a) or math.isnan(score_b):
        return None
    diff = (score_a - score_b) * polarity
    return bool(diff > 0) if a_better else bool(diff < 0)


def ranking_accuracy(trials: Sequence[RankingTrial], metric: str) -> float:
    """Percentage of valid trials the metric orders correctly."""
    valid = [t.correct.get(metric) for t in trials if t.correct.get(metric) is not None]
    if not valid:
        raise ValueError(f"no valid trials for metric {metric!r}")
    return 100.0 * sum(valid) / len(valid)


def _version_scores(cloud: PointCloud, ref: PointCloud, ref_n: PointCloud, net, prior, cfg,
                    metrics, seed) -> dict:
    out = {}
    want = set(metrics)
    if want & {"UGD", "UGD_uniform"}:
        res = ugd_details(cloud, net, prior, cfg, seed=seed)
        out["UGD"] = res.score
        out["UGD_uniform"] = float(np.mean(res.log_scores))
    if want & {"po2po_PSNR", "po2po_HD"}:
        r = po2po(cloud, ref)
        out["po2po_PSNR"], out["po2po_HD"] = r.psnr_db, r.hausdorff
    if want & {"po2pl_PSNR", "po2pl_HD"}:
        r = po2pl(cloud, ref_n)
        out["po2pl_PSNR"], out["po2pl_HD"] = r.psnr_db, r.hausdorff
    if want & {"pl2pl_PSNR", "pl2pl_HD"}:
        r = pl2pl(estimate_normals(cloud, cfg.k_nn), ref_n)
        out["pl2pl_PSNR"], out["pl2pl_HD"] = r.mean, r.minimum
    if "CD" in want:
        out["CD"] = chamfer(cloud, ref)
    return {k: out[k] for k in metrics}


@dataclass
class BenchmarkReport:
    trials: list
    metrics: tuple
    columns: tuple
    invalid: dict = field(default_factory=dict)

    def accuracy(self, metric: str, column: Optional[str] = None) -> float:
        trials = self.trials if column is None else [t for t in self.trials if t.column == column]
        return ranking_accuracy(trials, metric)

    def mean_accuracy(self, metric: str) -> float:
        """Mean of the per-column accuracies (the MEAN column)."""
        return float(np.mean([self.accuracy(metric, c) for c in self.columns]))

    def table(self) -> dict:
        rows = {}
        for m in self.metrics:
            row = {}
            for c in self.columns:
                try:
                    row[c] = self.accuracy(m, c)
                except ValueError:
                    row[c] = float("nan")
            row["MEAN"] = float(np.nanmean([row[c] for c in self.columns]))
            rows[m] = row
        return rows

    def format_table(self) -> str:
        tab = self.table()
        cols = list(self.columns) + ["MEAN"]
        w0 = max(len(m) for m in self.metrics) + 2
        widths = [max(8, len(c) + 2) for c in cols]
        lines = ["Metric".ljust(w0) + "".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines.append("-" * len(lines[0]))
        for m in self.metrics:
            lines.append(m.ljust(w0) + "".join(f"{tab[m][c]:.2f}".rjust(w) for c, w in zip(cols, widths)))
        return "\n".join(lines)

    def records(self) -> list:
        return [t.to_record() for t in self.trials]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_benchmark(clean_test: Sequence[PointCloud], net: UGDNet, prior: GmmPrior,
                  cfg: PipelineConfig, levels="training", mixes=DEFAULT_MIXES,
                  seed: int = 0, kinds: Sequence[str] = TABLE_ORDER,
                  metrics: Sequence[str] = DEFAULT_METRICS, ids: Optional[Sequence[str]] = None,
                  progress=None) -> BenchmarkReport:
    """Score all level pairs of every test cloud under each distortion column."""
    if isinstance(levels, str):
        levels = evaluation_levels(levels)
    metrics = tuple(metrics)
    for m in metrics:
        if m not in POLARITY:
            raise ValueError(f"unknown metric {m!r}")
    ids = list(ids) if ids is not None else [f"test{i:03d}" for i in range(len(clean_test))]
    columns = [(k, None) for k in kinds] + [("MN", tuple(mx)) for mx in mixes]
    col_names = tuple(column_name(k, mx) for k, mx in columns)
    trials, invalid = [], {m: 0 for m in metrics}
    for ci, (cid, ref) in enumerate(zip(ids, clean_test)):
        l_r = avg_nn_edge_length(ref)
        ref_n = estimate_normals(ref, cfg.k_nn)
        for (kind, mix), cname in zip(columns, col_names):
            noise_seed = derive_seed(seed, "bench", ci, cname)
            scores = []
            for li in range(4):
                if kind == "MN":
                    base = tuple(levels[k][li] for k in BASE_KINDS)
                    spec = NoiseSpec.mixed(li + 1, mix_from_table_order(mix), base_xi=base, seed=noise_seed)
                else:
                    spec = NoiseSpec.pure(kind, li + 1, xi=levels[kind][li], seed=noise_seed)
                cloud = apply_noise(ref, spec, l_r, noise_seed)
                try:
                    sc = _version_scores(cloud, ref, ref_n, net, prior, cfg, metrics,
                                         derive_seed(seed, "bench-patches", ci, cname, li))
                except Exception:  # one failing version invalidates its trials
                    sc = {m: None for m in metrics}
                scores.append(sc)
            for a, b in combinations(range(4), 2):
                pair_scores, correct = {}, {}
                for m in metrics:
                    sa, sb = scores[a][m], scores[b][m]
                    pair_scores[m] = (sa, sb)
                    ok = pair_correct(sa, sb, POLARITY[m])
                    if ok is None:
                        invalid[m] += 1
                    correct[m] = ok
                trials.append(RankingTrial(cid, cname, (a + 1, b + 1), pair_scores, correct))
            if progress is not None:
                progress(cid, cname)
    return BenchmarkReport(trials, metrics, col_names, invalid)
