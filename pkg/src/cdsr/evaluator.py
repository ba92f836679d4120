"""Leave-one-out ranking over the full domain vocabulary."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import DOMAINS, EvalInstance, truncate_pad
from .seqmodel import SequenceBatch

KS = (10, 20)
METRICS = ("MRR", "NDCG@10", "NDCG@20", "Recall@10", "Recall@20")


class EvaluationError(RuntimeError):
    pass


def ranks_from_scores(scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 + number of candidates scoring strictly above the target (ties favour the target)."""
    target_score = scores.gather(-1, target.unsqueeze(-1))
    return 1 + (scores > target_score).sum(-1)


def rank_target(h_dom: torch.Tensor, h: torch.Tensor, weight: torch.Tensor, target: int) -> int:
    if not 0 <= target < weight.shape[1]:
        raise IndexError(f"target {target} outside {weight.shape[1]} candidates")
    scores = (h_dom + h) @ weight
    return int(ranks_from_scores(scores, torch.tensor(target)))


def instance_metrics(rank: int, ks=KS) -> dict:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    out = {"MRR": 1.0 / rank}
    for k in ks:
        hit = rank <= k
        out[f"NDCG@{k}"] = 1.0 / math.log2(rank + 1) if hit else 0.0
        out[f"Recall@{k}"] = 1.0 if hit else 0.0
    return out


@dataclass
class MetricsReport:
    partition: str
    domains: dict = field(default_factory=dict)  # domain -> {metric: value, "n_instances": int}

    @classmethod
    def from_ranks(cls, partition: str, ranks_by_domain: dict) -> "MetricsReport":
        report = cls(partition)
        for domain, ranks in ranks_by_domain.items():
            if not len(ranks):
                continue
            rows = [instance_metrics(int(r)) for r in ranks]
            summary = {m: float(np.mean([row[m] for row in rows])) for m in METRICS}
            summary["n_instances"] = len(rows)
            report.domains[domain] = summary
        return report

    def mrr(self) -> float:
        """Unweighted mean of the per-domain MRRs."""
        return float(np.mean([v["MRR"] for v in self.domains.values()]))

    def to_dict(self) -> dict:
        return {"partition": self.partition, "domains": self.domains}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(data["partition"], data["domains"])

    def csv_rows(self):
        for domain, values in sorted(self.domains.items()):
            for metric in METRICS:
                yield {"partition": self.partition, "domain": domain, "metric": metric, "value": values[metric]}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"metrics_{self.partition}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(d / f"metrics_{self.partition}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["partition", "domain", "metric", "value"])
            writer.writeheader()
            writer.writerows(self.csv_rows())


@torch.no_grad()
def instance_ranks(model, instances: list[EvalInstance], max_len: int, batch_size: int = 256) -> np.ndarray:
    """Rank of each instance's target, read at the final (most recent) prefix position."""
    was_training = model.training
    model.eval()
    try:
        tables = model.sequence_tables()
        ranks = np.zeros(len(instances), dtype=np.int64)
        for start in range(0, len(instances), batch_size):
            chunk = instances[start : start + batch_size]
            batch = SequenceBatch.from_sequences([truncate_pad(inst.prefix, max_len) for inst in chunk], model.n_x)
            H, HX, HY = (s[:, -1] for s in model.states(batch, tables))
            for domain, h_dom in (("X", HX), ("Y", HY)):
                rows = [i for i, inst in enumerate(chunk) if inst.domain == domain]
                if not rows:
                    continue
                sel = torch.tensor(rows)
                offset = 0 if domain == "X" else model.n_x
                target = torch.tensor([chunk[i].target - offset for i in rows])
                scores = (h_dom[sel] + H[sel]) @ model.head(domain)
                ranks[start + sel.numpy()] = ranks_from_scores(scores, target).numpy()
        return ranks
    finally:
        model.train(was_training)


def evaluate(model, instances: list[EvalInstance], partition: str, max_len: int = 30) -> MetricsReport:
    chosen = [inst for inst in instances if inst.partition == partition]
    if not chosen:
        raise EvaluationError(f"no instances in partition {partition!r}")
    ranks = instance_ranks(model, chosen, max_len)
    by_domain = {dom: [r for r, inst in zip(ranks, chosen) if inst.domain == dom] for dom in DOMAINS}
    return MetricsReport.from_ranks(partition, by_domain)
