"""Multi-task training: batching, loss assembly, Adam steps, early stopping, checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import augment_items, infonce, sample_noise
from .corpus import PAD, CrossDomainSequence, DatasetSplit, DomainVocab
from .evaluator import MetricsReport, evaluate, ranks_from_scores
from .graph import ItemGraphs
from .model import CDSRModel
from .objective import PARTS, anneal_eta, cross_domain_loss, single_domain_loss, total_loss
from .seqmodel import SequenceBatch
from .spectrum import filter_direction, inter_infonce, project_out, sample_filter

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_generation", "std_normal_noise", "no_alignment", "no_asf", "no_annealing")
ABLATION_VARIANTS = {
    "A": (),
    "B": ("no_generation", "no_alignment"),
    "C": ("no_generation",),
    "D": ("std_normal_noise",),
    "E": ("no_alignment",),
    "F": ("no_asf",),
    "G": ("no_annealing",),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class HyperParams:
    d: int = 256
    max_len: int = 30
    layers: int = 2
    tau: float = 0.2
    alpha: float = 0.1
    batch_size: int = 256
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 5
    lambda1: float = 0.1
    lambda2: float = 0.1
    n_anneal: int = 50
    seed: int = 0
    encoder_kind: str = "gnn-att"
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int | None = None
    dropout: float = 0.2
    window: int = 1
    contrast_cap: int = 512
    contrast_reduction: str = "mean"
    track_train_mrr: bool = False
    no_generation: bool = False
    std_normal_noise: bool = False
    no_alignment: bool = False
    no_asf: bool = False
    no_annealing: bool = False

    def __post_init__(self):
        for name in ("d", "max_len", "batch_size", "max_epochs", "patience", "n_anneal", "n_blocks", "n_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.layers < 0 or self.tau <= 0 or self.alpha < 0 or self.lr <= 0:
            raise ValueError("layers >= 0, tau > 0, alpha >= 0 and lr > 0 are required")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.contrast_reduction not in ("mean", "sum"):
            raise ValueError("contrast_reduction must be 'mean' or 'sum'")

    def with_variant(self, letter: str) -> "HyperParams":
        """Copy with the ablation flags of a variant letter (B..G, or "all" for B)."""
        key = "B" if letter.lower() == "all" else letter.upper()
        if key not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {letter!r}")
        flags = {f: f in ABLATION_VARIANTS[key] for f in ABLATION_FLAGS}
        return replace(self, **flags)

    @property
    def effective_lambda1(self) -> float:
        return 0.0 if self.no_generation else self.lambda1

    @property
    def effective_lambda2(self) -> float:
        return 0.0 if self.no_alignment else self.lambda2

    def eta(self, epoch: int) -> float:
        return 0.5 if self.no_annealing else anneal_eta(epoch, self.n_anneal)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters


# standard deviation of a unit normal truncated to [-2, 2]
_TRUNC2_STD = math.sqrt(1 - 4 * math.exp(-2) / math.sqrt(2 * math.pi) / math.erf(2 / math.sqrt(2)))


def _trunc_normal(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    """Normal truncated at two underlying deviations, rescaled so the result has standard deviation ``std``."""
    sigma = std / _TRUNC2_STD
    torch.nn.init.trunc_normal_(t, 0.0, sigma, -2 * sigma, 2 * sigma, generator=gen)


def _fan_in_uniform(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 - 1) * bound)


def init_params(model: CDSRModel, seed: int) -> CDSRModel:
    """Deterministic initialization keyed on ``seed``.

    Embedding and positional tables: truncated normal with standard deviation
    0.02. Weight matrices: uniform with fan-in scaling. Filter means:
    0.01 * standard normal. Biases zero, layer-norm gains one.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if name == "embedding" or name.endswith(".pos"):
            _trunc_normal(p, 0.02, gen)
        elif name.startswith("filter_mu"):
            with torch.no_grad():
                p.copy_(0.01 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        elif name in ("head_x", "head_y"):
            _fan_in_uniform(p, p.shape[0], gen)
        elif ".ln" in name or "ln_" in name:
            with torch.no_grad():
                p.fill_(1.0 if name.endswith("weight") else 0.0)
        elif "bias" in name:
            with torch.no_grad():
                p.zero_()
        else:
            _fan_in_uniform(p, p.shape[1], gen)
    return model


def build_model(hp: HyperParams, vocab_sizes: tuple[int, int], graphs: ItemGraphs, seed: int | None = None) -> CDSRModel:
    n_x, n_y = vocab_sizes
    model = CDSRModel(
        n_x, n_y, graphs, hp.d, hp.max_len, hp.layers, hp.encoder_kind, hp.n_blocks, hp.n_heads, hp.d_ff, hp.dropout
    )
    return init_params(model, hp.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# batches


@dataclass
class TrainData:
    """Every training sequence's last ``max_len + 1`` items, left-padded."""

    items: np.ndarray
    domains: np.ndarray
    n_x: int

    @classmethod
    def from_sequences(cls, seqs: list[CrossDomainSequence], max_len: int, n_x: int) -> "TrainData":
        T = max_len + 1
        keep = [s for s in seqs if s.n_real() >= 2]
        items = np.full((len(keep), T), PAD, dtype=np.int64)
        domains = np.full((len(keep), T), -1, dtype=np.int64)
        code = {"X": 0, "Y": 1}
        for r, s in enumerate(keep):
            real = [(it, code[dm]) for it, dm in zip(s.items, s.domains) if it != PAD][-T:]
            for c, (it, dm) in enumerate(real, start=T - len(real)):
                items[r, c], domains[r, c] = it, dm
        return cls(items, domains, n_x)

    def __len__(self):
        return len(self.items)

    def batch(self, rows) -> "TrainBatch":
        return TrainBatch.from_window(
            torch.from_numpy(self.items[rows]), torch.from_numpy(self.domains[rows]), self.n_x
        )


@dataclass
class TrainBatch:
    window: SequenceBatch
    inputs: SequenceBatch
    target_local: torch.Tensor
    target_domain: torch.Tensor

    @classmethod
    def from_window(cls, items: torch.Tensor, domains: torch.Tensor, n_x: int) -> "TrainBatch":
        inp_items, inp_doms = items[:, :-1], domains[:, :-1]
        tgt_items, tgt_doms = items[:, 1:], domains[:, 1:]
        live = (inp_items != PAD) & (tgt_items != PAD)
        tgt_doms = torch.where(live, tgt_doms, torch.full_like(tgt_doms, -1))
        local = torch.where(tgt_doms == 1, tgt_items - n_x, tgt_items)
        local = torch.where(live, local, torch.zeros_like(local))
        return cls(SequenceBatch(items, domains, n_x), SequenceBatch(inp_items, inp_doms, n_x), local, tgt_doms)

    @property
    def size(self) -> int:
        return self.inputs.items.shape[0]


def batch_items(window: SequenceBatch, domain: str, cap: int):
    """Unique domain items of a batch in first-occurrence order, with the row that owns each.

    Returns (local item ids, owning row) as long tensors, truncated to ``cap`` items.
    """
    view = window.view(domain).numpy()
    rows, cols = np.nonzero(view >= 0)
    ids = view[rows, cols]
    uniq, first = np.unique(ids, return_index=True)
    order = np.argsort(first, kind="stable")[:cap]
    return torch.from_numpy(uniq[order]), torch.from_numpy(rows[first[order]])


@dataclass
class Noise:
    """Per-step standard-normal draws: one per sequence per domain, one filter draw per domain."""

    seq: dict
    filt: dict

    @classmethod
    def sample(cls, batch_size: int, d: int, gen: torch.Generator, dtype=torch.float32) -> "Noise":
        seq = {dom: torch.randn(batch_size, d, generator=gen, dtype=dtype) for dom in ("X", "Y")}
        filt = {dom: torch.randn(d, generator=gen, dtype=dtype) for dom in ("X", "Y")}
        return cls(seq, filt)


# ---------------------------------------------------------------------------
# losses


def compute_losses(model: CDSRModel, batch: TrainBatch, hp: HyperParams, noise: Noise) -> dict:
    """All six loss parts for one batch."""
    prop = model.propagated()
    zero = model.embedding.sum() * 0.0

    def scale(n):
        # summed InfoNCE -> per-anchor mean, matching the averaged next-item losses
        return n if hp.contrast_reduction == "mean" else 1
    parts = {}
    local = {"X": prop.x, "Y": prop.y}
    anchors, augmented = {}, {}
    for dom in ("X", "Y"):
        items, owner = batch_items(batch.window, dom, hp.contrast_cap)
        base = local[dom][items]
        anchors[dom] = items
        if hp.effective_lambda1 == 0 or len(items) == 0:
            augmented[dom] = base
            parts[f"intra_{dom.lower()}"] = zero
            continue
        eps = noise.seq[dom]
        if hp.std_normal_noise:
            beta = eps
        else:
            gen = model.generators[dom]
            view = batch.window.view(dom)
            h = gen.encode(local[dom][view.clamp_min(0)], view >= 0)
            beta = sample_noise(gen, h, eps)
        augmented[dom] = augment_items(base, beta[owner], hp.alpha)
        parts[f"intra_{dom.lower()}"] = infonce(base, augmented[dom], hp.tau) / scale(len(items))

    if hp.effective_lambda2 == 0 or (len(anchors["X"]) == 0 and len(anchors["Y"]) == 0):
        parts["align"] = zero
    else:
        global_rows = {"X": anchors["X"], "Y": anchors["Y"] + model.n_x}
        filtered = {}
        for dom in ("X", "Y"):
            rows = prop.mixed[global_rows[dom]]
            if hp.no_asf:
                filtered[dom] = rows
                continue
            v = sample_filter(model.filter_mu[dom], noise.filt[dom])
            v_hat = filter_direction(prop.mixed, v)
            filtered[dom] = rows if v_hat is None else project_out(rows, v_hat)
        n_pairs = len(anchors["X"]) + len(anchors["Y"])
        parts["align"] = inter_infonce(filtered["X"], augmented["X"], filtered["Y"], augmented["Y"], hp.tau) / scale(
            n_pairs
        )

    H, HX, HY = model.states(batch.inputs, model.sequence_tables(prop))
    tgt, tdom = batch.target_local, batch.target_domain
    parts["single_x"] = single_domain_loss(HX, H, model.head_x, tgt, tdom == 0)
    parts["single_y"] = single_domain_loss(HY, H, model.head_y, tgt, tdom == 1)
    parts["cross"] = cross_domain_loss(H, model.head_x, model.head_y, tgt, tdom)
    return parts


def objective(model, batch, hp, noise, eta):
    parts = compute_losses(model, batch, hp, noise)
    return total_loss(parts, eta, hp.effective_lambda1, hp.effective_lambda2), parts


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    model: CDSRModel
    optimizer: torch.optim.Optimizer
    noise_gen: torch.Generator
    epoch: int = 0
    best_val_mrr: float = -1.0
    best_epoch: int = -1


def make_state(model: CDSRModel, hp: HyperParams) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, betas=(0.9, 0.999), weight_decay=0.0)
    return TrainState(model, opt, torch.Generator().manual_seed(hp.seed + 1))


def train_epoch(state: TrainState, data: TrainData, hp: HyperParams) -> dict:
    """One shuffled pass of Adam steps; returns mean loss parts, the total and eta."""
    model, opt = state.model, state.optimizer
    model.train()
    eta = hp.eta(state.epoch)
    order = torch.randperm(len(data), generator=state.noise_gen).numpy()
    sums = {k: 0.0 for k in (*PARTS, "total")}
    n_batches = 0
    for start in range(0, len(order), hp.batch_size):
        batch = data.batch(order[start : start + hp.batch_size])
        noise = Noise.sample(batch.size, hp.d, state.noise_gen, model.embedding.dtype)
        loss, parts = objective(model, batch, hp, noise, eta)
        if not torch.isfinite(loss):
            dump = {k: float(v.detach()) for k, v in parts.items()}
            raise TrainingError(f"non-finite loss at epoch {state.epoch}, batch {n_batches}: {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        for k, v in parts.items():
            sums[k] += float(v.detach())
        sums["total"] += float(loss.detach())
        n_batches += 1
    state.epoch += 1
    out = {k: v / max(n_batches, 1) for k, v in sums.items()}
    out["eta"] = eta
    return out


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad = 0

    def step(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@torch.no_grad()
def train_target_mrr(model: CDSRModel, data: TrainData, batch_size: int = 256) -> float:
    """MRR of every next-item target inside the training windows (single-domain scoring)."""
    was_training = model.training
    model.eval()
    tables = model.sequence_tables()
    recip = []
    for start in range(0, len(data), batch_size):
        batch = data.batch(np.arange(start, min(start + batch_size, len(data))))
        H, HX, HY = model.states(batch.inputs, tables)
        for code, h_dom, head in ((0, HX, model.head_x), (1, HY, model.head_y)):
            mask = batch.target_domain == code
            if mask.any():
                scores = (h_dom[mask] + H[mask]) @ head
                recip.append(1.0 / ranks_from_scores(scores, batch.target_local[mask]).double())
    model.train(was_training)
    return float(torch.cat(recip).mean()) if recip else 0.0


@dataclass
class FitResult:
    model: CDSRModel
    state: TrainState
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mrr: float = -1.0
    val_report: MetricsReport | None = None


def fit(
    vocab: DomainVocab,
    split: DatasetSplit,
    hp: HyperParams,
    graphs: ItemGraphs | None = None,
    progress=None,
) -> FitResult:
    """Train with validation-MRR early stopping and restore the best epoch's parameters."""
    torch.manual_seed(hp.seed)
    if graphs is None:
        graphs = ItemGraphs.build(split.train, vocab.n_x, vocab.n_y, hp.window)
    model = build_model(hp, (vocab.n_x, vocab.n_y), graphs)
    state = make_state(model, hp)
    data = TrainData.from_sequences(split.train, hp.max_len, vocab.n_x)
    stopper = EarlyStopper(hp.patience)
    result = FitResult(model, state)
    best = None
    for epoch in range(hp.max_epochs):
        t0 = time.perf_counter()
        losses = train_epoch(state, data, hp)
        report = evaluate(model, split.eval_instances, "val", hp.max_len)
        row = {"epoch": epoch, **losses, "val_mrr": report.mrr(), "val": report.to_dict()["domains"]}
        if hp.track_train_mrr:
            row["train_mrr"] = train_target_mrr(model, data)
        row["seconds"] = time.perf_counter() - t0
        result.history.append(row)
        if progress:
            progress(row)
        improved, stop = stopper.step(epoch, row["val_mrr"])
        if improved:
            best = (copy.deepcopy(model.state_dict()), copy.deepcopy(state.optimizer.state_dict()), report)
            state.best_val_mrr, state.best_epoch = row["val_mrr"], epoch
        if stop:
            logger.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    if best is not None:
        model.load_state_dict(best[0])
        state.optimizer.load_state_dict(best[1])
        result.val_report = best[2]
    result.best_epoch, result.best_val_mrr = state.best_epoch, state.best_val_mrr
    return result


# ---------------------------------------------------------------------------
# gradient check


def toy_sequences(n_users: int, n_x: int, n_y: int, length: int, seed: int) -> list[CrossDomainSequence]:
    rng = np.random.default_rng(seed)
    seqs = []
    for u in range(n_users):
        doms = ["X", "Y"] * (length // 2) + ["X"] * (length % 2)
        rng.shuffle(doms)
        items = [int(rng.integers(n_x)) if d == "X" else n_x + int(rng.integers(n_y)) for d in doms]
        seqs.append(CrossDomainSequence(f"u{u}", items, doms))
    return seqs


@dataclass
class GradCheckReport:
    groups: dict  # group -> max relative error
    loss: float
    n_checked: int

    @property
    def max_rel_error(self) -> float:
        return max(self.groups.values()) if self.groups else 0.0


def grad_check(
    hp: HyperParams,
    sequences: list[CrossDomainSequence] | None = None,
    n_x: int = 6,
    n_y: int = 6,
    eta: float = 0.75,
    step: float = 1e-5,
) -> GradCheckReport:
    """Central differences vs autograd on the assembled objective, in double precision.

    Per group, the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    if hp.d > 8 or n_x + n_y > 12:
        raise ValueError("grad_check is meant for d <= 8 and vocab <= 12")
    if sequences is None:
        sequences = toy_sequences(4, n_x, n_y, hp.max_len + 1, hp.seed)
    graphs = ItemGraphs.build(sequences, n_x, n_y, hp.window)
    model = build_model(replace(hp, dropout=0.0), (n_x, n_y), graphs).double()
    model.eval()
    data = TrainData.from_sequences(sequences, hp.max_len, n_x)
    batch = data.batch(np.arange(len(data)))
    noise = Noise.sample(batch.size, hp.d, torch.Generator().manual_seed(hp.seed + 7), torch.float64)

    def f():
        return objective(model, batch, hp, noise, eta)[0]

    loss = f()
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(params.items(), grads)}

    groups, checked = {}, 0
    name_of = {id(p): n for n, p in params.items()}
    with torch.no_grad():
        for group, plist in model.parameter_groups().items():
            err_num, scale = 0.0, 0.0
            for p in plist:
                name = name_of[id(p)]
                flat = p.view(-1)
                a = analytic[name].reshape(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + step
                    up = f().item()
                    flat[i] = orig - step
                    down = f().item()
                    flat[i] = orig
                    num = (up - down) / (2 * step)
                    err_num = max(err_num, abs(a[i].item() - num))
                    scale = max(scale, abs(a[i].item()), abs(num))
                    checked += 1
            groups[group] = err_num / scale if scale > 0 else 0.0
    return GradCheckReport(groups, float(loss.detach()), checked)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, state: TrainState, hp: HyperParams, metrics: dict | None = None, data_dir=None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model = state.model
    tensors = {name: t for name, t in model.state_dict().items()}
    if model.global_override is not None:
        tensors["global_override"] = model.global_override
    steps = {}
    names = [n for n, _ in model.named_parameters()]
    opt_state = state.optimizer.state_dict()
    for idx, st in opt_state["state"].items():
        name = names[idx]
        tensors[f"adam.exp_avg/{name}"] = st["exp_avg"]
        tensors[f"adam.exp_avg_sq/{name}"] = st["exp_avg_sq"]
        steps[name] = float(st["step"])
    ckpt.write_tensors(d / ckpt.TENSORS, tensors)
    ckpt.write_rng(
        d / ckpt.RNG,
        {"torch": torch.get_rng_state().numpy().tobytes(), "noise": state.noise_gen.get_state().numpy().tobytes()},
    )
    ckpt.write_manifest(
        d,
        {
            "format": 1,
            "hyperparams": asdict(hp),
            "n_x": model.n_x,
            "n_y": model.n_y,
            "epoch": state.epoch,
            "best_epoch": state.best_epoch,
            "best_val_mrr": state.best_val_mrr,
            "metrics": metrics or {},
            "adam_steps": steps,
            "data_dir": str(data_dir) if data_dir is not None else None,
        },
    )


def load_checkpoint(directory, graphs: ItemGraphs | None = None) -> tuple[TrainState, HyperParams, dict]:
    """Rebuild model, optimizer and RNGs; graphs default to the manifest's ``data_dir``."""
    d = Path(directory)
    manifest = ckpt.read_manifest(d)
    hp = HyperParams.from_dict(manifest["hyperparams"])
    if graphs is None:
        if not manifest.get("data_dir"):
            raise ckpt.CheckpointError("checkpoint does not record its data directory; pass graphs explicitly")
        graphs = ItemGraphs.load(manifest["data_dir"])
    tensors = ckpt.read_tensors(d / ckpt.TENSORS)
    try:
        model = CDSRModel(
            manifest["n_x"], manifest["n_y"], graphs, hp.d, hp.max_len, hp.layers,
            hp.encoder_kind, hp.n_blocks, hp.n_heads, hp.d_ff, hp.dropout,
        )
    except ValueError as exc:
        raise ckpt.CheckpointMismatch(str(exc)) from exc
    own = model.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise ckpt.CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    try:
        model.load_state_dict({k: tensors[k] for k in own})
    except RuntimeError as exc:
        raise ckpt.CheckpointMismatch(f"tensor shapes do not match hyperparameters: {exc}") from exc
    if "global_override" in tensors:
        model.global_override = tensors["global_override"]

    state = make_state(model, hp)
    names = [n for n, _ in model.named_parameters()]
    opt_sd = state.optimizer.state_dict()
    for idx, name in enumerate(names):
        if f"adam.exp_avg/{name}" in tensors:
            opt_sd["state"][idx] = {
                "step": torch.tensor(manifest["adam_steps"][name]),
                "exp_avg": tensors[f"adam.exp_avg/{name}"],
                "exp_avg_sq": tensors[f"adam.exp_avg_sq/{name}"],
            }
    state.optimizer.load_state_dict(opt_sd)
    if (d / ckpt.RNG).exists():
        rng = ckpt.read_rng(d / ckpt.RNG)
        state.noise_gen.set_state(torch.frombuffer(bytearray(rng["noise"]), dtype=torch.uint8))
    state.epoch = manifest["epoch"]
    state.best_epoch = manifest.get("best_epoch", -1)
    state.best_val_mrr = manifest.get("best_val_mrr", -1.0)
    return state, hp, manifest
