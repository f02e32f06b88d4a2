"""Training, evaluation, checkpointing, gradient verification, and the
ablation/sweep harnesses.

Determinism contract: a run is a pure function of (config, data).  Three
seeded streams are derived from the config seed — parameter initialization
uses the seed itself, batch shuffling uses seed + 1, dropout uses seed + 2 —
so ablation variants that only change loss terms start from identical
weights.  Training runs in float32; the gradient checker rebuilds a toy
model in float64.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .alignment import LossBreakdown, alignment_loss
from .config import ModelConfig, TrainConfig
from .datamodel import DatasetSplit, RawModalityBatch, SyntheticSpec, generate_synthetic
from .errors import CheckpointError, MiarError, TrainingDivergedError
from .fusion import MiarModel, build_model
from .objective_metrics import MetricsReport, compute_metrics, task_loss, total_loss

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

SHUFFLE_SEED_OFFSET = 1
DROPOUT_SEED_OFFSET = 2

CHECKPOINT_FORMAT = "miar-checkpoint-v1"
PARAMS_FILE = "params.f32"
CHECKPOINT_JSON = "checkpoint.json"

DEFAULT_OMEGA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)

GRAD_CHECK_TOY = dict(
    d_t1=6, d_t2=6, d_a=7, d_v=5, d_model=8, n_heads=2,
    ffn_mult=2, d_align=4, dropout=0.0,
)
GRAD_CHECK_N = 4
GRAD_CHECK_LEN = 8


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    valid: MetricsReport

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train": self.train.to_dict(),
            "valid": self.valid.to_dict(),
        }

    @classmethod
    def from_dict(cls, values: dict) -> "EpochRecord":
        return cls(
            epoch=values["epoch"],
            train=LossBreakdown.from_dict(values["train"]),
            valid=MetricsReport.from_dict(values["valid"]),
        )


@dataclass
class TrainHistory:
    """Per-step loss records and per-epoch summaries of one training run."""

    steps: list[LossBreakdown] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "steps": [s.to_dict() for s in self.steps],
            "epochs": [e.to_dict() for e in self.epochs],
        }

    @classmethod
    def from_dict(cls, values: dict) -> "TrainHistory":
        return cls(
            steps=[LossBreakdown.from_dict(s) for s in values["steps"]],
            epochs=[EpochRecord.from_dict(e) for e in values["epochs"]],
            best_epoch=values["best_epoch"],
        )


@dataclass
class Checkpoint:
    """Model parameters plus everything needed to rebuild and verify them."""

    params: dict[str, torch.Tensor]
    config: TrainConfig
    dims: tuple[int, int, int, int]
    epoch: int
    best_epoch: int
    history: TrainHistory

    def restore_model(self) -> MiarModel:
        model = MiarModel(self.config.model_config(self.dims))
        model.load_state_dict(self.params, strict=True)
        return model


def _mean_breakdown(steps: Sequence[LossBreakdown]) -> LossBreakdown:
    """Average component terms over steps, then recombine so the align/total
    identities hold in the averaged record too."""
    n = len(steps)
    mean = lambda xs: float(sum(xs)) / n
    return LossBreakdown(
        ttcl=mean([s.ttcl for s in steps]),
        avcl=mean([s.avcl for s in steps]),
        tatvm=mean([s.tatvm for s in steps]),
        align=0.0,  # recomputed by detached()
        alpha=steps[0].alpha,
        task=mean([s.task for s in steps]),
        omega=steps[0].omega,
    ).detached()


def compute_losses(
    model: MiarModel,
    batch: RawModalityBatch,
    config: TrainConfig,
    dropout_gen: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective on one batch: returns (total tensor, tensor breakdown)."""
    output = model(batch, dropout_gen=dropout_gen)
    aligned = model.aligner(output.tokens, normalize=config.normalize_alignment)
    breakdown = alignment_loss(
        aligned,
        tau=config.tau,
        alpha=config.alpha,
        p=config.norm_p,
        contrastive=config.contrastive_alignment,
        norm=config.norm_alignment,
    )
    task = task_loss(output.prediction, batch.labels)
    breakdown = total_loss(task, breakdown, config.omega)
    return breakdown.total, breakdown


def train_step(
    model: MiarModel,
    optimizer: torch.optim.Optimizer,
    batch: RawModalityBatch,
    config: TrainConfig,
    dropout_gen: Optional[torch.Generator] = None,
) -> LossBreakdown:
    """One gradient step; returns the detached loss record for logging."""
    optimizer.zero_grad(set_to_none=True)
    total, breakdown = compute_losses(model, batch, config, dropout_gen)
    if not torch.isfinite(total):
        raise TrainingDivergedError("non-finite total loss")
    total.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return breakdown.detached()


def _predict(model: MiarModel, batch: RawModalityBatch, chunk: int) -> torch.Tensor:
    """Deterministic eval-mode predictions, chunked to bound memory."""
    preds = []
    with torch.no_grad():
        for start in range(0, batch.n_samples, chunk):
            idx = torch.arange(start, min(start + chunk, batch.n_samples))
            preds.append(model(batch.subset(idx)).prediction)
    return torch.cat(preds)


def evaluate_batch(
    model: MiarModel, batch: RawModalityBatch, config: TrainConfig
) -> MetricsReport:
    preds = _predict(model, batch, max(config.batch_size, 64))
    return compute_metrics(preds, batch.labels, acc2_mode=config.acc2_mode)


def train_model(
    config: TrainConfig,
    train_split: DatasetSplit,
    valid_split: DatasetSplit,
) -> tuple[Checkpoint, TrainHistory]:
    """Minibatch training of the full objective with adaptive-moment updates.

    The checkpoint holds the parameters of the epoch with the lowest
    validation MSE (the initial parameters when epochs == 0).
    """
    train_batch, valid_batch = train_split.batch, valid_split.batch
    train_batch.validate()
    valid_batch.validate()
    if train_batch.n_samples == 0:
        raise ValueError("training split is empty")

    dims = train_batch.stream_dims
    model = build_model(config.model_config(dims), config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    shuffle_gen = torch.Generator().manual_seed(config.seed + SHUFFLE_SEED_OFFSET)
    dropout_gen = torch.Generator().manual_seed(config.seed + DROPOUT_SEED_OFFSET)

    history = TrainHistory()
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_mse = math.inf
    best_epoch = -1
    completed = 0

    for epoch in range(config.epochs):
        order = torch.randperm(train_batch.n_samples, generator=shuffle_gen)
        epoch_steps = []
        for i, start in enumerate(range(0, train_batch.n_samples, config.batch_size)):
            minibatch = train_batch.subset(order[start : start + config.batch_size])
            try:
                record = train_step(model, optimizer, minibatch, config, dropout_gen)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(
                    f"{err} (epoch {epoch}, batch {i})"
                ) from None
            epoch_steps.append(record)
        history.steps.extend(epoch_steps)

        report = evaluate_batch(model, valid_batch, config)
        history.epochs.append(
            EpochRecord(epoch=epoch, train=_mean_breakdown(epoch_steps), valid=report)
        )
        completed = epoch + 1
        logger.info(
            "epoch %d/%d  train_total=%.4f  valid_mse=%.4f  acc2=%.3f",
            epoch + 1, config.epochs, history.epochs[-1].train.total, report.mse, report.acc2,
        )

        if report.mse < best_mse:
            best_mse = report.mse
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif (
            config.early_stop_patience is not None
            and epoch - best_epoch >= config.early_stop_patience
        ):
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    history.best_epoch = best_epoch
    checkpoint = Checkpoint(
        params=best_state,
        config=config,
        dims=dims,
        epoch=completed,
        best_epoch=best_epoch,
        history=history,
    )
    return checkpoint, history


def evaluate_model(checkpoint: Checkpoint, split: DatasetSplit) -> MetricsReport:
    """Eval-mode metrics of a checkpoint's parameters on one split."""
    split.batch.validate()
    model = checkpoint.restore_model()
    return evaluate_batch(model, split.batch, checkpoint.config)


# --------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write params as one raw float32 blob plus a JSON index with digest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    index = []
    chunks = []
    offset = 0
    for name, tensor in checkpoint.params.items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        chunks.append(array.tobytes())
        index.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size
    blob = b"".join(chunks)
    (root / PARAMS_FILE).write_bytes(blob)

    meta = {
        "format": CHECKPOINT_FORMAT,
        "digest": "sha256:" + hashlib.sha256(blob).hexdigest(),
        "epoch": checkpoint.epoch,
        "best_epoch": checkpoint.best_epoch,
        "dims": list(checkpoint.dims),
        "config": checkpoint.config.to_dict(),
        "params": index,
        "history": checkpoint.history.to_dict(),
    }
    (root / CHECKPOINT_JSON).write_text(json.dumps(meta, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    root = Path(path)
    meta_path = root / CHECKPOINT_JSON
    blob_path = root / PARAMS_FILE
    if not meta_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"no checkpoint at {root}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")

    blob = blob_path.read_bytes()
    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != meta["digest"]:
        raise CheckpointError(
            f"digest mismatch: manifest {meta['digest']} vs computed {digest}"
        )

    flat = np.frombuffer(blob, dtype="<f4")
    params: dict[str, torch.Tensor] = {}
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        view = flat[entry["offset"] : entry["offset"] + size].reshape(shape)
        params[entry["name"]] = torch.from_numpy(view.copy())

    return Checkpoint(
        params=params,
        config=TrainConfig.from_dict(meta["config"]),
        dims=tuple(meta["dims"]),
        epoch=meta["epoch"],
        best_epoch=meta["best_epoch"],
        history=TrainHistory.from_dict(meta["history"]),
    )


# --------------------------------------------------------------------------
# gradient verification


def finite_difference_max_rel_err(
    params: Sequence[torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    grads: Sequence[torch.Tensor],
    sample_fraction: float,
    eps: float,
    rng: np.random.Generator,
) -> tuple[float, str]:
    """Compare analytic gradients against central differences on a sampled
    subset of coordinates.

    rel err per coordinate: |g_a - g_f| / max(1, |g_a| + |g_f|).
    Returns (max rel err, description of the worst coordinate).
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if not 0 < sample_fraction <= 1:
        raise ValueError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n_sample = max(1, math.ceil(sample_fraction * total))
    chosen = rng.choice(total, size=n_sample, replace=False)

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    worst_desc = ""
    with torch.no_grad():
        for flat_idx in sorted(int(c) for c in chosen):
            param_i = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
            local = flat_idx - bounds[param_i]
            p_flat = params[param_i].view(-1)
            g_a = float(grads[param_i].view(-1)[local])

            original = float(p_flat[local])
            p_flat[local] = original + eps
            loss_plus = float(loss_fn())
            p_flat[local] = original - eps
            loss_minus = float(loss_fn())
            p_flat[local] = original

            g_f = (loss_plus - loss_minus) / (2 * eps)
            rel = abs(g_a - g_f) / max(1.0, abs(g_a) + abs(g_f))
            if rel > worst:
                worst = rel
                worst_desc = f"param {param_i} coord {local}"
    return worst, worst_desc


def grad_check(
    config: TrainConfig,
    sample_fraction: float = 0.05,
    eps: float = 1e-5,
    norm_p: int = 2,
) -> float:
    """Verify the full-objective gradients of a toy-size double-precision
    model against central finite differences.

    The toy model keeps the config's layer count and loss weights but runs
    tiny widths (N=4, L=8) so a few thousand re-evaluations stay cheap.
    The norm term defaults to p=2 here: the p=1 loss is piecewise linear and
    finite differences straddling a kink would report spurious error.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")

    toy_cfg = ModelConfig(
        cmt_layers=config.cmt_layers,
        kernel_size=config.kernel_size,
        normalize_alignment=config.normalize_alignment,
        positional_encoding=config.positional_encoding,
        use_homogeneous=config.use_homogeneous,
        **GRAD_CHECK_TOY,
    )
    loss_cfg = config.replace(norm_p=norm_p, dropout=0.0)

    model = build_model(toy_cfg, config.seed, dtype=torch.float64)
    spec = SyntheticSpec(
        n_samples=GRAD_CHECK_N,
        seq_len=GRAD_CHECK_LEN,
        d_t1=toy_cfg.d_t1,
        d_t2=toy_cfg.d_t2,
        d_a=toy_cfg.d_a,
        d_v=toy_cfg.d_v,
        noise_std=0.5,
        seed=config.seed,
    )
    batch = generate_synthetic(spec).batch.to(torch.float64)

    def loss_fn() -> torch.Tensor:
        total, _ = compute_losses(model, batch, loss_cfg, dropout_gen=None)
        return total

    model.zero_grad(set_to_none=True)
    loss_fn().backward()

    names, params, grads = [], [], []
    for name, p in model.named_parameters():
        if p.grad is None:
            raise MiarError(f"parameter {name} received no gradient")
        if not torch.isfinite(p.grad).all():
            raise MiarError(f"non-finite gradient in parameter block {name}")
        names.append(name)
        params.append(p.data)
        grads.append(p.grad)

    rng = np.random.default_rng(config.seed)
    worst, worst_desc = finite_difference_max_rel_err(
        params, lambda: loss_fn().detach(), grads, sample_fraction, eps, rng
    )
    logger.info("grad check: max rel err %.3e (%s)", worst, worst_desc)
    return worst


# --------------------------------------------------------------------------
# ablation and sweep harnesses


def run_ablation(
    config: TrainConfig,
    train_split: DatasetSplit,
    valid_split: DatasetSplit,
) -> list[dict]:
    """Train the four alignment variants (contrastive on/off x norm on/off)
    from the same seed and report validation metrics per cell."""
    rows = []
    for contrastive in (False, True):
        for norm in (False, True):
            variant = config.replace(
                contrastive_alignment=contrastive, norm_alignment=norm
            )
            logger.info("ablation cell: contrastive=%s norm=%s", contrastive, norm)
            checkpoint, _ = train_model(variant, train_split, valid_split)
            report = evaluate_model(checkpoint, valid_split)
            rows.append(
                {
                    "contrastive_alignment": contrastive,
                    "norm_alignment": norm,
                    "acc2": report.acc2,
                    "f1": report.f1,
                    "acc7": report.acc7,
                    "mse": report.mse,
                }
            )
    return rows


def sweep_omega(
    config: TrainConfig,
    train_split: DatasetSplit,
    valid_split: DatasetSplit,
    values: Sequence[float] = DEFAULT_OMEGA_GRID,
) -> list[dict]:
    """One training run per alignment-loss weight, same seed throughout."""
    if len(values) == 0:
        raise ValueError("sweep needs at least one omega value")
    if any(v < 0 for v in values):
        raise ValueError("omega values must be >= 0")
    rows = []
    for omega in values:
        logger.info("sweep cell: omega=%g", omega)
        checkpoint, _ = train_model(config.replace(omega=float(omega)), train_split, valid_split)
        report = evaluate_model(checkpoint, valid_split)
        rows.append(
            {
                "omega": float(omega),
                "acc2": report.acc2,
                "f1": report.f1,
                "acc7": report.acc7,
                "mse": report.mse,
            }
        )
    return rows


def write_table(rows: list[dict], base: str | Path) -> tuple[Path, Path]:
    """Write a row table as JSON and CSV side by side; returns both paths."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    json_path.write_text(json.dumps(rows, indent=2) + "\n")
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return json_path, csv_path
