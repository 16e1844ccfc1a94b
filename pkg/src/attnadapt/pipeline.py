"""Training orchestration: source pretraining, source-free adaptation to an
unlabeled target set, and evaluation.

Adaptation never sees source data or target labels.  Each epoch starts
with a full-set embedding pass that refreshes centroids and pseudo-labels;
each batch forwards a global and a local view, mixes the four loss terms,
steps momentum-SGD, and refreshes the memory bank rows it touched.  The
classifier head stays byte-frozen throughout.
"""

import copy
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import AttentionFusionBackbone, BlockSpec
from .centroids import CentroidTable, pseudo_label_epoch
from .checkpoint import load_checkpoint, save_checkpoint
from .contrast import MemoryBank, gac_loss, make_views
from .data import Dataset, normalize
from .errors import ConfigurationError
from .losses import LossWeights, im_loss, source_ce, ssd_loss, total_loss

STATE_FORMAT_VERSION = "attnadapt-state-1"

PRETRAIN_COLUMNS = ("step", "epoch", "ce")
ADAPT_COLUMNS = ("step", "epoch", "im", "ce", "kd", "gac", "total")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and objective settings shared by both phases."""

    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 0.07
    smoothing: float = 0.1
    crop_fraction: float = 0.5
    kd_include_final: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.smoothing <= 1:
            raise ConfigurationError(f"smoothing must be in [0, 1], got {self.smoothing}")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigurationError(
                f"crop_fraction must be in (0, 1], got {self.crop_fraction}")


@dataclass
class TrainingState:
    """Everything needed to continue a run bit-identically."""

    kind: str                                   # "pretrain" or "adapt"
    epoch: int                                  # epochs completed
    step: int                                   # optimizer steps taken
    block_spec: BlockSpec
    model_state: dict
    opt_momentum: dict                          # param name -> momentum buffer
    shuffle_rng: torch.Tensor                   # torch.Generator state, uint8
    bank: dict | None = None
    table: CentroidTable | None = None


@dataclass
class RunResult:
    model: AttentionFusionBackbone
    state: TrainingState
    rows: list


@dataclass
class EvalMetrics:
    """Transductive accuracy summary.  per_class holds one entry per class
    with support; per_class_mean averages those entries."""

    accuracy: float
    per_class: list
    per_class_mean: float
    confusion: torch.Tensor     # (K, K) long, rows = true, cols = predicted
    count: int


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _forward_full(model: AttentionFusionBackbone, images: torch.Tensor,
                  batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Embed a whole tensor of [0,1] images in eval mode, in id order."""
    was_training = model.training
    model.eval()
    zs, logits = [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            trace = model(normalize(images[start:start + batch_size]))
            zs.append(trace.z)
            logits.append(trace.logits)
    if was_training:
        model.train()
    return torch.cat(zs), torch.cat(logits)


def _trainable_named(model) -> list:
    return [(name, p) for name, p in model.named_parameters() if p.requires_grad]


def _capture_momentum(opt, named_params) -> dict:
    out = {}
    for name, p in named_params:
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().clone()
    return out


def _restore_momentum(opt, named_params, saved: dict) -> None:
    for name, p in named_params:
        if name in saved:
            opt.state[p] = {"momentum_buffer": saved[name].clone()}


def _capture_state(kind, epoch, step, model, opt, named_params, gen,
                   bank, table) -> TrainingState:
    return TrainingState(
        kind=kind, epoch=epoch, step=step, block_spec=model.spec,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        opt_momentum=_capture_momentum(opt, named_params),
        shuffle_rng=gen.get_state().clone(),
        bank=bank.state() if bank is not None else None,
        table=table,
    )


def _format_cell(v):
    return repr(v) if isinstance(v, float) else v


def write_metrics(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _write_run(out_dir, model, state, columns, rows) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model)
    save_state(os.path.join(out_dir, "state.npz"), state)
    write_metrics(os.path.join(out_dir, "metrics.csv"), columns, rows)


def pretrain_source(source: Dataset, config: TrainConfig,
                    block_spec: BlockSpec | None = None, out_dir=None,
                    stop_epoch: int | None = None,
                    resume: TrainingState | None = None) -> RunResult:
    """Supervised pretraining on the labeled source domain."""
    if source.labels is None:
        raise ConfigurationError("source pretraining needs a labeled dataset")
    k = source.num_classes
    if block_spec is None:
        block_spec = BlockSpec(num_classes=k) if resume is None else resume.block_spec
    if block_spec.num_classes != k:
        raise ConfigurationError(
            f"dataset has {k} classes but the architecture expects "
            f"{block_spec.num_classes}")
    n = len(source)
    gen = torch.Generator()
    if resume is None:
        torch.manual_seed(config.seed)
        model = AttentionFusionBackbone(block_spec)
        gen.manual_seed(config.seed)
        start_epoch, step = 0, 0
    else:
        if resume.kind != "pretrain":
            raise ConfigurationError(f"cannot resume a {resume.kind!r} state here")
        model = AttentionFusionBackbone(resume.block_spec)
        model.load_state_dict(resume.model_state)
        gen.set_state(resume.shuffle_rng.clone())
        start_epoch, step = resume.epoch, resume.step

    named = _trainable_named(model)
    opt = torch.optim.SGD([p for _, p in named], lr=config.learning_rate,
                          momentum=config.momentum,
                          weight_decay=config.weight_decay)
    if resume is not None:
        _restore_momentum(opt, named, resume.opt_momentum)

    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    rows = []
    model.train()
    for epoch in range(start_epoch, last_epoch):
        for idx in _batches(n, config.batch_size, gen):
            trace = model(normalize(source.images[idx]))
            loss = source_ce(trace.logits, source.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append([step, epoch, float(loss.detach())])
            step += 1
    state = _capture_state("pretrain", last_epoch, step, model, opt, named,
                           gen, None, None)
    if out_dir is not None:
        _write_run(out_dir, model, state, PRETRAIN_COLUMNS, rows)
    return RunResult(model, state, rows)


def adapt(source, target: Dataset, config: TrainConfig, out_dir=None,
          stop_epoch: int | None = None, resume: TrainingState | None = None,
          on_batch=None) -> RunResult:
    """Source-free adaptation of a pretrained model to the target set.

    `source` is a checkpoint path or a model; the input model object is
    never mutated.  Target labels, if present, are ignored.
    """
    if isinstance(source, AttentionFusionBackbone):
        model = copy.deepcopy(source)
    else:
        model = load_checkpoint(source)
    n = len(target)
    if n < 2:
        raise ConfigurationError("adaptation needs at least 2 target samples")
    if resume is not None:
        if resume.kind != "adapt":
            raise ConfigurationError(f"cannot resume a {resume.kind!r} state here")
        model.load_state_dict(resume.model_state)
    model.head.freeze()

    named = _trainable_named(model)
    opt = torch.optim.SGD([p for _, p in named], lr=config.learning_rate,
                          momentum=config.momentum,
                          weight_decay=config.weight_decay)
    bank = MemoryBank(n, model.spec.latent_dim)
    gen = torch.Generator()
    if resume is None:
        gen.manual_seed(config.seed)
        start_epoch, step, table = 0, 0, None
        z0, _ = _forward_full(model, target.images, config.batch_size)
        bank.update(torch.arange(n), z0)
    else:
        _restore_momentum(opt, named, resume.opt_momentum)
        gen.set_state(resume.shuffle_rng.clone())
        bank.load_state(resume.bank)
        start_epoch, step, table = resume.epoch, resume.step, resume.table

    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    rows = []
    model.train()
    for epoch in range(start_epoch, last_epoch):
        z_all, logits_all = _forward_full(model, target.images, config.batch_size)
        pseudo, table = pseudo_label_epoch(z_all, logits_all, table, config.smoothing)
        for idx in _batches(n, config.batch_size, gen):
            imgs = normalize(target.images[idx])
            g_imgs, l_imgs = make_views(imgs, config.crop_fraction)
            g_trace = model(g_imgs)
            l_trace = model(l_imgs)
            im = im_loss(g_trace.logits)
            ce, kd = ssd_loss(g_trace.logits, g_trace.layer_logits,
                              pseudo.labels[idx], config.kd_include_final)
            gac = gac_loss(l_trace.z, g_trace.z, idx, bank, config.temperature)
            loss = total_loss(im, ce, kd, gac, config.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            bank.update(idx, g_trace.z.detach())
            rows.append([step, epoch, float(im.detach()), float(ce.detach()),
                         float(kd.detach()), float(gac.detach()),
                         float(loss.detach())])
            if on_batch is not None:
                on_batch(step=step, epoch=epoch, model=model, bank=bank)
            step += 1
        model.head.assert_unchanged()
    model.head.assert_unchanged()
    state = _capture_state("adapt", last_epoch, step, model, opt, named, gen,
                           bank, table)
    if out_dir is not None:
        _write_run(out_dir, model, state, ADAPT_COLUMNS, rows)
    return RunResult(model, state, rows)


def evaluate(model: AttentionFusionBackbone, dataset: Dataset,
             batch_size: int = 256) -> EvalMetrics:
    """Accuracy of argmax predictions against the dataset's labels."""
    if dataset.labels is None:
        raise ConfigurationError("evaluation needs a labeled dataset")
    k = model.spec.num_classes
    if len(dataset) and int(dataset.labels.max()) >= k:
        raise ConfigurationError(
            f"label {int(dataset.labels.max())} out of range for {k} classes")
    _, logits = _forward_full(model, dataset.images, batch_size)
    preds = logits.argmax(dim=1)
    confusion = torch.zeros(k, k, dtype=torch.long)
    for t, p in zip(dataset.labels.tolist(), preds.tolist()):
        confusion[t, p] += 1
    support = confusion.sum(dim=1)
    correct = confusion.diagonal()
    per_class = [float(correct[c]) / float(support[c]) if support[c] else 0.0
                 for c in range(k)]
    present = [per_class[c] for c in range(k) if support[c]]
    total = int(support.sum())
    return EvalMetrics(
        accuracy=float(correct.sum()) / total if total else 0.0,
        per_class=per_class,
        per_class_mean=sum(present) / len(present) if present else 0.0,
        confusion=confusion,
        count=total,
    )


def save_state(path, state: TrainingState) -> None:
    arrays = {
        "format_version": np.array(STATE_FORMAT_VERSION),
        "kind": np.array(state.kind),
        "epoch": np.array(state.epoch),
        "step": np.array(state.step),
        "block_spec": np.array(json.dumps(state.block_spec.to_metadata())),
        "rng/shuffle": state.shuffle_rng.numpy(),
    }
    for key, value in state.model_state.items():
        arrays["model/" + key] = value.detach().cpu().numpy()
    for key, value in state.opt_momentum.items():
        arrays["opt/" + key] = value.detach().cpu().numpy()
    if state.bank is not None:
        arrays["bank/embeddings"] = state.bank["embeddings"].numpy()
        arrays["bank/initialized"] = state.bank["initialized"].numpy()
        arrays["bank/write_counts"] = state.bank["write_counts"].numpy()
    if state.table is not None:
        arrays["table/centroids"] = state.table.centroids.numpy()
        arrays["table/valid"] = state.table.valid.numpy()
        arrays["table/smoothing"] = np.array(state.table.smoothing)
        if state.table.previous is not None:
            arrays["table/previous"] = state.table.previous.numpy()
    np.savez(path, **arrays)


def load_state(path) -> TrainingState:
    with np.load(path, allow_pickle=False) as archive:
        if "format_version" not in archive.files:
            raise ConfigurationError(f"{path} is not a training-state archive")
        version = str(archive["format_version"])
        if version != STATE_FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported state version {version!r}, expected "
                f"{STATE_FORMAT_VERSION!r}")
        model_state, opt_momentum, bank_state = {}, {}, {}
        table_parts = {}
        for key in archive.files:
            if key.startswith("model/"):
                model_state[key[len("model/"):]] = torch.from_numpy(archive[key].copy())
            elif key.startswith("opt/"):
                opt_momentum[key[len("opt/"):]] = torch.from_numpy(archive[key].copy())
            elif key.startswith("bank/"):
                bank_state[key[len("bank/"):]] = torch.from_numpy(archive[key].copy())
            elif key.startswith("table/"):
                table_parts[key[len("table/"):]] = archive[key].copy()
        table = None
        if table_parts:
            table = CentroidTable(
                centroids=torch.from_numpy(table_parts["centroids"]),
                valid=torch.from_numpy(table_parts["valid"]),
                smoothing=float(table_parts["smoothing"]),
                previous=(torch.from_numpy(table_parts["previous"])
                          if "previous" in table_parts else None),
            )
        return TrainingState(
            kind=str(archive["kind"]),
            epoch=int(archive["epoch"]),
            step=int(archive["step"]),
            block_spec=BlockSpec.from_metadata(json.loads(str(archive["block_spec"]))),
            model_state=model_state,
            opt_momentum=opt_momentum,
            shuffle_rng=torch.from_numpy(archive["rng/shuffle"].copy()),
            bank=bank_state or None,
            table=table,
        )
