"""
Two-stage training orchestrator.
Stage 1 decouples content from forgery semantics with Detector1 and
self/cross image reconstruction; stage 2 copies the forgery branch into
Encoder2 and splits Fa into common and unique halves. The AHF projection
runs after every optimizer step in both stages.
"""

import csv
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import CorpusManifest, PairedBatch, PairLoader, prefetch
from .filters import ahf_project, input_highpass
from .gradcore import (
    ContractViolation,
    NumericFailure,
    backward,
    check_finite,
    pool_resize,
    seed_everything,
    sgd_step,
)
from .losses import (
    FAKE,
    REAL,
    LossWeights,
    contrastive_batch,
    cross_entropy,
    l1_loss,
    sample_tuples,
    total_stage1,
    total_stage2,
)
from .model import (
    ModelConfig,
    PreconditionError,
    Stage1Model,
    Stage2Model,
    split_forgery,
    trainable_ahf_kernels,
)
from .utils import config_hash, unknown_name_message

logger = logging.getLogger(__name__)

__all__ = [
    "CheckpointError",
    "PreconditionError",
    "TrainConfig",
    "Checkpoint",
    "MetricsLog",
    "save_checkpoint",
    "load_checkpoint",
    "train_stage1",
    "train_stage2",
    "build_stage1",
    "build_stage2",
]


CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".fsck"

_HEADER = struct.Struct("<4sHB")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")

METRIC_COLUMNS = ["step", "epoch", "term", "value"]

# Seed stream for the contrastive tuple sampler
_STREAM_TUPLES = 2


class CheckpointError(Exception):
    """Raised for unreadable, truncated or incompatible checkpoints."""
    pass


@dataclass
class TrainConfig:
    """Hyperparameters for both stages; lr is the SGD step size beta."""
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 10
    sigma: float = 1.0
    seed: int = 0
    freeze_embedded: bool = True
    train_methods: Optional[List[str]] = None
    prefetch_depth: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ContractViolation(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ContractViolation(f"batch size must be even and >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if self.sigma <= 0:
            raise ContractViolation(f"sigma must be positive, got {self.sigma}")
        if self.prefetch_depth < 0:
            raise ContractViolation(f"prefetch depth must be >= 0, got {self.prefetch_depth}")
        self.model.validate()
        self.weights.validate()
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["weights"] = self.weights.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)} - {"model", "weights"}
        values = {k: v for k, v in data.items() if k in known}
        if values.get("train_methods") is not None:
            values["train_methods"] = list(values["train_methods"])
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            weights=LossWeights.from_dict(data.get("weights", {})),
            **values,
        )


@dataclass
class Checkpoint:
    """Named parameter blobs of one stage plus the config echo, rng state and step."""
    stage: int
    params: Dict[str, torch.Tensor]
    config: Dict
    rng_state: Dict
    step: int = 0

    @classmethod
    def from_model(cls, stage: int, model: nn.Module, cfg: TrainConfig, step: int,
                   sampler: Optional[np.random.Generator] = None) -> "Checkpoint":
        train = cfg.to_dict()
        rng = {"torch": torch.get_rng_state().tolist()}
        if sampler is not None:
            rng["numpy"] = sampler.bit_generator.state
        return cls(
            stage=stage,
            params={name: t.detach().to(torch.float32).clone() for name, t in model.state_dict().items()},
            config={"train": train, "config_hash": config_hash(train)},
            rng_state=rng,
            step=step,
        )

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config.get("train", {}))

    @property
    def model_config(self) -> ModelConfig:
        return self.train_config.model

    def restore(self, model: nn.Module) -> None:
        """
        Load the parameter blobs into a model.

        Raises:
            CheckpointError: Parameter names or shapes differ from the model's
        """
        expected = model.state_dict()
        missing = sorted(set(expected) - set(self.params))
        unexpected = sorted(set(self.params) - set(expected))
        if missing or unexpected:
            name = (missing or unexpected)[0]
            kind = "missing" if missing else "unexpected"
            hint = unknown_name_message("parameter", name, unexpected if missing else missing)
            raise CheckpointError(
                f"Checkpoint incompatible with model: {len(missing)} missing, "
                f"{len(unexpected)} unexpected parameter(s); first {kind}: {hint}"
            )
        for name, value in expected.items():
            if tuple(value.shape) != tuple(self.params[name].shape):
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {tuple(self.params[name].shape)}, "
                    f"model {tuple(value.shape)}"
                )
        model.load_state_dict({k: v.to(expected[k].dtype) for k, v in self.params.items()}, strict=True)

    def restore_rng(self) -> Optional[np.random.Generator]:
        """Restore torch's global rng; return the saved tuple sampler if any."""
        if "torch" in self.rng_state:
            torch.set_rng_state(torch.tensor(self.rng_state["torch"], dtype=torch.uint8))
        if "numpy" in self.rng_state:
            sampler = np.random.default_rng()
            sampler.bit_generator.state = self.rng_state["numpy"]
            return sampler
        return None


def save_checkpoint(ckpt: Checkpoint, path: str) -> Path:
    """
    Write a checkpoint as FSCK little-endian records.

    Layout: magic, u16 version, u8 stage, u32-prefixed JSON meta, then a u32
    record count and per record: u16-prefixed name, u8 rank, u32 dims, f32 data.
    The file is written under a temporary name and moved into place.
    """
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(
        {"config": ckpt.config, "rng_state": ckpt.rng_state, "step": ckpt.step},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.stage), _U32.pack(len(meta)), meta,
              _U32.pack(len(ckpt.params))]
    for name in sorted(ckpt.params):
        tensor = ckpt.params[name].detach().to(torch.float32).contiguous()
        encoded = name.encode("utf-8")
        chunks.append(_U16.pack(len(encoded)) + encoded)
        chunks.append(_U8.pack(tensor.dim()) + b"".join(_U32.pack(d) for d in tensor.shape))
        chunks.append(tensor.numpy().astype("<f4").tobytes())

    tmp_path = output_path.with_name(output_path.name + ".tmp")
    tmp_path.write_bytes(b"".join(chunks))
    os.replace(tmp_path, output_path)
    logger.info(f"Saved stage-{ckpt.stage} checkpoint ({len(ckpt.params)} tensors) to {output_path}")
    return output_path


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_checkpoint(path: str, expected_stage: Optional[int] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        OSError: File cannot be read
        CheckpointError: Bad magic, unsupported version, truncation, or wrong stage
    """
    raw = Path(path).read_bytes()
    reader = _Reader(raw, str(path))
    magic, version, stage = reader.unpack(_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if stage not in (1, 2):
        raise CheckpointError(f"{path}: invalid stage {stage}")
    if expected_stage is not None and stage != expected_stage:
        raise CheckpointError(f"{path}: stage-{stage} checkpoint where stage {expected_stage} is required")

    (meta_len,) = reader.unpack(_U32)
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}")

    (count,) = reader.unpack(_U32)
    params = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = torch.from_numpy(data.astype(np.float32))
    if reader.offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - reader.offset} trailing byte(s)")

    return Checkpoint(stage=stage, params=params, config=meta.get("config", {}),
                      rng_state=meta.get("rng_state", {}), step=int(meta.get("step", 0)))


class MetricsLog:
    """Per-step loss terms with CSV export and per-epoch means."""

    def __init__(self):
        self.rows: List[Dict] = []

    def log(self, step: int, epoch: int, terms: Dict[str, float]) -> None:
        for term, value in terms.items():
            value = float(value)
            if not np.isfinite(value):
                raise NumericFailure(f"Non-finite {term} at step {step}")
            self.rows.append({"step": step, "epoch": epoch, "term": term, "value": value})

    def values(self, term: str) -> List[float]:
        return [r["value"] for r in self.rows if r["term"] == term]

    def epoch_means(self, epoch: int) -> Dict[str, float]:
        sums: Dict[str, List[float]] = {}
        for r in self.rows:
            if r["epoch"] == epoch:
                sums.setdefault(r["term"], []).append(r["value"])
        return {term: float(np.mean(vals)) for term, vals in sums.items()}

    def write_csv(self, path: str) -> Path:
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({**r, "value": repr(r["value"])})
        return output_path


EpochCallback = Callable[[int, Dict[str, float]], None]


def resolve_methods(cfg: TrainConfig, manifest: CorpusManifest) -> TrainConfig:
    """
    Fix the training methods and the Detector2 class count.

    Raises:
        ContractViolation: A requested method is not in the manifest
        PreconditionError: The train split lacks reals or fakes
    """
    available = manifest.methods
    methods = list(cfg.train_methods) if cfg.train_methods else list(available)
    for method in methods:
        if method not in available:
            raise ContractViolation(unknown_name_message("training method", method, available))

    train = manifest.select(split="train", methods=methods)
    reals = sum(1 for r in train if r.y == REAL)
    fakes = sum(1 for r in train if r.y == FAKE)
    if not reals or not fakes:
        raise PreconditionError(f"Train split needs both classes: {reals} real, {fakes} fake")
    return replace(cfg, train_methods=methods, model=replace(cfg.model, num_methods=len(methods)))


def _loader(cfg: TrainConfig, manifest: CorpusManifest) -> PairLoader:
    highpass = input_highpass(3, cfg.model.kernel_size, cfg.sigma)
    return PairLoader(manifest, cfg.batch_size, cfg.seed, highpass, split="train", methods=cfg.train_methods)


def _epoch(loader: PairLoader, depth: int):
    return prefetch(loader, depth) if depth else iter(loader)


def _halves(t: torch.Tensor):
    n = t.shape[0] // 2
    return t[:n], t[n:]


def stage1_losses(model: Stage1Model, batch: PairedBatch, w: LossWeights) -> Dict[str, torch.Tensor]:
    """Detector1 CE on both Fa, plus the mean of the four image reconstructions."""
    x = batch.x
    bundle = model.encoder1(x, batch.xh)
    l_cls = cross_entropy(model.detector1(bundle.forgery), batch.y)

    c0, c1 = _halves(bundle.content)
    fa0, fa1 = _halves(bundle.forgery)
    x0, x1 = batch.x_fake, batch.x_real
    # content argument indexes the target image
    recon = model.decoder1(torch.cat([c0, c1, c0, c1]), torch.cat([fa0, fa1, fa1, fa0]))
    sri0, sri1, cri0, cri1 = recon.chunk(4)
    terms = [l1_loss(x0, sri0), l1_loss(x1, sri1), l1_loss(x0, cri0), l1_loss(x1, cri1)]
    l_rec = torch.stack(terms).mean()
    return {"cls": l_cls, "rec": l_rec, "total": total_stage1(l_cls, l_rec, w)}


def stage2_losses(model: Stage2Model, batch: PairedBatch, w: LossWeights,
                  sampler: np.random.Generator) -> Dict[str, torch.Tensor]:
    """Detector2/3 CE, contrastive on pooled Fu/Fc, and Fa reconstruction via Decoder2."""
    bundle = model.encoder2(batch.x, batch.xh)
    unique, common = bundle.unique, bundle.common
    l_cls1 = cross_entropy(model.detector2(unique), batch.s)
    l_cls2 = cross_entropy(model.detector3(common), batch.y)

    pooled = {
        "u": pool_resize(unique, "global_average_pool"),
        "c": pool_resize(common, "global_average_pool"),
    }
    tuples = sample_tuples(pooled, batch.y, batch.s, sampler)
    l_con = contrastive_batch(tuples, w.margin).to(l_cls1.dtype)

    target = bundle.forgery.detach()
    fa0, fa1 = _halves(target)
    fc0, fc1 = _halves(common)
    fu0, fu1 = _halves(unique)
    # Fc argument indexes the target semantics
    recon = model.decoder2(torch.cat([fc0, fc1, fc0, fc1]), torch.cat([fu0, fu1, fu1, fu0]))
    srf0, srf1, crf0, crf1 = recon.chunk(4)
    terms = [l1_loss(fa0, srf0), l1_loss(fa1, srf1), l1_loss(fa0, crf0), l1_loss(fa1, crf1)]
    l_rec = torch.stack(terms).mean()

    return {
        "cls1": l_cls1,
        "cls2": l_cls2,
        "con": l_con,
        "rec": l_rec,
        "total": total_stage2(l_cls1, l_cls2, l_con, l_rec, w),
    }


def _optimize(model: nn.Module, total: torch.Tensor, lr: float) -> None:
    backward(total)
    sgd_step(model.parameters(), lr)
    for kernel in trainable_ahf_kernels(model):
        ahf_project(kernel)


def _run_epochs(
    stage: int,
    model: nn.Module,
    cfg: TrainConfig,
    loader: PairLoader,
    step_fn: Callable[[PairedBatch], Dict[str, torch.Tensor]],
    metrics: MetricsLog,
    out_dir: Optional[Path],
    sampler: Optional[np.random.Generator],
    on_epoch: Optional[EpochCallback],
) -> int:
    step = 0
    for epoch in range(cfg.epochs):
        for batch in _epoch(loader, cfg.prefetch_depth):
            losses = step_fn(batch)
            try:
                for term, value in losses.items():
                    check_finite(value.detach(), f"stage-{stage} {term} loss")
                _optimize(model, losses["total"], cfg.lr)
            except NumericFailure:
                if out_dir is not None:
                    last_good = Checkpoint.from_model(stage, model, cfg, step, sampler)
                    save_checkpoint(last_good, out_dir / f"stage{stage}_last_good{CHECKPOINT_SUFFIX}")
                logger.error(f"Non-finite loss at stage {stage}, step {step}; aborting")
                raise
            metrics.log(step, epoch, {term: value.item() for term, value in losses.items()})
            logger.debug(f"stage {stage} step {step}: total={losses['total'].item():.6f}")
            step += 1

        means = metrics.epoch_means(epoch)
        logger.info(f"Stage {stage} epoch {epoch + 1}/{cfg.epochs}: " +
                    ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if on_epoch is not None:
            on_epoch(epoch, means)
    return step


def _finish(stage: int, model: nn.Module, cfg: TrainConfig, step: int, metrics: MetricsLog,
            out_dir: Optional[Path], sampler: Optional[np.random.Generator]) -> Checkpoint:
    ckpt = Checkpoint.from_model(stage, model, cfg, step, sampler)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / f"stage{stage}{CHECKPOINT_SUFFIX}")
        metrics.write_csv(out_dir / f"stage{stage}_metrics.csv")
    return ckpt


def train_stage1(
    cfg: TrainConfig,
    manifest: CorpusManifest,
    out_dir: Optional[str] = None,
    metrics: Optional[MetricsLog] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> Checkpoint:
    """
    Train Encoder1, Decoder1 and Detector1.

    Args:
        cfg: Training configuration
        manifest: Corpus with a train split holding both classes
        out_dir: Where stage1.fsck and stage1_metrics.csv go (nothing written if None)
        metrics: Log to append per-step terms to
        on_epoch: Called with (epoch, per-term means) after every epoch

    Raises:
        PreconditionError: Train split lacks a class
        NumericFailure: A loss turned non-finite; stage1_last_good.fsck is written first
    """
    cfg = resolve_methods(cfg.validate(), manifest)
    metrics = metrics if metrics is not None else MetricsLog()
    output = Path(out_dir) if out_dir is not None else None

    seed_everything(cfg.seed)
    model = Stage1Model(cfg.model)
    for kernel in trainable_ahf_kernels(model):
        ahf_project(kernel)
    loader = _loader(cfg, manifest)
    logger.info(f"Stage 1: {len(loader)} steps/epoch over methods {cfg.train_methods}")

    step = _run_epochs(1, model, cfg, loader, lambda b: stage1_losses(model, b, cfg.weights),
                       metrics, output, None, on_epoch)
    return _finish(1, model, cfg, step, metrics, output, None)


def build_stage1(ckpt: Checkpoint) -> Stage1Model:
    """Rebuild a stage-1 model from its checkpoint."""
    if ckpt.stage != 1:
        raise CheckpointError(f"Expected a stage-1 checkpoint, got stage {ckpt.stage}")
    model = Stage1Model(ckpt.model_config)
    ckpt.restore(model)
    return model


def build_stage2(ckpt: Checkpoint) -> Stage2Model:
    """Rebuild a stage-2 model (embedded branch marked loaded) from its checkpoint."""
    if ckpt.stage != 2:
        raise CheckpointError(f"Expected a stage-2 checkpoint, got stage {ckpt.stage}")
    train = ckpt.train_config
    model = Stage2Model(train.model, freeze_branch=train.freeze_embedded)
    ckpt.restore(model)
    model.encoder2.mark_loaded()
    return model


def train_stage2(
    cfg: TrainConfig,
    manifest: CorpusManifest,
    stage1: Optional[Checkpoint],
    out_dir: Optional[str] = None,
    metrics: Optional[MetricsLog] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> Checkpoint:
    """
    Train Encoder2's disentanglers, Decoder2, Detector2 and Detector3.

    The embedded forgery branch starts from the stage-1 weights and keeps the
    stage-1 architecture and Xh sigma; it stays frozen unless
    cfg.freeze_embedded is False.

    Raises:
        PreconditionError: No stage-1 checkpoint, or train split lacks a class
        CheckpointError: The checkpoint is not from stage 1
        NumericFailure: A loss turned non-finite; stage2_last_good.fsck is written first
    """
    if stage1 is None:
        raise PreconditionError("Stage 2 needs a stage-1 checkpoint")
    if stage1.stage != 1:
        raise CheckpointError(f"Stage 2 needs a stage-1 checkpoint, got stage {stage1.stage}")

    # architecture and Xh filter both follow stage 1
    first_cfg = stage1.train_config
    cfg = resolve_methods(replace(cfg, model=first_cfg.model, sigma=first_cfg.sigma).validate(), manifest)
    metrics = metrics if metrics is not None else MetricsLog()
    output = Path(out_dir) if out_dir is not None else None

    seed_everything(cfg.seed)
    first = build_stage1(stage1)
    model = Stage2Model(cfg.model, freeze_branch=cfg.freeze_embedded)
    model.load_stage1(first)
    loader = _loader(cfg, manifest)
    sampler = np.random.default_rng([cfg.seed, _STREAM_TUPLES])
    logger.info(f"Stage 2: {len(loader)} steps/epoch, embedded branch "
                f"{'frozen' if cfg.freeze_embedded else 'trainable'}")

    step = _run_epochs(2, model, cfg, loader, lambda b: stage2_losses(model, b, cfg.weights, sampler),
                       metrics, output, sampler, on_epoch)
    return _finish(2, model, cfg, step, metrics, output, sampler)
