"""
Evaluation: AUC, the intra/cross-method protocol, Grad-CAM and report output.
Inference scores are the softmax fake-probability of Detector3 on Fc (primary)
and of Detector1 on Fa (comparison).
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from rich.console import Console
from rich.table import Table
from scipy.stats import rankdata

from .corpus import CorpusManifest, PairedBatch, Record, load_image
from .filters import AhfKernel, ahf_apply, input_highpass
from .gradcore import Conv2d, pool_resize
from .losses import FAKE, REAL, l1_loss
from .model import Stage1Model, Stage2Model
from .trainer import Checkpoint, build_stage1, build_stage2
from .utils import DETECTOR_DISPLAY_NAMES, format_auc, unknown_name_message

logger = logging.getLogger(__name__)


DETECTORS = ("fc", "fa")
HELD_OUT_SPLIT = "held_out"
DEFAULT_CAM_LAYER = "encoder2.common.final"
REPORT_COLUMNS = ["detector", "method", "split", "auc"]
SVG_HASH_SALT = "forgesem"


class MetricError(ValueError):
    """Raised when a metric is undefined for its input or a layer is unknown."""
    pass


def auc(scores: Sequence[float], labels: Sequence[int], positive: int = FAKE) -> float:
    """
    Area under the ROC curve via the Mann-Whitney rank statistic.

    The fraction of (positive, negative) pairs in which the positive scores
    higher, with ties counted as one half.

    Args:
        scores: One score per sample; higher means more likely positive
        labels: Binary labels
        positive: Label treated as the positive class (fake by default)

    Raises:
        MetricError: Length mismatch or only one class present

    Example:
        >>> auc([0.8, 0.3, 0.5, 0.1], [0, 0, 1, 1])
        0.75
    """
    values = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(labels)
    if values.shape != classes.shape or values.ndim != 1:
        raise MetricError(f"{values.size} scores but {classes.size} labels")
    is_pos = classes == positive
    n_pos = int(is_pos.sum())
    n_neg = int(values.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined with {n_pos} positive and {n_neg} negative sample(s)")
    ranks = rankdata(values, method="average")
    u_stat = ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass
class AucEntry:
    detector: str
    method: str
    split: str
    auc: float


@dataclass
class EvalReport:
    """AUC per detector, method and split, with the config hashes and seed of the run."""
    entries: List[AucEntry] = field(default_factory=list)
    config_hash: Dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def add(self, detector: str, method: str, split: str, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise MetricError(f"AUC {value} outside [0, 1]")
        self.entries.append(AucEntry(detector, method, split, float(value)))

    def get(self, detector: str, method: Optional[str] = None, split: Optional[str] = None) -> List[AucEntry]:
        return [
            e for e in self.entries
            if e.detector == detector
            and (method is None or e.method == method)
            and (split is None or e.split == split)
        ]

    def held_out(self, detector: str) -> Optional[float]:
        rows = self.get(detector, split=HELD_OUT_SPLIT)
        return rows[0].auc if rows else None

    def to_dict(self) -> Dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "config_hash": dict(self.config_hash),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        return cls(
            entries=[AucEntry(**e) for e in data.get("entries", [])],
            config_hash=dict(data.get("config_hash", {})),
            seed=int(data.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@torch.no_grad()
def score_images(
    stage1: Stage1Model,
    stage2: Stage2Model,
    images: torch.Tensor,
    highpass: AhfKernel,
) -> Dict[str, np.ndarray]:
    """Fake-probabilities from both detectors for an N x 3 x S x S batch."""
    xh = ahf_apply(highpass, images)
    fa = stage1.encoder1(images, xh).forgery
    fc = stage2.encoder2(images, xh).common
    return {
        "fa": torch.softmax(stage1.detector1(fa), dim=1)[:, FAKE].double().numpy(),
        "fc": torch.softmax(stage2.detector3(fc), dim=1)[:, FAKE].double().numpy(),
    }


def score_records(
    stage1: Stage1Model,
    stage2: Stage2Model,
    manifest: CorpusManifest,
    records: Sequence[Record],
    highpass: AhfKernel,
    batch_size: int = 64,
) -> Dict[str, np.ndarray]:
    """Score records in fixed chunks; output order follows the records."""
    chunks: Dict[str, List[np.ndarray]] = {d: [] for d in DETECTORS}
    dtype = torch.get_default_dtype()
    for start in range(0, len(records), batch_size):
        part = records[start:start + batch_size]
        images = torch.stack([
            torch.from_numpy(load_image(manifest.resolve(r), manifest.image_size)).to(dtype) for r in part
        ])
        for detector, values in score_images(stage1, stage2, images, highpass).items():
            chunks[detector].append(values)
    return {d: np.concatenate(v) if v else np.zeros(0) for d, v in chunks.items()}


def _models(stage1: Union[Checkpoint, Stage1Model], stage2: Union[Checkpoint, Stage2Model]):
    first = build_stage1(stage1) if isinstance(stage1, Checkpoint) else stage1
    second = build_stage2(stage2) if isinstance(stage2, Checkpoint) else stage2
    return first.eval(), second.eval()


def _evaluate_group(report: EvalReport, scores: Dict[str, np.ndarray], labels: List[int],
                    method: str, split: str) -> None:
    for detector in DETECTORS:
        report.add(detector, method, split, auc(scores[detector], labels))


def run_protocol(
    stage1: Checkpoint,
    stage2: Checkpoint,
    manifests: Dict[str, CorpusManifest],
    split: str = "test",
    batch_size: int = 64,
) -> EvalReport:
    """
    Intra-method and held-out-method AUC for both detectors.

    Args:
        stage1: Stage-1 checkpoint (Detector1 on Fa)
        stage2: Stage-2 checkpoint (Detector3 on Fc)
        manifests: "train" corpus holding the training methods; optional
            "held_out" corpus (defaults to the train corpus) whose methods
            outside the training set form the held-out group
        split: Split evaluated in both corpora

    Returns:
        One intra entry per training method and one held-out entry, for each detector

    Raises:
        MetricError: A group lacks reals or fakes
    """
    if "train" not in manifests:
        raise MetricError("run_protocol needs a 'train' manifest")
    train_methods = list(stage2.train_config.train_methods or manifests["train"].methods)
    config = stage2.model_config
    highpass = input_highpass(3, config.kernel_size, stage2.train_config.sigma)
    first, second = _models(stage1, stage2)

    report = EvalReport(
        config_hash={
            "stage1": stage1.config.get("config_hash", ""),
            "stage2": stage2.config.get("config_hash", ""),
        },
        seed=stage2.train_config.seed,
    )

    train_manifest = manifests["train"]
    records = train_manifest.select(split=split, methods=train_methods)
    scores = score_records(first, second, train_manifest, records, highpass, batch_size)
    reals = [i for i, r in enumerate(records) if r.y == REAL]
    for method in train_methods:
        group = reals + [i for i, r in enumerate(records) if r.method == method]
        _evaluate_group(
            report, {d: s[group] for d, s in scores.items()},
            [records[i].y for i in group], method, split,
        )

    held_manifest = manifests.get("held_out", train_manifest)
    held_methods = [m for m in held_manifest.methods if m not in train_methods]
    if held_methods:
        records = held_manifest.select(split=split, methods=held_methods)
        scores = score_records(first, second, held_manifest, records, highpass, batch_size)
        _evaluate_group(report, scores, [r.y for r in records], "+".join(held_methods), HELD_OUT_SPLIT)
    else:
        logger.warning("No held-out methods outside the training set; skipping cross-method AUC")

    logger.info(f"Evaluated {len(report.entries)} AUC entries")
    return report


def cam_layers(model: Stage2Model) -> List[str]:
    """Names of the Encoder2 convolution layers Grad-CAM can target."""
    return [
        name for name, module in model.named_modules()
        if name.startswith("encoder2.") and isinstance(module, Conv2d)
    ]


def grad_cam(
    stage2: Union[Checkpoint, Stage2Model],
    image: torch.Tensor,
    target_class: int = FAKE,
    layer: str = DEFAULT_CAM_LAYER,
    highpass: Optional[AhfKernel] = None,
    normalize: bool = True,
) -> torch.Tensor:
    """
    Gradient-weighted class activation map for Detector3.

    Channel weights are the spatial mean of d(logit)/d(activation); the map
    is ReLU(sum_k w_k A_k), bilinearly upsampled to the image size and
    min-max normalized. An all-zero map stays all-zero.

    Args:
        stage2: Stage-2 checkpoint or model
        image: 3 x S x S image in [0, 1]
        target_class: Detector3 class (0 fake, 1 real)
        layer: Module name of a convolution whose output is explained
        highpass: Xh filter; the default input high-pass when None
        normalize: Skip the min-max step when False

    Returns:
        S x S heatmap

    Raises:
        MetricError: Unknown layer or class
    """
    model = build_stage2(stage2) if isinstance(stage2, Checkpoint) else stage2
    modules = dict(model.named_modules())
    layers = cam_layers(model)
    if layer not in layers:
        raise MetricError(unknown_name_message("Grad-CAM layer", layer, layers))
    if not 0 <= target_class < model.detector3.class_count:
        raise MetricError(f"target class {target_class} outside [0, {model.detector3.class_count})")
    if highpass is None:
        highpass = input_highpass(3, model.config.kernel_size, model.config.sigma)

    captured: Dict[str, torch.Tensor] = {}

    def hook(module, inputs, output):
        captured["activation"] = output

    handle = modules[layer].register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = image[None].detach().clone().requires_grad_(True)
            bundle = model.encoder2(x, ahf_apply(highpass, x))
            logits = model.detector3(bundle.common)
            activation = captured["activation"]
            (grads,) = torch.autograd.grad(logits[0, target_class], activation, allow_unused=True)
    finally:
        handle.remove()
    if grads is None:
        # layer does not feed Detector3 (e.g. the unique disentangler)
        grads = torch.zeros_like(activation)

    weights = pool_resize(grads, "global_average_pool")[:, :, None, None]
    cam = torch.relu((weights * activation.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(image.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    cam = torch.clamp(cam, min=0.0)
    if not normalize:
        return cam
    low, high = cam.min(), cam.max()
    if float(high - low) <= 0.0:
        return torch.zeros_like(cam)
    return (cam - low) / (high - low)


def write_heatmap(heatmap: torch.Tensor, path: str) -> Path:
    """Save a [0, 1] heatmap as an 8-bit grayscale PNG."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(heatmap.detach().double().numpy() * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(output_path, format="PNG")
    return output_path


@torch.no_grad()
def reconstruction_error(model: Stage1Model, batch: PairedBatch) -> float:
    """Mean L1 between each image and its Decoder1 self-reconstruction."""
    x = batch.x
    bundle = model.encoder1(x, batch.xh)
    return float(l1_loss(x, model.decoder1(bundle.content, bundle.forgery)))


def _write_csv(report: EvalReport, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for e in report.entries:
            writer.writerow({**asdict(e), "auc": repr(e.auc)})
    return path


def _write_svg(report: EvalReport, detector: str, path: Path) -> Path:
    rows = report.get(detector)
    labels = [f"{e.method}\n({e.split})" for e in rows]
    values = [e.auc for e in rows]

    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) + 1.0), 3.2))
    colors = ["#4c72b0" if e.split != HELD_OUT_SPLIT else "#dd8452" for e in rows]
    ax.bar(range(len(rows)), values, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.axhline(0.5, color="grey", linewidth=0.8, linestyle="--")
    ax.set_ylabel("AUC")
    ax.set_title(DETECTOR_DISPLAY_NAMES.get(detector, detector))
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_report(report: EvalReport, out_dir: str, formats: Iterable[str] = ("csv", "json", "svg")) -> List[Path]:
    """
    Write report.csv, report.json and auc_<detector>.svg as requested.

    Returns:
        Paths written, in the order csv, json, svg

    Raises:
        MetricError: Unknown format
    """
    formats = list(formats)
    unknown = [f for f in formats if f not in ("csv", "json", "svg")]
    if unknown:
        raise MetricError(f"Unknown report format(s) {unknown}")
    output_dir = Path(out_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    written = []
    if "csv" in formats:
        written.append(_write_csv(report, output_dir / "report.csv"))
    if "json" in formats:
        path = output_dir / "report.json"
        path.write_text(report.to_json(), encoding="utf-8")
        written.append(path)
    if "svg" in formats:
        for detector in DETECTORS:
            if report.get(detector):
                written.append(_write_svg(report, detector, output_dir / f"auc_{detector}.svg"))
    logger.info(f"Wrote {len(written)} report file(s) to {output_dir}")
    return written


def load_report(path: str) -> EvalReport:
    """Read report.json (or a directory holding it)."""
    report_path = Path(path)
    if report_path.is_dir():
        report_path = report_path / "report.json"
    return EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))


def print_report(report: EvalReport, console: Optional[Console] = None) -> None:
    """Print the AUC report as a rich table."""
    console = console or Console()
    table = Table(title="AUC report", show_header=True, header_style="bold cyan")
    table.add_column("Detector", style="bold")
    table.add_column("Method")
    table.add_column("Split")
    table.add_column("AUC", justify="right")
    for e in report.entries:
        style = "yellow" if e.split == HELD_OUT_SPLIT else None
        table.add_row(DETECTOR_DISPLAY_NAMES.get(e.detector, e.detector), e.method, e.split,
                      format_auc(e.auc), style=style)
    console.print(table)
    console.print(f"[dim]seed {report.seed}  config {report.config_hash.get('stage2', '')[:12]}[/dim]")
