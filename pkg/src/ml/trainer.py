import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from src import masks
from src.errors import ConfigError, DatasetIOError, ParseError
from src.evaluation import evaluate_suite
from src.ml.autograd import Tensor, backward, grads_for, sigmoid_values
from src.ml.corpus import SHAPE_CATEGORIES, CorpusConfig, make_corpus
from src.ml.heads import HeadConfig, OcclusionModel, Variant
from src.ml.losses import LOSS_TERMS, LossBreakdown, RoiSample, total_loss
from src.ml.optim import SGD, StepSchedule
from src.models import Dataset, Detection, EvalConfig, EvalResult, ImageRecord, InstanceAnnotation

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "amodal-toolkit-checkpoint"
CHECKPOINT_VERSION = 1


class ToyTrainConfig(BaseModel):
    """
    Settings of one toy training run. Solver defaults follow the full-size
    recipe (weight decay 1e-4, momentum 0.9, gamma 0.1, 1/3 warm-up) with the
    step boundaries shrunk to 60% and 80% of `steps`.
    """
    variant: Variant = Variant.FULL
    seed: int = 0
    steps: int = Field(500, ge=0)
    corpus_size: int = Field(200, ge=1)
    heldout_size: int = Field(50, ge=0)
    batch_size: int = Field(1, ge=1)
    base_lr: float = Field(0.01, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    schedule_steps: Optional[Tuple[int, ...]] = Field(None, description="Explicit lr step boundaries; scaled default when None.")
    gamma: float = Field(0.1, gt=0.0)
    warmup_factor: float = Field(1.0 / 3.0, gt=0.0, le=1.0)
    warmup_iters: Optional[int] = Field(None, ge=0)
    head: HeadConfig = Field(default_factory=HeadConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)

    def schedule(self) -> StepSchedule:
        """
        Raises:
            ConfigError: If the schedule is invalid.
        """
        default = StepSchedule.scaled(self.steps, self.base_lr, self.gamma, self.warmup_factor)
        try:
            return StepSchedule(
                base_lr=self.base_lr,
                steps=self.schedule_steps if self.schedule_steps is not None else default.steps,
                gamma=self.gamma,
                warmup_iters=self.warmup_iters if self.warmup_iters is not None else default.warmup_iters,
                warmup_factor=self.warmup_factor,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid learning-rate schedule: {e}") from e


def load_train_config(values: Dict) -> ToyTrainConfig:
    try:
        return ToyTrainConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid training config: {e}") from e


class StepRecord(BaseModel):
    step: int
    lr: float
    l_cls: float
    l_box: float
    l_am: float
    l_vm: float
    l_ivm: float
    total: float


class TrainResult:
    def __init__(self, model: OcclusionModel, log: List[StepRecord], initial_state: Dict[str, np.ndarray]):
        self.model = model
        self.log = log
        self.initial_state = initial_state


def _head_config(cfg: ToyTrainConfig) -> HeadConfig:
    return cfg.head.model_copy(update={"roi_size": cfg.corpus.roi_size, "num_classes": len(SHAPE_CATEGORIES)})


def compute_loss(model: OcclusionModel, sample: RoiSample, variant: Variant) -> LossBreakdown:
    outputs = model.forward(Tensor(sample.features), variant)
    return total_loss(sample, outputs, variant, class_agnostic=model.cfg.class_agnostic,
                      occlusion_space=model.cfg.occlusion_space)


def train_toy(cfg: ToyTrainConfig, corpus: Optional[Sequence[RoiSample]] = None) -> TrainResult:
    """
    Trains the head stack on RoI samples, one fixed-order batch per step.

    Args:
        cfg (ToyTrainConfig): Variant, seed, step count and solver settings.
        corpus (Sequence[RoiSample], optional): Training samples; generated from
            cfg.seed when omitted.

    Returns:
        TrainResult: Final model, per-step log and the initial parameter values.

    Raises:
        ConfigError: On an invalid learning-rate schedule.
    """
    schedule = cfg.schedule()
    if corpus is None:
        corpus = make_corpus(cfg.corpus_size, cfg.seed, cfg.corpus)
    if not corpus:
        raise ConfigError("Training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    model = OcclusionModel(_head_config(cfg), rng)
    initial_state = model.state_dict()
    params = model.parameters()
    optimizer = SGD(params, weight_decay=cfg.weight_decay, momentum=cfg.momentum)

    log: List[StepRecord] = []
    order: List[int] = []
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(corpus)))
            batch.append(corpus[order.pop(0)])

        summed = {name: np.zeros(t.shape) for name, t in params.items()}
        term_sums = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
        # reduced in fixed sample order
        for sample in batch:
            breakdown = compute_loss(model, sample, cfg.variant)
            grads = grads_for(backward(breakdown.total_tensor), params)
            for name in summed:
                summed[name] += grads[name]
            for name in term_sums:
                term_sums[name] += getattr(breakdown, name)
        n = len(batch)
        lr = schedule.lr_at(step)
        optimizer.step({name: g / n for name, g in summed.items()}, lr)

        record = StepRecord(step=step + 1, lr=lr, **{name: value / n for name, value in term_sums.items()})
        log.append(record)
        if step == 0 or (step + 1) % 50 == 0:
            logger.info("step %d: total %.4f (lr %.5f)", step + 1, record.total, lr)
    return TrainResult(model, log, initial_state)


def write_log(log: Sequence[StepRecord], path: str) -> str:
    """JSON lines, one record per step."""
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in log:
                f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Could not write training log to {path}: {e}") from e
    return path


def save_checkpoint(model: OcclusionModel, path: str, variant: Optional[Variant] = None) -> str:
    """
    Writes a JSON checkpoint: {format, version, head_config, variant, tensors:
    {name: {shape, values}}} with values flattened in C order.
    """
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "head_config": model.cfg.model_dump(mode="json"),
        "variant": variant.value if variant is not None else None,
        "tensors": {
            name: {"shape": list(value.shape), "values": value.reshape(-1).tolist()}
            for name, value in model.state_dict().items()
        },
    }
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
    except OSError as e:
        raise DatasetIOError(f"Could not write checkpoint to {path}: {e}") from e
    return path


def load_checkpoint(path: str) -> Tuple[HeadConfig, Dict[str, np.ndarray]]:
    """
    Raises:
        DatasetIOError: If the file is missing.
        ParseError: If it is not a checkpoint of a supported version.
    """
    if not os.path.exists(path):
        raise DatasetIOError(f"Checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint format {document.get('format')} v{document.get('version')}")
        state = {
            name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in document["tensors"].items()
        }
        return HeadConfig.model_validate(document["head_config"]), state
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"{path}: malformed checkpoint ({e})") from e


def _binary(probs: np.ndarray) -> np.ndarray:
    return probs > 0.5


def predictions_to_eval(model: OcclusionModel, samples: Sequence[RoiSample], variant: Variant) -> Tuple[Dataset, List[Detection]]:
    """
    Turns each RoI into a one-object image and the model output into a scored
    detection whose masks are the sigmoid outputs thresholded at 0.5. The
    amodal-only variant emits no visible or invisible masks.
    """
    images = []
    detections = []
    m = model.cfg.roi_size
    for i, sample in enumerate(samples):
        image_id = i + 1
        amodal = masks.rle_encode(sample.gt_amodal > 0.5)
        visible = masks.rle_encode(sample.gt_visible > 0.5)
        images.append(ImageRecord(id=image_id, width=m, height=m, annotations=[InstanceAnnotation(
            id=image_id,
            image_id=image_id,
            category_id=sample.gt_class + 1,
            amodal=amodal,
            visible=visible,
            invisible=masks.difference(amodal, visible),
        )]))
        if amodal.is_empty():
            continue

        out = model.forward(Tensor(sample.features), variant)
        z = out.cls_logits.value - out.cls_logits.value.max()
        probs = np.exp(z) / np.exp(z).sum()
        k = int(np.argmax(probs))
        channel = 0 if model.cfg.class_agnostic else k
        am = masks.rle_encode(_binary(sigmoid_values(out.am_logits.value[channel])))
        if variant == Variant.AMODAL_ONLY:
            vm = ivm = None
        else:
            vm = masks.rle_encode(_binary(sigmoid_values(out.vm_logits.value[channel])))
            if model.cfg.occlusion_space == "probability":
                ivm = masks.rle_encode(_binary(out.ivm_logits.value[channel]))
            else:
                ivm = masks.rle_encode(_binary(sigmoid_values(out.ivm_logits.value[channel])))
        detections.append(Detection(
            image_id=image_id, category_id=k + 1, score=float(probs[k]), amodal=am, visible=vm, invisible=ivm,
        ))
    ds = Dataset(categories=list(SHAPE_CATEGORIES), images=images, split_name="heldout_rois")
    return ds, detections


def evaluate_model(model: OcclusionModel, samples: Sequence[RoiSample], variant: Variant,
                   threads: int = 1) -> Dict[str, EvalResult]:
    ds, dets = predictions_to_eval(model, samples, variant)
    return evaluate_suite(ds, dets, EvalConfig(threads=threads))


COMPARISON_COLUMNS = ("AP_A", "AP_V", "AP_AV", "AP^0.5_IV")


def compare_variants(cfg: ToyTrainConfig, variants: Sequence[Variant] = (Variant.FULL, Variant.WITHOUT_LIV,
                                                                          Variant.WITHOUT_LV, Variant.INDEPENDENT)) -> pd.DataFrame:
    """
    Trains each variant on the same corpus and seed and evaluates all of them on
    the same held-out RoIs. Returns one row per variant with mAP values (percent)
    and the first/final training loss.
    """
    samples = make_corpus(cfg.corpus_size + cfg.heldout_size, cfg.seed, cfg.corpus)
    train, heldout = samples[:cfg.corpus_size], samples[cfg.corpus_size:]
    rows = []
    for variant in variants:
        result = train_toy(cfg.model_copy(update={"variant": variant}), train)
        scores = evaluate_model(result.model, heldout, variant)
        row = {"variant": variant.value}
        for name in COMPARISON_COLUMNS:
            ap = scores[name].mean_ap
            row[name] = float("nan") if ap is None else 100.0 * ap
        row["first_loss"] = result.log[0].total if result.log else float("nan")
        row["final_loss"] = result.log[-1].total if result.log else float("nan")
        rows.append(row)
        logger.info("Variant %s: %s", variant.value, {k: round(v, 2) for k, v in row.items() if k != "variant"})
    return pd.DataFrame(rows).set_index("variant")
