"""
Training and evaluation of the fusion pipelines.

Minibatch SGD with momentum and polynomial learning-rate decay, per-stage L1
losses against the color-map targets and the ground truth, JSON-lines
logging, periodic checkpoints and PSNR/SSIM evaluation.
"""
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, field_validator
from skimage.metrics import structural_similarity

from dataset_builder import Dataset, TrainingSample
from fusion_net import FusionPipeline, PipelineMode, PipelineSpec, save_params
from image_core import ContractViolation, Image, NonFiniteError
from settings import say, settings
from tensor_engine import Tensor, l1_loss

LOG_FILE = "train_log.jsonl"
BEST_CHECKPOINT = "best.lefn"
FINAL_CHECKPOINT = "final.lefn"
DIAGNOSTIC_CHECKPOINT = "diverged.lefn"


class NonFiniteGradientError(ValueError):
    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient for {tensor_name}")
        self.tensor_name = tensor_name


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Optional[Path], reason: str):
        where = f", diagnostic checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"training diverged at iteration {iteration}: {reason}{where}")
        self.iteration = iteration
        self.checkpoint = checkpoint


class TrainConfig(BaseModel):
    lr0: PositiveFloat = 1e-2
    decay_power: PositiveFloat = 0.9
    momentum: float = Field(0.9, ge=0, lt=1)
    max_iters: PositiveInt = 2000
    batch_size: PositiveInt = 4
    # weights of the color-mapping, merging and final losses
    loss_weights: Tuple[float, float, float] = (0.5, 0.5, 1.0)
    seed: int = 0
    checkpoint_every: PositiveInt = 500
    grad_clip: Optional[PositiveFloat] = 10.0
    schedule: Literal["joint", "staged"] = "joint"
    log_every: PositiveInt = 10

    @field_validator("loss_weights")
    @classmethod
    def _non_negative(cls, weights):
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be >= 0")
        return weights


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - t/T)^power"""
    if not 0 <= t <= cfg.max_iters:
        raise ContractViolation(f"iteration {t} outside [0, {cfg.max_iters}]")
    return cfg.lr0 * (1.0 - t / cfg.max_iters) ** cfg.decay_power


def sgd_momentum_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """v' = momentum * v - lr * g, p' = p + v'; names without a gradient stay put"""
    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ContractViolation(
                f"{name}: gradient shape {g.shape} != {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    new_params = dict(params)
    new_velocity = dict(velocity)
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v_next = (momentum * v - lr * g).astype(p.dtype)
        new_velocity[name] = v_next
        new_params[name] = p + v_next
    return new_params, new_velocity


def clip_gradients(
    grads: Dict[str, np.ndarray], max_norm: Optional[float]
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale to a global L2 norm of at most max_norm; returns (grads, norm before)"""
    squares = (float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    norm = math.sqrt(sum(squares))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, norm


# Metrics

def psnr(prediction: Union[Image, np.ndarray], target: Union[Image, np.ndarray],
         cap: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio for unit peak; identical inputs give the cap"""
    cap = settings.psnr_cap if cap is None else cap
    a = prediction.data if isinstance(prediction, Image) else np.asarray(prediction)
    b = target.data if isinstance(target, Image) else np.asarray(target)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim(prediction: Image, target: Image) -> float:
    if prediction.data.shape != target.data.shape:
        raise ContractViolation("ssim shape mismatch")
    win = min(7, prediction.height, prediction.width)
    if win % 2 == 0:
        win -= 1
    if win < 3:
        raise ContractViolation("ssim needs images of at least 3x3")
    a = prediction.data.astype(np.float64)
    b = target.data.astype(np.float64)
    if prediction.channels == 1:
        score = structural_similarity(
            a[:, :, 0], b[:, :, 0], data_range=1.0, win_size=win
        )
    else:
        score = structural_similarity(
            a, b, data_range=1.0, win_size=win, channel_axis=-1
        )
    return float(score)


class SampleMetrics(BaseModel):
    scene: str
    flip: Optional[str] = None
    psnr: float
    ssim: float
    psnr_merged: float
    psnr_ghost: float
    psnr_gt_pair: Optional[float] = None
    seconds: Optional[float] = None
    stage_seconds: Dict[str, float] = Field(default_factory=dict)


class MetricsReport(BaseModel):
    mode: str
    samples: List[SampleMetrics]
    mean_psnr: float
    mean_ssim: float
    mean_psnr_merged: float
    mean_psnr_ghost: float
    mean_psnr_gt_pair: Optional[float] = None
    mean_seconds: Optional[float] = None


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def evaluate(pipeline: FusionPipeline, samples: Sequence[TrainingSample],
             timing: bool = True) -> MetricsReport:
    """Per-sample and mean metrics of final and merged outputs against ground truth.

    Outputs are clamped to [0, 1] before scoring. `timing=False` leaves the
    wall-clock fields out so reports are reproducible byte for byte.
    """
    if not samples:
        raise ContractViolation("evaluation needs at least one sample")
    rows = []
    for sample in samples:
        inputs = {
            k: v
            for k, v in sample.pipeline_inputs().items()
            if k in pipeline.input_names
        }
        started = time.perf_counter()
        output = pipeline.infer(inputs)
        elapsed = time.perf_counter() - started
        final = output.final.clamped()
        gt = sample.ground_truth
        rows.append(
            SampleMetrics(
                scene=sample.scene_id,
                flip=sample.flip,
                psnr=psnr(final, gt),
                ssim=ssim(final, gt),
                psnr_merged=psnr(output.merged_estimate.clamped(), gt),
                psnr_ghost=psnr(sample.ghost_fused, gt),
                psnr_gt_pair=(
                    psnr(sample.ground_truth_pair, gt)
                    if sample.ground_truth_pair is not None
                    else None
                ),
                seconds=elapsed if timing else None,
                stage_seconds=output.timings if timing else {},
            )
        )
    pair_values = [r.psnr_gt_pair for r in rows if r.psnr_gt_pair is not None]
    return MetricsReport(
        mode=pipeline.spec.mode.value,
        samples=rows,
        mean_psnr=_mean([r.psnr for r in rows]),
        mean_ssim=_mean([r.ssim for r in rows]),
        mean_psnr_merged=_mean([r.psnr_merged for r in rows]),
        mean_psnr_ghost=_mean([r.psnr_ghost for r in rows]),
        mean_psnr_gt_pair=_mean(pair_values) if pair_values else None,
        mean_seconds=_mean([r.seconds for r in rows]) if timing else None,
    )


# Training loop

def _to_chw(img: Image) -> np.ndarray:
    return np.ascontiguousarray(img.data.transpose(2, 0, 1))


@dataclass
class _Prepared:
    dims: Tuple[int, int]
    inputs: Dict[str, np.ndarray]
    targets: Dict[str, np.ndarray]


def _prepare(
    samples: Sequence[TrainingSample], pipeline: FusionPipeline
) -> List[_Prepared]:
    prepared = []
    for sample in samples:
        inputs = sample.pipeline_inputs()
        missing = [name for name in pipeline.input_names if name not in inputs]
        if missing:
            raise ContractViolation(
                f"{pipeline.spec.mode.value} needs inputs {missing}"
                " the dataset does not provide"
            )
        ref = inputs["ref"]
        if min(ref.height, ref.width) < pipeline.min_input_size:
            raise ContractViolation(
                f"sample {ref.width}x{ref.height} smaller than"
                f" {pipeline.min_input_size} required by the pipeline depth"
            )
        prepared.append(
            _Prepared(
                dims=ref.dims,
                inputs={k: _to_chw(inputs[k]) for k in pipeline.input_names},
                targets={k: _to_chw(v) for k, v in sample.targets().items()},
            )
        )
    return prepared


def _batches(prepared: List[_Prepared], batch_size: int,
             rng: np.random.Generator) -> Iterator[List[_Prepared]]:
    """Endless seeded epochs; a batch only holds samples of one size"""
    while True:
        buckets: Dict[Tuple[int, int], List[_Prepared]] = {}
        for i in rng.permutation(len(prepared)):
            item = prepared[i]
            bucket = buckets.setdefault(item.dims, [])
            bucket.append(item)
            if len(bucket) == batch_size:
                yield bucket
                buckets[item.dims] = []
        for dims in sorted(buckets):
            if buckets[dims]:
                yield buckets[dims]


def _stack(batch: List[_Prepared], attr: str, key: str, dtype) -> np.ndarray:
    stacked = np.stack([getattr(item, attr)[key] for item in batch])
    return stacked.astype(dtype, copy=False)


def _loss_terms(pipeline: FusionPipeline, cfg: TrainConfig,
                active: Optional[set]) -> Dict[str, Tuple[List[str], float]]:
    """loss name -> (output keys, weight) for the stages being trained"""
    w_cm, w_merge, w_final = cfg.loss_weights
    cm_keys = [s.output for s in pipeline.stages if s.name.startswith("cm_")]
    terms = {}
    if pipeline.spec.mode == PipelineMode.BASIC2:
        terms["loss_final"] = (["final"], w_final)
        return terms
    if active is None or active & {"cm_under", "cm_over"}:
        terms["loss_cm"] = (cm_keys, w_cm)
    if active is None or "merge" in active:
        terms["loss_merge"] = (["merged"], w_merge)
    if active is None or "deghost" in active:
        terms["loss_final"] = (["final"], w_final)
    return terms


def _active_stages(t: int, cfg: TrainConfig, pipeline: FusionPipeline) -> Optional[set]:
    """None trains everything; the staged schedule walks the stages in thirds"""
    if cfg.schedule == "joint" or pipeline.spec.mode == PipelineMode.BASIC2:
        return None
    phase = min(2, 3 * t // cfg.max_iters)
    return [{"cm_under", "cm_over"}, {"merge"}, {"deghost"}][phase]


@dataclass
class TrainResult:
    pipeline: FusionPipeline
    log: List[dict]
    checkpoints: List[Path] = field(default_factory=list)
    best_val_psnr: Optional[float] = None


def _write_checkpoint(
    pipeline: FusionPipeline, out_dir: Optional[Path], name: str
) -> Optional[Path]:
    if out_dir is None:
        return None
    path = out_dir / name
    save_params(pipeline, path)
    return path


def train(
    dataset: Union[Dataset, Sequence[TrainingSample]],
    pipeline_spec: PipelineSpec,
    cfg: Optional[TrainConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    init: Optional[FusionPipeline] = None,
    val: Optional[Sequence[TrainingSample]] = None,
) -> TrainResult:
    """Run cfg.max_iters SGD iterations; deterministic given (seed, dataset, cfg)"""
    cfg = cfg or TrainConfig()
    if isinstance(dataset, Dataset):
        samples = dataset.train
        val = dataset.val if val is None else val
    else:
        samples = list(dataset)
    if not samples:
        raise ContractViolation("training needs a non-empty dataset")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / LOG_FILE).write_text("", encoding="utf-8")

    pipeline = init or FusionPipeline.initialize(pipeline_spec, seed=cfg.seed)
    if pipeline.spec != pipeline_spec:
        raise ContractViolation("initial pipeline does not match the requested spec")
    prepared = _prepare(samples, pipeline)
    batches = _batches(prepared, cfg.batch_size, np.random.default_rng(cfg.seed))
    params = pipeline.flat_params()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    log: List[dict] = []
    checkpoints: List[Path] = []
    best_psnr = None
    dtype = pipeline.dtype

    say(f"🔄 Training {pipeline_spec.mode.value} on {len(samples)} samples "
        f"for {cfg.max_iters} iterations")
    if not val and out_path is not None:
        say(
            f"⚠️ No validation samples: {BEST_CHECKPOINT} follows the latest"
            " checkpoint"
        )
    for t in range(cfg.max_iters):
        lr = lr_schedule(t, cfg)
        active = _active_stages(t, cfg, pipeline)
        terms = _loss_terms(pipeline, cfg, active)
        batch = next(batches)
        inputs = {k: _stack(batch, "inputs", k, dtype) for k in pipeline.input_names}

        try:
            values, tape = pipeline.forward(inputs)
            losses: Dict[str, float] = {}
            output_grads: Dict[str, np.ndarray] = {}
            for term, (keys, weight) in terms.items():
                term_loss = 0.0
                for key in keys:
                    target = Tensor(_stack(batch, "targets", key, dtype))
                    value, grad = l1_loss(values[key], target)
                    term_loss += value / len(keys)
                    scaled = grad * dtype.type(weight / len(keys))
                    if key in output_grads:
                        scaled = output_grads[key] + scaled
                    output_grads[key] = scaled
                losses[term] = term_loss
            total = sum(terms[name][1] * value for name, value in losses.items())
            if not math.isfinite(total):
                raise NonFiniteError(f"loss is {total}")

            grads = pipeline.backward(tape, output_grads)
            if active is not None:
                grads = {k: g for k, g in grads.items() if k.split("/", 1)[0] in active}
            grads, grad_norm = clip_gradients(grads, cfg.grad_clip)
            params, velocity = sgd_momentum_step(
                params, grads, velocity, lr, cfg.momentum
            )
            pipeline = pipeline.with_flat_params(params)
        except (NonFiniteError, NonFiniteGradientError) as e:
            path = _write_checkpoint(pipeline, out_path, DIAGNOSTIC_CHECKPOINT)
            say(f"❌ Training diverged at iteration {t}: {e}")
            raise TrainingDivergedError(t, path, str(e)) from e

        if t % cfg.log_every == 0 or t == cfg.max_iters - 1:
            record = {
                "iter": t,
                "lr": lr,
                "loss_cm": losses.get("loss_cm"),
                "loss_merge": losses.get("loss_merge"),
                "loss_final": losses.get("loss_final"),
                "loss": total,
                "grad_norm": grad_norm,
            }
            log.append(record)
            if out_path is not None:
                with open(out_path / LOG_FILE, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record) + "\n")

        done = t + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.max_iters:
            if done == cfg.max_iters:
                name = FINAL_CHECKPOINT
            else:
                name = f"ckpt-{done:06d}.lefn"
            path = _write_checkpoint(pipeline, out_path, name)
            if path is not None:
                checkpoints.append(path)
            if val:
                score = evaluate(pipeline, val, timing=False).mean_psnr
                say(
                    f"📊 iter {done}: loss {total:.5f},"
                    f" validation PSNR {score:.2f} dB"
                )
                if best_psnr is None or score > best_psnr:
                    best_psnr = score
                    _write_checkpoint(pipeline, out_path, BEST_CHECKPOINT)
            else:
                _write_checkpoint(pipeline, out_path, BEST_CHECKPOINT)
                say(f"📊 iter {done}: loss {total:.5f}")

    say(f"✅ Training finished after {cfg.max_iters} iterations")
    return TrainResult(
        pipeline=pipeline,
        log=log,
        checkpoints=checkpoints,
        best_val_psnr=best_psnr,
    )

