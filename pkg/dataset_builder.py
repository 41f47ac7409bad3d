"""
Training data for the fusion pipelines.

Scenes come either from a JSON-lines manifest of real stereo shots or from
the synthetic generator. Each scene is turned into 2-LDR pairs or 3-LDR
triples following the reference-view rules, with classical fusion of the
reference-view stack as ground truth and flip augmentation on top.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import (
    Callable,
    ClassVar,
    Dict,
    List,
    Literal,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, Field, PositiveFloat, ValidationError

from image_core import (
    ContractViolation,
    ExposureTag,
    Image,
    PathLike,
    Role,
    View,
    flip,
    load_image,
    resize,
    save_image,
)
from pyramid_fusion import FusionParams, exposure_fuse, ghost_fuse
from settings import say, settings

DEFAULT_RATIO_MIN = 8.0
DEFAULT_DIMS = (128, 96)
# a color-map target may differ from the requested exposure by at most this factor
MATCH_TOLERANCE = 1.3
GAMMA = 2.2
FLIPS = (None, "vertical", "horizontal", "diagonal")

GroundTruthStack = Literal["full", "pair"]
Mode = Literal["2ldr", "3ldr"]


class ManifestError(ValueError):
    """Malformed manifest; `line` is 1-based when known"""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        field_name: Optional[str] = None,
    ):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
        self.field_name = field_name


# Manifest records

class ShotRecord(BaseModel):
    path: str
    ev: PositiveFloat
    role: Role


class SceneRecord(BaseModel):
    id: str = Field(min_length=1)
    views: Dict[View, List[ShotRecord]]


class IndexEntry(BaseModel):
    split: Literal["train", "val"]
    scene: str
    dir: str = Field(min_length=1)
    files: Dict[str, str]
    flip: Optional[str] = None
    ratio: PositiveFloat = 1.0
    reference_view: Optional[View] = None
    input_view: Optional[View] = None


# Scenes

@dataclass(eq=False)
class Shot:
    """One exposure of one view; the image is loaded on first use"""

    tag: ExposureTag
    path: Optional[Path] = None
    cached: Optional[Image] = field(default=None, repr=False)

    def image(self) -> Image:
        if self.cached is None:
            if self.path is None:
                raise ContractViolation("shot has neither a path nor an image")
            self.cached = load_image(self.path)
        return self.cached

    @property
    def ev(self) -> float:
        return self.tag.exposure_value

    def __eq__(self, other):
        if not isinstance(other, Shot):
            return NotImplemented
        return self.tag == other.tag and self.path == other.path


@dataclass
class Scene:
    id: str
    views: Dict[View, List[Shot]]

    def __post_init__(self):
        self.views = {
            view: sorted(shots, key=lambda s: s.ev)
            for view, shots in sorted(self.views.items(), key=lambda kv: kv[0].value)
            if shots
        }

    def shots(self, view: View) -> List[Shot]:
        return self.views.get(view, [])

    def with_role(self, view: View, role: Role) -> List[Shot]:
        return [s for s in self.shots(view) if s.tag.role_hint == role]

    def distinct_exposures(self, view: View) -> int:
        return len({s.ev for s in self.shots(view)})


@dataclass
class SourceCollection:
    scenes: List[Scene]

    def __post_init__(self):
        self.scenes = sorted(self.scenes, key=lambda s: s.id)
        ids = [s.id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate scene ids in collection")
        for scene in self.scenes:
            if scene.distinct_exposures(View.LEFT) < 2:
                raise ContractViolation(
                    f"scene {scene.id}: reference view needs >= 2 distinct exposures"
                )


def exposure_ratio(a: Union[ExposureTag, float], b: Union[ExposureTag, float]) -> float:
    """max/min of two exposure values, always >= 1"""
    ev_a = a.exposure_value if isinstance(a, ExposureTag) else float(a)
    ev_b = b.exposure_value if isinstance(b, ExposureTag) else float(b)
    if ev_a <= 0 or ev_b <= 0:
        raise ContractViolation(f"exposure values must be positive, got {ev_a}, {ev_b}")
    return max(ev_a, ev_b) / min(ev_a, ev_b)


def nearest_exposure(shots: Sequence[Shot], ev: float,
                     tolerance: float = MATCH_TOLERANCE) -> Optional[Shot]:
    """Shot closest to `ev` in log scale, or None when none is within tolerance"""
    best = None
    best_distance = math.log(tolerance) + 1e-12
    for shot in shots:
        distance = abs(math.log(shot.ev / ev))
        if distance <= best_distance:
            best, best_distance = shot, distance
    return best


# Training samples

@dataclass
class TrainingSample2:
    reference: Image
    non_reference: Image
    ghost_fused: Image
    color_map_target: Image
    ground_truth: Image
    scene_id: str = ""
    ratio: float = 1.0
    ground_truth_pair: Optional[Image] = None
    flip: Optional[str] = None

    FILES: ClassVar[Dict[str, str]] = {
        "reference": "reference.png",
        "non_reference": "nonref.png",
        "ghost_fused": "ghost.png",
        "color_map_target": "cmtarget.png",
        "ground_truth": "gt.png",
        "ground_truth_pair": "gt_pair.png",
    }

    def __post_init__(self):
        _check_same_dims(self)

    def pipeline_inputs(self) -> Dict[str, Image]:
        return {
            "ref": self.reference,
            "nonref": self.non_reference,
            "ghost": self.ghost_fused,
        }

    def targets(self) -> Dict[str, Image]:
        return {
            "cm_over": self.color_map_target,
            "merged": self.ground_truth,
            "final": self.ground_truth,
        }


@dataclass
class TrainingSample3:
    reference: Image
    under: Image
    over: Image
    ghost_fused: Image
    cm_under_target: Image
    cm_over_target: Image
    ground_truth: Image
    scene_id: str = ""
    reference_view: View = View.LEFT
    input_view: View = View.RIGHT
    ground_truth_pair: Optional[Image] = None
    flip: Optional[str] = None

    FILES: ClassVar[Dict[str, str]] = {
        "reference": "reference.png",
        "under": "under.png",
        "over": "over.png",
        "ghost_fused": "ghost.png",
        "cm_under_target": "cmunder.png",
        "cm_over_target": "cmover.png",
        "ground_truth": "gt.png",
        "ground_truth_pair": "gt_pair.png",
    }

    def __post_init__(self):
        _check_same_dims(self)
        if self.reference_view == self.input_view:
            raise ContractViolation(
                "under/over must come from a view other than the reference"
            )

    def pipeline_inputs(self) -> Dict[str, Image]:
        return {
            "ref": self.reference,
            "under": self.under,
            "over": self.over,
            "ghost": self.ghost_fused,
        }

    def targets(self) -> Dict[str, Image]:
        return {
            "cm_under": self.cm_under_target,
            "cm_over": self.cm_over_target,
            "merged": self.ground_truth,
            "final": self.ground_truth,
        }


TrainingSample = Union[TrainingSample2, TrainingSample3]


def _images(sample: TrainingSample) -> Dict[str, Image]:
    return {
        name: getattr(sample, name)
        for name in sample.FILES
        if getattr(sample, name) is not None
    }


def _check_same_dims(sample: TrainingSample) -> None:
    dims = {img.dims for img in _images(sample).values()}
    if len(dims) != 1:
        raise ContractViolation(f"sample images differ in size: {sorted(dims)}")


def augment(samples: Sequence[TrainingSample]) -> List[TrainingSample]:
    """Original plus vertical, horizontal and diagonal flips of every sample"""
    out = []
    for sample in samples:
        for axis in FLIPS:
            if axis is None:
                out.append(sample)
                continue
            flipped = {name: flip(img, axis) for name, img in _images(sample).items()}
            out.append(replace(sample, flip=axis, **flipped))
    return out


# Building

def _fuse_stack(images: Sequence[Image], params: Optional[FusionParams]) -> Image:
    return exposure_fuse(list(images), params)


def _load_resized(shot: Shot, target_dims: Tuple[int, int]) -> Image:
    return resize(shot.image(), *target_dims)


def _pairs_for_scene(
    scene: Scene,
    ratio_min: float,
    target_dims,
    gt_stack: GroundTruthStack,
    with_pair_gt: bool,
    params: Optional[FusionParams],
    warnings: List[str],
) -> List[TrainingSample2]:
    left = scene.shots(View.LEFT)
    other_view = View.RIGHT if scene.shots(View.RIGHT) else View.FREE
    unders = scene.with_role(View.LEFT, Role.UNDER)
    overs = scene.with_role(other_view, Role.OVER)
    if not unders or not overs:
        warnings.append(f"scene {scene.id}: no left-under / other-view-over shots")
        return []

    admissible = [
        (u, o)
        for u in unders
        for o in overs
        if exposure_ratio(u.tag, o.tag) >= ratio_min
    ]
    targets = {}
    for _, over in admissible:
        target = nearest_exposure(left, over.ev)
        if target is None:
            warnings.append(
                f"scene {scene.id}: no reference-view exposure near EV {over.ev:g},"
                " scene skipped"
            )
            return []
        targets[id(over)] = target
    if not admissible:
        return []

    stack = [_load_resized(s, target_dims) for s in left]
    full_gt = _fuse_stack(stack, params) if gt_stack == "full" or with_pair_gt else None

    samples = []
    for under, over in admissible:
        reference = _load_resized(under, target_dims)
        non_reference = _load_resized(over, target_dims)
        cm_target = _load_resized(targets[id(over)], target_dims)
        pair_gt = None
        if gt_stack == "pair" or with_pair_gt:
            pair_gt = _fuse_stack([reference, cm_target], params)
        samples.append(
            TrainingSample2(
                reference=reference,
                non_reference=non_reference,
                ghost_fused=ghost_fuse(reference, [non_reference], params),
                color_map_target=cm_target,
                ground_truth=full_gt if gt_stack == "full" else pair_gt,
                scene_id=scene.id,
                ratio=exposure_ratio(under.tag, over.tag),
                ground_truth_pair=pair_gt if with_pair_gt else None,
            )
        )
    return samples


def _median_mid(shots: Sequence[Shot]) -> Optional[Shot]:
    mids = [s for s in shots if s.tag.role_hint == Role.MID]
    if not mids:
        return None
    return mids[(len(mids) - 1) // 2]


def _triple_for_view(scene: Scene, ref_view: View, input_view: View, target_dims,
                     gt_stack: GroundTruthStack, with_pair_gt: bool,
                     params: Optional[FusionParams],
                     warnings: List[str]) -> Optional[TrainingSample3]:
    ref_shots = scene.shots(ref_view)
    reference = _median_mid(ref_shots)
    unders = scene.with_role(input_view, Role.UNDER)
    overs = scene.with_role(input_view, Role.OVER)
    if reference is None or not unders or not overs:
        warnings.append(
            f"scene {scene.id}: {ref_view.value} reference lacks mid or "
            f"{input_view.value} lacks under/over, skipped"
        )
        return None
    under, over = unders[0], overs[-1]
    cm_under = nearest_exposure(ref_shots, under.ev)
    cm_over = nearest_exposure(ref_shots, over.ev)
    if cm_under is None or cm_over is None:
        warnings.append(
            f"scene {scene.id}: {ref_view.value} view has no counterpart"
            " for the input exposures"
        )
        return None

    ref_img = _load_resized(reference, target_dims)
    under_img = _load_resized(under, target_dims)
    over_img = _load_resized(over, target_dims)
    cm_under_img = _load_resized(cm_under, target_dims)
    cm_over_img = _load_resized(cm_over, target_dims)
    full_gt = pair_gt = None
    if gt_stack == "full" or with_pair_gt:
        full_stack = [_load_resized(s, target_dims) for s in ref_shots]
        full_gt = _fuse_stack(full_stack, params)
    if gt_stack == "pair" or with_pair_gt:
        pair_gt = _fuse_stack([cm_under_img, ref_img, cm_over_img], params)
    return TrainingSample3(
        reference=ref_img,
        under=under_img,
        over=over_img,
        ghost_fused=ghost_fuse(ref_img, [under_img, over_img], params),
        cm_under_target=cm_under_img,
        cm_over_target=cm_over_img,
        ground_truth=full_gt if gt_stack == "full" else pair_gt,
        scene_id=scene.id,
        reference_view=ref_view,
        input_view=input_view,
        ground_truth_pair=pair_gt if with_pair_gt else None,
    )


def _triples_for_scene(scene: Scene, target_dims, gt_stack, with_pair_gt, params,
                       warnings: List[str]) -> List[TrainingSample3]:
    assignments = []
    if scene.shots(View.RIGHT):
        assignments = [(View.LEFT, View.RIGHT), (View.RIGHT, View.LEFT)]
    elif scene.shots(View.FREE):
        assignments = [(View.LEFT, View.FREE)]
    else:
        warnings.append(f"scene {scene.id}: single view, no cross-view inputs")
    samples = []
    for ref_view, input_view in assignments:
        sample = _triple_for_view(
            scene,
            ref_view,
            input_view,
            target_dims,
            gt_stack,
            with_pair_gt,
            params,
            warnings,
        )
        if sample is not None:
            samples.append(sample)
    return samples


def _build_parallel(scenes: Sequence[Scene], build: Callable[[Scene, List[str]], list],
                    warnings: Optional[List[str]], threads: Optional[int]) -> list:
    workers = max(1, threads or settings.fusion_threads)
    scene_warnings: List[List[str]] = [[] for _ in scenes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(build, scenes, scene_warnings))
    for messages in scene_warnings:
        for message in messages:
            say(f"⚠️ {message}")
        if warnings is not None:
            warnings.extend(messages)
    return [sample for samples in results for sample in samples]


def build_pairs_2ldr(
    src: SourceCollection,
    ratio_min: float = DEFAULT_RATIO_MIN,
    target_dims: Tuple[int, int] = DEFAULT_DIMS,
    gt_stack: GroundTruthStack = "full",
    with_pair_gt: bool = False,
    params: Optional[FusionParams] = None,
    warnings: Optional[List[str]] = None,
    threads: Optional[int] = None,
) -> List[TrainingSample2]:
    """Left-under reference, other-view-over non-reference, ratio >= ratio_min"""
    if ratio_min < 1:
        raise ContractViolation(f"ratio_min must be >= 1, got {ratio_min}")
    return _build_parallel(
        src.scenes,
        lambda scene, w: _pairs_for_scene(
            scene, ratio_min, target_dims, gt_stack, with_pair_gt, params, w
        ),
        warnings,
        threads,
    )


def build_triples_3ldr(
    src: SourceCollection,
    target_dims: Tuple[int, int] = DEFAULT_DIMS,
    gt_stack: GroundTruthStack = "full",
    with_pair_gt: bool = False,
    params: Optional[FusionParams] = None,
    warnings: Optional[List[str]] = None,
    threads: Optional[int] = None,
) -> List[TrainingSample3]:
    """Mid-exposed reference; under/over from the opposite view, both ways round"""
    return _build_parallel(
        src.scenes,
        lambda scene, w: _triples_for_scene(
            scene, target_dims, gt_stack, with_pair_gt, params, w
        ),
        warnings,
        threads,
    )


def split_by_scene(scene_ids: Sequence[str], fraction: float = 0.9,
                   seed: int = 0) -> Tuple[List[str], List[str]]:
    """Seeded split of scene ids; no scene lands on both sides"""
    if not 0 < fraction <= 1:
        raise ContractViolation(f"split fraction must be in (0, 1], got {fraction}")
    ids = sorted(set(scene_ids))
    if len(ids) < 2 or fraction == 1:
        return ids, []
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(len(ids) - 1, max(1, round(fraction * len(ids))))
    train = sorted(ids[i] for i in order[:n_train])
    val = sorted(ids[i] for i in order[n_train:])
    return train, val


@dataclass
class Dataset:
    mode: Mode
    train: List[TrainingSample]
    val: List[TrainingSample]
    warnings: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val)


def build_dataset(
    src: SourceCollection,
    mode: Mode = "2ldr",
    ratio_min: float = DEFAULT_RATIO_MIN,
    target_dims: Tuple[int, int] = DEFAULT_DIMS,
    split: float = 0.9,
    seed: int = 0,
    gt_stack: GroundTruthStack = "full",
    with_pair_gt: bool = False,
    augment_val: bool = True,
    params: Optional[FusionParams] = None,
) -> Dataset:
    warnings: List[str] = []
    if mode == "2ldr":
        samples = build_pairs_2ldr(
            src, ratio_min, target_dims, gt_stack, with_pair_gt, params, warnings
        )
    elif mode == "3ldr":
        samples = build_triples_3ldr(
            src, target_dims, gt_stack, with_pair_gt, params, warnings
        )
    else:
        raise ContractViolation(f"unknown dataset mode: {mode}")

    train_ids, _ = split_by_scene([s.id for s in src.scenes], split, seed)
    train_set = set(train_ids)
    train = [s for s in samples if s.scene_id in train_set]
    val = [s for s in samples if s.scene_id not in train_set]
    return Dataset(
        mode=mode,
        train=augment(train),
        val=augment(val) if augment_val else val,
        warnings=warnings,
    )


# Synthetic scenes

def render_exposure(radiance: np.ndarray, ev: float, gamma: float = GAMMA) -> Image:
    """clamp(radiance * ev)^(1/gamma)"""
    if ev <= 0:
        raise ContractViolation(f"exposure value must be positive, got {ev}")
    exposed = np.clip(radiance * ev, 0.0, 1.0) ** (1.0 / gamma)
    return Image.from_array(exposed)


def exposure_values(ratio: float, count: int) -> List[float]:
    """`count` log-spaced exposures spanning `ratio`, centred on 1"""
    if count < 2:
        raise ContractViolation(f"need at least 2 exposures, got {count}")
    return [ratio ** (i / (count - 1)) / math.sqrt(ratio) for i in range(count)]


def _role_for(index: int, count: int) -> Role:
    if index == 0:
        return Role.UNDER
    if index == count - 1:
        return Role.OVER
    return Role.MID


def _draw_disc(radiance: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    yy, xx = np.mgrid[: radiance.shape[0], : radiance.shape[1]]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    radiance[mask] = color


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[:height, :width].astype(np.float64)
    low, high = rng.uniform(0.05, 0.4, size=3), rng.uniform(0.8, 3.0, size=3)
    ramp = (xx / max(width - 1, 1))[:, :, None]
    vertical = (yy / max(height - 1, 1))[:, :, None]
    radiance = low + (high - low) * (0.7 * ramp + 0.3 * vertical)
    for _ in range(int(rng.integers(4, 8))):
        x0, y0 = rng.integers(0, width), rng.integers(0, height)
        w = int(rng.integers(width // 8 + 1, width // 3 + 2))
        h = int(rng.integers(height // 8 + 1, height // 3 + 2))
        level = rng.uniform(np.log(0.03), np.log(4.0), 3)
        radiance[y0 : y0 + h, x0 : x0 + w] = np.exp(level)
    return radiance


def synth_scene(
    seed: int,
    dims: Tuple[int, int] = DEFAULT_DIMS,
    disparity: int = 8,
    object_shift: int = 4,
    layout: Literal["stereo", "free"] = "stereo",
    ratio: float = 16.0,
    exposures: int = 5,
) -> Scene:
    """Deterministic synthetic scene with a moving foreground disc.

    stereo: left and right views of the same radiance, the right view seeing
    it `disparity` pixels further left and the disc moved by `object_shift`.
    free: one static view plus under/over shots (view `free`) in which only
    the disc moved.
    """
    width, height = dims
    if width < 16 or height < 16:
        raise ContractViolation(
            f"synthetic scenes need dims >= 16x16, got {width}x{height}"
        )
    if disparity < 0 or object_shift < 0:
        raise ContractViolation("disparity and object_shift must be >= 0")

    rng = np.random.default_rng(seed)
    wide = _background(rng, height, width + disparity)
    cx = rng.uniform(0.3, 0.7) * width
    cy = rng.uniform(0.3, 0.7) * height
    r = min(width, height) * rng.uniform(0.12, 0.2)
    color = np.exp(rng.uniform(np.log(0.05), np.log(3.0), 3))

    left = wide[:, disparity : disparity + width].copy()
    _draw_disc(left, cx, cy, r, color)
    if layout == "stereo":
        moved = wide[:, :width].copy()
    else:
        moved = wide[:, disparity : disparity + width].copy()
    if layout == "stereo":
        _draw_disc(moved, cx + disparity + object_shift, cy, r, color)
    else:
        _draw_disc(moved, cx + object_shift, cy + object_shift / 2, r, color)

    evs = exposure_values(ratio, exposures)
    views: Dict[View, List[Shot]] = {View.LEFT: []}
    for i, ev in enumerate(evs):
        role = _role_for(i, len(evs))
        tag = ExposureTag(exposure_value=ev, view=View.LEFT, role_hint=role)
        views[View.LEFT].append(Shot(tag, cached=render_exposure(left, ev)))

    if layout == "stereo":
        views[View.RIGHT] = [
            Shot(
                ExposureTag(
                    exposure_value=ev, view=View.RIGHT, role_hint=_role_for(i, len(evs))
                ),
                cached=render_exposure(moved, ev),
            )
            for i, ev in enumerate(evs)
        ]
    elif layout == "free":
        views[View.FREE] = [
            Shot(ExposureTag(exposure_value=ev, view=View.FREE, role_hint=role),
                 cached=render_exposure(moved, ev))
            for ev, role in ((evs[0], Role.UNDER), (evs[-1], Role.OVER))
        ]
    else:
        raise ContractViolation(f"unknown layout: {layout}")
    return Scene(id=f"synth-{seed:04d}", views=views)


def synthetic_collection(
    count: int, dims: Tuple[int, int] = DEFAULT_DIMS, seed: int = 0, **kwargs
) -> SourceCollection:
    if count < 1:
        raise ContractViolation(f"need at least one synthetic scene, got {count}")
    scenes = [synth_scene(seed + i, dims, **kwargs) for i in range(count)]
    return SourceCollection(scenes)


# Manifest I/O

def _manifest_path(shot_path: Path, root: Path) -> str:
    try:
        return shot_path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(shot_path.resolve())


def write_manifest(src: SourceCollection, path: PathLike) -> None:
    """One JSON scene record per line; paths relative to the manifest when possible"""
    path = Path(path)
    lines = []
    for scene in src.scenes:
        views = {}
        for view, shots in scene.views.items():
            records = []
            for shot in shots:
                if shot.path is None:
                    raise ContractViolation(
                        f"scene {scene.id}: in-memory shots must be materialized first"
                    )
                records.append(
                    {"path": _manifest_path(shot.path, path.parent), "ev": shot.ev,
                     "role": shot.tag.role_hint.value}
                )
            views[view.value] = records
        lines.append(json.dumps({"id": scene.id, "views": views}, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _describe_error(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    field_name = ".".join(str(part) for part in first["loc"]) or "record"
    return field_name, first["msg"]


def read_manifest(path: PathLike, check_files: bool = True) -> SourceCollection:
    path = Path(path)
    root = path.parent
    scenes = []
    seen = set()
    missing = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = SceneRecord.model_validate(json.loads(line))
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON: {e.msg}", line_no) from e
        except ValidationError as e:
            field_name, message = _describe_error(e)
            raise ManifestError(
                f"field '{field_name}': {message}", line_no, field_name
            ) from e

        if record.id in seen:
            raise ManifestError(f"duplicate scene id '{record.id}'", line_no, "id")
        seen.add(record.id)

        views = {}
        for view, shot_records in record.views.items():
            shots = []
            for shot in shot_records:
                shot_path = Path(shot.path)
                if not shot_path.is_absolute():
                    shot_path = (root / shot_path).resolve()
                if check_files and not shot_path.exists():
                    missing.append(str(shot_path))
                tag = ExposureTag(
                    exposure_value=shot.ev, view=view, role_hint=shot.role
                )
                shots.append(Shot(tag, path=shot_path))
            views[view] = shots
        scene = Scene(id=record.id, views=views)
        if scene.distinct_exposures(View.LEFT) < 2:
            raise ManifestError(
                f"scene '{record.id}' needs >= 2 distinct left exposures",
                line_no,
                "views.left",
            )
        scenes.append(scene)

    if missing:
        raise ManifestError("missing image files: " + ", ".join(missing))
    return SourceCollection(scenes)


def materialize_scenes(
    scenes: Union[SourceCollection, Sequence[Scene]],
    out_dir: PathLike,
    bitdepth: Optional[int] = None,
) -> SourceCollection:
    """Write in-memory scenes as PNGs plus `manifest.jsonl`; returns the on-disk copy"""
    out_dir = Path(out_dir)
    bitdepth = bitdepth or settings.default_bitdepth
    scene_list = scenes.scenes if isinstance(scenes, SourceCollection) else list(scenes)
    written = []
    for scene in scene_list:
        scene_dir = out_dir / scene.id
        scene_dir.mkdir(parents=True, exist_ok=True)
        views = {}
        for view, shots in scene.views.items():
            views[view] = []
            for i, shot in enumerate(shots):
                shot_path = scene_dir / f"{view.value}_{i}.png"
                save_image(shot.image(), shot_path, bitdepth)
                views[view].append(Shot(shot.tag, path=shot_path.resolve()))
        written.append(Scene(scene.id, views))
    collection = SourceCollection(written)
    write_manifest(collection, out_dir / "manifest.jsonl")
    return collection


# Dataset directories

INDEX_FILE = "index.json"


def save_dataset(
    dataset: Dataset, out_dir: PathLike, bitdepth: Optional[int] = None
) -> Path:
    """<out>/<scene>/<sample-k>/*.png plus index.json; returns the index path"""
    out_dir = Path(out_dir)
    bitdepth = bitdepth or settings.default_bitdepth
    counters: Dict[str, int] = {}
    entries = []
    for split_name, samples in (("train", dataset.train), ("val", dataset.val)):
        for sample in samples:
            k = counters.get(sample.scene_id, 0)
            counters[sample.scene_id] = k + 1
            rel_dir = f"{sample.scene_id}/sample-{k:03d}"
            sample_dir = out_dir / rel_dir
            sample_dir.mkdir(parents=True, exist_ok=True)
            files = {}
            for name, img in _images(sample).items():
                filename = sample.FILES[name]
                save_image(img, sample_dir / filename, bitdepth)
                files[name] = filename
            entry = {
                "split": split_name,
                "scene": sample.scene_id,
                "dir": rel_dir,
                "flip": sample.flip,
                "files": files,
            }
            if isinstance(sample, TrainingSample2):
                entry["ratio"] = sample.ratio
            else:
                entry["reference_view"] = sample.reference_view.value
                entry["input_view"] = sample.input_view.value
            entries.append(entry)
    index = {
        "mode": dataset.mode,
        "bitdepth": bitdepth,
        "counts": {"train": len(dataset.train), "val": len(dataset.val)},
        "samples": entries,
    }
    index_path = out_dir / INDEX_FILE
    text = json.dumps(index, indent=2, sort_keys=True) + "\n"
    index_path.write_text(text, encoding="utf-8")
    return index_path


def load_dataset(path: PathLike) -> Dataset:
    root = Path(path)
    index_path = root / INDEX_FILE if root.is_dir() else root
    root = index_path.parent
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{index_path}: invalid index: {e.msg}") from e

    if not isinstance(index, dict):
        raise ManifestError(f"{index_path}: index must be a JSON object")
    mode = index.get("mode")
    sample_cls = {"2ldr": TrainingSample2, "3ldr": TrainingSample3}.get(mode)
    if sample_cls is None:
        raise ManifestError(
            f"{index_path}: unknown dataset mode {mode!r}", field_name="mode"
        )

    splits: Dict[str, List[TrainingSample]] = {"train": [], "val": []}
    known = {f.name for f in fields(sample_cls)}
    for i, raw in enumerate(index.get("samples", [])):
        try:
            entry = IndexEntry.model_validate(raw)
        except ValidationError as e:
            field_name, message = _describe_error(e)
            raise ManifestError(
                f"{index_path}: sample {i}: {field_name}: {message}",
                field_name=f"samples.{i}.{field_name}",
            ) from e
        extra = {"scene_id": entry.scene, "flip": entry.flip}
        if sample_cls is TrainingSample2:
            extra["ratio"] = entry.ratio
        else:
            for view_field in ("reference_view", "input_view"):
                if getattr(entry, view_field) is None:
                    raise ManifestError(
                        f"{index_path}: sample {i}: missing {view_field}",
                        field_name=f"samples.{i}.{view_field}",
                    )
                extra[view_field] = getattr(entry, view_field)
        required = [f.name for f in fields(sample_cls) if f.default is MISSING]
        missing = [name for name in required if name not in entry.files]
        if missing:
            raise ManifestError(
                f"{index_path}: sample {i}: missing images {', '.join(missing)}",
                field_name=f"samples.{i}.files",
            )
        sample_dir = root / entry.dir
        images = {
            name: load_image(sample_dir / filename)
            for name, filename in entry.files.items()
            if name in known
        }
        splits[entry.split].append(sample_cls(**images, **extra))
    return Dataset(mode=mode, train=splits["train"], val=splits["val"])
