"""
End-to-end training: clip sampling, affine augmentation of history frames,
SGD with momentum and decoupled weight decay, and a gradient-check suite.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence as SequenceT, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from app.aggregation import EmbeddingNetWeights, aggregate, embed, weight_mask
from app.align import deformable_conv
from app.autodiff import (
    Tensor,
    bilinear_sample,
    conv2d,
    finite_diff_check,
    gradients,
    relative_error,
)
from app.backbone import FeaturePyramid, topdown_merge
from app.cf_layer import make_label, respond, solve_filter, training_loss
from app.config import AppConfig, TrainConfig
from app.datasets import Sequence, SynthSpec, synth_sequence
from app.errors import DataError, NonFiniteError, NonFiniteLossError
from app.logging_config import progress_enabled
from app.model import SataNetwork, param_group
from app.tracker import crop_pixels, prepare_patch
from app.utils import make_rng
from app.weights_io import save_weights

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.95, 1.05)
MAX_TRANSLATION = 5.0


# =====================================
# CLIP SAMPLING
# =====================================
@dataclass(frozen=True)
class SampleClip:
    sequence: Sequence
    template_index: int
    search_index: int
    history_indices: Tuple[int, ...]

    def indices(self) -> Tuple[int, ...]:
        return (self.template_index, self.search_index) + self.history_indices


def sample_clip(sequence: Sequence, rng_seed, T: int = 3, template_window: int = 10,
                history_window: int = 20) -> SampleClip:
    """
    Random (template, search, history) indices.

    History frames are T distinct frames among the `history_window` frames
    before the search frame; the template lies within `template_window` of
    the search frame. All indices are distinct.
    """
    n = len(sequence)
    if n <= history_window + 1:
        raise DataError(f"sample_clip: sequence {sequence.name} has {n} frames, need more than {history_window + 1}")
    rng = make_rng(rng_seed)
    search = int(rng.integers(T, n))
    candidates = np.arange(max(0, search - history_window), search)
    history = tuple(sorted(int(i) for i in rng.choice(candidates, size=T, replace=False))) if T else ()

    lo, hi = max(0, search - template_window), min(n - 1, search + template_window)
    taken = set(history) | {search}
    template_choices = [i for i in range(lo, hi + 1) if i not in taken]
    template = int(rng.choice(template_choices))
    return SampleClip(sequence, template, search, history)


# =====================================
# AUGMENTATION
# =====================================
def apply_affine(patch: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0,
                 translation: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """
    Rotate and scale about the patch center, then translate by (dy, dx) px.
    Bilinear resampling with edge replication; works on [h,w] or [c,h,w].
    """
    if patch.ndim == 3:
        return np.stack([apply_affine(ch, angle_deg, scale, translation) for ch in patch])
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # output -> input: inverse of (scale * rotation)
    inverse = np.array([[cos, sin], [-sin, cos]]) / scale
    center = (np.array(patch.shape, dtype=np.float64) - 1) / 2
    offset = center - inverse @ (center + np.asarray(translation, dtype=np.float64))
    return ndimage.affine_transform(patch, inverse, offset=offset, order=1, mode="nearest")


def augment_affine(patch: np.ndarray, rng) -> np.ndarray:
    rng = make_rng(rng)
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    scale = rng.uniform(*SCALE_RANGE)
    translation = tuple(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION, size=2))
    return apply_affine(patch, angle, scale, translation)


def clip_patches(clip: SampleClip, cfg: AppConfig, rng=None,
                 augment: bool = True) -> Tuple[Tensor, Tensor, List[Tensor]]:
    """
    Template patch around its own box; search and history patches share the
    search box so motion shows up as misalignment. Only history is augmented.
    """
    seq, tr = clip.sequence, cfg.tracker
    side = tr.patch_side

    def pixels(index: int, box_index: int) -> np.ndarray:
        return crop_pixels(seq.frames[index], seq.boxes[box_index], 1.0, tr.padding, side)

    template = prepare_patch(pixels(clip.template_index, clip.template_index), cfg)
    search = prepare_patch(pixels(clip.search_index, clip.search_index), cfg)
    history = []
    for index in clip.history_indices:
        raw = pixels(index, clip.search_index)
        if augment:
            raw = augment_affine(raw, rng)
        history.append(prepare_patch(raw, cfg))
    return template, search, history


# =====================================
# OPTIMIZER
# =====================================
@dataclass
class SgdState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def sgd_update(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: SgdState,
               config: TrainConfig, frozen: SequenceT[str] = ()) -> Dict[str, Tensor]:
    """
    v <- momentum * v + g
    p <- p * (1 - lr * weight_decay) - lr * v
    Parameters in frozen groups are returned unchanged.
    """
    updated = {}
    for name, p in params.items():
        if param_group(name) in frozen:
            updated[name] = p
            continue
        g = grads[name]
        v = state.velocity.get(name)
        v = g.copy() if v is None else config.momentum * v + g
        state.velocity[name] = v
        new = p.data * (1 - config.lr * config.weight_decay) - config.lr * v
        updated[name] = Tensor(new.astype(p.dtype, copy=False))
    state.steps += 1
    return updated


def _frozen_groups(config: TrainConfig) -> Tuple[str, ...]:
    return ("backbone",) if config.freeze_backbone else ()


def batch_loss_and_grads(net: SataNetwork, batch: SequenceT[Tuple[Tensor, Tensor, List[Tensor]]]
                         ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and gradients averaged over the batch, reduced in batch order."""
    names = list(net.params)
    totals = {name: np.zeros(net.params[name].shape, dtype=np.float64) for name in names}
    loss_sum = 0.0
    for template, search, history in batch:
        leaves = {name: Tensor(net.params[name].data) for name in names}
        try:
            loss = net.with_params(leaves).clip_loss(template, search, history)
        except NonFiniteError as e:
            raise NonFiniteLossError(f"❌ non-finite value in the forward pass: {e}") from e
        value = float(loss.item())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"❌ non-finite loss {value}")
        for name, g in zip(names, gradients(loss, [leaves[n] for n in names])):
            totals[name] += g
        loss_sum += value
    scale = 1.0 / len(batch)
    return loss_sum * scale, {name: g * scale for name, g in totals.items()}


def train_step(net: SataNetwork, batch, state: SgdState, config: TrainConfig) -> Tuple[SataNetwork, float]:
    """One SGD step on a batch of clip patches; returns the new network and the batch loss."""
    loss, grads = batch_loss_and_grads(net, batch)
    params = sgd_update(net.params, grads, state, config, _frozen_groups(config))
    return net.with_params(params), loss


def make_batch(corpus: SequenceT[Sequence], net: SataNetwork, rng: np.random.Generator):
    tc = net.config.train
    batch = []
    for _ in range(tc.batch_size):
        seq = corpus[int(rng.integers(len(corpus)))]
        clip = sample_clip(seq, rng, tc.T, tc.template_window, tc.history_window)
        batch.append(clip_patches(clip, net.config, rng))
    return batch


def train(corpus: SequenceT[Sequence], net: SataNetwork, checkpoint: Optional[str] = None,
          steps: Optional[int] = None) -> Tuple[SataNetwork, List[float]]:
    """
    Run epochs x steps_per_epoch SGD steps (or exactly `steps` when given).
    Writes a checkpoint after every epoch when `checkpoint` is set.
    """
    tc = net.config.train
    rng = make_rng(tc.seed)
    state = SgdState()
    losses: List[float] = []
    total = steps if steps is not None else tc.epochs * tc.steps_per_epoch
    per_epoch = tc.steps_per_epoch if steps is None else total

    bar = tqdm(range(total), desc="training", disable=not progress_enabled(logger))
    for step in bar:
        net, loss = train_step(net, make_batch(corpus, net, rng), state, tc)
        losses.append(loss)
        bar.set_postfix(loss=f"{loss:.4f}")
        if (step + 1) % per_epoch == 0:
            epoch = (step + 1) // per_epoch
            window = losses[-per_epoch:]
            logger.info(f"✅ epoch {epoch}: mean loss {np.mean(window):.6f}")
            if checkpoint:
                save_weights(checkpoint, net.params)
    return net, losses


# =====================================
# GRADIENT CHECK SUITE
# =====================================
@dataclass
class GradCheckEntry:
    module: str
    parameter: str
    index: Tuple[int, ...]
    error: float
    checked: int


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)
    tolerance: float = GRADIENT_TOLERANCE

    @property
    def violations(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.error <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_error(self) -> float:
        return max((e.error for e in self.entries), default=0.0)


def small_config(base: Optional[AppConfig] = None) -> AppConfig:
    """Double-precision, 25 px geometry used for gradient checks and fast tests."""
    base = base or AppConfig()
    return replace(
        base,
        backbone=replace(base.backbone, kind="tiny_cnn", widths=(4, 4, 8), input_side=25, pyramid_channels=4),
        align=replace(base.align, hidden=4),
        aggregate=replace(base.aggregate, widths=(4, 4, 4)),
        tracker=replace(base.tracker, patch_side=25, T=2),
        train=replace(base.train, T=2, batch_size=1),
        runtime=replace(base.runtime, dtype="float64"),
    )


def small_clip_sequence(seed: int = 0) -> Sequence:
    return synth_sequence(SynthSpec(size=(48, 64), target_size=(8.0, 8.0), velocity=(0.5, 0.25),
                                    texture="noise", frames=30, seed=seed, name="gradcheck"))


def _module_checks(rng: np.random.Generator, channels: int = 3) -> List[Tuple[str, Callable, List[np.ndarray]]]:
    side = 6
    c = channels
    feature = rng.standard_normal((c, side, side))
    kernel3 = rng.standard_normal((c, c, 3, 3))
    # keep sample points off the integer grid
    points = rng.uniform(0.1, side - 1.1, size=(2, side, side))
    offsets = rng.uniform(-0.4, 0.4, size=(18, side, side)) + 0.25
    embed_kernels = [rng.standard_normal((4, c, 1, 1)), rng.standard_normal((4, 4, 3, 3)),
                     rng.standard_normal((c, 4, 1, 1))]
    label = make_label(8, 8, 0.1)

    def conv_op(x, k):
        return conv2d(x, k, padding="same")

    def deform_op(x, off, k):
        return deformable_conv(x, off, k)

    def aggregation_op(f_search, f_a, f_b, k0, k1, k2):
        weights = EmbeddingNetWeights((k0, k1, k2))
        e_s = embed(f_search, weights)
        mask = weight_mask([e_s, embed(f_a, weights), embed(f_b, weights)], e_s)
        return aggregate([f_search, f_a, f_b], mask)

    def merge_op(p0, p1, p2):
        return topdown_merge(FeaturePyramid((p0, p1, p2)), 9)

    def cf_op(f_x, f_z):
        return training_loss(respond(solve_filter(f_x, label, 1e-4), f_z), label)

    return [
        ("conv2d", conv_op, [feature, kernel3]),
        ("bilinear_sample", bilinear_sample, [feature, points]),
        ("deformable_conv", deform_op, [feature, offsets, kernel3]),
        ("aggregation", aggregation_op, [feature, rng.standard_normal(feature.shape),
                                         rng.standard_normal(feature.shape)] + embed_kernels),
        ("topdown_merge", merge_op, [rng.standard_normal((c, 2, 2)), rng.standard_normal((c, 4, 4)),
                                     rng.standard_normal((c, 7, 7))]),
        ("cf_layer", cf_op, [rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))]),
    ]


def _end_to_end(net: SataNetwork, patches, n_params: int, eps: float, rng: np.random.Generator,
                corrupt: bool) -> List[GradCheckEntry]:
    template, search, history = patches
    names = list(net.params)
    leaves = {name: Tensor(net.params[name].data) for name in names}
    loss = net.with_params(leaves).clip_loss(template, search, history)
    analytic = dict(zip(names, gradients(loss, [leaves[n] for n in names])))
    if corrupt:
        first = names[0]
        analytic[first] = analytic[first].copy()
        analytic[first].flat[0] += 1.0

    def loss_at(name: str, index: Tuple[int, ...], delta: float) -> float:
        data = net.params[name].data.copy()
        data[index] += delta
        params = dict(net.params)
        params[name] = Tensor(data)
        return float(net.with_params(params).clip_loss(template, search, history).item())

    entries = []
    for group in dict.fromkeys(param_group(n) for n in names):
        coords = [(n, idx) for n in names if param_group(n) == group
                  for idx in np.ndindex(net.params[n].shape)]
        picked = coords if len(coords) <= n_params else [coords[i] for i in
                                                         rng.choice(len(coords), n_params, replace=False)]
        if corrupt and group == param_group(names[0]):
            picked = [(names[0], np.unravel_index(0, net.params[names[0]].shape))] + picked
        group_scale = max(float(np.max(np.abs(analytic[n]))) for n in names if param_group(n) == group)
        worst = GradCheckEntry(group, "", (), 0.0, 0)
        for name, idx in picked:
            idx = tuple(int(i) for i in idx)
            numeric = (loss_at(name, idx, eps) - loss_at(name, idx, -eps)) / (2 * eps)
            err = relative_error(float(analytic[name][idx]), numeric, group_scale)
            if not math.isfinite(float(analytic[name][idx])):
                err = math.inf
            worst.checked += 1
            if err > worst.error:
                worst = GradCheckEntry(group, name, idx, err, worst.checked)
        entries.append(worst)
        logger.info(f"{'✅' if worst.error <= GRADIENT_TOLERANCE else '❌'} end-to-end {group}: "
                    f"max error {worst.error:.2e} over {worst.checked} parameters")
    return entries


def grad_check_suite(net: SataNetwork, patches=None, n_params: int = 200, eps: float = 1e-6,
                     seed: int = 0, corrupt: bool = False) -> GradCheckReport:
    """
    Finite-difference checks of (a) each module on small random inputs and
    (b) the end-to-end clip loss w.r.t. up to `n_params` sampled parameters
    per parameter group. `corrupt` perturbs one analytic gradient.
    """
    if net.config.runtime.dtype != "float64":
        raise ValueError("grad_check_suite needs runtime.dtype float64")
    rng = make_rng(seed)
    report = GradCheckReport()

    for module, op, inputs in _module_checks(rng):
        result = finite_diff_check(op, inputs, eps=eps, seed=seed)
        report.entries.append(GradCheckEntry(module, f"input{result.input_index}", result.coordinate,
                                             result.max_error, result.checked))
        logger.info(f"{'✅' if result.max_error <= GRADIENT_TOLERANCE else '❌'} {module}: "
                    f"max error {result.max_error:.2e}")

    if patches is None:
        tc = net.config.train
        clip = sample_clip(small_clip_sequence(seed), rng, tc.T, tc.template_window, tc.history_window)
        patches = clip_patches(clip, net.config, rng)
    report.entries.extend(_end_to_end(net, patches, n_params, eps, rng, corrupt))
    return report
