"""Synthetic demonstration generator with a known success rule and domain shift.

Each demonstration renders a moving effector shape approaching a goal anchor on
a colored background. The success predicate is purely geometric (Chebyshev
distance to the anchor within a rule tolerance), evaluated on the exact integer
geometry that was rasterized, so generated labels can be re-derived analytically
frame by frame via :func:`oracle_predict`.

Domain shift between source (train) and target (test) demos is controlled by
disjoint background palettes and distractor counts. Generation is fully
deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SOURCE, TARGET, Demonstration, Frame, TaskDataset, label_frames
from .exceptions import ValidationError

TASK_RULES = ("reach_target", "stack_blocks", "cover_region")

# Shape colors are fixed across domains so the task-relevant signal is
# domain-invariant while the background is not.
_EFFECTOR_COLORS = {
    "reach_target": (220, 40, 40),
    "stack_blocks": (220, 40, 40),
    "cover_region": (230, 140, 40),
}
_GOAL_COLORS = {
    "reach_target": (50, 190, 70),
    "stack_blocks": (60, 80, 200),
    "cover_region": (50, 190, 70),
}

DEFAULT_SOURCE_PALETTE = ((30, 30, 50), (45, 35, 35), (35, 50, 40))
DEFAULT_TARGET_PALETTE = ((210, 210, 190), (190, 200, 220), (215, 190, 210))


@dataclass
class ShiftSpec:
    """Source vs target appearance: background palettes and distractor counts."""

    background_palette_source: Sequence[tuple[int, int, int]] = DEFAULT_SOURCE_PALETTE
    background_palette_target: Sequence[tuple[int, int, int]] = DEFAULT_TARGET_PALETTE
    distractor_count_source: int = 2
    distractor_count_target: int = 2

    @property
    def enabled(self) -> bool:
        return (
            list(self.background_palette_source) != list(self.background_palette_target)
            or self.distractor_count_source != self.distractor_count_target
        )

    def validate(self):
        for palette in (self.background_palette_source, self.background_palette_target):
            if not palette:
                raise ValidationError("background palettes must be non-empty")
        src = {tuple(c) for c in self.background_palette_source}
        tgt = {tuple(c) for c in self.background_palette_target}
        if src != tgt and (src & tgt):
            raise ValidationError(
                "source/target background palettes must be disjoint when they differ"
            )
        if self.distractor_count_source < 0 or self.distractor_count_target < 0:
            raise ValidationError("distractor counts must be >= 0")


@dataclass
class SynthConfig:
    """Configuration for one generated task dataset."""

    num_demos_train: int = 5
    num_demos_test: int = 5
    frames_per_demo: tuple[int, int] = (30, 60)
    image_size: tuple[int, int] = (64, 64)
    task_rule: str = "reach_target"
    shift_spec: ShiftSpec = field(default_factory=ShiftSpec)
    success_tail: float = 0.2
    noise_std: float = 2.0
    seed: int = 0
    task_id: str = ""

    def validate(self):
        if self.num_demos_train < 1 or self.num_demos_test < 0:
            raise ValidationError("need at least 1 train demo and >= 0 test demos")
        lo, hi = self.frames_per_demo
        if lo < 2 or hi < lo:
            raise ValidationError(
                f"frames_per_demo must satisfy 2 <= min <= max, got {self.frames_per_demo}"
            )
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValidationError(f"image_size must be at least 32x32, got {self.image_size}")
        if self.task_rule not in TASK_RULES:
            raise ValidationError(
                f"unknown task_rule {self.task_rule!r}; valid rules: {', '.join(TASK_RULES)}"
            )
        if not 0.0 <= self.success_tail <= 1.0:
            raise ValidationError(f"success_tail must be in [0, 1], got {self.success_tail}")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        self.shift_spec.validate()

    @property
    def resolved_task_id(self) -> str:
        return self.task_id or f"synth_{self.task_rule}"


def _rule_geometry(rule: str, h: int, w: int) -> tuple[int, int, int]:
    """Return (effector_size, goal_size, tolerance) in pixels for a canvas h x w."""
    base = min(h, w)
    if rule == "reach_target":
        es, gs = base // 8, base // 3
        tol = (gs - es) // 2  # effector fully inside the goal square
    elif rule == "stack_blocks":
        es, gs = base // 6, base // 6
        tol = 2  # moving block parked on the stack anchor
    elif rule == "cover_region":
        es, gs = base // 3, base // 8
        tol = (es - gs) // 2  # goal fully covered by the effector
    else:
        raise ValidationError(f"unknown task_rule {rule!r}")
    if tol < 2:
        raise ValidationError(f"canvas too small for rule {rule!r}")
    return es, gs, tol


def _draw_square(canvas: np.ndarray, center: tuple[int, int], size: int, color):
    y, x = center
    half = size // 2
    y0, y1 = max(y - half, 0), min(y - half + size, canvas.shape[0])
    x0, x1 = max(x - half, 0), min(x - half + size, canvas.shape[1])
    canvas[y0:y1, x0:x1] = color


def _square_box(center: tuple[int, int], size: int) -> tuple[int, int, int, int]:
    y, x = center
    half = size // 2
    return (y - half, x - half, y - half + size, x - half + size)


def _distractor_color(bg_color: np.ndarray, k: int) -> np.ndarray:
    # Palette-correlated variants: darker/lighter versions of the background.
    shift = (-1) ** k * (40 + 15 * k)
    return np.clip(bg_color.astype(int) + shift, 0, 255).astype(np.uint8)


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return int(max(abs(a[0] - b[0]), abs(a[1] - b[1])))


def oracle_predict(frame: Frame, task_rule: str) -> int:
    """Analytic success predicate from the geometry metadata attached at render time."""
    if frame.meta is None or "effector_center" not in frame.meta:
        raise ValidationError(
            "frame carries no generator geometry metadata; oracle_predict only "
            "applies to frames produced by synth.generate"
        )
    meta = frame.meta
    if meta["rule"] != task_rule:
        raise ValidationError(
            f"frame was generated under rule {meta['rule']!r}, not {task_rule!r}"
        )
    d = chebyshev(tuple(meta["effector_center"]), tuple(meta["anchor"]))
    return int(d <= meta["tolerance"])


def _plan_positions(
    rng: np.random.Generator,
    h: int,
    w: int,
    es: int,
    anchor: tuple[int, int],
    tol: int,
    j: int,
    onset: int,
) -> list[tuple[int, int]]:
    """Approach positions that first satisfy the predicate exactly at ``onset``.

    Before the onset the effector closes in linearly but stays a >= 2 px margin
    outside the tolerance box; at the onset it snaps to the anchor and parks
    there with small jitter that keeps the predicate true.
    """
    half = es // 2
    lo_y, hi_y = half, h - (es - half)
    lo_x, hi_x = half, w - (es - half)
    outside_margin = 2
    r_min = tol + outside_margin

    # Start position: comfortably away from the anchor but fully on canvas.
    for _ in range(100):
        start = (int(rng.integers(lo_y, hi_y)), int(rng.integers(lo_x, hi_x)))
        if chebyshev(start, anchor) >= min(r_min + 8, min(h, w) // 2):
            break
    r0 = chebyshev(start, anchor)

    positions: list[tuple[int, int]] = []
    denom = max(onset - 1, 1)
    for t in range(j):
        if t < onset:
            # Linear interpolation from start toward the tolerance-box margin.
            frac = t / denom
            ry = start[0] + (anchor[0] - start[0]) * frac
            rx = start[1] + (anchor[1] - start[1]) * frac
            # Rescale so the Chebyshev distance never drops below r_min.
            d = max(abs(ry - anchor[0]), abs(rx - anchor[1]))
            if d < r_min and d > 0:
                scale = r_min / d
                ry = anchor[0] + (ry - anchor[0]) * scale
                rx = anchor[1] + (rx - anchor[1]) * scale
            elif d == 0:
                ry, rx = anchor[0] + r_min, anchor[1]
            pos = (int(round(ry)), int(round(rx)))
        else:
            jitter = max(tol - 2, 0) // 2
            pos = (
                anchor[0] + int(rng.integers(-jitter, jitter + 1)),
                anchor[1] + int(rng.integers(-jitter, jitter + 1)),
            )
        pos = (min(max(pos[0], lo_y), hi_y - 1), min(max(pos[1], lo_x), hi_x - 1))
        positions.append(pos)

    # Rounding near the margin must not flip the predicate early.
    for t, pos in enumerate(positions):
        d = chebyshev(pos, anchor)
        if t < onset and d <= tol:
            ry, rx = pos
            if abs(ry - anchor[0]) >= abs(rx - anchor[1]):
                ry = anchor[0] + np.sign(ry - anchor[0] or 1) * r_min
            else:
                rx = anchor[1] + np.sign(rx - anchor[1] or 1) * r_min
            positions[t] = (int(ry), int(rx))
    assert r0 > tol, "start position must lie outside the tolerance box"
    return positions


def _render_demo(
    rng: np.random.Generator,
    config: SynthConfig,
    domain: str,
    demo_id: str,
) -> Demonstration:
    h, w = config.image_size
    rule = config.task_rule
    es, gs, tol = _rule_geometry(rule, h, w)
    spec = config.shift_spec
    if domain == SOURCE:
        palette = [np.array(c, dtype=np.uint8) for c in spec.background_palette_source]
        n_distractors = spec.distractor_count_source
    else:
        palette = [np.array(c, dtype=np.uint8) for c in spec.background_palette_target]
        n_distractors = spec.distractor_count_target

    j = int(rng.integers(config.frames_per_demo[0], config.frames_per_demo[1] + 1))
    onset = int(round(j * (1.0 - config.success_tail)))
    onset = min(max(onset, 0), j)

    bg_color = palette[int(rng.integers(len(palette)))]

    # Goal anchor placed away from the border so the park box stays on canvas.
    margin = max(es, gs) // 2 + tol + 2
    gy = int(rng.integers(margin, h - margin))
    gx = int(rng.integers(margin, w - margin))
    if rule == "stack_blocks":
        # Base block sits below the stack anchor.
        base_center = (gy + gs, gx)
        anchor = (gy, gx)
    else:
        base_center = None
        anchor = (gy, gx)

    # Static distractors, palette-correlated, kept clear of the goal region.
    distractors = []
    for k in range(n_distractors):
        color = _distractor_color(bg_color, k)
        size = max(3, es // 2 + k)
        for _ in range(50):
            dy = int(rng.integers(size, h - size))
            dx = int(rng.integers(size, w - size))
            if chebyshev((dy, dx), anchor) > tol + gs + size:
                break
        distractors.append(((dy, dx), size, color))

    positions = _plan_positions(rng, h, w, es, anchor, tol, j, onset)

    frames = []
    for t in range(j):
        canvas = np.empty((h, w, 3), dtype=np.uint8)
        canvas[:] = bg_color
        for (dc, size, color) in distractors:
            _draw_square(canvas, dc, size, color)
        if rule == "stack_blocks":
            _draw_square(canvas, base_center, gs, _GOAL_COLORS[rule])
        else:
            _draw_square(canvas, anchor, gs, _GOAL_COLORS[rule])
        _draw_square(canvas, positions[t], es, _EFFECTOR_COLORS[rule])
        if config.noise_std > 0:
            noise = rng.normal(0.0, config.noise_std, size=canvas.shape)
            canvas = np.clip(canvas.astype(np.float64) + noise, 0, 255).astype(np.uint8)
        meta = {
            "rule": rule,
            "effector_center": positions[t],
            "anchor": anchor,
            "tolerance": tol,
            "effector_box": _square_box(positions[t], es),
            "goal_box": _square_box(anchor, gs),
        }
        frames.append(Frame(pixels=canvas, step_index=t, meta=meta))

    # Labels re-derived from the rendered geometry; must match the plan.
    oracle_labels = np.array([oracle_predict(f, rule) for f in frames])
    first_true = int(np.argmax(oracle_labels)) if oracle_labels.any() else j
    if first_true != onset or not np.array_equal(np.sort(oracle_labels), oracle_labels):
        raise AssertionError(
            f"generator bug: oracle onset {first_true} != planned {onset} in {demo_id}"
        )
    return label_frames(
        frames, onset, task_id=config.resolved_task_id, demo_id=demo_id, domain_tag=domain
    )


def generate(config: SynthConfig) -> TaskDataset:
    """Generate a TaskDataset of synthetic demonstrations, deterministic per seed."""
    config.validate()
    train, test = [], []
    for i in range(config.num_demos_train):
        rng = np.random.default_rng([config.seed, 0, i])
        train.append(_render_demo(rng, config, SOURCE, f"train_{i:03d}"))
    for i in range(config.num_demos_test):
        rng = np.random.default_rng([config.seed, 1, i])
        test.append(_render_demo(rng, config, TARGET, f"test_{i:03d}"))
    metadata = {
        "generator": "synth",
        "task_rule": config.task_rule,
        "seed": config.seed,
        "shift_enabled": config.shift_spec.enabled,
        "sampling_rate_hz": 10.0,
    }
    return TaskDataset(
        task_id=config.resolved_task_id,
        train_demos=train,
        test_demos=test,
        metadata=metadata,
    )
