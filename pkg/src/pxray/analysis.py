"""Relevance-ratio analyses over policy rollouts, plus heatmap and CSV writers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attribution import METHODS, AttributionResult, attribute
from .env import Scene, env_step, observe
from .kinematics import importance_factors
from .nn import PolicyNetwork, network_forward

log = logging.getLogger(__name__)

GROUPS = ("image", "joint_pos", "joint_vel", "ee_pos", "ee_vel")
CSV_HEADER = "t,method,alpha_mode,image,joint_pos,joint_vel,ee_pos,ee_vel,total,dropped"


def _ratios(totals: Dict[str, float]) -> Dict[str, float]:
    vals = {g: float(totals.get(g, 0.0)) for g in GROUPS}
    denom = sum(vals.values())
    if denom == 0:
        return {g: 0.0 for g in GROUPS}
    return {g: v / denom for g, v in vals.items()}


def group_ratios(result: AttributionResult, absolute: bool = False) -> Dict[str, float]:
    """Share of each input group in the summed group relevance.

    Signed group sums by default; ``absolute=True`` uses sums of magnitudes.
    """
    return _ratios(result.group_totals_abs if absolute else result.group_totals)


@dataclass
class StepRecord:
    t: int
    group_totals: Dict[str, float]
    ratios: Dict[str, float]
    ratios_abs: Dict[str, float]
    total: float
    dropped: float
    output_total: float
    target: tuple


@dataclass
class RelevanceTimeSeries:
    method: str
    alpha_mode: str
    steps: List[StepRecord] = field(default_factory=list)
    change_step: Optional[int] = None
    reached: bool = False

    def __len__(self):
        return len(self.steps)

    def ratio_matrix(self, absolute: bool = False) -> np.ndarray:
        key = "ratios_abs" if absolute else "ratios"
        return np.array([[getattr(s, key)[g] for g in GROUPS] for s in self.steps]).reshape(-1, len(GROUPS))


def static_summary(series: RelevanceTimeSeries, absolute: bool = False) -> Dict[str, tuple]:
    """Population mean and standard deviation of each group ratio over time."""
    m = series.ratio_matrix(absolute)
    if m.shape[0] == 0:
        return {g: (float("nan"), float("nan")) for g in GROUPS}
    return {g: (float(m[:, k].mean()), float(m[:, k].std())) for k, g in enumerate(GROUPS)}


def _policy_torques(net, obs):
    return network_forward(net, obs.image, obs.config)[0]


def _run(net: PolicyNetwork, scene: Scene, alpha_mode: str, methods: Sequence[str], steps: int,
         change_step: Optional[int] = None, new_target=None, freeze_alpha: bool = False,
         on_step: Optional[Callable] = None) -> Dict[str, RelevanceTimeSeries]:
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    out = {m: RelevanceTimeSeries(m, alpha_mode, change_step=change_step) for m in methods}
    alpha = None
    hit = False
    for t in range(steps):
        if change_step is not None and t == change_step and new_target is not None:
            scene = scene.with_target(new_target)
        obs = observe(scene)
        if alpha is None or not freeze_alpha:
            alpha = importance_factors(scene.model, scene.state, alpha_mode)
        for m in methods:
            res = attribute(net, obs.image, obs.config, alpha, m)
            out[m].steps.append(StepRecord(
                t=t, group_totals=dict(res.group_totals), ratios=group_ratios(res),
                ratios_abs=group_ratios(res, absolute=True), total=res.total, dropped=res.dropped,
                output_total=res.output_total, target=scene.target))
            if on_step is not None:
                on_step(t, m, res, obs)
        scene, _, r = env_step(scene, _policy_torques(net, obs))
        hit = hit or r
    for s in out.values():
        s.reached = hit
    return out


def run_trajectory_analysis(net: PolicyNetwork, scene: Scene, alpha_mode: str = "kinematic",
                            methods: Sequence[str] = ("dtd",), steps: int = 50,
                            freeze_alpha: bool = False, on_step=None) -> Dict[str, RelevanceTimeSeries]:
    """Roll the policy out from ``scene`` and attribute every step with each method."""
    return _run(net, scene, alpha_mode, methods, steps, freeze_alpha=freeze_alpha, on_step=on_step)


def random_between_targets(targets, rng) -> tuple:
    """A point on the segment between two neighbouring training targets."""
    pts = np.asarray(targets, dtype=np.float64)
    order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]))
    k = int(rng.integers(len(order)))
    a, b = pts[order[k]], pts[order[(k + 1) % len(order)]]
    u = rng.uniform(0.25, 0.75)
    return tuple((1 - u) * a + u * b)


def target_change_experiment(net: PolicyNetwork, scene: Scene, change_step: int, new_target,
                             alpha_mode: str = "kinematic", methods: Sequence[str] = ("dtd",),
                             steps: int = 50, on_step=None) -> Dict[str, RelevanceTimeSeries]:
    """Like :func:`run_trajectory_analysis` but the target moves at ``change_step``.

    ``new_target`` is a point or a callable ``scene -> point``.
    """
    if callable(new_target):
        new_target = new_target(scene)
    return _run(net, scene, alpha_mode, methods, steps, change_step=change_step,
                new_target=tuple(new_target), on_step=on_step)


def diagnostics(series: RelevanceTimeSeries) -> Dict[str, object]:
    """Qualitative checks reported for human review; never used as pass/fail."""
    m = series.ratio_matrix()
    out: Dict[str, object] = {"method": series.method, "steps": len(series)}
    if len(series) == 0:
        return out
    img = m[:, 0]
    out["image_ratio_t0"] = float(img[0])
    out["image_ratio_mean"] = float(img.mean())
    out["initial_image_high"] = bool(img[0] > img.mean())
    k = series.change_step
    if k is not None and 0 < k < len(series):
        jumps = np.abs(np.diff(m, axis=0)).sum(axis=1)
        jump = float(jumps[k - 1])
        typical = float(np.median(np.delete(jumps, k - 1))) if jumps.size > 1 else 0.0
        pos = m[:, 1] + m[:, 3]
        out.update({"change_step": k, "jump_at_change": jump, "typical_jump": typical,
                    "discontinuity": bool(jump > typical),
                    "position_ratio_drops": bool(pos[k] < pos[k - 1])})
    return out


# -- writers -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def series_rows(series: RelevanceTimeSeries) -> List[str]:
    rows = []
    for s in series.steps:
        vals = [_fmt(s.ratios[g]) for g in GROUPS]
        rows.append(",".join([str(s.t), series.method, series.alpha_mode, *vals, _fmt(s.total), _fmt(s.dropped)]))
    return rows


def write_series_csv(path, series_by_method: Dict[str, RelevanceTimeSeries],
                     change_step: Optional[int] = None) -> None:
    """One row per (t, method), timesteps outermost."""
    lines = []
    if change_step is not None:
        lines.append(f"# change_step={change_step}")
    lines.append(CSV_HEADER)
    per = {m: series_rows(s) for m, s in series_by_method.items()}
    n = max((len(r) for r in per.values()), default=0)
    for t in range(n):
        for m in series_by_method:
            if t < len(per[m]):
                lines.append(per[m][t])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_series_csv(path):
    """Parse a series CSV into ``(change_step, rows)``; rows are dicts keyed by header."""
    change = None
    rows = []
    header = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            if line.startswith("# change_step="):
                change = int(line.split("=", 1)[1])
            continue
        if header is None:
            header = line.split(",")
            continue
        vals = line.split(",")
        row = dict(zip(header, vals))
        for k in header:
            if k == "t":
                row[k] = int(row[k])
            elif k not in ("method", "alpha_mode"):
                row[k] = float(row[k])
        rows.append(row)
    if header != CSV_HEADER.split(","):
        raise ValueError(f"unexpected CSV header {header}")
    return change, rows


def _scale_255(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros(a.shape, dtype=int)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(int)


def write_pgm(path, values: np.ndarray) -> None:
    """Plain (P2) greyscale image, min mapped to 0 and max to 255."""
    v = _scale_255(np.atleast_2d(np.asarray(values, dtype=np.float64)))
    h, w = v.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(x) for x in row) for row in v]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:4 + w * h]])
    if data.size != w * h or maxval <= 0:
        raise ValueError("truncated PGM file")
    return data.reshape(h, w)


def feature_names(groups: Dict[str, tuple]) -> List[str]:
    names = [None] * max(hi for _, hi in groups.values())
    for g, (lo, hi) in groups.items():
        for k in range(lo, hi):
            names[k] = f"{g}[{k - lo}]"
    return names


def emit_heatmap(result: AttributionResult, which: str, path) -> None:
    """Write the image heatmap, or the configuration heatmap plus a CSV next to it."""
    path = Path(path)
    if which == "image":
        write_pgm(path, result.image_relevance.sum(axis=-1))
    elif which == "config":
        write_pgm(path, result.config_relevance[None, :])
        names = feature_names(result._groups) if result._groups else \
            [f"config[{k}]" for k in range(result.config_relevance.size)]
        lines = ["feature_name,relevance"] + [f"{n},{_fmt(v)}" for n, v in zip(names, result.config_relevance)]
        path.with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown heatmap kind {which!r}; expected 'image' or 'config'")
