"""End-to-end Siamese tracking: model assembly, per-frame inference with the
documented fallback chain, the training loop with step-decayed Adam, OPE
evaluation over tracklet sets, and the sampling-strategy comparison.

Reports
-------
``TrainReport`` serializes one JSON record per line (epoch, mean losses,
validation metrics, checkpoint path).  ``EvalReport`` and ``CompareReport``
serialize tab-delimited tables; see ``to_tsv`` on each.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .backbone import Backbone, BackboneConfig
from .data import (CropConfig, Tracklet, build_search_area, build_template,
                   jitter_box)
from .errors import ConfigError, DivergenceError, EmptyRegionError, InvalidArgumentError
from .geometry import (BBox3D, PointCloud, TrackResult, box_in_frame,
                       center_distance, iou3d, ope_metrics)
from .highlight import ObjectHighlighter
from .localization import (BevConfig, LocalizationHead, LossWeights, center_loss,
                           decode_box, loc_loss, make_center_map, offset_loss,
                           scalar_losses, total_loss, voxelize)
from .nn import Adam, Module, OptimConfig, save_checkpoint
from .sampling import (CandidateAggregator, baseline_sample, focal_loss,
                       make_labels, select_candidates)

STRATEGIES = ("ops", "random", "fps")


@dataclass(frozen=True)
class SamplingConfig:
    m2: int = 128
    epsilon: float = 0.1
    focal_alpha: float = 2.0
    radius: float = 0.7
    max_samples: int = 8
    feature_dim: int = 128

    def __post_init__(self):
        if self.m2 < 1 or self.max_samples < 1:
            raise ConfigError("sampling counts must be positive")
        if self.epsilon < 0:
            raise ConfigError("label smoothing epsilon must be >= 0")


@dataclass(frozen=True)
class TrackerConfig:
    crop: CropConfig = field(default_factory=CropConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 40
    batch_size: int = 32
    val_every: int = 1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        m1 = self.backbone.search_counts[-1]
        n1 = self.backbone.template_counts[-1]
        if m1 % 2 != 0:
            problems.append(f"backbone.search_counts[-1]={m1} must be even")
        if self.sampling.m2 > m1:
            problems.append(f"sampling.m2={self.sampling.m2} exceeds seed count {m1}")
        if self.sampling.feature_dim != self.bev.channels:
            problems.append(
                f"sampling.feature_dim={self.sampling.feature_dim} must equal "
                f"bev.channels={self.bev.channels}")
        if self.crop.search_size < self.backbone.search_counts[0]:
            problems.append("crop.search_size smaller than first search count")
        if self.crop.template_size < self.backbone.template_counts[0]:
            problems.append("crop.template_size smaller than first template count")
        for counts, name in ((self.backbone.search_counts, "search_counts"),
                             (self.backbone.template_counts, "template_counts")):
            if any(b > a for a, b in zip(counts, counts[1:])):
                problems.append(f"backbone.{name} must be non-increasing: {counts}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be >= 1")
        if n1 < 1:
            problems.append("template branch must keep at least one seed")
        if problems:
            raise ConfigError("invalid tracker config: " + "; ".join(problems))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _to_plain(value):
    if is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(cfg: TrackerConfig) -> dict:
    return _to_plain(cfg)


def _coerce_field(ftype, value, path):
    if is_dataclass(ftype):
        return config_from_dict(value, ftype, path)
    if isinstance(value, list):
        return tuple(_coerce_field(None, v, path) for v in value)
    return value


def config_from_dict(data: dict, dc_type=TrackerConfig, path: str = "") -> "TrackerConfig":
    """Build a config from plain dicts, rejecting unknown keys by name."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}")
    known = {f.name: f for f in fields(dc_type)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config keys at {where}: {unknown}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        sub_type = f.type if isinstance(f.type, type) else None
        if sub_type is None:
            # dataclass fields annotated via from __future__ annotations
            sub_type = _FIELD_TYPES.get((dc_type, name))
        kwargs[name] = _coerce_field(sub_type, data[name], sub_path)
    try:
        return dc_type(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config at {path or 'top level'}: {exc}") from exc


_FIELD_TYPES = {
    (TrackerConfig, "crop"): CropConfig,
    (TrackerConfig, "backbone"): BackboneConfig,
    (TrackerConfig, "sampling"): SamplingConfig,
    (TrackerConfig, "bev"): BevConfig,
    (TrackerConfig, "weights"): LossWeights,
    (TrackerConfig, "optim"): OptimConfig,
}


def config_hash(cfg: TrackerConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class TrackNet(Module):
    """Backbone + highlighter + candidate aggregation + BEV localization."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        m1 = cfg.backbone.search_counts[-1]
        d1 = cfg.backbone.feature_dim
        self.backbone = Backbone(cfg.backbone, rng, dtype)
        self.highlighter = ObjectHighlighter(m1, d1, rng, dtype)
        self.aggregator = CandidateAggregator(
            d1, cfg.sampling.feature_dim, rng, dtype,
            radius=cfg.sampling.radius, max_samples=cfg.sampling.max_samples)
        self.localizer = LocalizationHead(cfg.bev, rng, dtype)

    def highlight_search(self, template: PointCloud, search: PointCloud):
        q, r = self.backbone(template, search)
        highlighted, scores = self.highlighter(q, r)
        return highlighted, scores

    def _select(self, highlighted, scores, sampler: str, rng):
        if sampler == "ops":
            return select_candidates(scores, self.cfg.sampling.m2)
        return baseline_sample(sampler, highlighted, self.cfg.sampling.m2, rng)

    def localize(self, highlighted, kept):
        seeds = self.aggregator(highlighted, kept)
        grid = voxelize(seeds, self.cfg.bev)
        return self.localizer(grid), grid

    def forward_train(self, template: PointCloud, search: PointCloud,
                      gt_canonical: BBox3D):
        """Losses for one (template, search, GT) sample in the search frame."""
        scfg = self.cfg.sampling
        highlighted, scores = self.highlight_search(template, search)
        labels = make_labels(highlighted.coords, gt_canonical, scfg.epsilon)
        cls = focal_loss(scores, labels, scfg.focal_alpha)
        kept = select_candidates(scores, scfg.m2)
        maps, grid = self.localize(highlighted, kept)
        gt_map = make_center_map(gt_canonical, grid)
        p_c = grid.cell_of(gt_canonical.center[0], gt_canonical.center[1])
        p_tilde = grid.continuous_cell(gt_canonical.center[0], gt_canonical.center[1])
        center = center_loss(maps.center[:, :, 0], gt_map)
        loc = loc_loss(maps.center_logits, p_c)
        off = offset_loss(maps.offset, p_c, p_tilde, self.cfg.bev.offset_window,
                          self.cfg.bev.offset_natural_targets)
        z, theta = scalar_losses(maps.z, maps.theta, gt_canonical.center[2],
                                 gt_canonical.yaw, p_c, self.cfg.bev.wrap_theta)
        total, breakdown = total_loss(cls, center, loc, off, z, theta,
                                      self.cfg.weights)
        diag = {"labels": labels, "kept": kept, "scores": scores.data.copy()}
        return total, breakdown, diag


def track_frame(model: TrackNet, template: PointCloud, search: PointCloud,
                prev_box: BBox3D, sampler: str = "ops",
                rng: np.random.Generator | None = None):
    """One localization step.  ``search`` must be canonicalized to
    ``prev_box``; the decoded box is returned in world coordinates with the
    size inherited from ``prev_box``.  An empty BEV grid falls back to
    ``prev_box`` with a flagged diagnostic."""
    rng = rng or np.random.default_rng(0)
    model.eval()
    with no_grad():
        highlighted, scores = model.highlight_search(template, search)
        kept = model._select(highlighted, scores, sampler, rng)
        diag = {"scores": scores.data.copy(), "kept": kept,
                "coords": highlighted.coords.copy(), "fallback": False}
        try:
            maps, grid = model.localize(highlighted, kept)
        except EmptyRegionError:
            diag["fallback"] = True
            return prev_box, diag
        box = decode_box(maps, grid, prev_box.size, frame=prev_box)
        diag["maps"] = maps
    return box, diag


def run_tracklet(model: TrackNet, tracklet: Tracklet, cfg: TrackerConfig,
                 sampler: str = "ops", oracle: str | None = None,
                 seed: int = 0, collect_diags: bool = False):
    """One-pass evaluation protocol: frame 0 is initialized from GT (perfect
    by construction); later frames crop the template and search area around
    the previous *prediction*.  Empty crops fall back to the previous box, so
    a tracklet of all-empty search regions yields the frame-0 GT box
    throughout."""
    ss = np.random.SeedSequence([seed, 1])
    data_rng, sampler_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    gt0 = tracklet.gt(0)
    boxes = [BBox3D(gt0.center.copy(), gt0.size.copy(), gt0.yaw)]
    ious = [1.0]
    dists = [0.0]
    diags = []
    prev_box = boxes[0]
    template = None
    for t in range(1, len(tracklet)):
        try:
            template = build_template(tracklet, t, prev_box, cfg.crop, data_rng)
        except EmptyRegionError:
            pass  # keep the previous template
        box = prev_box
        diag = {"fallback": True}
        if template is not None:
            try:
                search = build_search_area(tracklet.cloud(t), prev_box, cfg.crop,
                                           data_rng)
            except EmptyRegionError:
                search = None
            if search is not None:
                box, diag = track_frame(model, template, search, prev_box,
                                        sampler, sampler_rng)
        if oracle == "gt":
            box = tracklet.gt(t)
        gt = tracklet.gt(t)
        boxes.append(box)
        ious.append(iou3d(box, gt))
        dists.append(center_distance(box, gt))
        if collect_diags:
            diags.append(diag)
        prev_box = box
    result = TrackResult(boxes, np.array(ious), np.array(dists))
    return (result, diags) if collect_diags else result


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""
    best_checkpoint: str = ""
    last_checkpoint: str = ""

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        records = [json.loads(line) for line in Path(path).read_text().splitlines()
                   if line.strip()]
        return cls(records)


def _epoch_batches(tracklets, cfg: TrackerConfig, rng):
    """One pass over every (tracklet, tracked-frame) pair, shuffled and cut
    into batches of ``batch_size`` (short remainders are kept)."""
    pool = [(i, t) for i, tr in enumerate(tracklets) for t in range(1, len(tr))]
    order = rng.permutation(len(pool))
    for start in range(0, len(pool), cfg.batch_size):
        picks = [pool[j] for j in order[start:start + cfg.batch_size]]
        samples = []
        for i, t in picks:
            tracklet = tracklets[i]
            prev_box = jitter_box(tracklet.gt(t - 1), cfg.crop, rng)
            search_box = jitter_box(tracklet.gt(t), cfg.crop, rng)
            try:
                template = build_template(tracklet, t, prev_box, cfg.crop, rng)
                search = build_search_area(tracklet.cloud(t), search_box,
                                           cfg.crop, rng)
            except EmptyRegionError:
                continue  # skip degenerate frames, keep the batch moving
            samples.append((template, search,
                            box_in_frame(tracklet.gt(t), search_box)))
        if samples:
            yield samples


def split_optim_state(state: dict) -> tuple[dict, dict]:
    """Separate model entries from the optimizer entries of a checkpoint."""
    model_state = {k: v for k, v in state.items() if not k.startswith("optim.")}
    optim_state = {k: v for k, v in state.items() if k.startswith("optim.")}
    return model_state, optim_state


def train(model: TrackNet, train_tracklets, val_tracklets, cfg: TrackerConfig,
          out_dir=None, start_epoch: int = 1, optim_state: dict | None = None,
          log=None) -> TrainReport:
    """Optimize the full loss with Adam and the step-decay schedule.

    Each epoch is one pass over every (tracklet, tracked-frame) pair with
    fresh jitter, in shuffled batches of ``batch_size``; gradients are
    averaged per batch.  A checkpoint is written every epoch (``last.ckpt``,
    plus ``best.ckpt`` whenever validation success improves) carrying the
    model state and the optimizer moments under the ``optim.`` namespace, so
    a resumed run reproduces the following epoch within float32 round-off.
    A non-finite loss or gradient aborts training, leaving the last good
    checkpoint on disk.
    """
    if not train_tracklets:
        raise InvalidArgumentError("training needs a nonempty tracklet set")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    adam = Adam(model.named_parameters(), cfg.optim)
    if optim_state:
        adam.load_state_entries(optim_state)
    report = TrainReport()
    cfg_hash = config_hash(cfg)
    best_success = -1.0
    for epoch in range(start_epoch, cfg.epochs + 1):
        adam.set_epoch(epoch)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        model.train()
        sums = None
        count = 0
        try:
            for samples in _epoch_batches(train_tracklets, cfg, rng):
                adam.zero_grad()
                for template, search, gt_canon in samples:
                    total, breakdown, _ = model.forward_train(template, search,
                                                              gt_canon)
                    total.backward(seed=1.0 / len(samples))
                    vals = breakdown.as_dict()
                    sums = (vals if sums is None
                            else {k: sums[k] + vals[k] for k in sums})
                    count += 1
                adam.step()
        except DivergenceError as exc:
            report.aborted = True
            report.abort_reason = str(exc)
            break
        if count == 0:
            raise InvalidArgumentError("no usable training samples drawn this epoch")
        means = {k: v / count for k, v in sums.items()}
        record = {"epoch": epoch, "lr": adam.effective_lr(),
                  **{f"loss_{k}": v for k, v in means.items()},
                  "val_success": None, "val_precision": None, "checkpoint": None}
        if val_tracklets and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            eval_report = evaluate(model, val_tracklets, cfg, seed=cfg.seed)
            record["val_success"] = eval_report.overall[1]
            record["val_precision"] = eval_report.overall[2]
        if out_dir is not None:
            full_state = {**model.state_dict(), **adam.state_entries()}
            last = out_dir / "last.ckpt"
            save_checkpoint(last, full_state, cfg_hash, epoch)
            record["checkpoint"] = str(last)
            report.last_checkpoint = str(last)
            if record["val_success"] is not None and record["val_success"] > best_success:
                best_success = record["val_success"]
                best = out_dir / "best.ckpt"
                save_checkpoint(best, full_state, cfg_hash, epoch)
                report.best_checkpoint = str(best)
        report.records.append(record)
        if log:
            log(record)
    if out_dir is not None and report.records:
        report.to_jsonl(out_dir / "train_report.jsonl")
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list  # (category, frames, success, precision), frame-weighted
    overall: tuple  # (frames, success, precision)

    def to_tsv(self, path=None) -> str:
        lines = ["category\tframes\tsuccess\tprecision"]
        for cat, frames, succ, prec in self.rows:
            lines.append(f"{cat}\t{frames}\t{succ:.4f}\t{prec:.4f}")
        lines.append(f"overall\t{self.overall[0]}\t{self.overall[1]:.4f}"
                     f"\t{self.overall[2]:.4f}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def aggregate_metrics(entries) -> EvalReport:
    """Frame-weighted means from (category, frames, success, precision) rows,
    per category and overall, matching the frame-count weighting of tracking
    benchmarks."""
    if not entries:
        raise InvalidArgumentError("no evaluation entries to aggregate")
    entries = sorted(entries)  # fixed summation order: permutation invariant
    per_cat: dict[str, list] = {}
    for cat, frames, succ, prec in entries:
        per_cat.setdefault(cat, []).append((frames, succ, prec))
    rows = []
    for cat in sorted(per_cat):
        cat_entries = per_cat[cat]
        frames = sum(e[0] for e in cat_entries)
        succ = sum(e[0] * e[1] for e in cat_entries) / frames
        prec = sum(e[0] * e[2] for e in cat_entries) / frames
        rows.append((cat, frames, succ, prec))
    frames = sum(e[1] for e in entries)
    overall = (frames,
               sum(e[1] * e[2] for e in entries) / frames,
               sum(e[1] * e[3] for e in entries) / frames)
    return EvalReport(rows, overall)


def evaluate(model: TrackNet, tracklets, cfg: TrackerConfig, sampler: str = "ops",
             oracle: str | None = None, seed: int = 0) -> EvalReport:
    """Frame-weighted OPE means per category and overall.  Each tracklet is
    evaluated with the same per-run seed, so the aggregate is invariant to
    tracklet order."""
    if not tracklets:
        raise InvalidArgumentError("evaluate needs at least one tracklet")
    entries = []
    for tracklet in tracklets:
        result = run_tracklet(model, tracklet, cfg, sampler=sampler,
                              oracle=oracle, seed=seed)
        succ, prec = ope_metrics(result)
        entries.append((tracklet.category, result.num_frames, succ, prec))
    return aggregate_metrics(entries)


# ---------------------------------------------------------------------------
# sampling-strategy comparison
# ---------------------------------------------------------------------------

@dataclass
class CompareReport:
    rows: list  # (strategy, scene, recall, kept_count)
    mean_recall: dict
    ope: dict  # strategy -> (success, precision)

    def to_tsv(self, path=None) -> str:
        lines = ["strategy\tscene\trecall\tkept"]
        for strategy, scene, recall, kept in self.rows:
            lines.append(f"{strategy}\t{scene}\t{recall:.4f}\t{kept}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def compare_sampling(model: TrackNet, tracklets, cfg: TrackerConfig,
                     strategies=STRATEGIES, seed: int = 0) -> CompareReport:
    """Recall after sampling m2 of the search seeds, per strategy and scene,
    plus end-to-end OPE with each sampler swapped into the tracker.

    Every strategy sees identical upstream inputs: the scores pass runs once
    per frame (GT-centered crops, no jitter) and only the kept-index rule
    differs.
    """
    model.eval()
    scfg = cfg.sampling
    sampler_rngs = {s: np.random.default_rng(np.random.SeedSequence([seed, 7, i]))
                    for i, s in enumerate(STRATEGIES)}
    rows = []
    recalls: dict[str, list] = {s: [] for s in strategies}
    for scene, tracklet in enumerate(tracklets):
        data_rng = np.random.default_rng(np.random.SeedSequence([seed, 3, scene]))
        per_scene: dict[str, list] = {s: [] for s in strategies}
        for t in range(1, len(tracklet)):
            prev_box = tracklet.gt(t - 1)
            search_box = tracklet.gt(t)
            try:
                template = build_template(tracklet, t, prev_box, cfg.crop, data_rng)
                search = build_search_area(tracklet.cloud(t), search_box, cfg.crop,
                                           data_rng)
            except EmptyRegionError:
                continue
            with no_grad():
                highlighted, scores = model.highlight_search(template, search)
            labels = make_labels(highlighted.coords,
                                 box_in_frame(tracklet.gt(t), search_box),
                                 scfg.epsilon)
            for strategy in strategies:
                if strategy == "ops":
                    kept = select_candidates(scores, scfg.m2)
                else:
                    kept = baseline_sample(strategy, highlighted, scfg.m2,
                                           sampler_rngs[strategy])
                from .sampling import recall_rate
                per_scene[strategy].append((recall_rate(kept, labels), kept.size))
        for strategy in strategies:
            if not per_scene[strategy]:
                continue
            vals = per_scene[strategy]
            mean_r = float(np.mean([v[0] for v in vals]))
            rows.append((strategy, scene, mean_r, vals[0][1]))
            recalls[strategy].append(mean_r)
    ope = {}
    for strategy in strategies:
        report = evaluate(model, tracklets, cfg, sampler=strategy, seed=seed)
        ope[strategy] = (report.overall[1], report.overall[2])
    mean_recall = {s: float(np.mean(v)) if v else float("nan")
                   for s, v in recalls.items()}
    return CompareReport(rows, mean_recall, ope)
