"""Dual-branch training loop: augmentation, schedules, checkpoints, metrics.

The saliency mask is applied to the raw image once, and each stochastic view
then transforms the original and object images with identical parameters, so
the pair stays pixel-aligned and the detached scene feature describes the
same scene the object was cut from.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import GcdSplit, Sample, quadrant_of
from .decouple import build_mask_provider, extract_object, mean_fill
from .evaluate import EvalReport, cluster_acc, feature_deviation, quadrant_report
from .losses import BranchLossParts, Hyperparams
from .model import BackboneConfig, DualBranchModel, ModelConfig, predict

CHECKPOINT_FORMAT = 1

CROP_SCALE_RANGE = (0.3, 1.0)
JITTER_RANGE = 0.4  # brightness/contrast/saturation factors in [0.6, 1.4]

METRIC_COLUMNS = (
    "epoch", "lr", "tau_t",
    "origin_un_nce", "origin_un_cls", "origin_sup_nce", "origin_sup_cls",
    "object_un_nce", "object_un_cls", "object_sup_nce", "object_sup_cls",
    "loss_total",
    "acc_all", "acc_base", "acc_novel",
    "acc_base_obj_base_scene", "acc_novel_obj_base_scene",
    "acc_base_obj_novel_scene", "acc_novel_obj_novel_scene",
    "mean_dev", "l1_dev",
)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN or infinity."""

    def __init__(self, breakdown: dict[str, float]):
        self.breakdown = breakdown
        terms = ", ".join(f"{k}={v:.4g}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss; term breakdown: {terms}")


@dataclass
class TrainConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    mask_source: str = "oracle"
    eval_every: int = 5
    out_dir: str | None = None
    manifest: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.mask_source not in ("oracle", "file", "heuristic"):
            raise ValueError(f"unknown mask_source {self.mask_source!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["backbone"]["input_size"] = list(self.model.backbone.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hp = Hyperparams(**d.pop("hp", {}))
        model_d = dict(d.pop("model", {}))
        backbone_d = dict(model_d.pop("backbone", {}))
        if "input_size" in backbone_d:
            backbone_d["input_size"] = tuple(backbone_d["input_size"])
        model = ModelConfig(backbone=BackboneConfig(**backbone_d), **model_d)
        return cls(hp=hp, model=model, **d)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def sample_view_params(rng: np.random.Generator, hw: tuple[int, int]) -> dict:
    """Draw one view's crop box, flip, and color-jitter factors."""
    h, w = hw
    scale = rng.uniform(*CROP_SCALE_RANGE)
    ch = max(1, int(round(math.sqrt(scale) * h)))
    cw = max(1, int(round(math.sqrt(scale) * w)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    lo, hi = 1.0 - JITTER_RANGE, 1.0 + JITTER_RANGE
    return {
        "crop": (top, left, ch, cw),
        "flip": bool(rng.random() < 0.5),
        "brightness": float(rng.uniform(lo, hi)),
        "contrast": float(rng.uniform(lo, hi)),
        "saturation": float(rng.uniform(lo, hi)),
    }


def apply_view_params(image: np.ndarray, params: dict,
                      out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Apply crop/resize, flip, and color jitter; output clipped to [0, 1]."""
    h, w = image.shape[:2]
    out_h, out_w = out_hw or (h, w)
    top, left, ch, cw = params["crop"]
    patch = image[top:top + ch, left:left + cw]
    t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    if (ch, cw) != (out_h, out_w):
        t = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    if params["flip"]:
        t = torch.flip(t, dims=[3])
    t = t * params["brightness"]
    mean_gray = (0.299 * t[:, 0] + 0.587 * t[:, 1] + 0.114 * t[:, 2]).mean()
    t = (t - mean_gray) * params["contrast"] + mean_gray
    gray = (0.299 * t[:, 0] + 0.587 * t[:, 1] + 0.114 * t[:, 2]).unsqueeze(1)
    t = gray + (t - gray) * params["saturation"]
    t = t.clamp(0.0, 1.0)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def augment(image: np.ndarray, rng: np.random.Generator,
            out_hw: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of one image."""
    p1 = sample_view_params(rng, image.shape[:2])
    p2 = sample_view_params(rng, image.shape[:2])
    return apply_view_params(image, p1, out_hw), apply_view_params(image, p2, out_hw)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def tau_t_schedule(epoch: int, start: float, end: float, warmup_epochs: int) -> float:
    """Linear teacher-temperature ramp, constant at `end` after the warmup."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if warmup_epochs == 0 or epoch >= warmup_epochs:
        return end
    return start + (end - start) * epoch / warmup_epochs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def object_image_for(sample: Sample, mask_provider) -> np.ndarray:
    """The sample's object image: masked-in pixels kept, scene filled with the mean."""
    mask = mask_provider(sample)
    mu = mean_fill(sample.image)
    return extract_object(sample.image, mask, mu).astype(np.float32)


def _to_batch(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


class Trainer:
    """Owns the model, the optimizer, and the seeded data order for one run."""

    def __init__(self, cfg: TrainConfig, split: GcdSplit, mask_provider=None):
        self.cfg = cfg
        self.split = split
        self.samples = split.all_samples()
        if len(self.samples) < cfg.batch_size:
            raise ValueError("dataset smaller than one batch")
        self.mask_provider = mask_provider or build_mask_provider(cfg.mask_source)
        torch.manual_seed(cfg.seed)
        self.model = DualBranchModel(cfg.model)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=cfg.lr,
            momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        )
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA46]))
        self.epoch = 0
        self.supcon_skipped_batches = 0
        self._needs_objects = cfg.model.branch_mode != "original_only"
        self._object_cache: dict[str, np.ndarray] = {}
        if self._needs_objects:
            for s in self.samples:
                self._object_cache[s.id] = object_image_for(s, self.mask_provider)

    # -- single optimizer update -------------------------------------------------

    def train_step(self, batch: list[Sample], epoch: int) -> dict[str, float]:
        """One update over a batch; returns the per-term loss breakdown."""
        cfg, hp = self.cfg, self.cfg.hp
        out_hw = cfg.model.backbone.input_size
        teacher_temp = tau_t_schedule(
            epoch, hp.teacher_temp_start, hp.teacher_temp_end, hp.teacher_warmup_epochs
        )
        x_views: list[list[np.ndarray]] = [[], []]
        o_views: list[list[np.ndarray]] = [[], []]
        for s in batch:
            obj = self._object_cache.get(s.id)
            for v in range(2):
                params = sample_view_params(self.rng, s.image.shape[:2])
                x_views[v].append(apply_view_params(s.image, params, out_hw))
                if obj is not None:
                    o_views[v].append(apply_view_params(obj, params, out_hw))
        labels = torch.tensor([s.object_label for s in batch], dtype=torch.long)
        labeled = torch.tensor([s.is_labeled for s in batch], dtype=torch.bool)

        self.model.train()
        outs = []
        for v in range(2):
            x_t = _to_batch(x_views[v])
            o_t = _to_batch(o_views[v]) if o_views[v] else x_t
            outs.append(self.model.forward_dual(x_t, o_t))

        mode = cfg.model.branch_mode
        branch_terms: dict[str, BranchLossParts] = {}
        branch_totals: dict[str, torch.Tensor] = {}
        for name, idx in (("origin", 0), ("object", 1)):
            if mode == "object_only" and name == "origin":
                continue
            if mode == "original_only" and name == "object":
                continue
            head1, head2 = outs[0][idx], outs[1][idx]
            parts = self._branch_parts(head1, head2, labels, labeled, teacher_temp)
            branch_terms[name] = parts
            branch_totals[name] = L.branch_loss(parts, hp.sup_weight)

        if mode == "dual":
            total = L.total_loss(branch_totals["origin"], branch_totals["object"],
                                 hp.origin_weight, hp.object_weight)
        else:
            total = next(iter(branch_totals.values()))

        breakdown = {"loss_total": float(total.detach())}
        for name in ("origin", "object"):
            parts = branch_terms.get(name)
            for term in ("un_nce", "un_cls", "sup_nce", "sup_cls"):
                val = getattr(parts, term) if parts else None
                breakdown[f"{name}_{term}"] = float(val.detach()) if val is not None else 0.0
        if not math.isfinite(breakdown["loss_total"]):
            raise NonFiniteLossError(breakdown)

        # Both branch weights at zero means no objective: leave parameters
        # untouched rather than letting weight decay drift them.
        if mode == "dual" and hp.origin_weight == 0.0 and hp.object_weight == 0.0:
            return breakdown
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        return breakdown

    def _branch_parts(self, head1, head2, labels, labeled, teacher_temp) -> BranchLossParts:
        hp = self.cfg.hp
        un_nce = L.info_nce_loss(head1.z, head2.z, hp.unsup_temp)
        student = torch.cat([head1.sims, head2.sims], dim=0)
        teacher = torch.cat([head2.sims, head1.sims], dim=0)
        un_cls = L.self_distill_loss(student, teacher, hp.student_temp, teacher_temp,
                                     hp.me_weight)
        n_lab = int(labeled.sum())
        if n_lab >= 2:
            z_lab = torch.cat([head1.z[labeled], head2.z[labeled]], dim=0)
            y_lab = torch.cat([labels[labeled], labels[labeled]], dim=0)
            sup_nce = L.sup_con_loss(z_lab, y_lab, hp.supcon_temp)
        else:
            self.supcon_skipped_batches += 1
            sup_nce = torch.zeros((), dtype=head1.z.dtype)
        if n_lab >= 1:
            logits_lab = torch.cat([head1.logits[labeled], head2.logits[labeled]], dim=0)
            y_lab = torch.cat([labels[labeled], labels[labeled]], dim=0)
            sup_cls = L.sup_cls_loss(logits_lab, y_lab)
        else:
            sup_cls = torch.zeros((), dtype=head1.z.dtype)
        return BranchLossParts(un_nce=un_nce, un_cls=un_cls, sup_nce=sup_nce, sup_cls=sup_cls)

    # -- evaluation hooks ----------------------------------------------------------

    def evaluate(self):
        """Cluster accuracy on the unlabeled set plus feature deviations."""
        unlabeled = self.split.unlabeled
        y_true = np.array([s.object_label for s in unlabeled])
        y_pred = predict(self.model, unlabeled, self.mask_provider,
                         batch_size=self.cfg.batch_size)
        report = cluster_acc(y_true, y_pred, self.split.base_classes,
                             n_classes=self.cfg.model.n_classes)
        if self.split.base_scenes is not None:
            quadrants = [
                quadrant_of(s, self.split) if s.scene_label is not None else None
                for s in unlabeled
            ]
            if any(q is not None for q in quadrants):
                accs, counts = quadrant_report(y_true, y_pred, quadrants, report.matching)
                report.quadrant_acc, report.quadrant_n = accs, counts
        return report, self.deviation_stats()

    def deviation_stats(self):
        """Backbone-feature deviations on un-augmented unlabeled images."""
        unlabeled = self.split.unlabeled
        self.model.eval()
        v_x_all, v_o_all = [], []
        with torch.no_grad():
            for start in range(0, len(unlabeled), self.cfg.batch_size):
                chunk = unlabeled[start:start + self.cfg.batch_size]
                xs = _to_batch([s.image for s in chunk])
                if self._needs_objects:
                    os_ = _to_batch([self._object_cache[s.id] for s in chunk])
                else:
                    os_ = xs
                v_x_all.append(self.model.backbone_forward(xs).numpy())
                v_o_all.append(self.model.backbone_forward(os_).numpy())
        return feature_deviation(np.concatenate(v_x_all), np.concatenate(v_o_all),
                                 step=self.epoch)

    # -- checkpointing ---------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        torch.save({
            "format_version": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "rng": {
                "torch": torch.get_rng_state(),
                "numpy": self.rng.bit_generator.state,
            },
        }, path)

    def restore_checkpoint(self, path: str | Path) -> None:
        state = load_checkpoint(path)
        stored = TrainConfig.from_dict(state["config"])
        if stored.model != self.cfg.model:
            raise ValueError("checkpoint model config does not match this run's config")
        self.model.load_state_dict(state["model_state"])
        self.optimizer.load_state_dict(state["optimizer_state"])
        self.epoch = state["epoch"]
        torch.set_rng_state(state["rng"]["torch"])
        self.rng.bit_generator.state = state["rng"]["numpy"]


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"unsupported checkpoint format {state.get('format_version')!r}"
        )
    return state


def model_from_checkpoint(path: str | Path) -> tuple[DualBranchModel, TrainConfig]:
    state = load_checkpoint(path)
    cfg = TrainConfig.from_dict(state["config"])
    model = DualBranchModel(cfg.model)
    model.load_state_dict(state["model_state"])
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train(cfg: TrainConfig, split: GcdSplit, mask_provider=None,
          resume_from: str | Path | None = None, log=print) -> dict:
    """Run the configured training; returns paths and final metrics.

    Writes metrics.csv (one row per evaluation), deviations.csv (epoch-0
    state plus one row per evaluation), per-evaluation EvalReport JSONs,
    and a final checkpoint into cfg.out_dir.
    """
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, split, mask_provider)
    if resume_from is not None:
        trainer.restore_checkpoint(resume_from)

    metrics_rows: list[dict] = []
    deviation_rows: list[dict] = []
    if trainer.epoch == 0:
        dev0 = trainer.deviation_stats()
        deviation_rows.append({"epoch": 0, "mean_dev": dev0.mean_dev, "l1_dev": dev0.l1_dev})

    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD47A]))
    n = len(trainer.samples)
    steps_per_epoch = n // cfg.batch_size
    last_report = None
    for epoch in range(trainer.epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        for group in trainer.optimizer.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(n)
        term_sums: dict[str, float] = {}
        for step in range(steps_per_epoch):
            batch = [trainer.samples[i] for i in perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
            breakdown = trainer.train_step(batch, epoch)
            for key, val in breakdown.items():
                term_sums[key] = term_sums.get(key, 0.0) + val
        trainer.epoch = epoch + 1

        if (epoch + 1) % cfg.eval_every == 0 or (epoch + 1) == cfg.epochs:
            report, dev = trainer.evaluate()
            last_report = report
            tau_t = tau_t_schedule(epoch, cfg.hp.teacher_temp_start,
                                   cfg.hp.teacher_temp_end, cfg.hp.teacher_warmup_epochs)
            row = {"epoch": epoch + 1, "lr": lr, "tau_t": tau_t}
            for key in METRIC_COLUMNS[3:12]:
                row[key] = term_sums.get(key, 0.0) / max(1, steps_per_epoch)
            row.update({
                "acc_all": report.acc_all,
                "acc_base": report.acc_base,
                "acc_novel": report.acc_novel,
            })
            for q_key, q in (
                ("acc_base_obj_base_scene", "base_obj_base_scene"),
                ("acc_novel_obj_base_scene", "novel_obj_base_scene"),
                ("acc_base_obj_novel_scene", "base_obj_novel_scene"),
                ("acc_novel_obj_novel_scene", "novel_obj_novel_scene"),
            ):
                acc = None
                if report.quadrant_acc:
                    for quad, val in report.quadrant_acc.items():
                        if quad.value == q:
                            acc = val
                row[q_key] = acc
            row["mean_dev"] = dev.mean_dev
            row["l1_dev"] = dev.l1_dev
            metrics_rows.append(row)
            deviation_rows.append({"epoch": epoch + 1, "mean_dev": dev.mean_dev,
                                   "l1_dev": dev.l1_dev})
            log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.4f} "
                f"loss={row['loss_total']:.4f} acc_all={report.acc_all:.4f}")
            if out is not None:
                report.save_json(out / f"eval_epoch{epoch + 1:04d}.json")
                trainer.save_checkpoint(out / "checkpoint.pt")

    artifacts = {"final_report": last_report, "metrics_rows": metrics_rows,
                 "deviation_rows": deviation_rows}
    if out is not None:
        metrics_path = out / "metrics.csv"
        with metrics_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for row in metrics_rows:
                writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        dev_path = out / "deviations.csv"
        with dev_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "mean_dev", "l1_dev"))
            for row in deviation_rows:
                writer.writerow([_fmt(row[c]) for c in ("epoch", "mean_dev", "l1_dev")])
        trainer.save_checkpoint(out / "checkpoint.pt")
        artifacts.update({
            "metrics_csv": str(metrics_path),
            "deviations_csv": str(dev_path),
            "checkpoint": str(out / "checkpoint.pt"),
        })
    return artifacts
