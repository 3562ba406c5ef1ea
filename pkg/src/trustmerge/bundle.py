"""Desk-scale task bundles: a shared pre-trained MLP plus K conflicting
fine-tuned experts, with exemplar and test sets, and their on-disk layout.

Fine-tuning always starts from the shared pre-trained checkpoint (trained on
a balanced mixture of all task distributions by default) so every expert
descends from a common ancestor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import (
    DEFAULT_EXEMPLARS,
    SyntheticTaskSpec,
    generate_task,
    load_batch_csv,
    save_batch_csv,
)
from .errors import MissingArtifact
from .gradients import GradientEstimate, estimate_abs_gradient, zero_shot_abs_gradient
from .mlp import LabeledBatch, MlpSpec, TrainConfig, init_params, train
from .params import Checkpoint, load_checkpoint, save_checkpoint
from .task_vectors import TaskVector, compute_task_vector

# Default label permutations for the 4-task bundle.  Combined with the
# {0, 90, 180, 270} degree rotations these give each task a distinct
# region-to-label assignment that only partially overlaps with the others,
# so the fine-tuned experts genuinely disagree without making the merged
# problem hopeless.
DEFAULT_ROTATIONS = (0.0, 90.0, 180.0, 270.0)
DEFAULT_PERMS = (
    (0, 1, 2, 3),
    (1, 3, 2, 0),
    (2, 3, 1, 0),
    (3, 0, 2, 1),
)
# Irregular center angles break the 4-fold symmetry of the rotations: each
# task occupies its own quarter of the circle, overlapping its neighbours
# only at the sector boundaries, so conflicts are real but not total.
DEFAULT_CENTER_ANGLES = (0.0, 30.0, 60.0, 90.0)


@dataclass(frozen=True)
class BundleConfig:
    seed: int = 0
    num_tasks: int = 4
    num_classes: int = 4
    hidden: tuple[int, ...] = (16, 16)
    rotations: tuple[float, ...] = DEFAULT_ROTATIONS
    label_perms: tuple[tuple[int, ...], ...] = DEFAULT_PERMS
    center_angles: tuple[float, ...] | None = None  # None = auto per class count
    noise_std: float = 0.45
    samples_train: int = 512
    samples_test: int = 256
    exemplar_count: int = DEFAULT_EXEMPLARS
    # Mixture pretraining places theta_pre near the joint optimum of all
    # tasks, the regime the trust-region analysis assumes; base-task-only
    # pretraining is available for ablations.
    pretrain_on_mixture: bool = True
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=120))

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValueError("need at least one task")
        if len(self.rotations) < self.num_tasks or len(self.label_perms) < self.num_tasks:
            raise ValueError("need a rotation and label permutation per task")

    @property
    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((2, *self.hidden, self.num_classes))

    @property
    def resolved_center_angles(self) -> tuple[float, ...] | None:
        if self.center_angles is not None:
            return self.center_angles
        return DEFAULT_CENTER_ANGLES if self.num_classes == 4 else None

    def task_spec(self, k: int) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            task_id=k,
            num_classes=self.num_classes,
            rotation_deg=self.rotations[k],
            label_perm=self.label_perms[k],
            noise_std=self.noise_std,
            samples_train=self.samples_train,
            samples_test=self.samples_test,
            exemplar_count=self.exemplar_count,
            seed=self.seed * 1000 + 101 + k,
            center_angles_deg=self.resolved_center_angles,
        )


@dataclass(frozen=True)
class TaskBundle:
    config: BundleConfig
    theta_pre: Checkpoint
    experts: list[Checkpoint]
    train_sets: list[LabeledBatch]
    test_sets: list[LabeledBatch]
    exemplar_sets: list[LabeledBatch]

    @property
    def num_tasks(self) -> int:
        return len(self.experts)

    def task_vectors(self) -> list[TaskVector]:
        return [compute_task_vector(ck, self.theta_pre, k) for k, ck in enumerate(self.experts)]

    def gradient_estimates(self, exemplar_count: int | None = None) -> list[GradientEstimate]:
        """Per-task absolute-gradient estimates at the pre-trained point.

        ``exemplar_count`` trims the exemplar pool; 0 switches every task to
        the zero-shot |delta| surrogate.
        """
        if exemplar_count == 0:
            return [zero_shot_abs_gradient(tv) for tv in self.task_vectors()]
        out = []
        for k, ex in enumerate(self.exemplar_sets):
            if exemplar_count is not None:
                ex = ex.take(np.arange(min(exemplar_count, len(ex))))
            out.append(estimate_abs_gradient(self.theta_pre, ex, k))
        return out

    def subset(self, task_ids: list[int]) -> "TaskBundle":
        pick = lambda xs: [xs[i] for i in task_ids]
        return TaskBundle(
            self.config,
            self.theta_pre,
            pick(self.experts),
            pick(self.train_sets),
            pick(self.test_sets),
            pick(self.exemplar_sets),
        )


def _pretrain_data(cfg: BundleConfig) -> LabeledBatch:
    if not cfg.pretrain_on_mixture:
        base_spec = SyntheticTaskSpec(
            task_id=-1,
            num_classes=cfg.num_classes,
            noise_std=cfg.noise_std,
            samples_train=cfg.samples_train,
            samples_test=cfg.samples_test,
            exemplar_count=cfg.exemplar_count,
            seed=cfg.seed * 1000 + 7,
            center_angles_deg=cfg.resolved_center_angles,
        )
        base_train, _, _ = generate_task(base_spec)
        return base_train
    # balanced sample from every task's distribution, drawn with seeds
    # disjoint from the fine-tuning splits
    parts = []
    per_task = max(1, cfg.samples_train // cfg.num_tasks)
    for k in range(cfg.num_tasks):
        spec = replace(
            cfg.task_spec(k),
            samples_train=per_task,
            samples_test=1,
            exemplar_count=0,
            seed=cfg.seed * 1000 + 601 + k,
        )
        tr, _, _ = generate_task(spec)
        parts.append(tr)
    inputs = np.concatenate([p.inputs for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    order = np.random.default_rng(cfg.seed * 1000 + 5).permutation(len(labels))
    return LabeledBatch(inputs[order], labels[order])


def make_bundle(cfg: BundleConfig) -> TaskBundle:
    """Pre-train on the task mixture (or the base task), then fine-tune one
    expert per task from the shared pre-trained checkpoint."""
    base_train = _pretrain_data(cfg)
    theta_init = init_params(cfg.mlp_spec, seed=cfg.seed * 1000 + 13)
    theta_pre = train(theta_init, base_train, replace(cfg.pretrain, seed=cfg.seed * 1000 + 17))

    experts, trains, tests, exemplars = [], [], [], []
    for k in range(cfg.num_tasks):
        tr, te, ex = generate_task(cfg.task_spec(k))
        theta_k = train(theta_pre, tr, replace(cfg.finetune, seed=cfg.seed * 1000 + 31 + k))
        experts.append(theta_k)
        trains.append(tr)
        tests.append(te)
        exemplars.append(ex)
    return TaskBundle(cfg, theta_pre, experts, trains, tests, exemplars)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(bundle: TaskBundle, out_dir) -> None:
    """Checkpoints as TMRG, datasets as CSV, and a hash manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []

    def emit_ckpt(name: str, ck: Checkpoint):
        path = out / name
        save_checkpoint(ck, path)
        files.append(path)

    def emit_csv(name: str, batch: LabeledBatch):
        path = out / name
        save_batch_csv(batch, path)
        files.append(path)

    emit_ckpt("theta_pre.tmrg", bundle.theta_pre)
    for k in range(bundle.num_tasks):
        emit_ckpt(f"task{k}.tmrg", bundle.experts[k])
        emit_csv(f"task{k}_train.csv", bundle.train_sets[k])
        emit_csv(f"task{k}_test.csv", bundle.test_sets[k])
        emit_csv(f"task{k}_exemplars.csv", bundle.exemplar_sets[k])

    cfg = bundle.config
    cfg_lines = {
        "seed": cfg.seed,
        "num_tasks": cfg.num_tasks,
        "num_classes": cfg.num_classes,
        "hidden": ",".join(str(h) for h in cfg.hidden),
        "rotations": ",".join(repr(r) for r in cfg.rotations[: cfg.num_tasks]),
        "label_perms": ";".join(
            ",".join(str(p) for p in perm) for perm in cfg.label_perms[: cfg.num_tasks]
        ),
        "center_angles": ""
        if cfg.center_angles is None
        else ",".join(repr(a) for a in cfg.center_angles),
        "noise_std": repr(cfg.noise_std),
        "samples_train": cfg.samples_train,
        "samples_test": cfg.samples_test,
        "exemplar_count": cfg.exemplar_count,
        "pretrain_on_mixture": cfg.pretrain_on_mixture,
        "pretrain_epochs": cfg.pretrain.epochs,
        "pretrain_batch_size": cfg.pretrain.batch_size,
        "pretrain_learning_rate": repr(cfg.pretrain.learning_rate),
        "finetune_epochs": cfg.finetune.epochs,
        "finetune_batch_size": cfg.finetune.batch_size,
        "finetune_learning_rate": repr(cfg.finetune.learning_rate),
    }
    cfg_path = out / "bundle_config.txt"
    with open(cfg_path, "w") as fh:
        for k, v in cfg_lines.items():
            fh.write(f"{k}={v}\n")
    files.append(cfg_path)

    with open(out / "manifest.txt", "w") as fh:
        for path in files:
            fh.write(f"{_sha256(path)}  {path.name}\n")


def _parse_config_file(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def bundle_config_from_mapping(kv: dict[str, str]) -> BundleConfig:
    """Build a BundleConfig from flat key=value strings (file or CLI flags)."""
    defaults = BundleConfig()
    def get(key, cast, fallback):
        return cast(kv[key]) if key in kv and kv[key] != "" else fallback

    hidden = get("hidden", lambda s: tuple(int(x) for x in s.split(",")), defaults.hidden)
    rotations = get(
        "rotations", lambda s: tuple(float(x) for x in s.split(",")), defaults.rotations
    )
    perms = get(
        "label_perms",
        lambda s: tuple(tuple(int(p) for p in part.split(",")) for part in s.split(";")),
        defaults.label_perms,
    )
    pretrain = TrainConfig(
        epochs=get("pretrain_epochs", int, defaults.pretrain.epochs),
        batch_size=get("pretrain_batch_size", int, defaults.pretrain.batch_size),
        learning_rate=get("pretrain_learning_rate", float, defaults.pretrain.learning_rate),
    )
    finetune = TrainConfig(
        epochs=get("finetune_epochs", int, defaults.finetune.epochs),
        batch_size=get("finetune_batch_size", int, defaults.finetune.batch_size),
        learning_rate=get("finetune_learning_rate", float, defaults.finetune.learning_rate),
    )
    return BundleConfig(
        seed=get("seed", int, defaults.seed),
        num_tasks=get("num_tasks", int, defaults.num_tasks),
        num_classes=get("num_classes", int, defaults.num_classes),
        hidden=hidden,
        rotations=rotations,
        label_perms=perms,
        center_angles=get(
            "center_angles", lambda s: tuple(float(x) for x in s.split(",")), defaults.center_angles
        ),
        noise_std=get("noise_std", float, defaults.noise_std),
        samples_train=get("samples_train", int, defaults.samples_train),
        samples_test=get("samples_test", int, defaults.samples_test),
        exemplar_count=get("exemplar_count", int, defaults.exemplar_count),
        pretrain_on_mixture=get(
            "pretrain_on_mixture", lambda s: s.lower() in ("1", "true", "yes"),
            defaults.pretrain_on_mixture,
        ),
        pretrain=pretrain,
        finetune=finetune,
    )


def load_bundle(path) -> TaskBundle:
    """Load a bundle written by save_bundle, verifying the manifest hashes."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise MissingArtifact(str(manifest))
    for line in manifest.read_text().splitlines():
        digest, _, name = line.partition("  ")
        target = root / name
        if not target.exists():
            raise MissingArtifact(str(target))
        if _sha256(target) != digest:
            raise MissingArtifact(f"{target} does not match its manifest hash")
    cfg = bundle_config_from_mapping(_parse_config_file(root / "bundle_config.txt"))
    theta_pre = load_checkpoint(root / "theta_pre.tmrg")
    experts, trains, tests, exemplars = [], [], [], []
    for k in range(cfg.num_tasks):
        experts.append(load_checkpoint(root / f"task{k}.tmrg"))
        trains.append(load_batch_csv(root / f"task{k}_train.csv"))
        tests.append(load_batch_csv(root / f"task{k}_test.csv"))
        exemplars.append(load_batch_csv(root / f"task{k}_exemplars.csv"))
    return TaskBundle(cfg, theta_pre, experts, trains, tests, exemplars)
