"""Configuration dataclasses and the human-readable config file format."""

from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml


@dataclass
class CohortConfig:
    """Knobs for the synthetic longitudinal cohort generator."""

    n_subjects: int = 8
    grid: int = 32
    tp_min: int = 4                  # timepoints per subject, inclusive range
    tp_max: int = 5
    gap_min: int = 40                # days between consecutive timepoints
    gap_max: int = 150
    patch: int = 4                   # tokenizer patch size the grid must divide by

    # concentric-sphere dynamics, radii in voxels, rates in voxels/day
    grow_ed: float = 0.012
    grow_et: float = 0.009
    grow_net: float = 0.006
    shrink_tmz: float = 0.004
    shrink_rt: float = 0.006
    shrink_crt_ed: float = 0.006
    cavity_heal: float = 0.006
    resection_frac: float = 0.7     # resection radius sits this far into the ET shell
    delta_jitter: float = 0.15      # multiplicative, sign-preserving noise on radius deltas
    r_max: float = 12.0

    # intensity model
    paint_noise: float = 0.05
    scan_noise: float = 0.015
    bg_level: float = -0.40
    bg_span: float = 0.25

    # clinician policy: baseline size decision threshold (fraction of voxels)
    size_threshold: float = 0.012

    def validate(self) -> None:
        if self.grid % self.patch != 0:
            raise ValueError(
                f"grid size {self.grid} not divisible by patch size {self.patch}"
            )
        if not (2 <= self.tp_min <= self.tp_max <= 5):
            raise ValueError("timepoints per subject must lie in 2..5")


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the Y-shaped backbone."""

    n_layers: int = 8                # total depth N; first half shared
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    patch: int = 4
    grid: int = 32
    c_lat: int = 0                   # 0 means full 3*patch^3 (identity-capable)
    aligner_taps: tuple = (1, 2, 4)  # layer indices (1-based) within the shared half
    aligner_width: int = 16
    flow_depth: int = 2
    focal_gamma: float = 2.0
    lambda_img: float = 4.0
    sampler_steps: int = 50
    prob_eps: float = 1e-7           # clamp before log in the focal loss
    dice_eps: float = 1e-6
    # ablation switches
    y_mot: bool = True               # False: task-specific FFNs collapse to shared
    mm_align: bool = True            # False: aligner detached, no alignment loss

    @property
    def n_shared(self) -> int:
        return self.n_layers // 2

    @property
    def latent_side(self) -> int:
        return self.grid // self.patch

    @property
    def n_img_tokens(self) -> int:
        return self.latent_side ** 3

    @property
    def lat_channels(self) -> int:
        return self.c_lat if self.c_lat > 0 else 3 * self.patch ** 3

    def validate(self) -> None:
        if self.n_layers % 2 != 0:
            raise ValueError("n_layers must be even (equal shared/specific halves)")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.grid % self.patch != 0:
            raise ValueError("grid must be divisible by patch")
        bad = [t for t in self.aligner_taps if not (1 <= t <= self.n_shared)]
        if bad:
            raise ValueError(f"aligner taps {bad} outside shared layers 1..{self.n_shared}")
        if self.lambda_img <= 0:
            raise ValueError("lambda_img must be positive")


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3                 # base learning rate
    lr_overrides: dict = field(default_factory=dict)  # param-group prefix -> lr
    warmup_steps: int = 50
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    task_prob_img: float = 0.5       # probability a step trains the imaging branch
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 25
    # which branches train: "both", "plan", "img"
    tasks: str = "both"

    def validate(self) -> None:
        if not (0.0 < self.task_prob_img < 1.0):
            raise ValueError("task_prob_img must lie strictly in (0, 1)")
        if self.tasks not in ("both", "plan", "img"):
            raise ValueError("tasks must be one of both/plan/img")


def save_config(path, model: ModelConfig, train: TrainConfig) -> None:
    payload = {"model": asdict(model), "train": asdict(train)}
    payload["model"]["aligner_taps"] = list(model.aligner_taps)
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=False))


def load_config(path):
    payload = yaml.safe_load(Path(path).read_text())
    mraw = payload.get("model", {})
    if "aligner_taps" in mraw:
        mraw["aligner_taps"] = tuple(mraw["aligner_taps"])
    model = ModelConfig(**mraw)
    train = TrainConfig(**payload.get("train", {}))
    model.validate()
    train.validate()
    return model, train
