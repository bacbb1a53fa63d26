"""Experiment orchestration: run configuration, training loop, grid search and ablations.

One ``RunConfig`` describes a method, a dataset and the optimisation
settings.  ``train`` runs it once per seed: Adam with linear warmup and
cosine decay, model selection on validation AP, then a single test
evaluation.  The test split is locked by the dataset's access audit for
the whole training and selection phase.
"""

from __future__ import annotations

import configparser
import copy
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import detection
from .baselines import METHODS as BASELINE_METHODS
from .baselines import BaselineConfig, SiameseBaseline, probability_scorer
from .checkpoint import save_checkpoint
from .dataio import PatchDataset
from .errors import ConfigError, DegenerateLabels, DivergenceError, NonFiniteLoss
from .model import ModelConfig, SitsAutoencoder, desk_config
from .objectives import LossWeights

log = logging.getLogger(__name__)

SITS_METHODS = ("sits-ae", "sits-vae")
ALL_METHODS = SITS_METHODS + tuple(BASELINE_METHODS)
LR_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
DEFAULT_SEEDS = (42, 43, 44)

# Optimisation settings per profile; "desk" is the CPU-sized variant.
PROFILES = {
    "full": {"epochs": 200, "batch_size": 64, "warmup_epochs": 10, "learning_rate": 1e-4},
    "desk": {"epochs": 30, "batch_size": 32, "warmup_epochs": 3, "learning_rate": 5e-4},
}
VAE_LAMBDA_REG = 1e-3


def default_loss_weights(kind: str, method: str = "sits-ae") -> LossWeights:
    """Loss weights for a dataset kind ("synthetic" or "real")."""
    lam = 0.5 if kind == "synthetic" else 0.25
    reg = VAE_LAMBDA_REG if method == "sits-vae" else 0.0
    return LossWeights(lambda_contra=lam, mu_consist=0.5, lambda_reg=reg)


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int, epochs: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at the last epoch."""
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, epochs - 1 - warmup_epochs)
    progress = min(1.0, (epoch - warmup_epochs) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class RunConfig:
    method: str = "sits-ae"
    data: str = ""
    out: str = "runs/run"
    profile: str = "full"
    model: ModelConfig | None = None       # None: derived from profile and patch size
    lambda_contra: float | None = None     # None: dataset-kind default
    mu_consist: float | None = None
    lambda_reg: float | None = None
    reconstruction: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 200
    warmup_epochs: int = 10
    seeds: tuple = DEFAULT_SEEDS
    tau_policy: str = "test-grid"
    eval_batch_size: int = 128
    steps_used: int = 5
    head_hidden_dim: int = 256
    pair_aggregation: str = "mean"
    diff_aggregation: str = "mean"

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(ALL_METHODS)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.tau_policy not in ("test-grid", "validation-selected"):
            raise ConfigError(f"tau policy for training runs must be test-grid or validation-selected")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name in ("batch_size", "epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup_epochs < 0 or not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigError("invalid optimiser settings")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def is_baseline(self) -> bool:
        return self.method in BASELINE_METHODS

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_contra=self.lambda_contra, mu_consist=self.mu_consist,
            lambda_reg=self.lambda_reg, reconstruction=self.reconstruction,
        )

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig.for_method(
            self.method, self.model, steps_used=self.steps_used,
            head_hidden_dim=self.head_hidden_dim, pair_aggregation=self.pair_aggregation,
            diff_aggregation=self.diff_aggregation,
        )

    def resolve(self, kind: str, patch_size: int) -> "RunConfig":
        """Fill the dataset-dependent defaults (model and loss weights)."""
        model = self.model
        variant = "vae" if self.method == "sits-vae" else "ae"
        if model is None:
            model = desk_config(patch_size, variant) if self.profile == "desk" else ModelConfig(
                input_size=patch_size, variant=variant)
        elif model.variant != variant:
            model = dataclasses.replace(model, variant=variant)
        w = default_loss_weights(kind, self.method)
        return self.replace(
            model=model,
            lambda_contra=w.lambda_contra if self.lambda_contra is None else self.lambda_contra,
            mu_consist=w.mu_consist if self.mu_consist is None else self.mu_consist,
            lambda_reg=w.lambda_reg if self.lambda_reg is None else self.lambda_reg,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if d.get("model") is not None:
            d["model"] = ModelConfig.from_dict(d["model"])
        d["seeds"] = tuple(d.get("seeds", DEFAULT_SEEDS))
        return cls(**d)

    # --- INI files ---------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in _INI_LAYOUT.items():
            cp[section] = {}
            for key in keys:
                value = getattr(self, key)
                if value is not None:
                    cp[section][key] = _format(value)
        if self.model is not None:
            cp["model"] = {k: _format(v) for k, v in self.model.to_dict().items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, **overrides) -> "RunConfig":
        """Parse an INI config; ``profile`` defaults apply before explicit keys."""
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values = {}
        model = None
        for section in cp.sections():
            if section == "model":
                try:
                    model = {k: _parse(v, _MODEL_TYPES[k]) for k, v in cp[section].items()}
                except KeyError as exc:
                    raise ConfigError(f"unknown model key {exc}") from None
                continue
            if section not in _INI_LAYOUT:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in _INI_LAYOUT[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse(raw, _FIELD_TYPES[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        profile = values.get("profile", "full")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        merged = {**PROFILES[profile], **values}
        if model is not None:
            try:
                merged["model"] = ModelConfig.from_dict(model)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [model] section: {exc}") from exc
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_INI_LAYOUT = {
    "run": ("method", "data", "out", "profile", "seeds", "tau_policy"),
    "optim": ("learning_rate", "weight_decay", "batch_size", "epochs", "warmup_epochs", "eval_batch_size"),
    "loss": ("lambda_contra", "mu_consist", "lambda_reg", "reconstruction"),
    "baseline": ("steps_used", "head_hidden_dim", "pair_aggregation", "diff_aggregation"),
}
_FIELD_TYPES = {
    "method": str, "data": str, "out": str, "profile": str, "seeds": tuple, "tau_policy": str,
    "learning_rate": float, "weight_decay": float, "batch_size": int, "epochs": int,
    "warmup_epochs": int, "eval_batch_size": int, "lambda_contra": float, "mu_consist": float,
    "lambda_reg": float, "reconstruction": float, "steps_used": int, "head_hidden_dim": int,
    "pair_aggregation": str, "diff_aggregation": str,
}
_MODEL_TYPES = {f.name: type(f.default) for f in dataclasses.fields(ModelConfig)}


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, kind):
    try:
        if kind is tuple:
            return tuple(int(s) for s in raw.replace(" ", "").split(",") if s)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from exc


# --- training ------------------------------------------------------------------


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle each class and interleave them evenly so batches mix both labels."""
    keys = np.empty(len(labels))
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = rng.permutation(idx)
        keys[perm] = (np.arange(len(perm)) + rng.random()) / len(perm)
    order = np.argsort(keys, kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def build_model(config: RunConfig) -> torch.nn.Module:
    if config.is_baseline:
        return SiameseBaseline(config.baseline_config())
    return SitsAutoencoder(config.model)


def make_scorer(config: RunConfig, model):
    if config.is_baseline:
        return probability_scorer(model, config.eval_batch_size)
    return detection.mcd_scorer(model, config.eval_batch_size)


def _as_batch(data, idx):
    x = torch.from_numpy(data.images[idx]).float().div_(255.0)
    return x, torch.from_numpy(data.labels[idx])


@torch.no_grad()
def _mean_loss(model, data, weights, batch_size: int) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(data), batch_size):
        x, y = _as_batch(data, slice(i, i + batch_size))
        loss, _, _ = model.forward_loss(x, y, weights)
        total += float(loss) * len(y)
    return total / len(data)


def _safe_ap(scores, labels) -> float | None:
    try:
        return detection.average_precision(scores, labels)
    except DegenerateLabels:
        return None


@dataclass
class SeedRun:
    seed: int
    status: str = "ok"
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_ap: float | None = None
    report: dict | None = None
    error: str | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_seed(config: RunConfig, dataset: PatchDataset, seed: int, out_dir=None):
    """Train one resolved config under one seed.

    Returns ``(model, SeedRun)``; the model holds the weights of the epoch
    with the best validation AP (the last epoch when AP is undefined).
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(config)
    weights = None if config.is_baseline else config.loss_weights()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    train_data, val_data = dataset.load("train"), dataset.load("val")
    scorer = make_scorer(config, model)
    run = SeedRun(seed)
    best_state, best_ap = None, -math.inf
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.learning_rate, config.warmup_epochs, config.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(stratified_batches(train_data.labels, config.batch_size, rng)):
            x, y = _as_batch(train_data, idx)
            try:
                loss, _, parts = model.forward_loss(x, y, weights)
            except DivergenceError as exc:
                _write_divergence(out_dir, run, epoch, step, lr, str(exc))
                raise
            if not torch.isfinite(loss):
                msg = f"non-finite loss at epoch {epoch} step {step}: {parts}"
                _write_divergence(out_dir, run, epoch, step, lr, msg)
                raise NonFiniteLoss(msg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += parts["loss"] * len(idx)
            count += len(idx)
        val_ap = _safe_ap(scorer(val_data.images), val_data.labels)
        val_loss = _mean_loss(model, val_data, weights, config.eval_batch_size)
        run.history.append({"epoch": epoch, "lr": lr, "train_loss": total / count,
                            "val_loss": val_loss, "val_ap": val_ap})
        log.info("seed %d epoch %d lr %.2e train %.5f val %.5f val_ap %s",
                 seed, epoch, lr, total / count, val_loss, val_ap)
        if val_ap is not None and val_ap > best_ap:
            best_ap, run.best_epoch = val_ap, epoch
            best_state = copy.deepcopy(model.state_dict())

    if best_state is None:
        run.best_epoch = config.epochs - 1
    else:
        model.load_state_dict(best_state)
        run.best_val_ap = best_ap
    model.eval()
    return model, run


def _write_divergence(out_dir, run: SeedRun, epoch, step, lr, message) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {"seed": run.seed, "epoch": epoch, "step": step, "lr": lr, "error": message,
            "history": run.history}
    (out_dir / "divergence.json").write_text(json.dumps(snap, indent=1))


def checkpoint_header(config: RunConfig, run: SeedRun) -> dict:
    header = {
        "method": config.method,
        "model": config.model.to_dict(),
        "fingerprint": config.model.fingerprint(),
        "seed": run.seed,
        "epoch": run.best_epoch,
        "metrics": {"val_ap": run.best_val_ap},
        "run_config": config.to_dict(),
    }
    if config.is_baseline:
        header["baseline"] = config.baseline_config().to_dict()
    return header


def load_model(path):
    """Rebuild a trained model (and its run config) from a checkpoint file."""
    from .checkpoint import load_checkpoint

    header, state = load_checkpoint(path)
    config = RunConfig.from_dict(header["run_config"])
    model = build_model(config)
    model.load_state_dict(state)
    model.eval()
    return model, config, header


def write_loss_curve(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "lr", "train_loss", "val_loss", "val_ap"])
        w.writeheader()
        w.writerows(history)


def mean_std(values) -> dict:
    """Mean and standard deviation over seeds (n - 1 denominator); std only for two or more values."""
    v = [float(x) for x in values if x is not None]
    if not v:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) >= 2 else None, "n": len(v)}


def aggregate_runs(runs: list[SeedRun]) -> dict:
    reports = [r.report for r in runs if r.status == "ok" and r.report is not None]
    agg = {k: mean_std(rep[k] for rep in reports) for k in ("ap", "f1", "precision", "recall")}
    agg["val_ap"] = mean_std(r.best_val_ap for r in runs if r.status == "ok")
    return agg


@dataclass
class RunRecord:
    config: dict
    runs: list[SeedRun]
    aggregate: dict
    models: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def status(self) -> str:
        return "ok" if self.runs and all(r.status == "ok" for r in self.runs) else "failed"

    def to_dict(self) -> dict:
        return {"config": self.config, "status": self.status,
                "runs": [r.to_dict() for r in self.runs], "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["config"], [SeedRun(**r) for r in d["runs"]], d["aggregate"])


def open_dataset(config: RunConfig, dataset: PatchDataset | None = None) -> PatchDataset:
    return dataset if dataset is not None else PatchDataset(config.data)


def _patch_size(dataset: PatchDataset) -> int:
    return int(dataset.manifest.get("patch_size", 64))


def train(config: RunConfig, dataset: PatchDataset | None = None, evaluate_test: bool = True,
          tolerate_failure: bool = False, write: bool = True) -> RunRecord:
    """Train ``config`` once per seed and evaluate each selected model on test.

    Writes ``config.ini``, ``run.json`` and per-seed ``checkpoint.bin``,
    ``loss_curve.csv``, ``report.json`` and ``scores.csv`` under
    ``config.out`` when ``write`` is set.
    """
    dataset = open_dataset(config, dataset)
    cfg = config.resolve(dataset.kind, _patch_size(dataset))
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
    runs, models = [], {}
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}" if write else None
        try:
            with dataset.audit.forbid("test"):
                model, run = train_seed(cfg, dataset, seed, seed_dir)
        except DivergenceError as exc:
            if not tolerate_failure:
                raise
            log.warning("seed %d diverged: %s", seed, exc)
            runs.append(SeedRun(seed, status="failed", error=f"{type(exc).__name__}: {exc}"))
            continue
        models[seed] = model
        if write:
            seed_dir.mkdir(parents=True, exist_ok=True)
            ckpt = save_checkpoint(seed_dir / "checkpoint.bin", model.state_dict(), checkpoint_header(cfg, run))
            run.checkpoint = str(ckpt)
            write_loss_curve(seed_dir / "loss_curve.csv", run.history)
        if evaluate_test:
            report, scores, data = detection.evaluate(
                make_scorer(cfg, model), dataset, "test", cfg.tau_policy,
                meta={"seed": seed, "method": cfg.method, "checkpoint": run.checkpoint},
            )
            run.report = report.to_dict()
            if write:
                (seed_dir / "report.json").write_text(json.dumps(run.report, indent=1))
                detection.write_scores(seed_dir / "scores.csv", data.ids, scores, data.labels,
                                       data.disaster_types)
        runs.append(run)
    record = RunRecord(cfg.to_dict(), runs, aggregate_runs(runs), models)
    if write:
        (out / "run.json").write_text(json.dumps(record.to_dict(), indent=1))
    return record


def untrained_baseline(config: RunConfig, dataset: PatchDataset | None = None,
                       seed: int | None = None) -> detection.EvalReport:
    """Test metrics of MCD scores from a randomly initialised encoder."""
    dataset = open_dataset(config, dataset)
    cfg = config.resolve(dataset.kind, _patch_size(dataset))
    seed = cfg.seeds[0] if seed is None else seed
    torch.manual_seed(seed)
    model = SitsAutoencoder(cfg.model).eval()
    report, _, _ = detection.evaluate(detection.mcd_scorer(model, cfg.eval_batch_size), dataset,
                                      "test", "test-grid", meta={"seed": seed, "untrained": True})
    return report


# --- grid search and ablation ----------------------------------------------------

GRID_KEYS = ("learning_rate", "lambda_contra", "mu_consist")


@dataclass
class GridResult:
    best: RunConfig
    best_val_ap: float | None
    points: list[dict]
    records: list[RunRecord]


def grid_search(config: RunConfig, grid: dict, dataset: PatchDataset | None = None,
                epochs: int | None = None, write: bool = True) -> GridResult:
    """Train every grid point on the first seed and keep the best validation AP.

    Only the train and validation splits are read.
    """
    if not grid:
        raise ConfigError("empty grid")
    for key, values in grid.items():
        if key not in GRID_KEYS:
            raise ConfigError(f"cannot grid-search {key!r}; choose from {', '.join(GRID_KEYS)}")
        if not values:
            raise ConfigError(f"grid for {key!r} is empty")
        if key == "learning_rate" and any(v not in LR_GRID for v in values):
            raise ConfigError(f"learning rates must come from {LR_GRID}")
    dataset = open_dataset(config, dataset)
    keys = list(grid)
    points, records = [], []
    best, best_ap = None, None
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        params = dict(zip(keys, combo))
        cfg = config.replace(**params, seeds=config.seeds[:1], out=str(Path(config.out) / f"point_{i:02d}"),
                             **({"epochs": epochs} if epochs else {}))
        with dataset.audit.forbid("test"):
            record = train(cfg, dataset, evaluate_test=False, tolerate_failure=True, write=write)
        ap = record.runs[0].best_val_ap if record.status == "ok" else None
        points.append({"params": params, "val_ap": ap, "status": record.status})
        records.append(record)
        if ap is not None and (best_ap is None or ap > best_ap):
            best, best_ap = config.replace(**params), ap
    if best is None:
        raise DivergenceError("every grid point failed to train")
    if write:
        Path(config.out).mkdir(parents=True, exist_ok=True)
        summary = {"points": points, "best": best.to_dict(), "best_val_ap": best_ap}
        (Path(config.out) / "grid.json").write_text(json.dumps(summary, indent=1))
    return GridResult(best, best_ap, points, records)


ABLATION_ROWS = (
    ("ae", True, False, False),
    ("ae+contra", True, True, False),
    ("ae+contra+consist", True, True, True),
    ("contra+consist", False, True, True),
)


def ablation_configs(config: RunConfig, kind: str) -> list[tuple[str, RunConfig]]:
    w = default_loss_weights(kind, config.method)
    lam = w.lambda_contra if config.lambda_contra is None else config.lambda_contra
    mu = w.mu_consist if config.mu_consist is None else config.mu_consist
    rows = []
    for name, ae, contra, consist in ABLATION_ROWS:
        rows.append((name, config.replace(
            reconstruction=1.0 if ae else 0.0,
            lambda_contra=lam if contra else 0.0,
            mu_consist=mu if consist else 0.0,
            out=str(Path(config.out) / name),
        )))
    return rows


def ablation_losses(config: RunConfig, dataset: PatchDataset | None = None, write: bool = True) -> list[dict]:
    """One row per loss combination; a diverged row is reported as failed."""
    if config.is_baseline:
        raise ConfigError("loss ablation applies to the SITS methods only")
    dataset = open_dataset(config, dataset)
    rows = []
    for name, cfg in ablation_configs(config, dataset.kind):
        record = train(cfg, dataset, tolerate_failure=True, write=write)
        rows.append({"row": name, "status": record.status,
                     "weights": {k: record.config[k] for k in ("reconstruction", "lambda_contra", "mu_consist")},
                     "aggregate": record.aggregate, "record": record})
    if write:
        Path(config.out).mkdir(parents=True, exist_ok=True)
        table = [{k: v for k, v in r.items() if k != "record"} for r in rows]
        (Path(config.out) / "ablation.json").write_text(json.dumps(table, indent=1))
    return rows
