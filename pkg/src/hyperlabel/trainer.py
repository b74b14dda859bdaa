"""Pre-training on synthetic batches, run selection by validation accuracy,
and checkpoint output.

Each iteration draws a fresh batch, computes the mean per-matrix cross-entropy
and takes one AMSGrad step. A run ends when the smoothed training loss has not
improved for ``patience`` iterations or at ``max_iterations``. Validation
accuracy is only recorded; it picks the best of several runs, never the
stopping iteration.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gradkernel as gk
from . import hlmnet
from .datagen import GenConfig, SyntheticPair, gen_batch, gen_condind_dataset
from .errors import ContractViolation, NonFiniteError, TrainingError
from .hlmnet import GraphView, ModelParams
from .labelcore import accuracy, as_binary, as_labels

log = logging.getLogger(__name__)

INIT_STREAM = 5


@dataclass
class ValidationSpec:
    count: int = 100
    seed: int = 7
    n_range: tuple = (20, 200)
    m_range: tuple = (3, 15)

    def build(self):
        return gen_condind_dataset(self.count, tuple(self.n_range), tuple(self.m_range), self.seed)


@dataclass
class TrainConfig:
    gen: GenConfig = field(default_factory=GenConfig.desk)
    K: int = 4
    d: int = 16
    batch_size: int = 50
    lr: float = 1e-3
    patience_iterations: int = 1000
    max_iterations: int = 20_000
    num_runs: int = 3
    validation_every: int = 250
    validation: ValidationSpec = field(default_factory=ValidationSpec)
    master_seed: int = 0
    loss_smoothing: float = 0.99
    validation_set: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.num_runs < 1:
            raise ContractViolation("num_runs must be >= 1")
        if not 1 <= self.patience_iterations <= self.max_iterations:
            raise ContractViolation("need 1 <= patience_iterations <= max_iterations")
        if self.validation_every < 1:
            raise ContractViolation("validation_every must be >= 1")
        if not 0.0 <= self.loss_smoothing < 1.0:
            raise ContractViolation("loss_smoothing must be in [0, 1)")
        if self.validation_set is None:
            self.validation_set = self.validation.build()

    @classmethod
    def desk(cls, master_seed=0, **kw):
        return cls(gen=GenConfig.desk(master_seed), master_seed=master_seed, **kw)

    @classmethod
    def paper(cls, master_seed=0, **kw):
        defaults = dict(
            K=4, d=32, batch_size=50, patience_iterations=10_000, max_iterations=100_000,
            num_runs=10, validation_every=500,
            validation=ValidationSpec(100, 7, (100, 2000), (2, 60)),
        )
        defaults.update(kw)
        return cls(gen=GenConfig.paper(master_seed), master_seed=master_seed, **defaults)

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc.pop("validation_set")
        return doc

    @classmethod
    def from_dict(cls, doc: dict):
        doc = dict(doc)
        preset = doc.pop("preset", "desk")
        seed = doc.pop("master_seed", 0)
        base = {"desk": cls.desk, "paper": cls.paper}.get(preset)
        if base is None:
            raise ContractViolation(f"unknown preset {preset!r}")
        template = base(seed)
        gen = dataclasses.asdict(template.gen)
        gen.update(doc.pop("gen", {}))
        gen["master_seed"] = seed
        validation = dataclasses.asdict(template.validation)
        validation.update(doc.pop("validation", {}))
        fields = {f.name for f in dataclasses.fields(cls)} - {"gen", "validation", "validation_set", "master_seed"}
        unknown = set(doc) - fields
        if unknown:
            raise ContractViolation(f"unknown config keys {sorted(unknown)}")
        kw = {name: getattr(template, name) for name in fields}
        kw.update(doc)
        return cls(gen=GenConfig(**gen), validation=ValidationSpec(**validation), master_seed=seed, **kw)

    @classmethod
    def from_json_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ContractViolation(f"{path}: invalid JSON config: {exc}") from None
        if not isinstance(doc, dict):
            raise ContractViolation(f"{path}: config must be a JSON object")
        try:
            return cls.from_dict(doc)
        except TypeError as exc:
            raise ContractViolation(f"{path}: {exc}") from None


@dataclass
class RunReport:
    run_id: int
    checkpoints: list = field(default_factory=list)  # (iteration, train_loss, val_acc)
    iterations: int = 0
    stop_reason: str = ""
    diverged: bool = False
    params: ModelParams = field(default=None, repr=False)

    @property
    def mean_validation_accuracy(self) -> float:
        if not self.checkpoints:
            return float("nan")
        return float(np.mean([c[2] for c in self.checkpoints]))

    def to_dict(self):
        return {
            "run_id": self.run_id,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "diverged": self.diverged,
            "mean_validation_accuracy": self.mean_validation_accuracy,
            "checkpoints": [
                {"iteration": it, "train_loss": loss, "validation_accuracy": acc}
                for it, loss, acc in self.checkpoints
            ],
        }


# ---------------------------------------------------------------------------
# objective


def _param_tensors(params: ModelParams):
    return {k: gk.param(v) for k, v in params.arrays.items()}


def batch_loss(tensors, graph: GraphView, labels, K) -> gk.Tensor:
    """Mean over matrices of the per-matrix mean cross-entropy."""
    logits = hlmnet.forward_logits(tensors, graph, K)
    targets = (np.asarray(labels, dtype=np.float64)[:, None] + 1.0) / 2.0
    per_row = gk.bce_with_logits(logits, targets)
    per_graph = gk.group_mean(per_row, graph.rows_by_graph)
    return gk.mean(per_graph)


def loss(params: ModelParams, X, y) -> float:
    """Mean binary cross-entropy between (1 + y)/2 and the model's probabilities."""
    X = as_binary(X)
    y = as_labels(y, X.shape[0])
    tensors = {k: gk.constant(v) for k, v in params.arrays.items()}
    return float(batch_loss(tensors, hlmnet.encode(X), y, params.K).value)


def loss_and_grads(params: ModelParams, pairs):
    graph = GraphView([p.X for p in pairs])
    labels = np.concatenate([p.y for p in pairs])
    tensors = _param_tensors(params)
    out = batch_loss(tensors, graph, labels, params.K)
    gk.backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
    return float(out.value), grads


# ---------------------------------------------------------------------------
# evaluation


def predict(params: ModelParams, X) -> np.ndarray:
    """Forward pass that tolerates an all-abstain matrix (returns 0.5 everywhere)."""
    X = as_binary(X)
    if not X.any():
        return np.full(X.shape[0], 0.5)
    return hlmnet.forward(params, X)


def validation_accuracy(params: ModelParams, datasets) -> float:
    usable = [p for p in datasets if np.asarray(p.X).any()]
    accs = {}
    if usable:
        probs = hlmnet.forward_many(params, [p.X for p in usable])
        for p, pr in zip(usable, probs):
            accs[id(p)] = accuracy(pr, p.y)
    return float(np.mean([accs.get(id(p), accuracy(np.full(len(p.y), 0.5), p.y)) for p in datasets]))


# ---------------------------------------------------------------------------
# training


def run_init_seed(master_seed, run_id) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(INIT_STREAM, run_id))
    return int(ss.generate_state(1)[0])


def train_single_run(cfg: TrainConfig, run_id: int = 0, on_record=None) -> RunReport:
    params = hlmnet.init_params(cfg.K, cfg.d, run_init_seed(cfg.master_seed, run_id))
    state = gk.AdamState(lr=cfg.lr)
    report = RunReport(run_id)
    smoothed = None
    best = math.inf
    best_iter = 0
    beta = cfg.loss_smoothing
    last_val_iter = 0
    batch_loss_value = float("nan")
    it = 0
    while it < cfg.max_iterations:
        pairs = gen_batch(cfg.gen, cfg.batch_size, it, run=run_id)
        try:
            batch_loss_value, grads = loss_and_grads(params, pairs)
            new_arrays = gk.adam_step(state, params.arrays, grads)
            if not all(np.all(np.isfinite(a)) for a in new_arrays.values()):
                raise NonFiniteError("non-finite parameters after update")
        except NonFiniteError as exc:
            log.warning("run %d diverged at iteration %d: %s", run_id, it, exc)
            report.diverged = True
            report.stop_reason = f"diverged: {exc}"
            break
        params = ModelParams(params.K, params.d, new_arrays)
        it += 1
        # exponential moving average seeded with the first batch loss
        smoothed = batch_loss_value if smoothed is None else beta * smoothed + (1 - beta) * batch_loss_value
        if smoothed < best:
            best, best_iter = smoothed, it
        if it % cfg.validation_every == 0:
            _checkpoint(cfg, report, params, it, smoothed, on_record)
            last_val_iter = it
        if it - best_iter >= cfg.patience_iterations:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_iterations"
    report.iterations = it
    if not report.diverged and it > 0 and last_val_iter != it:
        _checkpoint(cfg, report, params, it, smoothed, on_record)
    report.params = params
    return report


def _checkpoint(cfg, report, params, it, train_loss, on_record):
    acc = validation_accuracy(params, cfg.validation_set)
    report.checkpoints.append((it, float(train_loss), acc))
    record = {"run": report.run_id, "iteration": it, "train_loss": float(train_loss), "validation_accuracy": acc}
    log.info("run %d iter %d loss %.5f val_acc %.4f", report.run_id, it, train_loss, acc)
    if on_record is not None:
        on_record(record)


def _run_worker(args):
    cfg, run_id = args
    return train_single_run(cfg, run_id)


def select_run(reports):
    """Index of the non-diverged run with the highest mean validation accuracy.

    Ties go to the lower run id.
    """
    best = None
    for idx, r in enumerate(reports):
        if r.diverged or not r.checkpoints:
            continue
        if best is None or r.mean_validation_accuracy > reports[best].mean_validation_accuracy:
            best = idx
    return best


def train_select(cfg: TrainConfig, workers: int = 1, on_record=None):
    """Train ``cfg.num_runs`` runs and return (selected final params, reports)."""
    run_ids = list(range(cfg.num_runs))
    if workers > 1 and cfg.num_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_worker, [(cfg, r) for r in run_ids]))
        if on_record is not None:
            for r in reports:
                for it, loss_value, acc in r.checkpoints:
                    on_record({"run": r.run_id, "iteration": it, "train_loss": loss_value,
                               "validation_accuracy": acc})
    else:
        reports = [train_single_run(cfg, r, on_record) for r in run_ids]
    best = select_run(reports)
    if best is None:
        raise TrainingError("every run diverged", reports)
    return reports[best].params, reports


def write_outputs(out_dir, selected: ModelParams, reports, cfg: TrainConfig):
    """Checkpoint layout: run_<id>/report.json, run_<id>/final.model.json, selected.model.json."""
    os.makedirs(out_dir, exist_ok=True)
    for r in reports:
        run_dir = os.path.join(out_dir, f"run_{r.run_id}")
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(r.to_dict(), fh, indent=2)
            fh.write("\n")
        if r.params is not None:
            hlmnet.save_params(os.path.join(run_dir, "final.model.json"), r.params)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
    hlmnet.save_params(os.path.join(out_dir, "selected.model.json"), selected)
