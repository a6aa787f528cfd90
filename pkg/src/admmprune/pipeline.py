"""Experiment pipelines: pretraining, sparsity training, pruning, fine-tuning.

Two pipelines are provided. ``single_shot`` runs pretrain -> sparsity stage ->
prune -> fine-tune exactly once. For ADMM criteria the sparsity stage runs the
alternating W/Z/U updates; for every other criterion it runs plain SGD for the
same number of epochs, so that both arms of a comparison see an identical
training budget (with all prune rates zero and a one-step update interval the
two arms produce bit-identical trajectories). ``iterative_taylor`` alternates
small global Taylor-ranked prunes with short fine-tuning bursts until the
target ratio is reached.

Determinism: every random choice (init, batch order, random criterion) derives
from the single config seed; batch order is a function of (seed, global epoch
index), and the global epoch counter is persisted in checkpoints so resumed
stages see the same data order as uninterrupted runs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import admm as admm_ops
from .adapter import evaluate, save_checkpoint, train_step
from .admm import (FILTER, WEIGHT, AdmmState, converged, init_state,
                   make_layer_spec, round_half_up, step_u, step_z)
from .config import RunConfig
from .criteria import make_decision
from .data import DatasetHandle, load_dataset, synthetic_dataset
from .diagnostics import MetricSeries, l1_snapshot, wz_distance_snapshot
from .errors import ConfigError, PruneSpecError
from .models import architecture_spec, build_model
from .network import Network
from .surgery import apply_surgery, prune_conv_layer

STALL_PATIENCE = 10


@dataclass
class RunRecord:
    """Everything a finished (or in-flight) run reports."""

    run_id: str
    series: MetricSeries = field(default_factory=MetricSeries)
    summary: dict = field(default_factory=dict)

    def warn(self, message: str) -> None:
        self.summary.setdefault("warnings", []).append(message)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_run(record: RunRecord, run_dir: str, config: RunConfig | None = None) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "record.csv"), "w", encoding="utf-8") as f:
        f.write(record.series.to_csv_text())
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(record.summary, f, indent=1, sort_keys=True, default=_jsonable)
    if config is not None:
        with open(os.path.join(run_dir, "config.resolved.cfg"), "w", encoding="utf-8") as f:
            f.write(config.to_text())


def load_run_record(run_dir: str) -> RunRecord:
    csv_path = os.path.join(run_dir, "record.csv")
    sum_path = os.path.join(run_dir, "summary.json")
    if not (os.path.exists(csv_path) and os.path.exists(sum_path)):
        raise FileNotFoundError(f"{run_dir} holds no completed run record")
    with open(csv_path, encoding="utf-8") as f:
        series = MetricSeries.from_csv_text(f.read())
    with open(sum_path, encoding="utf-8") as f:
        summary = json.load(f)
    return RunRecord(run_id=summary.get("run_id", os.path.basename(run_dir)),
                     series=series, summary=summary)


# ------------------------------------------------------------------ builders

def build_data(config: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    name = config.data.name
    if name == "synthetic":
        train = synthetic_dataset(config.seed, config.data.n_per_class,
                                  config.data.difficulty, split="train")
        test = synthetic_dataset(config.seed, config.data.n_per_class,
                                 config.data.difficulty, split="test")
    else:
        train = load_dataset(name, "train", config.data_root(),
                             config.data.subset_fraction, config.seed)
        test = load_dataset(name, "test", config.data_root(), 1.0, config.seed)
    return train, test


def build_config_model(config: RunConfig) -> Network:
    spec = architecture_spec(
        config.arch.name,
        conv_filters=config.arch.conv_filters or None,
        n_classes=config.arch.n_classes or None)
    return build_model(spec, config.seed)


def build_specs(config: RunConfig, model: Network) -> dict:
    convs = model.conv_layers()
    rates = layer_prune_rates(config, len(convs))
    granularity = WEIGHT if config.criterion == "admm_weight" else FILTER
    tolerance = config.admm.epsilon if config.admm.epsilon > 0 else None
    return {
        c.name: make_layer_spec(c.name, c.w.shape, rate, penalty=config.admm.rho,
                                tolerance=tolerance, granularity=granularity,
                                eps_per_element=config.admm.eps_per_element)
        for c, rate in zip(convs, rates)
    }


def layer_prune_rates(config: RunConfig, n_layers: int) -> tuple:
    if config.prune.rates:
        if len(config.prune.rates) != n_layers:
            raise ConfigError(
                f"prune.rates has {len(config.prune.rates)} entries, "
                f"model has {n_layers} conv layers")
        return config.prune.rates
    return (config.prune.rate,) * n_layers


def prune_count(n_filters: int, rate: float) -> int:
    """Filters to remove at the given rate; at least one always survives."""
    return min(round_half_up(rate * n_filters), n_filters - 1)


# ------------------------------------------------------------------- trainer

class _Trainer:
    """Owns one model plus its data and record; the single writer."""

    def __init__(self, config: RunConfig, model: Network | None = None,
                 record: RunRecord | None = None, start_epoch: int = 0,
                 out_dir: str | None = None):
        self.cfg = config
        self.model = model if model is not None else build_config_model(config)
        self.train_data, self.test_data = build_data(config)
        self.record = record if record is not None else RunRecord(config.resolved_run_id())
        self.epoch = start_epoch
        self.step = 0
        self.out_dir = out_dir
        self._stage_t0 = {}

    # -- bookkeeping

    def start_stage(self, stage: str) -> None:
        self._stage_t0[stage] = time.perf_counter()

    def end_stage(self, stage: str) -> None:
        secs = time.perf_counter() - self._stage_t0.pop(stage)
        self.record.summary.setdefault("stage_seconds", {})[stage] = secs

    def eval_and_record(self, stage: str, step: int | None = None) -> float:
        acc = evaluate(self.model, self.test_data, self.cfg.train.eval_batch_size)
        self.record.series.add(stage, self.epoch if step is None else step,
                               "", "test_accuracy", acc)
        return acc

    def checkpoint(self, stage: str, admm_state: AdmmState | None = None) -> str | None:
        if self.out_dir is None:
            return None
        os.makedirs(os.path.join(self.out_dir, "checkpoints"), exist_ok=True)
        path = os.path.join(self.out_dir, "checkpoints", f"{stage}.ckpt")
        save_checkpoint(self.model, path,
                        {"stage": stage, "seed": self.cfg.seed, "epoch": self.epoch},
                        admm_state=admm_state)
        return path

    # -- stages

    def plain_epochs(self, stage: str, n_epochs: int) -> None:
        cfg = self.cfg
        for _ in range(n_epochs):
            for batch in self.train_data.batches(cfg.train.batch_size, self.epoch):
                loss = train_step(self.model, batch, cfg.train.lr,
                                  weight_decay=cfg.train.weight_decay)
                self.record.series.add(stage, self.step, "", "train_loss", loss)
                self.step += 1
            self.eval_and_record(stage)
            self.epoch += 1

    def plain_steps(self, stage: str, n_steps: int, batch_size: int, cursor: dict) -> None:
        """SGD steps drawn from a persistent batch cursor (epoch-seeded order)."""
        cfg = self.cfg
        for _ in range(n_steps):
            batch = self._next_batch(cursor, batch_size)
            loss = train_step(self.model, batch, cfg.train.lr,
                              weight_decay=cfg.train.weight_decay)
            self.record.series.add(stage, self.step, "", "train_loss", loss)
            self.step += 1

    def _next_batch(self, cursor: dict, batch_size: int):
        it = cursor.get("iter")
        if it is not None:
            try:
                return next(it)
            except StopIteration:
                self.epoch += 1
        cursor["iter"] = self.train_data.batches(batch_size, self.epoch)
        return next(cursor["iter"])

    def admm_stage(self, state: AdmmState | None = None, stage: str = "admm") -> AdmmState:
        """Alternating updates: M gradient steps on W, then Z/U refresh."""
        cfg = self.cfg
        if state is None:
            state = init_state(self.model, build_specs(cfg, self.model), cfg.admm.norm)
        bpe = self.train_data.batches_per_epoch(cfg.train.batch_size)
        interval = bpe if cfg.admm.update_interval == "epoch" else cfg.admm.update_interval
        steps_since_update = 0
        done = False
        best_total = np.inf
        stall = 0
        for _ in range(cfg.train.epochs_admm):
            for batch in self.train_data.batches(cfg.train.batch_size, self.epoch):
                extra = {}
                for layer in self.model.conv_layers():
                    grad, _ = admm_ops.admm_regularizer(
                        layer.w, state.z[layer.name], state.u[layer.name],
                        state.specs[layer.name].penalty)
                    extra[layer.name] = grad
                loss = train_step(self.model, batch, cfg.train.lr, extra_grads=extra,
                                  weight_decay=cfg.train.weight_decay)
                self.record.series.add(stage, self.step, "", "train_loss", loss)
                self.step += 1
                steps_since_update += 1
                if steps_since_update >= interval:
                    steps_since_update = 0
                    all_ok, total = self._outer_update(state, stage)
                    if total < best_total - 1e-12:
                        best_total = total
                        stall = 0
                    else:
                        stall += 1
                        if stall == STALL_PATIENCE:
                            self.record.warn(
                                f"||W-Z|| not decreasing for {STALL_PATIENCE} "
                                f"outer iterations (total {total:.4g})")
                    if all_ok and cfg.admm.early_exit:
                        done = True
                        break
            self.eval_and_record(stage)
            self.epoch += 1
            if done:
                break
        self.record.summary["admm_converged"] = bool(done)
        self.record.summary["admm_outer_iterations"] = state.iteration
        if not done and cfg.admm.early_exit:
            self.record.warn(
                f"sparsity training hit the {cfg.train.epochs_admm}-epoch cap "
                f"before the stopping test was met")
        return state

    def _outer_update(self, state: AdmmState, stage: str) -> tuple[bool, float]:
        cfg = self.cfg
        state.iteration += 1
        all_ok = True
        for layer in self.model.conv_layers():
            spec = state.specs[layer.name]
            z_prev = state.z[layer.name]
            z_next = step_z(layer.w, state.u[layer.name], spec, state.norm)
            state.u[layer.name] = step_u(state.u[layer.name], layer.w, z_next)
            state.z[layer.name] = z_next
            if not converged(layer.w, z_next, z_prev, spec.tolerance, cfg.admm.exit_mode):
                all_ok = False
        distances = wz_distance_snapshot(self.model, state, self.record.series,
                                         stage=stage, step=state.iteration)
        return all_ok, float(sum(distances.values()))

    def prune_stage(self) -> None:
        cfg = self.cfg
        convs = self.model.conv_layers()
        rates = layer_prune_rates(cfg, len(convs))
        stats = None
        if cfg.criterion in ("mean_activation", "taylor"):
            stats = self.train_data.stats_batches(cfg.stats.batch_size,
                                                  cfg.stats.batches, salt=0)
        label = "admm_l1" if cfg.criterion in ("admm", "admm_weight") else cfg.criterion
        decisions = []
        prune_sets = {}
        for layer, rate in zip(convs, rates):
            count = prune_count(layer.w.shape[0], rate)
            d = make_decision(self.model, layer.name, label, count,
                              batches=stats, seed=cfg.seed)
            decisions.append(d)
            prune_sets[layer.name] = d.prune_indices
        params_before = self.model.parameter_count()
        self.model, plan = apply_surgery(self.model, prune_sets)
        self.record.summary["decisions"] = [d.to_dict() for d in decisions]
        self.record.summary["surgery_plan"] = plan.to_dict()
        self.record.summary["params_before_prune"] = params_before
        self.record.summary["params_after_prune"] = self.model.parameter_count()
        self.record.summary["accuracy_pre_finetune"] = self.eval_and_record("prune", step=0)


def _base_summary(config: RunConfig) -> dict:
    return {
        "run_id": config.resolved_run_id(),
        "pipeline": config.pipeline,
        "criterion": config.criterion,
        "prune_rate": config.prune.rate,
        "prune_rates": list(config.prune.rates),
        "seed": config.seed,
        "architecture": config.arch.name,
        "dataset": config.data.name,
        "extra_finetune": bool(config.iterative.extra_finetune) if config.iterative else False,
    }


# ------------------------------------------------------------ stage functions

def pretrain(config: RunConfig, out_dir: str | None = None,
             record: RunRecord | None = None) -> tuple[Network, RunRecord]:
    """Plain SGD training of a freshly initialized model."""
    tr = _Trainer(config, record=record, out_dir=out_dir)
    tr.record.summary.update(_base_summary(config))
    tr.start_stage("pretrain")
    tr.plain_epochs("pretrain", config.train.epochs_pretrain)
    tr.end_stage("pretrain")
    if config.train.epochs_pretrain > 0:
        tr.record.summary["pretrain_accuracy"] = tr.record.series.values(
            "test_accuracy", stage="pretrain")[1][-1]
    l1_snapshot(tr.model, tr.record.series, stage="pretrain")
    tr.checkpoint("pretrain")
    return tr.model, tr.record


def train_admm(model: Network, config: RunConfig, record: RunRecord | None = None,
               state: AdmmState | None = None, start_epoch: int = 0,
               out_dir: str | None = None) -> tuple[Network, AdmmState, RunRecord]:
    """Run the alternating sparsity-training loop on an existing model."""
    tr = _Trainer(config, model=model, record=record, start_epoch=start_epoch,
                  out_dir=out_dir)
    tr.start_stage("admm")
    state = tr.admm_stage(state=state)
    tr.end_stage("admm")
    return tr.model, state, tr.record


def finetune(model: Network, config: RunConfig, record: RunRecord | None = None,
             start_epoch: int = 0, epochs: int | None = None,
             out_dir: str | None = None) -> tuple[Network, RunRecord]:
    """Plain SGD fine-tuning of a (typically pruned) model."""
    tr = _Trainer(config, model=model, record=record, start_epoch=start_epoch,
                  out_dir=out_dir)
    tr.start_stage("finetune")
    tr.plain_epochs("finetune", config.train.epochs_finetune if epochs is None else epochs)
    tr.end_stage("finetune")
    return tr.model, tr.record


def single_shot(config: RunConfig, out_dir: str | None = None) -> tuple[Network, RunRecord]:
    """One run of (pretrain -> sparsity stage -> prune -> fine-tune)."""
    if config.pipeline != "single_shot":
        raise ConfigError(f"config pipeline is {config.pipeline!r}, not single_shot")
    tr = _Trainer(config, out_dir=out_dir)
    tr.record.summary.update(_base_summary(config))
    cfg = config

    skip_pretrain = cfg.train.admm_from_scratch and cfg.criterion in ("admm", "admm_weight")
    tr.start_stage("pretrain")
    if not skip_pretrain:
        tr.plain_epochs("pretrain", cfg.train.epochs_pretrain)
        if cfg.train.epochs_pretrain > 0:
            tr.record.summary["pretrain_accuracy"] = tr.record.series.values(
                "test_accuracy", stage="pretrain")[1][-1]
    tr.end_stage("pretrain")
    l1_snapshot(tr.model, tr.record.series, stage="pretrain")
    tr.checkpoint("pretrain")

    state = None
    if cfg.criterion in ("admm", "admm_weight"):
        tr.start_stage("admm")
        state = tr.admm_stage(stage="admm")
        tr.end_stage("admm")
        l1_snapshot(tr.model, tr.record.series, stage="admm")
        tr.checkpoint("admm", admm_state=state)
    elif cfg.train.epochs_admm > 0:
        # equal training budget for the non-ADMM arms of a comparison
        tr.start_stage("vanilla")
        tr.plain_epochs("vanilla", cfg.train.epochs_admm)
        tr.end_stage("vanilla")
        l1_snapshot(tr.model, tr.record.series, stage="vanilla")
        tr.checkpoint("vanilla")
    if tr.record.series.values("test_accuracy")[1]:
        tr.record.summary["accuracy_pre_prune"] = tr.record.series.values(
            "test_accuracy")[1][-1]

    tr.start_stage("prune")
    tr.prune_stage()
    tr.end_stage("prune")
    tr.checkpoint("prune")

    tr.start_stage("finetune")
    tr.plain_epochs("finetune", cfg.train.epochs_finetune)
    tr.end_stage("finetune")
    if cfg.train.epochs_finetune > 0:
        final = tr.record.series.values("test_accuracy", stage="finetune")[1][-1]
    else:
        final = tr.record.summary["accuracy_pre_finetune"]
    tr.record.summary["final_accuracy"] = final
    l1_snapshot(tr.model, tr.record.series, stage="finetune")
    tr.checkpoint("finetune", admm_state=state)
    return tr.model, tr.record


def iterative_taylor(config: RunConfig, out_dir: str | None = None) -> tuple[Network, RunRecord]:
    """Alternate small global Taylor-ranked prunes with short fine-tunes."""
    if config.pipeline != "iterative_te":
        raise ConfigError(f"config pipeline is {config.pipeline!r}, not iterative_te")
    it = config.iterative
    tr = _Trainer(config, out_dir=out_dir)
    tr.record.summary.update(_base_summary(config))

    tr.start_stage("pretrain")
    tr.plain_epochs("pretrain", config.train.epochs_pretrain)
    tr.end_stage("pretrain")
    if config.train.epochs_pretrain > 0:
        tr.record.summary["pretrain_accuracy"] = tr.record.series.values(
            "test_accuracy", stage="pretrain")[1][-1]
    l1_snapshot(tr.model, tr.record.series, stage="pretrain")
    tr.checkpoint("pretrain")

    convs = tr.model.conv_layers()
    rates = layer_prune_rates(config, len(convs))
    target_total = sum(prune_count(c.w.shape[0], r) for c, r in zip(convs, rates))
    prunable = sum(c.w.shape[0] - 1 for c in convs)
    if target_total > prunable:
        raise PruneSpecError(
            f"target of {target_total} pruned filters unreachable: at most "
            f"{prunable} can be removed while every layer keeps one filter")

    tr.start_stage("prune_iter")
    pruned_total = 0
    round_idx = 0
    cursor = {}
    while pruned_total < target_total:
        stats = tr.train_data.stats_batches(config.stats.batch_size,
                                            config.stats.batches, salt=round_idx + 1)
        pool = []
        for pos, layer in enumerate(tr.model.conv_layers()):
            scores = make_decision(tr.model, layer.name, "taylor",
                                   count=0, batches=stats).scores
            for j, s in enumerate(scores):
                pool.append((float(s), pos, j, layer.name))
        pool.sort()
        budget = min(it.filters_per_round, target_total - pruned_total)
        survivors = {l.name: l.w.shape[0] for l in tr.model.conv_layers()}
        chosen = {}
        for s, pos, j, name in pool:
            if budget == 0:
                break
            if survivors[name] - len(chosen.get(name, [])) <= 1:
                continue
            chosen.setdefault(name, []).append(j)
            budget -= 1
        if not chosen:
            raise PruneSpecError(
                "no filter can be pruned without emptying a layer; "
                f"{target_total - pruned_total} removals still required")
        for name, idx in chosen.items():
            tr.model = prune_conv_layer(tr.model, name, idx)
            pruned_total += len(idx)
        tr.plain_steps("prune_iter", it.updates_per_round, it.batch_size, cursor)
        tr.eval_and_record("prune_iter", step=round_idx)
        round_idx += 1
    tr.end_stage("prune_iter")
    tr.record.summary["prune_rounds"] = round_idx
    tr.record.summary["pruned_filters"] = pruned_total
    tr.record.summary["accuracy_pre_finetune"] = tr.record.series.values(
        "test_accuracy", stage="prune_iter")[1][-1]
    tr.checkpoint("prune")

    if it.extra_finetune and config.train.epochs_finetune > 0:
        tr.start_stage("finetune")
        tr.plain_epochs("finetune", config.train.epochs_finetune)
        tr.end_stage("finetune")
        final = tr.record.series.values("test_accuracy", stage="finetune")[1][-1]
    else:
        final = tr.record.summary["accuracy_pre_finetune"]
    tr.record.summary["final_accuracy"] = final
    l1_snapshot(tr.model, tr.record.series, stage="finetune")
    tr.checkpoint("finetune")
    return tr.model, tr.record


def run_pipeline(config: RunConfig, out_dir: str | None = None) -> tuple[Network, RunRecord]:
    if config.pipeline == "single_shot":
        model, record = single_shot(config, out_dir=out_dir)
    else:
        model, record = iterative_taylor(config, out_dir=out_dir)
    if out_dir is not None:
        write_run(record, out_dir, config)
    return model, record
