"""End-to-end experiment pipeline: data -> embeddings -> tasks -> training ->
metrics artifacts, plus report comparison and the encoder-distance probe.
"""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, taskgen, trainer
from .config import ExperimentConfig
from .data import (LabeledDataset, SplitSpec, load_dset, load_mnist_idx, split,
                   subsample_labeled, synth_blobs)
from .embedding import (AutoencoderConfig, EmbeddingMatrix, embed,
                        export_embeddings, train_autoencoder)
from .errors import ComparisonError, DataError, ParameterError
from .trainer import TrainConfig, write_episode_csv


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for structured errors."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class RunReport:
    config: dict
    regime: str
    seed: int
    dataset: str
    threads: str | None
    metrics: dict
    artifacts: dict
    run_dir: str
    wall_clock_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport(**json.loads(text))


def _next_run_dir(base: Path) -> Path:
    base.mkdir(parents=True, exist_ok=True)
    idx = 1
    while (base / f"run-{idx:04d}").exists():
        idx += 1
    path = base / f"run-{idx:04d}"
    path.mkdir()
    return path


def _load_base_data(cfg: ExperimentConfig):
    """Returns (train, test) datasets for the configured source."""
    if cfg.data_kind == "idx":
        train = load_mnist_idx(cfg.train_images, cfg.train_labels, name="mnist-train")
        test = load_mnist_idx(cfg.test_images, cfg.test_labels, name="mnist-test")
        return train, test
    if cfg.data_kind == "dset":
        train = load_dset(cfg.train_path, name=Path(cfg.train_path).stem)
        if cfg.test_path:
            return train, load_dset(cfg.test_path, name=Path(cfg.test_path).stem)
        parts = split(train, SplitSpec((1.0 - cfg.test_fraction, cfg.test_fraction),
                                       seed=cfg.seed, stratified=True))
        return parts[0], parts[1]
    dataset, _ = synth_blobs(cfg.blobs_k, cfg.blobs_per_cluster, cfg.blobs_d,
                             cfg.blobs_spread, cfg.seed)
    parts = split(dataset, SplitSpec((1.0 - cfg.test_fraction, cfg.test_fraction),
                                     seed=cfg.seed, stratified=True))
    return parts[0], parts[1]


def _train_config(cfg: ExperimentConfig, n_tasks: int) -> TrainConfig:
    return TrainConfig(alpha=cfg.alpha, beta=cfg.beta, episodes=cfg.episodes,
                       batch_size=cfg.batch_size,
                       tasks_per_episode=min(cfg.tasks_per_episode, n_tasks),
                       meta_order=cfg.meta_order, seed=cfg.seed,
                       hvp_mode=cfg.hvp_mode, eval_every=cfg.eval_every)


def run(cfg: ExperimentConfig, out_dir: str | None = None) -> RunReport:
    """Execute one experiment and write report.json / metrics.csv / checkpoint."""
    started = time.time()
    run_dir = _next_run_dir(Path(out_dir or cfg.out_dir))

    with _stage("load data"):
        train_full, test = _load_base_data(cfg)
        if cfg.label_fraction < 1.0:
            labeled, unlabeled, sel_idx, rest_idx = subsample_labeled(
                train_full, cfg.label_fraction, cfg.seed, return_indices=True)
            unlabeled_truth = train_full.labels[rest_idx]
        else:
            labeled, unlabeled = train_full, None
            unlabeled_truth = None
        val = None
        if cfg.val_fraction > 0.0:
            labeled, val = split(labeled, SplitSpec(
                (1.0 - cfg.val_fraction, cfg.val_fraction), seed=cfg.seed))

    n_classes = labeled.class_count
    k = cfg.k or n_classes
    partitions: list[taskgen.Partition] = []
    nmi_values: list[float] = []
    aux_tasks: list[taskgen.TaskDataset] = []
    embedding_matrix: EmbeddingMatrix | None = None

    if cfg.regime in ("mtl_joint", "meta_mtl"):
        with _stage("train embedding"):
            use_unlabeled = (cfg.use_unlabeled_for_embedding and unlabeled is not None
                             and unlabeled.n > 0)
            source = unlabeled if use_unlabeled else labeled
            source_truth = unlabeled_truth if use_unlabeled else labeled.labels
            ae_cfg = AutoencoderConfig(latent_dim=cfg.latent_dim, epochs=cfg.ae_epochs,
                                       batch_size=cfg.ae_batch_size,
                                       learning_rate=cfg.ae_learning_rate,
                                       momentum=cfg.ae_momentum, seed=cfg.seed)
            autoencoder = train_autoencoder(source, ae_cfg)
            embedding_matrix = embed(source, autoencoder)
        with _stage("build tasks"):
            partitions = taskgen.make_partitions(embedding_matrix, cfg.task_count,
                                                 k, cfg.transform, cfg.seed)
            aux_tasks = [taskgen.partition_to_task(p, source, task_id=i + 1)
                         for i, p in enumerate(partitions)]
            if source_truth is not None:
                nmi_values = [taskgen.cluster_nmi(p.assignments, source_truth)
                              for p in partitions]
    elif cfg.regime == "mtl_random_labels":
        with _stage("build tasks"):
            aux_tasks = [taskgen.random_label_task(labeled, k, cfg.seed ^ t,
                                                   task_id=t + 1)
                         for t in range(cfg.task_count)]
            if labeled.labels is not None:
                nmi_values = [taskgen.cluster_nmi(a.pseudo_labels, labeled.labels)
                              for a in aux_tasks]

    with _stage("build model"):
        arch = nn.arch_spec(cfg.arch, labeled.input_shape, hidden=cfg.hidden) \
            if cfg.arch == "toy_dense" else nn.arch_spec(cfg.arch)
        counts = [n_classes] + [a.num_classes for a in aux_tasks]
        model = nn.build(arch, counts, cfg.seed)

    with _stage("train"):
        tcfg = _train_config(cfg, len(counts))
        if cfg.regime == "stl":
            model, logs = trainer.train_stl(model, labeled, tcfg, val_data=val)
        elif cfg.regime in ("mtl_joint", "mtl_random_labels"):
            model, logs = trainer.train_mtl_joint(model, labeled, aux_tasks, tcfg,
                                                  val_data=val)
        else:
            model, logs = trainer.train_meta_mtl(model, labeled, aux_tasks, tcfg,
                                                 val_data=val)

    with _stage("evaluate"):
        metrics = {
            "train_accuracy": trainer.evaluate(model, labeled),
            "val_accuracy": trainer.evaluate(model, val) if val is not None else None,
            "test_accuracy": trainer.evaluate(model, test),
            "final_main_loss": logs[-1].meta_loss,
            "final_task_losses": list(logs[-1].task_losses),
            "partition_nmi": nmi_values,
            "n_labeled": labeled.n,
            "n_unlabeled": unlabeled.n if unlabeled is not None else 0,
        }

    with _stage("write artifacts"):
        ckpt = run_dir / "checkpoint.mmtl"
        nn.save_checkpoint(ckpt, model)
        csv_path = run_dir / "metrics.csv"
        write_episode_csv(csv_path, logs)
        partition_files = []
        for i, p in enumerate(partitions):
            ppath = run_dir / f"partition_{i}.txt"
            taskgen.export_partition(ppath, p)
            partition_files.append(str(ppath))
        if embedding_matrix is not None:
            export_embeddings(run_dir / "embeddings.emb1", embedding_matrix)

        report = RunReport(
            config=cfg.to_dict(), regime=cfg.regime, seed=cfg.seed,
            dataset=train_full.name, threads=os.environ.get("MMTL_THREADS"),
            metrics=metrics,
            artifacts={"checkpoint": str(ckpt), "metrics_csv": str(csv_path),
                       "partitions": partition_files},
            run_dir=str(run_dir),
            wall_clock_seconds=time.time() - started)
        (run_dir / "report.json").write_text(report.to_json())
    return report


def load_report(path) -> RunReport:
    return RunReport.from_json(Path(path).read_text())


def compare(report_a: RunReport, report_b: RunReport) -> list[tuple[str, float, float, float]]:
    """Per-metric deltas (b minus a) for two runs of the same data and seed."""
    if report_a.dataset != report_b.dataset:
        raise ComparisonError(
            f"datasets differ: {report_a.dataset!r} vs {report_b.dataset!r}")
    if report_a.seed != report_b.seed:
        raise ComparisonError(f"seeds differ: {report_a.seed} vs {report_b.seed}")
    rows = []
    for key in sorted(set(report_a.metrics) & set(report_b.metrics)):
        a, b = report_a.metrics[key], report_b.metrics[key]
        if isinstance(a, (int, float)) and isinstance(b, (int, float)) \
                and not isinstance(a, bool):
            rows.append((key, float(a), float(b), float(b) - float(a)))
    return rows


def _load_pairs(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            a, b = line.split(",")[:2]
            if not (a.strip().lstrip("-").isdigit() and b.strip().lstrip("-").isdigit()):
                continue  # header line
            pairs.append((int(a), int(b)))
    if not pairs:
        raise DataError(f"no index pairs found in {path}")
    return pairs


def probe(checkpoint_a, checkpoint_b, pairs_path, data: LabeledDataset):
    """Per-pair encoder-output distances under two checkpoints.

    Returns rows (i, j, dist_a, dist_b) where dist_x is the Euclidean
    distance between the shared-layer outputs of examples i and j under
    checkpoint x.
    """
    model_a = nn.load_checkpoint(checkpoint_a)
    model_b = nn.load_checkpoint(checkpoint_b)
    if model_a.arch != model_b.arch:
        raise ComparisonError(
            f"checkpoints use different architectures: {model_a.arch.name} "
            f"vs {model_b.arch.name}")
    pairs = _load_pairs(pairs_path)
    for i, j in pairs:
        if not (0 <= i < data.n and 0 <= j < data.n):
            raise DataError(f"pair ({i}, {j}) is out of range for n={data.n}")
    idx = sorted({i for p in pairs for i in p})
    pos = {example: row for row, example in enumerate(idx)}
    ha = nn.shared_output(model_a, data.inputs[idx]).data
    hb = nn.shared_output(model_b, data.inputs[idx]).data
    rows = []
    for i, j in pairs:
        da = float(np.linalg.norm(ha[pos[i]] - ha[pos[j]]))
        db = float(np.linalg.norm(hb[pos[i]] - hb[pos[j]]))
        rows.append((i, j, da, db))
    return rows
