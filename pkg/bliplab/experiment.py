"""
Experiment runs: data generation, training, evaluation and prediction
driven by one JSON config and one output directory.

Directory layout::

    <out>/manifest.json
    <out>/data/{train,val,test}.jsonl
    <out>/checkpoints/*.ckpt
    <out>/logs/*.csv
    <out>/reports/*
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from bliplab.autodiff import RngStream
from bliplab.bayes.vad import VadConfig
from bliplab.data.graphs import (
    GraphBatch,
    build_batch,
    read_dataset,
    write_dataset,
)
from bliplab.data.simulation import SPLITS, SimConfig, generate_split
from bliplab.exceptions import ConfigError, DataError
from bliplab.inference.predict import (
    InferenceConfig,
    PredictiveSummary,
    predict_ensemble,
    predict_map,
    predict_mc,
    read_predictions,
    write_predictions,
)
from bliplab.metrics.metrics import (
    MetricReport,
    evaluate_predictions,
    write_report,
)
from bliplab.models.mpnn import MODES, ModelConfig, init_model
from bliplab.training.checkpoint import load_checkpoint, save_checkpoint
from bliplab.training.engine import (
    Checkpoint,
    TrainConfig,
    train_baseline,
    train_blip,
    train_ensemble,
)
from bliplab.utils.utils import config_hash, config_to_dict, open_config_file

logger = logging.getLogger(__name__)

RUN_MODES = MODES + ("ensemble",)
DEFAULT_MEMBERS = 4


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment.

    Attributes
    ----------
    sim, model, train : SimConfig, ModelConfig, TrainConfig
        Required sections.
    inference : InferenceConfig
        Sampling settings for eval and predict.
    ensemble_members : Optional[int]
        Train a deep ensemble of this many deterministic members.
    n_train, n_val, n_test : int
        Records generated per split.
    output_dir : str
        Root of the experiment directory.
    train_path, val_path, test_path : Optional[str]
        Dataset files; default to ``<output_dir>/data/<split>.jsonl``.
    """

    sim: SimConfig
    model: ModelConfig
    train: TrainConfig
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    ensemble_members: Optional[int] = None
    n_train: int = 3000
    n_val: int = 3000
    n_test: int = 3000
    output_dir: str = "runs/experiment"
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    test_path: Optional[str] = None

    def __post_init__(self):
        if self.ensemble_members is not None:
            if self.ensemble_members < 2:
                raise ConfigError(
                    "ensemble_members must be >= 2, got "
                    f"{self.ensemble_members}"
                )
            if self.model.mode != "deterministic":
                raise ConfigError(
                    "ensemble_members needs model.mode deterministic, got "
                    f"{self.model.mode}"
                )

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def run_mode(self) -> str:
        return "ensemble" if self.ensemble_members else self.model.mode

    def dataset_path(self, split: str) -> Path:
        configured = getattr(self, f"{split}_path")
        if configured is not None:
            return Path(configured)
        return self.out / "data" / f"{split}.jsonl"


def load_experiment(file_path: Union[str, Path]) -> ExperimentConfig:
    return open_config_file(file_path, ExperimentConfig)


def override_config(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
    samples: Optional[int] = None,
    members: Optional[int] = None,
    p: Optional[float] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    """
    Apply command-line overrides.

    ``seed`` replaces the generator, training and inference seeds.
    ``mode`` switches the uncertainty mode; switching to blip adds a
    default inference network when the config has none, and switching to
    mc_dropout needs a dropout probability from ``p`` or the config.
    """
    sim, model, train = config.sim, config.model, config.train
    inference = config.inference
    ensemble_members = config.ensemble_members
    if seed is not None:
        sim = replace(sim, seed=seed)
        train = replace(train, seed=seed)
        inference = replace(inference, seed=seed)
    if samples is not None:
        inference = replace(inference, n_samples=samples)

    target_mode = mode or config.run_mode
    if target_mode not in RUN_MODES:
        raise ConfigError(
            f"mode must be one of {RUN_MODES}, got {target_mode!r}"
        )
    if target_mode == "ensemble":
        ensemble_members = members or ensemble_members or DEFAULT_MEMBERS
        model = replace(model, mode="deterministic", dropout_p=None, vad=None)
    else:
        if members is not None:
            raise ConfigError("--members is only valid in ensemble mode")
        ensemble_members = None
        dropout_p = p if p is not None else model.dropout_p
        model = replace(
            model,
            mode=target_mode,
            dropout_p=dropout_p if target_mode == "mc_dropout" else None,
            vad=(
                (model.vad or VadConfig()) if target_mode == "blip" else None
            ),
        )
    if p is not None and target_mode != "mc_dropout":
        raise ConfigError("--p is only valid in mc_dropout mode")

    return replace(
        config,
        sim=sim,
        model=model,
        train=train,
        inference=inference,
        ensemble_members=ensemble_members,
        output_dir=str(out) if out is not None else config.output_dir,
    )


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(config: ExperimentConfig, section: str, entry: Dict):
    path = config.out / "manifest.json"
    manifest = {}
    if path.is_file():
        with open(path, "r") as f:
            manifest = json.load(f)
    manifest["config_hash"] = config_hash(config_to_dict(config))
    manifest["seed"] = config.sim.seed
    manifest[section] = entry
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _make_dirs(config: ExperimentConfig):
    for name in ("data", "checkpoints", "logs", "reports"):
        try:
            (config.out / name).mkdir(parents=True, exist_ok=True)
        except OSError as error:
            raise DataError(
                f"Cannot create output directory {config.out / name}: "
                f"{error}"
            ) from None


def cmd_generate(config: ExperimentConfig, jobs: int = 1) -> Dict[str, Path]:
    """
    Simulate the three splits and record them in the manifest.

    Returns
    -------
    Dict[str, Path]
        The written dataset file of every split.
    """
    _make_dirs(config)
    datasets = generate_split(
        config.sim, config.n_train, config.n_val, config.n_test, jobs=jobs
    )
    paths = {}
    entry = {}
    for split in SPLITS:
        path = config.dataset_path(split)
        path.parent.mkdir(parents=True, exist_ok=True)
        paths[split] = write_dataset(path, datasets[split])
        entry[split] = {
            "path": str(path),
            "n_records": len(datasets[split]),
            "sha256": _file_sha256(path),
        }
    _update_manifest(config, "data", entry)
    logger.info("Wrote datasets to %s", config.out / "data")
    return paths


def _load_split(config: ExperimentConfig, split: str):
    return read_dataset(config.dataset_path(split), config.sim.n_particles)


def _write_history(path: Path, checkpoint: Checkpoint) -> Path:
    pd.DataFrame(
        checkpoint.history,
        columns=[
            "epoch",
            "train_loss",
            "train_mse",
            "kl",
            "weighted_kl",
            "val_mse",
        ],
    ).to_csv(path, index=False)
    return path


def cmd_train(config: ExperimentConfig, jobs: int = 1) -> List[Path]:
    """
    Train the configured model (or ensemble) on the train/val splits.

    Writes one checkpoint per model, a CSV epoch log per model and
    ``reports/train_summary.json``.

    Returns
    -------
    List[Path]
        The checkpoint files.
    """
    _make_dirs(config)
    data = {split: _load_split(config, split) for split in ("train", "val")}
    mode = config.run_mode
    logger.info(
        "Training %s %s on %d graphs",
        config.model.architecture,
        mode,
        len(data["train"]),
    )

    if mode == "ensemble":
        checkpoints = train_ensemble(
            config.model,
            data,
            config.train,
            n_members=config.ensemble_members,
            jobs=jobs,
        )
        names = [f"member_{k}" for k in range(len(checkpoints))]
    else:
        model = init_model(
            config.model, RngStream(config.train.seed).child("init")
        )
        if mode == "blip":
            checkpoints = [train_blip(model, data, config.train)]
        else:
            checkpoints = [train_baseline(model, data, config.train, mode)]
        names = ["model"]

    paths, summary = [], {"mode": mode, "models": []}
    for name, checkpoint in zip(names, checkpoints):
        path = save_checkpoint(
            config.out / "checkpoints" / f"{name}.ckpt", checkpoint
        )
        log_path = _write_history(
            config.out / "logs" / f"{name}_train.csv", checkpoint
        )
        paths.append(path)
        last = checkpoint.history[-1]
        summary["models"].append(
            {
                "checkpoint": str(path),
                "log": str(log_path),
                "best_epoch": checkpoint.epoch,
                "best_val_mse": min(
                    row["val_mse"] for row in checkpoint.history
                ),
                "final_train_loss": last["train_loss"],
                "n_parameters": checkpoint.model.n_parameters,
            }
        )
    with open(config.out / "reports" / "train_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    _update_manifest(
        config, "checkpoints", {"mode": mode, "files": [str(p) for p in paths]}
    )
    return paths


def _checkpoint_paths(
    config: ExperimentConfig, checkpoints: Optional[Sequence[str]]
) -> List[Path]:
    if checkpoints:
        return [Path(path) for path in checkpoints]
    found = sorted((config.out / "checkpoints").glob("*.ckpt"))
    if not found:
        raise DataError(f"No checkpoints found in {config.out}/checkpoints")
    return found


def _load_members(
    config: ExperimentConfig, checkpoints: Optional[Sequence[str]]
) -> List[Checkpoint]:
    paths = _checkpoint_paths(config, checkpoints)
    members = [load_checkpoint(path) for path in paths]
    for member in members:
        if member.model_config.architecture != config.model.architecture:
            raise DataError(
                "Checkpoint was trained for "
                f"{member.model_config.architecture} but the dataset is "
                f"featurized for {config.model.architecture}"
            )
    return members


def _predictions(
    config: ExperimentConfig,
    members: Sequence[Checkpoint],
    batch: GraphBatch,
    jobs: int,
) -> Dict[str, PredictiveSummary]:
    inference = config.inference
    if len(members) > 1:
        return {
            "ensemble": predict_ensemble(
                members, batch, inference.aleatoric_var
            )
        }
    model = members[0].model
    summaries = {}
    if model.config.mode in ("deterministic", "blip"):
        summaries["map"] = predict_map(model, batch)
    if model.config.mode != "deterministic":
        summaries["mc"] = predict_mc(
            model,
            batch,
            inference.n_samples,
            RngStream(inference.seed),
            inference.aleatoric_var,
            jobs=jobs,
        )
    return summaries


def cmd_eval(
    config: ExperimentConfig,
    checkpoints: Optional[Sequence[str]] = None,
    predictions: Optional[Union[str, Path]] = None,
    jobs: int = 1,
) -> Dict[str, MetricReport]:
    """
    Score checkpoints on the test split, or re-score a prediction dump.

    A blip model gets both a MAP and an MC report, an MC-dropout model an
    MC report, a deterministic model a MAP report without uncertainty
    scores and several checkpoints one ensemble report.

    Returns
    -------
    Dict[str, MetricReport]
        Reports by variant; each is written to ``reports/``.
    """
    _make_dirs(config)
    reports_dir = config.out / "reports"
    if predictions is not None:
        summary, targets, graph_index = read_predictions(predictions)
        report = evaluate_predictions(summary, targets, graph_index)
        write_report(report, reports_dir, "metrics_predictions")
        return {"predictions": report}

    members = _load_members(config, checkpoints)
    batch = build_batch(
        _load_split(config, "test"), members[0].model_config.architecture
    )
    reports = {}
    for name, summary in _predictions(config, members, batch, jobs).items():
        report = evaluate_predictions(summary, batch.targets, batch.node_graph)
        write_report(report, reports_dir, f"metrics_{name}")
        logger.info("%s: %s", name, report.to_dict())
        reports[name] = report
    return reports


def cmd_predict(
    config: ExperimentConfig,
    input_path: Union[str, Path],
    checkpoints: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> Path:
    """
    Write per-node predictions for the graphs in ``input_path``.

    Uses MC sampling when ``inference.mode`` is "mc" and the model is
    stochastic, the member spread for several checkpoints and a MAP pass
    otherwise. The dump goes to ``reports/predictions.jsonl``.
    """
    _make_dirs(config)
    members = _load_members(config, checkpoints)
    batch = build_batch(
        read_dataset(input_path, config.sim.n_particles),
        members[0].model_config.architecture,
    )
    inference = config.inference
    model = members[0].model
    if len(members) > 1:
        summary = predict_ensemble(members, batch, inference.aleatoric_var)
    elif inference.mode == "mc" and model.config.mode != "deterministic":
        summary = predict_mc(
            model,
            batch,
            inference.n_samples,
            RngStream(inference.seed),
            inference.aleatoric_var,
            jobs=jobs,
        )
    else:
        summary = predict_map(model, batch)
    path = config.out / "reports" / "predictions.jsonl"
    write_predictions(path, summary, batch)
    logger.info("Wrote %d node predictions to %s", batch.n_nodes, path)
    return path
