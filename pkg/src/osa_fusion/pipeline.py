"""Data assembly, training loop, evaluation, prediction and the ablation grid."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .head import LOSSES
from .errors import CompatibilityError, DeterminismError, DivergenceError, InputError, MissingSubjectError
from .mesh import FaceMesh, KeypointSelection, load_meshes, mesh_features
from .metrics import MetricsReport, aggregate, evaluate, write_key_values, write_metrics_csv
from .model import Batch, DualEncoder, decode_record, encode_row, feature_scaler, nominal_mask
from .sampling import LabeledDataset, label_from_ahi, random_oversample, severity_index, smote_oversample, stratified_split
from .synth import PLANTED_LANDMARKS, SynthConfig, generate
from .tensor import grad_check_report
from .text import SEVERITIES, PatientRecord, Vocabulary, import_embeddings, load_patients, templatize

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def record_label(rec: PatientRecord) -> int | None:
    if rec.severity is not None:
        return severity_index(rec.severity)
    if rec.ahi is not None:
        return severity_index(label_from_ahi(rec.ahi))
    return None


def build_dataset(records: Sequence[PatientRecord], meshes: Sequence[FaceMesh], keypoints: Sequence[int],
                  require_labels: bool = True) -> LabeledDataset:
    """Join records to meshes by subject id and encode one numeric row each."""
    sel = KeypointSelection(keypoints)
    by_id = {m.subject_id: m for m in meshes}
    rows, ids, labels = [], [], []
    for rec in records:
        if rec.id not in by_id:
            raise MissingSubjectError(f"no facial mesh for subject {rec.id!r}")
        y = record_label(rec)
        if y is None and require_labels:
            raise InputError(f"subject {rec.id!r} has neither AHI nor severity")
        rows.append(encode_row(rec, mesh_features(by_id[rec.id], sel)))
        ids.append(rec.id)
        labels.append(y if y is not None else 1)
    n_image = 3 * len(sel)
    X = np.vstack(rows) if rows else np.zeros((0, n_image + 9))
    return LabeledDataset(ids, X, np.asarray(labels), nominal=nominal_mask(n_image))


def load_dataset(cfg: RunConfig, require_labels: bool = True) -> LabeledDataset:
    if cfg.patients is None or cfg.meshes is None:
        raise InputError("config needs both 'patients' and 'meshes' paths")
    return build_dataset(load_patients(cfg.patients), load_meshes(cfg.meshes, cfg.thetas), cfg.keypoints,
                         require_labels)


def as_batch(d: LabeledDataset, idx=None) -> Batch:
    if idx is None:
        return Batch(d.X, d.ids, d.synthetic)
    return Batch(d.X[idx], [d.ids[i] for i in idx], d.synthetic[idx])


def oversample(d: LabeledDataset, cfg: RunConfig, seed) -> LabeledDataset:
    if cfg.oversample == "ros":
        return random_oversample(d, seed)
    if cfg.oversample == "smote":
        return smote_oversample(d, cfg.smote_k, seed)
    return d


@dataclass
class Splits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    train_balanced: LabeledDataset


def make_splits(data: LabeledDataset, cfg: RunConfig, seed: int) -> Splits:
    train, val, test = stratified_split(data, cfg.split, seed)
    return Splits(train, val, test, oversample(train, cfg, seed))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_loss: float
    best_val_accuracy: float
    lr: float
    temperature: float


@dataclass
class TrainState:
    epoch: int = 0
    best_val_accuracy: float = -1.0
    best_val_loss: float = np.inf
    best_epoch: int = -1
    lr: float = 0.0
    checkpoint: str | None = None
    history: list[EpochLog] = field(default_factory=list)


@dataclass
class RunResult:
    seed: int
    state: TrainState
    test: MetricsReport
    model: DualEncoder
    splits: Splits
    test_probs: np.ndarray


def _temperature(cfg: RunConfig, epoch: int) -> float:
    if cfg.gate_temperature_final is None or cfg.epochs <= 1:
        return cfg.gate_temperature
    frac = min(epoch / (cfg.epochs - 1), 1.0)
    return cfg.gate_temperature + frac * (cfg.gate_temperature_final - cfg.gate_temperature)


def _val_loss(model: DualEncoder, probs: np.ndarray, y: np.ndarray) -> float:
    return LOSSES[model.cfg.loss](probs, y).item()


def train(cfg: RunConfig, seed: int = 0, data: LabeledDataset | None = None, checkpoint: str | Path | None = None,
          text_embeddings=None) -> RunResult:
    """Mini-batch Adam on the balanced training split.

    The learning rate is multiplied by ``lr_factor`` after ``lr_patience``
    epochs without a validation improvement, and training stops after
    ``patience`` such epochs. The best-validation parameters are restored
    (and written to ``checkpoint``) before the test split is scored.
    """
    if data is None:
        data = load_dataset(cfg)
    if text_embeddings is None and cfg.embeddings is not None:
        text_embeddings = import_embeddings(cfg.embeddings)
    splits = make_splits(data, cfg, seed)
    n_image = 3 * len(cfg.keypoints)
    train_rows = splits.train
    vocab = Vocabulary.build(templatize(decode_record(r, n_image, sid)) for r, sid in zip(train_rows.X, train_rows.ids))
    mean, std = feature_scaler(train_rows.X[:, :n_image])
    model = DualEncoder(cfg, n_image, vocab, mean, std, seed=seed, text_embeddings=text_embeddings)

    bal = splits.train_balanced
    val_batch, val_y = as_batch(splits.val), splits.val.y
    rng = np.random.default_rng([seed, 7])
    state = TrainState(lr=cfg.lr, checkpoint=str(checkpoint) if checkpoint else None)
    best = model.store.state_arrays()
    best_temp = model.temperature
    stale = lr_stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        model.temperature = _temperature(cfg, epoch)
        order = rng.permutation(len(bal))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model.store.zero_grad()
            loss, _ = model.loss(as_batch(bal, idx), bal.y[idx], step=step, seed=[seed, step])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}, step {step} (lr={state.lr:g})")
            loss.backward()
            model.store.adam_step(state.lr)
            losses.append(loss.item())
            step += 1
        probs = model.predict_proba(val_batch)
        val_acc = float(np.mean(np.argmax(probs, axis=1) + 1 == val_y))
        val_loss = _val_loss(model, probs, val_y)
        improved = val_acc > state.best_val_accuracy or (
            val_acc == state.best_val_accuracy and val_loss < state.best_val_loss)
        if improved:
            state.best_val_accuracy, state.best_val_loss, state.best_epoch = val_acc, val_loss, epoch
            best = model.store.state_arrays()
            best_temp = model.temperature
            stale = lr_stale = 0
        else:
            stale += 1
            lr_stale += 1
            if lr_stale >= cfg.lr_patience:
                state.lr *= cfg.lr_factor
                lr_stale = 0
        state.epoch = epoch
        state.history.append(EpochLog(epoch, float(np.mean(losses)), val_acc, val_loss,
                                      state.best_val_accuracy, state.lr, model.temperature))
        log.debug("seed %d epoch %d loss %.4f val_acc %.4f lr %.2e", seed, epoch, np.mean(losses), val_acc, state.lr)
        if stale >= cfg.patience:
            break
    model.store.load_arrays(best)
    model.temperature = best_temp
    test_probs = model.predict_proba(as_batch(splits.test))
    report = evaluate(test_probs, splits.test.y)
    if checkpoint is not None:
        model.save(checkpoint, {"seed": seed, "best_epoch": state.best_epoch,
                                "best_val_accuracy": state.best_val_accuracy})
    return RunResult(seed, state, report, model, splits, test_probs)


def evaluate_model(model: DualEncoder, d: LabeledDataset) -> MetricsReport:
    model.check_inputs(d.X.shape[1])
    return evaluate(model.predict_proba(as_batch(d)), d.y)


def run_seeds(cfg: RunConfig, data: LabeledDataset | None = None, out_dir: str | Path | None = None,
              text_embeddings=None) -> tuple[list[RunResult], MetricsReport]:
    data = load_dataset(cfg) if data is None else data
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        ckpt = out / f"checkpoint_seed{seed}.npz" if out is not None else None
        results.append(train(cfg, seed, data, ckpt, text_embeddings))
        log.info("seed %d: test acc %.4f auc %.4f (best epoch %d)", seed, results[-1].test.accuracy,
                 results[-1].test.auc, results[-1].state.best_epoch)
    agg = aggregate([r.test for r in results])
    if out is not None:
        write_metrics_csv(out / "metrics.csv", [(f"seed{r.seed}", r.test) for r in results])
        write_key_values(out / "metrics.txt", agg)
        write_history(out / "history.csv", results)
    return results, agg


def write_history(path, results: Sequence[RunResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epoch", "train_loss", "val_accuracy", "val_loss", "best_val_accuracy", "lr",
                    "temperature"])
        for r in results:
            for h in r.state.history:
                w.writerow([r.seed, h.epoch, h.train_loss, h.val_accuracy, h.val_loss, h.best_val_accuracy,
                            h.lr, h.temperature])


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

# (group, row label, overrides) in the order of the published ablation table.
ABLATION_ROWS = (
    ("Data Oversampling", "W/o. Oversampling", {"oversample": "none"}),
    ("Data Oversampling", "SMOTE", {"oversample": "smote"}),
    ("Data Oversampling", "ROS", {"oversample": "ros"}),
    ("Objective Function", "CrossEntropy Loss", {"loss": "cross_entropy"}),
    ("Objective Function", "Ordinal Regression", {"loss": "ordinal"}),
    ("Modality Fusion", "AutoEncoder", {"fusion": "autoencoder"}),
    ("Modality Fusion", "Cross Attention", {"fusion": "cross_attention"}),
    ("Different Modality", "Textual", {"modality": "text"}),
    ("Different Modality", "Visual", {"modality": "visual"}),
    ("Different Modality", "Multimodal", {"modality": "multimodal"}),
)

FULL_MODEL = {"oversample": "ros", "loss": "ordinal", "fusion": "cross_attention", "modality": "multimodal"}


@dataclass
class AblationRow:
    group: str
    label: str
    overrides: dict
    accuracies: list[float]
    aucs: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.aucs))


def ablate(cfg: RunConfig, data: LabeledDataset | None = None, out_dir: str | Path | None = None,
           text_embeddings=None) -> list[AblationRow]:
    """One-axis-at-a-time variations of the full model, all on the same seeds and splits."""
    data = load_dataset(cfg) if data is None else data
    base = replace(cfg, **FULL_MODEL)
    cache: dict[tuple, tuple[list[float], list[float]]] = {}
    rows = []
    for group, label, over in ABLATION_ROWS:
        variant = replace(base, **over)
        key = (variant.oversample, variant.loss, variant.fusion, variant.modality)
        if key not in cache:
            accs, aucs = [], []
            for seed in cfg.seeds:
                res = train(variant, seed, data, text_embeddings=text_embeddings)
                accs.append(res.test.accuracy)
                aucs.append(res.test.auc)
            cache[key] = (accs, aucs)
            log.info("ablation %-20s acc %.4f auc %.4f", label, np.mean(accs), np.mean(aucs))
        rows.append(AblationRow(group, label, over, *cache[key]))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_ablation(Path(out_dir) / "ablation.csv", rows, cfg.seeds)
    return rows


def write_ablation(path, rows: Sequence[AblationRow], seeds: Sequence[int]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "model", "acc_mean", "auc_mean", *(f"acc_seed{s}" for s in seeds)])
        for r in rows:
            w.writerow([r.group, r.label, f"{100 * r.mean_accuracy:.2f}", f"{100 * r.mean_auc:.2f}",
                        *(f"{100 * a:.2f}" for a in r.accuracies)])


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Different Impact':<20} {'Model':<20} {'Acc(%)':>7} {'AUC(%)':>7}"]
    last = None
    for r in rows:
        group = r.group if r.group != last else ""
        last = r.group
        lines.append(f"{group:<20} {r.label:<20} {100 * r.mean_accuracy:7.1f} {100 * r.mean_auc:7.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

PREDICTION_HEADER = ["id", "severity", "p_normal", "p_mild", "p_moderate", "p_severe"]


def predict(checkpoint, patients, meshes, thetas=None, embeddings=None, harden: int | None = None,
            out=None) -> list[tuple[str, str, np.ndarray]]:
    """Score every listed patient with dropout off; optionally keep only the top-``harden`` gated features."""
    text_embeddings = import_embeddings(embeddings) if embeddings is not None else None
    model, _ = DualEncoder.load(checkpoint, text_embeddings)
    records = load_patients(patients)
    d = build_dataset(records, load_meshes(meshes, thetas), model.cfg.keypoints, require_labels=False)
    model.check_inputs(d.X.shape[1])
    if harden is not None and not model.uses_image:
        raise CompatibilityError("--harden needs a model with an image path")
    probs = model.predict_proba(as_batch(d), hard_k=harden)
    rows = [(sid, SEVERITIES[int(np.argmax(p))], p) for sid, p in zip(d.ids, probs)]
    if out is not None:
        with Path(out).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PREDICTION_HEADER)
            for sid, sev, p in rows:
                w.writerow([sid, sev, *(repr(float(v)) for v in p)])
    return rows


# ---------------------------------------------------------------------------
# gradient check of the composed model
# ---------------------------------------------------------------------------

# Sizes small enough for finite differences over every parameter entry.
TINY = dict(d_model=4, n_image_tokens=2, gate_neurons=3, hidden=(5,), keypoints=PLANTED_LANDMARKS[:3],
            ae_bottleneck=3, max_text_len=64, dropout=0.0)
GRADCHECK_TOLERANCE = 1e-4


def gradient_check(cfg: RunConfig | None = None, seed: int = 0, n_subjects: int = 6, hook=None) -> dict[str, float]:
    """Max relative gradient error per parameter on the full training loss.

    Runs on a handful of synthetic subjects with fixed gate noise. Dropout
    would make the loss stochastic, so it must be off.
    """
    cfg = RunConfig(**TINY) if cfg is None else cfg
    if cfg.dropout > 0:
        raise DeterminismError(f"dropout is {cfg.dropout}; disable it (dropout=0) to check gradients")
    records, meshes = generate(SynthConfig(n_subjects=n_subjects, seed=seed))
    data = build_dataset(records, meshes, cfg.keypoints)
    n_image = 3 * len(cfg.keypoints)
    vocab = Vocabulary.build(templatize(r) for r in records)
    mean, std = feature_scaler(data.X[:, :n_image])
    model = DualEncoder(cfg, n_image, vocab, mean, std, seed=seed)
    # move off the symmetric all-zero gate initialisation
    if "gates.logits" in model.store:
        rng = np.random.default_rng([seed, 1])
        model.store["gates.logits"].data[:] = rng.normal(0.0, 0.5, size=model.store["gates.logits"].shape)
    batch = as_batch(data)
    return grad_check_report(lambda s: model.loss(batch, data.y, step=0, seed=seed)[0], model.store,
                             analytic_hook=hook)
