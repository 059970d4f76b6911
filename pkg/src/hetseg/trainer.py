"""Training methods for heterogeneously labelled databases.

Seven methods share one SGD loop:

* ``sl1``     cross entropy on the fully labelled database only
* ``sl12``    cross entropy on both databases, labels taken at face value
* ``ace``     adaptive cross entropy on both databases
* ``pl``      pseudo-label the partial database with an ``sl1`` model, retrain with CE
* ``ace_pl``  as ``pl`` but the labelling model is trained with ACE
* ``mt``      mean teacher; CE on the full database, consistency on every image
* ``ace_mt``  mean teacher with ACE as the classification term
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from hetseg import losses
from hetseg.labelspace import BACKGROUND, AnnotationProtocol, LabelSpace, non_annotated
from hetseg.netcore import (
    EmaState,
    ModelParams,
    NetConfig,
    backward,
    ema_from,
    ema_update,
    forward,
    init_params,
    load_checkpoint,
    new_sgd_state,
    save_checkpoint,
    sgd_step,
    softmax,
)
from hetseg.phantom import Dataset, ImageSample, with_samples

log = logging.getLogger(__name__)

METHODS = ("sl1", "sl12", "ace", "pl", "mt", "ace_pl", "ace_mt")
MEAN_TEACHER_METHODS = ("mt", "ace_mt")
DROPOUT_PROFILES = ("none", "last2", "all_but_first2")
DROPOUT_RATE = 0.5


class TrainingError(RuntimeError):
    pass


def dropout_rates(profile: str, n_layers: int = 7, rate: float = DROPOUT_RATE) -> tuple[float, ...]:
    """Per-layer input dropout for a named profile.

    ``last2`` drops the inputs of the last two hidden convolutions;
    ``all_but_first2`` drops the inputs of every layer after the first two,
    classifier included.
    """
    if profile == "none":
        return (0.0,) * n_layers
    if profile == "last2":
        return tuple(rate if n_layers - 3 <= i < n_layers - 1 else 0.0 for i in range(n_layers))
    if profile == "all_but_first2":
        return tuple(rate if i >= 2 else 0.0 for i in range(n_layers))
    raise ValueError(f"unknown dropout profile {profile!r}; expected one of {DROPOUT_PROFILES}")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sl1"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    ema_alpha: float = 0.99
    dropout: str | None = None  # None picks the method's default profile
    max_w: float = 1.0
    ramp_start: int = 3
    ramp_len: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in [0, 1)")
        if self.dropout is not None and self.dropout not in DROPOUT_PROFILES:
            raise ValueError(f"unknown dropout profile {self.dropout!r}")
        if self.max_w < 0 or self.ramp_len < 1 or self.ramp_start < 0:
            raise ValueError("consistency schedule needs max_w >= 0, ramp_start >= 0, ramp_len >= 1")

    @property
    def dropout_profile(self) -> str:
        if self.dropout is not None:
            return self.dropout
        return "all_but_first2" if self.method in MEAN_TEACHER_METHODS else "none"

    def net_config(self, num_classes: int) -> NetConfig:
        cfg = NetConfig(num_classes=num_classes)
        return cfg.with_dropout(dropout_rates(self.dropout_profile, cfg.n_layers))

    def weight(self, epoch: int) -> float:
        return losses.consistency_weight(epoch, self.max_w, self.ramp_start, self.ramp_len)


@dataclass
class EpochLog:
    epoch: int
    mean_cl_loss: float
    mean_con_loss: float
    consistency_weight: float


@dataclass
class TrainedModel:
    params: ModelParams
    net: NetConfig
    config: TrainConfig
    label_set: frozenset[int]  # classes annotated in any training database
    teacher: EmaState | None = None
    log: list[EpochLog] = field(default_factory=list)
    steps: int = 0
    extras: dict = field(default_factory=dict)

    def prediction_params(self, source: str = "student") -> ModelParams:
        if source == "student":
            return self.params
        if source == "teacher":
            if self.teacher is None:
                raise TrainingError(f"method {self.config.method} has no EMA teacher")
            return self.teacher.params
        raise ValueError(f"unknown parameter source {source!r}")


StepHook = Callable[[int, ModelParams, "EmaState | None"], None]


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent streams for batch sampling, student dropout and teacher dropout."""
    batch, student, teacher = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(batch), np.random.default_rng(student),
            np.random.default_rng(teacher))


def compose_batch(rng: np.random.Generator, db1: Dataset, db2: Dataset | None,
                  batch_size: int) -> list[tuple[ImageSample, AnnotationProtocol]]:
    """ceil(B/2) draws from ``db1`` and floor(B/2) from ``db2``, with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(db1.samples) == 0 or (db2 is not None and len(db2.samples) == 0):
        raise TrainingError("cannot draw a batch from an empty dataset")
    n1 = batch_size if db2 is None else math.ceil(batch_size / 2)
    picks = [(db1.samples[i], db1.protocol) for i in rng.integers(0, len(db1), size=n1)]
    if db2 is not None:
        n2 = batch_size - n1
        picks += [(db2.samples[i], db2.protocol) for i in rng.integers(0, len(db2), size=n2)]
    return picks


def _split_databases(databases) -> tuple[Dataset, Dataset | None]:
    dbs = list(databases)
    if not 1 <= len(dbs) <= 2:
        raise TrainingError(f"expected one or two training databases, got {len(dbs)}")
    if len(dbs) == 2 and dbs[0].space != dbs[1].space:
        raise TrainingError("training databases use different label spaces")
    return dbs[0], (dbs[1] if len(dbs) == 2 else None)


def _classification(kind: str, post: np.ndarray, sample: ImageSample,
                    proto: AnnotationProtocol, space: LabelSpace) -> losses.LossResult:
    if kind == "ce":
        return losses.ce_loss(post, sample.labels)
    if kind == "ace":
        return losses.ace_loss(post, sample.labels, proto, space)
    raise ValueError(f"unknown classification loss {kind!r}")


def _steps_per_epoch(db1: Dataset, db2: Dataset | None, batch_size: int) -> int:
    total = len(db1) + (len(db2) if db2 is not None else 0)
    return math.ceil(total / batch_size)


def _label_set(db1: Dataset, db2: Dataset | None) -> frozenset[int]:
    out = set(db1.protocol.annotated)
    if db2 is not None:
        out |= db2.protocol.annotated
    return frozenset(out)


def train_supervised(databases, loss_kind: str, cfg: TrainConfig,
                     on_step: StepHook | None = None) -> TrainedModel:
    """Plain SGD on CE or ACE over one or two databases."""
    if loss_kind not in ("ce", "ace"):
        raise ValueError(f"unknown classification loss {loss_kind!r}")
    db1, db2 = _split_databases(databases)
    space = db1.space
    net = cfg.net_config(space.num_classes)
    params = init_params(net, cfg.seed)
    opt = new_sgd_state(params)
    batch_rng, drop_rng, _ = _rngs(cfg.seed)
    train_mode = any(net.dropout_rates)
    n_steps = _steps_per_epoch(db1, db2, cfg.batch_size)

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(n_steps):
            batch = compose_batch(batch_rng, db1, db2, cfg.batch_size)
            images = np.stack([s.image for s, _ in batch])
            logits, trace = forward(params, images, net, drop_rng if train_mode else None)
            post = softmax(logits)
            grad = np.empty_like(logits)
            b = len(batch)
            batch_loss = 0.0
            for i, (sample, proto) in enumerate(batch):
                res = _classification(loss_kind, post[i], sample, proto, space)
                grad[i] = res.grad_logits / b
                batch_loss += res.loss / b
            sgd_step(params, backward(trace, grad), opt, cfg.lr, cfg.momentum)
            step += 1
            total += batch_loss
            if on_step is not None:
                on_step(step, params, None)
        history.append(EpochLog(epoch, total / n_steps, 0.0, 0.0))
        log.info("%s seed %d epoch %d: loss %.4f", cfg.method, cfg.seed, epoch, total / n_steps)
    return TrainedModel(params, net, cfg, _label_set(db1, db2), None, history, step)


def train_mean_teacher(databases, cl_loss_kind: str, cfg: TrainConfig,
                       on_step: StepHook | None = None) -> TrainedModel:
    """Student/teacher training; the teacher tracks an EMA of the student.

    With ``cl_loss_kind="ce"`` only images of the first database carry a
    classification term and the second database is used unlabelled. With
    ``"ace"`` every image is classified under its own protocol. The
    consistency term covers every image in the batch.
    """
    if cl_loss_kind not in ("ce", "ace"):
        raise ValueError(f"unknown classification loss {cl_loss_kind!r}")
    db1, db2 = _split_databases(databases)
    space = db1.space
    net = cfg.net_config(space.num_classes)
    params = init_params(net, cfg.seed)
    teacher = ema_from(params, cfg.ema_alpha)
    opt = new_sgd_state(params)
    batch_rng, student_rng, teacher_rng = _rngs(cfg.seed)
    train_mode = any(net.dropout_rates)
    n_steps = _steps_per_epoch(db1, db2, cfg.batch_size)
    labelled_db = db1.database_id

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        w = cfg.weight(epoch)
        cl_total = con_total = 0.0
        for _ in range(n_steps):
            batch = compose_batch(batch_rng, db1, db2, cfg.batch_size)
            images = np.stack([s.image for s, _ in batch])
            logits, trace = forward(params, images, net, student_rng if train_mode else None)
            t_logits, _ = forward(teacher.params, images, net,
                                  teacher_rng if train_mode else None, keep_trace=False)
            post, t_post = softmax(logits), softmax(t_logits)
            grad = np.empty_like(logits)
            b = len(batch)
            cl_loss = con_loss = 0.0
            for i, (sample, proto) in enumerate(batch):
                if cl_loss_kind == "ace" or proto.database_id == labelled_db:
                    cl = _classification(cl_loss_kind, post[i], sample, proto, space)
                    g_cl = cl.grad_logits / b
                    cl_loss += cl.loss / b
                else:
                    g_cl = np.zeros_like(post[i])
                con = losses.consistency_loss(post[i], t_post[i])
                grad[i] = g_cl + w * (con.grad_logits / b)
                con_loss += con.loss / b
            sgd_step(params, backward(trace, grad), opt, cfg.lr, cfg.momentum)
            ema_update(teacher, params)
            step += 1
            cl_total += cl_loss
            con_total += con_loss
            if on_step is not None:
                on_step(step, params, teacher)
        history.append(EpochLog(epoch, cl_total / n_steps, con_total / n_steps, w))
        log.info("%s seed %d epoch %d: cl %.4f con %.5f w %.2f", cfg.method, cfg.seed, epoch,
                 cl_total / n_steps, con_total / n_steps, w)
    return TrainedModel(params, net, cfg, _label_set(db1, db2), teacher, history, step)


def predict(params: ModelParams, images: np.ndarray, net: NetConfig,
            chunk: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode posteriors and argmax labels (ties go to the lowest class index)."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    posts = []
    for start in range(0, len(images), chunk):
        logits, _ = forward(params, images[start:start + chunk], net, keep_trace=False)
        posts.append(softmax(logits))
    post = np.concatenate(posts)
    labels = np.argmax(post, axis=1).astype(np.uint8)
    return (post[0], labels[0]) if single else (post, labels)


def make_pseudo_labels(models: list[TrainedModel], target: Dataset,
                       space: LabelSpace | None = None, source: str = "student") -> Dataset:
    """Complete the target's partial labels with fused model predictions.

    Posteriors of all models are averaged. A background pixel takes the
    fused argmax class when that class is one the target protocol leaves
    unannotated and some model was trained on it; every other pixel keeps
    its manual label.
    """
    if not models:
        raise TrainingError("pseudo-labelling needs at least one model")
    space = space or target.space
    for m in models:
        if m.net.num_classes != space.num_classes:
            raise TrainingError(
                f"model predicts {m.net.num_classes} classes, label space has {space.num_classes}"
            )
    predictable = frozenset().union(*(m.label_set for m in models))
    candidates = non_annotated(target.protocol, space) & predictable
    writable = np.zeros(space.num_classes + 1, dtype=bool)
    writable[sorted(candidates)] = True

    images = np.stack([s.image for s in target.samples])
    fused = None
    for m in models:
        post, _ = predict(m.prediction_params(source), images, m.net)
        fused = post if fused is None else fused + post
    fused /= len(models)
    guess = np.argmax(fused, axis=1)

    samples = []
    for s, g in zip(target.samples, guess):
        overwrite = (s.labels == BACKGROUND) & writable[g]
        labels = s.labels.copy()
        labels[overwrite] = g[overwrite]
        samples.append(ImageSample(s.image, labels, s.full_labels, s.database_id))
    proto = AnnotationProtocol(target.protocol.database_id,
                               target.protocol.annotated | predictable)
    out = with_samples(target, samples, protocol=proto, pseudo_labelled=True)
    out.check_labels()
    for cls, stats in pseudo_label_stats(target, out).items():
        log.info("pseudo-labels class %d: %d px overwritten, %.1f%% correct, %.1f%% recall",
                 cls, stats["overwritten"], 100 * stats["precision"], 100 * stats["recall"])
    return out


def pseudo_label_stats(original: Dataset, pseudo: Dataset) -> dict[int, dict[str, float]]:
    """Per-class count, precision and recall of overwritten pixels against the hidden truth."""
    out = {}
    for cls in sorted(non_annotated(original.protocol, original.space)):
        written = correct = truth = 0
        for a, b in zip(original.samples, pseudo.samples):
            changed = (a.labels != b.labels) & (b.labels == cls)
            written += int(changed.sum())
            correct += int((changed & (a.full_labels == cls)).sum())
            truth += int((a.full_labels == cls).sum())
        out[cls] = {
            "overwritten": written,
            "precision": correct / written if written else 0.0,
            "recall": correct / truth if truth else 0.0,
        }
    return out


def run_method(method: str, db1_train: Dataset, db2_train: Dataset | None, cfg: TrainConfig,
               initial: TrainedModel | None = None) -> TrainedModel:
    """Train one of the seven methods.

    ``initial`` optionally supplies the already trained labelling model for
    ``pl`` (an ``sl1`` run) or ``ace_pl`` (an ``ace`` run) with the same seed.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = replace(cfg, method=method)
    if method != "sl1" and db2_train is None:
        raise TrainingError(f"method {method} needs the second database")
    if method == "sl1":
        return train_supervised([db1_train], "ce", cfg)
    if method == "sl12":
        return train_supervised([db1_train, db2_train], "ce", cfg)
    if method == "ace":
        return train_supervised([db1_train, db2_train], "ace", cfg)
    if method == "mt":
        return train_mean_teacher([db1_train, db2_train], "ce", cfg)
    if method == "ace_mt":
        return train_mean_teacher([db1_train, db2_train], "ace", cfg)

    base = "sl1" if method == "pl" else "ace"
    if initial is None:
        initial = run_method(base, db1_train, db2_train, replace(cfg, dropout=None))
    elif initial.config.method != base:
        raise TrainingError(f"{method} needs a {base} labelling model, got {initial.config.method}")
    pseudo = make_pseudo_labels([initial], db2_train, db1_train.space)
    model = train_supervised([db1_train, pseudo], "ce", cfg)
    model.extras["pseudo_label_stats"] = pseudo_label_stats(db2_train, pseudo)
    return model


ABLATION_COLUMNS = ("ACE", "ACE+", "MT_t", "MT_s", "MT_s+")
# column -> (method, dropout profile, parameter source)
ABLATION_PLAN = {
    "ACE": ("ace", "none", "student"),
    "ACE+": ("ace", "all_but_first2", "student"),
    "MT_t": ("mt", "last2", "teacher"),
    "MT_s": ("mt", "last2", "student"),
    "MT_s+": ("mt", "all_but_first2", "student"),
}


def ablation_runs(cfg: TrainConfig) -> dict[tuple[str, str], TrainConfig]:
    """Distinct training runs behind the ablation table (MT_t and MT_s share one)."""
    runs = {}
    for method, profile, _ in ABLATION_PLAN.values():
        runs[(method, profile)] = replace(cfg, method=method, dropout=profile)
    return runs


def run_ablation(databases, test: Dataset, cfg: TrainConfig,
                 trained: dict[tuple[str, str], TrainedModel] | None = None) -> dict:
    """Dice per ablation column for one seed.

    ``trained`` may carry already finished runs keyed by (method, profile).
    Returns {column: MetricsRecord}.
    """
    from hetseg.evaluation import evaluate

    db1, db2 = _split_databases(databases)
    if db2 is None:
        raise TrainingError("the ablation needs both databases")
    models = dict(trained or {})
    for key, run_cfg in ablation_runs(cfg).items():
        if key not in models:
            models[key] = run_method(key[0], db1, db2, run_cfg)
    table = {}
    for col in ABLATION_COLUMNS:
        method, profile, source = ABLATION_PLAN[col]
        model = models[(method, profile)]
        table[col] = evaluate(model.prediction_params(source), test, db1.space, model.net,
                              cfg.seed)
    return table


# -- persistence -----------------------------------------------------------------

def save_model(model: TrainedModel, directory, extra_meta: dict | None = None) -> Path:
    directory = Path(directory)
    meta = dict(extra_meta or {})
    meta.update({
        "method": model.config.method,
        "seed": model.config.seed,
        "label_set": sorted(model.label_set),
        "train_config": {k: getattr(model.config, k) for k in model.config.__dataclass_fields__},
        "dropout_profile": model.config.dropout_profile,
    })
    save_checkpoint(directory, model.params, model.net, model.teacher, model.steps, meta)
    write_training_log(model.log, directory / "train_log.csv")
    return directory


def load_model(directory) -> TrainedModel:
    params, ema, net, manifest = load_checkpoint(directory)
    meta = manifest["meta"]
    cfg = TrainConfig(**meta["train_config"])
    return TrainedModel(params, net, cfg, frozenset(meta["label_set"]), ema, [],
                        manifest["step"])


def write_training_log(history: list[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_cl_loss", "mean_con_loss", "consistency_weight"])
        for e in history:
            writer.writerow([e.epoch, f"{e.mean_cl_loss:.8f}", f"{e.mean_con_loss:.8f}",
                             f"{e.consistency_weight:.6f}"])
